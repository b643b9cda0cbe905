//! Binary multi-level feature-map container (`.fms`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FMS1"
//! u16 id_len, id_len bytes of UTF-8 image id
//! u32 level_count
//! level_count x (u32 level, u32 channels, u32 height, u32 width)
//! f32 data blocks, one per level, in header order
//! ```
//!
//! Each data block is channel-major: value `(c, y, x)` sits at `c*H*W + y*W + x`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FMS_MAGIC: [u8; 4] = *b"FMS1";

/// One encoder level: `channels x height x width` values, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub level: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(level: u32, channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let map = Self { level, channels, height, width, data };
        map.validate()?;
        Ok(map)
    }

    /// Builds a map from per-pixel vectors in row-major pixel order.
    pub fn from_pixel_vectors(level: u32, height: usize, width: usize, pixels: &[Vec<f32>]) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::DimensionMismatch { expected: height * width, got: pixels.len() });
        }
        let channels = pixels.first().map_or(0, Vec::len);
        let hw = height * width;
        let mut data = vec![0.0f32; channels * hw];
        for (p, v) in pixels.iter().enumerate() {
            if v.len() != channels {
                return Err(Error::DimensionMismatch { expected: channels, got: v.len() });
            }
            for (c, &val) in v.iter().enumerate() {
                data[c * hw + p] = val;
            }
        }
        Self::new(level, channels, height, width, data)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid(format!(
                "level {}: dimensions must be positive, got d={} H={} W={}",
                self.level, self.channels, self.height, self.width
            )));
        }
        let expected = self
            .channels
            .checked_mul(self.height)
            .and_then(|v| v.checked_mul(self.width))
            .ok_or_else(|| Error::invalid(format!("level {}: dimensions overflow", self.level)))?;
        if self.data.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: self.data.len() });
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("level {} at flat index {i}", self.level)));
        }
        Ok(())
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    /// Feature vector of pixel `(y, x)`.
    pub fn pixel_vector(&self, y: usize, x: usize) -> Vec<f32> {
        let hw = self.pixel_count();
        let p = y * self.width + x;
        (0..self.channels).map(|c| self.data[c * hw + p]).collect()
    }

    /// All pixel vectors in row-major pixel order.
    pub fn pixel_vectors(&self) -> Vec<Vec<f32>> {
        let hw = self.pixel_count();
        (0..hw)
            .map(|p| (0..self.channels).map(|c| self.data[c * hw + p]).collect())
            .collect()
    }
}

/// Per-image set of feature maps ordered shallow to deep.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub image_id: String,
    pub levels: Vec<FeatureMap>,
}

impl FeatureStack {
    pub fn new(image_id: impl Into<String>, levels: Vec<FeatureMap>) -> Result<Self> {
        let stack = Self { image_id: image_id.into(), levels };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::invalid("feature stack has no levels"));
        }
        if self.image_id.len() > u16::MAX as usize {
            return Err(Error::invalid("image id longer than 65535 bytes"));
        }
        for pair in self.levels.windows(2) {
            if pair[1].level <= pair[0].level {
                return Err(Error::invalid(format!(
                    "levels must be strictly increasing, found {} after {}",
                    pair[1].level, pair[0].level
                )));
            }
        }
        for map in &self.levels {
            map.validate()?;
            for dim in [map.channels, map.height, map.width] {
                if dim > u32::MAX as usize {
                    return Err(Error::invalid("dimension does not fit in u32"));
                }
            }
        }
        Ok(())
    }

    /// Deepest level, the one descriptors are pooled from.
    pub fn last(&self) -> &FeatureMap {
        self.levels.last().expect("validated stack has at least one level")
    }

    pub fn level(&self, level: u32) -> Option<&FeatureMap> {
        self.levels.iter().find(|m| m.level == level)
    }
}

/// Header of an `.fms` file without its data blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelHeader {
    pub level: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
}

pub fn encode_feature_stack(stack: &FeatureStack) -> Result<Vec<u8>> {
    stack.validate()?;
    let floats: usize = stack.levels.iter().map(|m| m.data.len()).sum();
    let mut out = Vec::with_capacity(4 + 2 + stack.image_id.len() + 4 + 16 * stack.levels.len() + 4 * floats);
    out.extend_from_slice(&FMS_MAGIC);
    out.extend_from_slice(&(stack.image_id.len() as u16).to_le_bytes());
    out.extend_from_slice(stack.image_id.as_bytes());
    out.extend_from_slice(&(stack.levels.len() as u32).to_le_bytes());
    for m in &stack.levels {
        for v in [m.level, m.channels as u32, m.height as u32, m.width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for m in &stack.levels {
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} available",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode_prefix(bytes: &[u8]) -> Result<(String, Vec<LevelHeader>, Reader<'_>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != FMS_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(&FMS_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let id_len = r.u16("image id length")? as usize;
    let image_id = std::str::from_utf8(r.take(id_len, "image id")?)
        .map_err(|e| Error::schema(format!("image id is not UTF-8: {e}")))?
        .to_owned();
    let count = r.u32("level count")? as usize;
    if count == 0 {
        return Err(Error::schema("level count is zero"));
    }
    // 16 bytes per header must be present before allocating.
    if (bytes.len() - r.pos) / 16 < count {
        return Err(Error::Truncated(format!("{count} level headers")));
    }
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        headers.push(LevelHeader {
            level: r.u32("level index")?,
            channels: r.u32("channels")?,
            height: r.u32("height")?,
            width: r.u32("width")?,
        });
    }
    Ok((image_id, headers, r))
}

pub fn decode_feature_stack(bytes: &[u8]) -> Result<FeatureStack> {
    let (image_id, headers, mut r) = decode_prefix(bytes)?;
    let mut levels = Vec::with_capacity(headers.len());
    for h in &headers {
        let n = (h.channels as u64) * (h.height as u64) * (h.width as u64);
        let nbytes = n
            .checked_mul(4)
            .and_then(|v| usize::try_from(v).ok())
            .ok_or_else(|| Error::schema("level size overflows"))?;
        let raw = r.take(nbytes, &format!("data block of level {}", h.level))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        levels.push(FeatureMap {
            level: h.level,
            channels: h.channels as usize,
            height: h.height as usize,
            width: h.width as usize,
            data,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::schema(format!("{} trailing bytes after last data block", bytes.len() - r.pos)));
    }
    let stack = FeatureStack { image_id, levels };
    stack.validate()?;
    Ok(stack)
}

/// Parses only the id and level headers, checking that the declared data is present.
pub fn decode_header(bytes: &[u8]) -> Result<(String, Vec<LevelHeader>)> {
    let (image_id, headers, r) = decode_prefix(bytes)?;
    let need: u64 = headers
        .iter()
        .map(|h| 4 * (h.channels as u64) * (h.height as u64) * (h.width as u64))
        .sum();
    let have = (bytes.len() - r.pos) as u64;
    if have < need {
        return Err(Error::Truncated(format!("data blocks: need {need} bytes, {have} available")));
    }
    if have > need {
        return Err(Error::schema(format!("{} trailing bytes after last data block", have - need)));
    }
    Ok((image_id, headers))
}

pub fn write_feature_stack(stack: &FeatureStack, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_feature_stack(stack)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_feature_stack(path: impl AsRef<Path>) -> Result<FeatureStack> {
    decode_feature_stack(&fs::read(path)?)
}

pub fn read_header(path: impl AsRef<Path>) -> Result<(String, Vec<LevelHeader>)> {
    decode_header(&fs::read(path)?)
}
