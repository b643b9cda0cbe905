//! Masks to regions to proposals, and proposal-set filtering.

use std::collections::VecDeque;

use crate::bbox::Bbox;
use crate::error::{Error, Result};
use crate::local_cluster::ClusterMask;
use crate::scalar::{cosine, l2_norm, Real};
use crate::tensor_store::FeatureMap;

pub const DEFAULT_IOU_MERGE: f64 = 0.75;
pub const DEFAULT_SIM_MERGE: f64 = 0.90;
pub const DEFAULT_MIN_REL_AREA: f64 = 0.001;

/// 4-connected set of same-label pixels of one mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub source_mask: usize,
    pub label: u32,
    pub grid_height: usize,
    pub grid_width: usize,
    /// `(y, x)` at the source level resolution, row-major order.
    pub pixels: Vec<(usize, usize)>,
}

/// Box in normalized image coordinates plus pooled deepest-level descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal<T> {
    pub bbox: Bbox<T>,
    pub descriptor: Vec<T>,
}

/// Splits each label of `mask` into its 4-connected components.
///
/// Regions are emitted in row-major order of their first pixel.
pub fn connected_components(mask: &ClusterMask) -> Vec<Region> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        let label = mask.labels[start];
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            pixels.push((y, x));
            let mut visit = |q: usize| {
                if !seen[q] && mask.labels[q] == label {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        pixels.sort_unstable();
        regions.push(Region { source_mask: 0, label, grid_height: h, grid_width: w, pixels });
    }
    regions
}

/// Regions of every mask, tagged with the mask's position in `masks`.
pub fn regions_of(masks: &[ClusterMask]) -> Vec<Region> {
    masks
        .iter()
        .enumerate()
        .flat_map(|(i, m)| {
            connected_components(m).into_iter().map(move |mut r| {
                r.source_mask = i;
                r
            })
        })
        .collect()
}

/// Bounding box of the region's pixel footprint and the mean of the deepest-level
/// vectors under it.
///
/// Region pixels map onto the deepest grid by nearest-neighbor scaling and each
/// contributes once, so the pooling is area-weighted. Returns `None` when the
/// pooled descriptor has zero norm.
pub fn region_to_proposal<T: Real>(region: &Region, last: &FeatureMap) -> Result<Option<Proposal<T>>> {
    let (gh, gw) = (region.grid_height, region.grid_width);
    if region.pixels.is_empty() {
        return Err(Error::invalid("empty region"));
    }
    if let Some(&(y, x)) = region.pixels.iter().find(|&&(y, x)| y >= gh || x >= gw) {
        return Err(Error::invalid(format!("region pixel ({y}, {x}) outside {gh}x{gw} grid")));
    }
    let (mut y1, mut x1, mut y2, mut x2) = (usize::MAX, usize::MAX, 0, 0);
    let hw = last.pixel_count();
    let mut sum = vec![T::zero(); last.channels];
    for &(y, x) in &region.pixels {
        y1 = y1.min(y);
        x1 = x1.min(x);
        y2 = y2.max(y);
        x2 = x2.max(x);
        let ly = (((y as f64 + 0.5) * last.height as f64 / gh as f64) as usize).min(last.height - 1);
        let lx = (((x as f64 + 0.5) * last.width as f64 / gw as f64) as usize).min(last.width - 1);
        let p = ly * last.width + lx;
        for (c, s) in sum.iter_mut().enumerate() {
            *s = *s + T::from_f32_lossy(last.data[c * hw + p]);
        }
    }
    let inv = T::one() / T::from_usize_lossy(region.pixels.len());
    let descriptor: Vec<T> = sum.into_iter().map(|s| s * inv).collect();
    if l2_norm(&descriptor) == T::zero() {
        return Ok(None);
    }
    let (fw, fh) = (T::from_usize_lossy(gw), T::from_usize_lossy(gh));
    let bbox = Bbox::from_corners(
        T::from_usize_lossy(x1) / fw,
        T::from_usize_lossy(y1) / fh,
        T::from_usize_lossy(x2 + 1) / fw,
        T::from_usize_lossy(y2 + 1) / fh,
    );
    Ok(Some(Proposal { bbox, descriptor }))
}

/// Thresholds of the proposal filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterConfig<T> {
    /// Pairs at or above this IoU are merged.
    pub iou_merge: T,
    /// Overlapping pairs at or above this descriptor cosine are merged.
    pub sim_merge: T,
    /// Proposals with normalized area below this are dropped.
    pub min_rel_area: T,
}

impl<T: Real> Default for FilterConfig<T> {
    fn default() -> Self {
        Self {
            iou_merge: T::lit(DEFAULT_IOU_MERGE),
            sim_merge: T::lit(DEFAULT_SIM_MERGE),
            min_rel_area: T::lit(DEFAULT_MIN_REL_AREA),
        }
    }
}

impl<T: Real> FilterConfig<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("iou_merge", self.iou_merge), ("sim_merge", self.sim_merge), ("min_rel_area", self.min_rel_area)] {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Merge criterion for a pair with the given IoU and descriptor cosine.
    pub fn should_merge(&self, iou: T, sim: T) -> bool {
        iou >= self.iou_merge || (iou > T::zero() && sim >= self.sim_merge)
    }
}

fn merge<T: Real>(a: &Proposal<T>, b: &Proposal<T>) -> Proposal<T> {
    let (wa, wb) = (a.bbox.area(), b.bbox.area());
    let total = wa + wb;
    let descriptor = a
        .descriptor
        .iter()
        .zip(&b.descriptor)
        .map(|(&x, &y)| (x * wa + y * wb) / total)
        .collect();
    Proposal { bbox: a.bbox.enclosing(&b.bbox), descriptor }
}

/// Drops tiny proposals, then greedily merges the qualifying pair with the highest
/// IoU (lowest `(i, j)` on ties) until no pair qualifies.
///
/// The merged proposal takes the lower index and the union box; its descriptor is
/// the area-weighted mean of the pair.
pub fn filter_proposals<T: Real>(props: Vec<Proposal<T>>, cfg: &FilterConfig<T>) -> Vec<Proposal<T>> {
    let mut items: Vec<Option<Proposal<T>>> = props
        .into_iter()
        .filter(|p| p.bbox.area() >= cfg.min_rel_area)
        .map(Some)
        .collect();
    let n = items.len();
    let pair = |a: &Proposal<T>, b: &Proposal<T>| (a.bbox.iou(&b.bbox), cosine(&a.descriptor, &b.descriptor));
    let mut cache = vec![(T::zero(), T::zero()); n * n];
    for i in 0..n {
        for j in i + 1..n {
            cache[i * n + j] = pair(items[i].as_ref().unwrap(), items[j].as_ref().unwrap());
        }
    }
    loop {
        let mut best: Option<(usize, usize, T)> = None;
        for i in 0..n {
            if items[i].is_none() {
                continue;
            }
            for j in i + 1..n {
                if items[j].is_none() {
                    continue;
                }
                let (iou, sim) = cache[i * n + j];
                if cfg.should_merge(iou, sim) && best.is_none_or(|(_, _, b)| iou > b) {
                    best = Some((i, j, iou));
                }
            }
        }
        let Some((i, j, _)) = best else { break };
        let b = items[j].take().unwrap();
        let merged = merge(items[i].as_ref().unwrap(), &b);
        items[i] = Some(merged);
        let mi = items[i].as_ref().unwrap();
        for (k, other) in items.iter().enumerate() {
            if k == i {
                continue;
            }
            if let Some(other) = other.as_ref() {
                let (lo, hi) = if k < i { (k, i) } else { (i, k) };
                cache[lo * n + hi] = if k < i { pair(other, mi) } else { pair(mi, other) };
            }
        }
    }
    items.into_iter().flatten().collect()
}
