//! COCO-style annotation documents.
//!
//! Images get 1-based numeric ids in list order and carry the string image id
//! as `file_name`. Annotation ids are 1-based in image order, then box order,
//! so identical input always serializes to identical bytes. Categories are
//! `0..C` named `pseudo_<id>`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::Bbox;
use crate::error::{Error, Result};

/// Pixel-space tolerance for box-inside-image checks.
pub const BOUNDS_TOLERANCE: f64 = 1e-6;

/// One image of a training set with absolute-pixel boxes and pseudo-class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<Bbox<f64>>,
    pub labels: Vec<u32>,
    /// Either absent or one score per box. Empty images never carry scores.
    pub scores: Option<Vec<f64>>,
}

impl AnnotatedImage {
    pub fn empty(image_id: impl Into<String>, width: u32, height: u32) -> Self {
        Self { image_id: image_id.into(), width, height, boxes: Vec::new(), labels: Vec::new(), scores: None }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Checks the per-image invariants; `classes` bounds the labels when given.
    pub fn validate(&self, classes: Option<usize>) -> Result<()> {
        if self.labels.len() != self.boxes.len() {
            return Err(Error::invalid(format!(
                "image {}: {} boxes but {} labels",
                self.image_id,
                self.boxes.len(),
                self.labels.len()
            )));
        }
        if let Some(scores) = &self.scores {
            if scores.len() != self.boxes.len() {
                return Err(Error::invalid(format!(
                    "image {}: {} boxes but {} scores",
                    self.image_id,
                    self.boxes.len(),
                    scores.len()
                )));
            }
            if let Some(s) = scores.iter().find(|s| !(s.is_finite() && (0.0..=1.0).contains(*s))) {
                return Err(Error::invalid(format!("image {}: score {s} outside [0, 1]", self.image_id)));
            }
        }
        for b in &self.boxes {
            check_box(b, self.width, self.height, &self.image_id)?;
        }
        if let Some(c) = classes {
            if let Some(l) = self.labels.iter().find(|&&l| l as usize >= c) {
                return Err(Error::invalid(format!(
                    "image {}: label {l} out of range for {c} classes",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

fn check_box(b: &Bbox<f64>, width: u32, height: u32, image_id: &str) -> Result<()> {
    let (w, h) = (width as f64, height as f64);
    let ok = b.is_proper()
        && b.x >= 0.0
        && b.y >= 0.0
        && b.x2() <= w + BOUNDS_TOLERANCE
        && b.y2() <= h + BOUNDS_TOLERANCE;
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "image {image_id}: box [{}, {}, {}, {}] invalid or outside {width}x{height}",
            b.x, b.y, b.w, b.h
        )))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDocument {
    pub fn from_images(set: &[AnnotatedImage], classes: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for img in set {
            img.validate(Some(classes))?;
            if !seen.insert(img.image_id.as_str()) {
                return Err(Error::invalid(format!("duplicate image id {}", img.image_id)));
            }
        }
        let images = set
            .iter()
            .enumerate()
            .map(|(i, img)| CocoImage {
                id: i as u64 + 1,
                file_name: img.image_id.clone(),
                width: img.width,
                height: img.height,
            })
            .collect();
        let mut annotations = Vec::new();
        for (i, img) in set.iter().enumerate() {
            for (k, (b, &label)) in img.boxes.iter().zip(&img.labels).enumerate() {
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64 + 1,
                    image_id: i as u64 + 1,
                    category_id: label,
                    bbox: b.to_array(),
                    score: img.scores.as_ref().map(|s| s[k]),
                });
            }
        }
        let categories = (0..classes as u32)
            .map(|id| CocoCategory { id, name: format!("pseudo_{id}") })
            .collect();
        Ok(Self { images, annotations, categories })
    }

    /// Validates the document and converts it back into annotated images.
    pub fn into_images(self) -> Result<(Vec<AnnotatedImage>, usize)> {
        let classes = self.categories.len();
        let mut cat_ids = HashSet::new();
        for c in &self.categories {
            if c.id as usize >= classes || !cat_ids.insert(c.id) {
                return Err(Error::schema(format!(
                    "category ids must be exactly 0..{classes}, found {}",
                    c.id
                )));
            }
        }
        let mut index = HashMap::new();
        let mut out = Vec::with_capacity(self.images.len());
        let mut names = HashSet::new();
        for img in &self.images {
            if index.insert(img.id, out.len()).is_some() {
                return Err(Error::schema(format!("duplicate image id {}", img.id)));
            }
            if !names.insert(img.file_name.clone()) {
                return Err(Error::schema(format!("duplicate file_name {}", img.file_name)));
            }
            out.push(AnnotatedImage::empty(img.file_name.clone(), img.width, img.height));
        }
        let mut scored: Vec<Option<bool>> = vec![None; out.len()];
        let mut ann_ids = HashSet::new();
        for a in self.annotations {
            if !ann_ids.insert(a.id) {
                return Err(Error::schema(format!("duplicate annotation id {}", a.id)));
            }
            let &slot = index
                .get(&a.image_id)
                .ok_or_else(|| Error::schema(format!("annotation {} references unknown image {}", a.id, a.image_id)))?;
            if a.category_id as usize >= classes {
                return Err(Error::schema(format!(
                    "annotation {} has category {} but only {classes} categories",
                    a.id, a.category_id
                )));
            }
            match (scored[slot], a.score.is_some()) {
                (None, s) => scored[slot] = Some(s),
                (Some(prev), s) if prev != s => {
                    return Err(Error::schema(format!(
                        "image {}: annotations mix scored and unscored entries",
                        out[slot].image_id
                    )))
                }
                _ => {}
            }
            let img = &mut out[slot];
            let b = Bbox::from_array(a.bbox);
            check_box(&b, img.width, img.height, &img.image_id).map_err(|e| Error::schema(e.to_string()))?;
            img.boxes.push(b);
            img.labels.push(a.category_id);
            if let Some(s) = a.score {
                if !(s.is_finite() && (0.0..=1.0).contains(&s)) {
                    return Err(Error::schema(format!("annotation {} score {s} outside [0, 1]", a.id)));
                }
                img.scores.get_or_insert_with(Vec::new).push(s);
            }
        }
        Ok((out, classes))
    }
}

pub fn encode_annotations(set: &[AnnotatedImage], classes: usize) -> Result<Vec<u8>> {
    let doc = CocoDocument::from_images(set, classes)?;
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn decode_annotations(bytes: &[u8]) -> Result<(Vec<AnnotatedImage>, usize)> {
    let doc: CocoDocument = serde_json::from_slice(bytes)?;
    doc.into_images()
}

/// Writes a training set; fails before touching the file if any label is `>= classes`.
pub fn write_annotations(set: &[AnnotatedImage], classes: usize, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_annotations(set, classes)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<(Vec<AnnotatedImage>, usize)> {
    decode_annotations(&fs::read(path)?)
}

/// Image reference inside a detection results array: numeric COCO id or image id string.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Id(u64),
    Name(String),
}

/// One entry of a COCO detection results array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub image_id: ImageRef,
    pub category_id: u32,
    pub bbox: [f64; 4],
    pub score: f64,
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<DetectionResult>> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Groups a results array onto the images of a reference document, keeping file order.
///
/// Every reference image appears in the output, with scores attached even when
/// it received no detections.
pub fn attach_results(reference: &CocoDocument, results: &[DetectionResult]) -> Result<Vec<AnnotatedImage>> {
    let classes = reference.categories.len();
    let mut by_id = HashMap::new();
    let mut by_name = HashMap::new();
    let mut out: Vec<AnnotatedImage> = Vec::with_capacity(reference.images.len());
    for (i, img) in reference.images.iter().enumerate() {
        by_id.insert(img.id, i);
        by_name.insert(img.file_name.as_str(), i);
        let mut a = AnnotatedImage::empty(img.file_name.clone(), img.width, img.height);
        a.scores = Some(Vec::new());
        out.push(a);
    }
    for (n, r) in results.iter().enumerate() {
        let slot = match &r.image_id {
            ImageRef::Id(id) => by_id.get(id).copied(),
            ImageRef::Name(name) => by_name.get(name.as_str()).copied(),
        }
        .ok_or_else(|| Error::schema(format!("result {n} references unknown image {:?}", r.image_id)))?;
        if r.category_id as usize >= classes {
            return Err(Error::schema(format!(
                "result {n} has category {} but only {classes} categories",
                r.category_id
            )));
        }
        if !(r.score.is_finite() && (0.0..=1.0).contains(&r.score)) {
            return Err(Error::schema(format!("result {n} score {} outside [0, 1]", r.score)));
        }
        let img = &mut out[slot];
        let b = Bbox::from_array(r.bbox);
        check_box(&b, img.width, img.height, &img.image_id).map_err(|e| Error::schema(e.to_string()))?;
        img.boxes.push(b);
        img.labels.push(r.category_id);
        img.scores.as_mut().unwrap().push(r.score);
    }
    for img in &mut out {
        if img.boxes.is_empty() {
            img.scores = None;
        }
    }
    Ok(out)
}

pub fn read_document(path: impl AsRef<Path>) -> Result<CocoDocument> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
