//! Proposal-quality metrics: class-agnostic average recall, pseudo-label
//! accuracy and cluster purity.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::bbox::Bbox;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor_store::AnnotatedImage;

pub const DEFAULT_AR_K: usize = 100;

/// `0.50, 0.55, ..., 0.95`, each the nearest double to `n / 100`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Recall of one image averaged over `thresholds`.
///
/// `proposals` must already be in rank order; only the first `k` are used. At
/// each threshold every proposal in turn claims the still-unmatched ground-truth
/// box it overlaps most, provided that IoU reaches the threshold.
pub fn image_recall<T: Real>(gt: &[Bbox<T>], proposals: &[Bbox<T>], k: usize, thresholds: &[T]) -> T {
    if gt.is_empty() || thresholds.is_empty() {
        return T::zero();
    }
    let top = &proposals[..proposals.len().min(k)];
    let ious: Vec<Vec<T>> = top.iter().map(|p| gt.iter().map(|g| p.iou(g)).collect()).collect();
    let mut total = T::zero();
    for &t in thresholds {
        let mut taken = vec![false; gt.len()];
        let mut matched = 0usize;
        for row in &ious {
            let mut best: Option<(usize, T)> = None;
            for (j, &v) in row.iter().enumerate() {
                if !taken[j] && v >= t && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
                matched += 1;
            }
        }
        total = total + T::from_usize_lossy(matched) / T::from_usize_lossy(gt.len());
    }
    total / T::from_usize_lossy(thresholds.len())
}

/// Proposal boxes of an image in rank order: score descending when scored
/// (stable), file order otherwise.
pub fn ranked_boxes(image: &AnnotatedImage) -> Vec<Bbox<f64>> {
    match &image.scores {
        Some(scores) => {
            let mut idx: Vec<usize> = (0..image.boxes.len()).collect();
            idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            idx.into_iter().map(|i| image.boxes[i]).collect()
        }
        None => image.boxes.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecall {
    pub image_id: String,
    pub recall: f64,
}

fn pair_images<'a>(
    gt: &'a [AnnotatedImage],
    other: &'a [AnnotatedImage],
) -> Result<Vec<(&'a AnnotatedImage, &'a AnnotatedImage)>> {
    let index: HashMap<&str, &AnnotatedImage> = other.iter().map(|i| (i.image_id.as_str(), i)).collect();
    if index.len() != other.len() {
        return Err(Error::invalid("duplicate image ids"));
    }
    if gt.len() != other.len() {
        return Err(Error::invalid(format!("{} ground-truth images but {} others", gt.len(), other.len())));
    }
    gt.iter()
        .map(|g| {
            index
                .get(g.image_id.as_str())
                .map(|o| (g, *o))
                .ok_or_else(|| Error::invalid(format!("image {} missing", g.image_id)))
        })
        .collect()
}

/// Per-image recall at `k` for every image with at least one ground-truth box.
pub fn recall_per_image(
    gt: &[AnnotatedImage],
    props: &[AnnotatedImage],
    k: usize,
    thresholds: &[f64],
) -> Result<Vec<ImageRecall>> {
    Ok(pair_images(gt, props)?
        .into_iter()
        .filter(|(g, _)| !g.boxes.is_empty())
        .map(|(g, p)| ImageRecall {
            image_id: g.image_id.clone(),
            recall: image_recall(&g.boxes, &ranked_boxes(p), k, thresholds),
        })
        .collect())
}

/// Class-agnostic AR@k: mean over images with ground truth of the
/// threshold-averaged recall. Zero when no image has ground truth.
pub fn average_recall(gt: &[AnnotatedImage], props: &[AnnotatedImage], k: usize, thresholds: &[f64]) -> Result<f64> {
    let per = recall_per_image(gt, props, k, thresholds)?;
    if per.is_empty() {
        return Ok(0.0);
    }
    Ok(per.iter().map(|r| r.recall).sum::<f64>() / per.len() as f64)
}

/// Fraction of annotations whose predicted label equals the assigned pseudo-label.
///
/// Annotations correspond by image id and position; their boxes must agree.
pub fn pseudo_label_accuracy(predictions: &[AnnotatedImage], gt_pseudo: &[AnnotatedImage]) -> Result<f64> {
    let mut total = 0usize;
    let mut agree = 0usize;
    for (g, p) in pair_images(gt_pseudo, predictions)? {
        if g.boxes.len() != p.boxes.len() {
            return Err(Error::invalid(format!(
                "image {}: {} assigned vs {} predicted annotations",
                g.image_id,
                g.boxes.len(),
                p.boxes.len()
            )));
        }
        for (i, (gb, pb)) in g.boxes.iter().zip(&p.boxes).enumerate() {
            if gb.to_array().iter().zip(pb.to_array()).any(|(a, b)| (a - b).abs() > 1e-6) {
                return Err(Error::invalid(format!("image {}: annotation {i} boxes differ", g.image_id)));
            }
        }
        total += g.labels.len();
        agree += g.labels.iter().zip(&p.labels).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        return Err(Error::invalid("no annotations to compare"));
    }
    Ok(agree as f64 / total as f64)
}

/// `Σ_clusters (largest class count) / N`.
pub fn cluster_purity(labels: &[u32], true_classes: &[u32]) -> Result<f64> {
    if labels.len() != true_classes.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), got: true_classes.len() });
    }
    if labels.is_empty() {
        return Err(Error::invalid("purity of an empty labeling"));
    }
    let mut counts: HashMap<u32, HashMap<u32, usize>> = HashMap::new();
    for (&l, &c) in labels.iter().zip(true_classes) {
        *counts.entry(l).or_default().entry(c).or_default() += 1;
    }
    let majority: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Ok(majority as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ar_at_k: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub purity: Option<f64>,
    pub per_image_recall: Vec<ImageRecall>,
}
