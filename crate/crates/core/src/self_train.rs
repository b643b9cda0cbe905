//! Turning raw detector output into the next pseudo-labeled training set.
//!
//! No confidence threshold is applied: the `top_k` highest-scoring boxes are
//! kept and then thinned class-agnostically so that no two survivors overlap
//! with IoU at or above `iou_max`, the more confident box winning each conflict.

use std::cmp::Ordering;

use crate::bbox::Bbox;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor_store::AnnotatedImage;

pub const DEFAULT_TOP_K: usize = 100;
pub const DEFAULT_IOU_MAX: f64 = 0.55;
/// Recommended number of training stages (initial pretraining plus one self-training round).
pub const DEFAULT_STAGES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox<T> {
    pub bbox: Bbox<T>,
    pub label: u32,
    pub score: T,
}

/// Score descending, then box `x`, then `y` ascending.
fn rank<T: Real>(a: &ScoredBox<T>, b: &ScoredBox<T>) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.bbox.x.partial_cmp(&b.bbox.x).unwrap_or(Ordering::Equal))
        .then(a.bbox.y.partial_cmp(&b.bbox.y).unwrap_or(Ordering::Equal))
}

fn check_params(top_k: usize, iou_max: f64) -> Result<()> {
    if top_k == 0 {
        return Err(Error::invalid("top_k must be at least 1"));
    }
    if !(iou_max > 0.0 && iou_max <= 1.0) {
        return Err(Error::invalid(format!("iou_max = {iou_max} outside (0, 1]")));
    }
    Ok(())
}

/// Top-`top_k` by score, then greedy overlap suppression. Output is in rank order.
pub fn filter_predictions<T: Real>(preds: &[ScoredBox<T>], top_k: usize, iou_max: T) -> Result<Vec<ScoredBox<T>>> {
    check_params(top_k, iou_max.as_f64())?;
    if let Some(p) = preds.iter().find(|p| !(p.score.is_finite() && p.score >= T::zero() && p.score <= T::one())) {
        return Err(Error::invalid(format!("score {} outside [0, 1]", p.score)));
    }
    let mut ranked = preds.to_vec();
    ranked.sort_by(rank);
    ranked.truncate(top_k);
    let mut kept: Vec<ScoredBox<T>> = Vec::with_capacity(ranked.len());
    for cand in ranked {
        if kept.iter().all(|k| k.bbox.iou(&cand.bbox) < iou_max) {
            kept.push(cand);
        }
    }
    Ok(kept)
}

/// Scored boxes of an annotated image; unscored images count as score 1.
pub fn scored_boxes(image: &AnnotatedImage) -> Vec<ScoredBox<f64>> {
    image
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| ScoredBox {
            bbox: *b,
            label: image.labels[i],
            score: image.scores.as_ref().map_or(1.0, |s| s[i]),
        })
        .collect()
}

/// Filters every image's detections; images without detections are kept empty.
pub fn build_next_training_set(predictions: &[AnnotatedImage], top_k: usize, iou_max: f64) -> Result<Vec<AnnotatedImage>> {
    check_params(top_k, iou_max)?;
    predictions
        .iter()
        .map(|img| {
            img.validate(None)?;
            let kept = filter_predictions(&scored_boxes(img), top_k, iou_max)?;
            let mut out = AnnotatedImage::empty(img.image_id.clone(), img.width, img.height);
            if !kept.is_empty() {
                out.boxes = kept.iter().map(|k| k.bbox).collect();
                out.labels = kept.iter().map(|k| k.label).collect();
                out.scores = Some(kept.iter().map(|k| k.score).collect());
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sb(x: f64, y: f64, s: f64) -> ScoredBox<f64> {
        ScoredBox { bbox: Bbox::new(x, y, 1.0, 1.0), label: 0, score: s }
    }

    #[test]
    fn duplicate_keeps_more_confident() {
        let out = filter_predictions(&[sb(0.0, 0.0, 0.8), sb(0.0, 0.0, 0.9)], 100, 0.55).unwrap();
        assert_eq!(out, vec![sb(0.0, 0.0, 0.9)]);
    }

    #[test]
    fn low_scores_are_not_thresholded() {
        let out = filter_predictions(&[sb(0.0, 0.0, 0.9), sb(5.0, 5.0, 0.001)], 100, 0.55).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn ties_break_on_coordinates() {
        let out = filter_predictions(&[sb(0.5, 0.0, 0.7), sb(0.0, 0.0, 0.7)], 100, 0.2).unwrap();
        assert_eq!(out, vec![sb(0.0, 0.0, 0.7)]);
    }

    #[test]
    fn labels_do_not_protect_overlaps() {
        let mut b = sb(0.0, 0.0, 0.5);
        b.label = 3;
        let out = filter_predictions(&[sb(0.0, 0.0, 0.6), b], 100, 0.55).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].label, 0);
    }

    #[test]
    fn parameter_checks() {
        assert!(filter_predictions(&[sb(0.0, 0.0, 0.5)], 0, 0.5).is_err());
        assert!(filter_predictions(&[sb(0.0, 0.0, 0.5)], 1, 0.0).is_err());
        assert!(filter_predictions(&[sb(0.0, 0.0, 1.5)], 1, 0.5).is_err());
    }

    #[test]
    fn empty_image_retained() {
        let imgs = vec![AnnotatedImage::empty("e", 4, 4)];
        assert_eq!(build_next_training_set(&imgs, 100, 0.55).unwrap(), imgs);
    }
}
