use propkit::bbox::Bbox;
use propkit::self_train::{build_next_training_set, filter_predictions, ScoredBox, DEFAULT_IOU_MAX, DEFAULT_TOP_K};
use propkit::tensor_store::AnnotatedImage;
use proptest::prelude::*;

#[test]
fn defaults() {
    assert_eq!(DEFAULT_TOP_K, 100);
    assert_eq!(DEFAULT_IOU_MAX, 0.55);
}

/// Reference: rank, truncate, then keep a box iff it clears every higher-ranked kept box.
fn reference(preds: &[ScoredBox<f64>], k: usize, t: f64) -> Vec<ScoredBox<f64>> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| {
        let (p, q) = (&preds[a], &preds[b]);
        q.score.total_cmp(&p.score).then(p.bbox.x.total_cmp(&q.bbox.x)).then(p.bbox.y.total_cmp(&q.bbox.y)).then(a.cmp(&b))
    });
    let mut kept: Vec<ScoredBox<f64>> = Vec::new();
    for &i in idx.iter().take(k) {
        if kept.iter().all(|b| b.bbox.iou(&preds[i].bbox) < t) {
            kept.push(preds[i]);
        }
    }
    kept
}

#[test]
fn two_hundred_disjoint_boxes_keep_top_hundred() {
    let preds: Vec<ScoredBox<f64>> = (0..200)
        .map(|i| ScoredBox {
            bbox: Bbox::new((i % 20) as f64 * 2.0, (i / 20) as f64 * 2.0, 1.0, 1.0),
            label: (i % 7) as u32,
            score: ((i * 37) % 200) as f64 / 200.0,
        })
        .collect();
    let out = filter_predictions(&preds, 100, 0.55).unwrap();
    assert_eq!(out.len(), 100);
    assert_eq!(out, reference(&preds, 100, 0.55));
    let min_kept = out.iter().map(|b| b.score).fold(1.0, f64::min);
    assert_eq!(min_kept, 100.0 / 200.0);
}

fn boxes() -> impl Strategy<Value = Vec<ScoredBox<f64>>> {
    proptest::collection::vec(
        (0.0..40.0f64, 0.0..40.0f64, 1.0..15.0f64, 1.0..15.0f64, 0u32..5, 0.0..=1.0f64),
        0..150,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(x, y, w, h, label, score)| ScoredBox { bbox: Bbox::new(x, y, w, h), label, score })
            .collect()
    })
}

proptest! {
    #[test]
    fn filter_invariants(preds in boxes(), k in 1usize..120) {
        let out = filter_predictions(&preds, k, 0.55).unwrap();
        prop_assert!(out.len() <= k.min(preds.len()));
        for (i, a) in out.iter().enumerate() {
            prop_assert!(preds.contains(a));
            for b in &out[i + 1..] {
                prop_assert!(a.bbox.iou(&b.bbox) < 0.55);
            }
        }
        prop_assert_eq!(&filter_predictions(&out, k, 0.55).unwrap(), &out);
        prop_assert_eq!(&out, &reference(&preds, k, 0.55));
    }
}

#[test]
fn next_training_set_is_idempotent_and_keeps_scores() {
    let img = AnnotatedImage {
        image_id: "x".into(),
        width: 100,
        height: 100,
        boxes: vec![Bbox::new(0.0, 0.0, 10.0, 10.0), Bbox::new(1.0, 1.0, 10.0, 10.0), Bbox::new(50.0, 50.0, 5.0, 5.0)],
        labels: vec![3, 4, 5],
        scores: Some(vec![0.2, 0.6, 0.001]),
    };
    let once = build_next_training_set(&[img, AnnotatedImage::empty("y", 5, 5)], 100, 0.55).unwrap();
    assert_eq!(once[0].labels, vec![4, 5]);
    assert_eq!(once[0].scores, Some(vec![0.6, 0.001]));
    assert!(once[1].is_empty());
    assert_eq!(build_next_training_set(&once, 100, 0.55).unwrap(), once);
}
