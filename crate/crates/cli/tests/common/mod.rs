//! Synthetic feature stacks with planted rectangular objects.
#![allow(dead_code)]

use std::fs;
use std::path::Path;

use propkit::bbox::Bbox;
use propkit::tensor_store::{write_annotations, write_feature_stack, AnnotatedImage, FeatureMap, FeatureStack};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRID: usize = 8;
pub const IMAGE: u32 = 128;
pub const CLASSES: usize = 3;
const NOISE: f32 = 0.02;

/// Object footprint in deep-grid cells.
#[derive(Clone, Copy, Debug)]
pub struct Planted {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub class: u32,
}

impl Planted {
    fn contains(&self, y: usize, x: usize) -> bool {
        (self.x..self.x + self.w).contains(&x) && (self.y..self.y + self.h).contains(&y)
    }

    /// Overlap after growing `self` by one cell on every side.
    fn touches(&self, o: &Planted) -> bool {
        self.x < o.x + o.w + 1 && o.x < self.x + self.w + 1 && self.y < o.y + o.h + 1 && o.y < self.y + self.h + 1
    }

    pub fn pixel_box(&self) -> Bbox<f64> {
        let cell = IMAGE as f64 / GRID as f64;
        Bbox::new(self.x as f64 * cell, self.y as f64 * cell, self.w as f64 * cell, self.h as f64 * cell)
    }
}

pub fn plant(rng: &mut ChaCha8Rng) -> Vec<Planted> {
    let count = rng.random_range(1..=2);
    let mut classes: Vec<u32> = (0..CLASSES as u32).collect();
    let mut out: Vec<Planted> = Vec::new();
    while out.len() < count {
        let (w, h) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let p = Planted {
            x: rng.random_range(0..=GRID - w),
            y: rng.random_range(0..=GRID - h),
            w,
            h,
            class: classes.swap_remove(rng.random_range(0..classes.len())),
        };
        if out.iter().all(|o| !o.touches(&p)) {
            out.push(p);
        } else {
            classes.push(p.class);
        }
    }
    out
}

/// Level with `per_class` channels per class plus a background block, on an `s * GRID` square grid.
fn level(rng: &mut ChaCha8Rng, index: u32, scale: usize, per_class: usize, objects: &[Planted]) -> FeatureMap {
    let side = GRID * scale;
    let d = per_class * (CLASSES + 1);
    let px: Vec<Vec<f32>> = (0..side * side)
        .map(|p| {
            let (y, x) = (p / side / scale, p % side / scale);
            let block = objects.iter().find(|o| o.contains(y, x)).map_or(CLASSES, |o| o.class as usize);
            (0..d)
                .map(|c| if c / per_class == block { 1.0 } else { 0.0 } + rng.random_range(0.0..NOISE))
                .collect()
        })
        .collect();
    FeatureMap::from_pixel_vectors(index, side, side, &px).unwrap()
}

/// Two-level stack (16x16x8 then 8x8x16) and its planted ground truth.
pub fn synthetic_image(seed: u64, index: usize) -> (FeatureStack, AnnotatedImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
    let objects = plant(&mut rng);
    let id = format!("img{index:04}");
    let levels = vec![level(&mut rng, 0, 2, 2, &objects), level(&mut rng, 1, 1, 4, &objects)];
    let stack = FeatureStack::new(id.clone(), levels).unwrap();
    let mut gt = AnnotatedImage::empty(id, IMAGE, IMAGE);
    for o in &objects {
        gt.boxes.push(o.pixel_box());
        gt.labels.push(o.class);
    }
    (stack, gt)
}

/// Writes `n` stacks, a size manifest and `gt.json` under `dir`; returns the ground truth.
pub fn write_dataset(dir: &Path, n: usize, seed: u64) -> Vec<AnnotatedImage> {
    let feats = dir.join("features");
    fs::create_dir_all(&feats).unwrap();
    let mut gt = Vec::with_capacity(n);
    let mut manifest = Vec::new();
    for i in 0..n {
        let (stack, g) = synthetic_image(seed, i);
        write_feature_stack(&stack, feats.join(format!("{}.fms", stack.image_id))).unwrap();
        manifest.push(serde_json::json!({ "image_id": g.image_id, "width": g.width, "height": g.height }));
        gt.push(g);
    }
    fs::write(feats.join("manifest.json"), serde_json::json!({ "images": manifest }).to_string()).unwrap();
    write_annotations(&gt, CLASSES, dir.join("gt.json")).unwrap();
    gt
}

/// Runs the `propkit` binary, returning exit code, stdout and stderr.
pub fn propkit(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_propkit")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Ground truth, a results array with `queries` predictions per image and the
/// matching logit sidecars; returns `(gt.json, preds.json, logits/)`.
pub fn write_loss_fixture(
    dir: &Path,
    seed: u64,
    images: usize,
    queries: usize,
    classes: usize,
) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = dir.join("logits");
    fs::create_dir_all(&logits).unwrap();
    let mut gt = Vec::new();
    let mut results = Vec::new();
    let random_box = |rng: &mut ChaCha8Rng| {
        let (w, h) = (rng.random_range(8.0..60.0), rng.random_range(8.0..60.0));
        [rng.random_range(0.0..100.0 - w), rng.random_range(0.0..100.0 - h), w, h]
    };
    for i in 0..images {
        let id = format!("q{i:03}");
        let mut g = AnnotatedImage::empty(id.clone(), 100, 100);
        for _ in 0..rng.random_range(0..=queries) {
            g.boxes.push(Bbox::from_array(random_box(&mut rng)));
            g.labels.push(rng.random_range(0..classes as u32));
        }
        gt.push(g);
        for _ in 0..queries {
            results.push(serde_json::json!({
                "image_id": id, "category_id": 0, "bbox": random_box(&mut rng), "score": rng.random_range(0.0..1.0),
            }));
        }
        let data: Vec<f32> = (0..(classes + 1) * queries).map(|_| rng.random_range(-3.0..3.0)).collect();
        let level = FeatureMap::new(0, classes + 1, queries, 1, data).unwrap();
        write_feature_stack(&FeatureStack::new(id.clone(), vec![level]).unwrap(), logits.join(format!("{id}.fms"))).unwrap();
    }
    let (g, p) = (dir.join("gt.json"), dir.join("preds.json"));
    write_annotations(&gt, classes, &g).unwrap();
    fs::write(&p, serde_json::to_string(&results).unwrap()).unwrap();
    (g, p, logits)
}

/// Copy of an annotation document with seeded scores on every annotation.
pub fn with_scores(src: &Path, dst: &Path, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut doc: serde_json::Value = serde_json::from_slice(&fs::read(src).unwrap()).unwrap();
    for a in doc["annotations"].as_array_mut().unwrap() {
        a["score"] = serde_json::json!(rng.random_range(0.0..1.0));
    }
    fs::write(dst, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
}
