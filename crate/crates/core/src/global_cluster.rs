//! Dataset-wide K-Means over proposal descriptors and pseudo-label assignment.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bbox::Bbox;
use crate::error::{Error, Result};
use crate::region_ops::Proposal;
use crate::scalar::{mix_seed, squared_distance, Real};
use crate::tensor_store::AnnotatedImage;

/// Pseudo-class count used for full-scale pretraining runs.
pub const DEFAULT_CLASSES: usize = 2048;
pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-4;

pub const PLM_MAGIC: [u8; 4] = *b"PLM1";

/// Dense row-major matrix, one observation per row.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMatrix<T> {
    data: Vec<T>,
    dim: usize,
}

impl<T: Real> RowMatrix<T> {
    pub fn new(data: Vec<T>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("row dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!("{} values do not split into rows of {dim}", data.len())));
        }
        Ok(Self { data, dim })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(dim * rows.len());
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(data, dim)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `C` centroids from a K-Means fit; maps descriptors to pseudo-class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelModel<T> {
    pub centroids: RowMatrix<T>,
    pub inertia: T,
    pub seed: u64,
}

impl<T: Real> PseudoLabelModel<T> {
    pub fn classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    /// Index of the nearest centroid, lowest index on ties, with its squared distance.
    pub fn nearest(&self, x: &[T]) -> (u32, T) {
        nearest(&self.centroids, x)
    }
}

/// Full outcome of a fit: the model plus the training labels and per-iteration inertia.
#[derive(Clone, Debug)]
pub struct KMeansFit<T> {
    pub model: PseudoLabelModel<T>,
    pub labels: Vec<u32>,
    /// Inertia after every assignment step of the winning restart, final assignment last.
    pub inertia_history: Vec<T>,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansParams {
    pub max_iter: usize,
    pub tol: f64,
    /// Independent restarts; the lowest final inertia wins.
    pub n_init: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self { max_iter: DEFAULT_MAX_ITER, tol: DEFAULT_TOL, n_init: 1 }
    }
}

fn nearest<T: Real>(centroids: &RowMatrix<T>, x: &[T]) -> (u32, T) {
    let mut best = 0u32;
    let mut best_d = T::infinity();
    for (j, c) in centroids.rows().enumerate() {
        let d = squared_distance(x, c);
        if d < best_d {
            best_d = d;
            best = j as u32;
        }
    }
    (best, best_d)
}

fn assign_all<T: Real>(centroids: &RowMatrix<T>, features: &RowMatrix<T>) -> (Vec<u32>, Vec<T>) {
    (0..features.len())
        .into_par_iter()
        .map(|i| nearest(centroids, features.row(i)))
        .unzip()
}

fn sequential_sum<T: Real>(values: &[T]) -> T {
    values.iter().fold(T::zero(), |acc, &v| acc + v)
}

/// k-means++ seeding driven by a ChaCha stream derived from `seed`.
fn plus_plus_init<T: Real>(features: &RowMatrix<T>, c: usize, seed: u64) -> RowMatrix<T> {
    let n = features.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut picks = vec![first];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(features.row(i), features.row(first)).as_f64())
        .collect();
    while picks.len() < c {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive entry")
        } else {
            // every remaining point duplicates a chosen one
            chosen.iter().position(|&c| !c).expect("n >= c leaves an unchosen row")
        };
        chosen[next] = true;
        picks.push(next);
        let row = features.row(next);
        d2.par_iter_mut().enumerate().for_each(|(i, d)| {
            let nd = squared_distance(features.row(i), row).as_f64();
            if nd < *d {
                *d = nd;
            }
        });
    }
    let mut data = Vec::with_capacity(c * features.dim());
    for &p in &picks {
        data.extend_from_slice(features.row(p));
    }
    RowMatrix { data, dim: features.dim() }
}

fn lloyd<T: Real>(features: &RowMatrix<T>, c: usize, seed: u64, max_iter: usize, tol: T) -> KMeansFit<T> {
    let n = features.len();
    let dim = features.dim();
    let mut centroids = plus_plus_init(features, c, seed);
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let (mut labels, mut dists) = assign_all(&centroids, features);
        let inertia = sequential_sum(&dists);
        history.push(inertia);
        if iterations >= max_iter {
            return KMeansFit {
                model: PseudoLabelModel { centroids, inertia, seed },
                labels,
                inertia_history: history,
                iterations,
            };
        }
        iterations += 1;

        let mut counts = vec![0usize; c];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        for j in 0..c {
            if counts[j] > 0 {
                continue;
            }
            // farthest point from its own centroid, taken from a cluster that stays non-empty
            let mut far: Option<usize> = None;
            for i in 0..n {
                if counts[labels[i] as usize] > 1 && far.is_none_or(|f| dists[i] > dists[f]) {
                    far = Some(i);
                }
            }
            if let Some(i) = far {
                counts[labels[i] as usize] -= 1;
                labels[i] = j as u32;
                dists[i] = T::zero();
                counts[j] = 1;
            }
        }

        let mut sums = vec![T::zero(); c * dim];
        for (i, &l) in labels.iter().enumerate() {
            let acc = &mut sums[l as usize * dim..(l as usize + 1) * dim];
            for (a, &v) in acc.iter_mut().zip(features.row(i)) {
                *a = *a + v;
            }
        }
        let mut shift = T::zero();
        for j in 0..c {
            if counts[j] == 0 {
                continue;
            }
            let inv = T::one() / T::from_usize_lossy(counts[j]);
            let next: Vec<T> = sums[j * dim..(j + 1) * dim].iter().map(|&s| s * inv).collect();
            let old = &mut centroids.data[j * dim..(j + 1) * dim];
            shift = shift.max(squared_distance(old, &next).sqrt());
            old.copy_from_slice(&next);
        }
        if shift < tol {
            let (labels, dists) = assign_all(&centroids, features);
            let inertia = sequential_sum(&dists);
            history.push(inertia);
            return KMeansFit {
                model: PseudoLabelModel { centroids, inertia, seed },
                labels,
                inertia_history: history,
                iterations,
            };
        }
    }
}

fn check_fit_inputs<T: Real>(features: &RowMatrix<T>, c: usize) -> Result<()> {
    if c == 0 {
        return Err(Error::invalid("cluster count must be at least 1"));
    }
    if features.len() < c {
        return Err(Error::invalid(format!(
            "{} observations cannot form {c} clusters",
            features.len()
        )));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("k-means features".into()));
    }
    Ok(())
}

/// Fits `c` centroids with k-means++ seeding and Lloyd iterations.
pub fn kmeans_fit<T: Real>(
    features: &RowMatrix<T>,
    c: usize,
    seed: u64,
    max_iter: usize,
    tol: T,
) -> Result<PseudoLabelModel<T>> {
    check_fit_inputs(features, c)?;
    Ok(lloyd(features, c, seed, max_iter, tol).model)
}

/// Like [`kmeans_fit`] with restarts, returning labels and the inertia trace.
///
/// Restart `r` seeds its k-means++ stream with a mix of `seed` and `r`; the model
/// keeps the caller's `seed`.
pub fn kmeans_fit_traced<T: Real>(
    features: &RowMatrix<T>,
    c: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<KMeansFit<T>> {
    check_fit_inputs(features, c)?;
    let tol = T::lit(params.tol);
    let runs = params.n_init.max(1);
    let mut best: Option<KMeansFit<T>> = None;
    for r in 0..runs {
        let run_seed = if runs == 1 { seed } else { mix_seed(seed ^ (r as u64).wrapping_mul(0x2545_f491_4f6c_dd1d)) };
        let mut fit = lloyd(features, c, run_seed, params.max_iter, tol);
        fit.model.seed = seed;
        if best.as_ref().is_none_or(|b| fit.model.inertia < b.model.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Nearest-centroid labels, lowest centroid index on ties.
pub fn kmeans_assign<T: Real>(model: &PseudoLabelModel<T>, features: &RowMatrix<T>) -> Result<Vec<u32>> {
    if features.is_empty() {
        return Ok(Vec::new());
    }
    if features.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: features.dim() });
    }
    Ok(assign_all(&model.centroids, features).0)
}

pub fn encode_model<T: Real>(model: &PseudoLabelModel<T>) -> Result<Vec<u8>> {
    let c = u32::try_from(model.classes()).map_err(|_| Error::invalid("too many centroids"))?;
    let d = u32::try_from(model.dim()).map_err(|_| Error::invalid("dimension too large"))?;
    let mut out = Vec::with_capacity(4 + 4 + 4 + 8 + 4 * model.centroids.data.len() + 8);
    out.extend_from_slice(&PLM_MAGIC);
    out.extend_from_slice(&c.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.extend_from_slice(&model.seed.to_le_bytes());
    for v in &model.centroids.data {
        let f = v.to_f32().filter(|f| f.is_finite()).ok_or_else(|| Error::NonFinite("centroid".into()))?;
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&model.inertia.as_f64().to_le_bytes());
    Ok(out)
}

pub fn decode_model<T: Real>(bytes: &[u8]) -> Result<PseudoLabelModel<T>> {
    if bytes.len() < 20 {
        return Err(Error::Truncated("model header".into()));
    }
    if bytes[..4] != PLM_MAGIC {
        return Err(Error::BadMagic {
            expected: "PLM1".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let c = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if c == 0 || d == 0 {
        return Err(Error::schema("model has zero centroids or zero dimension"));
    }
    let need = (c as u64) * (d as u64) * 4 + 8;
    let have = (bytes.len() - 20) as u64;
    if have < need {
        return Err(Error::Truncated(format!("model body: need {need} bytes, {have} available")));
    }
    if have > need {
        return Err(Error::schema("trailing bytes after model"));
    }
    let body = &bytes[20..];
    let mut data = Vec::with_capacity(c * d);
    for chunk in body[..c * d * 4].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite("centroid".into()));
        }
        data.push(T::from_f32_lossy(v));
    }
    let inertia = f64::from_le_bytes(body[c * d * 4..].try_into().unwrap());
    if !(inertia.is_finite() && inertia >= 0.0) {
        return Err(Error::schema(format!("invalid inertia {inertia}")));
    }
    Ok(PseudoLabelModel { centroids: RowMatrix { data, dim: d }, inertia: T::lit(inertia), seed })
}

pub fn write_model<T: Real>(model: &PseudoLabelModel<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn read_model<T: Real>(path: impl AsRef<Path>) -> Result<PseudoLabelModel<T>> {
    decode_model(&fs::read(path)?)
}

/// Proposals of one image together with its pixel size.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageProposals<T> {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub proposals: Vec<Proposal<T>>,
}

/// Normalized `[0, 1]` box to absolute pixels, clamped to the image.
pub fn to_pixel_box<T: Real>(b: &Bbox<T>, width: u32, height: u32) -> Bbox<f64> {
    let (w, h) = (width as f64, height as f64);
    let x1 = (b.x.as_f64() * w).clamp(0.0, w);
    let y1 = (b.y.as_f64() * h).clamp(0.0, h);
    let x2 = (b.x2().as_f64() * w).clamp(0.0, w);
    let y2 = (b.y2().as_f64() * h).clamp(0.0, h);
    Bbox::from_corners(x1, y1, x2, y2)
}

/// Labels every proposal by cluster membership and emits one image record per input image.
pub fn build_training_set<T: Real>(
    images: &[ImageProposals<T>],
    model: &PseudoLabelModel<T>,
) -> Result<Vec<AnnotatedImage>> {
    images
        .iter()
        .map(|img| {
            let mut out = AnnotatedImage::empty(img.image_id.clone(), img.width, img.height);
            for p in &img.proposals {
                if p.descriptor.len() != model.dim() {
                    return Err(Error::DimensionMismatch { expected: model.dim(), got: p.descriptor.len() });
                }
                let b = to_pixel_box(&p.bbox, img.width, img.height);
                if !b.is_proper() {
                    continue;
                }
                out.boxes.push(b);
                out.labels.push(model.nearest(&p.descriptor).0);
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[[f64; 2]]) -> RowMatrix<f64> {
        RowMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn n_equals_c_reproduces_points() {
        let x = m(&[[0.0, 0.0], [5.0, 1.0], [-3.0, 2.0], [1.0, 9.0]]);
        let fit = kmeans_fit_traced(&x, 4, 3, &KMeansParams::default()).unwrap();
        assert_eq!(fit.model.inertia, 0.0);
        let mut cents: Vec<_> = fit.model.centroids.rows().map(|r| r.to_vec()).collect();
        let mut pts: Vec<_> = x.rows().map(|r| r.to_vec()).collect();
        cents.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(cents, pts);
    }

    #[test]
    fn assign_ties_pick_lowest_index() {
        let model = PseudoLabelModel {
            centroids: m(&[[9.0, 9.0], [9.0, 9.0], [-1.0, 0.0], [9.0, 9.0], [9.0, 9.0], [1.0, 0.0]]),
            inertia: 0.0,
            seed: 0,
        };
        assert_eq!(kmeans_assign(&model, &m(&[[0.0, 0.0]])).unwrap(), vec![2]);
        assert_eq!(kmeans_assign(&model, &m(&[[1.0, 0.0]])).unwrap(), vec![5]);
    }

    #[test]
    fn assign_centroids_is_identity() {
        let model = PseudoLabelModel { centroids: m(&[[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]]), inertia: 0.0, seed: 0 };
        assert_eq!(kmeans_assign(&model, &model.centroids).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn errors() {
        let x = m(&[[0.0, 0.0]]);
        assert!(kmeans_fit(&x, 2, 0, 10, 1e-4).is_err());
        assert!(kmeans_fit(&m(&[[f64::NAN, 0.0]]), 1, 0, 10, 1e-4).is_err());
        let model = kmeans_fit(&x, 1, 0, 10, 1e-4).unwrap();
        let wrong = RowMatrix::new(vec![1.0, 2.0, 3.0], 3).unwrap();
        assert!(matches!(kmeans_assign(&model, &wrong), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn duplicate_rows_still_yield_c_centroids() {
        let x = m(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [2.0, 2.0]]);
        let fit = kmeans_fit_traced(&x, 3, 11, &KMeansParams::default()).unwrap();
        assert_eq!(fit.model.classes(), 3);
        assert_eq!(fit.model.inertia, 0.0);
    }

    #[test]
    fn model_bytes_roundtrip() {
        let x = m(&[[0.0, 0.5], [1.0, 1.5], [3.0, -2.0]]);
        let model = kmeans_fit(&x, 2, 5, 50, 1e-4).unwrap();
        let bytes = encode_model(&model).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 2 * 2 * 4 + 8);
        let back: PseudoLabelModel<f64> = decode_model(&bytes).unwrap();
        assert_eq!(encode_model(&back).unwrap(), bytes);
        assert!(decode_model::<f64>(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn zero_proposal_image_kept() {
        let model = PseudoLabelModel { centroids: m(&[[1.0, 0.0]]), inertia: 0.0, seed: 0 };
        let imgs = vec![ImageProposals::<f64> { image_id: "e".into(), width: 10, height: 10, proposals: vec![] }];
        let out = build_training_set(&imgs, &model).unwrap();
        assert_eq!(out, vec![AnnotatedImage::empty("e", 10, 10)]);
    }

    #[test]
    fn pixel_box_is_clamped() {
        let b = to_pixel_box(&Bbox::new(0.3, 0.0, 0.7, 1.0), 10, 7);
        assert!(b.x2() <= 10.0 && b.y2() <= 7.0);
        assert_eq!(b.y, 0.0);
    }
}
