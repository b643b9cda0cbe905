//! Per-image pixel clustering: clamped-cosine kNN affinity, normalized-Laplacian
//! spectral embedding and K-Means on the embedding rows.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::global_cluster::{kmeans_fit_traced, KMeansParams, RowMatrix};
use crate::scalar::mix_seed;
use crate::tensor_store::{FeatureMap, FeatureStack};

pub const DEFAULT_KNN: usize = 10;
pub const DEFAULT_K_SET: [usize; 4] = [2, 3, 4, 5];
/// Largest pixel grid eigensolved directly; bigger maps are downsampled first.
pub const MAX_PIXELS: usize = 10_000;
/// Edge weight linking zero-norm pixels to their spatial 4-neighbors.
pub const ZERO_NORM_WEIGHT: f64 = 1e-6;
pub const SPECTRAL_RESTARTS: usize = 10;

/// Hard assignment of every pixel of one level to one of `k` clusters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterMask {
    pub source_level: u32,
    pub k: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major, values in `0..k`.
    pub labels: Vec<u32>,
}

impl ClusterMask {
    #[inline]
    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalClusterConfig {
    pub k_set: Vec<usize>,
    /// Level indices to cluster; `None` selects the two deepest levels.
    pub levels: Option<Vec<u32>>,
    pub knn: usize,
    pub seed: u64,
}

impl Default for LocalClusterConfig {
    fn default() -> Self {
        Self { k_set: DEFAULT_K_SET.to_vec(), levels: None, knn: DEFAULT_KNN, seed: 0 }
    }
}

impl LocalClusterConfig {
    /// Levels this config selects from `stack`, in configuration order.
    pub fn resolve_levels(&self, stack: &FeatureStack) -> Result<Vec<u32>> {
        match &self.levels {
            Some(ls) => {
                for (i, l) in ls.iter().enumerate() {
                    if stack.level(*l).is_none() {
                        return Err(Error::invalid(format!("level {l} not present in stack {}", stack.image_id)));
                    }
                    if ls[..i].contains(l) {
                        return Err(Error::invalid(format!("level {l} listed twice")));
                    }
                }
                Ok(ls.clone())
            }
            None => {
                let n = stack.levels.len();
                Ok(stack.levels[n.saturating_sub(2)..].iter().map(|m| m.level).collect())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_set.is_empty() {
            return Err(Error::invalid("cluster count set is empty"));
        }
        for (i, &k) in self.k_set.iter().enumerate() {
            if k == 0 {
                return Err(Error::invalid("cluster counts must be at least 1"));
            }
            if self.k_set[..i].contains(&k) {
                return Err(Error::invalid(format!("cluster count {k} listed twice")));
            }
        }
        if self.knn == 0 {
            return Err(Error::invalid("knn must be at least 1"));
        }
        Ok(())
    }
}

/// Sparse symmetric pixel affinity, rows sorted by column.
#[derive(Clone, Debug, PartialEq)]
pub struct Affinity {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Affinity {
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for (i, j, w) in edges {
            if i == j || w <= 0.0 {
                continue;
            }
            for (a, b) in [(i, j), (j, i)] {
                let e = maps[a].entry(b).or_insert(0.0);
                *e = e.max(w);
            }
        }
        Self { rows: maps.into_iter().map(|m| m.into_iter().collect()).collect() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map_or(0.0, |p| self.rows[i][p].1)
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|&(_, w)| w).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                m[(i, j)] = w;
            }
        }
        m
    }
}

fn unit_pixel_vectors(fmap: &FeatureMap) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut zero = Vec::with_capacity(fmap.pixel_count());
    let vecs = fmap
        .pixel_vectors()
        .into_iter()
        .map(|v| {
            let mut v: Vec<f64> = v.into_iter().map(f64::from).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            zero.push(n == 0.0);
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
            }
            v
        })
        .collect();
    (vecs, zero)
}

/// Clamped-cosine kNN graph over the pixels of `fmap`, symmetrized by max.
///
/// Zero-norm pixels have no cosine neighbors; they are tied to their spatial
/// 4-neighbors with weight [`ZERO_NORM_WEIGHT`].
pub fn build_affinity(fmap: &FeatureMap, knn: usize) -> Result<Affinity> {
    let n = fmap.pixel_count();
    if knn == 0 || knn >= n {
        return Err(Error::invalid(format!("knn must be in 1..{n}, got {knn}")));
    }
    let (vecs, zero) = unit_pixel_vectors(fmap);
    let edges: Vec<(usize, usize, f64)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut out = Vec::new();
            if zero[i] {
                let (y, x) = (i / fmap.width, i % fmap.width);
                if y > 0 {
                    out.push((i, i - fmap.width, ZERO_NORM_WEIGHT));
                }
                if y + 1 < fmap.height {
                    out.push((i, i + fmap.width, ZERO_NORM_WEIGHT));
                }
                if x > 0 {
                    out.push((i, i - 1, ZERO_NORM_WEIGHT));
                }
                if x + 1 < fmap.width {
                    out.push((i, i + 1, ZERO_NORM_WEIGHT));
                }
                return out.into_iter();
            }
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i && !zero[j])
                .map(|j| {
                    let c: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
                    (c, j)
                })
                .collect();
            let by_sim = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if cand.len() > knn {
                cand.select_nth_unstable_by(knn - 1, by_sim);
                cand.truncate(knn);
            }
            out.extend(cand.into_iter().map(|(c, j)| (i, j, c.clamp(0.0, 1.0))));
            out.into_iter()
        })
        .collect();
    Ok(Affinity::from_edges(n, edges))
}

/// `I - D^{-1/2} A D^{-1/2}`; isolated pixels get a zero row so they form their own component.
pub fn normalized_laplacian(aff: &Affinity) -> DMatrix<f64> {
    let n = aff.len();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d = aff.degree(i);
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        if inv_sqrt[i] > 0.0 {
            l[(i, i)] = 1.0;
        }
        for &(j, w) in aff.neighbors(i) {
            l[(i, j)] = -w * inv_sqrt[i] * inv_sqrt[j];
        }
    }
    l
}

/// Eigenpairs of a symmetric matrix sorted by ascending eigenvalue.
pub fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = eig.eigenvectors.select_columns(order.iter());
    (values, vectors)
}

/// Bilinear resample of a map onto an `h x w` grid.
pub fn resize_bilinear(fmap: &FeatureMap, h: usize, w: usize) -> FeatureMap {
    let (sh, sw) = (fmap.height, fmap.width);
    let mut data = vec![0.0f32; fmap.channels * h * w];
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, (s - lo as f64) as f32)
    };
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, sh);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w, sw);
            for c in 0..fmap.channels {
                let top = fmap.get(c, y0, x0) * (1.0 - fx) + fmap.get(c, y0, x1) * fx;
                let bot = fmap.get(c, y1, x0) * (1.0 - fx) + fmap.get(c, y1, x1) * fx;
                data[c * h * w + y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    FeatureMap { level: fmap.level, channels: fmap.channels, height: h, width: w, data }
}

fn capped_grid(h: usize, w: usize, cap: usize) -> (usize, usize) {
    let s = (cap as f64 / (h * w) as f64).sqrt();
    let mut nh = ((h as f64 * s).floor() as usize).clamp(1, h);
    let mut nw = ((w as f64 * s).floor() as usize).clamp(1, w);
    while nh * nw > cap {
        if nh >= nw {
            nh -= 1;
        } else {
            nw -= 1;
        }
    }
    (nh, nw)
}

/// Spectral clustering of the pixels of `fmap` into `k` groups.
///
/// `knn` is clamped to `H*W - 1` for maps with fewer pixels than neighbors.
pub fn spectral_cluster(fmap: &FeatureMap, k: usize, knn: usize, seed: u64) -> Result<ClusterMask> {
    spectral_cluster_capped(fmap, k, knn, seed, MAX_PIXELS)
}

/// [`spectral_cluster`] with an explicit pixel cap for the eigensolver.
pub fn spectral_cluster_capped(
    fmap: &FeatureMap,
    k: usize,
    knn: usize,
    seed: u64,
    max_pixels: usize,
) -> Result<ClusterMask> {
    let n = fmap.pixel_count();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds the {n} pixels of level {}", fmap.level)));
    }
    let mask = |labels| ClusterMask { source_level: fmap.level, k, height: fmap.height, width: fmap.width, labels };
    if k == 1 {
        return Ok(mask(vec![0; n]));
    }
    if n > max_pixels.max(1) {
        let (h, w) = capped_grid(fmap.height, fmap.width, max_pixels.max(1));
        let small = spectral_cluster_capped(&resize_bilinear(fmap, h, w), k.min(h * w), knn, seed, max_pixels)?;
        let mut labels = Vec::with_capacity(n);
        for y in 0..fmap.height {
            let sy = ((y as f64 + 0.5) * h as f64 / fmap.height as f64) as usize;
            for x in 0..fmap.width {
                let sx = ((x as f64 + 0.5) * w as f64 / fmap.width as f64) as usize;
                labels.push(small.label(sy.min(h - 1), sx.min(w - 1)));
            }
        }
        return Ok(mask(labels));
    }

    let aff = build_affinity(fmap, knn.clamp(1, n - 1))?;
    let (_, vectors) = sorted_eigen(normalized_laplacian(&aff));
    let mut rows = Vec::with_capacity(n * k);
    for i in 0..n {
        let row: Vec<f64> = (0..k).map(|c| vectors[(i, c)]).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        rows.extend(row.into_iter().map(|v| if norm > 0.0 { v / norm } else { 0.0 }));
    }
    let embedding = RowMatrix::new(rows, k)?;
    let params = KMeansParams { n_init: SPECTRAL_RESTARTS, ..KMeansParams::default() };
    let fit = kmeans_fit_traced(&embedding, k, seed, &params)?;
    Ok(mask(fit.labels))
}

/// Seed for the `(level, k)` mask of an image clustered with `seed`.
pub fn mask_seed(seed: u64, level: u32, k: usize) -> u64 {
    seed ^ mix_seed(((level as u64) << 32) | (k as u64 & 0xffff_ffff))
}

/// One mask per `(level, k)` pair, levels outermost, in configuration order.
pub fn cluster_multi(stack: &FeatureStack, cfg: &LocalClusterConfig) -> Result<Vec<ClusterMask>> {
    cfg.validate()?;
    let levels = cfg.resolve_levels(stack)?;
    let pairs: Vec<(u32, usize)> = levels
        .iter()
        .flat_map(|&l| cfg.k_set.iter().map(move |&k| (l, k)))
        .collect();
    pairs
        .into_par_iter()
        .map(|(l, k)| {
            let fmap = stack.level(l).expect("resolved level exists");
            spectral_cluster(fmap, k, cfg.knn, mask_seed(cfg.seed, l, k))
        })
        .collect()
}
