//! Set-prediction matching between padded ground truth and detector slots, and the
//! resulting detection loss.
//!
//! Ground truth is padded with the no-object class (index `C`) up to the number
//! of prediction slots `Q`. The optimal one-to-one assignment minimizes the
//! summed matching cost; the loss then adds, per slot, the class negative
//! log-likelihood and, for real objects, the box terms.

use serde::{Deserialize, Serialize};

use crate::bbox::Bbox;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor_store::AnnotatedImage;

pub const DEFAULT_L1_WEIGHT: f64 = 5.0;
pub const DEFAULT_GIOU_WEIGHT: f64 = 2.0;
pub const DEFAULT_NO_OBJECT_WEIGHT: f64 = 0.1;
/// Largest `Q` accepted by [`brute_force_match`].
pub const BRUTE_FORCE_MAX: usize = 9;

pub fn iou<T: Real>(a: &Bbox<T>, b: &Bbox<T>) -> T {
    a.iou(b)
}

pub fn giou<T: Real>(a: &Bbox<T>, b: &Bbox<T>) -> T {
    a.giou(b)
}

fn check_square<T: Real>(cost: &[Vec<T>]) -> Result<usize> {
    let n = cost.len();
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(Error::invalid(format!("cost matrix row {i} has {} entries, expected {n}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cost matrix row {i}")));
        }
    }
    Ok(n)
}

/// Minimum-cost perfect assignment (Kuhn–Munkres with potentials, O(n³)).
///
/// Returns `perm` with `perm[row] = column`.
pub fn hungarian_match<T: Real>(cost: &[Vec<T>]) -> Result<Vec<usize>> {
    let n = check_square(cost)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays; column 0 is the virtual start.
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] = u[owner[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// `Σ cost[q][perm[q]]`, summed in row order.
pub fn assignment_cost<T: Real>(cost: &[Vec<T>], perm: &[usize]) -> T {
    perm.iter().enumerate().fold(T::zero(), |acc, (q, &j)| acc + cost[q][j])
}

/// Exhaustive search over all permutations (Heap's algorithm); for cross-checks only.
pub fn brute_force_match<T: Real>(cost: &[Vec<T>]) -> Result<(Vec<usize>, T)> {
    let n = check_square(cost)?;
    if n > BRUTE_FORCE_MAX {
        return Err(Error::invalid(format!("brute force limited to {BRUTE_FORCE_MAX} slots, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (perm.clone(), assignment_cost(cost, &perm));
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let total = assignment_cost(cost, &perm);
            if total < best.1 {
                best = (perm.clone(), total);
            }
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

/// Detector output for one query slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction<T> {
    /// Normalized `(x, y, w, h)`.
    pub bbox: Bbox<T>,
    /// `C + 1` logits; the last one is the no-object class.
    pub logits: Vec<T>,
}

/// Ground-truth object in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtObject<T> {
    pub bbox: Bbox<T>,
    pub class: u32,
}

/// Which class term the matching cost uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchClassTerm {
    /// `-p̂(c)`
    #[default]
    Prob,
    /// `-log p̂(c)`, identical to the loss's class term.
    Logprob,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights<T> {
    pub l1: T,
    pub giou: T,
    /// Multiplier on the class term of slots padded with no-object.
    pub no_object: T,
    pub class_term: MatchClassTerm,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            l1: T::lit(DEFAULT_L1_WEIGHT),
            giou: T::lit(DEFAULT_GIOU_WEIGHT),
            no_object: T::lit(DEFAULT_NO_OBJECT_WEIGHT),
            class_term: MatchClassTerm::Prob,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult<T> {
    /// `assignment[q]` is the padded ground-truth slot matched to prediction `q`;
    /// slots `>= gt count` are no-object.
    pub assignment: Vec<usize>,
    pub total_loss: T,
    pub class_loss: T,
    pub box_l1: T,
    pub box_giou: T,
}

/// Per-pair quantities shared by the matching cost and the loss.
#[derive(Clone, Debug)]
pub struct PairTerms<T> {
    /// `[q][j]` weighted class negative log-likelihood.
    pub class_nll: Vec<Vec<T>>,
    /// `[q][j]` weighted negative class probability.
    pub class_prob: Vec<Vec<T>>,
    /// `[q][j]` weighted L1 on center-form boxes; zero for no-object slots.
    pub l1: Vec<Vec<T>>,
    /// `[q][j]` weighted `1 - GIoU`; zero for no-object slots.
    pub giou: Vec<Vec<T>>,
}

impl<T: Real> PairTerms<T> {
    /// Per-slot loss contribution when prediction `q` takes padded slot `j`.
    pub fn loss(&self, q: usize, j: usize) -> T {
        self.class_nll[q][j] + self.l1[q][j] + self.giou[q][j]
    }

    pub fn loss_matrix(&self) -> Vec<Vec<T>> {
        let n = self.class_nll.len();
        (0..n).map(|q| (0..n).map(|j| self.loss(q, j)).collect()).collect()
    }

    pub fn matching_cost(&self, term: MatchClassTerm) -> Vec<Vec<T>> {
        let class = match term {
            MatchClassTerm::Prob => &self.class_prob,
            MatchClassTerm::Logprob => &self.class_nll,
        };
        let n = class.len();
        (0..n)
            .map(|q| (0..n).map(|j| class[q][j] + self.l1[q][j] + self.giou[q][j]).collect())
            .collect()
    }

    /// Loss decomposition under an arbitrary assignment.
    pub fn evaluate(&self, assignment: &[usize]) -> MatchResult<T> {
        let (mut class_loss, mut box_l1, mut box_giou, mut total) = (T::zero(), T::zero(), T::zero(), T::zero());
        for (q, &j) in assignment.iter().enumerate() {
            class_loss = class_loss + self.class_nll[q][j];
            box_l1 = box_l1 + self.l1[q][j];
            box_giou = box_giou + self.giou[q][j];
            total = total + self.loss(q, j);
        }
        MatchResult { assignment: assignment.to_vec(), total_loss: total, class_loss, box_l1, box_giou }
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).fold(T::zero(), |a, b| a + b).ln();
    logits.iter().map(|&l| l - lse).collect()
}

fn validate_inputs<T: Real>(gt: &[GtObject<T>], preds: &[Prediction<T>], classes: usize) -> Result<()> {
    if preds.len() < gt.len() {
        return Err(Error::invalid(format!(
            "{} prediction slots cannot cover {} ground-truth objects",
            preds.len(),
            gt.len()
        )));
    }
    for (q, p) in preds.iter().enumerate() {
        if p.logits.len() != classes + 1 {
            return Err(Error::DimensionMismatch { expected: classes + 1, got: p.logits.len() });
        }
        if p.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logits of prediction {q}")));
        }
        if !p.bbox.is_proper() {
            return Err(Error::invalid(format!("prediction {q} has a degenerate box")));
        }
    }
    for (j, g) in gt.iter().enumerate() {
        if g.class as usize >= classes {
            return Err(Error::invalid(format!("ground truth {j} has class {} >= {classes}", g.class)));
        }
        if !g.bbox.is_proper() {
            return Err(Error::invalid(format!("ground truth {j} has a degenerate box")));
        }
    }
    Ok(())
}

/// Builds every pairwise cost component for `gt` padded to `preds.len()` slots.
pub fn pair_terms<T: Real>(
    gt: &[GtObject<T>],
    preds: &[Prediction<T>],
    classes: usize,
    weights: &LossWeights<T>,
) -> Result<PairTerms<T>> {
    validate_inputs(gt, preds, classes)?;
    let q = preds.len();
    let mut terms = PairTerms {
        class_nll: vec![vec![T::zero(); q]; q],
        class_prob: vec![vec![T::zero(); q]; q],
        l1: vec![vec![T::zero(); q]; q],
        giou: vec![vec![T::zero(); q]; q],
    };
    for (qi, p) in preds.iter().enumerate() {
        let logp = log_softmax(&p.logits);
        for j in 0..q {
            let (class, weight) = match gt.get(j) {
                Some(g) => (g.class as usize, T::one()),
                None => (classes, weights.no_object),
            };
            terms.class_nll[qi][j] = -logp[class] * weight;
            terms.class_prob[qi][j] = -logp[class].exp() * weight;
            if let Some(g) = gt.get(j) {
                terms.l1[qi][j] = weights.l1 * g.bbox.l1_cxcywh(&p.bbox);
                terms.giou[qi][j] = weights.giou * (T::one() - g.bbox.giou(&p.bbox));
            }
        }
    }
    Ok(terms)
}

/// Optimal assignment under the configured matching cost and the loss at that assignment.
pub fn detection_loss<T: Real>(
    gt: &[GtObject<T>],
    preds: &[Prediction<T>],
    classes: usize,
    weights: &LossWeights<T>,
) -> Result<MatchResult<T>> {
    let terms = pair_terms(gt, preds, classes, weights)?;
    let assignment = hungarian_match(&terms.matching_cost(weights.class_term))?;
    Ok(terms.evaluate(&assignment))
}

/// Ground-truth objects of an annotated image in normalized coordinates.
pub fn gt_objects<T: Real>(image: &AnnotatedImage) -> Vec<GtObject<T>> {
    let (sx, sy) = (1.0 / image.width as f64, 1.0 / image.height as f64);
    image
        .boxes
        .iter()
        .zip(&image.labels)
        .map(|(b, &class)| GtObject { bbox: b.scale(sx, sy).cast(), class })
        .collect()
}

/// [`detection_loss`] against a pixel-space annotated image.
pub fn detection_loss_image<T: Real>(
    gt: &AnnotatedImage,
    preds: &[Prediction<T>],
    classes: usize,
    weights: &LossWeights<T>,
) -> Result<MatchResult<T>> {
    detection_loss(&gt_objects(gt), preds, classes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = Bbox::new(0.0f64, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &Bbox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &Bbox::new(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn giou_examples() {
        let a = Bbox::new(0.0f64, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a), 1.0);
        assert!((giou(&a, &Bbox::new(2.0, 0.0, 1.0, 1.0)) + 1.0 / 3.0).abs() < 1e-15);
        assert!(giou(&a, &Bbox::new(1e6, 1e6, 1.0, 1.0)) < -0.999_999);
    }

    #[test]
    fn hungarian_small_cases() {
        let diag = vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]];
        assert_eq!(hungarian_match(&diag).unwrap(), vec![0, 1, 2]);
        let swap = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let p = hungarian_match(&swap).unwrap();
        assert_eq!(p, vec![1, 0]);
        assert_eq!(assignment_cost(&swap, &p), 0.0);
        assert!(hungarian_match::<f64>(&[]).unwrap().is_empty());
    }

    #[test]
    fn hungarian_rejects_bad_input() {
        assert!(hungarian_match(&[vec![1.0, 2.0]]).is_err());
        assert!(hungarian_match(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn brute_force_agrees_on_fixed_matrix() {
        let c = vec![
            vec![4.0, 1.0, 3.0, 2.0],
            vec![2.0, 0.0, 5.0, 3.0],
            vec![3.0, 2.0, 2.0, 1.0],
            vec![1.0, 4.0, 3.0, 0.5],
        ];
        let (_, best) = brute_force_match(&c).unwrap();
        let p = hungarian_match(&c).unwrap();
        assert_eq!(assignment_cost(&c, &p), best);
    }

    fn one_hot(class: usize, n: usize, margin: f64) -> Vec<f64> {
        (0..n).map(|i| if i == class { margin } else { 0.0 }).collect()
    }

    #[test]
    fn perfect_predictions_reach_loss_floor() {
        let gt = vec![
            GtObject { bbox: Bbox::new(0.1, 0.1, 0.3, 0.2), class: 1 },
            GtObject { bbox: Bbox::new(0.5, 0.4, 0.2, 0.5), class: 0 },
        ];
        let preds = vec![
            Prediction { bbox: Bbox::new(0.0, 0.0, 0.1, 0.1), logits: one_hot(2, 3, 30.0) },
            Prediction { bbox: gt[1].bbox, logits: one_hot(0, 3, 30.0) },
            Prediction { bbox: gt[0].bbox, logits: one_hot(1, 3, 30.0) },
        ];
        let r = detection_loss(&gt, &preds, 2, &LossWeights::default()).unwrap();
        assert_eq!(r.assignment, vec![2, 1, 0]);
        assert_eq!(r.box_l1, 0.0);
        assert!(r.box_giou.abs() < 1e-12);
        assert!(r.class_loss < 1e-3);
    }

    #[test]
    fn empty_ground_truth_sums_no_object_terms() {
        let preds = vec![
            Prediction { bbox: Bbox::new(0.1, 0.1, 0.2, 0.2), logits: vec![0.3, -1.0, 2.0] },
            Prediction { bbox: Bbox::new(0.4, 0.1, 0.2, 0.2), logits: vec![1.0, 1.0, 1.0] },
        ];
        let w = LossWeights { no_object: 1.0, ..LossWeights::default() };
        let r = detection_loss(&[], &preds, 2, &w).unwrap();
        let expected: f64 = preds.iter().map(|p| -log_softmax(&p.logits)[2]).sum();
        assert!((r.total_loss - expected).abs() < 1e-12);
        assert_eq!(r.box_l1 + r.box_giou, 0.0);
    }

    #[test]
    fn too_few_slots_rejected() {
        let gt = vec![GtObject { bbox: Bbox::new(0.1, 0.1, 0.2, 0.2), class: 0 }; 2];
        let preds = vec![Prediction { bbox: Bbox::new(0.1, 0.1, 0.2, 0.2), logits: vec![0.0, 0.0] }];
        assert!(detection_loss(&gt, &preds, 1, &LossWeights::default()).is_err());
    }

    #[test]
    fn log_softmax_is_stable() {
        let l = log_softmax(&[1000.0f64, 1000.0]);
        assert!((l[0] - (0.5f64).ln()).abs() < 1e-12);
    }
}
