//! Pipeline configuration: built-in defaults, overlaid by an optional JSON file,
//! overlaid by command-line flags.

use std::path::Path;

use clap::Args;
use propkit::global_cluster::DEFAULT_CLASSES;
use propkit::local_cluster::{DEFAULT_KNN, DEFAULT_K_SET};
use propkit::match_loss::{
    MatchClassTerm, DEFAULT_GIOU_WEIGHT, DEFAULT_L1_WEIGHT, DEFAULT_NO_OBJECT_WEIGHT,
};
use propkit::region_ops::{DEFAULT_IOU_MERGE, DEFAULT_MIN_REL_AREA, DEFAULT_SIM_MERGE};
use propkit::self_train::{DEFAULT_IOU_MAX, DEFAULT_TOP_K};
use propkit::{FilterConfig, LocalClusterConfig, LossWeights};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Pixel size assumed for images without a manifest entry.
pub const DEFAULT_IMAGE_SIZE: (u32, u32) = (224, 224);

fn parse_image_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s
        .split_once(['x', 'X', ','])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w = w.trim().parse::<u32>().map_err(|e| e.to_string())?;
    let h = h.trim().parse::<u32>().map_err(|e| e.to_string())?;
    if w == 0 || h == 0 {
        return Err("image size must be positive".into());
    }
    Ok((w, h))
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct ProposalOpts {
    /// Cluster counts for local clustering, comma separated
    #[arg(long, value_delimiter = ',')]
    pub k_set: Option<Vec<usize>>,
    /// Level indices to cluster, comma separated (default: the two deepest)
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<u32>>,
    /// Neighbors per pixel in the affinity graph
    #[arg(long)]
    pub knn: Option<usize>,
    /// IoU at or above which proposals merge
    #[arg(long)]
    pub iou_merge: Option<f64>,
    /// Descriptor cosine at or above which overlapping proposals merge
    #[arg(long)]
    pub sim_merge: Option<f64>,
    /// Minimum normalized box area
    #[arg(long)]
    pub min_rel_area: Option<f64>,
    /// Number of pseudo-classes
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fallback image size as WxH when no manifest entry exists
    #[arg(long, value_parser = parse_image_size)]
    pub image_size: Option<(u32, u32)>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct SelfTrainOpts {
    /// Highest-scoring predictions considered per image
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Surviving boxes overlap pairwise below this IoU
    #[arg(long)]
    pub iou_max: Option<f64>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct LossOpts {
    #[arg(long)]
    pub l1_weight: Option<f64>,
    #[arg(long)]
    pub giou_weight: Option<f64>,
    /// Class-term weight of slots padded with no-object
    #[arg(long)]
    pub no_object_weight: Option<f64>,
    /// Class term of the matching cost
    #[arg(long, value_enum)]
    pub match_class_term: Option<ClassTermArg>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassTermArg {
    Prob,
    Logprob,
}

/// Contents of a `--config` file: every option, flat.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(flatten)]
    pub proposal: ProposalOpts,
    #[serde(flatten)]
    pub self_train: SelfTrainOpts,
    #[serde(flatten)]
    pub loss: LossOpts,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        const KNOWN: &[&str] = &[
            "k_set", "levels", "knn", "iou_merge", "sim_merge", "min_rel_area", "classes", "seed", "image_size",
            "top_k", "iou_max", "l1_weight", "giou_weight", "no_object_weight", "match_class_term",
        ];
        if let Some(obj) = value.as_object() {
            if let Some(k) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
                return Err(CliError::Usage(format!("{}: unknown config key {k:?}", path.display())));
            }
        }
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

macro_rules! overlay {
    ($flags:expr, $file:expr, $($field:ident),+) => {
        Self { $($field: $flags.$field.or($file.$field)),+ }
    };
}

impl ProposalOpts {
    pub fn over(self, file: &Self) -> Self {
        let file = file.clone();
        overlay!(self, file, k_set, levels, knn, iou_merge, sim_merge, min_rel_area, classes, seed, image_size)
    }
}

impl SelfTrainOpts {
    pub fn over(self, file: &Self) -> Self {
        let file = file.clone();
        overlay!(self, file, top_k, iou_max)
    }
}

impl LossOpts {
    pub fn over(self, file: &Self) -> Self {
        let file = file.clone();
        overlay!(self, file, l1_weight, giou_weight, no_object_weight, match_class_term)
    }
}

fn unit(name: &str, v: f64) -> Result<f64, CliError> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(CliError::Usage(format!("{name} = {v} outside [0, 1]")))
    }
}

/// Fully resolved proposal-extraction settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractSettings {
    pub local: LocalClusterConfig,
    pub filter: FilterConfig,
    pub classes: usize,
    pub seed: u64,
    pub image_size: (u32, u32),
}

impl ProposalOpts {
    pub fn resolve(&self) -> Result<ExtractSettings, CliError> {
        let seed = self.seed.unwrap_or(0);
        let local = LocalClusterConfig {
            k_set: self.k_set.clone().unwrap_or_else(|| DEFAULT_K_SET.to_vec()),
            levels: self.levels.clone(),
            knn: self.knn.unwrap_or(DEFAULT_KNN),
            seed,
        };
        local.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let filter = FilterConfig {
            iou_merge: unit("iou_merge", self.iou_merge.unwrap_or(DEFAULT_IOU_MERGE))?,
            sim_merge: unit("sim_merge", self.sim_merge.unwrap_or(DEFAULT_SIM_MERGE))?,
            min_rel_area: unit("min_rel_area", self.min_rel_area.unwrap_or(DEFAULT_MIN_REL_AREA))?,
        };
        let classes = self.classes.unwrap_or(DEFAULT_CLASSES);
        if classes == 0 {
            return Err(CliError::Usage("classes must be at least 1".into()));
        }
        Ok(ExtractSettings { local, filter, classes, seed, image_size: self.image_size.unwrap_or(DEFAULT_IMAGE_SIZE) })
    }
}

impl SelfTrainOpts {
    pub fn resolve(&self) -> Result<(usize, f64), CliError> {
        let top_k = self.top_k.unwrap_or(DEFAULT_TOP_K);
        let iou_max = self.iou_max.unwrap_or(DEFAULT_IOU_MAX);
        if top_k == 0 || !(iou_max > 0.0 && iou_max <= 1.0) {
            return Err(CliError::Usage(format!("need top_k >= 1 and iou_max in (0, 1], got {top_k} and {iou_max}")));
        }
        Ok((top_k, iou_max))
    }
}

impl LossOpts {
    pub fn resolve(&self) -> Result<LossWeights, CliError> {
        let w = LossWeights {
            l1: self.l1_weight.unwrap_or(DEFAULT_L1_WEIGHT),
            giou: self.giou_weight.unwrap_or(DEFAULT_GIOU_WEIGHT),
            no_object: self.no_object_weight.unwrap_or(DEFAULT_NO_OBJECT_WEIGHT),
            class_term: match self.match_class_term.unwrap_or(ClassTermArg::Prob) {
                ClassTermArg::Prob => MatchClassTerm::Prob,
                ClassTermArg::Logprob => MatchClassTerm::Logprob,
            },
        };
        if [w.l1, w.giou, w.no_object].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CliError::Usage("loss weights must be finite and non-negative".into()));
        }
        Ok(w)
    }
}
