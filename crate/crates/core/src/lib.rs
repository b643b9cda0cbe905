//! Unsupervised object-proposal toolkit.
//!
//! Multi-level feature maps go in; pseudo-labeled boxes come out:
//!
//! 1. [`local_cluster`] spectrally clusters the pixels of selected levels into masks.
//! 2. [`region_ops`] splits masks into connected regions, pools a descriptor from the
//!    deepest level per region and merges redundant proposals.
//! 3. [`global_cluster`] runs dataset-wide K-Means over descriptors; cluster
//!    membership becomes the pseudo-class of each box.
//! 4. [`match_loss`] scores detector predictions against those boxes with optimal
//!    bipartite matching, and [`self_train`] turns predictions into the next training set.
//! 5. [`eval`] measures proposal recall and label agreement.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below fix
//! it to `f64`.

pub mod bbox;
pub mod error;
pub mod eval;
pub mod global_cluster;
pub mod local_cluster;
pub mod match_loss;
pub mod region_ops;
pub mod scalar;
pub mod self_train;
pub mod tensor_store;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Box2 = bbox::Bbox<f64>;
pub type Proposal = region_ops::Proposal<f64>;
pub type PseudoLabelModel = global_cluster::PseudoLabelModel<f64>;
pub type Features = global_cluster::RowMatrix<f64>;
pub type ImageProposals = global_cluster::ImageProposals<f64>;
pub type Prediction = match_loss::Prediction<f64>;
pub type GtObject = match_loss::GtObject<f64>;
pub type MatchResult = match_loss::MatchResult<f64>;
pub type LossWeights = match_loss::LossWeights<f64>;
pub type ScoredBox = self_train::ScoredBox<f64>;
pub type FilterConfig = region_ops::FilterConfig<f64>;

pub use local_cluster::{ClusterMask, LocalClusterConfig};
pub use region_ops::Region;
pub use tensor_store::{AnnotatedImage, FeatureMap, FeatureStack};
