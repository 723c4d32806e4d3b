//! Point-set networks: alignment networks, the classification /
//! segmentation / normal-estimation models, their losses, parameter
//! counting and the binary checkpoint format.
//!
//! The per-point pipeline is
//! `[input T-net] → MLP(64,64) → [feature T-net] → MLP(64,128,K) → aggregate`,
//! followed by either a fully connected classification head or a per-point
//! head fed with every point's local feature concatenated with the global
//! feature.

mod model;
mod spec;
mod state;

pub use model::{
    apply_transform, BackboneOutput, Batch, FrozenTransforms, HeadNet, LossParts, ModelOutput, PointNet, TNet,
    Targets,
};
pub use spec::{ClassifierSpec, HeadSpec, ModelSpec, SegmenterSpec, TNetSpec};
pub use state::{
    classify_forward, count_parameters, loss_gradient_check, normal_head_forward, normal_loss, orthogonality_loss, segment_forward,
    total_loss, ClassifyResult, Inference, ModelState, CHECKPOINT_MAGIC,
};

pub(crate) use spec::{fmt_f64, parse, parse_list};

#[cfg(test)]
mod tests;
