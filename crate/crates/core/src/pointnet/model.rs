use crate::data::PointCloud;
use crate::error::{dim_err, Error, Result};
use crate::layers::{
    Aggregator, AggregatorKind, Dense, ForwardCtx, Init, ParamLayout, SharedMlp, SharedMlpSpec,
};
use crate::tensor::{Segments, Tensor, Var};

use super::spec::{HeadSpec, ModelSpec, TNetSpec};

/// Mini-network predicting a `d×d` alignment matrix per set.
#[derive(Debug, Clone, PartialEq)]
pub struct TNet {
    pub dim: usize,
    pub mlp: SharedMlp,
    pub fc: SharedMlp,
    pub out: Dense,
}

impl TNet {
    /// The output layer has zero weights and the flattened identity as
    /// bias, so an untrained network emits exactly `I` for any input.
    pub fn new(layout: &mut ParamLayout, name: &str, spec: &TNetSpec) -> Self {
        let d = spec.input_dim;
        let mlp = SharedMlp::new(layout, &format!("{name}.mlp"), d, &SharedMlpSpec::relu_bn(&spec.mlp_widths));
        let fc = SharedMlp::new(
            layout,
            &format!("{name}.fc"),
            mlp.out_width(),
            &SharedMlpSpec::relu_bn(&spec.fc_widths),
        );
        let out = Dense::with_init(
            layout,
            &format!("{name}.out"),
            fc.out_width(),
            d * d,
            Init::Zeros,
            Init::FlatIdentity(d),
        );
        TNet { dim: d, mlp, fc, out }
    }

    /// Returns a `b×d²` matrix: row `s` is the row-major transform of set `s`.
    pub fn forward(&self, f: &mut ForwardCtx, x: Var, segs: &Segments) -> Result<Var> {
        let cols = f.graph.value(x).cols();
        if cols != self.dim {
            return dim_err(format!("alignment network for width {}, got {cols}", self.dim));
        }
        let h = self.mlp.forward(f, x)?;
        let (g, _) = f.graph.segment_max(h, segs)?;
        let z = self.fc.forward(f, g)?;
        self.out.forward(f, z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadNet {
    Classify {
        fc: SharedMlp,
        out: Dense,
        keep: f64,
    },
    PerPoint {
        mlp: SharedMlp,
        out: Dense,
        categories: Option<usize>,
    },
}

/// Layer graph of a model. Built deterministically from a [`ModelSpec`],
/// which fixes the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PointNet {
    pub spec: ModelSpec,
    pub layout: ParamLayout,
    pub input_tnet: Option<TNet>,
    pub mlp1: SharedMlp,
    pub feature_tnet: Option<TNet>,
    pub mlp2: SharedMlp,
    pub aggregator: Aggregator,
    pub head: HeadNet,
}

/// Alignment matrices held fixed while evaluating the per-point function
/// on arbitrary points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrozenTransforms {
    pub input: Option<Vec<f64>>,
    pub feature: Option<Vec<f64>>,
}

impl FrozenTransforms {
    /// Identity matrices for every alignment network `spec` has.
    pub fn identity(spec: &ModelSpec) -> Self {
        let eye = |d: usize| (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
        FrozenTransforms {
            input: spec.use_input_transform.then(|| eye(spec.input_dim)),
            feature: spec.use_feature_transform.then(|| eye(spec.local_width())),
        }
    }
}

/// Graph handles produced by the shared backbone.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub input_transform: Option<Var>,
    pub feature_transform: Option<Var>,
    /// `N×64` per-point features after the feature transform.
    pub local: Var,
    /// Intermediate per-point features (all per-point layers but the last).
    pub skips: Vec<Var>,
    /// `N×K` per-point function values `h(x_i)`.
    pub point_features: Var,
    /// `b×K` aggregated features `u`.
    pub global: Var,
    /// Within-set argmax row per (set, dimension); max aggregation only.
    pub argmax: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub backbone: BackboneOutput,
    /// Class scores (`b×C`), part scores (`N×m`) or normals (`N×3`).
    pub output: Var,
    /// `b×256` features before the score layer (classification only).
    pub penultimate: Option<Var>,
}

/// Training targets matching the model head.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    Parts(&'a [usize]),
    Normals(&'a Tensor),
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub task: Var,
    pub reg: Option<Var>,
}

/// Stacked points of several clouds plus their row partition.
#[derive(Debug, Clone)]
pub struct Batch {
    pub points: Tensor,
    pub segs: Segments,
    pub categories: Option<Vec<usize>>,
}

impl Batch {
    pub fn from_clouds(clouds: &[&PointCloud]) -> Result<Self> {
        if clouds.is_empty() {
            return Err(Error::EmptySet("batch without clouds".into()));
        }
        let dim = clouds[0].dim();
        let mut data = Vec::new();
        let mut lengths = Vec::with_capacity(clouds.len());
        for c in clouds {
            if c.dim() != dim {
                return dim_err(format!("mixed point dimensions {dim} and {}", c.dim()));
            }
            if c.len() == 0 {
                return Err(Error::EmptySet(format!("cloud `{}` has no points", c.id)));
            }
            data.extend_from_slice(c.points());
            lengths.push(c.len());
        }
        let segs = Segments::from_lengths(&lengths)?;
        let categories = clouds.iter().map(|c| c.class_label).collect::<Option<Vec<_>>>();
        Ok(Batch {
            points: Tensor::new(&[segs.total_rows(), dim], data)?,
            segs,
            categories,
        })
    }
}

impl PointNet {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut layout = ParamLayout::new();
        let input_tnet = spec
            .use_input_transform
            .then(|| TNet::new(&mut layout, "input_tnet", &spec.input_tnet()));
        let mlp1 = SharedMlp::new(&mut layout, "mlp1", spec.input_dim, &SharedMlpSpec::relu_bn(&spec.pre_widths));
        let feature_tnet = spec
            .use_feature_transform
            .then(|| TNet::new(&mut layout, "feature_tnet", &spec.feature_tnet()));
        let mut post = spec.post_widths.clone();
        post.push(spec.bottleneck);
        let mlp2 = SharedMlp::new(&mut layout, "mlp2", mlp1.out_width(), &SharedMlpSpec::relu_bn(&post));
        let aggregator = Aggregator::new(&mut layout, "aggregate", spec.aggregator, spec.bottleneck);
        let head = match &spec.head {
            HeadSpec::Classify {
                num_classes,
                fc_widths,
                dropout_keep,
            } => {
                let fc = SharedMlp::new(&mut layout, "head.fc", spec.bottleneck, &SharedMlpSpec::relu_bn(fc_widths));
                let out = Dense::new(&mut layout, "head.out", fc.out_width(), *num_classes);
                HeadNet::Classify {
                    fc,
                    out,
                    keep: *dropout_keep,
                }
            }
            HeadSpec::Segment {
                head_widths,
                num_parts,
                categories,
            } => {
                let mlp = SharedMlp::new(
                    &mut layout,
                    "head.mlp",
                    spec.seg_head_input_width(),
                    &SharedMlpSpec::relu_bn(head_widths),
                );
                let out = Dense::new(&mut layout, "head.out", mlp.out_width(), *num_parts);
                HeadNet::PerPoint {
                    mlp,
                    out,
                    categories: *categories,
                }
            }
            HeadSpec::Normals { head_widths } => {
                let mlp = SharedMlp::new(
                    &mut layout,
                    "head.mlp",
                    spec.seg_head_input_width(),
                    &SharedMlpSpec::relu_bn(head_widths),
                );
                let out = Dense::new(&mut layout, "head.out", mlp.out_width(), 3);
                HeadNet::PerPoint {
                    mlp,
                    out,
                    categories: None,
                }
            }
        };
        Ok(PointNet {
            spec: spec.clone(),
            layout,
            input_tnet,
            mlp1,
            feature_tnet,
            mlp2,
            aggregator,
            head,
        })
    }

    /// Shared per-point pipeline: optional input alignment, per-point MLP,
    /// optional feature alignment, per-point MLP up to the bottleneck, then
    /// aggregation. With `frozen`, the given matrices replace the alignment
    /// networks (one matrix applied to every set).
    pub fn backbone(
        &self,
        f: &mut ForwardCtx,
        points: Var,
        segs: &Segments,
        frozen: Option<&FrozenTransforms>,
    ) -> Result<BackboneOutput> {
        let cols = f.graph.value(points).cols();
        if cols != self.spec.input_dim {
            return dim_err(format!("model expects {}-d points, got {cols}", self.spec.input_dim));
        }
        let mut x = points;
        let input_transform = match (&self.input_tnet, frozen) {
            (None, _) => None,
            (Some(t), None) => Some(t.forward(f, x, segs)?),
            (Some(t), Some(fr)) => Some(frozen_matrix(f, fr.input.as_deref(), t.dim, segs)?),
        };
        if let Some(m) = input_transform {
            x = f.graph.segment_transform(x, m, segs)?;
        }
        let mut skips = self.mlp1.forward_all(f, x)?;
        let mut local = *skips.last().expect("pre_widths is non-empty");
        let feature_transform = match (&self.feature_tnet, frozen) {
            (None, _) => None,
            (Some(t), None) => Some(t.forward(f, local, segs)?),
            (Some(t), Some(fr)) => Some(frozen_matrix(f, fr.feature.as_deref(), t.dim, segs)?),
        };
        if let Some(m) = feature_transform {
            local = f.graph.segment_transform(local, m, segs)?;
            *skips.last_mut().unwrap() = local;
        }
        let post = self.mlp2.forward_all(f, local)?;
        let point_features = *post.last().expect("bottleneck layer");
        skips.extend_from_slice(&post[..post.len() - 1]);
        let (global, argmax) = self.aggregator.forward(f, point_features, segs)?;
        Ok(BackboneOutput {
            input_transform,
            feature_transform,
            local,
            skips,
            point_features,
            global,
            argmax,
        })
    }

    /// Full forward pass. `categories` (one per set) is required when the
    /// segmentation head is category-conditioned.
    pub fn forward(
        &self,
        f: &mut ForwardCtx,
        points: Var,
        segs: &Segments,
        categories: Option<&[usize]>,
    ) -> Result<ModelOutput> {
        let backbone = self.backbone(f, points, segs, None)?;
        self.head_forward(f, backbone, segs, categories)
    }

    pub fn head_forward(
        &self,
        f: &mut ForwardCtx,
        backbone: BackboneOutput,
        segs: &Segments,
        categories: Option<&[usize]>,
    ) -> Result<ModelOutput> {
        match &self.head {
            HeadNet::Classify { fc, out, keep } => {
                let z = fc.forward(f, backbone.global)?;
                let dropped = f.dropout(z, *keep)?;
                let logits = out.forward(f, dropped)?;
                Ok(ModelOutput {
                    backbone,
                    output: logits,
                    penultimate: Some(z),
                })
            }
            HeadNet::PerPoint { mlp, out, categories: n_cat } => {
                let mut global = backbone.global;
                let mut parts = Vec::new();
                if let Some(c) = n_cat {
                    let cats = categories.ok_or_else(|| {
                        Error::Config("category-conditioned head needs a category per cloud".into())
                    })?;
                    if cats.len() != segs.len() {
                        return dim_err(format!("{} categories for {} clouds", cats.len(), segs.len()));
                    }
                    let mut onehot = vec![0.0; segs.len() * c];
                    for (s, &cat) in cats.iter().enumerate() {
                        if cat >= *c {
                            return Err(Error::Label(format!("category {cat} outside [0, {c})")));
                        }
                        onehot[s * c + cat] = 1.0;
                    }
                    let oh = f.graph.constant(Tensor::new(&[segs.len(), *c], onehot)?);
                    global = f.graph.concat_cols(&[global, oh])?;
                    parts.extend_from_slice(&backbone.skips);
                } else {
                    parts.push(backbone.local);
                }
                let expanded = f.graph.expand_segments(global, segs)?;
                parts.push(expanded);
                let input = f.graph.concat_cols(&parts)?;
                let h = mlp.forward(f, input)?;
                let y = out.forward(f, h)?;
                Ok(ModelOutput {
                    backbone,
                    output: y,
                    penultimate: None,
                })
            }
        }
    }

    /// Task loss plus `reg_weight · ‖I − AAᵀ‖²` on the feature transform
    /// (mean over the batch) when that transform exists.
    pub fn loss(&self, f: &mut ForwardCtx, out: &ModelOutput, targets: Targets<'_>) -> Result<LossParts> {
        let task = match (&self.spec.head, targets) {
            (HeadSpec::Classify { .. }, Targets::Classes(labels)) => {
                f.graph.softmax_cross_entropy(out.output, labels)?
            }
            (HeadSpec::Segment { .. }, Targets::Parts(labels)) => f.graph.softmax_cross_entropy(out.output, labels)?,
            (HeadSpec::Normals { .. }, Targets::Normals(gt)) => {
                let g = f.graph.constant(gt.clone());
                f.graph.abs_cosine_loss(out.output, g)?
            }
            _ => return Err(Error::Config("targets do not match the model head".into())),
        };
        let reg = match out.backbone.feature_transform {
            Some(a) => Some(f.graph.orthogonality_loss(a, self.spec.local_width())?),
            None => None,
        };
        let total = match reg {
            Some(r) => {
                let weighted = f.graph.scale(r, self.spec.reg_weight);
                f.graph.add(task, weighted)?
            }
            None => task,
        };
        Ok(LossParts { total, task, reg })
    }

    pub fn uses_max(&self) -> bool {
        self.spec.aggregator == AggregatorKind::Max
    }
}

fn frozen_matrix(f: &mut ForwardCtx, m: Option<&[f64]>, d: usize, segs: &Segments) -> Result<Var> {
    let m = m.ok_or_else(|| Error::Config("frozen transforms missing a matrix".into()))?;
    if m.len() != d * d {
        return dim_err(format!("frozen transform has {} entries, expected {}", m.len(), d * d));
    }
    let data: Vec<f64> = (0..segs.len()).flat_map(|_| m.iter().copied()).collect();
    Ok(f.graph.constant(Tensor::new(&[segs.len(), d * d], data)?))
}

/// Right-multiplies every point (row) by `m`.
pub fn apply_transform(points: &Tensor, m: &Tensor) -> Result<Tensor> {
    let d = points.cols();
    if m.rows() != d || m.cols() != d {
        return dim_err(format!("{:?} transform for {d}-d points", m.shape()));
    }
    let mut out = vec![0.0; points.numel()];
    crate::tensor::gemm(points.rows(), d, d, points.data(), false, m.data(), false, &mut out, false);
    Tensor::new(&[points.rows(), d], out)
}
