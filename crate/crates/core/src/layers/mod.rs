//! Point-set layer primitives.
//!
//! A shared MLP maps every row (point) of an `n×d` matrix through the same
//! dense + batch-norm + ReLU stack; an [`Aggregator`] then reduces each set
//! of rows to one vector with an order-invariant function.

mod params;

pub use params::{BnId, ForwardCtx, Init, ParamEntry, ParamId, ParamLayout, BN_EPS};

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Segments, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// Widths of a per-point MLP. The input width is supplied separately.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedMlpSpec {
    pub layer_widths: Vec<usize>,
    pub use_batch_norm: bool,
    pub final_activation: Activation,
}

impl SharedMlpSpec {
    /// Every layer followed by batch norm and ReLU.
    pub fn relu_bn(widths: &[usize]) -> Self {
        SharedMlpSpec {
            layer_widths: widths.to_vec(),
            use_batch_norm: true,
            final_activation: Activation::Relu,
        }
    }
}

/// `x·W + b` applied row-wise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(layout: &mut ParamLayout, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_init(layout, name, fan_in, fan_out, Init::Glorot { fan_in, fan_out }, Init::Zeros)
    }

    pub fn with_init(
        layout: &mut ParamLayout,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        weight: Init,
        bias: Init,
    ) -> Self {
        Dense {
            weight: layout.add(format!("{name}.weight"), &[fan_in, fan_out], weight),
            bias: layout.add(format!("{name}.bias"), &[fan_out], bias),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, f: &mut ForwardCtx, x: Var) -> Result<Var> {
        let cols = f.graph.value(x).cols();
        if cols != self.fan_in {
            return dim_err(format!("dense layer expects width {}, got {cols}", self.fan_in));
        }
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        let y = f.graph.matmul(x, w)?;
        f.graph.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnId,
}

impl BatchNormLayer {
    pub fn new(layout: &mut ParamLayout, name: &str, width: usize) -> Self {
        BatchNormLayer {
            gamma: layout.add(format!("{name}.gamma"), &[width], Init::Ones),
            beta: layout.add(format!("{name}.beta"), &[width], Init::Zeros),
            stats: layout.add_bn(width),
        }
    }

    pub fn forward(&self, f: &mut ForwardCtx, x: Var) -> Result<Var> {
        let (gamma, beta) = (f.param(self.gamma), f.param(self.beta));
        let (mode, momentum) = (f.mode, f.bn_momentum);
        let stats = &mut f.bn[self.stats.index()];
        f.graph.batch_norm(x, gamma, beta, stats, mode, momentum, BN_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    pub dense: Dense,
    pub bn: Option<BatchNormLayer>,
    pub relu: bool,
}

impl MlpLayer {
    pub fn forward(&self, f: &mut ForwardCtx, x: Var) -> Result<Var> {
        let mut y = self.dense.forward(f, x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(f, y)?;
        }
        if self.relu {
            y = f.graph.relu(y);
        }
        Ok(y)
    }
}

/// A stack of dense layers applied independently to every row, with one
/// parameter set shared by all rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedMlp {
    pub in_width: usize,
    pub layers: Vec<MlpLayer>,
}

impl SharedMlp {
    /// Hidden layers always get ReLU (and batch norm if enabled); the last
    /// layer gets them only when `final_activation` is ReLU.
    pub fn new(layout: &mut ParamLayout, name: &str, in_width: usize, spec: &SharedMlpSpec) -> Self {
        let mut layers = Vec::with_capacity(spec.layer_widths.len());
        let mut width = in_width;
        for (i, &out) in spec.layer_widths.iter().enumerate() {
            let last = i + 1 == spec.layer_widths.len();
            let activated = !last || spec.final_activation == Activation::Relu;
            let dense = Dense::new(layout, &format!("{name}.{i}"), width, out);
            let bn = (spec.use_batch_norm && activated)
                .then(|| BatchNormLayer::new(layout, &format!("{name}.{i}.bn"), out));
            layers.push(MlpLayer {
                dense,
                bn,
                relu: activated,
            });
            width = out;
        }
        SharedMlp { in_width, layers }
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(self.in_width, |l| l.dense.fan_out)
    }

    pub fn forward(&self, f: &mut ForwardCtx, x: Var) -> Result<Var> {
        Ok(*self.forward_all(f, x)?.last().unwrap_or(&x))
    }

    /// Output of every layer, in order.
    pub fn forward_all(&self, f: &mut ForwardCtx, x: Var) -> Result<Vec<Var>> {
        let cols = f.graph.value(x).cols();
        if cols != self.in_width {
            return dim_err(format!("shared MLP expects width {}, got {cols}", self.in_width));
        }
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut y = x;
        for layer in &self.layers {
            y = layer.forward(f, y)?;
            outs.push(y);
        }
        Ok(outs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregatorKind {
    #[default]
    Max,
    Average,
    Attention,
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregatorKind::Max => "max",
            AggregatorKind::Average => "average",
            AggregatorKind::Attention => "attention",
        })
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(AggregatorKind::Max),
            "average" | "avg" | "mean" => Ok(AggregatorKind::Average),
            "attention" => Ok(AggregatorKind::Attention),
            other => Err(Error::Config(format!("unknown aggregator `{other}`"))),
        }
    }
}

/// Symmetric reduction of each set of rows to one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    pub kind: AggregatorKind,
    /// Scalar score layer `K→1` for attention, zero-initialized.
    pub score: Option<Dense>,
}

impl Aggregator {
    pub fn new(layout: &mut ParamLayout, name: &str, kind: AggregatorKind, width: usize) -> Self {
        let score = (kind == AggregatorKind::Attention).then(|| {
            Dense::with_init(layout, &format!("{name}.score"), width, 1, Init::Zeros, Init::Zeros)
        });
        Aggregator { kind, score }
    }

    /// Returns the `b×K` aggregated matrix and, for max aggregation, the
    /// within-set argmax row of every (set, column).
    pub fn forward(
        &self,
        f: &mut ForwardCtx,
        x: Var,
        segs: &Segments,
    ) -> Result<(Var, Option<Vec<usize>>)> {
        if f.graph.value(x).rows() == 0 || segs.is_empty() {
            return Err(Error::EmptySet("aggregate over no points".into()));
        }
        match self.kind {
            AggregatorKind::Max => {
                let (v, arg) = f.graph.segment_max(x, segs)?;
                Ok((v, Some(arg)))
            }
            AggregatorKind::Average => Ok((f.graph.segment_mean(x, segs)?, None)),
            AggregatorKind::Attention => {
                let score = self.score.as_ref().expect("attention aggregator has a score layer");
                let s = score.forward(f, x)?;
                Ok((f.graph.segment_attention(x, s, segs)?, None))
            }
        }
    }
}

/// Sorts rows lexicographically (dimension 0 first). Stable.
pub fn sort_canonical(points: &Tensor) -> Tensor {
    let c = points.cols();
    let mut order: Vec<usize> = (0..points.rows()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (points.row(a), points.row(b));
        ra.iter()
            .zip(rb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut data = Vec::with_capacity(points.numel());
    for i in order {
        data.extend_from_slice(points.row(i));
    }
    let shape = if points.shape().len() == 2 { vec![points.rows(), c] } else { points.shape().to_vec() };
    Tensor::new(&shape, data).expect("same size")
}

#[cfg(test)]
mod tests;
