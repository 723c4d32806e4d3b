use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::tensor::{BnStats, Graph, Mode, Tensor, Var};

/// Batch-norm epsilon used by every normalization layer.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BnId(usize);

impl BnId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    /// Row-major `d×d` identity, flattened.
    FlatIdentity(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered table of every learnable tensor of a model, laid out in one
/// flat vector, plus the widths of its batch-norm layers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
    bn_widths: Vec<usize>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let entry = ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
            init,
        };
        self.total += entry.len();
        self.entries.push(entry);
        ParamId(self.entries.len() - 1)
    }

    pub fn add_bn(&mut self, width: usize) -> BnId {
        self.bn_widths.push(width);
        BnId(self.bn_widths.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    /// Number of learnable scalars.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn bn_widths(&self) -> &[usize] {
        &self.bn_widths
    }

    pub fn fresh_bn_stats(&self) -> Vec<BnStats> {
        self.bn_widths.iter().map(|&w| BnStats::new(w)).collect()
    }

    /// Draws initial values in entry order from a ChaCha8 stream.
    pub fn initialize(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![0.0; self.total];
        for e in &self.entries {
            let dst = &mut out[e.range()];
            match e.init {
                Init::Glorot { fan_in, fan_out } => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    dst.iter_mut().for_each(|v| *v = rng.gen_range(-limit..=limit));
                }
                Init::Zeros => {}
                Init::Ones => dst.iter_mut().for_each(|v| *v = 1.0),
                Init::FlatIdentity(d) => {
                    for i in 0..d {
                        dst[i * d + i] = 1.0;
                    }
                }
            }
        }
        out
    }

    /// Copies each parameter slice into its own tensor, in entry order.
    pub fn split(&self, values: &[f64]) -> Result<Vec<Tensor>> {
        if values.len() != self.total {
            return dim_err(format!("{} values for a layout of {}", values.len(), self.total));
        }
        self.entries
            .iter()
            .map(|e| Tensor::new(&e.shape, values[e.range()].to_vec()))
            .collect()
    }
}

/// State of one forward pass: the graph being recorded, one leaf per
/// parameter tensor, a working copy of the batch-norm statistics, and the
/// dropout stream.
pub struct ForwardCtx {
    pub graph: Graph,
    params: Vec<Var>,
    pub bn: Vec<BnStats>,
    pub mode: Mode,
    pub bn_momentum: f64,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    /// Registers every parameter of `layout` as a leaf. With `track_grad`
    /// the leaves accumulate gradients.
    pub fn new(
        layout: &ParamLayout,
        values: &[f64],
        bn: &[BnStats],
        mode: Mode,
        track_grad: bool,
        dropout_seed: u64,
    ) -> Result<Self> {
        let mut graph = Graph::new();
        let params = layout
            .split(values)?
            .into_iter()
            .map(|t| graph.leaf(t.with_requires_grad(track_grad)))
            .collect();
        Ok(Self::with_param_vars(graph, params, bn.to_vec(), mode, dropout_seed))
    }

    /// Uses leaves already recorded on `graph` (one per layout entry).
    pub fn with_param_vars(
        graph: Graph,
        params: Vec<Var>,
        bn: Vec<BnStats>,
        mode: Mode,
        dropout_seed: u64,
    ) -> Self {
        ForwardCtx {
            graph,
            params,
            bn,
            mode,
            bn_momentum: 0.5,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Inverted dropout driven by this pass's mode and stream.
    pub fn dropout(&mut self, x: Var, keep_prob: f64) -> Result<Var> {
        self.graph.dropout(x, keep_prob, self.mode, &mut self.rng)
    }

    /// Gathers parameter gradients back into one flat vector.
    pub fn flat_grad(&self, layout: &ParamLayout) -> Vec<f64> {
        let mut out = vec![0.0; layout.total()];
        for (e, &v) in layout.entries().iter().zip(&self.params) {
            out[e.range()].copy_from_slice(self.graph.grad(v));
        }
        out
    }
}
