use std::io::{Read, Write};
use std::path::Path;

use crate::data::PointCloud;
use crate::error::{dim_err, Error, Result};
use crate::layers::ForwardCtx;
use crate::tensor::{finite_difference_check, BnStats, Graph, Mode, Segments, Tensor};

use super::model::{Batch, FrozenTransforms, PointNet, Targets};
use super::spec::ModelSpec;

/// Magic bytes opening every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PNET1";

/// Learnable parameters and batch-norm statistics of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    net: PointNet,
    pub seed: u64,
    pub params: Vec<f64>,
    pub bn: Vec<BnStats>,
}

/// Plain values read out of an inference pass over a batch.
#[derive(Debug, Clone)]
pub struct Inference {
    pub segs: Segments,
    /// Class scores (`b×C`), part scores (`N×m`) or normals (`N×3`).
    pub output: Tensor,
    /// `b×K` aggregated features.
    pub global: Tensor,
    /// `b×256` pre-score features (classification only).
    pub penultimate: Option<Tensor>,
    /// `N×K` per-point function values.
    pub point_features: Tensor,
    /// `N×64` per-point features after the feature transform.
    pub local: Tensor,
    pub input_transform: Option<Tensor>,
    pub feature_transform: Option<Tensor>,
    /// Within-set argmax row per (set, dimension), max aggregation only.
    pub argmax: Option<Vec<usize>>,
}

impl ModelState {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let net = PointNet::new(spec)?;
        let params = net.layout.initialize(seed);
        let bn = net.layout.fresh_bn_stats();
        Ok(ModelState { net, seed, params, bn })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.net.spec
    }

    pub fn net(&self) -> &PointNet {
        &self.net
    }

    /// A forward context over a copy of this state's values.
    pub fn context(&self, mode: Mode, track_grad: bool, dropout_seed: u64) -> Result<ForwardCtx> {
        ForwardCtx::new(&self.net.layout, &self.params, &self.bn, mode, track_grad, dropout_seed)
    }

    /// Eval-mode forward pass over a batch of clouds.
    pub fn infer(&self, clouds: &[&PointCloud]) -> Result<Inference> {
        let batch = Batch::from_clouds(clouds)?;
        self.infer_batch(&batch, Mode::Eval)
    }

    pub fn infer_batch(&self, batch: &Batch, mode: Mode) -> Result<Inference> {
        self.run(batch, mode, None)
    }

    /// Eval-mode pass over a batch with the alignment matrices fixed to
    /// `frozen` instead of predicted from each set.
    pub fn infer_frozen(&self, batch: &Batch, frozen: &FrozenTransforms) -> Result<Inference> {
        self.run(batch, Mode::Eval, Some(frozen))
    }

    fn run(&self, batch: &Batch, mode: Mode, frozen: Option<&FrozenTransforms>) -> Result<Inference> {
        let mut f = self.context(mode, false, 0)?;
        let x = f.graph.constant(batch.points.clone());
        let backbone = self.net.backbone(&mut f, x, &batch.segs, frozen)?;
        let out = self
            .net
            .head_forward(&mut f, backbone, &batch.segs, batch.categories.as_deref())?;
        let g = &f.graph;
        let b = &out.backbone;
        Ok(Inference {
            segs: batch.segs.clone(),
            output: g.value(out.output).clone(),
            global: g.value(b.global).clone(),
            penultimate: out.penultimate.map(|v| g.value(v).clone()),
            point_features: g.value(b.point_features).clone(),
            local: g.value(b.local).clone(),
            input_transform: b.input_transform.map(|v| g.value(v).clone()),
            feature_transform: b.feature_transform.map(|v| g.value(v).clone()),
            argmax: b.argmax.clone(),
        })
    }

    /// Per-point function `h` on arbitrary `N×d` points with the alignment
    /// matrices held fixed, evaluated in eval mode. Returns `N×K`.
    pub fn point_function(&self, points: &Tensor, frozen: &FrozenTransforms) -> Result<Tensor> {
        let mut f = self.context(Mode::Eval, false, 0)?;
        let segs = Segments::single(points.rows())?;
        let x = f.graph.constant(points.clone());
        let b = self.net.backbone(&mut f, x, &segs, Some(frozen))?;
        Ok(f.graph.value(b.point_features).clone())
    }

    /// Alignment matrices this model produces for `cloud`.
    pub fn transforms_for(&self, cloud: &PointCloud) -> Result<FrozenTransforms> {
        let inf = self.infer(&[cloud])?;
        Ok(FrozenTransforms {
            input: inf.input_transform.map(Tensor::into_data),
            feature: inf.feature_transform.map(Tensor::into_data),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let spec = self.net.spec.to_text();
        out.extend_from_slice(&(spec.len() as u64).to_le_bytes());
        out.extend_from_slice(spec.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_f64s(&mut out, &self.params);
        out.extend_from_slice(&(self.bn.len() as u64).to_le_bytes());
        for s in &self.bn {
            put_f64s(&mut out, &s.mean);
            put_f64s(&mut out, &s.var);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| fmt_err("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt_err("not a PNET1 checkpoint"));
        }
        let spec_len = get_u64(&mut r)? as usize;
        if spec_len > r.len() {
            return Err(fmt_err("truncated spec block"));
        }
        let (spec_bytes, rest) = r.split_at(spec_len);
        r = rest;
        let text = std::str::from_utf8(spec_bytes).map_err(|_| fmt_err("spec block is not UTF-8"))?;
        let spec = ModelSpec::from_text(text)?;
        let seed = get_u64(&mut r)?;
        let params = get_f64s(&mut r)?;
        let n_bn = get_u64(&mut r)? as usize;
        let mut bn = Vec::with_capacity(n_bn.min(1 << 16));
        for _ in 0..n_bn {
            let mean = get_f64s(&mut r)?;
            let var = get_f64s(&mut r)?;
            bn.push(BnStats { mean, var });
        }
        if !r.is_empty() {
            return Err(fmt_err("trailing bytes after checkpoint"));
        }
        let net = PointNet::new(&spec)?;
        if params.len() != net.layout.total() {
            return dim_err(format!(
                "checkpoint has {} parameters, spec needs {}",
                params.len(),
                net.layout.total()
            ));
        }
        let widths: Vec<usize> = bn.iter().map(|s| s.width()).collect();
        if widths != net.layout.bn_widths() || bn.iter().any(|s| s.var.len() != s.mean.len()) {
            return dim_err("checkpoint batch-norm statistics do not match the spec");
        }
        Ok(ModelState { net, seed, params, bn })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn fmt_err(msg: &str) -> Error {
    Error::Format(msg.to_string())
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| fmt_err("truncated length field"))?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut &[u8]) -> Result<Vec<f64>> {
    let n = get_u64(r)? as usize;
    if n.checked_mul(8).map_or(true, |bytes| bytes > r.len()) {
        return Err(fmt_err("truncated float array"));
    }
    let (head, rest) = r.split_at(n * 8);
    *r = rest;
    Ok(head
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Runs [`finite_difference_check`] on the training loss of `state` over
/// `batch`, treating the points and every parameter tensor as inputs.
/// Batch norm runs in train mode on a copy of the statistics and dropout
/// uses a fixed stream, so the function is deterministic.
pub fn loss_gradient_check(
    state: &ModelState,
    batch: &Batch,
    targets: Targets<'_>,
    h: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<f64> {
    let net = state.net();
    let mut inputs = vec![batch.points.clone()];
    inputs.extend(net.layout.split(&state.params)?);
    finite_difference_check(
        |g, vars| {
            let mut f = ForwardCtx::with_param_vars(std::mem::take(g), vars[1..].to_vec(), state.bn.clone(), Mode::Train, 0);
            let out = net.forward(&mut f, vars[0], &batch.segs, batch.categories.as_deref())?;
            let loss = net.loss(&mut f, &out, targets)?.total;
            *g = f.graph;
            Ok(loss)
        },
        &inputs,
        h,
        coords,
    )
}

/// Exact learnable-scalar count (weights, biases, batch-norm scale/shift).
pub fn count_parameters(spec: &ModelSpec) -> Result<usize> {
    Ok(PointNet::new(spec)?.layout.total())
}

/// Class scores and analysis outputs for one cloud.
#[derive(Debug, Clone)]
pub struct ClassifyResult {
    pub logits: Vec<f64>,
    pub feature_transform: Option<Vec<f64>>,
    pub global: Vec<f64>,
    pub local: Tensor,
    pub argmax: Option<Vec<usize>>,
}

pub fn classify_forward(state: &ModelState, cloud: &PointCloud, mode: Mode) -> Result<ClassifyResult> {
    let inf = state.infer_batch(&Batch::from_clouds(&[cloud])?, mode)?;
    Ok(ClassifyResult {
        logits: inf.output.into_data(),
        feature_transform: inf.feature_transform.map(Tensor::into_data),
        global: inf.global.into_data(),
        local: inf.local,
        argmax: inf.argmax,
    })
}

/// Per-point part scores (`n×m`) for one cloud.
pub fn segment_forward(state: &ModelState, cloud: &PointCloud, mode: Mode) -> Result<Tensor> {
    Ok(state.infer_batch(&Batch::from_clouds(&[cloud])?, mode)?.output)
}

/// Per-point normal predictions (`n×3`) for one cloud.
pub fn normal_head_forward(state: &ModelState, cloud: &PointCloud, mode: Mode) -> Result<Tensor> {
    segment_forward(state, cloud, mode)
}

/// `‖I − AAᵀ‖_F²` of a square matrix.
pub fn orthogonality_loss(a: &Tensor) -> Result<f64> {
    if a.shape().len() != 2 || a.rows() != a.cols() {
        return dim_err(format!("orthogonality loss of non-square shape {:?}", a.shape()));
    }
    let mut g = Graph::new();
    let v = g.constant(a.clone());
    let l = g.orthogonality_loss(v, a.rows())?;
    Ok(g.value(l).item())
}

/// `task + weight · ‖I − AAᵀ‖_F²`; the term is omitted without a matrix.
pub fn total_loss(task: f64, feature_transform: Option<&Tensor>, reg_weight: f64) -> Result<f64> {
    match feature_transform {
        Some(a) => Ok(task + reg_weight * orthogonality_loss(a)?),
        None => Ok(task),
    }
}

/// Mean over rows of `1 − |cos∠(pred, gt)|`.
pub fn normal_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(gt.clone());
    let l = g.abs_cosine_loss(p, t)?;
    Ok(g.value(l).item())
}
