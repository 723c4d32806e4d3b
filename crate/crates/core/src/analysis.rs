//! Critical point sets, upper-bound shapes and related probes of a trained
//! (or untrained) point-set network with max aggregation.
//!
//! With the alignment matrices of a cloud `S` held fixed, the global
//! feature is `u(S) = max_i h(x_i)` for a per-point function
//! `h: R^d → R^K`. The critical set `C_S` is the set of rows attaining each
//! column maximum (first occurrence), so `|C_S| ≤ K`; the upper-bound shape
//! `N_S` is every point `p` with `h(p) ≤ u(S)` elementwise. Any `T` with
//! `C_S ⊆ T ⊆ N_S` has `u(T) = u(S)`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::layers::AggregatorKind;
use crate::pointnet::{Batch, FrozenTransforms, HeadSpec, ModelState};
use crate::tensor::Tensor;

pub const GRID_HEADER: &str = "# setnet-grid v1";
pub const CRITICAL_HEADER: &str = "# setnet-critical v1";

/// Rows evaluated per forward pass when sweeping large grids.
const GRID_CHUNK: usize = 4096;

fn require_max(state: &ModelState) -> Result<()> {
    match state.spec().aggregator {
        AggregatorKind::Max => Ok(()),
        other => Err(Error::UnsupportedAggregator(format!(
            "critical-point analysis needs max aggregation, model uses {other}"
        ))),
    }
}

/// Column maxima of an `N×K` matrix with the first row attaining each.
pub fn column_max(h: &Tensor) -> (Vec<f64>, Vec<usize>) {
    let k = h.cols();
    let mut u = h.row(0).to_vec();
    let mut arg = vec![0; k];
    for i in 1..h.rows() {
        for (j, &v) in h.row(i).iter().enumerate() {
            if v > u[j] {
                u[j] = v;
                arg[j] = i;
            }
        }
    }
    (u, arg)
}

fn leq_all(h: &[f64], u: &[f64]) -> bool {
    h.iter().zip(u).all(|(a, b)| a <= b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalSetReport {
    pub cloud_id: String,
    pub n: usize,
    pub k: usize,
    /// Global feature `u = max_i h(x_i)`.
    pub u: Vec<f64>,
    /// Sorted, unique row indices attaining some column maximum.
    pub critical_indices: Vec<usize>,
    /// Sampled upper-bound points (may be empty if not computed).
    pub upper_bound_points: Vec<Vec<f64>>,
    /// Named property checks and whether they held.
    pub checks: Vec<(String, bool)>,
}

impl CriticalSetReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CRITICAL_HEADER} id={} n={} k={}", self.cloud_id, self.n, self.k);
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "u {}", join(&self.u));
        let idx: Vec<String> = self.critical_indices.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(s, "critical {}", idx.join(" "));
        for p in &self.upper_bound_points {
            let _ = writeln!(s, "upper {}", join(p));
        }
        for (name, ok) in &self.checks {
            let _ = writeln!(s, "check {name} {ok}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, head) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
        let rest = head
            .strip_prefix(CRITICAL_HEADER)
            .ok_or(Error::Parse { line: 1, msg: "missing critical-set header".into() })?;
        let mut report = CriticalSetReport {
            cloud_id: String::new(),
            n: 0,
            k: 0,
            u: Vec::new(),
            critical_indices: Vec::new(),
            upper_bound_points: Vec::new(),
            checks: Vec::new(),
        };
        for field in rest.split_whitespace() {
            let bad = || Error::Parse { line: 1, msg: format!("bad header field `{field}`") };
            match field.split_once('=').ok_or_else(bad)? {
                ("id", v) => report.cloud_id = v.to_string(),
                ("n", v) => report.n = v.parse().map_err(|_| bad())?,
                ("k", v) => report.k = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        for (i, line) in lines {
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let mut it = line.split_whitespace();
            let Some(tag) = it.next() else { continue };
            let floats = |it: std::str::SplitWhitespace<'_>| {
                it.map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number `{t}`"))))
                    .collect::<Result<Vec<_>>>()
            };
            match tag {
                "u" => report.u = floats(it)?,
                "critical" => {
                    report.critical_indices = it
                        .map(|t| t.parse::<usize>().map_err(|_| err(format!("bad index `{t}`"))))
                        .collect::<Result<_>>()?
                }
                "upper" => report.upper_bound_points.push(floats(it)?),
                "check" => {
                    let (Some(name), Some(v)) = (it.next(), it.next()) else {
                        return Err(err("check needs a name and a value".into()));
                    };
                    let ok = v.parse::<bool>().map_err(|_| err(format!("bad flag `{v}`")))?;
                    report.checks.push((name.to_string(), ok));
                }
                other => return Err(err(format!("unknown record `{other}`"))),
            }
        }
        Ok(report)
    }
}

/// Per-point features `h` of `points` (`N×d`) under `frozen`, evaluated in
/// chunks so large grids fit in memory. `visit` receives each chunk's
/// starting row and its `rows×K` features.
fn for_each_chunk(
    state: &ModelState,
    points: &Tensor,
    frozen: &FrozenTransforms,
    mut visit: impl FnMut(usize, &Tensor) -> Result<()>,
) -> Result<()> {
    let d = points.cols();
    let n = points.rows();
    let mut start = 0;
    while start < n {
        let end = (start + GRID_CHUNK).min(n);
        let chunk = Tensor::new(&[end - start, d], points.data()[start * d..end * d].to_vec())?;
        visit(start, &state.point_function(&chunk, frozen)?)?;
        start = end;
    }
    Ok(())
}

/// `C_S` and `u` for one cloud, with the cloud's own alignment matrices.
pub fn critical_set(state: &ModelState, cloud: &PointCloud) -> Result<CriticalSetReport> {
    require_max(state)?;
    let frozen = state.transforms_for(cloud)?;
    critical_set_frozen(state, cloud, &frozen)
}

fn critical_set_frozen(state: &ModelState, cloud: &PointCloud, frozen: &FrozenTransforms) -> Result<CriticalSetReport> {
    if cloud.is_empty() {
        return Err(Error::EmptySet(format!("cloud `{}` has no points", cloud.id)));
    }
    let h = state.point_function(&cloud.to_tensor()?, frozen)?;
    let (u, arg) = column_max(&h);
    let mut critical = arg;
    critical.sort_unstable();
    critical.dedup();
    let k = u.len();
    let checks = vec![
        ("critical_count_le_k".to_string(), critical.len() <= k),
        ("indices_in_range".to_string(), critical.iter().all(|&i| i < cloud.len())),
    ];
    Ok(CriticalSetReport {
        cloud_id: cloud.id.clone(),
        n: cloud.len(),
        k,
        u,
        critical_indices: critical,
        upper_bound_points: Vec::new(),
        checks,
    })
}

/// Regular `r×r×r` lattice on `[−1,1]³`, `x` slowest and `z` fastest.
pub fn cube_grid(r: usize) -> Result<Tensor> {
    if r < 2 {
        return Err(Error::Config(format!("grid resolution {r} < 2")));
    }
    let coord = |a: usize| -1.0 + 2.0 * a as f64 / (r - 1) as f64;
    let mut data = Vec::with_capacity(r * r * r * 3);
    for a in 0..r {
        for b in 0..r {
            for c in 0..r {
                data.extend_from_slice(&[coord(a), coord(b), coord(c)]);
            }
        }
    }
    Tensor::new(&[r * r * r, 3], data)
}

fn require_3d(state: &ModelState) -> Result<()> {
    if state.spec().input_dim != 3 {
        return Err(Error::Dimension(format!(
            "grid probes need 3-d input, model takes {}-d points",
            state.spec().input_dim
        )));
    }
    Ok(())
}

/// Grid points `p ∈ [−1,1]³` (resolution `r`) with `h(p) ≤ u(S)`
/// elementwise, using exact comparison.
pub fn upper_bound_shape(state: &ModelState, cloud: &PointCloud, r: usize) -> Result<Vec<Vec<f64>>> {
    require_3d(state)?;
    let grid = cube_grid(r)?;
    let report = critical_set(state, cloud)?;
    let frozen = state.transforms_for(cloud)?;
    upper_bound_with(state, &grid, &frozen, &report.u)
}

/// Points of `candidates` whose features stay below `u` elementwise.
pub fn upper_bound_with(
    state: &ModelState,
    candidates: &Tensor,
    frozen: &FrozenTransforms,
    u: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for_each_chunk(state, candidates, frozen, |start, h| {
        for i in 0..h.rows() {
            if leq_all(h.row(i), u) {
                out.push(candidates.row(start + i).to_vec());
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// Grid points with their features under fixed transforms, reusable across
/// clouds that share those transforms (e.g. every cloud of a model without
/// alignment networks, or of an untrained one).
#[derive(Debug, Clone)]
pub struct GridSample {
    pub resolution: usize,
    pub frozen: FrozenTransforms,
    pub points: Tensor,
    pub features: Tensor,
}

impl GridSample {
    pub fn new(state: &ModelState, frozen: FrozenTransforms, r: usize) -> Result<Self> {
        require_3d(state)?;
        let points = cube_grid(r)?;
        let features = state.point_function(&points, &frozen)?;
        Ok(GridSample { resolution: r, frozen, points, features })
    }

    /// Rows whose features are `≤ u` elementwise.
    pub fn below(&self, u: &[f64]) -> Vec<usize> {
        (0..self.points.rows()).filter(|&i| leq_all(self.features.row(i), u)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem2Report {
    pub cloud_id: String,
    pub k: usize,
    pub critical_count: usize,
    /// Size of the sampled upper-bound set (cloud points plus grid hits).
    pub upper_bound_size: usize,
    /// Number of sets `T` whose global feature was compared.
    pub sets_checked: usize,
}

/// Checks `u(T) == u(S)` bitwise for `T = S`, `T = C_S`, `T` = everything
/// sampled, and `trials` random sets between `C_S` and the sampled `N_S`
/// (cloud points plus grid points at resolution `r`).
pub fn verify_theorem2<R: Rng + ?Sized>(
    state: &ModelState,
    cloud: &PointCloud,
    r: usize,
    trials: usize,
    rng: &mut R,
) -> Result<Theorem2Report> {
    require_max(state)?;
    let frozen = state.transforms_for(cloud)?;
    let grid = if state.spec().input_dim == 3 {
        Some(GridSample::new(state, frozen, r)?)
    } else {
        None
    };
    verify_theorem2_inner(state, cloud, grid.as_ref(), trials, rng)
}

/// [`verify_theorem2`] against a precomputed grid, which must have been
/// built with this cloud's alignment matrices.
pub fn verify_theorem2_with_grid<R: Rng + ?Sized>(
    state: &ModelState,
    cloud: &PointCloud,
    grid: &GridSample,
    trials: usize,
    rng: &mut R,
) -> Result<Theorem2Report> {
    require_max(state)?;
    if state.transforms_for(cloud)? != grid.frozen {
        return Err(Error::Config("grid was sampled under different alignment matrices".into()));
    }
    verify_theorem2_inner(state, cloud, Some(grid), trials, rng)
}

fn verify_theorem2_inner<R: Rng + ?Sized>(
    state: &ModelState,
    cloud: &PointCloud,
    grid: Option<&GridSample>,
    trials: usize,
    rng: &mut R,
) -> Result<Theorem2Report> {
    let frozen = grid.map(|g| g.frozen.clone()).map_or_else(|| state.transforms_for(cloud), Ok)?;
    let report = critical_set_frozen(state, cloud, &frozen)?;
    let u = &report.u;
    let k = report.k;
    if report.critical_indices.len() > k {
        return Err(Error::TheoremViolation(format!(
            "{} critical points exceed bottleneck {k}",
            report.critical_indices.len()
        )));
    }
    let d = cloud.dim();
    let critical: Vec<&[f64]> = report.critical_indices.iter().map(|&i| cloud.point(i)).collect();
    let critical_set: std::collections::HashSet<usize> = report.critical_indices.iter().copied().collect();
    // everything sampled from N_S that is not already critical
    let mut extra: Vec<&[f64]> = (0..cloud.len())
        .filter(|i| !critical_set.contains(i))
        .map(|i| cloud.point(i))
        .collect();
    if let Some(g) = grid {
        extra.extend(g.below(u).into_iter().map(|i| g.points.row(i)));
    }
    let upper_bound_size = critical.len() + extra.len();

    // Every set is pushed through the network; the sets share one batched
    // call since h acts on each point independently once the alignment
    // matrices are fixed.
    let mut sets: Vec<(String, Vec<&[f64]>)> = vec![
        ("S".into(), (0..cloud.len()).map(|i| cloud.point(i)).collect()),
        ("C_S".into(), critical.clone()),
        ("all of sampled N_S".into(), critical.iter().copied().chain(extra.iter().copied()).collect()),
    ];
    for t in 0..trials {
        let take = rng.gen_range(0..=extra.len());
        let mut rows = critical.clone();
        rows.extend(extra.choose_multiple(rng, take).copied());
        rows.shuffle(rng);
        sets.push((format!("random #{t}"), rows));
    }
    let data: Vec<f64> = sets.iter().flat_map(|(_, rows)| rows.concat()).collect();
    let total: usize = sets.iter().map(|(_, rows)| rows.len()).sum();
    let h = state.point_function(&Tensor::new(&[total, d], data)?, &frozen)?;
    let mut start = 0;
    for (what, rows) in &sets {
        let ut = &h.data()[start * k..(start + rows.len()) * k];
        start += rows.len();
        let mut m = ut[..k].to_vec();
        for row in ut.chunks_exact(k).skip(1) {
            for (mj, &v) in m.iter_mut().zip(row) {
                if v > *mj {
                    *mj = v;
                }
            }
        }
        for (j, &m) in m.iter().enumerate() {
            if m.to_bits() != u[j].to_bits() {
                return Err(Error::TheoremViolation(format!(
                    "cloud `{}`, set {what}: dimension {j} gives {m} instead of {}",
                    cloud.id, u[j]
                )));
            }
        }
    }
    Ok(Theorem2Report {
        cloud_id: cloud.id.clone(),
        k,
        critical_count: report.critical_indices.len(),
        upper_bound_size,
        sets_checked: trials + 3,
    })
}

/// Values of one point-function dimension over the `[−1,1]³` lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationGrid {
    pub dim: usize,
    pub resolution: usize,
    /// `r³` values in [`cube_grid`] order.
    pub values: Vec<f64>,
}

impl ActivationGrid {
    pub fn mask(&self, threshold: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v > threshold).collect()
    }

    /// Share of grid points with value above `threshold`.
    pub fn fraction_above(&self, threshold: f64) -> f64 {
        self.mask(threshold).iter().filter(|&&m| m).count() as f64 / self.values.len() as f64
    }

    /// Header, then one `x y z value above_0.5` record per grid point.
    pub fn render(&self) -> String {
        let r = self.resolution;
        let mut s = String::with_capacity(self.values.len() * 48);
        let _ = writeln!(s, "{GRID_HEADER} dim={} resolution={r}", self.dim);
        let coord = |a: usize| -1.0 + 2.0 * a as f64 / (r - 1) as f64;
        for (i, v) in self.values.iter().enumerate() {
            let (a, b, c) = (i / (r * r), (i / r) % r, i % r);
            let _ = writeln!(s, "{} {} {} {} {}", coord(a), coord(b), coord(c), v, (*v > 0.5) as u8);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, head) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
        let rest = head
            .strip_prefix(GRID_HEADER)
            .ok_or(Error::Parse { line: 1, msg: "missing grid header".into() })?;
        let (mut dim, mut resolution) = (None, None);
        for field in rest.split_whitespace() {
            let bad = || Error::Parse { line: 1, msg: format!("bad header field `{field}`") };
            match field.split_once('=').ok_or_else(bad)? {
                ("dim", v) => dim = Some(v.parse().map_err(|_| bad())?),
                ("resolution", v) => resolution = Some(v.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        let (Some(dim), Some(resolution)) = (dim, resolution) else {
            return Err(Error::Parse { line: 1, msg: "header needs dim= and resolution=".into() });
        };
        let mut values = Vec::new();
        for (i, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 5 {
                return Err(Error::Parse { line: i + 1, msg: format!("expected 5 columns, found {}", fields.len()) });
            }
            values.push(fields[3].parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad value `{}`", fields[3]),
            })?);
        }
        let resolution: usize = resolution;
        if values.len() != resolution.pow(3) {
            return Err(Error::Format(format!("{} values for resolution {resolution}", values.len())));
        }
        Ok(ActivationGrid { dim, resolution, values })
    }
}

/// `h_j` over the `[−1,1]³` lattice with identity alignment matrices.
pub fn point_function_grid(state: &ModelState, j: usize, r: usize) -> Result<ActivationGrid> {
    point_function_grid_with(state, j, r, &FrozenTransforms::identity(state.spec()))
}

pub fn point_function_grid_with(
    state: &ModelState,
    j: usize,
    r: usize,
    frozen: &FrozenTransforms,
) -> Result<ActivationGrid> {
    require_3d(state)?;
    let k = state.spec().bottleneck;
    if j >= k {
        return Err(Error::Index(format!("point-function dimension {j} of {k}")));
    }
    let grid = cube_grid(r)?;
    let mut values = Vec::with_capacity(grid.rows());
    for_each_chunk(state, &grid, frozen, |_, h| {
        values.extend((0..h.rows()).map(|i| h.row(i)[j]));
        Ok(())
    })?;
    Ok(ActivationGrid { dim: j, resolution: r, values })
}

/// The 256-wide features feeding the class-score layer, one row per cloud.
pub fn embed(state: &ModelState, clouds: &[PointCloud]) -> Result<Vec<Vec<f64>>> {
    if !matches!(state.spec().head, HeadSpec::Classify { .. }) {
        return Err(Error::Config("retrieval needs a classification model".into()));
    }
    let mut out = Vec::with_capacity(clouds.len());
    for chunk in clouds.chunks(32) {
        let refs: Vec<&PointCloud> = chunk.iter().collect();
        let inf = state.infer_batch(&Batch::from_clouds(&refs)?, crate::tensor::Mode::Eval)?;
        let z = inf.penultimate.expect("classification head yields features");
        out.extend((0..z.rows()).map(|i| z.row(i).to_vec()));
    }
    Ok(out)
}

/// Top-`k` gallery entries nearest to `query` in embedding space, as
/// `(id, distance)` sorted by distance then id.
pub fn retrieve(
    state: &ModelState,
    query: &PointCloud,
    gallery: &[PointCloud],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let feats = embed(state, gallery)?;
    let q = embed(state, std::slice::from_ref(query))?.remove(0);
    let ids: Vec<&str> = gallery.iter().map(|c| c.id.as_str()).collect();
    retrieve_embedded(&q, &feats, &ids, k)
}

/// [`retrieve`] over precomputed embeddings.
pub fn retrieve_embedded(query: &[f64], gallery: &[Vec<f64>], ids: &[&str], k: usize) -> Result<Vec<(String, f64)>> {
    if gallery.is_empty() {
        return Err(Error::EmptySet("retrieval gallery is empty".into()));
    }
    if k == 0 || k > gallery.len() {
        return Err(Error::Config(format!("top-{k} of a gallery of {}", gallery.len())));
    }
    let mut ranked: Vec<(String, f64)> = gallery
        .iter()
        .zip(ids)
        .map(|(g, id)| {
            let d = g.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            (id.to_string(), d)
        })
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Point pairs `(i_A, i_B)` that produce the maximum of the same global
/// feature dimension, one per dimension in dimension order, repeated pairs
/// dropped. Each cloud uses its own alignment matrices.
pub fn correspondence(state: &ModelState, a: &PointCloud, b: &PointCloud) -> Result<Vec<(usize, usize)>> {
    require_max(state)?;
    let arg = |c: &PointCloud| -> Result<Vec<usize>> {
        let frozen = state.transforms_for(c)?;
        Ok(column_max(&state.point_function(&c.to_tensor()?, &frozen)?).1)
    };
    let (ia, ib) = (arg(a)?, arg(b)?);
    let mut seen = std::collections::HashSet::new();
    Ok(ia.into_iter().zip(ib).filter(|p| seen.insert(*p)).collect())
}
