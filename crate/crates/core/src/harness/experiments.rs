use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::{DataSource, ExperimentConfig, Task};
use super::metrics::evaluate_classification;
use super::train::{corrupt_dataset, load_datasets, train_model};
use crate::analysis::critical_set;
use crate::data::{furthest_point_sample, Corruption, Dataset};
use crate::error::{Error, Result};
use crate::layers::AggregatorKind;
use crate::pointnet::{count_parameters, fmt_f64, ModelState};

pub const CURVE_HEADER: &str = "# setnet-curve v1";

pub const DELETION_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 0.875];
pub const OUTLIER_RATIOS: [f64; 4] = [0.0, 0.05, 0.1, 0.2];
pub const PERTURB_SIGMAS: [f64; 6] = [0.0, 0.02, 0.04, 0.06, 0.08, 0.1];

/// Worker count for sweeps, from `SETNET_THREADS` (default 1).
pub fn sweep_threads() -> usize {
    std::env::var("SETNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs independent jobs on up to `threads` workers; results keep job order.
pub fn run_jobs<T, F>(jobs: Vec<F>, threads: usize) -> Result<Vec<T>>
where
    T: Send,
    F: FnOnce() -> Result<T> + Send,
{
    let n = jobs.len();
    let slots: Vec<Mutex<Option<F>>> = jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let results: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= n {
            break;
        }
        let job = slots[i].lock().unwrap().take().expect("each job runs once");
        *results[i].lock().unwrap() = Some(job());
    };
    std::thread::scope(|s| {
        for _ in 1..threads.clamp(1, n.max(1)) {
            s.spawn(worker);
        }
        worker();
    });
    results
        .into_iter()
        .map(|r| r.into_inner().unwrap().expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub protocol: &'static str,
    pub severity: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessTable {
    pub rows: Vec<CurvePoint>,
}

impl RobustnessTable {
    pub fn accuracy(&self, protocol: &str, severity: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.protocol == protocol && r.severity == severity)
            .map(|r| r.accuracy)
    }

    /// Columns: `protocol severity accuracy`.
    pub fn render(&self) -> String {
        let mut s = format!("{CURVE_HEADER} experiment=robustness\n# protocol severity accuracy\n");
        for r in &self.rows {
            let _ = writeln!(s, "{} {} {}", r.protocol, fmt_f64(r.severity), fmt_f64(r.accuracy));
        }
        s
    }
}

/// Every protocol of the robustness grid, in output order.
pub fn robustness_grid() -> Vec<Corruption> {
    let mut grid = Vec::new();
    grid.extend(DELETION_RATIOS.iter().map(|&p| Corruption::DeleteFurthest(p)));
    grid.extend(DELETION_RATIOS.iter().map(|&p| Corruption::DeleteRandom(p)));
    grid.extend(OUTLIER_RATIOS.iter().map(|&q| Corruption::Outliers(q)));
    grid.extend(PERTURB_SIGMAS.iter().map(|&s| Corruption::Perturb(s)));
    grid
}

/// Test accuracy of a trained classifier under each corruption of the
/// grid. Every protocol uses the same corruption stream for a given seed.
pub fn robustness_sweep(state: &ModelState, data: &Dataset, seed: u64) -> Result<RobustnessTable> {
    let grid = robustness_grid();
    let jobs: Vec<_> = grid
        .iter()
        .map(|&p| {
            move || -> Result<CurvePoint> {
                let corrupted = corrupt_dataset(data, p, seed)?;
                Ok(CurvePoint {
                    protocol: p.name(),
                    severity: p.amount(),
                    accuracy: evaluate_classification(state, &corrupted)?.overall,
                })
            }
        })
        .collect();
    Ok(RobustnessTable { rows: run_jobs(jobs, sweep_threads())? })
}

/// The five alignment variants compared in the ablation, as
/// `(name, input transform, feature transform, regularized)`.
pub const ABLATION_VARIANTS: [(&str, bool, bool, bool); 5] = [
    ("none", false, false, false),
    ("input (3x3)", true, false, false),
    ("feature (64x64)", false, true, false),
    ("feature (64x64) + reg.", false, true, true),
    ("both", true, true, true),
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub parameters: usize,
    pub accuracy: f64,
    pub avg_class_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Tab-separated columns: `variant parameters accuracy avg_class_accuracy`.
    pub fn render(&self) -> String {
        let mut s = format!("{CURVE_HEADER} experiment=ablation\n# variant\tparameters\taccuracy\tavg_class_accuracy\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                r.name,
                r.parameters,
                fmt_f64(r.accuracy),
                fmt_f64(r.avg_class_accuracy)
            );
        }
        s
    }
}

fn require_classify(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.task != Task::Classify {
        return Err(Error::Config(format!("this experiment needs task = classify, got {}", cfg.task)));
    }
    Ok(())
}

/// Trains the five alignment variants of `base` on the same data with the
/// same seed and reports their test accuracies.
pub fn ablation_run(base: &ExperimentConfig) -> Result<AblationReport> {
    require_classify(base)?;
    let (train, test) = load_datasets(base)?;
    let jobs: Vec<_> = ABLATION_VARIANTS
        .iter()
        .map(|&(name, input, feature, reg)| {
            let mut cfg = base.clone();
            cfg.model = cfg.model.with_transforms(input, feature);
            if !reg {
                cfg.model.reg_weight = 0.0;
            }
            let (train, test) = (&train, &test);
            move || -> Result<AblationRow> {
                let out = train_model(&cfg, train, None, &mut |_| {})?;
                let acc = evaluate_classification(&out.state, test)?;
                Ok(AblationRow {
                    name,
                    parameters: count_parameters(&cfg.model)?,
                    accuracy: acc.overall,
                    avg_class_accuracy: acc.avg_class,
                })
            }
        })
        .collect();
    Ok(AblationReport { rows: run_jobs(jobs, sweep_threads())? })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckCell {
    pub k: usize,
    pub n: usize,
    pub accuracy: f64,
    /// Largest critical-set size over the checked test clouds (max
    /// aggregation only).
    pub max_critical: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckGrid {
    pub ks: Vec<usize>,
    pub ns: Vec<usize>,
    /// Row-major over `ns` (outer) and `ks` (inner).
    pub cells: Vec<BottleneckCell>,
}

impl BottleneckGrid {
    pub fn cell(&self, k: usize, n: usize) -> Option<&BottleneckCell> {
        self.cells.iter().find(|c| c.k == k && c.n == n)
    }

    /// Columns: `k n accuracy max_critical` (`-` when not checked).
    pub fn render(&self) -> String {
        let mut s = format!("{CURVE_HEADER} experiment=bottleneck\n# k n accuracy max_critical\n");
        for c in &self.cells {
            let crit = c.max_critical.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(s, "{} {} {} {crit}", c.k, c.n, fmt_f64(c.accuracy));
        }
        s
    }
}

/// Clouds reduced to `n` points by furthest-point sampling.
fn resample(data: &Dataset, n: usize) -> Result<Dataset> {
    let clouds = data
        .clouds
        .iter()
        .map(|c| Ok(c.select(&furthest_point_sample(c, n, 0)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(data.with_clouds(clouds))
}

/// Trains one model per `(K, n)` cell. Synthetic data is regenerated with
/// `n` points per cloud; other sources are furthest-point subsampled. Run
/// `i` (row-major) uses seed `base.seed + i`.
pub fn bottleneck_sweep(base: &ExperimentConfig, ks: &[usize], ns: &[usize]) -> Result<BottleneckGrid> {
    require_classify(base)?;
    if ks.is_empty() || ns.is_empty() {
        return Err(Error::Config("bottleneck sweep needs at least one K and one n".into()));
    }
    let mut data = Vec::with_capacity(ns.len());
    for &n in ns {
        let sets = match base.data.source {
            DataSource::Synth => {
                let mut cfg = base.clone();
                cfg.data.points = n;
                load_datasets(&cfg)?
            }
            _ => {
                let (train, test) = load_datasets(base)?;
                (resample(&train, n)?, resample(&test, n)?)
            }
        };
        data.push(sets);
    }
    let mut jobs = Vec::new();
    for (ni, &n) in ns.iter().enumerate() {
        for &k in ks {
            let run = jobs.len() as u64;
            let mut cfg = base.clone();
            cfg.model.bottleneck = k;
            cfg.seed = base.seed.wrapping_add(run);
            let (train, test) = (&data[ni].0, &data[ni].1);
            jobs.push(move || -> Result<BottleneckCell> {
                let out = train_model(&cfg, train, None, &mut |_| {})?;
                let accuracy = evaluate_classification(&out.state, test)?.overall;
                let max_critical = if cfg.model.aggregator == AggregatorKind::Max {
                    let mut worst = 0;
                    for c in test.clouds.iter().take(10) {
                        let r = critical_set(&out.state, c)?;
                        if r.critical_indices.len() > k {
                            return Err(Error::TheoremViolation(format!(
                                "{} critical points with K = {k}",
                                r.critical_indices.len()
                            )));
                        }
                        worst = worst.max(r.critical_indices.len());
                    }
                    Some(worst)
                } else {
                    None
                };
                Ok(BottleneckCell { k, n, accuracy, max_critical })
            });
        }
    }
    Ok(BottleneckGrid {
        ks: ks.to_vec(),
        ns: ns.to_vec(),
        cells: run_jobs(jobs, sweep_threads())?,
    })
}
