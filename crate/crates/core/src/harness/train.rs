use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DataSource, ExperimentConfig, Task};
use super::metrics::{evaluate_classification, evaluate_normals, evaluate_segmentation, ClassAccuracy, SegmentationMetrics};
use crate::data::{augment_with, corrupt, load_mnist, synth_generate, train_test_split, Corruption, Dataset, PointCloud, SynthSpec};
use crate::error::{Error, Result};
use crate::pointnet::{count_parameters, fmt_f64, Batch, ModelState, Targets};
use crate::tensor::{AdamState, Mode, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.pnet";
pub const METRICS_FILE: &str = "metrics.txt";
pub const LOG_FILE: &str = "train.log";
pub const CONFIG_FILE: &str = "config.txt";

/// Losses of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub task: f64,
    /// Unweighted `‖I − AAᵀ‖²` (batch mean), when a feature transform exists.
    pub reg: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_task: f64,
    pub mean_reg: Option<f64>,
    pub lr: f64,
    pub bn_momentum: f64,
    /// Test accuracy, when per-epoch evaluation is enabled.
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

/// Loads (or generates) the train and test sets a config describes.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synth => {
            let data = synth_generate(&SynthSpec {
                classes: d.classes.clone(),
                points_per_cloud: d.points,
                clouds_per_class: d.per_class,
                noise: d.noise,
                seed: d.seed,
            })?;
            Ok(train_test_split(&data, d.test_fraction))
        }
        DataSource::Mnist => load_mnist(&d.mnist_dir, d.train_limit, d.test_limit, d.seed),
    }
}

/// Batches of indices; a trailing single-cloud batch is merged into the
/// previous one so batch statistics always see at least two sets.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() >= 2 && out.last().map_or(false, |b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn targets_for(task: Task, clouds: &[&PointCloud]) -> Result<TargetBuf> {
    match task {
        Task::Classify => clouds
            .iter()
            .map(|c| c.class_label.ok_or_else(|| Error::Label(format!("cloud `{}` has no class", c.id))))
            .collect::<Result<_>>()
            .map(TargetBuf::Labels),
        Task::Segment => {
            let mut out = Vec::new();
            for c in clouds {
                out.extend(
                    c.point_labels
                        .as_ref()
                        .ok_or_else(|| Error::Label(format!("cloud `{}` has no part labels", c.id)))?,
                );
            }
            Ok(TargetBuf::Labels(out))
        }
        Task::Normals => {
            let mut out = Vec::new();
            for c in clouds {
                out.extend(
                    c.normals
                        .as_ref()
                        .ok_or_else(|| Error::Label(format!("cloud `{}` has no normals", c.id)))?,
                );
            }
            let rows = out.len() / 3;
            Ok(TargetBuf::Normals(Tensor::new(&[rows, 3], out)?))
        }
    }
}

enum TargetBuf {
    Labels(Vec<usize>),
    Normals(Tensor),
}

impl TargetBuf {
    fn as_targets(&self, task: Task) -> Targets<'_> {
        match (self, task) {
            (TargetBuf::Labels(l), Task::Classify) => Targets::Classes(l),
            (TargetBuf::Labels(l), _) => Targets::Parts(l),
            (TargetBuf::Normals(t), _) => Targets::Normals(t),
        }
    }
}

fn grad_diagnostics(state: &ModelState, grads: &[f64]) -> String {
    let total = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    let mut worst = (String::new(), f64::NEG_INFINITY);
    for e in state.net().layout.entries() {
        let n = grads[e.range()].iter().map(|g| g * g).sum::<f64>().sqrt();
        if !(n <= worst.1) {
            worst = (e.name.clone(), n);
        }
    }
    format!("grad norm {total}, largest in `{}` ({})", worst.0, worst.1)
}

/// Trains a fresh model on `train`. With `stop_at_accuracy > 0` and a test
/// set, the model is evaluated after every epoch and training stops at the
/// first epoch reaching that accuracy. `on_epoch` sees every summary.
pub fn train_model(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    on_epoch: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    if train.len() < 2 {
        return Err(Error::Config("training needs at least two clouds".into()));
    }
    let tc = &cfg.train;
    let mut state = ModelState::init(&cfg.model, cfg.seed)?;
    let mut adam = AdamState::new(state.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch);
        let momentum = tc.bn_momentum_at(epoch);
        order.shuffle(&mut rng);
        let first_step = steps.len();
        for (b, idx) in batches(&order, tc.batch_size).into_iter().enumerate() {
            let clouds: Vec<PointCloud> = idx
                .iter()
                .map(|&i| {
                    let c = &train.clouds[i];
                    if tc.augment {
                        let angle = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                        augment_with(c, angle, tc.jitter, &mut rng)
                    } else {
                        c.clone()
                    }
                })
                .collect();
            let refs: Vec<&PointCloud> = clouds.iter().collect();
            let batch = Batch::from_clouds(&refs)?;
            let targets = targets_for(cfg.task, &refs)?;
            let dropout_seed = rng.gen();
            let mut f = state.context(Mode::Train, true, dropout_seed)?;
            f.bn_momentum = momentum;
            let x = f.graph.constant(batch.points.clone());
            let out = state.net().forward(&mut f, x, &batch.segs, batch.categories.as_deref())?;
            let parts = state.net().loss(&mut f, &out, targets.as_targets(cfg.task))?;
            let loss = f.graph.value(parts.total).item();
            let task = f.graph.value(parts.task).item();
            let reg = parts.reg.map(|r| f.graph.value(r).item());
            f.graph.backward(parts.total)?;
            let grads = f.flat_grad(&state.net().layout);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {b}: loss {loss}, task {task}, reg {reg:?}; {}",
                    grad_diagnostics(&state, &grads)
                )));
            }
            adam.step(&mut state.params, &grads, lr)?;
            state.bn = std::mem::take(&mut f.bn);
            steps.push(StepRecord { epoch, batch: b, loss, task, reg, lr });
        }
        let recent = &steps[first_step..];
        let mean = |g: &dyn Fn(&StepRecord) -> f64| recent.iter().map(g).sum::<f64>() / recent.len() as f64;
        let mut summary = EpochSummary {
            epoch,
            mean_loss: mean(&|s| s.loss),
            mean_task: mean(&|s| s.task),
            mean_reg: recent[0].reg.map(|_| mean(&|s| s.reg.unwrap_or(0.0))),
            lr,
            bn_momentum: momentum,
            test_accuracy: None,
        };
        let mut stop = false;
        if tc.stop_at_accuracy > 0.0 && cfg.task == Task::Classify {
            if let Some(t) = test {
                let acc = evaluate_classification(&state, t)?.overall;
                summary.test_accuracy = Some(acc);
                stop = acc >= tc.stop_at_accuracy;
            }
        }
        on_epoch(&summary);
        epochs.push(summary);
        if stop {
            break;
        }
    }
    Ok(TrainOutcome { state, steps, epochs })
}

/// Applies one corruption to every cloud with a fixed stream.
pub fn corrupt_dataset(data: &Dataset, protocol: Corruption, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let clouds = data
        .clouds
        .iter()
        .map(|c| corrupt(c, protocol, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(data.with_clouds(clouds))
}

/// Test-set metrics plus the training curves of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub task: Task,
    pub parameters: usize,
    pub epochs: Vec<EpochSummary>,
    pub class_names: Vec<String>,
    pub classification: Option<ClassAccuracy>,
    pub segmentation: Option<SegmentationMetrics>,
    pub normal_loss: Option<f64>,
}

impl MetricsReport {
    /// Deterministic `key = value` rendering (no timings).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task = {}", self.task);
        let _ = writeln!(s, "parameters = {}", self.parameters);
        let _ = writeln!(s, "epochs_run = {}", self.epochs.len());
        for e in &self.epochs {
            let _ = writeln!(s, "train.loss.epoch{} = {}", e.epoch, fmt_f64(e.mean_loss));
            let _ = writeln!(s, "train.task_loss.epoch{} = {}", e.epoch, fmt_f64(e.mean_task));
            if let Some(r) = e.mean_reg {
                let _ = writeln!(s, "train.reg_loss.epoch{} = {}", e.epoch, fmt_f64(r));
            }
            if let Some(a) = e.test_accuracy {
                let _ = writeln!(s, "test.accuracy.epoch{} = {}", e.epoch, fmt_f64(a));
            }
        }
        if let Some(c) = &self.classification {
            let _ = writeln!(s, "test.overall_accuracy = {}", fmt_f64(c.overall));
            let _ = writeln!(s, "test.avg_class_accuracy = {}", fmt_f64(c.avg_class));
            for (name, v) in self.class_names.iter().zip(&c.per_class) {
                if let Some(v) = v {
                    let _ = writeln!(s, "test.class_accuracy.{name} = {}", fmt_f64(*v));
                }
            }
        }
        if let Some(m) = &self.segmentation {
            let _ = writeln!(s, "test.miou_over_shapes = {}", fmt_f64(m.mean_over_shapes));
            let _ = writeln!(s, "test.miou_over_categories = {}", fmt_f64(m.mean_over_categories));
            for (name, v) in self.class_names.iter().zip(&m.per_category) {
                if let Some(v) = v {
                    let _ = writeln!(s, "test.miou.{name} = {}", fmt_f64(*v));
                }
            }
        }
        if let Some(l) = self.normal_loss {
            let _ = writeln!(s, "test.normal_loss = {}", fmt_f64(l));
        }
        s
    }
}

pub fn evaluate(cfg: &ExperimentConfig, state: &ModelState, test: &Dataset, epochs: Vec<EpochSummary>) -> Result<MetricsReport> {
    let mut report = MetricsReport {
        task: cfg.task,
        parameters: count_parameters(state.spec())?,
        epochs,
        class_names: test.class_names.clone(),
        classification: None,
        segmentation: None,
        normal_loss: None,
    };
    match cfg.task {
        Task::Classify => report.classification = Some(evaluate_classification(state, test)?),
        Task::Segment => report.segmentation = Some(evaluate_segmentation(state, test)?),
        Task::Normals => report.normal_loss = Some(evaluate_normals(state, test)?),
    }
    Ok(report)
}

/// Everything a `train` invocation produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub metrics: MetricsReport,
}

fn render_log(cfg: &ExperimentConfig, outcome: &TrainOutcome) -> String {
    let mut s = String::new();
    s.push_str(&cfg.to_text());
    for r in &outcome.steps {
        let _ = write!(
            s,
            "epoch {} batch {} lr {} loss {} task {}",
            r.epoch,
            r.batch,
            fmt_f64(r.lr),
            fmt_f64(r.loss),
            fmt_f64(r.task)
        );
        if let Some(reg) = r.reg {
            let _ = write!(s, " reg {}", fmt_f64(reg));
        }
        s.push('\n');
    }
    s
}

/// Full run: data, training, test evaluation (after the configured
/// corruption) and, if `out` is given, the checkpoint, metrics, log and
/// effective config written there. Identical configs give identical files.
pub fn train(cfg: &ExperimentConfig, out: Option<&Path>, on_epoch: &mut dyn FnMut(&EpochSummary)) -> Result<RunResult> {
    let (train_set, test_set) = load_datasets(cfg)?;
    let outcome = train_model(cfg, &train_set, Some(&test_set), on_epoch)?;
    let test_eval = corrupt_dataset(&test_set, cfg.eval_corruption, cfg.seed)?;
    let metrics = evaluate(cfg, &outcome.state, &test_eval, outcome.epochs.clone())?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
        outcome.state.save(dir.join(CHECKPOINT_FILE))?;
        std::fs::write(dir.join(METRICS_FILE), metrics.to_text())?;
        std::fs::write(dir.join(LOG_FILE), render_log(cfg, &outcome))?;
    }
    Ok(RunResult { outcome, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: &str) -> ExperimentConfig {
        let head = if task == "classify" { "model.fc_widths = 16,16" } else { "model.head_widths = 32,16" };
        ExperimentConfig::from_text(&format!(
            "task = {task}\ndata.per_class = 3\ndata.points = 32\ntrain.epochs = 2\ntrain.batch_size = 4\n\
             model.k = 32\nmodel.tnet_mlp = 16,16,32\nmodel.tnet_fc = 16,16\n{head}\n"
        ))
        .unwrap()
    }

    #[test]
    fn batches_merge_a_trailing_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&order[..8], 4).len(), 2);
    }

    #[test]
    fn losses_are_finite_and_regularizer_nonnegative() {
        for task in ["classify", "segment", "normals"] {
            let cfg = tiny(task);
            let (train_set, _) = load_datasets(&cfg).unwrap();
            let out = train_model(&cfg, &train_set, None, &mut |_| {}).unwrap();
            assert!(!out.steps.is_empty());
            for s in &out.steps {
                assert!(s.loss.is_finite(), "{task}: {s:?}");
                assert!(s.reg.unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let cfg = tiny("classify");
        let (train_set, _) = load_datasets(&cfg).unwrap();
        let a = train_model(&cfg, &train_set, None, &mut |_| {}).unwrap();
        let b = train_model(&cfg, &train_set, None, &mut |_| {}).unwrap();
        assert_eq!(a.state.to_bytes(), b.state.to_bytes());
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let mut cfg = tiny("classify");
        cfg.train.lr = 1e300;
        let (train_set, _) = load_datasets(&cfg).unwrap();
        // the first step is finite; the absurd step size overflows the next
        match train_model(&cfg, &train_set, None, &mut |_| {}) {
            Err(Error::Numeric(msg)) => {
                assert!(msg.contains("epoch 0") && msg.contains("grad norm"), "{msg}");
            }
            other => panic!("expected a numeric error, got {:?}", other.map(|o| o.steps.len())),
        }
    }
}
