//! The `setnet` command line.
//!
//! ```text
//! setnet train    --config F [--seed S] [--set key=value]... [--out DIR]
//! setnet eval     --checkpoint C --data D --out DIR
//! setnet analyze  critical|upperbound|grid|retrieve|correspond --checkpoint C ... --out DIR
//! setnet sweep    ablation|robustness|bottleneck --config F [--out DIR]
//! setnet data     synth|mnist [--config F] --out DIR
//! ```
//!
//! Exit status is 0 on success, 1 for usage errors and 2 when the command
//! itself fails. Every file a command writes goes under its output
//! directory; progress goes to stderr and the resolved configuration is
//! echoed to stdout before work starts.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{
    correspondence, critical_set, point_function_grid, retrieve, upper_bound_shape, verify_theorem2,
};
use crate::data::{
    read_cloud_file, render_cloud, write_cloud_file, Dataset, PointCloud, Primitive,
};
use crate::error::{Error, Result};
use crate::harness::{
    ablation_run, bottleneck_sweep, evaluate, load_datasets, robustness_sweep, train, DataSource, EpochSummary,
    ExperimentConfig, Task, METRICS_FILE,
};
use crate::pointnet::{HeadSpec, ModelState};

/// Name of the dataset index written by `data` and read by `eval`.
pub const INDEX_FILE: &str = "index.txt";
pub const INDEX_HEADER: &str = "# setnet-index v1";

#[derive(Parser, Debug)]
#[command(name = "setnet", about = "Point-set networks: training, evaluation and critical-point analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory written by `data`.
    Eval(EvalArgs),
    /// Critical points, upper-bound shapes and other probes of a checkpoint.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Experiment protocols that train several models.
    #[command(subcommand)]
    Sweep(SweepCommand),
    /// Write datasets as cloud files.
    #[command(subcommand)]
    Data(DataCommand),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shorthand for `--set seed=S`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory with an index file, as written by `setnet data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCommand {
    /// Critical point set of one cloud, optionally with an upper-bound sample
    /// and a check that the global feature is determined by it.
    Critical {
        #[command(flatten)]
        probe: ProbeArgs,
        #[arg(long)]
        cloud: PathBuf,
        /// Also sample the upper-bound shape on this grid resolution.
        #[arg(long)]
        resolution: Option<usize>,
        /// Random intermediate sets to check (needs --resolution).
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Grid points whose features never exceed the cloud's global feature.
    Upperbound {
        #[command(flatten)]
        probe: ProbeArgs,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
    },
    /// One point-function dimension over the [-1,1]^3 cube.
    Grid {
        #[command(flatten)]
        probe: ProbeArgs,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
    },
    /// Nearest gallery clouds in the pre-score feature space.
    Retrieve {
        #[command(flatten)]
        probe: ProbeArgs,
        #[arg(long)]
        cloud: PathBuf,
        /// Directory of cloud files.
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Point pairs that maximize the same global feature dimension.
    Correspond {
        #[command(flatten)]
        probe: ProbeArgs,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        other: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum SweepCommand {
    Ablation(TrainArgs),
    /// Accuracy under corruption; trains first unless --checkpoint is given.
    Robustness {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    Bottleneck(TrainArgs),
}

#[derive(Subcommand, Debug)]
enum DataCommand {
    Synth(ConfigArgs),
    Mnist(ConfigArgs),
}

/// Parses `argv` (without the program name) and runs the command.
pub fn run(argv: &[String]) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// [`run`] with explicit output streams.
pub fn run_with(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(std::iter::once("setnet".to_string()).chain(argv.iter().cloned())) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "usage error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Loads the config, applies `--seed`, `--set` and `--out`. Bad keys and
/// values are usage errors.
fn resolve_config(args: &ConfigArgs) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("--config {}: {e}", p.display())))?;
            ExperimentConfig::from_text(&text).map_err(|e| Failure::Usage(format!("--config {}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    let mut pairs = Vec::new();
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = args.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    if let Some(o) = &args.out {
        pairs.push(("out".into(), o.display().to_string()));
    }
    cfg.apply_all(&pairs).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn echo(out: &mut dyn Write, cfg: &ExperimentConfig) -> std::io::Result<()> {
    writeln!(out, "# effective config")?;
    write!(out, "{}", cfg.to_text())?;
    out.flush()
}

fn progress(err: &mut dyn Write) -> impl FnMut(&EpochSummary) + '_ {
    let start = std::time::Instant::now();
    move |e: &EpochSummary| {
        let acc = e.test_accuracy.map_or(String::new(), |a| format!(" test_acc {a:.4}"));
        let _ = writeln!(
            err,
            "epoch {:>3} loss {:.5} lr {:.2e}{acc} [{:.1}s]",
            e.epoch,
            e.mean_loss,
            e.lr,
            start.elapsed().as_secs_f64()
        );
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Train(a) => {
            let cfg = resolve_config(&a.cfg)?;
            echo(out, &cfg)?;
            let res = train(&cfg, Some(&cfg.out), &mut progress(err))?;
            write!(out, "{}", res.metrics.to_text())?;
            Ok(())
        }
        Command::Eval(a) => eval(&a, out),
        Command::Analyze(a) => analyze(a, out),
        Command::Sweep(s) => sweep(s, out, err),
        Command::Data(d) => data(d, out),
    }
}

fn load_checkpoint(path: &Path) -> std::result::Result<ModelState, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("--checkpoint {} does not exist", path.display())));
    }
    Ok(ModelState::load(path)?)
}

fn read_cloud(path: &Path, flag: &str) -> std::result::Result<PointCloud, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("--{flag} {} does not exist", path.display())));
    }
    Ok(read_cloud_file(path)?)
}

fn analyze(cmd: AnalyzeCommand, out: &mut dyn Write) -> CliResult {
    match cmd {
        AnalyzeCommand::Critical { probe, cloud, resolution, trials, seed } => {
            let state = load_checkpoint(&probe.checkpoint)?;
            let c = read_cloud(&cloud, "cloud")?;
            let mut report = critical_set(&state, &c)?;
            if let Some(r) = resolution {
                report.upper_bound_points = upper_bound_shape(&state, &c, r)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ok = verify_theorem2(&state, &c, r, trials, &mut rng).is_ok();
                report.checks.push(("global_feature_determined_by_critical_set".into(), ok));
            }
            std::fs::create_dir_all(&probe.out)?;
            std::fs::write(probe.out.join("critical.txt"), report.render())?;
            writeln!(
                out,
                "critical points: {} of {} (K = {})",
                report.critical_indices.len(),
                report.n,
                report.k
            )?;
        }
        AnalyzeCommand::Upperbound { probe, cloud, resolution } => {
            let state = load_checkpoint(&probe.checkpoint)?;
            let c = read_cloud(&cloud, "cloud")?;
            let pts = upper_bound_shape(&state, &c, resolution)?;
            let shape = PointCloud::from_rows(format!("{}-upper", c.id), &pts)?;
            std::fs::create_dir_all(&probe.out)?;
            write_cloud_file(&shape, probe.out.join("upperbound.txt"))?;
            writeln!(out, "upper-bound sample: {} of {} grid points", pts.len(), resolution.pow(3))?;
        }
        AnalyzeCommand::Grid { probe, dim, resolution } => {
            let state = load_checkpoint(&probe.checkpoint)?;
            let g = point_function_grid(&state, dim, resolution)?;
            std::fs::create_dir_all(&probe.out)?;
            std::fs::write(probe.out.join(format!("grid_{dim}.txt")), g.render())?;
            writeln!(out, "dimension {dim}: {:.4} of the cube above 0.5", g.fraction_above(0.5))?;
        }
        AnalyzeCommand::Retrieve { probe, cloud, gallery, k } => {
            let state = load_checkpoint(&probe.checkpoint)?;
            let q = read_cloud(&cloud, "cloud")?;
            let g = read_cloud_dir(&gallery)?;
            let hits = retrieve(&state, &q, &g, k.min(g.len()))?;
            let mut s = String::from("# rank id distance\n");
            for (i, (id, d)) in hits.iter().enumerate() {
                let _ = writeln!(s, "{} {id} {d}", i + 1);
            }
            std::fs::create_dir_all(&probe.out)?;
            std::fs::write(probe.out.join("retrieval.txt"), &s)?;
            write!(out, "{s}")?;
        }
        AnalyzeCommand::Correspond { probe, cloud, other } => {
            let state = load_checkpoint(&probe.checkpoint)?;
            let a = read_cloud(&cloud, "cloud")?;
            let b = read_cloud(&other, "other")?;
            let pairs = correspondence(&state, &a, &b)?;
            let mut s = String::from("# index_a index_b\n");
            for (i, j) in &pairs {
                let _ = writeln!(s, "{i} {j}");
            }
            std::fs::create_dir_all(&probe.out)?;
            std::fs::write(probe.out.join("correspondence.txt"), s)?;
            writeln!(out, "{} matched pairs", pairs.len())?;
        }
    }
    Ok(())
}

fn read_cloud_dir(dir: &Path) -> std::result::Result<Vec<PointCloud>, Failure> {
    if !dir.is_dir() {
        return Err(Failure::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt") && p.file_name().is_none_or(|n| n != INDEX_FILE))
        .collect();
    paths.sort();
    Ok(paths.iter().map(read_cloud_file).collect::<Result<Vec<_>>>()?)
}

fn sweep(cmd: SweepCommand, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let (cfg, file, text) = match cmd {
        SweepCommand::Ablation(a) => {
            let cfg = resolve_config(&a.cfg)?;
            echo(out, &cfg)?;
            let report = ablation_run(&cfg)?;
            (cfg, "ablation.txt", report.render())
        }
        SweepCommand::Robustness { cfg, checkpoint } => {
            let cfg = resolve_config(&cfg)?;
            echo(out, &cfg)?;
            let (_, test) = load_datasets(&cfg)?;
            let state = match checkpoint {
                Some(p) => load_checkpoint(&p)?,
                None => train(&cfg, None, &mut progress(err))?.outcome.state,
            };
            let table = robustness_sweep(&state, &test, cfg.seed)?;
            (cfg, "robustness.txt", table.render())
        }
        SweepCommand::Bottleneck(a) => {
            let cfg = resolve_config(&a.cfg)?;
            echo(out, &cfg)?;
            let grid = bottleneck_sweep(&cfg, &cfg.sweep.ks, &cfg.sweep.ns)?;
            (cfg, "bottleneck.txt", grid.render())
        }
    };
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    std::fs::write(cfg.out.join(file), &text)?;
    write!(out, "{text}")?;
    Ok(())
}

/// Writes every cloud as `<split>/<id>.txt` plus an index of paths, classes
/// and splits.
fn write_dataset(dir: &Path, train: &Dataset, test: &Dataset) -> Result<usize> {
    let mut index = format!("{INDEX_HEADER} classes={}", train.class_names.join(","));
    if !train.part_sets.is_empty() {
        let sets: Vec<String> = train
            .part_sets
            .iter()
            .map(|s| s.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(":"))
            .collect();
        let _ = write!(index, " parts={} part_sets={}", train.num_parts, sets.join(","));
    }
    index.push('\n');
    let mut count = 0;
    for (split, set) in [("train", train), ("test", test)] {
        std::fs::create_dir_all(dir.join(split))?;
        for c in &set.clouds {
            let rel = format!("{split}/{}.txt", c.id);
            std::fs::write(dir.join(&rel), render_cloud(c))?;
            let _ = writeln!(index, "{rel} {} {split}", c.class_label.unwrap_or(0));
            count += 1;
        }
    }
    std::fs::write(dir.join(INDEX_FILE), index)?;
    Ok(count)
}

/// Reads the test split (or everything, if no test entries) of an index.
fn read_dataset(dir: &Path) -> std::result::Result<Dataset, Failure> {
    let path = dir.join(INDEX_FILE);
    if !path.exists() {
        return Err(Failure::Usage(format!("--data {}: no {INDEX_FILE}", dir.display())));
    }
    let text = std::fs::read_to_string(&path)?;
    let mut lines = text.lines().enumerate();
    let head = lines.next().map(|l| l.1).unwrap_or("");
    let fields = head
        .strip_prefix(INDEX_HEADER)
        .ok_or(Error::Parse { line: 1, msg: "missing index header".into() })?;
    let mut data = Dataset::classification(Vec::new(), Vec::new());
    for f in fields.split_whitespace() {
        match f.split_once('=') {
            Some(("classes", v)) => data.class_names = v.split(',').map(str::to_string).collect(),
            Some(("parts", v)) => {
                data.num_parts = v.parse().map_err(|_| Error::Parse { line: 1, msg: format!("bad `{f}`") })?
            }
            Some(("part_sets", v)) => {
                data.part_sets = v
                    .split(',')
                    .map(|s| s.split(':').map(|p| p.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Parse { line: 1, msg: format!("bad `{f}`") })?
            }
            _ => return Err(Error::Parse { line: 1, msg: format!("unknown index field `{f}`") }.into()),
        }
    }
    let mut entries = Vec::new();
    for (i, line) in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        let [rel, class, split] = parts[..] else {
            return Err(Error::Parse { line: i + 1, msg: "expected `path class split`".into() }.into());
        };
        let class: usize = class
            .parse()
            .map_err(|_| Error::Parse { line: i + 1, msg: format!("bad class `{class}`") })?;
        entries.push((rel.to_string(), class, split == "test"));
    }
    let any_test = entries.iter().any(|e| e.2);
    for (rel, class, is_test) in entries {
        if any_test && !is_test {
            continue;
        }
        let mut c = read_cloud_file(dir.join(&rel))?.with_class(class);
        c.id = Path::new(&rel).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(rel);
        data.clouds.push(c);
    }
    Ok(data)
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let state = load_checkpoint(&a.checkpoint)?;
    let data = read_dataset(&a.data)?;
    let mut cfg = ExperimentConfig::default();
    cfg.task = match state.spec().head {
        HeadSpec::Classify { .. } => Task::Classify,
        HeadSpec::Segment { .. } => Task::Segment,
        HeadSpec::Normals { .. } => Task::Normals,
    };
    if cfg.task == Task::Normals {
        return Err(Failure::Usage("cloud files carry no normals; evaluate normal models from a config".into()));
    }
    let metrics = evaluate(&cfg, &state, &data, Vec::new())?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join(METRICS_FILE), metrics.to_text())?;
    write!(out, "{}", metrics.to_text())?;
    Ok(())
}

fn data(cmd: DataCommand, out: &mut dyn Write) -> CliResult {
    let (args, source) = match cmd {
        DataCommand::Synth(a) => (a, DataSource::Synth),
        DataCommand::Mnist(a) => (a, DataSource::Mnist),
    };
    let mut cfg = resolve_config(&args)?;
    cfg.data.source = source;
    if source == DataSource::Mnist {
        cfg.model.input_dim = 2;
    }
    echo(out, &cfg)?;
    let (train, test) = load_datasets(&cfg)?;
    let n = write_dataset(&cfg.out, &train, &test)?;
    writeln!(out, "wrote {n} clouds to {}", cfg.out.display())?;
    Ok(())
}

/// Class names of the synthetic primitives, for documentation and tests.
pub fn primitive_names() -> Vec<&'static str> {
    Primitive::ALL.iter().map(|p| p.name()).collect()
}
