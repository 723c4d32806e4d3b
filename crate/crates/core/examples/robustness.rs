//! Accuracy of a trained classifier as points are deleted, outliers added
//! or coordinates jittered.
//!
//! `cargo run --release --example robustness`

use setnet::harness::{self, robustness_sweep, ExperimentConfig};

fn main() -> setnet::Result<()> {
    let mut cfg = ExperimentConfig::from_text(include_str!("../../../configs/synth_classify.cfg"))?;
    cfg.apply_all(&[
        ("train.epochs".into(), "5".into()),
        ("data.per_class".into(), "60".into()),
    ])?;
    let (_, test) = harness::load_datasets(&cfg)?;
    let state = harness::train(&cfg, None, &mut |_| {})?.outcome.state;

    let table = robustness_sweep(&state, &test, cfg.seed)?;
    println!("{:<16} {:>8} {:>9}", "protocol", "severity", "accuracy");
    for r in &table.rows {
        println!("{:<16} {:>8} {:>9.3}", r.protocol, r.severity, r.accuracy);
    }
    Ok(())
}
