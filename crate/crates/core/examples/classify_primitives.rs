//! Trains a small classifier on the synthetic primitives and reports test
//! accuracy, then round-trips the checkpoint.
//!
//! `cargo run --release --example classify_primitives [epochs]`

use setnet::harness::{self, ExperimentConfig};
use setnet::pointnet::ModelState;

fn main() -> setnet::Result<()> {
    let epochs = std::env::args().nth(1).unwrap_or_else(|| "5".into());
    let mut cfg = ExperimentConfig::from_text(include_str!("../../../configs/synth_classify.cfg"))?;
    cfg.apply_all(&[
        ("train.epochs".into(), epochs),
        ("data.per_class".into(), "60".into()),
    ])?;

    let run = harness::train(&cfg, None, &mut |e| {
        eprintln!("epoch {:>2}  loss {:.4}  test acc {:?}", e.epoch, e.mean_loss, e.test_accuracy);
    })?;
    let acc = run.metrics.classification.as_ref().expect("classification metrics");
    println!("parameters       {}", run.metrics.parameters);
    println!("overall accuracy {:.3}", acc.overall);
    for (name, a) in run.metrics.class_names.iter().zip(&acc.per_class) {
        println!("  {name:<9} {}", a.map_or("-".into(), |a| format!("{a:.3}")));
    }

    let bytes = run.outcome.state.to_bytes();
    let restored = ModelState::from_bytes(&bytes)?;
    assert_eq!(restored.params, run.outcome.state.params);
    println!("checkpoint       {} bytes, round-trip ok", bytes.len());
    Ok(())
}
