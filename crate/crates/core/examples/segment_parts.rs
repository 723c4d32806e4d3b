//! Per-point part segmentation of the synthetic primitives, conditioned on
//! the shape category; reports mIoU per category.
//!
//! `cargo run --release --example segment_parts [epochs]`

use setnet::data::Primitive;
use setnet::harness::{self, ExperimentConfig};

fn main() -> setnet::Result<()> {
    let epochs = std::env::args().nth(1).unwrap_or_else(|| "5".into());
    let mut cfg = ExperimentConfig::from_text(include_str!("../../../configs/synth_segment.cfg"))?;
    cfg.apply_all(&[
        ("train.epochs".into(), epochs),
        ("data.per_class".into(), "60".into()),
    ])?;

    let run = harness::train(&cfg, None, &mut |e| {
        eprintln!("epoch {:>2}  loss {:.4}", e.epoch, e.mean_loss);
    })?;
    let seg = run.metrics.segmentation.as_ref().expect("segmentation metrics");
    for (p, m) in Primitive::ALL.iter().zip(&seg.per_category) {
        println!("{:<9} parts {:?}  mIoU {}", p.name(), p.parts(), m.map_or("-".into(), |m| format!("{m:.3}")));
    }
    println!("mean over shapes     {:.3}", seg.mean_over_shapes);
    println!("mean over categories {:.3}", seg.mean_over_categories);
    Ok(())
}
