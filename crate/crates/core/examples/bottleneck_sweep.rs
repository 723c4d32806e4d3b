//! Accuracy and largest critical-set size as the bottleneck width K and
//! the number of input points vary.
//!
//! `cargo run --release --example bottleneck_sweep`

use setnet::harness::{bottleneck_sweep, ExperimentConfig};

fn main() -> setnet::Result<()> {
    let cfg = ExperimentConfig::from_text(include_str!("../../../configs/bottleneck.cfg"))?;
    let grid = bottleneck_sweep(&cfg, &[8, 32], &[64, 128])?;
    println!("{:>4} {:>5} {:>9} {:>13}", "K", "n", "accuracy", "max |C_S|");
    for c in &grid.cells {
        let crit = c.max_critical.map_or("-".into(), |v| v.to_string());
        println!("{:>4} {:>5} {:>9.3} {:>13}", c.k, c.n, c.accuracy, crit);
    }
    Ok(())
}
