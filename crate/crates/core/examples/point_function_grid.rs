//! Samples single point-function dimensions over the cube `[-1,1]^3` and
//! prints the share of space that activates each one, plus a text slice.
//!
//! `cargo run --release --example point_function_grid`

use setnet::analysis::point_function_grid;
use setnet::pointnet::{ModelSpec, ModelState};

fn main() -> setnet::Result<()> {
    let mut spec = ModelSpec::classifier(4).with_transforms(false, false);
    spec.bottleneck = 16;
    let state = ModelState::init(&spec, 11)?;
    let r = 12;

    let mut shown = 0;
    for j in 0..spec.bottleneck {
        let grid = point_function_grid(&state, j, r)?;
        let max = grid.values.iter().cloned().fold(f64::MIN, f64::max);
        if max <= 0.0 || shown == 3 {
            continue;
        }
        shown += 1;
        let threshold = 0.5 * max;
        println!("dimension {j}: {:.1}% of the cube above half its maximum", 100.0 * grid.fraction_above(threshold));

        // middle z-slice, x down and y across
        let mask = grid.mask(threshold);
        let z = r / 2;
        for x in 0..r {
            let row: String = (0..r).map(|y| if mask[x * r * r + y * r + z] { '#' } else { '.' }).collect();
            println!("    {row}");
        }
    }
    Ok(())
}
