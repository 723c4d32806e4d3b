//! Critical point set and upper-bound shape of a cloud: every point set
//! between the two has exactly the same global feature.
//!
//! `cargo run --release --example critical_points`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use setnet::analysis;
use setnet::data::{synth_generate, Primitive, SynthSpec};
use setnet::pointnet::{ModelSpec, ModelState};

fn main() -> setnet::Result<()> {
    let data = synth_generate(&SynthSpec {
        classes: vec![Primitive::Cube],
        clouds_per_class: 1,
        points_per_cloud: 512,
        ..SynthSpec::default()
    })?;
    let cloud = &data.clouds[0];

    let mut spec = ModelSpec::classifier(4);
    spec.bottleneck = 64;
    let state = ModelState::init(&spec, 3)?;

    let report = analysis::critical_set(&state, cloud)?;
    println!(
        "{} points, K = {}: {} critical points",
        report.n,
        report.k,
        report.critical_indices.len()
    );

    let upper = analysis::upper_bound_shape(&state, cloud, 16)?;
    println!("upper-bound shape at grid resolution 16: {} points", upper.len());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t2 = analysis::verify_theorem2(&state, cloud, 8, 20, &mut rng)?;
    println!(
        "global feature identical on {} sets between the critical set and the upper bound",
        t2.sets_checked
    );
    Ok(())
}
