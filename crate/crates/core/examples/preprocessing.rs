//! Data preparation: unit-sphere normalization, augmentation, furthest
//! point sampling and the corruption protocols.
//!
//! `cargo run --release --example preprocessing`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use setnet::data::{
    augment, corrupt, furthest_point_sample, normalize_unit_sphere, render_cloud, synth_generate, Corruption,
    PointCloud, Primitive, SynthSpec,
};

fn radius(c: &PointCloud) -> f64 {
    (0..c.len())
        .map(|i| c.point(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn main() -> setnet::Result<()> {
    let data = synth_generate(&SynthSpec {
        classes: vec![Primitive::Cylinder],
        clouds_per_class: 1,
        points_per_cloud: 1000,
        ..SynthSpec::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cloud = normalize_unit_sphere(&data.clouds[0]);
    println!("normalized radius {:.6}", radius(&cloud));
    println!("augmented radius  {:.6}", radius(&augment(&cloud, &mut rng)));

    let idx = furthest_point_sample(&cloud, 8, 0)?;
    print!("furthest-point sample of 8:\n{}", render_cloud(&cloud.select(&idx)));

    for p in [
        Corruption::DeleteRandom(0.5),
        Corruption::DeleteFurthest(0.5),
        Corruption::Outliers(0.2),
        Corruption::Perturb(0.02),
    ] {
        let c = corrupt(&cloud, p, &mut rng)?;
        println!("{:<16} {:>4} -> {:>4} points", p.name(), cloud.len(), c.len());
    }
    Ok(())
}
