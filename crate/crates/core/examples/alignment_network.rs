//! The alignment networks: identity at initialization, the orthogonality
//! penalty, and invariance of the predicted 3x3 matrix to point order.
//!
//! `cargo run --release --example alignment_network`

use setnet::data::{synth_generate, Primitive, SynthSpec};
use setnet::pointnet::{orthogonality_loss, ModelSpec, ModelState};
use setnet::tensor::Tensor;

fn main() -> setnet::Result<()> {
    let data = synth_generate(&SynthSpec {
        classes: vec![Primitive::Cone],
        clouds_per_class: 1,
        points_per_cloud: 200,
        ..SynthSpec::default()
    })?;
    let cloud = &data.clouds[0];
    let mut state = ModelState::init(&ModelSpec::classifier(4), 0)?;

    let a = state.infer(&[cloud])?.input_transform.expect("input transform");
    println!("untrained input transform:\n{:?}", a.data());

    // Perturb the weights so the alignment is no longer the identity.
    for (i, p) in state.params.iter_mut().enumerate() {
        *p += 0.02 * ((i as f64 * 0.7).sin());
    }
    let a = state.infer(&[cloud])?.input_transform.unwrap();
    let reversed: Vec<usize> = (0..cloud.len()).rev().collect();
    let b = state.infer(&[&cloud.select(&reversed)])?.input_transform.unwrap();
    println!("perturbed input transform:\n{:?}", a.data());
    println!("same matrix for reversed point order: {}", a == b);

    let f = state.infer(&[cloud])?.feature_transform.unwrap();
    let f = Tensor::new(&[64, 64], f.into_data())?;
    println!("feature transform orthogonality penalty {:.4}", orthogonality_loss(&f)?);
    let rot = Tensor::from_rows(&[vec![0.0, -1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]])?;
    println!("penalty of a rotation {:.1e}", orthogonality_loss(&rot)?);
    Ok(())
}
