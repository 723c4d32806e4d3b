//! The reverse-mode engine against central differences, on a small
//! two-layer network with batch norm and max pooling over a point set.
//!
//! `cargo run --release --example gradient_check`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setnet::tensor::{finite_difference_check, Mode, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> setnet::Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn main() -> setnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![
        random(&[16, 3], &mut rng)?,
        random(&[3, 8], &mut rng)?,
        random(&[8], &mut rng)?,
        random(&[8, 4], &mut rng)?,
    ];
    let err = finite_difference_check(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_bias(h, v[2])?;
            let (gamma, beta) = (g.constant(Tensor::new(&[8], vec![1.0; 8])?), g.constant(Tensor::zeros(&[8])?));
            let mut stats = setnet::tensor::BnStats::new(8);
            let h = g.batch_norm(h, gamma, beta, &mut stats, Mode::Train, 0.5, setnet::layers::BN_EPS)?;
            let h = g.relu(h);
            let h = g.matmul(h, v[3])?;
            let (m, _) = g.max_over_set(h)?;
            let sq = g.mul(m, m)?;
            Ok(g.sum(sq))
        },
        &inputs,
        1e-6,
        None,
    )?;
    println!("largest relative gradient error over every coordinate: {err:.2e}");
    Ok(())
}
