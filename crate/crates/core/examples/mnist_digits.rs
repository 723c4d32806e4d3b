//! MNIST digits as unordered 2-d point sets: shows one converted digit and
//! trains a short run on a subset. Fetch the data with
//! `scripts/fetch_mnist.sh` first.
//!
//! `cargo run --release --example mnist_digits [mnist_dir]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use setnet::data::{mnist_to_pointset, read_idx_images, MNIST_SET_SIZE};
use setnet::harness::{self, ExperimentConfig};

fn main() -> setnet::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "data/mnist".into());
    let images = read_idx_images(format!("{dir}/t10k-images-idx3-ubyte"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let set = mnist_to_pointset(images.image(0), &mut rng)?;
    println!("first test digit as {} points in [-1,1]^2:", MNIST_SET_SIZE);
    let mut canvas = vec![vec!['.'; 28]; 28];
    for i in 0..set.len() {
        let p = set.point(i);
        let col = ((p[0] + 1.0) / 2.0 * 27.0).round() as usize;
        let row = ((1.0 - p[1]) / 2.0 * 27.0).round() as usize;
        canvas[row.min(27)][col.min(27)] = '#';
    }
    for row in canvas {
        println!("  {}", row.into_iter().collect::<String>());
    }

    let mut cfg = ExperimentConfig::from_text(include_str!("../../../configs/mnist.cfg"))?;
    cfg.apply_all(&[
        ("data.mnist_dir".into(), dir),
        ("data.train_limit".into(), "2000".into()),
        ("data.test_limit".into(), "500".into()),
        ("train.epochs".into(), "2".into()),
    ])?;
    let run = harness::train(&cfg, None, &mut |e| {
        eprintln!("epoch {}  loss {:.4}  test acc {:?}", e.epoch, e.mean_loss, e.test_accuracy);
    })?;
    println!("test accuracy {:.3}", run.metrics.classification.unwrap().overall);
    Ok(())
}
