use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, PointCloud};
use crate::error::{Error, Result};

/// Points per digit set.
pub const MNIST_SET_SIZE: usize = 256;
const THRESHOLD: u8 = 128;

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;

/// Raw IDX image block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl MnistImages {
    pub fn len(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.rows * self.cols;
        &self.pixels[i * sz..(i + 1) * sz]
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != want {
        return Err(Error::Format(format!("IDX magic {magic}, expected {want}")));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<MnistImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != count * rows * cols {
        return Err(Error::Format(format!(
            "IDX image body has {} bytes, header promises {count}×{rows}×{cols}",
            body.len()
        )));
    }
    Ok(MnistImages { rows, cols, pixels: body.to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Format(format!(
            "IDX label body has {} bytes, header promises {count}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<MnistImages> {
    parse_idx_images(&std::fs::read(path)?)
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&std::fs::read(path)?)
}

/// Converts a 28×28 digit into a 2-D point set of exactly 256 points.
///
/// Pixels brighter than 128 become points with `x` running left to right
/// and `y` bottom to top, both in `[−1, 1]`. Larger sets are subsampled
/// uniformly (keeping raster order); smaller ones are padded by cycling
/// through their own points, which leaves any max over the set unchanged.
pub fn mnist_to_pointset<R: Rng + ?Sized>(image: &[u8], rng: &mut R) -> Result<PointCloud> {
    let side = (image.len() as f64).sqrt() as usize;
    if side < 2 || side * side != image.len() {
        return Err(Error::Dimension(format!("{} pixels is not a square image", image.len())));
    }
    let scale = 2.0 / (side - 1) as f64;
    let lit: Vec<[f64; 2]> = image
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > THRESHOLD)
        .map(|(i, _)| {
            let (r, c) = (i / side, i % side);
            [c as f64 * scale - 1.0, 1.0 - r as f64 * scale]
        })
        .collect();
    if lit.is_empty() {
        return Err(Error::EmptyDigit);
    }
    let picked: Vec<usize> = if lit.len() > MNIST_SET_SIZE {
        let mut idx = rand::seq::index::sample(rng, lit.len(), MNIST_SET_SIZE).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..MNIST_SET_SIZE).map(|i| i % lit.len()).collect()
    };
    let coords = picked.iter().flat_map(|&i| lit[i]).collect();
    PointCloud::new("digit", 2, coords)
}

/// First `limit` digits of one IDX image/label pair as point sets.
fn load_split(images: &Path, labels: &Path, limit: usize, seed: u64, tag: &str) -> Result<Vec<PointCloud>> {
    let imgs = read_idx_images(images)?;
    let labs = read_idx_labels(labels)?;
    if imgs.len() != labs.len() {
        return Err(Error::Format(format!("{} images but {} labels", imgs.len(), labs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = limit.min(imgs.len());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut cloud = mnist_to_pointset(imgs.image(i), &mut rng)?.with_class(labs[i] as usize);
        cloud.id = format!("mnist-{tag}-{i:05}");
        out.push(cloud);
    }
    Ok(out)
}

/// Loads the standard MNIST IDX files from `dir`, keeping the first
/// `train_limit` training and `test_limit` test digits.
pub fn load_mnist(dir: impl AsRef<Path>, train_limit: usize, test_limit: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_split(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        train_limit,
        seed,
        "train",
    )?;
    let test = load_split(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        test_limit,
        seed ^ 0x5eed,
        "test",
    )?;
    let names: Vec<String> = (0..10).map(|d| d.to_string()).collect();
    Ok((Dataset::classification(train, names.clone()), Dataset::classification(test, names)))
}
