use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{normalize_unit_sphere, PointCloud};
use crate::error::{Error, Result};

/// Labeled primitive shapes. Part ids are global across classes so one
/// segmentation head can serve every category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Sphere,
    Cube,
    Cylinder,
    Cone,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [Primitive::Sphere, Primitive::Cube, Primitive::Cylinder, Primitive::Cone];
    /// Number of distinct part ids over all primitives.
    pub const NUM_PARTS: usize = 7;

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Cube => "cube",
            Primitive::Cylinder => "cylinder",
            Primitive::Cone => "cone",
        }
    }

    /// Part ids this primitive can carry:
    /// sphere `{0}`, cube `{1 = top/bottom faces, 2 = side faces}`,
    /// cylinder `{3 = side, 4 = caps}`, cone `{5 = base, 6 = lateral}`.
    pub fn parts(self) -> &'static [usize] {
        match self {
            Primitive::Sphere => &[0],
            Primitive::Cube => &[1, 2],
            Primitive::Cylinder => &[3, 4],
            Primitive::Cone => &[5, 6],
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown primitive `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<Primitive>,
    pub points_per_cloud: usize,
    pub clouds_per_class: usize,
    /// Gaussian sigma added to every coordinate before normalization.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: Primitive::ALL.to_vec(),
            points_per_cloud: 256,
            clouds_per_class: 200,
            noise: 0.01,
            seed: 0,
        }
    }
}

/// A labeled collection of clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub class_names: Vec<String>,
    /// Valid part ids per class (empty for pure classification data).
    pub part_sets: Vec<Vec<usize>>,
    /// Size of the global part-id space.
    pub num_parts: usize,
}

impl Dataset {
    pub fn classification(clouds: Vec<PointCloud>, class_names: Vec<String>) -> Self {
        Dataset { clouds, class_names, part_sets: Vec::new(), num_parts: 0 }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Same metadata, only the clouds at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            clouds: indices.iter().map(|&i| self.clouds[i].clone()).collect(),
            ..self.metadata()
        }
    }

    /// Same metadata with a new cloud list.
    pub fn with_clouds(&self, clouds: Vec<PointCloud>) -> Dataset {
        Dataset { clouds, ..self.metadata() }
    }

    fn metadata(&self) -> Dataset {
        Dataset {
            clouds: Vec::new(),
            class_names: self.class_names.clone(),
            part_sets: self.part_sets.clone(),
            num_parts: self.num_parts,
        }
    }
}

/// Generates surface samples of randomly proportioned primitives with part
/// labels and outward normals, each cloud centered and scaled into the unit
/// ball. Cloud `i` of class `c` depends only on `(seed, c, i)`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes.is_empty() || spec.points_per_cloud == 0 {
        return Err(Error::Config("synthetic spec needs classes and points".into()));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Config(format!("noise sigma {} is negative", spec.noise)));
    }
    let mut clouds = Vec::with_capacity(spec.classes.len() * spec.clouds_per_class);
    for (c, &prim) in spec.classes.iter().enumerate() {
        for i in 0..spec.clouds_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((c as u64) << 32) | i as u64);
            let mut cloud = sample_primitive(prim, spec.points_per_cloud, &mut rng)?;
            if spec.noise > 0.0 {
                let noise = Normal::new(0.0, spec.noise).expect("positive sigma");
                cloud.points_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            let mut cloud = normalize_unit_sphere(&cloud).with_class(c);
            cloud.id = format!("{prim}-{i:04}");
            clouds.push(cloud);
        }
    }
    Ok(Dataset {
        clouds,
        class_names: spec.classes.iter().map(|p| p.name().to_string()).collect(),
        part_sets: spec.classes.iter().map(|p| p.parts().to_vec()).collect(),
        num_parts: Primitive::NUM_PARTS,
    })
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn sample_primitive(prim: Primitive, n: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let mut pts = Vec::with_capacity(n * 3);
    let mut normals = Vec::with_capacity(n * 3);
    let mut labels = Vec::with_capacity(n);
    let mut push = |p: [f64; 3], nrm: [f64; 3], l: usize| {
        pts.extend_from_slice(&p);
        normals.extend_from_slice(&unit(nrm));
        labels.push(l);
    };
    let gaussian = Normal::new(0.0, 1.0).unwrap();
    match prim {
        Primitive::Sphere => {
            // mildly squashed sphere; the direction is uniform
            let r: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.85..1.15));
            for _ in 0..n {
                let d = unit(std::array::from_fn(|_| gaussian.sample(rng)));
                let p = [r[0] * d[0], r[1] * d[1], r[2] * d[2]];
                push(p, [d[0] / r[0], d[1] / r[1], d[2] / r[2]], 0);
            }
        }
        Primitive::Cube => {
            let h: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.6..1.2));
            // face pairs by normal axis, weighted by area
            let area = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let total: f64 = area.iter().sum();
            for _ in 0..n {
                let mut u = rng.gen_range(0.0..total);
                let mut axis = 0;
                while axis < 2 && u >= area[axis] {
                    u -= area[axis];
                    axis += 1;
                }
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let mut p: [f64; 3] = std::array::from_fn(|k| rng.gen_range(-h[k]..=h[k]));
                p[axis] = sign * h[axis];
                let mut nrm = [0.0; 3];
                nrm[axis] = sign;
                push(p, nrm, if axis == 2 { 1 } else { 2 });
            }
        }
        Primitive::Cylinder => {
            let r: f64 = rng.gen_range(0.5..1.0);
            let hh = rng.gen_range(0.5..1.1);
            let side = 2.0 * PI * r * 2.0 * hh;
            let caps = 2.0 * PI * r * r;
            for _ in 0..n {
                let t = rng.gen_range(0.0..2.0 * PI);
                let (s, c) = t.sin_cos();
                if rng.gen_range(0.0..side + caps) < side {
                    let z = rng.gen_range(-hh..=hh);
                    push([r * c, r * s, z], [c, s, 0.0], 3);
                } else {
                    let rho = r * rng.gen::<f64>().sqrt();
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    push([rho * c, rho * s, sign * hh], [0.0, 0.0, sign], 4);
                }
            }
        }
        Primitive::Cone => {
            let r: f64 = rng.gen_range(0.5..1.0);
            let height = rng.gen_range(1.0..2.0);
            let slant = (r * r + height * height).sqrt();
            let lateral = PI * r * slant;
            let base = PI * r * r;
            let z0 = -height / 3.0;
            for _ in 0..n {
                let t = rng.gen_range(0.0..2.0 * PI);
                let (s, c) = t.sin_cos();
                if rng.gen_range(0.0..lateral + base) < base {
                    let rho = r * rng.gen::<f64>().sqrt();
                    push([rho * c, rho * s, z0], [0.0, 0.0, -1.0], 5);
                } else {
                    // fraction of the way from apex to rim; density grows linearly
                    let f = rng.gen::<f64>().sqrt();
                    let rho = f * r;
                    push(
                        [rho * c, rho * s, z0 + height * (1.0 - f)],
                        [height * c, height * s, r],
                        6,
                    );
                }
            }
        }
    }
    PointCloud::new(prim.name(), 3, pts)?
        .with_point_labels(labels)?
        .with_normals(normals)
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Deterministic split by hashing cloud ids: roughly `test_fraction` of the
/// clouds land in the second set, independent of their order.
pub fn train_test_split(data: &Dataset, test_fraction: f64) -> (Dataset, Dataset) {
    let cut = (test_fraction.clamp(0.0, 1.0) * 10_000.0).round() as u64;
    let (test, train): (Vec<_>, Vec<_>) = data
        .clouds
        .iter()
        .cloned()
        .partition(|c| fnv1a(c.id.as_bytes()) % 10_000 < cut);
    (data.with_clouds(train), data.with_clouds(test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, noise: f64) -> Dataset {
        synth_generate(&SynthSpec { clouds_per_class: 5, noise, seed, ..SynthSpec::default() }).unwrap()
    }

    #[test]
    fn sphere_has_a_single_part() {
        let d = small(1, 0.01);
        for c in d.clouds.iter().filter(|c| c.class_label == Some(0)) {
            assert!(c.point_labels.as_ref().unwrap().iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn cylinder_caps_sit_at_the_extreme_heights() {
        let d = small(2, 0.0);
        for c in d.clouds.iter().filter(|c| c.class_label == Some(2)) {
            let z: Vec<f64> = (0..c.len()).map(|i| c.point(i)[2]).collect();
            let (lo, hi) = z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            for (i, &l) in c.point_labels.as_ref().unwrap().iter().enumerate() {
                let at_cap = (z[i] - hi).abs() < 1e-9 || (z[i] - lo).abs() < 1e-9;
                assert_eq!(at_cap, l == 4, "point {i} z={} label {l}", z[i]);
            }
        }
    }

    #[test]
    fn clouds_are_normalized_and_labeled_within_their_class() {
        let d = small(3, 0.01);
        assert_eq!(d.len(), 20);
        for c in &d.clouds {
            assert_eq!(c.len(), 256);
            let max = (0..c.len()).map(|i| c.point(i).iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
            assert!(max <= 1.0 && max > 1.0 - 1e-12);
            let class = c.class_label.unwrap();
            assert!(c.point_labels.as_ref().unwrap().iter().all(|l| d.part_sets[class].contains(l)));
            let n = c.normals.as_ref().unwrap();
            assert!(n.chunks(3).all(|v| ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        assert_eq!(small(9, 0.02), small(9, 0.02));
        assert_ne!(small(9, 0.02), small(10, 0.02));
    }

    #[test]
    fn split_is_a_partition_independent_of_order() {
        let d = synth_generate(&SynthSpec { clouds_per_class: 100, ..SynthSpec::default() }).unwrap();
        let (train, test) = train_test_split(&d, 0.2);
        assert_eq!(train.len() + test.len(), d.len());
        let frac = test.len() as f64 / d.len() as f64;
        assert!((0.15..0.25).contains(&frac), "test fraction {frac}");
        let mut rev = d.clone();
        rev.clouds.reverse();
        let (_, test_rev) = train_test_split(&rev, 0.2);
        let mut a: Vec<_> = test.clouds.iter().map(|c| c.id.clone()).collect();
        let mut b: Vec<_> = test_rev.clouds.iter().map(|c| c.id.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }
}
