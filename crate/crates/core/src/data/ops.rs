use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::PointCloud;
use crate::error::{dim_err, Error, Result};

/// Subtracts the centroid and divides by the largest point norm, so the
/// result lies in the unit ball with at least one point on (or within one
/// ulp of) the sphere. An all-identical cloud maps to the origin.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> PointCloud {
    let d = cloud.dim();
    let n = cloud.len();
    let mut out = cloud.clone();
    if n == 0 {
        return out;
    }
    let mut centroid = vec![0.0; d];
    for i in 0..n {
        centroid.iter_mut().zip(cloud.point(i)).for_each(|(c, v)| *c += v);
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);
    let pts = out.points_mut();
    for p in pts.chunks_exact_mut(d) {
        p.iter_mut().zip(&centroid).for_each(|(v, c)| *v -= c);
    }
    let max_norm = pts.chunks_exact(d).map(norm).fold(0.0, f64::max);
    if max_norm == 0.0 {
        pts.iter_mut().for_each(|v| *v = 0.0);
        return out;
    }
    pts.iter_mut().for_each(|v| *v /= max_norm);
    // rounding can leave the farthest point a hair outside the sphere
    while pts.chunks_exact(d).map(norm).fold(0.0, f64::max) > 1.0 {
        pts.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
    }
    out
}

fn norm(p: &[f64]) -> f64 {
    p.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Random rotation about the up (z) axis followed by Gaussian jitter with
/// standard deviation 0.02. Clouds that are not 3-D only get the jitter.
pub fn augment<R: Rng + ?Sized>(cloud: &PointCloud, rng: &mut R) -> PointCloud {
    let angle = rng.gen_range(0.0..2.0 * PI);
    augment_with(cloud, angle, 0.02, rng)
}

/// [`augment`] with an explicit angle (radians, counter-clockwise about z)
/// and jitter sigma.
pub fn augment_with<R: Rng + ?Sized>(cloud: &PointCloud, angle: f64, sigma: f64, rng: &mut R) -> PointCloud {
    let d = cloud.dim();
    let mut out = cloud.clone();
    if d == 3 {
        let (s, c) = angle.sin_cos();
        let rotate = |p: &mut [f64]| {
            let (x, y) = (p[0], p[1]);
            p[0] = c * x - s * y;
            p[1] = s * x + c * y;
        };
        out.points_mut().chunks_exact_mut(3).for_each(rotate);
        if let Some(n) = out.normals.as_mut() {
            n.chunks_exact_mut(3).for_each(rotate);
        }
    }
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("positive sigma");
        out.points_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    out
}

/// Greedy max-min selection of `k` points starting from `start`. Each step
/// picks the point farthest from everything selected so far; ties go to the
/// lowest index. Returns indices in selection order.
pub fn furthest_point_sample(cloud: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return dim_err(format!("cannot pick {k} of {n} points"));
    }
    if start >= n {
        return Err(Error::Index(format!("start index {start} of {n} points")));
    }
    let mut selected = Vec::with_capacity(k);
    let mut dist = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..k {
        selected.push(current);
        dist[current] = f64::NEG_INFINITY;
        let p = cloud.point(current);
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if dist[i] == f64::NEG_INFINITY {
                continue;
            }
            dist[i] = dist[i].min(sq_dist(cloud.point(i), p));
            if dist[i] > best_d {
                best_d = dist[i];
                best = Some(i);
            }
        }
        match best {
            Some(b) => current = b,
            None => break,
        }
    }
    Ok(selected)
}

/// Corruption protocols of the robustness experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    None,
    /// Drop `⌊p·n⌋` points chosen uniformly.
    DeleteRandom(f64),
    /// Keep a furthest-point sample of `n − ⌊p·n⌋` points.
    DeleteFurthest(f64),
    /// Append `⌊q·n⌋` points uniform in the unit ball.
    Outliers(f64),
    /// Add i.i.d. Gaussian noise with this sigma to every coordinate.
    Perturb(f64),
}

impl Corruption {
    pub fn name(&self) -> &'static str {
        match self {
            Corruption::None => "none",
            Corruption::DeleteRandom(_) => "delete_random",
            Corruption::DeleteFurthest(_) => "delete_furthest",
            Corruption::Outliers(_) => "outliers",
            Corruption::Perturb(_) => "perturb",
        }
    }

    pub fn amount(&self) -> f64 {
        match *self {
            Corruption::None => 0.0,
            Corruption::DeleteRandom(a)
            | Corruption::DeleteFurthest(a)
            | Corruption::Outliers(a)
            | Corruption::Perturb(a) => a,
        }
    }

    pub fn from_parts(name: &str, amount: f64) -> Result<Self> {
        Ok(match name {
            "none" => Corruption::None,
            "delete_random" => Corruption::DeleteRandom(amount),
            "delete_furthest" => Corruption::DeleteFurthest(amount),
            "outliers" => Corruption::Outliers(amount),
            "perturb" => Corruption::Perturb(amount),
            other => return Err(Error::Config(format!("unknown corruption `{other}`"))),
        })
    }
}

/// Applies one corruption protocol. Outputs keep the input's point order
/// (deletions keep the surviving points in their original order).
pub fn corrupt<R: Rng + ?Sized>(cloud: &PointCloud, protocol: Corruption, rng: &mut R) -> Result<PointCloud> {
    let n = cloud.len();
    let ratio_ok = |r: f64| (0.0..1.0).contains(&r);
    match protocol {
        Corruption::None => Ok(cloud.clone()),
        Corruption::DeleteRandom(p) | Corruption::DeleteFurthest(p) => {
            if !ratio_ok(p) {
                return Err(Error::Config(format!("deletion ratio {p} outside [0, 1)")));
            }
            let keep = n - (p * n as f64).floor() as usize;
            if keep == 0 {
                return Err(Error::EmptySet("corruption removed every point".into()));
            }
            let mut idx = match protocol {
                Corruption::DeleteRandom(_) => rand::seq::index::sample(rng, n, keep).into_vec(),
                _ => furthest_point_sample(cloud, keep, 0)?,
            };
            idx.sort_unstable();
            Ok(cloud.select(&idx))
        }
        Corruption::Outliers(q) => {
            if !ratio_ok(q) {
                return Err(Error::Config(format!("outlier ratio {q} outside [0, 1)")));
            }
            let extra = (q * n as f64).floor() as usize;
            let mut out = cloud.clone();
            if extra == 0 {
                return Ok(out);
            }
            let d = cloud.dim();
            let mut coords = Vec::with_capacity(extra * d);
            let mut p = vec![0.0; d];
            for _ in 0..extra {
                loop {
                    p.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..=1.0));
                    if norm(&p) <= 1.0 {
                        break;
                    }
                }
                coords.extend_from_slice(&p);
            }
            out.extend_points(&coords)?;
            Ok(out)
        }
        Corruption::Perturb(sigma) => {
            if !(sigma >= 0.0) {
                return Err(Error::Config(format!("perturbation sigma {sigma} is negative")));
            }
            let mut out = cloud.clone();
            if sigma > 0.0 {
                let noise = Normal::new(0.0, sigma).expect("positive sigma");
                out.points_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
            }
            Ok(out)
        }
    }
}
