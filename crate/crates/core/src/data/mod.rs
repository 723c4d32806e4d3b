//! Point clouds, desk-scale datasets and preprocessing.

mod io;
mod mnist;
mod ops;
mod synth;

pub use io::{parse_cloud, read_cloud_file, render_cloud, write_cloud_file, CLOUD_HEADER};
pub use mnist::{load_mnist, mnist_to_pointset, read_idx_images, read_idx_labels, MnistImages, MNIST_SET_SIZE};
pub use ops::{augment, augment_with, corrupt, furthest_point_sample, normalize_unit_sphere, Corruption};
pub use synth::{synth_generate, train_test_split, Dataset, Primitive, SynthSpec};

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Unordered set of `n` points in `R^m`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub id: String,
    dim: usize,
    points: Vec<f64>,
    pub point_labels: Option<Vec<usize>>,
    pub class_label: Option<usize>,
    /// Optional unit normal per point (`n×m`).
    pub normals: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(id: impl Into<String>, dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return dim_err(format!("{} coordinates do not form {dim}-d points", points.len()));
        }
        Ok(PointCloud {
            id: id.into(),
            dim,
            points,
            point_labels: None,
            class_label: None,
            normals: None,
        })
    }

    pub fn from_rows(id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(3, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return dim_err("ragged point rows");
        }
        Self::new(id, dim, rows.concat())
    }

    pub fn with_point_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return dim_err(format!("{} labels for {} points", labels.len(), self.len()));
        }
        self.point_labels = Some(labels);
        Ok(self)
    }

    pub fn with_class(mut self, class: usize) -> Self {
        self.class_label = Some(class);
        self
    }

    pub fn with_normals(mut self, normals: Vec<f64>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return dim_err("one normal per point required");
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [f64] {
        &mut self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(&[self.len(), self.dim], self.points.clone())
    }

    /// Points (and their labels / normals) at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let d = self.dim;
        let pick = |src: &[f64]| indices.iter().flat_map(|&i| src[i * d..(i + 1) * d].iter().copied()).collect();
        PointCloud {
            id: self.id.clone(),
            dim: d,
            points: pick(&self.points),
            point_labels: self
                .point_labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_label: self.class_label,
            normals: self.normals.as_deref().map(pick),
        }
    }

    /// Appends points; per-point labels and normals are dropped because
    /// the new points have none.
    pub fn extend_points(&mut self, coords: &[f64]) -> Result<()> {
        if coords.len() % self.dim != 0 {
            return dim_err("appended coordinates do not form whole points");
        }
        self.points.extend_from_slice(coords);
        self.point_labels = None;
        self.normals = None;
        Ok(())
    }
}
