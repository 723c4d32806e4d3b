use crate::data::{Dataset, PointCloud};
use crate::error::{Error, Result};
use crate::pointnet::{normal_loss, Batch, ModelState};
use crate::tensor::{Mode, Tensor};

const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracy {
    pub overall: f64,
    /// Unweighted mean of the per-class recalls (classes absent from the
    /// ground truth are skipped).
    pub avg_class: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Overall and class-averaged accuracy of predicted labels.
pub fn classification_accuracy(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<ClassAccuracy> {
    if gt.is_empty() {
        return Err(Error::EmptySet("no labeled examples".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if g >= num_classes {
            return Err(Error::Label(format!("label {g} outside [0, {num_classes})")));
        }
        totals[g] += 1;
        hits[g] += (p == g) as usize;
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(ClassAccuracy {
        overall: hits.iter().sum::<usize>() as f64 / gt.len() as f64,
        avg_class: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs eval-mode inference over `clouds` in fixed-size batches.
fn batched<T>(
    state: &ModelState,
    clouds: &[PointCloud],
    mut each: impl FnMut(&[PointCloud], &crate::pointnet::Inference) -> Result<T>,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for chunk in clouds.chunks(EVAL_BATCH) {
        let refs: Vec<&PointCloud> = chunk.iter().collect();
        let inf = state.infer_batch(&Batch::from_clouds(&refs)?, Mode::Eval)?;
        out.push(each(chunk, &inf)?);
    }
    Ok(out)
}

pub fn predict_classes(state: &ModelState, clouds: &[PointCloud]) -> Result<Vec<usize>> {
    let parts = batched(state, clouds, |_, inf| {
        Ok((0..inf.output.rows()).map(|i| argmax(inf.output.row(i))).collect::<Vec<_>>())
    })?;
    Ok(parts.concat())
}

pub fn evaluate_classification(state: &ModelState, data: &Dataset) -> Result<ClassAccuracy> {
    if data.is_empty() {
        return Err(Error::EmptySet("evaluation dataset is empty".into()));
    }
    let gt = data
        .clouds
        .iter()
        .map(|c| c.class_label.ok_or_else(|| Error::Label(format!("cloud `{}` has no class", c.id))))
        .collect::<Result<Vec<_>>>()?;
    let pred = predict_classes(state, &data.clouds)?;
    classification_accuracy(&pred, &gt, data.num_classes())
}

/// Mean over the category's parts of per-part IoU for one shape. A part
/// absent from both prediction and ground truth counts as IoU 1.
pub fn part_miou(pred: &[usize], gt: &[usize], parts: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    if parts.is_empty() {
        return Err(Error::Label("category has no parts".into()));
    }
    if let Some(bad) = pred.iter().chain(gt).find(|l| !parts.contains(l)) {
        return Err(Error::Label(format!("label {bad} outside the category's parts {parts:?}")));
    }
    let ious: Vec<(u128, u128)> = parts
        .iter()
        .map(|&p| {
            let (mut inter, mut union) = (0u128, 0u128);
            for (&a, &b) in pred.iter().zip(gt) {
                let (ia, ib) = (a == p, b == p);
                inter += (ia && ib) as u128;
                union += (ia || ib) as u128;
            }
            if union == 0 {
                (1, 1)
            } else {
                (inter, union)
            }
        })
        .collect();
    Ok(exact_mean(&ious).unwrap_or_else(|| {
        ious.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / ious.len() as f64
    }))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of fractions computed exactly and rounded once, when the reduced
/// result fits in 53 bits (always the case for small shapes).
fn exact_mean(fracs: &[(u128, u128)]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(a, b) in fracs {
        let g = gcd(den, b);
        let lcm = den.checked_mul(b / g)?;
        num = num.checked_mul(lcm / den)?.checked_add(a.checked_mul(lcm / b)?)?;
        den = lcm;
        let r = gcd(num, den).max(1);
        (num, den) = (num / r, den / r);
    }
    den = den.checked_mul(fracs.len() as u128)?;
    let r = gcd(num, den).max(1);
    (num, den) = (num / r, den / r);
    const LIMIT: u128 = 1 << 53;
    (num <= LIMIT && den <= LIMIT).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMetrics {
    /// Per category: mean of its shapes' mIoU (`None` without test shapes).
    pub per_category: Vec<Option<f64>>,
    /// Mean over all shapes.
    pub mean_over_shapes: f64,
    /// Mean over categories present.
    pub mean_over_categories: f64,
}

/// Aggregates per-shape mIoU values tagged with their category.
pub fn dataset_miou(shapes: &[(usize, f64)], num_categories: usize) -> Result<SegmentationMetrics> {
    if shapes.is_empty() {
        return Err(Error::EmptySet("no shapes to average".into()));
    }
    let mut sums = vec![0.0; num_categories];
    let mut counts = vec![0usize; num_categories];
    for &(c, v) in shapes {
        if c >= num_categories {
            return Err(Error::Label(format!("category {c} outside [0, {num_categories})")));
        }
        sums[c] += v;
        counts[c] += 1;
    }
    let per_category: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    let present: Vec<f64> = per_category.iter().flatten().copied().collect();
    Ok(SegmentationMetrics {
        mean_over_shapes: shapes.iter().map(|s| s.1).sum::<f64>() / shapes.len() as f64,
        mean_over_categories: present.iter().sum::<f64>() / present.len() as f64,
        per_category,
    })
}

/// Per-point part predictions, restricted to each cloud's category parts.
pub fn predict_parts(state: &ModelState, data: &Dataset) -> Result<Vec<Vec<usize>>> {
    let parts = batched(state, &data.clouds, |chunk, inf| {
        let mut out = Vec::with_capacity(chunk.len());
        for (s, cloud) in chunk.iter().enumerate() {
            let cat = cloud
                .class_label
                .ok_or_else(|| Error::Label(format!("cloud `{}` has no category", cloud.id)))?;
            let allowed = data
                .part_sets
                .get(cat)
                .ok_or_else(|| Error::Label(format!("no part set for category {cat}")))?;
            let rows = inf.segs.range(s);
            out.push(
                rows.map(|r| {
                    let scores = inf.output.row(r);
                    *allowed
                        .iter()
                        .reduce(|a, b| if scores[*b] > scores[*a] { b } else { a })
                        .expect("non-empty part set")
                })
                .collect(),
            );
        }
        Ok(out)
    })?;
    Ok(parts.concat())
}

pub fn evaluate_segmentation(state: &ModelState, data: &Dataset) -> Result<SegmentationMetrics> {
    let preds = predict_parts(state, data)?;
    let mut shapes = Vec::with_capacity(preds.len());
    for (cloud, pred) in data.clouds.iter().zip(&preds) {
        let cat = cloud.class_label.expect("checked in predict_parts");
        let gt = cloud
            .point_labels
            .as_ref()
            .ok_or_else(|| Error::Label(format!("cloud `{}` has no part labels", cloud.id)))?;
        shapes.push((cat, part_miou(pred, gt, &data.part_sets[cat])?));
    }
    dataset_miou(&shapes, data.num_classes())
}

/// Mean `1 − |cos|` between predicted and true normals over all points.
pub fn evaluate_normals(state: &ModelState, data: &Dataset) -> Result<f64> {
    let losses = batched(state, &data.clouds, |chunk, inf| {
        let gt: Vec<f64> = chunk
            .iter()
            .map(|c| c.normals.clone().ok_or_else(|| Error::Label(format!("cloud `{}` has no normals", c.id))))
            .collect::<Result<Vec<_>>>()?
            .concat();
        let gt = Tensor::new(inf.output.shape(), gt)?;
        Ok((normal_loss(&inf.output, &gt)?, inf.output.rows()))
    })?;
    let rows: usize = losses.iter().map(|l| l.1).sum();
    Ok(losses.iter().map(|(l, n)| l * *n as f64).sum::<f64>() / rows as f64)
}
