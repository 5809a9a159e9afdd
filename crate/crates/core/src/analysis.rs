//! Measurements on condition blocks and generated latents.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Element, Tensor};

/// Mean absolute off-diagonal cosine similarity between the rows of `a`.
/// Lower means more diverse.
pub fn diversity_metric<E: Element>(a: &Tensor<E>) -> Result<f64> {
    let (n, dim) = a.expect_2d("diversity_metric")?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("diversity needs at least 2 rows, got {n}")));
    }
    let mut rows = Vec::with_capacity(n * dim);
    for i in 0..n {
        let r = a.row(i);
        let norm = r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidArgument(format!("row {i} has norm {norm}")));
        }
        rows.extend(r.iter().map(|v| v.as_f64() / norm));
    }
    let unit = Tensor::from_vec(&[n, dim], rows)?;
    let s = unit.matmul(&unit.transpose()?)?;
    let mut total = 0.0;
    for i in 0..n {
        for (j, v) in s.row(i).iter().enumerate() {
            if i != j {
                total += v.abs();
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// First `k` rows from `a`, the rest from `b`.
    #[default]
    Prefix,
    /// `k` rows from `a` spread evenly over the block.
    Interleaved,
}

/// Mix two condition blocks row-wise, taking `k` token rows from `a`.
pub fn fuse_conditions<E: Element>(a: &Tensor<E>, b: &Tensor<E>, k: usize, mode: FusionMode) -> Result<Tensor<E>> {
    a.same_shape(b, "fuse_conditions")?;
    let (n, dim) = a.expect_2d("fuse_conditions")?;
    if k > n {
        return Err(Error::InvalidArgument(format!("fusion split {k} exceeds {n} rows")));
    }
    let mut out = Vec::with_capacity(n * dim);
    for i in 0..n {
        let from_a = match mode {
            FusionMode::Prefix => i < k,
            FusionMode::Interleaved => (i + 1) * k / n > i * k / n,
        };
        out.extend_from_slice(if from_a { a.row(i) } else { b.row(i) });
    }
    Tensor::from_vec(&[n, dim], out)
}

/// Wasserstein-1 distance between two 1-D empirical distributions.
pub fn wasserstein_1d(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("wasserstein_1d of an empty set".into()));
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    // Integrate |F^-1(u) - G^-1(u)| over the merged quantile breakpoints.
    let (nx, ny) = (xs.len(), ys.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < nx && j < ny {
        let ux = (i + 1) as f64 / nx as f64;
        let uy = (j + 1) as f64 / ny as f64;
        let next = ux.min(uy);
        total += (next - u) * (xs[i] - ys[j]).abs();
        u = next;
        if ux <= uy {
            i += 1;
        }
        if uy <= ux {
            j += 1;
        }
    }
    Ok(total)
}

/// Mean 1-D Wasserstein distance over `n_proj` random unit directions.
/// Rows of `x` and `y` are samples.
pub fn sliced_wasserstein<E: Element>(x: &Tensor<E>, y: &Tensor<E>, n_proj: usize, rng: &mut SeededRng) -> Result<f64> {
    let (_, dx) = x.expect_2d("sliced_wasserstein")?;
    let (_, dy) = y.expect_2d("sliced_wasserstein")?;
    if dx != dy {
        return Err(shape_err("sliced_wasserstein", format!("dimensions {dx} and {dy}")));
    }
    if n_proj == 0 {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    let x = x.cast::<f64>();
    let y = y.cast::<f64>();
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..dx).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let dir = Tensor::from_vec(&[dx, 1], dir)?;
        let px = x.matmul(&dir)?;
        let py = y.matmul(&dir)?;
        total += wasserstein_1d(px.data(), py.data())?;
    }
    Ok(total / n_proj as f64)
}

/// Per-class means of flattened latents, indexed by class id.
pub fn class_centroids<E: Element>(samples: &[(usize, Tensor<E>)], n_classes: usize) -> Result<Vec<Vec<f64>>> {
    let dim = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples for centroids".into()))?
        .1
        .len();
    let mut sums = vec![vec![0.0; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (k, x) in samples {
        if *k >= n_classes {
            return Err(Error::ClassOutOfRange {
                class_id: *k,
                n_classes,
            });
        }
        if x.len() != dim {
            return Err(shape_err("class_centroids", format!("{} elements, expected {dim}", x.len())));
        }
        for (s, v) in sums[*k].iter_mut().zip(x.data()) {
            *s += v.as_f64();
        }
        counts[*k] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!("class {k} has no samples")));
    }
    for (s, c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= *c as f64);
    }
    Ok(sums)
}

fn sq_dist(a: &[f64], b: impl Iterator<Item = f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the centroid nearest to `x` (Euclidean).
pub fn nearest_centroid<E: Element>(x: &Tensor<E>, centroids: &[Vec<f64>]) -> Result<usize> {
    let mut best = None;
    for (k, c) in centroids.iter().enumerate() {
        if c.len() != x.len() {
            return Err(shape_err("nearest_centroid", format!("{} elements vs centroid {}", x.len(), c.len())));
        }
        let d = sq_dist(c, x.data().iter().map(|v| v.as_f64()));
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best.map(|(k, _)| k)
        .ok_or_else(|| Error::InvalidArgument("no centroids".into()))
}

/// Fraction of `(label, sample)` pairs whose nearest centroid is their label.
pub fn centroid_accuracy<E: Element>(samples: &[(usize, Tensor<E>)], centroids: &[Vec<f64>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("centroid_accuracy of no samples".into()));
    }
    let mut hits = 0;
    for (k, x) in samples {
        if *k >= centroids.len() {
            return Err(Error::ClassOutOfRange {
                class_id: *k,
                n_classes: centroids.len(),
            });
        }
        if nearest_centroid(x, centroids)? == *k {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Euclidean distance between two flat vectors.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b.iter().copied()).sqrt()
}

/// Ordered named metric values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn push(&mut self, key: impl Into<String>, value: f64) {
        self.entries.push((key.into(), value));
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// One `key=value` line per entry.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// `metric,value` header then one row per entry.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }
}
