//! Measurements used to check the qualitative latent-space phenomena on a
//! real checkpoint: the position-0 norm spike, attention/MLP separation,
//! the positional-embedding helix and the layerwise norm profile.

#![allow(clippy::needless_range_loop)]

use serde::{Deserialize, Serialize};

use crate::analyze::{norms_by_capture, NormReport};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{CaptureTag, Component};
use crate::reduce::{pca_fit, pca_transform};
use crate::store::{
    mean_over, select, unit_normalize, Axis, CaptureFilter, CaptureLabel, LatentDataset, Selection,
};

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Position-0 mean norm divided by the median of the later positions.
pub fn position_spike_ratio(report: &NormReport) -> Result<f64> {
    let first = report
        .indices
        .iter()
        .position(|&i| i == 0)
        .ok_or_else(|| Error::Validation("report has no position 0".into()))?;
    let mut rest: Vec<f64> = report
        .indices
        .iter()
        .zip(&report.values)
        .filter(|(&i, _)| i >= 1)
        .map(|(_, &v)| v)
        .collect();
    if rest.is_empty() {
        return Err(Error::Validation("report has no positions after 0".into()));
    }
    let m = median(&mut rest);
    if m <= 0.0 {
        return Err(Error::Numeric(format!("median later-position norm is {m}")));
    }
    Ok(report.values[first] / m)
}

/// Training accuracy of an L2-regularised logistic regression (Newton
/// iterations on standardised features). Deterministic.
pub fn linear_separation_accuracy(x: &Matrix, labels: &[bool]) -> Result<f64> {
    let (n, d) = x.shape();
    if labels.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).iter().sum::<f64>() / n as f64).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = x.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if v > 0.0 { v.sqrt() } else { 1.0 }
        })
        .collect();
    let feats: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut f = vec![1.0];
            f.extend((0..d).map(|j| (x.get(i, j) - mean[j]) / sd[j]));
            f
        })
        .collect();
    let p = d + 1;
    let ridge = 1e-4;
    let mut w = vec![0.0; p];
    for _ in 0..100 {
        let mut grad = vec![0.0; p];
        let mut hess = Matrix::zeros(p, p);
        for (f, &y) in feats.iter().zip(labels) {
            let z: f64 = f.iter().zip(&w).map(|(a, b)| a * b).sum();
            let s = 1.0 / (1.0 + (-z).exp());
            let r = s - if y { 1.0 } else { 0.0 };
            let h = (s * (1.0 - s)).max(1e-12);
            for a in 0..p {
                grad[a] += r * f[a];
                for b in 0..p {
                    hess.set(a, b, hess.get(a, b) + h * f[a] * f[b]);
                }
            }
        }
        for a in 0..p {
            grad[a] += ridge * w[a];
            hess.set(a, a, hess.get(a, a) + ridge);
        }
        let step = solve(&hess, &grad)?;
        let size: f64 = step.iter().map(|v| v * v).sum::<f64>().sqrt();
        w.iter_mut().zip(&step).for_each(|(w, s)| *w -= s);
        if size < 1e-10 {
            break;
        }
    }
    let correct = feats
        .iter()
        .zip(labels)
        .filter(|(f, &y)| {
            let z: f64 = f.iter().zip(&w).map(|(a, b)| a * b).sum();
            (z > 0.0) == y
        })
        .count();
    Ok(correct as f64 / n as f64)
}

/// Gaussian elimination with partial pivoting for a small dense system.
fn solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = a.row(i).to_vec();
            r.push(b[i]);
            r
        })
        .collect();
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
            .expect("non-empty");
        if m[piv][c].abs() < 1e-300 {
            return Err(Error::Numeric("singular system in logistic fit".into()));
        }
        m.swap(c, piv);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..=n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    Ok(x)
}

/// Fraction of rows whose nearest other row (euclidean, over the two given
/// columns) is an adjacent row index.
pub fn adjacent_neighbor_fraction(points: &Matrix, pair: (usize, usize)) -> Result<f64> {
    let n = points.rows();
    if n < 2 || pair.0 >= points.cols() || pair.1 >= points.cols() {
        return Err(Error::Validation(format!(
            "need at least 2 rows and valid columns, got {n} rows and pair {pair:?}"
        )));
    }
    let hits = (0..n)
        .filter(|&i| {
            let (xi, yi) = (points.get(i, pair.0), points.get(i, pair.1));
            let nn = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = (points.get(a, pair.0) - xi).powi(2) + (points.get(a, pair.1) - yi).powi(2);
                    let db = (points.get(b, pair.0) - xi).powi(2) + (points.get(b, pair.1) - yi).powi(2);
                    da.total_cmp(&db)
                })
                .expect("n >= 2");
            nn.abs_diff(i) == 1
        })
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationResult {
    pub accuracy: f64,
    pub projections: Matrix,
    /// True for attention-side rows.
    pub is_attention: Vec<bool>,
}

/// Pre-add attention and MLP outputs (points 2 and 5) of the given blocks,
/// averaged over samples, unit-normalised, projected to 2 uncentered PCA
/// dims, then scored by a linear classifier.
pub fn attention_mlp_separation(ds: &LatentDataset, blocks: (u32, u32)) -> Result<SeparationResult> {
    let sel = Selection {
        captures: CaptureFilter {
            blocks: Some(blocks),
            points: Some(vec![2, 5]),
            ..CaptureFilter::default()
        },
        ..Selection::default()
    };
    let view = mean_over(&select(ds, &sel)?, &[Axis::Sample])?;
    let (view, _) = unit_normalize(&view);
    let (rows, labels) = view.to_rows();
    let model = pca_fit(&rows, 2, "attention_mlp")?;
    let projections = pca_transform(&model, &rows)?;
    let is_attention: Vec<bool> = labels
        .iter()
        .map(|l| matches!(l.capture, CaptureLabel::Tag(t) if t.component == Component::Attn))
        .collect();
    let accuracy = linear_separation_accuracy(&projections, &is_attention)?;
    Ok(SeparationResult {
        accuracy,
        projections,
        is_attention,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HelixResult {
    /// Unit-normalised positional embeddings in 6 uncentered PCA dims.
    pub projections: Matrix,
    pub adjacent_fraction: f64,
}

/// PCA of the unit-normalised position-embedding table.
pub fn positional_helix(position_embedding: &Matrix, dims: usize) -> Result<HelixResult> {
    let mut x = position_embedding.clone();
    for i in 0..x.rows() {
        let r = x.row_mut(i);
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            r.iter_mut().for_each(|v| *v /= n);
        }
    }
    let model = pca_fit(&x, dims, "position_embedding")?;
    let projections = pca_transform(&model, &x)?;
    let adjacent_fraction = adjacent_neighbor_fraction(&projections, (0, 1))?;
    Ok(HelixResult {
        projections,
        adjacent_fraction,
    })
}

/// True when every panel pair has a finite, non-zero spread on both axes.
pub fn panels_non_degenerate(points: &Matrix) -> bool {
    (0..points.cols()).all(|j| {
        let c = points.column(j);
        let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lo.is_finite() && hi.is_finite() && hi - lo > 1e-9
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseShape {
    pub first_post_add: f64,
    pub last_post_add: f64,
    pub final_norm: f64,
}

impl LayerwiseShape {
    /// Norm grows through the stack and the final norm shrinks it again.
    pub fn holds(&self) -> bool {
        self.last_post_add > self.first_post_add && self.final_norm < self.last_post_add
    }
}

/// Block-0 and last-block post-MLP norms and the final-norm norm.
pub fn layerwise_shape(ds: &LatentDataset) -> Result<LayerwiseShape> {
    let report = norms_by_capture(ds, &Selection::default())?;
    let n_blocks = ds.header().model.n_blocks as u32;
    let find = |tag: CaptureTag| -> Result<f64> {
        let label = tag.to_string();
        report
            .labels
            .iter()
            .position(|l| *l == label)
            .map(|i| report.values[i])
            .ok_or_else(|| Error::Validation(format!("dataset lacks capture {label}")))
    };
    Ok(LayerwiseShape {
        first_post_add: find(CaptureTag::block_point(0, 6))?,
        last_post_add: find(CaptureTag::block_point(n_blocks - 1, 6))?,
        final_norm: find(CaptureTag::final_norm())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyze::NormAxis;

    #[test]
    fn spike_ratio_uses_median() {
        let r = NormReport {
            axis: NormAxis::Position,
            indices: vec![0, 1, 2, 3],
            labels: vec![String::new(); 4],
            values: vec![30.0, 1.0, 10.0, 2.0],
            counts: vec![1; 4],
            selection: Selection::default(),
            full_dim_verified: true,
        };
        assert_eq!(position_spike_ratio(&r).unwrap(), 15.0);
    }

    #[test]
    fn separable_and_inseparable() {
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.1, 2.0], vec![5.0, 1.0], vec![5.1, 2.0]]).unwrap();
        assert_eq!(linear_separation_accuracy(&x, &[false, false, true, true]).unwrap(), 1.0);
        // XOR cannot exceed 3/4.
        let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(linear_separation_accuracy(&x, &[false, false, true, true]).unwrap() <= 0.75);
    }

    #[test]
    fn circle_neighbours_are_adjacent() {
        let rows: Vec<Vec<f64>> = (0..64)
            .map(|i| {
                let t = i as f64 * 0.05;
                vec![t.cos(), t.sin(), 0.0]
            })
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        assert_eq!(adjacent_neighbor_fraction(&x, (0, 1)).unwrap(), 1.0);
    }
}
