//! Norm statistics: mean L2 norm per sequence position, per capture, and
//! per vocabulary token. Means are taken over per-vector norms, not norms
//! of mean vectors.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::pipeline::Mode;
use crate::store::{resolve, LatentDataset, Selection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormAxis {
    Position,
    Capture,
    Token,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub axis: NormAxis,
    /// Position, capture ordinal in the dataset enumeration, or token id.
    pub indices: Vec<usize>,
    pub labels: Vec<String>,
    /// Mean L2 norm per index, in model-dimension units.
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
    pub selection: Selection,
    pub full_dim_verified: bool,
}

impl NormReport {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `index,mean,count,label`, one row per index.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,mean,count,label\n");
        for i in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.indices[i], self.values[i], self.counts[i], self.labels[i]
            );
        }
        out
    }

    pub fn from_csv(text: &str, axis: NormAxis) -> Result<Self> {
        let mut r = Self {
            axis,
            indices: Vec::new(),
            labels: Vec::new(),
            values: Vec::new(),
            counts: Vec::new(),
            selection: Selection::default(),
            full_dim_verified: true,
        };
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Parse {
                file: "norm report".into(),
                line: n + 1,
                message: format!("bad {what} in {line:?}"),
            };
            let mut f = line.splitn(4, ',');
            r.indices.push(f.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("index"))?);
            r.values.push(f.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("mean"))?);
            r.counts.push(f.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("count"))?);
            r.labels.push(f.next().unwrap_or_default().to_string());
        }
        Ok(r)
    }
}

fn require_full_dim(ds: &LatentDataset) -> Result<()> {
    let h = ds.header();
    if h.compressed {
        let from = h.compression.as_ref().map_or(h.model.d_model, |c| c.from_dim);
        return Err(Error::Validation(format!(
            "dataset is PCA-compressed ({from} -> {} dims); norm analyses need full-dimensional latents",
            h.dim
        )));
    }
    if h.dim != h.model.d_model {
        return Err(Error::Validation(format!(
            "dataset width {} differs from d_model {}",
            h.dim, h.model.d_model
        )));
    }
    Ok(())
}

/// Per-sample partial sums computed in parallel, then folded in sample
/// order so the result does not depend on the thread count.
fn accumulate<F>(ds: &LatentDataset, sel: &Selection, bins: usize, bin_of: F) -> Result<(Vec<f64>, Vec<usize>)>
where
    F: Fn(usize, usize) -> usize + Sync,
{
    let r = resolve(ds, sel)?;
    let h = ds.header();
    let partials: Vec<(Vec<f64>, Vec<usize>)> = r
        .samples
        .par_iter()
        .map(|&s| {
            let mut sums = vec![0.0; bins];
            let mut counts = vec![0usize; bins];
            let mut buf = vec![0.0; h.dim];
            for (pi, &p) in r.positions.iter().enumerate() {
                if p >= h.valid_lengths[s] {
                    continue;
                }
                for (ci, &c) in r.captures.iter().enumerate() {
                    ds.read_vector(s, p, c, &mut buf);
                    let b = bin_of(pi, ci);
                    sums[b] += norm(&buf);
                    counts[b] += 1;
                }
            }
            (sums, counts)
        })
        .collect();
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for (ps, pc) in partials {
        sums.iter_mut().zip(ps).for_each(|(a, b)| *a += b);
        counts.iter_mut().zip(pc).for_each(|(a, b)| *a += b);
    }
    Ok((sums, counts))
}

fn finish(
    axis: NormAxis,
    sums: Vec<f64>,
    counts: Vec<usize>,
    indices: Vec<usize>,
    labels: Vec<String>,
    sel: &Selection,
) -> Result<NormReport> {
    let mut report = NormReport {
        axis,
        indices: Vec::new(),
        labels: Vec::new(),
        values: Vec::new(),
        counts: Vec::new(),
        selection: sel.clone(),
        full_dim_verified: true,
    };
    for (((s, c), i), l) in sums.into_iter().zip(counts).zip(indices).zip(labels) {
        if c == 0 {
            continue;
        }
        report.values.push(s / c as f64);
        report.counts.push(c);
        report.indices.push(i);
        report.labels.push(l);
    }
    if report.is_empty() {
        return Err(Error::Validation(
            "selection covers only padding; nothing to report".into(),
        ));
    }
    Ok(report)
}

/// Mean norm per sequence position, over samples and selected captures.
pub fn norms_by_position(ds: &LatentDataset, sel: &Selection) -> Result<NormReport> {
    require_full_dim(ds)?;
    let r = resolve(ds, sel)?;
    let (sums, counts) = accumulate(ds, sel, r.positions.len(), |pi, _| pi)?;
    let labels = r.positions.iter().map(|p| format!("pos{p}")).collect();
    finish(NormAxis::Position, sums, counts, r.positions, labels, sel)
}

/// Mean norm per capture, over samples and selected positions, in
/// enumeration order.
pub fn norms_by_capture(ds: &LatentDataset, sel: &Selection) -> Result<NormReport> {
    require_full_dim(ds)?;
    let r = resolve(ds, sel)?;
    let (sums, counts) = accumulate(ds, sel, r.captures.len(), |_, ci| ci)?;
    let labels = r
        .captures
        .iter()
        .map(|&c| ds.header().captures[c].to_string())
        .collect();
    finish(NormAxis::Capture, sums, counts, r.captures, labels, sel)
}

/// Equal-width histogram over `[0, max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `n_bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], n_bins: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::Validation("histogram needs at least one bin".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Domain(format!("cannot histogram value {v}")));
        }
        let max = values.iter().copied().fold(0.0, f64::max);
        let top = if max > 0.0 { max } else { 1.0 };
        let width = top / n_bins as f64;
        let edges = (0..=n_bins)
            .map(|i| if i == n_bins { top } else { i as f64 * width })
            .collect();
        let mut counts = vec![0; n_bins];
        for &v in values {
            let b = ((v / width) as usize).min(n_bins - 1);
            counts[b] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `lo,hi,count`, one row per bin.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lo,hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        let mut counts = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let parsed = (f.len() == 3)
                .then(|| (f[0].parse::<f64>(), f[1].parse::<f64>(), f[2].parse::<usize>()));
            let Some((Ok(lo), Ok(hi), Ok(c))) = parsed else {
                return Err(Error::Parse {
                    file: "histogram".into(),
                    line: n + 1,
                    message: format!("expected lo,hi,count in {line:?}"),
                });
            };
            if edges.is_empty() {
                edges.push(lo);
            }
            edges.push(hi);
            counts.push(c);
        }
        Ok(Self { edges, counts })
    }
}

/// Per-token norms of a singular-mode dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenNorms {
    pub token_ids: Vec<u32>,
    /// Mean over the selected captures of the probe token's latent norm.
    pub norms: Vec<f64>,
    pub histogram: Histogram,
}

/// Histogram of per-token mean norms. Only the probe position (the last
/// real position of each row, after any BOS) is read; the sequence part of
/// `sel` is ignored.
pub fn token_norm_histogram(ds: &LatentDataset, sel: &Selection, n_bins: usize) -> Result<TokenNorms> {
    require_full_dim(ds)?;
    let h = ds.header();
    if h.run.mode != Mode::Singular {
        return Err(Error::Validation(
            "token norm histograms need a singular-mode dataset".into(),
        ));
    }
    let mut probe_sel = sel.clone();
    probe_sel.sequence = Default::default();
    let r = resolve(ds, &probe_sel)?;
    let norms: Vec<f64> = r
        .samples
        .par_iter()
        .map(|&s| {
            let p = h.valid_lengths[s] - 1;
            let mut buf = vec![0.0; h.dim];
            let mut total = 0.0;
            for &c in &r.captures {
                ds.read_vector(s, p, c, &mut buf);
                total += norm(&buf);
            }
            total / r.captures.len() as f64
        })
        .collect();
    let token_ids = r
        .samples
        .iter()
        .map(|&s| h.tokens[s][h.valid_lengths[s] - 1])
        .collect();
    let histogram = Histogram::new(&norms, n_bins)?;
    Ok(TokenNorms {
        token_ids,
        norms,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_cases() {
        let h = Histogram::new(&[1.0, 1.0, 9.0], 2).unwrap();
        assert_eq!(h.counts, vec![2, 1]);
        assert_eq!(h.edges, vec![0.0, 4.5, 9.0]);
        assert_eq!(h.total(), 3);
        assert_eq!(Histogram::from_csv(&h.to_csv()).unwrap(), h);
        assert!(Histogram::new(&[1.0], 0).is_err());
        assert!(Histogram::new(&[f64::NAN], 2).is_err());
    }
}
