//! UMAP: kNN graph, smooth-kNN calibration, fuzzy union, spectral
//! initialisation and negative-sampling SGD. Optimisation runs on one
//! thread with a seeded generator, so a fit is reproducible bit for bit;
//! only the neighbour search is parallel (and order-independent).

#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::knn::{knn_query, knn_query_graph, knn_self, KnnGraph, KnnMethod, KnnParams, Metric, EXACT_KNN_MAX};
use crate::error::{Error, Result};
use crate::linalg::{dot, symmetric_eigen, Matrix};

pub const SMOOTH_K_ITERS: usize = 64;
pub const SMOOTH_K_TOLERANCE: f64 = 1e-5;
/// Calibrations whose residual stays above this are flagged.
pub const SMOOTH_K_MAX_RESIDUAL: f64 = 1e-3;
/// Sigma never drops below this fraction of the mean neighbour distance.
pub const MIN_SIGMA_SCALE: f64 = 1e-3;
const GRAD_CLIP: f64 = 4.0;
const INIT_EXTENT: f64 = 10.0;
const SPECTRAL_MAX_ITERS: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UmapParams {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub metric: Metric,
    pub n_epochs: usize,
    pub learning_rate: f64,
    pub negative_sample_rate: usize,
    pub repulsion_strength: f64,
    pub seed: u64,
    /// Inputs with at least this many rows use approximate neighbour search.
    pub exact_knn_max: usize,
}

impl Default for UmapParams {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            min_dist: 0.1,
            spread: 1.0,
            metric: Metric::Euclidean,
            n_epochs: 200,
            learning_rate: 1.0,
            negative_sample_rate: 5,
            repulsion_strength: 1.0,
            seed: 0,
            exact_knn_max: EXACT_KNN_MAX,
        }
    }
}

impl UmapParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_neighbors < 2 {
            return Err(Error::Validation("n_neighbors must be at least 2".into()));
        }
        if !(self.min_dist >= 0.0 && self.spread > 0.0 && self.min_dist < 3.0 * self.spread) {
            return Err(Error::Validation(format!(
                "min_dist {} / spread {} out of range",
                self.min_dist, self.spread
            )));
        }
        if self.n_epochs == 0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Validation(
                "n_epochs and learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Least-squares fit of `1 / (1 + a d^(2b))` to the target curve that is 1
/// up to `min_dist` and decays as `exp(-(d - min_dist) / spread)` beyond,
/// sampled at 300 points on `[0, 3 spread]` (Levenberg–Marquardt from
/// `a = b = 1`).
pub fn fit_curve_params(min_dist: f64, spread: f64) -> Result<(f64, f64)> {
    let n = 300;
    let xs: Vec<f64> = (0..n)
        .map(|i| 3.0 * spread * i as f64 / (n - 1) as f64)
        .collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            if x < min_dist {
                1.0
            } else {
                (-(x - min_dist) / spread).exp()
            }
        })
        .collect();
    let cost = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let r = 1.0 / (1.0 + a * x.powf(2.0 * b)) - y;
                r * r
            })
            .sum()
    };
    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut lambda = 1e-3;
    let mut c = cost(a, b);
    for _ in 0..500 {
        let (mut jtj, mut jtr) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            let u = if x > 0.0 { x.powf(2.0 * b) } else { 0.0 };
            let den = 1.0 + a * u;
            let r = 1.0 / den - y;
            let da = -u / (den * den);
            let db = if u > 0.0 {
                -a * u * 2.0 * x.ln() / (den * den)
            } else {
                0.0
            };
            let j = [da, db];
            for p in 0..2 {
                jtr[p] += j[p] * r;
                for q in 0..2 {
                    jtj[p][q] += j[p] * j[q];
                }
            }
        }
        let m00 = jtj[0][0] * (1.0 + lambda);
        let m11 = jtj[1][1] * (1.0 + lambda);
        let det = m00 * m11 - jtj[0][1] * jtj[1][0];
        if det == 0.0 || !det.is_finite() {
            break;
        }
        let da = -(m11 * jtr[0] - jtj[0][1] * jtr[1]) / det;
        let db = -(m00 * jtr[1] - jtj[1][0] * jtr[0]) / det;
        let (na, nb) = (a + da, b + db);
        let nc = cost(na, nb);
        if nc.is_finite() && nc <= c {
            let step = (da.abs() / a.abs().max(1e-300)).max(db.abs() / b.abs().max(1e-300));
            a = na;
            b = nb;
            c = nc;
            lambda = (lambda / 10.0).max(1e-12);
            if step < 1e-13 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
        return Err(Error::Numeric(format!(
            "curve fit for min_dist {min_dist}, spread {spread} diverged"
        )));
    }
    Ok((a, b))
}

/// Outcome of the per-point bandwidth search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub rho: f64,
    pub sigma: f64,
    /// `sum(memberships) - target` at the returned sigma.
    pub residual: f64,
    /// The sigma floor was applied or the target could not be reached.
    pub flagged: bool,
}

#[inline]
fn membership(d: f64, rho: f64, sigma: f64) -> f64 {
    let x = d - rho;
    if x > 0.0 {
        (-x / sigma).exp()
    } else {
        1.0
    }
}

/// Finds `rho` (nearest distance) and `sigma` such that
/// `sum_i exp(-max(d_i - rho, 0) / sigma) = target` by bisection.
pub fn smooth_knn_calibrate(distances: &[f64], target: f64) -> Result<Calibration> {
    if distances.len() < 2 {
        return Err(Error::Validation(format!(
            "smooth-kNN calibration needs at least 2 distances, got {}",
            distances.len()
        )));
    }
    if distances.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::Domain("neighbour distances must be finite and non-negative".into()));
    }
    let rho = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let psum = |sigma: f64| distances.iter().map(|&d| membership(d, rho, sigma)).sum::<f64>();
    let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
    for _ in 0..SMOOTH_K_ITERS {
        let s = psum(mid);
        if (s - target).abs() < SMOOTH_K_TOLERANCE {
            break;
        }
        if s > target {
            hi = mid;
            mid = (lo + hi) / 2.0;
        } else {
            lo = mid;
            mid = if hi.is_infinite() { mid * 2.0 } else { (lo + hi) / 2.0 };
        }
    }
    let mean = distances.iter().sum::<f64>() / distances.len() as f64;
    let floor = MIN_SIGMA_SCALE * mean;
    let mut flagged = false;
    if mid < floor || mid <= 0.0 {
        mid = floor.max(f64::MIN_POSITIVE);
        flagged = true;
    }
    let residual = psum(mid) - target;
    if residual.abs() >= SMOOTH_K_MAX_RESIDUAL {
        flagged = true;
    }
    Ok(Calibration {
        rho,
        sigma: mid,
        residual,
        flagged,
    })
}

/// Probabilistic t-conorm used to symmetrise directed memberships.
#[inline]
pub fn fuzzy_union(wij: f64, wji: f64) -> f64 {
    wij + wji - wij * wji
}

/// Symmetric sparse graph in CSR form, columns sorted within each row.
#[derive(Clone, Debug, PartialEq)]
pub struct FuzzyGraph {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
}

impl FuzzyGraph {
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[r.clone()], &self.weights[r])
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let (idx, w) = self.row(i);
        idx.binary_search(&(j as u32)).map_or(0.0, |p| w[p])
    }

    pub fn n_edges(&self) -> usize {
        self.indices.len()
    }

    /// True when every stored weight equals its transpose exactly.
    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| {
            let (idx, w) = self.row(i);
            idx.iter()
                .zip(w)
                .all(|(&j, &wij)| self.weight(j as usize, i).to_bits() == wij.to_bits())
        })
    }

    /// Connected-component label per vertex, and the component count.
    pub fn components(&self) -> (Vec<usize>, usize) {
        let mut label = vec![usize::MAX; self.n];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.n {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = count;
            stack.push(start);
            while let Some(v) = stack.pop() {
                for &u in self.row(v).0 {
                    if label[u as usize] == usize::MAX {
                        label[u as usize] = count;
                        stack.push(u as usize);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }
}

/// Directed memberships from a kNN graph, then fuzzy union.
pub fn fuzzy_simplicial_set(knn: &KnnGraph) -> Result<(FuzzyGraph, Vec<Calibration>, Vec<Vec<f64>>)> {
    let n = knn.indices.len();
    let target = (knn.k as f64).log2();
    let mut calibrations = Vec::with_capacity(n);
    let mut directed = Vec::with_capacity(n);
    for dists in &knn.distances {
        let c = smooth_knn_calibrate(dists, target)?;
        directed.push(dists.iter().map(|&d| membership(d, c.rho, c.sigma)).collect::<Vec<_>>());
        calibrations.push(c);
    }
    let mut rows: Vec<std::collections::BTreeMap<u32, f64>> = vec![Default::default(); n];
    for i in 0..n {
        for (&j, &w) in knn.indices[i].iter().zip(&directed[i]) {
            rows[i].insert(j, w);
        }
    }
    let mut sym: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        for (&j, &wij) in &rows[i] {
            let ju = j as usize;
            let wji = rows[ju].get(&(i as u32)).copied();
            // each unordered pair is produced once, from its smaller endpoint
            // or from the only side that holds it
            if wji.is_some() && ju < i {
                continue;
            }
            let w = fuzzy_union(wij, wji.unwrap_or(0.0));
            if w > 0.0 {
                sym[i].push((j, w));
                if ju != i {
                    sym[ju].push((i as u32, w));
                }
            }
        }
    }
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    indptr.push(0);
    for mut r in sym {
        r.sort_by_key(|e| e.0);
        for (j, w) in r {
            indices.push(j);
            weights.push(w);
        }
        indptr.push(indices.len());
    }
    Ok((
        FuzzyGraph {
            n,
            indptr,
            indices,
            weights,
        },
        calibrations,
        directed,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UmapModel {
    pub params: UmapParams,
    pub a: f64,
    pub b: f64,
    pub out_dims: usize,
    /// `[n_fit, dim]`.
    pub fit_data: Matrix,
    pub knn_indices: Vec<Vec<u32>>,
    /// Directed fuzzy memberships aligned with `knn_indices`.
    pub knn_weights: Vec<Vec<f64>>,
    /// `[n_fit, out_dims]`.
    pub embedding: Matrix,
}

/// Diagnostics gathered during a fit.
#[derive(Clone, Debug)]
pub struct UmapReport {
    pub calibrations: Vec<Calibration>,
    pub graph: FuzzyGraph,
    pub knn_method: KnnMethod,
    pub audit_recall: Option<f64>,
    pub n_components: usize,
    /// Zero rows under the cosine metric (distance 1 to everything).
    pub zero_vectors: usize,
    pub warnings: Vec<String>,
}

impl UmapReport {
    /// Fraction of points whose calibration residual is below the tolerance.
    pub fn calibrated_fraction(&self) -> f64 {
        let ok = self
            .calibrations
            .iter()
            .filter(|c| c.residual.abs() < SMOOTH_K_MAX_RESIDUAL)
            .count();
        ok as f64 / self.calibrations.len().max(1) as f64
    }
}

pub fn umap_fit(x: &Matrix, out_dims: usize, params: &UmapParams) -> Result<(UmapModel, UmapReport)> {
    params.validate()?;
    let n = x.rows();
    if n <= params.n_neighbors {
        return Err(Error::Validation(format!(
            "UMAP needs more than n_neighbors = {} points, got {n}",
            params.n_neighbors
        )));
    }
    if out_dims == 0 {
        return Err(Error::Validation("UMAP output dimension must be positive".into()));
    }
    if !x.is_finite() {
        return Err(Error::Domain("UMAP input has non-finite entries".into()));
    }
    let (a, b) = fit_curve_params(params.min_dist, params.spread)?;
    let mut warnings = Vec::new();

    let knn = knn_self(
        x,
        &KnnParams {
            k: params.n_neighbors,
            metric: params.metric,
            exact_max: params.exact_knn_max,
            seed: params.seed,
        },
    )?;
    let zero_vectors = match params.metric {
        Metric::Cosine => x.iter_rows().filter(|r| r.iter().all(|&v| v == 0.0)).count(),
        Metric::Euclidean => 0,
    };
    if zero_vectors > 0 {
        warnings.push(format!(
            "{zero_vectors} zero vectors under the cosine metric; treated as distance 1 from everything"
        ));
    }
    let (graph, calibrations, directed) = fuzzy_simplicial_set(&knn)?;
    let flagged = calibrations.iter().filter(|c| c.flagged).count();
    if flagged > 0 {
        warnings.push(format!(
            "{flagged} points with degenerate neighbour distances (sigma clamped)"
        ));
    }
    let (labels, n_components) = graph.components();
    if n_components > 1 {
        warnings.push(format!(
            "neighbour graph has {n_components} connected components; initialising each separately"
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut embedding = spectral_init(&graph, &labels, n_components, out_dims, &mut rng);
    finish_init(&mut embedding, &mut rng);

    let edges = EdgeSet::from_graph(&graph, params.n_epochs);
    optimize_layout(
        &mut embedding,
        None,
        &edges,
        params,
        a,
        b,
        params.n_epochs,
        params.learning_rate,
        &mut rng,
    );
    if !embedding.is_finite() {
        return Err(Error::Numeric("UMAP embedding became non-finite".into()));
    }

    let model = UmapModel {
        params: params.clone(),
        a,
        b,
        out_dims,
        fit_data: x.clone(),
        knn_indices: knn.indices.clone(),
        knn_weights: directed,
        embedding,
    };
    let report = UmapReport {
        calibrations,
        graph,
        knn_method: knn.method,
        audit_recall: knn.audit_recall,
        n_components,
        zero_vectors,
        warnings,
    };
    Ok((model, report))
}

/// Places new points at the membership-weighted mean of their fit-data
/// neighbours, then refines them against the frozen fit embedding for a
/// third of the fit epochs at a quarter of the learning rate.
pub fn umap_transform(m: &UmapModel, y: &Matrix) -> Result<Matrix> {
    if y.cols() != m.fit_data.cols() {
        return Err(Error::Shape(format!(
            "UMAP model expects width {}, got {}",
            m.fit_data.cols(),
            y.cols()
        )));
    }
    let n2 = y.rows();
    if n2 == 0 {
        return Ok(Matrix::zeros(0, m.out_dims));
    }
    if !y.is_finite() {
        return Err(Error::Domain("UMAP transform input has non-finite entries".into()));
    }
    let knn = if m.fit_data.rows() < m.params.exact_knn_max {
        knn_query(&m.fit_data, y, m.params.n_neighbors, m.params.metric)?
    } else {
        knn_query_graph(
            &m.fit_data,
            &m.knn_indices,
            y,
            m.params.n_neighbors,
            m.params.metric,
            m.params.seed,
        )?
    };
    let target = (knn.k as f64).log2();
    let dims = m.out_dims;
    let mut out = Matrix::zeros(n2, dims);
    let mut heads = Vec::new();
    let mut tails = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n2 {
        let c = smooth_knn_calibrate(&knn.distances[i], target)?;
        let w: Vec<f64> = knn.distances[i]
            .iter()
            .map(|&d| membership(d, c.rho, c.sigma))
            .collect();
        let total: f64 = w.iter().sum();
        let row = out.row_mut(i);
        for (&j, &wj) in knn.indices[i].iter().zip(&w) {
            let e = m.embedding.row(j as usize);
            for (r, v) in row.iter_mut().zip(e) {
                *r += wj / total * v;
            }
        }
        for (&j, &wj) in knn.indices[i].iter().zip(&w) {
            heads.push(i as u32);
            tails.push(j);
            weights.push(wj);
        }
    }
    let n_epochs = (m.params.n_epochs / 3).max(1);
    let edges = EdgeSet::new(heads, tails, &weights, n_epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(m.params.seed ^ 0x7A5F_0A3D);
    optimize_layout(
        &mut out,
        Some(&m.embedding),
        &edges,
        &m.params,
        m.a,
        m.b,
        n_epochs,
        m.params.learning_rate / 4.0,
        &mut rng,
    );
    if !out.is_finite() {
        return Err(Error::Numeric("UMAP transform became non-finite".into()));
    }
    Ok(out)
}

struct EdgeSet {
    heads: Vec<u32>,
    tails: Vec<u32>,
    epochs_per_sample: Vec<f64>,
}

impl EdgeSet {
    fn from_graph(g: &FuzzyGraph, n_epochs: usize) -> Self {
        let mut heads = Vec::with_capacity(g.n_edges());
        for i in 0..g.n {
            heads.extend(std::iter::repeat_n(i as u32, g.indptr[i + 1] - g.indptr[i]));
        }
        Self::new(heads, g.indices.clone(), &g.weights, n_epochs)
    }

    /// Drops edges lighter than `max / n_epochs`; the rest are sampled with
    /// period `max / w` epochs.
    fn new(heads: Vec<u32>, tails: Vec<u32>, weights: &[f64], n_epochs: usize) -> Self {
        let max = weights.iter().copied().fold(0.0, f64::max);
        let cut = max / n_epochs as f64;
        let mut out = Self {
            heads: Vec::with_capacity(heads.len()),
            tails: Vec::with_capacity(heads.len()),
            epochs_per_sample: Vec::with_capacity(heads.len()),
        };
        for ((h, t), &w) in heads.into_iter().zip(tails).zip(weights) {
            if w <= 0.0 || w < cut {
                continue;
            }
            out.heads.push(h);
            out.tails.push(t);
            out.epochs_per_sample.push(max / w);
        }
        out
    }
}

#[inline]
fn clip(v: f64) -> f64 {
    v.clamp(-GRAD_CLIP, GRAD_CLIP)
}

/// Attractive updates along sampled edges, repulsive updates against
/// uniformly drawn vertices. With `frozen = Some(tail)` the tails come from
/// that fixed embedding and only heads move.
#[allow(clippy::too_many_arguments)]
fn optimize_layout(
    head: &mut Matrix,
    frozen: Option<&Matrix>,
    edges: &EdgeSet,
    params: &UmapParams,
    a: f64,
    b: f64,
    n_epochs: usize,
    initial_alpha: f64,
    rng: &mut ChaCha8Rng,
) {
    let dims = head.cols();
    let n_tail = frozen.map_or(head.rows(), Matrix::rows);
    let neg_rate = params.negative_sample_rate as f64;
    let gamma = params.repulsion_strength;
    let eps_neg: Vec<f64> = edges
        .epochs_per_sample
        .iter()
        .map(|e| if neg_rate > 0.0 { e / neg_rate } else { f64::INFINITY })
        .collect();
    let mut next = edges.epochs_per_sample.clone();
    let mut next_neg = eps_neg.clone();
    let mut cur = vec![0.0; dims];
    let mut oth = vec![0.0; dims];

    for epoch in 0..n_epochs {
        let alpha = initial_alpha * (1.0 - epoch as f64 / n_epochs as f64);
        let e = epoch as f64;
        for i in 0..edges.heads.len() {
            if next[i] > e {
                continue;
            }
            let h = edges.heads[i] as usize;
            let t = edges.tails[i] as usize;
            cur.copy_from_slice(head.row(h));
            match frozen {
                Some(f) => oth.copy_from_slice(f.row(t)),
                None => oth.copy_from_slice(head.row(t)),
            }
            let d2: f64 = cur.iter().zip(&oth).map(|(x, y)| (x - y) * (x - y)).sum();
            let coeff = if d2 > 0.0 {
                -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0)
            } else {
                0.0
            };
            for d in 0..dims {
                let g = clip(coeff * (cur[d] - oth[d]));
                cur[d] += g * alpha;
                if frozen.is_none() {
                    oth[d] -= g * alpha;
                }
            }
            if frozen.is_none() {
                head.row_mut(t).copy_from_slice(&oth);
            }
            next[i] += edges.epochs_per_sample[i];

            let n_neg = ((e - next_neg[i]) / eps_neg[i]).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let k = rng.gen_range(0..n_tail);
                let other = match frozen {
                    Some(f) => f.row(k),
                    None => head.row(k),
                };
                let d2: f64 = cur.iter().zip(other).map(|(x, y)| (x - y) * (x - y)).sum();
                let coeff = if d2 > 0.0 {
                    2.0 * gamma * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0))
                } else if frozen.is_none() && k == h {
                    continue;
                } else {
                    0.0
                };
                for d in 0..dims {
                    let g = if coeff > 0.0 {
                        clip(coeff * (cur[d] - other[d]))
                    } else {
                        GRAD_CLIP
                    };
                    cur[d] += g * alpha;
                }
            }
            next_neg[i] += n_neg as f64 * eps_neg[i];
            head.row_mut(h).copy_from_slice(&cur);
        }
    }
}

/// Spectral layout per connected component, components placed apart.
fn spectral_init(
    g: &FuzzyGraph,
    labels: &[usize],
    n_components: usize,
    dims: usize,
    rng: &mut ChaCha8Rng,
) -> Matrix {
    let mut out = Matrix::zeros(g.n, dims);
    if n_components == 1 {
        let all: Vec<usize> = (0..g.n).collect();
        let layout = component_layout(g, &all, dims, rng);
        for (i, row) in layout.iter().enumerate() {
            out.row_mut(i).copy_from_slice(row);
        }
        return out;
    }
    let centres = component_centres(n_components, dims);
    let mut min_gap = f64::INFINITY;
    for p in 0..n_components {
        for q in p + 1..n_components {
            let d: f64 = centres[p]
                .iter()
                .zip(&centres[q])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            min_gap = min_gap.min(d);
        }
    }
    let radius = 0.25 * min_gap;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_components];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    for (c, nodes) in members.iter().enumerate() {
        let layout = component_layout(g, nodes, dims, rng);
        let extent = layout
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-300);
        for (&node, row) in nodes.iter().zip(&layout) {
            for (d, v) in row.iter().enumerate() {
                out.set(node, d, centres[c][d] + radius * v / extent);
            }
        }
    }
    out
}

/// Signed unit axes while they last, otherwise a circle in the first two
/// output dimensions.
fn component_centres(n: usize, dims: usize) -> Vec<Vec<f64>> {
    if n <= 2 * dims {
        return (0..n)
            .map(|c| {
                let mut v = vec![0.0; dims];
                v[c % dims] = if c < dims { 1.0 } else { -1.0 };
                v
            })
            .collect();
    }
    (0..n)
        .map(|c| {
            let t = std::f64::consts::TAU * c as f64 / n as f64;
            let mut v = vec![0.0; dims];
            v[0] = t.cos();
            if dims > 1 {
                v[1] = t.sin();
            } else {
                v[0] = 2.0 * c as f64 / (n - 1) as f64 - 1.0;
            }
            v
        })
        .collect()
}

/// Leading non-trivial eigenvectors of `(I + D^-1/2 W D^-1/2) / 2` on the
/// subgraph `nodes`, found by subspace iteration with Rayleigh–Ritz.
/// Components too small for a spectral layout get random positions.
fn component_layout(g: &FuzzyGraph, nodes: &[usize], dims: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let m = nodes.len();
    if m <= dims + 1 {
        return (0..m)
            .map(|_| (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
    }
    let mut local = std::collections::HashMap::with_capacity(m);
    for (li, &gi) in nodes.iter().enumerate() {
        local.insert(gi as u32, li);
    }
    let deg: Vec<f64> = nodes.iter().map(|&i| g.row(i).1.iter().sum()).collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let apply = |v: &[f64], out: &mut [f64]| {
        for (li, &gi) in nodes.iter().enumerate() {
            let (idx, w) = g.row(gi);
            let mut acc = 0.0;
            for (&j, &wj) in idx.iter().zip(w) {
                let lj = local[&j];
                acc += wj * inv_sqrt[lj] * v[lj];
            }
            out[li] = 0.5 * (v[li] + inv_sqrt[li] * acc);
        }
    };
    let mut trivial: Vec<f64> = deg.iter().map(|d| d.sqrt()).collect();
    let tn = crate::linalg::norm(&trivial);
    trivial.iter_mut().for_each(|v| *v /= tn);

    let k = (dims + 2).min(m - 1);
    let mut q: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    orthonormalize(&mut q, &trivial, rng);
    let mut z = vec![vec![0.0; m]; k];
    let mut prev: Vec<f64> = vec![f64::NAN; k];
    for it in 0..SPECTRAL_MAX_ITERS {
        for (qi, zi) in q.iter().zip(z.iter_mut()) {
            apply(qi, zi);
        }
        std::mem::swap(&mut q, &mut z);
        orthonormalize(&mut q, &trivial, rng);
        if it % 10 == 9 || it + 1 == SPECTRAL_MAX_ITERS {
            // Rayleigh–Ritz on the current basis
            for (qi, zi) in q.iter().zip(z.iter_mut()) {
                apply(qi, zi);
            }
            let mut h = Matrix::zeros(k, k);
            for r in 0..k {
                for c in 0..k {
                    h.set(r, c, dot(&q[r], &z[c]));
                }
            }
            for r in 0..k {
                for c in 0..r {
                    let avg = 0.5 * (h.get(r, c) + h.get(c, r));
                    h.set(r, c, avg);
                    h.set(c, r, avg);
                }
            }
            let Ok(eig) = symmetric_eigen(&h) else { break };
            let rotated: Vec<Vec<f64>> = (0..k)
                .map(|c| {
                    let mut v = vec![0.0; m];
                    for r in 0..k {
                        let coef = eig.vectors.get(r, c);
                        v.iter_mut().zip(&q[r]).for_each(|(a, b)| *a += coef * b);
                    }
                    v
                })
                .collect();
            q = rotated;
            let converged = eig.values[..dims]
                .iter()
                .zip(&prev)
                .all(|(a, b)| (a - b).abs() < 1e-9);
            prev = eig.values.clone();
            if converged {
                break;
            }
        }
    }
    (0..m)
        .map(|i| (0..dims).map(|d| q[d][i]).collect())
        .collect()
}

/// Modified Gram–Schmidt against `trivial` and each other; collapsed
/// vectors are redrawn.
fn orthonormalize(q: &mut [Vec<f64>], trivial: &[f64], rng: &mut ChaCha8Rng) {
    for i in 0..q.len() {
        for attempt in 0..4 {
            let t = dot(&q[i], trivial);
            q[i].iter_mut().zip(trivial).for_each(|(a, b)| *a -= t * b);
            for j in 0..i {
                let (head, tail) = q.split_at_mut(i);
                let c = dot(&tail[0], &head[j]);
                tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= c * b);
            }
            let n = crate::linalg::norm(&q[i]);
            if n > 1e-10 {
                q[i].iter_mut().for_each(|v| *v /= n);
                break;
            }
            if attempt == 3 {
                log::debug!("spectral basis vector {i} collapsed repeatedly");
            }
            q[i].iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
    }
}

/// Scales the initial layout to a fixed extent, adds a little jitter so no
/// two points coincide, then rescales every axis to `[0, 10]`.
fn finish_init(e: &mut Matrix, rng: &mut ChaCha8Rng) {
    let max = e.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { INIT_EXTENT / max } else { 1.0 };
    for v in e.data_mut() {
        *v = *v * scale + rng.gen_range(-1e-4..1e-4);
    }
    let dims = e.cols();
    for d in 0..dims {
        let col = e.column(d);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if span > 0.0 {
            for r in 0..e.rows() {
                let v = e.get(r, d);
                e.set(r, d, INIT_EXTENT * (v - lo) / span);
            }
        }
    }
}
