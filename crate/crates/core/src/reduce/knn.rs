//! k-nearest-neighbour search: exact brute force for small inputs, neighbour
//! descent with an exactness audit for large ones.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Validation(format!(
                "unknown metric {other:?} (expected euclidean or cosine)"
            ))),
        }
    }
}

/// Distance oracle over the rows of one or two matrices, with cached norms
/// for the cosine metric.
pub(crate) struct Space<'a> {
    pub data: &'a Matrix,
    pub norms: Vec<f64>,
    pub metric: Metric,
}

impl<'a> Space<'a> {
    pub fn new(data: &'a Matrix, metric: Metric) -> Self {
        let norms = match metric {
            Metric::Cosine => data.iter_rows().map(crate::linalg::norm).collect(),
            Metric::Euclidean => Vec::new(),
        };
        Self {
            data,
            norms,
            metric,
        }
    }

    #[inline]
    pub fn dist_to(&self, q: &[f64], q_norm: f64, j: usize) -> f64 {
        let r = self.data.row(j);
        match self.metric {
            Metric::Euclidean => q
                .iter()
                .zip(r)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => cosine_distance(dot(q, r), q_norm, self.norms[j]),
        }
    }

    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        let n = self.norms.get(i).copied().unwrap_or(0.0);
        self.dist_to(self.data.row(i), n, j)
    }
}

/// `1 - cos`, clamped to `[0, 2]`; a zero vector is at distance 1 from
/// everything.
#[inline]
pub fn cosine_distance(dot: f64, na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - (dot / (na * nb)).clamp(-1.0, 1.0)).max(0.0)
}

pub fn distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        Metric::Cosine => cosine_distance(dot(a, b), crate::linalg::norm(a), crate::linalg::norm(b)),
    }
}

/// Neighbour lists sorted by ascending distance, ties broken by index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnGraph {
    pub k: usize,
    pub indices: Vec<Vec<u32>>,
    pub distances: Vec<Vec<f64>>,
    pub method: KnnMethod,
    /// Mean recall of the audited rows (approximate search only).
    pub audit_recall: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnMethod {
    Exact,
    NnDescent,
}

#[derive(Clone, Copy, Debug)]
pub struct KnnParams {
    pub k: usize,
    pub metric: Metric,
    /// Inputs with at least this many rows use neighbour descent.
    pub exact_max: usize,
    pub seed: u64,
}

pub const EXACT_KNN_MAX: usize = 20_000;
pub const AUDIT_FRACTION: f64 = 0.01;
pub const MIN_AUDIT_RECALL: f64 = 0.9;
const DESCENT_MAX_ITERS: usize = 15;
const DESCENT_DELTA: f64 = 0.001;

#[inline]
fn better(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Keeps the `k` best `(distance, index)` pairs, sorted.
fn insert_sorted(list: &mut Vec<(f64, u32)>, k: usize, cand: (f64, u32)) -> bool {
    if list.len() == k && !better(cand, *list.last().expect("k > 0")) {
        return false;
    }
    if list.iter().any(|&(_, j)| j == cand.1) {
        return false;
    }
    let at = list.partition_point(|&e| better(e, cand));
    list.insert(at, cand);
    list.truncate(k);
    true
}

fn exact_row(space: &Space, q: &[f64], q_norm: f64, k: usize, skip: Option<usize>) -> Vec<(f64, u32)> {
    let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
    for j in 0..space.data.rows() {
        if Some(j) == skip {
            continue;
        }
        insert_sorted(&mut best, k, (space.dist_to(q, q_norm, j), j as u32));
    }
    best
}

fn split(rows: Vec<Vec<(f64, u32)>>, k: usize, method: KnnMethod, audit: Option<f64>) -> KnnGraph {
    let (indices, distances) = rows
        .into_iter()
        .map(|r| r.into_iter().map(|(d, j)| (j, d)).unzip())
        .unzip();
    KnnGraph {
        k,
        indices,
        distances,
        method,
        audit_recall: audit,
    }
}

/// Neighbours of every row of `x` among the other rows of `x`.
/// One row after a descent round: candidates, new flags, update count.
type DescentRow = (Vec<(f64, u32)>, Vec<bool>, usize);

pub fn knn_self(x: &Matrix, p: &KnnParams) -> Result<KnnGraph> {
    let n = x.rows();
    if p.k == 0 || n <= p.k {
        return Err(Error::Validation(format!(
            "need more than k = {} points for a kNN graph, got {n}",
            p.k
        )));
    }
    let space = Space::new(x, p.metric);
    if n < p.exact_max {
        return Ok(split(exact_self(&space, p.k), p.k, KnnMethod::Exact, None));
    }
    let approx = nn_descent(&space, p.k, p.seed);
    let recall = audit(&space, &approx, p.k, p.seed);
    if recall < MIN_AUDIT_RECALL {
        log::warn!(
            "neighbour descent audit recall {recall:.3} below {MIN_AUDIT_RECALL}; \
             falling back to exact search"
        );
        return Ok(split(exact_self(&space, p.k), p.k, KnnMethod::Exact, Some(recall)));
    }
    log::info!("neighbour descent audit recall {recall:.4}");
    Ok(split(approx, p.k, KnnMethod::NnDescent, Some(recall)))
}

fn exact_self(space: &Space, k: usize) -> Vec<Vec<(f64, u32)>> {
    (0..space.data.rows())
        .into_par_iter()
        .map(|i| {
            let n = space.norms.get(i).copied().unwrap_or(0.0);
            exact_row(space, space.data.row(i), n, k, Some(i))
        })
        .collect()
}

/// Neighbours of each row of `queries` among the rows of `base` (exact).
pub fn knn_query(base: &Matrix, queries: &Matrix, k: usize, metric: Metric) -> Result<KnnGraph> {
    if queries.cols() != base.cols() {
        return Err(Error::Shape(format!(
            "query width {} does not match index width {}",
            queries.cols(),
            base.cols()
        )));
    }
    let k = k.min(base.rows());
    let space = Space::new(base, metric);
    let rows = (0..queries.rows())
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            let qn = crate::linalg::norm(q);
            exact_row(&space, q, qn, k, None)
        })
        .collect();
    Ok(split(rows, k, KnnMethod::Exact, None))
}

#[derive(PartialEq)]
struct Near(f64, u32);

impl Eq for Near {}

impl PartialOrd for Near {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Near {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Approximate neighbours of each query among the rows of `base`, by beam
/// search over `base`'s own kNN lists from seeded entry points.
pub fn knn_query_graph(
    base: &Matrix,
    base_graph: &[Vec<u32>],
    queries: &Matrix,
    k: usize,
    metric: Metric,
    seed: u64,
) -> Result<KnnGraph> {
    use std::cmp::Reverse;
    use std::collections::{BinaryHeap, HashSet};

    if queries.cols() != base.cols() {
        return Err(Error::Shape(format!(
            "query width {} does not match index width {}",
            queries.cols(),
            base.cols()
        )));
    }
    let n = base.rows();
    let k = k.min(n);
    let ef = (4 * k).max(32).min(n);
    let space = Space::new(base, metric);
    let rows = (0..queries.rows())
        .into_par_iter()
        .map(|qi| {
            let q = queries.row(qi);
            let qn = crate::linalg::norm(q);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (qi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut visited = HashSet::with_capacity(ef * 16);
            let mut frontier = BinaryHeap::new();
            let mut best: BinaryHeap<Near> = BinaryHeap::new();
            for _ in 0..ef.min(16) {
                let j = rng.gen_range(0..n) as u32;
                if visited.insert(j) {
                    let d = space.dist_to(q, qn, j as usize);
                    frontier.push(Reverse(Near(d, j)));
                    best.push(Near(d, j));
                }
            }
            while best.len() > ef {
                best.pop();
            }
            while let Some(Reverse(Near(d, j))) = frontier.pop() {
                if best.len() >= ef && d > best.peek().map_or(f64::INFINITY, |b| b.0) {
                    break;
                }
                for &m in &base_graph[j as usize] {
                    if !visited.insert(m) {
                        continue;
                    }
                    let dm = space.dist_to(q, qn, m as usize);
                    if best.len() < ef || dm < best.peek().map_or(f64::INFINITY, |b| b.0) {
                        frontier.push(Reverse(Near(dm, m)));
                        best.push(Near(dm, m));
                        if best.len() > ef {
                            best.pop();
                        }
                    }
                }
            }
            let mut out: Vec<(f64, u32)> = best.into_iter().map(|Near(d, j)| (d, j)).collect();
            out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            out.truncate(k);
            out
        })
        .collect();
    Ok(split(rows, k, KnnMethod::NnDescent, None))
}

/// Neighbour descent: starting from random lists, repeatedly look at
/// neighbours of neighbours (forward and reverse) until few lists change.
/// Each round reads the previous round's lists only, so the result does not
/// depend on the thread count.
fn nn_descent(space: &Space, k: usize, seed: u64) -> Vec<Vec<(f64, u32)>> {
    let n = space.data.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lists: Vec<Vec<(f64, u32)>> = (0..n)
        .map(|i| {
            let mut l = Vec::with_capacity(k + 1);
            while l.len() < k {
                let j = rng.gen_range(0..n);
                if j != i {
                    insert_sorted(&mut l, k, (space.dist(i, j), j as u32));
                }
            }
            l
        })
        .collect();
    let mut is_new: Vec<Vec<bool>> = vec![vec![true; k]; n];

    for iter in 0..DESCENT_MAX_ITERS {
        let mut reverse: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (i, l) in lists.iter().enumerate() {
            for &(_, j) in l {
                if reverse[j as usize].len() < k {
                    reverse[j as usize].push(i as u32);
                }
            }
        }
        let updated: Vec<DescentRow> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut l = lists[i].clone();
                let old_ids: Vec<u32> = l.iter().map(|&(_, j)| j).collect();
                let q = space.data.row(i);
                let qn = space.norms.get(i).copied().unwrap_or(0.0);
                let mut seen = std::collections::HashSet::with_capacity(4 * k * k);
                let hops = lists[i]
                    .iter()
                    .enumerate()
                    .map(|(slot, &(_, j))| (j, is_new[i][slot]))
                    .chain(reverse[i].iter().map(|&j| (j, true)));
                for (j, j_new) in hops {
                    let ju = j as usize;
                    let second = lists[ju]
                        .iter()
                        .enumerate()
                        .map(|(slot, &(_, m))| (m, is_new[ju][slot]))
                        .chain(reverse[ju].iter().map(|&m| (m, true)));
                    for (m, m_new) in second {
                        if !(j_new || m_new) || m as usize == i || !seen.insert(m) {
                            continue;
                        }
                        insert_sorted(&mut l, k, (space.dist_to(q, qn, m as usize), m));
                    }
                }
                let flags: Vec<bool> = l.iter().map(|&(_, j)| !old_ids.contains(&j)).collect();
                let changes = flags.iter().filter(|&&f| f).count();
                (l, flags, changes)
            })
            .collect();
        let mut changes = 0;
        for (i, (l, flags, c)) in updated.into_iter().enumerate() {
            lists[i] = l;
            is_new[i] = flags;
            changes += c;
        }
        log::debug!("neighbour descent round {iter}: {changes} updates");
        if (changes as f64) < DESCENT_DELTA * (n * k) as f64 {
            break;
        }
    }
    lists
}

/// Mean recall of `approx` against exact search on a seeded 1% sample.
fn audit(space: &Space, approx: &[Vec<(f64, u32)>], k: usize, seed: u64) -> f64 {
    let n = approx.len();
    let m = ((n as f64 * AUDIT_FRACTION).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA0D1);
    let rows = sample_indices(&mut rng, n, m).into_vec();
    let hits: usize = rows
        .par_iter()
        .map(|&i| {
            let qn = space.norms.get(i).copied().unwrap_or(0.0);
            let exact = exact_row(space, space.data.row(i), qn, k, Some(i));
            // count by distance so that ties at the boundary are not misses
            let kth = exact.last().map_or(0.0, |e| e.0);
            approx[i].iter().filter(|&&(d, _)| d <= kth).count()
        })
        .sum();
    hits as f64 / (m * k) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn exact_on_a_line() {
        let x = Matrix::new(5, 1, vec![0.0, 1.0, 3.0, 6.0, 10.0]).unwrap();
        let p = KnnParams {
            k: 2,
            metric: Metric::Euclidean,
            exact_max: EXACT_KNN_MAX,
            seed: 0,
        };
        let g = knn_self(&x, &p).unwrap();
        assert_eq!(g.indices[0], vec![1, 2]);
        assert_eq!(g.distances[2], vec![2.0, 3.0]);
        assert_eq!(g.indices[4], vec![3, 2]);
        assert!(knn_self(&x.slice_rows(0..2), &p).is_err());
    }

    #[test]
    fn cosine_zero_vector_distance_one() {
        assert_eq!(cosine_distance(0.0, 0.0, 1.0), 1.0);
        assert!(distance(&[1.0, 2.0], &[2.0, 4.0], Metric::Cosine) < 1e-15);
        assert!((distance(&[1.0, 0.0], &[-1.0, 0.0], Metric::Cosine) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn descent_agrees_with_exact() {
        let x = random(1500, 8, 3);
        let exact = knn_self(
            &x,
            &KnnParams {
                k: 10,
                metric: Metric::Euclidean,
                exact_max: EXACT_KNN_MAX,
                seed: 1,
            },
        )
        .unwrap();
        let approx = knn_self(
            &x,
            &KnnParams {
                k: 10,
                metric: Metric::Euclidean,
                exact_max: 100,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(approx.method, KnnMethod::NnDescent);
        let mut hits = 0;
        for (a, e) in approx.indices.iter().zip(&exact.indices) {
            hits += a.iter().filter(|j| e.contains(j)).count();
        }
        let recall = hits as f64 / (1500.0 * 10.0);
        assert!(recall > 0.9, "recall {recall}");
        assert!(approx.audit_recall.unwrap() >= MIN_AUDIT_RECALL);

        let queries = random(100, 8, 5);
        let exact_q = knn_query(&x, &queries, 10, Metric::Euclidean).unwrap();
        let beam = knn_query_graph(&x, &exact.indices, &queries, 10, Metric::Euclidean, 2).unwrap();
        let mut hits = 0;
        for (a, e) in beam.indices.iter().zip(&exact_q.indices) {
            hits += a.iter().filter(|j| e.contains(j)).count();
        }
        assert!(hits as f64 / 1000.0 > 0.9, "beam recall {}", hits as f64 / 1000.0);
    }
}
