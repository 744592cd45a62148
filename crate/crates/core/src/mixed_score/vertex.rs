//! Vertex hunting: k-means compression of the point cloud followed by the
//! successive projection algorithm on the cluster centres.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use super::{PointCloud, SimplexVertices};
use crate::error::{Error, Result};
use crate::rng::{substream, StreamRng};

const DUPLICATE_TOL: f64 = 1e-10;
const DEGENERACY_TOL: f64 = 1e-8;
const MAX_LLOYD_ITERS: usize = 100;

#[derive(Debug, Clone, Copy)]
pub struct VertexHuntConfig {
    pub restarts: usize,
    pub seed: u64,
}

impl Default for VertexHuntConfig {
    fn default() -> Self {
        Self {
            restarts: 20,
            seed: 0,
        }
    }
}

/// Number of local centres used for a cloud of `d` points and `k` vertices.
pub fn center_count(d: usize, k: usize) -> usize {
    let target = (k as f64 * (d.max(1) as f64).ln()).ceil() as usize;
    target.max(k).min(d)
}

pub fn vertex_hunt(
    cloud: &PointCloud,
    k: usize,
    cfg: &VertexHuntConfig,
) -> Result<SimplexVertices> {
    if k < 2 {
        return Err(Error::KTooSmall);
    }
    let r = &cloud.r;
    let d = r.nrows();
    if d < k {
        return Err(Error::DegenerateCloud(format!(
            "{d} points for {k} vertices"
        )));
    }
    let n_centers = center_count(d, k);
    let centers = match distinct_rows(r, n_centers) {
        Some(rows) => rows,
        None => kmeans(r, n_centers, cfg),
    };
    if centers.nrows() < k {
        return Err(Error::DegenerateCloud(format!(
            "only {} distinct points for {k} vertices",
            centers.nrows()
        )));
    }
    let picked = successive_projection(&centers, k)?;
    let mut rows: Vec<Vec<f64>> = picked
        .iter()
        .map(|&i| centers.row(i).iter().copied().collect())
        .collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let v = DMatrix::from_fn(k, k - 1, |i, j| rows[i][j]);
    check_affine_independence(&v)?;
    Ok(SimplexVertices { v })
}

fn check_affine_independence(v: &DMatrix<f64>) -> Result<()> {
    let k = v.nrows();
    let edges = DMatrix::from_fn(k - 1, k - 1, |i, j| v[(i + 1, j)] - v[(0, j)]);
    let gram = edges.transpose() * &edges;
    let (values, _) = crate::spectral::symmetric_eigen(&gram)?;
    let smallest = values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
        .sqrt();
    if !(smallest > DEGENERACY_TOL) {
        return Err(Error::DegenerateCloud(format!(
            "vertex edges have smallest singular value {smallest:e}"
        )));
    }
    Ok(())
}

/// The distinct rows of `r` in order of first appearance, or `None` once
/// more than `limit` are found.
fn distinct_rows(r: &DMatrix<f64>, limit: usize) -> Option<DMatrix<f64>> {
    let scale = r.amax().max(1.0);
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..r.nrows() {
        let dup = kept
            .iter()
            .any(|&j| (r.row(i) - r.row(j)).amax() <= DUPLICATE_TOL * scale);
        if !dup {
            kept.push(i);
            if kept.len() > limit {
                return None;
            }
        }
    }
    Some(r.select_rows(kept.iter()))
}

/// Greedy vertex selection on the lifted rows `[1, c_i]`: take the row of
/// largest norm, project it out of all rows, repeat.
pub fn successive_projection(centers: &DMatrix<f64>, k: usize) -> Result<Vec<usize>> {
    let n = centers.nrows();
    let m = centers.ncols();
    let mut y = DMatrix::from_fn(
        n,
        m + 1,
        |i, j| if j == 0 { 1.0 } else { centers[(i, j - 1)] },
    );
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best = 0usize;
        let mut best_norm = -1.0;
        for i in 0..n {
            let nrm = y.row(i).norm_squared();
            if nrm > best_norm {
                best = i;
                best_norm = nrm;
            }
        }
        if best_norm <= 1e-24 {
            return Err(Error::DegenerateCloud(
                "projection residual vanished".into(),
            ));
        }
        let u: DVector<f64> = y.row(best).transpose() / best_norm.sqrt();
        let proj = &y * &u;
        y -= proj * u.transpose();
        picked.push(best);
    }
    Ok(picked)
}

struct Clustering {
    centers: DMatrix<f64>,
    inertia: f64,
}

/// Lloyd iterations from `restarts` k-means++ seedings; lowest inertia wins,
/// earliest restart on ties.
fn kmeans(r: &DMatrix<f64>, k: usize, cfg: &VertexHuntConfig) -> DMatrix<f64> {
    let runs: Vec<Clustering> = (0..cfg.restarts.max(1) as u64)
        .into_par_iter()
        .map(|s| lloyd(r, plus_plus_init(r, k, &mut substream(cfg.seed, s))))
        .collect();
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.inertia < runs[best].inertia {
            best = i;
        }
    }
    runs.into_iter()
        .nth(best)
        .expect("at least one restart")
        .centers
}

fn sq_dist(r: &DMatrix<f64>, i: usize, c: &DMatrix<f64>, j: usize) -> f64 {
    (0..r.ncols())
        .map(|t| (r[(i, t)] - c[(j, t)]).powi(2))
        .sum()
}

fn plus_plus_init(r: &DMatrix<f64>, k: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    let n = r.nrows();
    let mut centers = DMatrix::zeros(k, r.ncols());
    let first = rng.random_range(0..n);
    centers.set_row(0, &r.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(r, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.set_row(c, &r.row(pick));
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sq_dist(r, i, &centers, c));
        }
    }
    centers
}

fn lloyd(r: &DMatrix<f64>, mut centers: DMatrix<f64>) -> Clustering {
    let n = r.nrows();
    let k = centers.nrows();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (i, slot) in assign.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(r, i, &centers, c);
                if dist < best_d {
                    best = c;
                    best_d = dist;
                }
            }
            if *slot != best {
                *slot = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = DMatrix::<f64>::zeros(k, r.ncols());
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += r.row(i);
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mean = sums.row(c) / count as f64;
                centers.set_row(c, &mean);
            }
        }
    }
    let inertia = assign
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(r, i, &centers, c))
        .sum();
    Clustering { centers, inertia }
}
