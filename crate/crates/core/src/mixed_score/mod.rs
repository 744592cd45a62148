//! Mixed-SCORE: entrywise eigenvector ratios, simplex vertex hunting and
//! recovery of memberships, connectivity and degrees from a rank-K basis.

mod vertex;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

pub use vertex::{center_count, successive_projection, vertex_hunt, VertexHuntConfig};

use crate::error::{Error, Result, StageExt};
use crate::model::{DcmmParams, ProbabilityMatrix};
use crate::spectral::{
    fix_signs, magnitude_order, symmetric_eigen, top_eigenpairs, EigenPairs, OrthonormalBasis,
};

const RATIO_FLOOR: f64 = 1e-12;
const THETA_FLOOR: f64 = 1e-12;
const CLAMP_REPORT_TOL: f64 = 1e-6;

/// Rows `r_i = (ξ₂(i), …, ξ_K(i)) / ξ₁(i)`, truncated to `[-t, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub r: DMatrix<f64>,
    pub t: f64,
}

/// `K x (K-1)` matrix whose rows are the simplex vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVertices {
    pub v: DMatrix<f64>,
}

/// Counts of values pushed back into the model's domain.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub ratio_truncations: usize,
    pub membership_clamps: usize,
    pub connectivity_clamps: usize,
    pub theta_floors: usize,
    pub probability_clamps: usize,
    pub radicand_floors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcmmEstimate {
    pub params: DcmmParams,
    pub b1: DVector<f64>,
    pub eigen: EigenPairs,
    pub vertices: Option<SimplexVertices>,
    pub h_hat: ProbabilityMatrix,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    pub k: usize,
    /// Ratio truncation; `ln d` when absent.
    pub threshold: Option<f64>,
    pub vertex: VertexHuntConfig,
    /// Floor for the `b₁` radicand; `None` turns a non-positive radicand
    /// into an error.
    pub radicand_floor: Option<f64>,
}

impl PipelineOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            threshold: None,
            vertex: VertexHuntConfig { restarts: 20, seed },
            radicand_floor: None,
        }
    }
}

fn majority_positive(basis: &mut DMatrix<f64>) {
    let d = basis.nrows();
    let positive = basis.column(0).iter().filter(|v| **v > 0.0).count();
    if 2 * positive < d {
        basis.column_mut(0).neg_mut();
    }
}

pub fn point_cloud(eig: &EigenPairs, t: f64) -> Result<PointCloud> {
    let k = eig.basis.rank();
    if k < 2 {
        return Err(Error::KTooSmall);
    }
    let mut xi = eig.basis.matrix().clone();
    majority_positive(&mut xi);
    let d = xi.nrows();
    let mut r = DMatrix::zeros(d, k - 1);
    for i in 0..d {
        let lead = xi[(i, 0)];
        if lead.abs() < RATIO_FLOOR {
            continue;
        }
        for j in 1..k {
            r[(i, j - 1)] = (xi[(i, j)] / lead).clamp(-t, t);
        }
    }
    Ok(PointCloud { r, t })
}

fn barycentric_system(
    verts: &SimplexVertices,
) -> Result<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let k = verts.v.nrows();
    let a = DMatrix::from_fn(k, k, |i, j| if i + 1 == k { 1.0 } else { verts.v[(j, i)] });
    let lu = a.lu();
    if !lu.is_invertible() {
        return Err(Error::DegenerateSimplex);
    }
    Ok(lu)
}

/// Barycentric coordinates of each cloud row, negatives clamped and rows
/// renormalised. Returns the weights and the number of clamped entries.
pub fn memberships(cloud: &PointCloud, verts: &SimplexVertices) -> Result<(DMatrix<f64>, usize)> {
    let k = verts.v.nrows();
    let d = cloud.r.nrows();
    if cloud.r.ncols() + 1 != k {
        return Err(Error::DimensionMismatch {
            expected: format!("{} cloud columns", k - 1),
            found: cloud.r.ncols().to_string(),
        });
    }
    let lu = barycentric_system(verts)?;
    let rhs = DMatrix::from_fn(k, d, |i, j| if i + 1 == k { 1.0 } else { cloud.r[(j, i)] });
    let sol = lu.solve(&rhs).ok_or(Error::DegenerateSimplex)?;
    let mut w = sol.transpose();
    let mut clamps = 0;
    for mut row in w.row_iter_mut() {
        for v in row.iter_mut() {
            if *v < 0.0 {
                if *v < -CLAMP_REPORT_TOL {
                    clamps += 1;
                }
                *v = 0.0;
            }
        }
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        } else {
            row.fill(1.0 / k as f64);
        }
    }
    Ok((w, clamps))
}

/// `b₁(k) = (λ₁ + v_kᵀ diag(λ₂..λ_K) v_k)^{-1/2}`.
pub fn estimate_b1(lambda: &EigenPairs, verts: &SimplexVertices) -> Result<DVector<f64>> {
    let k = verts.v.nrows();
    let mut b1 = DVector::zeros(k);
    for (idx, row) in verts.v.row_iter().enumerate() {
        let quad: f64 = row
            .iter()
            .enumerate()
            .map(|(j, v)| lambda.values[j + 1] * v * v)
            .sum();
        let radicand = lambda.values[0] + quad;
        if !(radicand > 0.0) {
            return Err(Error::NegativeRadicand {
                vertex: idx,
                value: radicand,
            });
        }
        b1[idx] = radicand.powf(-0.5);
    }
    Ok(b1)
}

/// [`estimate_b1`] with radicands raised to at least `floor`; also returns
/// how many were raised.
pub fn estimate_b1_floored(
    lambda: &EigenPairs,
    verts: &SimplexVertices,
    floor: f64,
) -> (DVector<f64>, usize) {
    let mut floors = 0;
    let b1 = DVector::from_iterator(
        verts.v.nrows(),
        verts.v.row_iter().map(|row| {
            let quad: f64 = row
                .iter()
                .enumerate()
                .map(|(j, v)| lambda.values[j + 1] * v * v)
                .sum();
            let radicand = lambda.values[0] + quad;
            if !(radicand >= floor) {
                floors += 1;
            }
            radicand.max(floor).powf(-0.5)
        }),
    );
    (b1, floors)
}

/// `P = B Λ Bᵀ` with `B = diag(b₁)[1, V]`, symmetrised and clamped to
/// `[0, 1]`. Returns the matrix and the number of entries clamped by more
/// than the reporting tolerance.
pub fn estimate_connectivity(
    lambda: &EigenPairs,
    b1: &DVector<f64>,
    verts: &SimplexVertices,
) -> (DMatrix<f64>, usize) {
    let k = b1.len();
    let b = DMatrix::from_fn(k, k, |i, j| {
        b1[i] * if j == 0 { 1.0 } else { verts.v[(i, j - 1)] }
    });
    let lam = DMatrix::from_diagonal(&lambda.values.rows(0, k).into_owned());
    let p = &b * lam * b.transpose();
    let mut p = (&p + p.transpose()) * 0.5;
    let clamps = clamp_unit(&mut p);
    (p, clamps)
}

fn clamp_unit(m: &mut DMatrix<f64>) -> usize {
    let mut clamps = 0;
    for v in m.iter_mut() {
        let c = v.clamp(0.0, 1.0);
        if (c - *v).abs() > CLAMP_REPORT_TOL {
            clamps += 1;
        }
        *v = c;
    }
    clamps
}

/// `θ_i = ξ₁(i) / (π_iᵀ b₁)`, floored at a small positive value. Returns the
/// degrees and the number of floored entries.
pub fn estimate_theta(
    eig: &EigenPairs,
    pi_hat: &DMatrix<f64>,
    b1: &DVector<f64>,
) -> Result<(DVector<f64>, usize)> {
    let xi1 = eig.basis.matrix().column(0);
    let denom = pi_hat * b1;
    let mut floors = 0;
    let mut theta = DVector::zeros(xi1.len());
    for i in 0..xi1.len() {
        if !(denom[i] > 1e-12) {
            return Err(Error::DegenerateDenominator { node: i });
        }
        let t = xi1[i] / denom[i];
        theta[i] = if t < THETA_FLOOR {
            floors += 1;
            THETA_FLOOR
        } else {
            t
        };
    }
    Ok((theta, floors))
}

/// Rotate `basis` onto the eigenvectors of its compression `ΞᵀXΞ`; the
/// returned values are the Ritz values ordered by magnitude.
fn ritz_pairs(x: &DMatrix<f64>, basis: &OrthonormalBasis) -> Result<EigenPairs> {
    let xi = basis.matrix();
    let small = xi.transpose() * x * xi;
    let small = (&small + small.transpose()) * 0.5;
    let (values, vectors) = symmetric_eigen(&small)?;
    let order = magnitude_order(values.as_slice());
    let k = basis.rank();
    let mut w = DMatrix::zeros(k, k);
    let mut vals = DVector::zeros(k);
    for (j, &src) in order.iter().enumerate() {
        w.set_column(j, &vectors.column(src));
        vals[j] = values[src];
    }
    let mut rotated = xi * w;
    fix_signs(&mut rotated);
    majority_positive(&mut rotated);
    Ok(EigenPairs {
        values: vals,
        basis: OrthonormalBasis::new_unchecked(rotated),
    })
}

fn reconstruct(theta: &DVector<f64>, pi: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let mut weighted = pi.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= theta[i];
    }
    let h = &weighted * p * weighted.transpose();
    (&h + h.transpose()) * 0.5
}

/// Estimate `(Θ, Π, P)` and `Ĥ` from `x` using either its own leading
/// eigenvectors or a supplied rank-`k` basis.
pub fn full_pipeline(
    x: &DMatrix<f64>,
    basis: Option<&OrthonormalBasis>,
    opts: &PipelineOptions,
) -> Result<DcmmEstimate> {
    let d = x.nrows();
    let k = opts.k;
    let owned;
    let basis = match basis {
        Some(b) => {
            if b.dim() != d || b.rank() != k {
                return Err(Error::DimensionMismatch {
                    expected: format!("{d}x{k} basis"),
                    found: format!("{}x{}", b.dim(), b.rank()),
                });
            }
            b
        }
        None => {
            owned = top_eigenpairs(x, k).stage("eigendecomposition")?.basis;
            &owned
        }
    };
    let eig = ritz_pairs(x, basis).stage("ritz rotation")?;
    let mut diagnostics = Diagnostics::default();

    if k == 1 {
        let mut lam = eig.values[0];
        if let Some(floor) = opts.radicand_floor.filter(|f| !(lam >= *f)) {
            lam = floor;
            diagnostics.radicand_floors = 1;
        }
        if !(lam > 0.0) {
            return Err(Error::NegativeRadicand {
                vertex: 0,
                value: lam,
            })
            .stage("b1");
        }
        let b1 = DVector::from_element(1, lam.powf(-0.5));
        let pi = DMatrix::from_element(d, 1, 1.0);
        let (p, clamps) = {
            let mut p = DMatrix::from_element(1, 1, b1[0] * b1[0] * lam);
            let c = clamp_unit(&mut p);
            (p, c)
        };
        diagnostics.connectivity_clamps = clamps;
        let (theta, floors) = estimate_theta(&eig, &pi, &b1).stage("theta")?;
        diagnostics.theta_floors = floors;
        let mut h = reconstruct(&theta, &pi, &p);
        diagnostics.probability_clamps = clamp_unit(&mut h);
        let params = DcmmParams {
            theta,
            pi,
            p_mat: p,
        };
        return Ok(DcmmEstimate {
            params,
            b1,
            eigen: eig,
            vertices: None,
            h_hat: ProbabilityMatrix::new(h).stage("reconstruction")?,
            diagnostics,
        });
    }

    let t = opts.threshold.unwrap_or_else(|| (d as f64).ln());
    let cloud = point_cloud(&eig, t).stage("point cloud")?;
    diagnostics.ratio_truncations = cloud.r.iter().filter(|v| v.abs() >= t).count();
    let verts = vertex_hunt(&cloud, k, &opts.vertex).stage("vertex hunting")?;
    let (weights, clamps) = memberships(&cloud, &verts).stage("memberships")?;
    diagnostics.membership_clamps = clamps;
    let b1 = match opts.radicand_floor {
        Some(floor) => {
            let (b1, floors) = estimate_b1_floored(&eig, &verts, floor);
            diagnostics.radicand_floors = floors;
            b1
        }
        None => estimate_b1(&eig, &verts).stage("b1")?,
    };

    let mut pi = weights;
    for mut row in pi.row_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v /= b1[j];
        }
        let s = row.sum();
        row /= s;
    }

    let (p, clamps) = estimate_connectivity(&eig, &b1, &verts);
    diagnostics.connectivity_clamps = clamps;
    let (theta, floors) = estimate_theta(&eig, &pi, &b1).stage("theta")?;
    diagnostics.theta_floors = floors;
    let mut h = reconstruct(&theta, &pi, &p);
    diagnostics.probability_clamps = clamp_unit(&mut h);
    Ok(DcmmEstimate {
        params: DcmmParams {
            theta,
            pi,
            p_mat: p,
        },
        b1,
        eigen: eig,
        vertices: Some(verts),
        h_hat: ProbabilityMatrix::new(h).stage("reconstruction")?,
        diagnostics,
    })
}

/// Rewrite planted parameters under the unit-diagonal connectivity
/// convention the estimator targets, leaving `H` unchanged.
pub fn canonicalize(params: &DcmmParams) -> DcmmParams {
    let k = params.communities();
    let scale: Vec<f64> = (0..k).map(|c| params.p_mat[(c, c)].sqrt()).collect();
    let p_mat = DMatrix::from_fn(k, k, |a, b| params.p_mat[(a, b)] / (scale[a] * scale[b]));
    let mut pi = params.pi.clone();
    let mut theta = params.theta.clone();
    for (i, mut row) in pi.row_iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v *= scale[c];
        }
        let s = row.sum();
        row /= s;
        theta[i] *= s;
    }
    DcmmParams { theta, pi, p_mat }
}
