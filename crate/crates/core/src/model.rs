//! DCMM parameters, probability matrices and adjacency sampling.

use std::fmt;
use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::substream;

const SYM_TOL: f64 = 1e-12;

/// Degree vector, membership rows and community connectivity of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct DcmmParams {
    pub theta: DVector<f64>,
    pub pi: DMatrix<f64>,
    pub p_mat: DMatrix<f64>,
}

impl DcmmParams {
    pub fn new(theta: DVector<f64>, pi: DMatrix<f64>, p_mat: DMatrix<f64>) -> Result<Self> {
        let params = Self { theta, pi, p_mat };
        let hard: Vec<String> = validate_params(&params)
            .into_iter()
            .filter(|v| !matches!(v, Violation::NoPureNode { .. }))
            .map(|v| v.to_string())
            .collect();
        if hard.is_empty() {
            Ok(params)
        } else {
            Err(Error::ParamInvariantViolated(hard.join("; ")))
        }
    }

    pub fn nodes(&self) -> usize {
        self.theta.len()
    }

    pub fn communities(&self) -> usize {
        self.p_mat.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape(String),
    NonPositiveTheta { node: usize, value: f64 },
    NegativeMembership { node: usize, community: usize },
    RowSum { node: usize, sum: f64 },
    AsymmetricConnectivity { max_asymmetry: f64 },
    NegativeConnectivity { row: usize, col: usize },
    NoPureNode { community: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(msg) => write!(f, "shape: {msg}"),
            Violation::NonPositiveTheta { node, value } => {
                write!(f, "theta[{node}] = {value} is not positive")
            }
            Violation::NegativeMembership { node, community } => {
                write!(f, "pi[{node},{community}] is negative")
            }
            Violation::RowSum { node, sum } => {
                write!(f, "membership row {node} sums to {sum}, not 1")
            }
            Violation::AsymmetricConnectivity { max_asymmetry } => {
                write!(f, "connectivity matrix asymmetric by {max_asymmetry:e}")
            }
            Violation::NegativeConnectivity { row, col } => {
                write!(f, "connectivity[{row},{col}] is negative")
            }
            Violation::NoPureNode { community } => {
                write!(f, "community {community} has no pure node")
            }
        }
    }
}

/// Every violated invariant of `params`; an empty list means valid.
/// A missing pure node is reported but is not fatal for [`DcmmParams::new`].
pub fn validate_params(params: &DcmmParams) -> Vec<Violation> {
    let mut out = Vec::new();
    let d = params.theta.len();
    let k = params.p_mat.nrows();
    if params.p_mat.ncols() != k {
        out.push(Violation::Shape(format!(
            "connectivity is {}x{}",
            params.p_mat.nrows(),
            params.p_mat.ncols()
        )));
        return out;
    }
    if params.pi.nrows() != d || params.pi.ncols() != k {
        out.push(Violation::Shape(format!(
            "membership is {}x{}, expected {d}x{k}",
            params.pi.nrows(),
            params.pi.ncols()
        )));
        return out;
    }
    for (i, &t) in params.theta.iter().enumerate() {
        if !(t > 0.0) {
            out.push(Violation::NonPositiveTheta { node: i, value: t });
        }
    }
    for i in 0..d {
        let row = params.pi.row(i);
        for (c, &v) in row.iter().enumerate() {
            if v < 0.0 {
                out.push(Violation::NegativeMembership {
                    node: i,
                    community: c,
                });
            }
        }
        let sum = row.sum();
        if (sum - 1.0).abs() > SYM_TOL {
            out.push(Violation::RowSum { node: i, sum });
        }
    }
    let asym = max_asymmetry(&params.p_mat);
    if asym > SYM_TOL {
        out.push(Violation::AsymmetricConnectivity {
            max_asymmetry: asym,
        });
    }
    for r in 0..k {
        for c in 0..k {
            if params.p_mat[(r, c)] < 0.0 {
                out.push(Violation::NegativeConnectivity { row: r, col: c });
            }
        }
    }
    for c in 0..k {
        if !(0..d).any(|i| params.pi[(i, c)] == 1.0) {
            out.push(Violation::NoPureNode { community: c });
        }
    }
    out
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().min(m.ncols());
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in 0..j {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Symmetric matrix of edge probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix(DMatrix<f64>);

impl ProbabilityMatrix {
    pub fn new(h: DMatrix<f64>) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::DimensionMismatch {
                expected: "square matrix".into(),
                found: format!("{}x{}", h.nrows(), h.ncols()),
            });
        }
        let asym = max_asymmetry(&h);
        if asym > SYM_TOL {
            return Err(Error::NotSymmetric {
                max_asymmetry: asym,
            });
        }
        for j in 0..h.ncols() {
            for i in 0..h.nrows() {
                let v = h[(i, j)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::ProbabilityOutOfRange {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
        }
        Ok(Self(h))
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

impl Deref for ProbabilityMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Symmetric binary adjacency matrix with an empty diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix(DMatrix<f64>);

impl AdjacencyMatrix {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if !x.is_square() {
            return Err(Error::InvalidAdjacency(format!(
                "{}x{} is not square",
                x.nrows(),
                x.ncols()
            )));
        }
        let d = x.nrows();
        for j in 0..d {
            if x[(j, j)] != 0.0 {
                return Err(Error::InvalidAdjacency(format!("non-zero diagonal at {j}")));
            }
            for i in 0..d {
                let v = x[(i, j)];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::InvalidAdjacency(format!(
                        "entry ({i},{j}) = {v} is not binary"
                    )));
                }
                if v != x[(j, i)] {
                    return Err(Error::InvalidAdjacency(format!(
                        "entry ({i},{j}) differs from ({j},{i})"
                    )));
                }
            }
        }
        Ok(Self(x))
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

impl Deref for AdjacencyMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// `H = Θ Π P Πᵀ Θ`, symmetrised and range-checked.
pub fn build_probability_matrix(params: &DcmmParams) -> Result<ProbabilityMatrix> {
    let violations: Vec<String> = validate_params(params)
        .into_iter()
        .filter(|v| !matches!(v, Violation::NoPureNode { .. }))
        .map(|v| v.to_string())
        .collect();
    if !violations.is_empty() {
        return Err(Error::ParamInvariantViolated(violations.join("; ")));
    }
    let mut weighted = params.pi.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= params.theta[i];
    }
    let h = &weighted * &params.p_mat * weighted.transpose();
    let mut h = (&h + h.transpose()) * 0.5;
    for j in 0..h.ncols() {
        for i in 0..h.nrows() {
            let v = h[(i, j)];
            if !(-SYM_TOL..=1.0 + SYM_TOL).contains(&v) {
                return Err(Error::ProbabilityOutOfRange {
                    row: i,
                    col: j,
                    value: v,
                });
            }
            h[(i, j)] = v.clamp(0.0, 1.0);
        }
    }
    Ok(ProbabilityMatrix(h))
}

/// Independent Bernoulli draws for every pair `i < j`, visited row by row.
pub fn sample_adjacency(h: &ProbabilityMatrix, seed: u64) -> AdjacencyMatrix {
    let d = h.nrows();
    let mut rng = substream(seed, 0);
    let mut x = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in (i + 1)..d {
            let u: f64 = rng.random();
            if u < h[(i, j)] {
                x[(i, j)] = 1.0;
                x[(j, i)] = 1.0;
            }
        }
    }
    AdjacencyMatrix(x)
}
