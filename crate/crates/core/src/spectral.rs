//! Symmetric eigendecomposition, Gaussian range sketches and projector algebra.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{gaussian_matrix, substream, StreamRng};

const ORTHO_TOL: f64 = 1e-10;
const SYM_TOL: f64 = 1e-10;
const COLLAPSE_TOL: f64 = 1e-12;
/// Stream index reserved for the final power-sketch test matrix.
const POWER_STREAM: u64 = 1 << 40;

/// A `d x k` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis {
    cols: DMatrix<f64>,
}

impl OrthonormalBasis {
    pub fn new(cols: DMatrix<f64>) -> Result<Self> {
        let deviation = orthonormality_error(&cols);
        if deviation > ORTHO_TOL || cols.ncols() > cols.nrows() {
            return Err(Error::NotOrthonormal { deviation });
        }
        Ok(Self { cols })
    }

    pub(crate) fn new_unchecked(cols: DMatrix<f64>) -> Self {
        debug_assert!(orthonormality_error(&cols) < 1e-8);
        Self { cols }
    }

    pub fn empty(d: usize) -> Self {
        Self {
            cols: DMatrix::zeros(d, 0),
        }
    }

    /// Orthonormal basis of the column span of `m` (Householder QR).
    pub fn from_span(m: &DMatrix<f64>) -> Result<Self> {
        if m.ncols() == 0 {
            return Ok(Self::empty(m.nrows()));
        }
        if m.ncols() > m.nrows() {
            return Err(Error::DimensionMismatch {
                expected: format!("at most {} columns", m.nrows()),
                found: format!("{}", m.ncols()),
            });
        }
        let qr = m.clone().qr();
        let r = qr.r();
        let scale = r.diagonal().amax();
        if scale == 0.0 || r.diagonal().iter().any(|v| v.abs() <= COLLAPSE_TOL * scale) {
            return Err(Error::RankCollapse {
                stage: "orthonormalisation",
            });
        }
        let mut q = qr.q();
        for j in 0..q.ncols() {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        Ok(Self { cols: q })
    }

    pub fn dim(&self) -> usize {
        self.cols.nrows()
    }

    pub fn rank(&self) -> usize {
        self.cols.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.cols
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.cols
    }

    pub fn projector(&self) -> DMatrix<f64> {
        &self.cols * self.cols.transpose()
    }

    /// Columns `range` as their own basis.
    pub fn columns(&self, start: usize, count: usize) -> Self {
        Self {
            cols: self.cols.columns(start, count).into_owned(),
        }
    }

    /// Side-by-side concatenation; the caller guarantees mutual orthogonality.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let d = self.dim();
        check_dims(d, other.dim())?;
        let mut m = DMatrix::zeros(d, self.rank() + other.rank());
        m.columns_mut(0, self.rank()).copy_from(&self.cols);
        m.columns_mut(self.rank(), other.rank())
            .copy_from(&other.cols);
        Self::new(m)
    }
}

pub fn orthonormality_error(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    let k = gram.nrows();
    (&gram - DMatrix::<f64>::identity(k, k)).amax()
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a.to_string(),
            found: b.to_string(),
        });
    }
    Ok(())
}

/// Flip each column so its largest-magnitude entry (lowest index on ties) is positive.
pub fn fix_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut best = 0usize;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if !col.is_empty() && col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Eigenvalues (descending |λ|, signed) with their eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPairs {
    pub values: DVector<f64>,
    pub basis: OrthonormalBasis,
}

/// Indices of `values` sorted by decreasing magnitude; larger signed value
/// first when magnitudes tie, then lower index.
pub(crate) fn magnitude_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(values[b].total_cmp(&values[a]))
            .then(a.cmp(&b))
    });
    idx
}

/// All eigenpairs of a symmetric matrix (lower triangle read), eigenvalues
/// ascending. Runs single-threaded so results never depend on the thread
/// count.
pub fn symmetric_eigen(s: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    // faer occasionally stalls on sparse 0/1 matrices; a rescaled copy
    // usually converges, and nalgebra's QR iteration is the last resort
    faer_eigen(s, 1.0)
        .or_else(|| faer_eigen(s, EIGEN_RETRY_SCALE))
        .or_else(|| nalgebra_eigen(s))
        .ok_or(Error::EigenNoConvergence)
}

const EIGEN_RETRY_SCALE: f64 = 0.7;

fn faer_eigen(s: &DMatrix<f64>, scale: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let n = s.nrows();
    let m = faer::Mat::<f64>::from_fn(n, n, |i, j| s[(i, j)] * scale);
    let evd = m.self_adjoint_eigen(faer::Side::Lower).ok()?;
    let values = DVector::from_fn(n, |i, _| evd.S()[i] / scale);
    let u = evd.U();
    let vectors = DMatrix::from_fn(n, n, |i, j| u[(i, j)]);
    Some((values, vectors))
}

fn nalgebra_eigen(s: &DMatrix<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let lower = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| {
        if i >= j {
            s[(i, j)]
        } else {
            s[(j, i)]
        }
    });
    let evd = nalgebra::SymmetricEigen::try_new(lower, f64::EPSILON, 0)?;
    let mut order: Vec<usize> = (0..s.nrows()).collect();
    order.sort_by(|&a, &b| {
        evd.eigenvalues[a]
            .total_cmp(&evd.eigenvalues[b])
            .then(a.cmp(&b))
    });
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| evd.eigenvalues[i]));
    let vectors = evd.eigenvectors.select_columns(&order);
    Some((values, vectors))
}

/// Full eigendecomposition of a symmetric matrix, truncated to the `k`
/// pairs of largest magnitude.
pub fn top_eigenpairs(s: &DMatrix<f64>, k: usize) -> Result<EigenPairs> {
    let d = s.nrows();
    if !s.is_square() {
        return Err(Error::DimensionMismatch {
            expected: "square matrix".into(),
            found: format!("{}x{}", s.nrows(), s.ncols()),
        });
    }
    if k == 0 || k > d {
        return Err(Error::KOutOfRange { k, d });
    }
    let scale = s.amax().max(1.0);
    let asym = crate::model::max_asymmetry(s);
    if asym > SYM_TOL * scale {
        return Err(Error::NotSymmetric {
            max_asymmetry: asym,
        });
    }
    let (values, vectors) = symmetric_eigen(s)?;
    let order = magnitude_order(values.as_slice());
    let mut vecs = DMatrix::zeros(d, k);
    let mut vals = DVector::zeros(k);
    for (j, &src) in order.iter().take(k).enumerate() {
        vals[j] = values[src];
        vecs.set_column(j, &vectors.column(src));
    }
    fix_signs(&mut vecs);
    Ok(EigenPairs {
        values: vals,
        basis: OrthonormalBasis::new_unchecked(vecs),
    })
}

/// A symmetric linear map that can be applied to a block of vectors without
/// being materialised.
pub trait SymmetricOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, block: &DMatrix<f64>) -> DMatrix<f64>;
}

impl SymmetricOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, block: &DMatrix<f64>) -> DMatrix<f64> {
        self * block
    }
}

/// `(1/n) Σ_m Ξ_m Ξ_mᵀ`, stored as its factors.
#[derive(Debug, Clone)]
pub struct ProjectorAverage<'a> {
    bases: Vec<&'a OrthonormalBasis>,
    d: usize,
}

impl<'a> ProjectorAverage<'a> {
    pub fn new(bases: &[&'a OrthonormalBasis]) -> Result<Self> {
        let first = bases.first().ok_or(Error::EmptySources)?;
        let d = first.dim();
        for b in bases {
            check_dims(d, b.dim())?;
        }
        Ok(Self {
            bases: bases.to_vec(),
            d,
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.d, self.d);
        for b in &self.bases {
            acc += b.projector();
        }
        acc / self.bases.len() as f64
    }
}

impl SymmetricOperator for ProjectorAverage<'_> {
    fn dim(&self) -> usize {
        self.d
    }

    fn apply(&self, block: &DMatrix<f64>) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.d, block.ncols());
        for b in &self.bases {
            let m = b.matrix();
            acc += m * (m.transpose() * block);
        }
        acc / self.bases.len() as f64
    }
}

/// Dense average of the projectors onto each basis.
pub fn average_projector(bases: &[OrthonormalBasis]) -> Result<DMatrix<f64>> {
    let refs: Vec<&OrthonormalBasis> = bases.iter().collect();
    Ok(ProjectorAverage::new(&refs)?.to_dense())
}

/// Sketch parameters for the two-stage randomized range finder.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SketchConfig {
    pub k_s: usize,
    pub l: usize,
    pub p: usize,
    pub p_prime: usize,
    pub q: usize,
    pub seed: u64,
}

impl SketchConfig {
    /// `q = ⌈ln d⌉`, `L = 10` and the smallest admissible widths.
    pub fn with_defaults(d: usize, k_s: usize, seed: u64) -> Self {
        let q = ((d.max(2) as f64).ln().ceil() as usize).max(1);
        Self {
            k_s,
            l: 10,
            p: Self::min_p(k_s, q),
            p_prime: Self::min_p_prime(k_s),
            q,
            seed,
        }
    }

    pub fn min_p(k_s: usize, q: usize) -> usize {
        (2 * k_s).max(k_s + 8 * q - 1)
    }

    pub fn min_p_prime(k_s: usize) -> usize {
        (2 * k_s).max(k_s + 7)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.k_s == 0 {
            return fail("shared dimension must be positive".into());
        }
        if self.l == 0 || self.q == 0 {
            return fail("sketch count and power count must be at least 1".into());
        }
        if self.p < Self::min_p(self.k_s, self.q) {
            return fail(format!(
                "p = {} below minimum {}",
                self.p,
                Self::min_p(self.k_s, self.q)
            ));
        }
        if self.p_prime < Self::min_p_prime(self.k_s) {
            return fail(format!(
                "p' = {} below minimum {}",
                self.p_prime,
                Self::min_p_prime(self.k_s)
            ));
        }
        Ok(())
    }
}

/// Leading `k` left singular vectors of `y` with all singular values in
/// decreasing order. Computed from a Householder QR and the symmetric
/// eigendecomposition of `R Rᵀ`, which stays accurate when `y` is rank
/// deficient.
pub fn left_singular(y: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (d, w) = y.shape();
    if k > d.min(w) {
        return Err(Error::KOutOfRange { k, d: d.min(w) });
    }
    let (q, gram) = if w <= d {
        let qr = y.clone().qr();
        let r = qr.r();
        (Some(qr.q()), &r * r.transpose())
    } else {
        (None, y * y.transpose())
    };
    let (values, vectors) = symmetric_eigen(&gram)?;
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let sv = DVector::from_iterator(idx.len(), idx.iter().map(|&i| values[i].max(0.0).sqrt()));
    let small = vectors.select_columns(idx[..k].iter());
    let u = match q {
        Some(q) => q * small,
        None => small,
    };
    Ok((u, sv))
}

fn leading_left_singular(
    y: DMatrix<f64>,
    k: usize,
    stage: &'static str,
) -> Result<OrthonormalBasis> {
    let (u, sv) = left_singular(&y, k)?;
    let top = sv.iter().copied().fold(0.0, f64::max);
    // singular values come from a Gram matrix, so resolution is ~sqrt(eps)
    if top == 0.0 || sv.len() < k || sv[k - 1] <= COLLAPSE_TOL.sqrt() * top {
        return Err(Error::RankCollapse { stage });
    }
    let mut cols = OrthonormalBasis::from_span(&u)?.into_matrix();
    fix_signs(&mut cols);
    Ok(OrthonormalBasis::new_unchecked(cols))
}

pub(crate) fn sketch_with<O: SymmetricOperator + ?Sized>(
    sigma: &O,
    width: usize,
    k: usize,
    rng: &mut StreamRng,
) -> Result<OrthonormalBasis> {
    if width < k {
        return Err(Error::WidthTooSmall { width, k });
    }
    if k > sigma.dim() {
        return Err(Error::KOutOfRange { k, d: sigma.dim() });
    }
    let omega = gaussian_matrix(sigma.dim(), width, rng);
    leading_left_singular(sigma.apply(&omega), k, "range sketch")
}

/// Top-`k` left singular vectors of `sigma · Ω`, with `Ω` a `d x width`
/// Gaussian matrix drawn from `seed`.
pub fn sketch_top_subspace<O: SymmetricOperator + ?Sized>(
    sigma: &O,
    width: usize,
    k: usize,
    seed: u64,
) -> Result<OrthonormalBasis> {
    sketch_with(sigma, width, k, &mut substream(seed, 0))
}

/// Top-`k_s` left singular vectors of `sigmaᵠ · Ω′`, formed by `q`
/// successive products with a `d x p′` Gaussian block.
pub fn power_sketch<O: SymmetricOperator + ?Sized>(
    sigma: &O,
    cfg: &SketchConfig,
) -> Result<OrthonormalBasis> {
    if cfg.q == 0 {
        return Err(Error::InvalidConfig(
            "power count must be at least 1".into(),
        ));
    }
    if cfg.p_prime < cfg.k_s {
        return Err(Error::WidthTooSmall {
            width: cfg.p_prime,
            k: cfg.k_s,
        });
    }
    let mut y = gaussian_matrix(
        sigma.dim(),
        cfg.p_prime,
        &mut substream(cfg.seed, POWER_STREAM),
    );
    for _ in 0..cfg.q {
        y = sigma.apply(&y);
    }
    leading_left_singular(y, cfg.k_s, "power sketch")
}

/// The two-stage pipeline: `L` independent range sketches of `sigma`,
/// averaged as projectors, then refined by a power sketch.
pub fn two_stage_sketch<O: SymmetricOperator + ?Sized>(
    sigma: &O,
    cfg: &SketchConfig,
) -> Result<OrthonormalBasis> {
    cfg.validate()?;
    let first: Vec<OrthonormalBasis> = (0..cfg.l as u64)
        .into_par_iter()
        .map(|l| sketch_with(sigma, cfg.p, cfg.k_s, &mut substream(cfg.seed, l)))
        .collect::<Result<_>>()?;
    let refs: Vec<&OrthonormalBasis> = first.iter().collect();
    let averaged = ProjectorAverage::new(&refs)?;
    power_sketch(&averaged, cfg)
}

/// `‖AAᵀ − BBᵀ‖_F`, evaluated entrywise.
pub fn projector_distance(a: &OrthonormalBasis, b: &OrthonormalBasis) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    Ok((a.projector() - b.projector()).norm())
}

/// `tr(AAᵀBBᵀ) = ‖AᵀB‖_F²`.
pub fn trace_alignment(a: &OrthonormalBasis, b: &OrthonormalBasis) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    Ok((a.matrix().transpose() * b.matrix()).norm_squared())
}

/// `(I − LLᵀ) X (I − RRᵀ)`.
pub fn deflate(
    x: &DMatrix<f64>,
    left: &OrthonormalBasis,
    right: &OrthonormalBasis,
) -> Result<DMatrix<f64>> {
    check_dims(x.nrows(), left.dim())?;
    check_dims(x.ncols(), right.dim())?;
    let l = left.matrix();
    let r = right.matrix();
    let mut out = x - l * (l.transpose() * x);
    out -= (&out * r) * r.transpose();
    Ok(out)
}

/// Project `m` off `against` and orthonormalise what remains.
pub fn orthogonal_complement_span(
    m: &DMatrix<f64>,
    against: &OrthonormalBasis,
) -> Result<OrthonormalBasis> {
    let a = against.matrix();
    let mut v = m - a * (a.transpose() * m);
    // a second pass removes the round-off left by the first
    v -= a * (a.transpose() * &v);
    let mut basis = OrthonormalBasis::from_span(&v)?.into_matrix();
    fix_signs(&mut basis);
    Ok(OrthonormalBasis::new_unchecked(basis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use nalgebra::dmatrix;

    fn random_basis(d: usize, k: usize, seed: u64) -> OrthonormalBasis {
        let g = gaussian_matrix(d, k, &mut substream(seed, 9));
        OrthonormalBasis::from_span(&g).unwrap()
    }

    /// Symmetric matrix with `k` unit eigenvalues and a noise-like tail whose
    /// largest magnitude is `1 / gap`.
    fn spiked(d: usize, k: usize, gap: f64, seed: u64) -> (DMatrix<f64>, OrthonormalBasis) {
        use rand::Rng;
        let q = random_basis(d, d, seed);
        let mut rng = substream(seed, 10);
        let mut diag = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0) / gap);
        diag[k] = 1.0 / gap;
        for j in 0..k {
            diag[j] = 1.0;
        }
        let m = q.matrix() * DMatrix::from_diagonal(&diag) * q.matrix().transpose();
        let m = (&m + m.transpose()) * 0.5;
        (m, q.columns(0, k))
    }

    #[test]
    fn diagonal_eigenpairs() {
        let e = top_eigenpairs(
            &DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0])),
            2,
        )
        .unwrap();
        assert_eq!(e.values.as_slice(), &[3.0, 2.0]);
        assert_eq!(*e.basis.matrix(), dmatrix![1.0, 0.0; 0.0, 1.0; 0.0, 0.0]);
    }

    #[test]
    fn magnitude_ordering_keeps_sign() {
        let e = top_eigenpairs(&dmatrix![1.0, 0.0; 0.0, -5.0], 1).unwrap();
        assert_eq!(e.values[0], -5.0);
        assert_eq!(*e.basis.matrix(), dmatrix![0.0; 1.0]);
    }

    #[test]
    fn full_reconstruction() {
        let g = gaussian_matrix(8, 8, &mut substream(1, 1));
        let s = (&g + g.transpose()) * 0.5;
        let e = top_eigenpairs(&s, 8).unwrap();
        let b = e.basis.matrix();
        let rebuilt = b * DMatrix::from_diagonal(&e.values) * b.transpose();
        assert!((rebuilt - s).amax() < 1e-9);
    }

    #[test]
    fn eigen_errors() {
        assert!(matches!(
            top_eigenpairs(&dmatrix![1.0, 2.0; 0.0, 1.0], 1),
            Err(Error::NotSymmetric { .. })
        ));
        assert!(matches!(
            top_eigenpairs(&DMatrix::identity(3, 3), 4),
            Err(Error::KOutOfRange { .. })
        ));
        assert!(matches!(
            top_eigenpairs(&DMatrix::identity(3, 3), 0),
            Err(Error::KOutOfRange { .. })
        ));
    }

    #[test]
    fn sparse_graph_that_stalls_faer_is_decomposed() {
        let edges = [
            (3, 14),
            (5, 9),
            (5, 22),
            (7, 12),
            (7, 57),
            (12, 22),
            (22, 38),
            (36, 63),
            (38, 57),
            (50, 56),
        ];
        let mut x = DMatrix::zeros(75, 75);
        for (i, j) in edges {
            x[(i, j)] = 1.0;
            x[(j, i)] = 1.0;
        }
        let (values, vectors) = symmetric_eigen(&x).unwrap();
        assert!(values.as_slice().windows(2).all(|w| w[0] <= w[1]));
        let rebuilt = &vectors * DMatrix::from_diagonal(&values) * vectors.transpose();
        assert!((rebuilt - &x).amax() < 1e-12);
        assert!((vectors.transpose() * &vectors - DMatrix::identity(75, 75)).amax() < 1e-12);
    }

    #[test]
    fn fallback_solver_sorts_ascending() {
        let s = dmatrix![2.0, 1.0, 0.0; 1.0, 2.0, 0.0; 0.0, 0.0, -1.0];
        let (values, vectors) = nalgebra_eigen(&s).unwrap();
        assert!((values - DVector::from_vec(vec![-1.0, 1.0, 3.0])).amax() < 1e-12);
        let rebuilt = &vectors
            * DMatrix::from_diagonal(&symmetric_eigen(&s).unwrap().0)
            * vectors.transpose();
        assert!((rebuilt - &s).amax() < 1e-12);
    }

    #[test]
    fn averages_of_projectors() {
        let b = random_basis(6, 2, 4);
        let single = average_projector(std::slice::from_ref(&b)).unwrap();
        assert!((&single * &single - &single).amax() < 1e-10);

        let twice = average_projector(&[b.clone(), b.clone()]).unwrap();
        let e = top_eigenpairs(&twice, 3).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-12 && (e.values[1] - 1.0).abs() < 1e-12);
        assert!(e.values[2].abs() < 1e-12);

        let e1 = OrthonormalBasis::new(dmatrix![1.0; 0.0]).unwrap();
        let e2 = OrthonormalBasis::new(dmatrix![0.0; 1.0]).unwrap();
        assert_eq!(
            average_projector(&[e1, e2]).unwrap(),
            dmatrix![0.5, 0.0; 0.0, 0.5]
        );
    }

    #[test]
    fn operator_matches_dense() {
        let bases = [random_basis(12, 3, 1), random_basis(12, 2, 2)];
        let refs: Vec<&OrthonormalBasis> = bases.iter().collect();
        let op = ProjectorAverage::new(&refs).unwrap();
        let block = gaussian_matrix(12, 4, &mut substream(5, 0));
        assert!((op.apply(&block) - op.to_dense() * &block).amax() < 1e-12);
    }

    #[test]
    fn sketch_of_exact_projector() {
        let b = random_basis(30, 3, 7);
        let p = b.projector();
        for width in [3, 5, 12] {
            let s = sketch_top_subspace(&p, width, 3, 100 + width as u64).unwrap();
            assert!(projector_distance(&s, &b).unwrap() < 1e-8);
        }
        assert!(matches!(
            sketch_top_subspace(&p, 2, 3, 1),
            Err(Error::WidthTooSmall { .. })
        ));
        assert!(matches!(
            sketch_top_subspace(&DMatrix::<f64>::zeros(10, 10), 4, 2, 1),
            Err(Error::RankCollapse { .. })
        ));
    }

    #[test]
    fn sketch_with_gap_hundred() {
        let mut dists: Vec<f64> = (0..100)
            .map(|seed| {
                let (m, truth) = spiked(30, 2, 100.0, 1000 + seed);
                let exact = top_eigenpairs(&m, 2).unwrap().basis;
                assert!(projector_distance(&exact, &truth).unwrap() < 1e-8);
                let s = sketch_top_subspace(&m, 4, 2, seed).unwrap();
                projector_distance(&s, &exact).unwrap()
            })
            .collect();
        dists.sort_by(f64::total_cmp);
        assert!(dists[50] < 0.05, "median {}", dists[50]);
    }

    #[test]
    fn power_sketch_idempotent_input() {
        let b = random_basis(25, 2, 3);
        let p = b.projector();
        let mut cfg = SketchConfig::with_defaults(25, 2, 77);
        cfg.q = 1;
        let one = power_sketch(&p, &cfg).unwrap();
        cfg.q = 5;
        let five = power_sketch(&p, &cfg).unwrap();
        assert!(projector_distance(&one, &five).unwrap() < 1e-8);
        assert!(projector_distance(&one, &b).unwrap() < 1e-8);
    }

    #[test]
    fn power_sketch_finds_intersection() {
        let d = 100;
        let all = random_basis(d, 6, 21);
        let common = all.columns(0, 2);
        let a = OrthonormalBasis::new(all.matrix().columns(0, 4).into_owned()).unwrap();
        let mut bm = DMatrix::zeros(d, 4);
        bm.columns_mut(0, 2).copy_from(&all.matrix().columns(0, 2));
        bm.columns_mut(2, 2).copy_from(&all.matrix().columns(4, 2));
        let b = OrthonormalBasis::new(bm).unwrap();
        let sigma = average_projector(&[a, b]).unwrap();
        let cfg = SketchConfig::with_defaults(d, 2, 5);
        let est = power_sketch(&sigma, &cfg).unwrap();
        assert!(projector_distance(&est, &common).unwrap() < 0.1);
    }

    #[test]
    fn more_power_iterations_do_not_hurt() {
        let mut errs = [Vec::new(), Vec::new()];
        for seed in 0..50 {
            let (m, _) = spiked(40, 2, 3.0, 500 + seed);
            let exact = top_eigenpairs(&m, 2).unwrap().basis;
            for (slot, q) in [2usize, 4].into_iter().enumerate() {
                let cfg = SketchConfig {
                    k_s: 2,
                    l: 1,
                    p: 32,
                    p_prime: 9,
                    q,
                    seed,
                };
                errs[slot]
                    .push(projector_distance(&power_sketch(&m, &cfg).unwrap(), &exact).unwrap());
            }
        }
        for e in &mut errs {
            e.sort_by(f64::total_cmp);
        }
        assert!(errs[1][25] <= errs[0][25]);
    }

    #[test]
    fn full_width_pipeline_is_exact() {
        let b = random_basis(12, 3, 8);
        let cfg = SketchConfig {
            k_s: 3,
            l: 1,
            p: 12,
            p_prime: 12,
            q: 1,
            seed: 4,
        };
        let est = two_stage_sketch(&b.projector(), &cfg).unwrap();
        assert!(projector_distance(&est, &b).unwrap() < 1e-8);
    }

    #[test]
    fn sketch_defaults() {
        let cfg = SketchConfig::with_defaults(2000, 2, 0);
        assert_eq!((cfg.q, cfg.l, cfg.p, cfg.p_prime), (8, 10, 65, 9));
        assert!(cfg.validate().is_ok());
        assert!(SketchConfig { p: 10, ..cfg }.validate().is_err());
    }

    #[test]
    fn distances_and_alignment() {
        let e1 = OrthonormalBasis::new(dmatrix![1.0; 0.0]).unwrap();
        let e2 = OrthonormalBasis::new(dmatrix![0.0; 1.0]).unwrap();
        assert!((projector_distance(&e1, &e2).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(projector_distance(&e1, &e1).unwrap(), 0.0);
        assert_eq!(trace_alignment(&e1, &e2).unwrap(), 0.0);

        let b = random_basis(10, 3, 2);
        let rot = random_basis(3, 3, 3);
        let rotated = OrthonormalBasis::new(b.matrix() * rot.matrix()).unwrap();
        assert!(projector_distance(&b, &rotated).unwrap() < 1e-12);
        assert!((trace_alignment(&b, &b).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn deflation_cases() {
        let b = random_basis(6, 2, 11);
        let x = b.matrix()
            * DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1.0]))
            * b.matrix().transpose();
        assert!(deflate(&x, &b, &b).unwrap().amax() < 1e-10);
        let empty = OrthonormalBasis::empty(6);
        assert_eq!(deflate(&x, &empty, &empty).unwrap(), x);

        let v = dmatrix![1.0; 0.0; 0.0];
        let w = OrthonormalBasis::new(dmatrix![0.0; 1.0; 0.0]).unwrap();
        let vv = &v * v.transpose();
        assert_eq!(deflate(&vv, &w, &w).unwrap(), vv);
        let vb = OrthonormalBasis::new(v).unwrap();
        assert_eq!(deflate(&vv, &vb, &vb).unwrap(), DMatrix::zeros(3, 3));
    }

    #[test]
    fn complement_is_orthogonal() {
        let a = random_basis(20, 2, 1);
        let m = gaussian_matrix(20, 3, &mut substream(2, 2));
        let c = orthogonal_complement_span(&m, &a).unwrap();
        assert!((a.matrix().transpose() * c.matrix()).amax() < 1e-12);
        assert!(orthonormality_error(c.matrix()) < 1e-12);
    }
}
