//! Shared-subspace transfer from source networks to a target network.
//!
//! The oracle estimator pools every supplied source. The selective estimator
//! keeps only sources whose leading subspace aligns with the current shared
//! estimate, iterating until the kept set stops changing.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result, StageExt};
use crate::mixed_score::{full_pipeline, PipelineOptions};
use crate::rng::{derive_seed, substream};
use crate::spectral::{
    deflate, fix_signs, left_singular, orthogonal_complement_span, top_eigenpairs, trace_alignment,
    two_stage_sketch, OrthonormalBasis, ProjectorAverage, SketchConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct TransferConfig {
    pub k_target: usize,
    pub k_shared: usize,
    /// Rank extracted from every source network.
    pub k_source: usize,
    pub sketch: SketchConfig,
    pub split_sources: bool,
    pub tau: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl TransferConfig {
    /// Defaults for a `d`-node target: sources share the target's rank,
    /// `τ = K_s / 2`, ten selection rounds and default sketch sizes.
    pub fn new(d: usize, k_target: usize, k_shared: usize, seed: u64) -> Self {
        Self {
            k_target,
            k_shared,
            k_source: k_target,
            sketch: SketchConfig::with_defaults(d, k_shared, derive_seed(seed, 1)),
            split_sources: false,
            tau: k_shared as f64 / 2.0,
            max_iters: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.k_shared == 0 || self.k_shared > self.k_target {
            return fail("shared dimension must lie in 1..=k_target");
        }
        if self.k_shared > self.k_source {
            return fail("shared dimension exceeds the source rank");
        }
        if self.sketch.k_s != self.k_shared {
            return fail("sketch rank differs from the shared dimension");
        }
        if self.max_iters == 0 {
            return fail("selection needs at least one iteration");
        }
        if !self.tau.is_finite() {
            return fail("threshold must be finite");
        }
        self.sketch.validate()
    }
}

/// Indices (0-based, into the source list) of the retained sources.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SourceSet {
    pub indices: Vec<usize>,
}

impl SourceSet {
    pub fn all(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferBasis {
    pub shared: OrthonormalBasis,
    pub private: OrthonormalBasis,
    /// `[private | shared]`, or the target's own eigenbasis when no source
    /// survived selection.
    pub combined: OrthonormalBasis,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStep {
    pub iteration: usize,
    /// `(source index, alignment with the previous shared estimate)`.
    pub alignments: Vec<(usize, f64)>,
    pub kept: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub set: SourceSet,
    pub shared: OrthonormalBasis,
    pub trace: Vec<TraceStep>,
}

/// Leading eigenbasis of each network.
pub fn per_network_bases(xs: &[&DMatrix<f64>], ks: &[usize]) -> Result<Vec<OrthonormalBasis>> {
    if xs.len() != ks.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len().to_string(),
            found: ks.len().to_string(),
        });
    }
    xs.par_iter()
        .zip(ks.par_iter())
        .map(|(x, &k)| top_eigenpairs(x, k).map(|e| e.basis))
        .collect::<Result<Vec<_>>>()
        .stage("per-network eigendecomposition")
}

/// Shared subspace of `bases` via the two-stage sketch of their average
/// projector.
pub fn estimate_shared(
    bases: &[&OrthonormalBasis],
    sketch: &SketchConfig,
    seed: u64,
) -> Result<OrthonormalBasis> {
    let sigma = ProjectorAverage::new(bases)?;
    let cfg = SketchConfig { seed, ..*sketch };
    two_stage_sketch(&sigma, &cfg).stage("shared subspace sketch")
}

/// Private directions of `x` left after removing the shared estimate(s).
pub fn private_step(
    x: &DMatrix<f64>,
    shared_left: &OrthonormalBasis,
    shared_right: &OrthonormalBasis,
    k_target: usize,
) -> Result<TransferBasis> {
    let k_shared = shared_left.rank();
    let private = if k_target == k_shared {
        OrthonormalBasis::empty(x.nrows())
    } else {
        let deflated = deflate(x, shared_left, shared_right)?;
        let sym = (&deflated + deflated.transpose()) * 0.5;
        let raw = top_eigenpairs(&sym, k_target - k_shared).stage("private eigendecomposition")?;
        orthogonal_complement_span(raw.basis.matrix(), shared_left)
            .stage("private orthogonalisation")?
    };
    let combined = private.concat(shared_left)?;
    Ok(TransferBasis {
        shared: shared_left.clone(),
        private,
        combined,
    })
}

fn oracle_from_bases(
    x_target: &DMatrix<f64>,
    target_basis: &OrthonormalBasis,
    source_bases: &[&OrthonormalBasis],
    cfg: &TransferConfig,
) -> Result<TransferBasis> {
    let mut all: Vec<&OrthonormalBasis> = vec![target_basis];
    all.extend_from_slice(source_bases);
    if cfg.split_sources {
        if source_bases.is_empty() {
            return Err(Error::EmptySources);
        }
        let half = all.len().div_ceil(2);
        let first = estimate_shared(&all[..half], &cfg.sketch, derive_seed(cfg.sketch.seed, 1))?;
        let second = estimate_shared(&all[half..], &cfg.sketch, derive_seed(cfg.sketch.seed, 2))?;
        private_step(x_target, &first, &second, cfg.k_target)
    } else {
        let shared = estimate_shared(&all, &cfg.sketch, cfg.sketch.seed)?;
        private_step(x_target, &shared, &shared, cfg.k_target)
    }
}

fn network_bases(
    target: &DMatrix<f64>,
    sources: &[&DMatrix<f64>],
    cfg: &TransferConfig,
) -> Result<Vec<OrthonormalBasis>> {
    let mut xs = vec![target];
    xs.extend_from_slice(sources);
    let mut ks = vec![cfg.k_target];
    ks.extend(std::iter::repeat_n(cfg.k_source, sources.len()));
    per_network_bases(&xs, &ks)
}

/// Pool every source with the target and estimate `[private | shared]`.
pub fn oracle_tdcmm(
    x_target: &DMatrix<f64>,
    sources: &[&DMatrix<f64>],
    cfg: &TransferConfig,
) -> Result<TransferBasis> {
    cfg.validate()?;
    let bases = network_bases(x_target, sources, cfg)?;
    let refs: Vec<&OrthonormalBasis> = bases[1..].iter().collect();
    oracle_from_bases(x_target, &bases[0], &refs, cfg)
}

/// Leading `k` directions of a weighted projector average, from the left
/// singular vectors of the stacked, weighted bases.
fn weighted_top_subspace(
    bases: &[&OrthonormalBasis],
    weights: &[f64],
    k: usize,
) -> Result<OrthonormalBasis> {
    let d = bases[0].dim();
    let total: usize = bases.iter().map(|b| b.rank()).sum();
    let norm: f64 = weights.iter().sum();
    let mut stacked = DMatrix::zeros(d, total);
    let mut col = 0;
    for (b, w) in bases.iter().zip(weights) {
        let r = b.rank();
        stacked
            .columns_mut(col, r)
            .copy_from(&(b.matrix() * (w / norm).sqrt()));
        col += r;
    }
    let (u, _) = left_singular(&stacked, k)?;
    let mut cols = OrthonormalBasis::from_span(&u)?.into_matrix();
    fix_signs(&mut cols);
    OrthonormalBasis::new(cols)
}

/// Starting shared estimate for selection: the average projector of the
/// target and all sources, each source weighted by the square of its
/// normalised alignment with the target's leading `K_s` directions.
fn weighted_initial_shared(
    bases: &[OrthonormalBasis],
    k_shared: usize,
) -> Result<OrthonormalBasis> {
    let anchor = bases[0].columns(0, k_shared);
    let mut weights = vec![1.0];
    for b in &bases[1..] {
        let a = trace_alignment(&anchor, b)? / k_shared as f64;
        weights.push(a * a);
    }
    let refs: Vec<&OrthonormalBasis> = bases.iter().collect();
    weighted_top_subspace(&refs, &weights, k_shared)
}

fn select_from_bases(
    bases: &[OrthonormalBasis],
    cfg: &TransferConfig,
    init: Option<&OrthonormalBasis>,
) -> Result<Selection> {
    let n_sources = bases.len() - 1;
    let k_s = cfg.k_shared;
    let target_only = || bases[0].columns(0, k_s);
    let all_refs: Vec<&OrthonormalBasis> = bases.iter().collect();

    if cfg.tau <= 0.0 || n_sources == 0 {
        return Ok(Selection {
            set: SourceSet::default(),
            shared: target_only(),
            trace: Vec::new(),
        });
    }
    if cfg.tau >= k_s as f64 {
        let shared = estimate_shared(&all_refs, &cfg.sketch, derive_seed(cfg.sketch.seed, 0))?;
        return Ok(Selection {
            set: SourceSet::all(n_sources),
            shared,
            trace: Vec::new(),
        });
    }

    let mut shared = match init {
        Some(b) => b.clone(),
        None => weighted_initial_shared(bases, k_s).stage("selection initialisation")?,
    };
    let mut kept: Vec<usize> = (0..n_sources).collect();
    let mut trace = Vec::new();
    for t in 1..=cfg.max_iters {
        let alignments: Vec<(usize, f64)> = kept
            .iter()
            .map(|&m| trace_alignment(&shared, &bases[m + 1]).map(|a| (m, a)))
            .collect::<Result<_>>()?;
        let next: Vec<usize> = alignments
            .iter()
            .filter(|(_, a)| *a >= k_s as f64 - cfg.tau)
            .map(|(m, _)| *m)
            .collect();
        let unchanged = next == kept;
        kept = next;
        trace.push(TraceStep {
            iteration: t,
            alignments,
            kept: kept.clone(),
        });
        if kept.is_empty() {
            shared = target_only();
            break;
        }
        let mut pool: Vec<&OrthonormalBasis> = vec![&bases[0]];
        pool.extend(kept.iter().map(|&m| &bases[m + 1]));
        shared = estimate_shared(&pool, &cfg.sketch, derive_seed(cfg.sketch.seed, t as u64))?;
        if unchanged {
            break;
        }
    }
    Ok(Selection {
        set: SourceSet { indices: kept },
        shared,
        trace,
    })
}

/// Iterative truncation: keep sources whose alignment with the current
/// shared estimate is at least `K_s − τ`, re-estimate on the kept set and
/// repeat until the set is stable. `init` overrides the starting estimate.
pub fn select_sources(
    x_target: &DMatrix<f64>,
    sources: &[&DMatrix<f64>],
    cfg: &TransferConfig,
    init: Option<&OrthonormalBasis>,
) -> Result<Selection> {
    cfg.validate()?;
    let bases = network_bases(x_target, sources, cfg)?;
    select_from_bases(&bases, cfg, init)
}

/// Selection followed by the private step on the kept sources. With no
/// source kept the target's own eigenbasis is returned unchanged.
pub fn non_oracle_tdcmm(
    x_target: &DMatrix<f64>,
    sources: &[&DMatrix<f64>],
    cfg: &TransferConfig,
) -> Result<(TransferBasis, Selection)> {
    cfg.validate()?;
    let bases = network_bases(x_target, sources, cfg)?;
    let selection = select_from_bases(&bases, cfg, None)?;
    let basis = if selection.set.is_empty() {
        let own = bases[0].clone();
        TransferBasis {
            shared: own.columns(0, cfg.k_shared),
            private: own.columns(cfg.k_shared, cfg.k_target - cfg.k_shared),
            combined: own,
        }
    } else if cfg.split_sources {
        let kept: Vec<&OrthonormalBasis> = selection
            .set
            .indices
            .iter()
            .map(|&m| &bases[m + 1])
            .collect();
        oracle_from_bases(x_target, &bases[0], &kept, cfg)?
    } else {
        private_step(x_target, &selection.shared, &selection.shared, cfg.k_target)?
    };
    Ok((basis, selection))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvResult {
    pub tau: f64,
    /// `(τ, mean held-out log-likelihood)` for every grid point.
    pub scores: Vec<(f64, f64)>,
}

pub const CV_HOLDOUT: f64 = 0.1;
pub const CV_REPEATS: usize = 5;
const CV_CLAMP: f64 = 1e-6;

/// Held-out pairs `(i, j)`, `i < j`, and the training copy of `x` with
/// those pairs replaced by the observed edge density.
fn masked_copy(x: &DMatrix<f64>, seed: u64) -> (DMatrix<f64>, Vec<(usize, usize)>) {
    let d = x.nrows();
    let mut rng = substream(seed, 0);
    let mut held = Vec::new();
    let mut observed_edges = 0.0;
    let mut observed = 0usize;
    for i in 0..d {
        for j in (i + 1)..d {
            if rng.random::<f64>() < CV_HOLDOUT {
                held.push((i, j));
            } else {
                observed_edges += x[(i, j)];
                observed += 1;
            }
        }
    }
    let density = if observed > 0 {
        observed_edges / observed as f64
    } else {
        0.0
    };
    let mut train = x.clone();
    for &(i, j) in &held {
        train[(i, j)] = density;
        train[(j, i)] = density;
    }
    (train, held)
}

/// Choose `τ` from `grid` by held-out Bernoulli likelihood of target pairs.
pub fn cross_validate_tau(
    x_target: &DMatrix<f64>,
    sources: &[&DMatrix<f64>],
    cfg: &TransferConfig,
    grid: &[f64],
    pipeline: &PipelineOptions,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty threshold grid".into()));
    }
    let masks: Vec<_> = (0..CV_REPEATS as u64)
        .map(|r| masked_copy(x_target, derive_seed(cfg.seed, 1000 + r)))
        .collect();
    let mut scores = Vec::with_capacity(grid.len());
    let mut last_failure = None;
    for &tau in grid {
        let run_cfg = TransferConfig { tau, ..cfg.clone() };
        let mut total = 0.0;
        for (train, held) in &masks {
            // a threshold whose fit breaks down on a mask scores -inf
            let fit = non_oracle_tdcmm(train, sources, &run_cfg)
                .and_then(|(basis, _)| full_pipeline(train, Some(&basis.combined), pipeline))
                .stage("cross-validation fit");
            let est = match fit {
                Ok(est) => est,
                Err(e) if e.is_input_error() => return Err(e),
                Err(e) => {
                    total = f64::NEG_INFINITY;
                    last_failure = Some(e);
                    break;
                }
            };
            total += held
                .iter()
                .map(|&(i, j)| {
                    let p = est.h_hat[(i, j)].clamp(CV_CLAMP, 1.0 - CV_CLAMP);
                    if x_target[(i, j)] > 0.5 {
                        p.ln()
                    } else {
                        (1.0 - p).ln()
                    }
                })
                .sum::<f64>();
        }
        scores.push((tau, total / masks.len() as f64));
    }
    if let Some(e) = last_failure {
        if scores.iter().all(|s| s.1 == f64::NEG_INFINITY) {
            return Err(e);
        }
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        let b = scores[best];
        if s.1 > b.1 || (s.1 == b.1 && s.0 < b.0) {
            best = i;
        }
    }
    Ok(CvResult {
        tau: scores[best].0,
        scores,
    })
}

/// Heuristic shared dimension: position of the largest ratio between
/// consecutive eigenvalues of the average projector, among values in (0, 1].
pub fn suggest_shared_dimension(bases: &[OrthonormalBasis], max_k: usize) -> Result<usize> {
    let sigma = crate::spectral::average_projector(bases)?;
    let eig = top_eigenpairs(&sigma, (max_k + 1).min(sigma.nrows()))?;
    let vals: Vec<f64> = eig.values.iter().map(|v| v.max(0.0)).collect();
    let mut best = (1usize, 0.0f64);
    for k in 1..vals.len() {
        let ratio = if vals[k] > 1e-12 {
            vals[k - 1] / vals[k]
        } else {
            f64::INFINITY
        };
        if ratio > best.1 && vals[k - 1] > 1e-12 {
            best = (k, ratio);
        }
    }
    Ok(best.0)
}
