use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parameter invariants violated: {0}")]
    ParamInvariantViolated(String),
    #[error("probability H[{row},{col}] = {value} lies outside [0, 1]")]
    ProbabilityOutOfRange { row: usize, col: usize, value: f64 },
    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("adjacency matrix invalid: {0}")]
    InvalidAdjacency(String),
    #[error("requested {k} eigenpairs from a {d}x{d} matrix")]
    KOutOfRange { k: usize, d: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },
    #[error("columns are not orthonormal (max deviation {deviation:e})")]
    NotOrthonormal { deviation: f64 },
    #[error("sketch width {width} is smaller than target rank {k}")]
    WidthTooSmall { width: usize, k: usize },
    #[error("rank collapse in {stage}: leading singular values vanish")]
    RankCollapse { stage: &'static str },
    #[error("symmetric eigensolver did not converge")]
    EigenNoConvergence,
    #[error("at least two communities are needed to build a point cloud")]
    KTooSmall,
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),
    #[error("simplex vertices are affinely dependent")]
    DegenerateSimplex,
    #[error("b1 radicand for vertex {vertex} is {value:e}, not positive")]
    NegativeRadicand { vertex: usize, value: f64 },
    #[error("theta denominator vanishes at node {node}")]
    DegenerateDenominator { node: usize },
    #[error("no source networks supplied")]
    EmptySources,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("scenario generation infeasible: {0}")]
    GenerationInfeasible(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{}:{line}: node index {index} outside 0..{d}", path.display())]
    IndexOutOfRange {
        path: PathBuf,
        line: usize,
        index: usize,
        d: usize,
    },
}

impl Error {
    /// True for failures caused by bad input files or paths rather than by
    /// the numerical pipeline.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::IndexOutOfRange { .. }
            | Error::InvalidConfig(_)
            | Error::InvalidAdjacency(_) => true,
            Error::NotSymmetric { .. } => true,
            Error::Stage { source, .. } => source.is_input_error(),
            _ => false,
        }
    }

    /// The innermost error, with stage tags stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
