use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure modes of the parsing,
/// power-flow, solver, training, and persistence layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing `{0}` block in case text")]
    MissingBlock(&'static str),
    #[error("malformed {block} row {row}: expected at least {expected} columns, found {found}")]
    MalformedRow {
        block: &'static str,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("no slack bus defined")]
    NoSlackBus,
    #[error("more than one slack bus defined")]
    MultipleSlackBus,
    #[error("duplicate bus id {0}")]
    DuplicateBusId(usize),
    #[error("branch {from}-{to} has zero series impedance while in service")]
    ZeroImpedanceBranch { from: usize, to: usize },
    #[error("diverged: mismatch {mismatch:.3e} after {iters} iterations")]
    Diverged { iters: usize, mismatch: f64 },
    #[error("singular Jacobian")]
    SingularJacobian,
    #[error("plan entry {index} references unknown {what} {id}")]
    PlanLocationInvalid {
        index: usize,
        what: &'static str,
        id: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("rank deficient: |R[{index},{index}]| = {value:.3e} below relative tolerance")]
    RankDeficient { index: usize, value: f64 },
    #[error("singular gain matrix")]
    SingularGain,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("series too short: need length > {need}, got {got}")]
    SeriesTooShort { need: usize, got: usize },
    #[error("ill-conditioned least-squares system")]
    IllConditioned,
    #[error("dataset generation failed at step {step}: {source}")]
    GenerationStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("column map invalid: {0}")]
    ColumnMapInvalid(String),
    #[error("degenerate series: {0}")]
    DegenerateSeries(String),
    #[error("schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable tag for structured error reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingBlock(_) => "missing_block",
            Error::MalformedRow { .. } => "malformed_row",
            Error::NoSlackBus => "no_slack_bus",
            Error::MultipleSlackBus => "multiple_slack_bus",
            Error::DuplicateBusId(_) => "duplicate_bus_id",
            Error::ZeroImpedanceBranch { .. } => "zero_impedance_branch",
            Error::Diverged { .. } => "diverged",
            Error::SingularJacobian => "singular_jacobian",
            Error::PlanLocationInvalid { .. } => "plan_location_invalid",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::SingularGain => "singular_gain",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::SeriesTooShort { .. } => "series_too_short",
            Error::IllConditioned => "ill_conditioned",
            Error::GenerationStep { .. } => "generation_step",
            Error::Parse(_) => "parse_error",
            Error::ColumnMapInvalid(_) => "column_map_invalid",
            Error::DegenerateSeries(_) => "degenerate_series",
            Error::SchemaMismatch { .. } => "schema_mismatch",
            Error::CorruptFile(_) => "corrupt_file",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
