use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label {value} outside [0, 1]{}", fmt_row(.row))]
    LabelOutOfRange { value: f64, row: Option<usize> },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid group family: {0}")]
    InvalidGroups(String),

    #[error("group `{0}` has no predicate and cannot be evaluated on new points")]
    PredicateUnavailable(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("no violation found on the search grid")]
    NotFound,

    #[error(
        "no termination after {updates} updates (budget {budget:.3}); \
         the declared Lipschitz constant is likely too small for this data"
    )]
    NonTermination { updates: usize, budget: f64 },

    #[error(
        "update {step} would leave group `{group}` at gamma {gamma} unchanged; \
         alpha is below what the declared Lipschitz constant supports"
    )]
    Stalled { step: usize, gamma: f64, group: String },

    #[error("stage game solver failed (matrix hash {hash:016x}, duality gap {gap:e})")]
    SolverNonConvergence { hash: u64, gap: f64 },

    #[error("adversary contract violation: {0}")]
    Adversary(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn fmt_row(row: &Option<usize>) -> String {
    match row {
        Some(r) => format!(" at row {r}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
