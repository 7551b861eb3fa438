use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("column '{column}' not found in input header")]
    MissingColumn { column: String },

    #[error("cell '{value}' in row {row}, column '{column}' is not a valid number")]
    UnparseableCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("treatment cell '{value}' in row {row}, column '{column}' must be 0 or 1")]
    NonBinaryTreatment {
        row: usize,
        column: String,
        value: String,
    },

    #[error("cell {value} in row {row}, column '{column}' outside declared range [{low}, {high}]")]
    OutOfRange {
        row: usize,
        column: String,
        value: f64,
        low: f64,
        high: f64,
    },

    #[error("duplicate unit id '{id}'")]
    DuplicateUnitId { id: String },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("column '{column}' has no observed values to impute from")]
    AllMissing { column: String },

    #[error("dataset must be prepared before {op}")]
    NotPrepared { op: &'static str },

    #[error("design matrix is rank deficient; dependent columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("perfect separation detected (term '{term}'); the likelihood is unbounded")]
    PerfectSeparation { term: String },

    #[error("logistic fit did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("propensity score {value} is outside the open interval (0, 1)")]
    DegenerateScore { value: f64 },

    #[error("{group} group is empty{context}")]
    EmptyGroup {
        group: &'static str,
        context: String,
    },

    #[error("need at least {needed} control units, found {available}")]
    InsufficientControls { needed: usize, available: usize },

    #[error("match set is empty")]
    EmptyMatchSet,

    #[error("strata edges [{low}, {high}] do not cover the observed range [{obs_low}, {obs_high}]")]
    StrataCoverage {
        low: f64,
        high: f64,
        obs_low: f64,
        obs_high: f64,
    },

    #[error("sample of {n} units is too small to split (need at least {needed})")]
    SampleTooSmall { n: usize, needed: usize },

    #[error("leaf '{leaf}' has fewer than 2 treated or 2 control units; variance undefined")]
    UndefinedLeafVariance { leaf: String },

    #[error("leaf '{leaf}' treated share is {share}; criterion undefined at 0 or 1")]
    DegenerateLeafShare { leaf: String, share: f64 },

    #[error("tree has no leaf estimates; run leaf estimation first")]
    UnestimatedTree,

    #[error("forest contains no trees")]
    EmptyForest,

    #[error("unit falls in a non-estimable leaf in {failed} of {total} trees")]
    NonEstimablePrediction { failed: usize, total: usize },

    #[error("effect surface is defined over covariates, not over (propensity, resistance)")]
    SurfaceNotInScoreSpace,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
