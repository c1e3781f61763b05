use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid column parameters: {0}")]
    InvalidParams(String),
    #[error("mole fraction {value} outside [0, 1]")]
    Domain { value: f64 },
    #[error("holdup on stage {stage} is {holdup} kmol, below the 1e-6 kmol guard")]
    Singular { stage: usize, holdup: f64 },
    #[error("state has {got} entries, expected {expected}")]
    Shape { expected: usize, got: usize },
    #[error("noise entry {index} = {value} outside truncation bound {bound}")]
    NoiseBound { index: usize, value: f64, bound: f64 },
    #[error("steady state not found: residual {residual:e} after {iterations} Newton iterations")]
    NoConvergence { residual: f64, iterations: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("integration failed at t = {time} min: {source}")]
    Integration { time: f64, source: ModelError },
    #[error("sample {index} failed: {source}")]
    Sample { index: usize, source: Box<SimError> },
    #[error("policy shape mismatch: {0}")]
    PolicyShape(String),
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy spec: {0}")]
    Spec(String),
    #[error("parameter vector has {got} entries, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("unsupported policy file version {0}")]
    Version(u32),
    #[error("malformed policy file: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("need more observations than dimensions ({n_obs} <= {dim})")]
    InsufficientData { n_obs: usize, dim: usize },
    #[error("matrix is not positive semi-definite (pivot {pivot} = {value:e})")]
    NotPsd { pivot: usize, value: f64 },
    #[error("Sobol dimension {0} exceeds the supported maximum of 64")]
    Dimension(usize),
    #[error("Sobol point count {0} exceeds 2^20")]
    TooManyPoints(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("coordinate {coordinate} still violates state bounds after {attempts} resamples")]
    Resample { coordinate: usize, attempts: usize },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("iteration {iteration}: {source}")]
    Simulation { iteration: usize, source: SimError },
    #[error("iteration {iteration}: non-finite gradient entry {index} ({value})")]
    NonFinite { iteration: usize, index: usize, value: f64 },
    #[error("pruning removed every measurement (max |H| = {max_abs:e})")]
    EmptySelection { max_abs: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("objective window starts at {start} min but trajectory covers [{t0}, {t1}]")]
    Window { start: f64, t0: f64, t1: f64 },
    #[error("missing policy {0}")]
    MissingPolicy(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
}
