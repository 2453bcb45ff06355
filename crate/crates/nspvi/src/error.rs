use thiserror::Error;

/// Errors raised by model evaluation, sampling, and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("weibull kernel evaluated at its x=0 singularity (shape {shape} < 1)")]
    EvalAtSingularity { shape: f64 },

    #[error("integral bounds reversed: a={a} > b={b}")]
    ReversedBounds { a: f64, b: f64 },

    #[error("log of zero intensity at t={t} (layer {layer}, process {index})")]
    LogOfZero { t: f64, layer: usize, index: usize },

    #[error("thinning bound violated: cif({t}) = {value} > bound {bound}")]
    DominationViolated { t: f64, value: f64, bound: f64 },

    #[error("inversion bisection failed to converge within {max_iters} iterations")]
    BisectionDiverged { max_iters: usize },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward pass requires a scalar root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("non-finite gradient in {context}; iteration aborted")]
    NonFiniteGradient { context: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("empty input: {0}")]
    EmptyInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
