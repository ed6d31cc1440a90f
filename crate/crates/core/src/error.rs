use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite attention logit at token {token}")]
    NumericOverflow { token: usize },

    #[error("non-finite gradient intermediate (prompt seed {seed:?}): {what}")]
    NonFiniteGradient { what: &'static str, seed: Option<u64> },

    #[error("identity not applicable: {0}")]
    IdentityNotApplicable(String),

    #[error("feature construction failed: {0}")]
    Construction(String),

    #[error("generation failed after {attempts} rejected draws: {what}")]
    GenerationFailure { attempts: usize, what: String },

    #[error("task family {family} infeasible after {attempts} draws: failing invariant {invariant}")]
    FamilyInfeasible {
        family: String,
        attempts: usize,
        invariant: String,
    },

    #[error(
        "training diverged at epoch {epoch} (loss {loss}); last stable epoch {last_stable:?}; try a smaller learning rate"
    )]
    Divergence {
        epoch: usize,
        last_stable: Option<usize>,
        loss: f64,
    },

    #[error("scaling fit for {variable} aborted: {reason}")]
    Fit { variable: String, reason: String },

    #[error("malformed trajectory CSV: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
