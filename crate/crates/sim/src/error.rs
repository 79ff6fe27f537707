use pgee_core::PgeeError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("no intercept in [-20, 20] reaches event rate {rate}")]
    BracketFailure { rate: f64 },
    #[error("correlation matrix is singular for rho = {rho}")]
    SingularR { rho: f64 },
    #[error("conditional mean left (0, 1)")]
    InvalidDraw,
    #[error("every one of {attempts} generation attempts produced an invalid draw")]
    DrawAttemptsExhausted { attempts: usize },
    #[error("only {converged} converged replications, at least {required} required")]
    TooFewConverged { converged: usize, required: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] PgeeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
