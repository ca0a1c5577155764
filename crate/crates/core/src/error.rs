use nalgebra::Complex;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("equilibrium not found after {iterations} iterations (last residual {residual:.3e} pu)")]
    Equilibrium { iterations: usize, residual: f64 },

    #[error("simulation diverged at step {step} (t = {time:.3} s), generator {generator}")]
    Divergence {
        step: usize,
        time: f64,
        generator: usize,
    },

    #[error("insufficient data: need at least 2 samples, got {samples}")]
    InsufficientData { samples: usize },

    #[error("degenerate window: angle covariance is numerically zero (largest singular value {sigma_max:.3e})")]
    DegenerateWindow { sigma_max: f64 },

    #[error("state matrix is unstable; offending eigenvalues: {}", format_eigs(.eigenvalues))]
    Unstable { eigenvalues: Vec<Complex<f64>> },

    #[error("matrix is not diagonalizable within tolerance ({0})")]
    NonDiagonalizable(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("gain matrix has imaginary residue {residue:.3e} above bound {bound:.3e}; conjugate pairing is broken")]
    Conjugation { residue: f64, bound: f64 },

    #[error("mode index {index} out of range ({available} oscillatory modes)")]
    ModeIndex { index: usize, available: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Config(_)
            | Error::Dimension { .. }
            | Error::ModeIndex { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 2,
            _ => 3,
        }
    }

    /// Short machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::Dimension { .. } => "dimension",
            Error::Equilibrium { .. } => "equilibrium",
            Error::Divergence { .. } => "divergence",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::DegenerateWindow { .. } => "degenerate_window",
            Error::Unstable { .. } => "unstable",
            Error::NonDiagonalizable(_) => "non_diagonalizable",
            Error::NonFinite(_) => "non_finite",
            Error::Conjugation { .. } => "conjugation",
            Error::ModeIndex { .. } => "mode_index",
            Error::Numerical(_) => "numerical",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

fn format_eigs(eigs: &[Complex<f64>]) -> String {
    eigs.iter()
        .map(|l| format!("{:.6}{:+.6}j", l.re, l.im))
        .collect::<Vec<_>>()
        .join(", ")
}

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension {
            what,
            expected,
            found,
        });
    }
    Ok(())
}
