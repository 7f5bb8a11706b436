//! Numerical evaluation of finite-time multi-point distributions of TASEP on
//! the integer lattice and on a ring, the limiting KPZ multi-point
//! distributions for step and flat initial data, and a set of independent
//! stochastic and exact-Markov-chain oracles used to cross-validate them.
//!
//! The probability formulas are contour integrals of Fredholm determinants on
//! nested circle systems; the library evaluates them by spectrally accurate
//! trapezoid quadrature and Nyström discretization.

pub mod cauchysum;
pub mod limits;
pub mod multipoint;
pub mod periodic;
pub mod quadrature;
pub mod simulate;
pub mod symfunc;

pub use num_complex::Complex64;

/// Library-wide error type.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// An integrand or kernel produced a non-finite value.
    #[error("numerical domain error: {0}")]
    NumericalDomain(String),
    /// An iterative scheme did not reach the requested tolerance.
    #[error("convergence failure: {message} (best value {best})")]
    Convergence { message: String, best: Complex64 },
    /// Inputs collide with a pole or a removable-singularity configuration.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// A linear solve was too ill-conditioned to trust.
    #[error("conditioning failure: {0}")]
    Conditioning(String),
    /// The requested regime is outside what the implementation supports.
    #[error("unsupported regime: {0}")]
    Unsupported(String),
    /// Structurally invalid input (failed validation).
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Where a probability value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Fredholm,
    Series,
    Periodic,
    Mc,
    Ctmc,
    Poisson,
}

/// A probability computed from a complex-valued contour integral.
///
/// The raw integral is kept alongside the cleaned-up real value; the imaginary
/// part is a quality indicator, not noise to be discarded silently.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ProbabilityResult {
    /// Real probability after cleanup, clamped to [-eps, 1+eps].
    pub value: f64,
    /// Raw complex integral before cleanup.
    pub raw_re: f64,
    pub raw_im: f64,
    /// |imaginary part| of the raw integral.
    pub imag_residue: f64,
    /// Error estimate (quadrature refinement difference where available).
    pub error_estimate: f64,
    pub provenance: Provenance,
    /// Non-fatal quality warnings.
    pub warnings: Vec<String>,
}

impl ProbabilityResult {
    pub fn from_raw(raw: Complex64, error_estimate: f64, provenance: Provenance) -> Self {
        let mut warnings = Vec::new();
        if raw.im.abs() > 1e-6 {
            warnings.push(format!(
                "imaginary residue {:.3e} exceeds 1e-6 quality threshold",
                raw.im.abs()
            ));
        }
        let eps = 1e-6;
        let mut value = raw.re;
        if value < -eps || value > 1.0 + eps {
            warnings.push(format!("value {value:.6e} outside [0,1] sanity window"));
        }
        value = value.clamp(-eps, 1.0 + eps);
        Self {
            value,
            raw_re: raw.re,
            raw_im: raw.im,
            imag_residue: raw.im.abs(),
            error_estimate,
            provenance,
            warnings,
        }
    }

    pub fn from_real(value: f64, error_estimate: f64, provenance: Provenance) -> Self {
        Self {
            value,
            raw_re: value,
            raw_im: 0.0,
            imag_residue: 0.0,
            error_estimate,
            provenance,
            warnings: Vec::new(),
        }
    }
}

/// Pairwise (tree) summation. Keeps serial and chunk-parallel totals within a
/// couple of ulps of each other, unlike left-to-right accumulation.
pub fn pairwise_sum(values: &[Complex64]) -> Complex64 {
    match values.len() {
        0 => Complex64::new(0.0, 0.0),
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}
