use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("hard-core exclusion violated: pair ({i}, {j}) at distance {dist:.6e} < {eps:.6e}")]
    ExclusionViolated { i: usize, j: usize, dist: f64, eps: f64 },

    #[error("packing too dense: placement failed after {attempts} insertion attempts")]
    DensityTooHigh { attempts: u64 },

    #[error("tagged weight too peaked: acceptance {acceptance:.3e} after {trials} trials")]
    WeightTooPeaked { acceptance: f64, trials: u64 },

    #[error("positions are not at contact: |delta| = {dist:.17e}, diameter = {eps:.17e}")]
    NotAtContact { dist: f64, eps: f64 },

    #[error("deflection is not a unit vector: |omega| = {norm:.17e}")]
    NotUnit { norm: f64 },

    #[error("event time regression: event at t = {event:.17e} behind clock t = {clock:.17e}")]
    EventTimeRegression { event: f64, clock: f64 },

    #[error("quadrature did not converge: residual {residual:.3e} after {levels} refinements")]
    QuadratureNoConvergence { residual: f64, levels: u32 },

    #[error("rejection envelope misconfigured: acceptance {acceptance:.3e} over {proposals} proposals")]
    EnvelopeMisconfigured { acceptance: f64, proposals: u64 },

    #[error("velocity grid too coarse: fraction {lost:.3e} of scattered mass falls outside the cutoff")]
    GridTruncation { lost: f64 },

    #[error("window [{lo:.6e}, {hi:.6e}] not covered by recorded data [{have_lo:.6e}, {have_hi:.6e}]")]
    WindowNotCovered { lo: f64, hi: f64, have_lo: f64, have_hi: f64 },

    #[error("trajectory too short for the requested analysis: {0}")]
    TooShort(String),

    #[error("no decorrelation plateau found: autocorrelation still above noise at max lag {max_lag:.6e}")]
    NoPlateau { max_lag: f64 },

    #[error("conjugate gradient stalled: residual {residual:.3e} after {iters} iterations")]
    CgNoConvergence { residual: f64, iters: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}
