//! Centralized numerical tolerances.
//!
//! Every tolerance that two modules must agree on lives here, with the reason
//! it has the value it has. Test-only statistical thresholds stay in the tests.

/// Relative band around the sphere diameter inside which two centers count as
/// "at contact". Event times are roots of the exact flight quadratic, so the
/// residual |distance - eps| at a processed event is a few ulp of the box
/// size; 1e-9 relative leaves ~6 orders of margin while still catching real
/// penetrations immediately.
pub const CONTACT_RTOL: f64 = 1e-9;

/// |omega| must be a unit vector to this absolute tolerance before a
/// deflection is applied. Normalized vectors are exact to a few ulp.
pub const UNIT_ATOL: f64 = 1e-12;

/// Collisions with |(v - v1) . omega| below this are tangential: the spheres
/// touch and separate without exchanging momentum. Treated as no-ops.
pub const GRAZING_ATOL: f64 = 1e-12;

/// Momentum and energy are conserved identically by the deflection formula;
/// this bounds accumulated floating-point drift checked per collision.
pub const CONSERVATION_RTOL: f64 = 1e-12;

/// Default target for adaptive quadratures (jump rate, weight normalization).
pub const QUAD_RTOL: f64 = 1e-10;

/// Default relative residual for the conjugate-gradient solve.
pub const CG_RTOL: f64 = 1e-12;

/// Largest fraction of scattered mass allowed to land outside the velocity
/// grid cutoff during operator assembly.
pub const GRID_TRUNCATION_MAX: f64 = 1e-3;
