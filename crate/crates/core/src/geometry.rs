//! Torus geometry and two-body hard-sphere kinematics.
//!
//! Positions live on the torus [0, side)^D. Displacements are reduced to the
//! nearest periodic image componentwise, which is also the globally nearest
//! image on a rectangular torus. Collision prediction solves the flight
//! quadratic |r + k*side + w t| = eps over the periodic images k reachable
//! within the horizon.

use crate::error::{Error, Result};
use crate::tol;
use serde::de::{SeqAccess, Visitor};
use serde::ser::SerializeTuple;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

/// Fixed-dimension coordinate vector; D is 2 or 3 everywhere in practice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vector<const D: usize>(pub [f64; D]);

impl<const D: usize> Serialize for Vector<D> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut t = s.serialize_tuple(D)?;
        for v in &self.0 {
            t.serialize_element(v)?;
        }
        t.end()
    }
}

impl<'de, const D: usize> Deserialize<'de> for Vector<D> {
    fn deserialize<Des: Deserializer<'de>>(d: Des) -> std::result::Result<Self, Des::Error> {
        struct ArrayVisitor<const D: usize>;
        impl<'de, const D: usize> Visitor<'de> for ArrayVisitor<D> {
            type Value = Vector<D>;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                write!(f, "an array of {D} floats")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = [0.0; D];
                for (i, slot) in out.iter_mut().enumerate() {
                    *slot = seq
                        .next_element()?
                        .ok_or_else(|| serde::de::Error::invalid_length(i, &self))?;
                }
                Ok(Vector(out))
            }
        }
        d.deserialize_tuple(D, ArrayVisitor::<D>)
    }
}

impl<const D: usize> Vector<D> {
    pub const ZERO: Self = Vector([0.0; D]);

    #[inline]
    pub fn dot(self, other: Self) -> f64 {
        let mut s = 0.0;
        for a in 0..D {
            s += self.0[a] * other.0[a];
        }
        s
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Largest absolute component.
    #[inline]
    pub fn norm_inf(self) -> f64 {
        let mut m = 0.0f64;
        for a in 0..D {
            m = m.max(self.0[a].abs());
        }
        m
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::InvalidParam(format!("cannot normalize vector of norm {n}")));
        }
        Ok(self * (1.0 / n))
    }

    pub fn is_finite(self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn from_fn(f: impl FnMut(usize) -> f64) -> Self {
        Vector(std::array::from_fn(f))
    }
}

impl<const D: usize> Default for Vector<D> {
    fn default() -> Self {
        Self::ZERO
    }
}

impl<const D: usize> Add for Vector<D> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        for a in 0..D {
            self.0[a] += rhs.0[a];
        }
        self
    }
}

impl<const D: usize> AddAssign for Vector<D> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        for a in 0..D {
            self.0[a] += rhs.0[a];
        }
    }
}

impl<const D: usize> Sub for Vector<D> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        for a in 0..D {
            self.0[a] -= rhs.0[a];
        }
        self
    }
}

impl<const D: usize> SubAssign for Vector<D> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        for a in 0..D {
            self.0[a] -= rhs.0[a];
        }
    }
}

impl<const D: usize> Mul<f64> for Vector<D> {
    type Output = Self;
    #[inline]
    fn mul(mut self, rhs: f64) -> Self {
        for a in 0..D {
            self.0[a] *= rhs;
        }
        self
    }
}

impl<const D: usize> Neg for Vector<D> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        for a in 0..D {
            self.0[a] = -self.0[a];
        }
        self
    }
}

impl<const D: usize> Index<usize> for Vector<D> {
    type Output = f64;
    #[inline]
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl<const D: usize> IndexMut<usize> for Vector<D> {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Flat torus [0, side)^D.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusGeometry<const D: usize> {
    side: f64,
}

impl<const D: usize> TorusGeometry<D> {
    pub fn new(side: f64) -> Result<Self> {
        if !(side.is_finite() && side > 0.0) {
            return Err(Error::InvalidParam(format!("torus side must be positive, got {side}")));
        }
        if !(2..=3).contains(&D) {
            return Err(Error::InvalidParam(format!("dimension must be 2 or 3, got {D}")));
        }
        Ok(TorusGeometry { side })
    }

    #[inline]
    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(D as i32)
    }

    /// Reduce a point into the fundamental cell [0, side)^D.
    #[inline]
    pub fn wrap(&self, mut x: Vector<D>) -> Vector<D> {
        for a in 0..D {
            let mut r = x.0[a].rem_euclid(self.side);
            // rem_euclid of a tiny negative rounds to `side` itself
            if r >= self.side {
                r -= self.side;
            }
            x.0[a] = r;
        }
        x
    }

    /// Componentwise nearest-image reduction of a displacement into
    /// [-side/2, side/2)^D.
    #[inline]
    pub fn minimal_image(&self, mut dx: Vector<D>) -> Vector<D> {
        let half = 0.5 * self.side;
        for a in 0..D {
            let mut r = dx.0[a].rem_euclid(self.side);
            if r >= self.side {
                r -= self.side;
            }
            if r >= half {
                r -= self.side;
            }
            dx.0[a] = r;
        }
        dx
    }

    /// Displacement `delta` with y + delta == x (mod side), componentwise in
    /// [-side/2, side/2); |delta| is the torus distance from y to x.
    #[inline]
    pub fn separation(&self, x: Vector<D>, y: Vector<D>) -> Vector<D> {
        self.minimal_image(x - y)
    }

    #[inline]
    pub fn distance(&self, x: Vector<D>, y: Vector<D>) -> f64 {
        self.separation(x, y).norm()
    }
}

/// Entry root of |r + w t| = eps, taken in the numerically stable quotient
/// form. Returns None when the pair recedes or misses. `c` must be
/// |r|^2 - eps^2 of the same image.
#[inline]
pub(crate) fn entry_root<const D: usize>(r: Vector<D>, w: Vector<D>, c: f64) -> Option<f64> {
    let a = w.norm_sq();
    if a == 0.0 {
        return None;
    }
    let bh = r.dot(w); // half the linear coefficient
    if bh >= 0.0 {
        return None; // receding (or tangent) along this image
    }
    let disc = bh * bh - a * c;
    if disc <= 0.0 {
        return None;
    }
    // entry root = (-bh - sqrt(disc))/a = c / (-bh + sqrt(disc)); the second
    // form avoids cancellation for grazing hits (disc ~ bh^2).
    let t = c / (-bh + disc.sqrt());
    if t > 0.0 {
        Some(t)
    } else {
        None
    }
}

/// First time in (0, horizon] at which two spheres of diameter `eps` touch,
/// including touches through the periodic boundary. None if they do not
/// collide within the horizon.
///
/// Errors if the pair already overlaps (beyond the contact tolerance) or the
/// image enumeration for this horizon would be unreasonably large.
pub fn predict_pair_collision<const D: usize>(
    x1: Vector<D>,
    v1: Vector<D>,
    x2: Vector<D>,
    v2: Vector<D>,
    eps: f64,
    geom: &TorusGeometry<D>,
    horizon: f64,
) -> Result<Option<f64>> {
    if !(eps > 0.0 && eps < 0.5 * geom.side()) {
        return Err(Error::InvalidParam(format!(
            "diameter must satisfy 0 < eps < side/2, got eps = {eps}, side = {}",
            geom.side()
        )));
    }
    if !(horizon > 0.0) {
        return Err(Error::InvalidParam(format!("horizon must be positive, got {horizon}")));
    }
    let r0 = geom.separation(x2, x1);
    let dist = r0.norm();
    if dist < eps * (1.0 - tol::CONTACT_RTOL) {
        return Err(Error::ExclusionViolated { i: 0, j: 1, dist, eps });
    }
    let w = v2 - v1;
    let side = geom.side();

    // Per-axis image layers reachable before the horizon runs out.
    let mut layers = [0i64; D];
    let mut count = 1u64;
    for a in 0..D {
        let reach = r0.0[a].abs() + w.0[a].abs() * horizon + eps;
        let k = (reach / side).ceil();
        if k > 32.0 {
            return Err(Error::InvalidParam(format!(
                "horizon {horizon} needs {k} image layers on axis {a}; split the prediction"
            )));
        }
        layers[a] = k as i64;
        count *= (2 * layers[a] + 1) as u64;
    }
    if count > 1_000_000 {
        return Err(Error::InvalidParam(format!(
            "image enumeration of {count} offsets is too large for horizon {horizon}"
        )));
    }

    let mut best: Option<f64> = None;
    let mut offset = layers.map(|k| -k);
    loop {
        let r = Vector::<D>::from_fn(|a| r0.0[a] + offset[a] as f64 * side);
        // c < 0 only happens for the minimal image inside the contact
        // tolerance band; its entry root is then <= 0 and drops out.
        let c = r.norm_sq() - eps * eps;
        if let Some(t) = entry_root(r, w, c) {
            if t <= horizon && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
        // advance the mixed-radix counter over offsets
        let mut a = 0;
        loop {
            if a == D {
                return Ok(best);
            }
            offset[a] += 1;
            if offset[a] <= layers[a] {
                break;
            }
            offset[a] = -layers[a];
            a += 1;
        }
    }
}

/// Unit contact normal from the first sphere's center to the second's through
/// the nearest image. The centers must be at distance eps (relative contact
/// tolerance).
pub fn contact_deflection<const D: usize>(
    x1: Vector<D>,
    x2: Vector<D>,
    geom: &TorusGeometry<D>,
    eps: f64,
) -> Result<Vector<D>> {
    let delta = geom.separation(x2, x1);
    let dist = delta.norm();
    if (dist - eps).abs() > tol::CONTACT_RTOL * eps {
        return Err(Error::NotAtContact { dist, eps });
    }
    delta.normalized()
}

/// Specular exchange of the normal velocity components:
/// v' = v - ((v - v1).omega) omega, v1' = v1 + ((v - v1).omega) omega.
///
/// Conserves momentum and kinetic energy identically and is an involution.
pub fn apply_elastic_collision<const D: usize>(
    v: Vector<D>,
    v1: Vector<D>,
    omega: Vector<D>,
) -> Result<(Vector<D>, Vector<D>)> {
    let n = omega.norm();
    if (n - 1.0).abs() > tol::UNIT_ATOL {
        return Err(Error::NotUnit { norm: n });
    }
    let sigma = (v - v1).dot(omega);
    Ok((v - omega * sigma, v1 + omega * sigma))
}
