//! Rotation-group primitives: skew operator, exponential and logarithmic maps.
//!
//! Rotations are carried either as a canonical axis-angle vector ([`RotVec`],
//! angle in [0, π]) or as a validated direction-cosine matrix ([`RotMat`]).
//! Only the operations needed by the measurement model and the kinematic
//! propagation are provided; quaternions and Lie-group Jacobians are out of
//! scope.

use nalgebra::{Matrix3, Vector3};

/// Rotation angle below which Rodrigues coefficients switch to their
/// second-order Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;

/// Per-entry tolerance for the orthonormality and determinant checks of
/// [`RotMat::from_matrix`].
const ROTMAT_TOL: f64 = 1e-9;

/// Angle within which of π the logarithm switches to the diagonal-based
/// axis extraction. The θ/(2 sin θ) form loses ~|Δθ|/sin θ relative accuracy
/// as sin θ → 0, so the switch happens well before that dominates 1e-9.
const NEAR_PI: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub enum So3Error {
    /// Matrix failed the orthonormality or determinant tolerance.
    InvalidRotation { max_deviation: f64 },
}

impl std::fmt::Display for So3Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            So3Error::InvalidRotation { max_deviation } => write!(
                f,
                "matrix is not a rotation (max deviation {max_deviation:.3e} exceeds {ROTMAT_TOL:.0e})"
            ),
        }
    }
}

impl std::error::Error for So3Error {}

/// Canonical axis-angle rotation vector.
///
/// The stored angle (vector norm) is always in [0, π]. Angles above π wrap to
/// the equivalent short representation. At exactly π the axis sign is
/// ambiguous (φ and −φ encode the same rotation); the convention here is that
/// the first nonzero component of the axis is positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotVec(Vector3<f64>);

impl RotVec {
    pub fn new(axis_angle: Vector3<f64>) -> Self {
        RotVec(canonicalize(axis_angle))
    }

    pub fn zero() -> Self {
        RotVec(Vector3::zeros())
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

impl From<Vector3<f64>> for RotVec {
    fn from(v: Vector3<f64>) -> Self {
        RotVec::new(v)
    }
}

fn canonicalize(v: Vector3<f64>) -> Vector3<f64> {
    let theta = v.norm();
    if theta <= std::f64::consts::PI {
        return fix_pi_sign(v, theta);
    }
    let axis = v / theta;
    // Wrap to (-π, π], then fold negative angles into the axis direction.
    let wrapped = (theta + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
        - std::f64::consts::PI;
    let folded = axis * wrapped;
    fix_pi_sign(folded, wrapped.abs())
}

/// At exactly θ = π, pick the representative whose first nonzero axis
/// component is positive.
fn fix_pi_sign(v: Vector3<f64>, theta: f64) -> Vector3<f64> {
    if theta == std::f64::consts::PI {
        for i in 0..3 {
            if v[i] != 0.0 {
                return if v[i] < 0.0 { -v } else { v };
            }
        }
    }
    v
}

/// Validated 3×3 rotation matrix (direction cosines).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotMat(Matrix3<f64>);

impl RotMat {
    pub fn identity() -> Self {
        RotMat(Matrix3::identity())
    }

    /// Validates `mᵀm = I` and `det m = 1` to within 1e-9 per entry.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, So3Error> {
        let gram = m.transpose() * m;
        let mut max_dev: f64 = (m.determinant() - 1.0).abs();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((gram[(i, j)] - target).abs());
            }
        }
        if !max_dev.is_finite() || max_dev > ROTMAT_TOL {
            return Err(So3Error::InvalidRotation { max_deviation: max_dev });
        }
        Ok(RotMat(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Composition `self · other` (apply `other` first).
    pub fn compose(&self, other: &RotMat) -> RotMat {
        RotMat(self.0 * other.0)
    }

    pub fn transpose(&self) -> RotMat {
        RotMat(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Inverse rotation applied to `v` without forming the transpose.
    pub fn rotate_inv(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.tr_mul(v)
    }
}

/// Skew-symmetric cross-product matrix: `skew(v) · w = v × w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// Exponential map (Rodrigues rotation) from an axis-angle vector.
pub fn exp_so3(phi: &RotVec) -> RotMat {
    let v = phi.as_vector();
    let theta = v.norm();
    let theta2 = theta * theta;
    // sin θ / θ and (1 − cos θ) / θ², with Taylor fallbacks near zero.
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew(v);
    RotMat(Matrix3::identity() + a * k + b * (k * k))
}

/// Logarithmic map from a rotation matrix to its canonical axis-angle vector.
///
/// Returned angle is in [0, π]. Near θ = π the axis is recovered from the
/// largest diagonal element of the symmetric part; the sign convention at
/// exactly π is documented on [`RotVec`].
pub fn log_so3(r: &RotMat) -> RotVec {
    let m = r.matrix();
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let cos_theta = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();

    if theta < SMALL_ANGLE {
        // φ ≈ vee(R − Rᵀ)/2, already within tolerance of the exact value.
        return RotVec::new(vee_antisymmetric(m) * 0.5);
    }

    if std::f64::consts::PI - theta > NEAR_PI {
        let scale = theta / (2.0 * theta.sin());
        return RotVec::new(vee_antisymmetric(m) * scale);
    }

    // Near π: uuᵀ = (A − cos θ·I) / (1 − cos θ) with A the symmetric part.
    // The largest diagonal entry gives the best-conditioned axis component.
    // acos of the trace is ill-conditioned here (error ~ ε/sin θ); the
    // antisymmetric part gives sin θ with absolute accuracy instead.
    let sin_theta = (vee_antisymmetric(m).norm() * 0.5).clamp(0.0, 1.0);
    let theta = std::f64::consts::PI - sin_theta.asin();
    let one_minus_cos = 1.0 - cos_theta;
    let diag = [
        (m[(0, 0)] - cos_theta) / one_minus_cos,
        (m[(1, 1)] - cos_theta) / one_minus_cos,
        (m[(2, 2)] - cos_theta) / one_minus_cos,
    ];
    let i = if diag[0] >= diag[1] && diag[0] >= diag[2] {
        0
    } else if diag[1] >= diag[2] {
        1
    } else {
        2
    };
    let ui = diag[i].max(0.0).sqrt();
    let mut axis = Vector3::zeros();
    axis[i] = ui;
    for j in 0..3 {
        if j != i {
            let sym = 0.5 * (m[(i, j)] + m[(j, i)]);
            axis[j] = sym / one_minus_cos / ui;
        }
    }
    axis.normalize_mut();
    // Fix the overall sign from the antisymmetric part while sin θ is still
    // meaningful; at exactly π canonicalization settles the tie.
    let w = vee_antisymmetric(m);
    if w.dot(&axis) < 0.0 {
        axis = -axis;
    }
    RotVec::new(axis * theta)
}

/// Extracts v from the antisymmetric part of m: (m − mᵀ) = 2·skew(v)·sinθ/... callers scale.
fn vee_antisymmetric(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
}
