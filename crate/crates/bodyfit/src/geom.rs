//! Small shared geometry helpers: affine transforms and differentiable
//! axis-angle rotations.

use nalgebra::{Matrix3, Point3, Vector3};

/// An affine transform `x -> linear * x + translation`.
///
/// Kept as an explicit pair instead of a homogeneous 4x4 matrix so that
/// composition and application stay cheap and the linear part is directly
/// available to gradient code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine3 {
    /// Linear part (may include rotation, scale, shear).
    pub linear: Matrix3<f64>,
    /// Translation part.
    pub translation: Vector3<f64>,
}

impl Affine3 {
    /// Identity transform.
    pub fn identity() -> Self {
        Affine3 { linear: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Pure translation.
    pub fn translation(t: Vector3<f64>) -> Self {
        Affine3 { linear: Matrix3::identity(), translation: t }
    }

    /// Pure linear map.
    pub fn linear(m: Matrix3<f64>) -> Self {
        Affine3 { linear: m, translation: Vector3::zeros() }
    }

    /// Uniform scale about the origin.
    pub fn scaling(s: f64) -> Self {
        Affine3 { linear: Matrix3::identity() * s, translation: Vector3::zeros() }
    }

    /// Applies the transform to a point.
    #[inline]
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.linear * p.coords + self.translation)
    }

    /// Applies only the linear part (for directions).
    #[inline]
    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.linear * v
    }

    /// Composition: `self * other` first applies `other`, then `self`.
    #[inline]
    pub fn compose(&self, other: &Affine3) -> Affine3 {
        Affine3 {
            linear: self.linear * other.linear,
            translation: self.linear * other.translation + self.translation,
        }
    }
}

/// Skew-symmetric cross-product matrix `[v]x` with `[v]x w = v x w`.
#[inline]
pub fn cross_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix for a rotation vector `w` (axis `w/|w|`, angle `|w|`).
///
/// Uses series expansions of the trigonometric coefficients near zero so the
/// map is smooth through the identity.
pub fn rotation_from_vector(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = sin_cos_coeffs(theta);
    let k = cross_matrix(w);
    Matrix3::identity() + k * a + k * k * b
}

/// Partial derivatives of [`rotation_from_vector`] with respect to the three
/// components of the rotation vector.
pub fn rotation_from_vector_jacobian(w: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = sin_cos_coeffs(theta);
    // a2 = a'(theta)/theta, b2 = b'(theta)/theta, both finite at theta = 0.
    let (a2, b2) = if theta < 1e-4 {
        (-(1.0 / 3.0) + theta2 / 30.0, -(1.0 / 12.0) + theta2 / 180.0)
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta * c - s) / (theta2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (theta2 * theta2),
        )
    };
    let k = cross_matrix(w);
    let k2 = k * k;
    std::array::from_fn(|i| {
        let mut e = Vector3::zeros();
        e[i] = 1.0;
        let ke = cross_matrix(&e);
        (k * a2 + k2 * b2) * w[i] + ke * a + (ke * k + k * ke) * b
    })
}

/// Rotation matrix about unit axis `n` by angle `alpha`.
///
/// `n` must have unit length; callers normalize their stored axis first.
pub fn rotation_about_axis(n: &Vector3<f64>, alpha: f64) -> Matrix3<f64> {
    let (s, c) = alpha.sin_cos();
    let k = cross_matrix(n);
    Matrix3::identity() + k * s + (n * n.transpose() - Matrix3::identity()) * (1.0 - c)
}

/// Derivative of [`rotation_about_axis`] with respect to the angle.
pub fn rotation_about_axis_dalpha(n: &Vector3<f64>, alpha: f64) -> Matrix3<f64> {
    let (s, c) = alpha.sin_cos();
    let k = cross_matrix(n);
    k * c + (n * n.transpose() - Matrix3::identity()) * s
}

/// Partial derivatives of [`rotation_about_axis`] with respect to the three
/// components of the unit axis (treating `n` as free; chain through the
/// normalization separately).
pub fn rotation_about_axis_daxis(n: &Vector3<f64>, alpha: f64) -> [Matrix3<f64>; 3] {
    let (s, c) = alpha.sin_cos();
    std::array::from_fn(|i| {
        let mut e = Vector3::zeros();
        e[i] = 1.0;
        cross_matrix(&e) * s + (e * n.transpose() + n * e.transpose()) * (1.0 - c)
    })
}

/// Stable `sin(t)/t` and `(1-cos(t))/t^2`.
fn sin_cos_coeffs(theta: f64) -> (f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        ((theta.sin()) / theta, (1.0 - theta.cos()) / (theta * theta))
    }
}
