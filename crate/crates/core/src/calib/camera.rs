use nalgebra::{Matrix2, Matrix2x3, Matrix3, Point2, Point3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, tolerance, Scalar};

/// Points closer to the camera plane than this (in world units) are rejected.
pub const DEPTH_EPSILON: f64 = 1e-8;
/// Convergence tolerance of [`CameraModel::undistort`], in normalized units.
pub const UNDISTORT_TOL: f64 = 1e-10;
pub const UNDISTORT_MAX_ITER: usize = 50;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

/// Two-term radial plus tangential (Brown-Conrady) distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distortion<T> {
    pub k1: T,
    pub k2: T,
    pub p1: T,
    pub p2: T,
}

impl<T: Scalar> Distortion<T> {
    pub fn none() -> Self {
        Distortion { k1: T::zero(), k2: T::zero(), p1: T::zero(), p2: T::zero() }
    }

    pub fn is_zero(&self) -> bool {
        self.k1 == T::zero() && self.k2 == T::zero() && self.p1 == T::zero() && self.p2 == T::zero()
    }

    /// Radial factor `1 + k1 r^2 + k2 r^4`.
    #[inline]
    pub fn radial(&self, x: T, y: T) -> T {
        let r2 = x * x + y * y;
        T::one() + self.k1 * r2 + self.k2 * r2 * r2
    }

    /// Tangential offsets `(x_t, y_t)`.
    #[inline]
    pub fn tangential(&self, x: T, y: T) -> (T, T) {
        let two = lit::<T>(2.0);
        let r2 = x * x + y * y;
        let xt = two * self.p1 * x * y + self.p2 * (r2 + two * x * x);
        let yt = two * self.p2 * x * y + self.p1 * (r2 + two * y * y);
        (xt, yt)
    }

    /// Maps undistorted normalized coordinates to distorted normalized coordinates.
    #[inline]
    pub fn apply(&self, x: T, y: T) -> (T, T) {
        let dr = self.radial(x, y);
        let (xt, yt) = self.tangential(x, y);
        (x * dr + xt, y * dr + yt)
    }

    /// Jacobian of [`Distortion::apply`] with respect to `(x, y)`.
    pub fn jacobian(&self, x: T, y: T) -> Matrix2<T> {
        let two = lit::<T>(2.0);
        let six = lit::<T>(6.0);
        let r2 = x * x + y * y;
        let dr = T::one() + self.k1 * r2 + self.k2 * r2 * r2;
        // d(dr)/dx = 2x (k1 + 2 k2 r^2), likewise for y
        let g = two * (self.k1 + two * self.k2 * r2);
        let ddr_dx = g * x;
        let ddr_dy = g * y;
        let dxt_dx = two * self.p1 * y + six * self.p2 * x;
        let dxt_dy = two * self.p1 * x + two * self.p2 * y;
        let dyt_dx = two * self.p2 * y + two * self.p1 * x;
        let dyt_dy = two * self.p2 * x + six * self.p1 * y;
        Matrix2::new(
            dr + x * ddr_dx + dxt_dx,
            x * ddr_dy + dxt_dy,
            y * ddr_dx + dyt_dx,
            dr + y * ddr_dy + dyt_dy,
        )
    }
}

/// One calibrated camera: extrinsics `(R, t)`, intrinsics and lens distortion.
///
/// World points map to pixels by `X_cam = R X + t`, perspective division,
/// distortion, then the intrinsic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel<T: Scalar> {
    name: String,
    rotation: Matrix3<T>,
    translation: Vector3<T>,
    intrinsics: Intrinsics<T>,
    distortion: Distortion<T>,
}

impl<T: Scalar> CameraModel<T> {
    pub fn new(
        name: impl Into<String>,
        rotation: Matrix3<T>,
        translation: Vector3<T>,
        intrinsics: Intrinsics<T>,
        distortion: Distortion<T>,
    ) -> Result<Self> {
        let name = name.into();
        let tol: T = tolerance(1e-9, 100.0);
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.iter().any(|v| !v.is_finite() || v.abs() > tol) {
            return Err(Error::InvalidModel(format!("camera {name}: rotation is not orthonormal")));
        }
        if (rotation.determinant() - T::one()).abs() > tol {
            return Err(Error::InvalidModel(format!("camera {name}: rotation determinant is not +1")));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel(format!("camera {name}: non-finite translation")));
        }
        let Intrinsics { fx, fy, cx, cy } = intrinsics;
        if !(fx > T::zero() && fy > T::zero()) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::InvalidModel(format!("camera {name}: focal lengths must be positive")));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidModel(format!("camera {name}: non-finite optical center")));
        }
        let d = distortion;
        if ![d.k1, d.k2, d.p1, d.p2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidModel(format!("camera {name}: non-finite distortion")));
        }
        Ok(CameraModel { name, rotation, translation, intrinsics, distortion })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.translation
    }

    pub fn intrinsics(&self) -> &Intrinsics<T> {
        &self.intrinsics
    }

    pub fn distortion(&self) -> &Distortion<T> {
        &self.distortion
    }

    /// Same camera with different distortion coefficients.
    pub fn with_distortion(&self, distortion: Distortion<T>) -> Result<Self> {
        Self::new(self.name.clone(), self.rotation, self.translation, self.intrinsics, distortion)
    }

    pub fn with_intrinsics(&self, intrinsics: Intrinsics<T>) -> Result<Self> {
        Self::new(self.name.clone(), self.rotation, self.translation, intrinsics, self.distortion)
    }

    /// World point expressed in this camera's frame.
    #[inline]
    pub fn to_camera_frame(&self, p: &Point3<T>) -> Vector3<T> {
        self.rotation * p.coords + self.translation
    }

    /// Perspective-normalized, undistorted coordinates `(X/Z, Y/Z)`.
    pub fn normalize(&self, p: &Point3<T>) -> Result<Vector2<T>> {
        let c = self.to_camera_frame(p);
        check_depth(c.z)?;
        Ok(Vector2::new(c.x / c.z, c.y / c.z))
    }

    #[inline]
    pub fn normalized_to_pixel(&self, xd: T, yd: T) -> Point2<T> {
        let k = &self.intrinsics;
        Point2::new(k.fx * xd + k.cx, k.fy * yd + k.cy)
    }

    #[inline]
    pub fn pixel_to_normalized(&self, q: &Point2<T>) -> (T, T) {
        let k = &self.intrinsics;
        ((q.x - k.cx) / k.fx, (q.y - k.cy) / k.fy)
    }

    /// Projects a world point to pixel coordinates.
    pub fn project(&self, p: &Point3<T>) -> Result<Point2<T>> {
        let n = self.normalize(p)?;
        let (xd, yd) = self.distortion.apply(n.x, n.y);
        Ok(self.normalized_to_pixel(xd, yd))
    }

    /// Projection together with its analytic 2x3 Jacobian with respect to the
    /// world point.
    pub fn project_with_jacobian(&self, p: &Point3<T>) -> Result<(Point2<T>, Matrix2x3<T>)> {
        let c = self.to_camera_frame(p);
        check_depth(c.z)?;
        let inv_z = T::one() / c.z;
        let x = c.x * inv_z;
        let y = c.y * inv_z;
        let (xd, yd) = self.distortion.apply(x, y);
        let d_norm = Matrix2x3::new(
            inv_z,
            T::zero(),
            -x * inv_z,
            T::zero(),
            inv_z,
            -y * inv_z,
        );
        let d_dist = self.distortion.jacobian(x, y);
        let k = Matrix2::new(self.intrinsics.fx, T::zero(), T::zero(), self.intrinsics.fy);
        let jac = k * d_dist * d_norm * self.rotation;
        Ok((self.normalized_to_pixel(xd, yd), jac))
    }

    /// Inverts distortion and intrinsics: pixel to undistorted normalized
    /// coordinates, by fixed-point iteration `x <- (x_q - x_t(x, y)) / d_r(x, y)`.
    /// Once within tolerance, iterates on while the residual keeps shrinking.
    pub fn undistort(&self, q: &Point2<T>) -> Result<Vector2<T>> {
        if !q.x.is_finite() || !q.y.is_finite() {
            return Err(Error::Data("cannot undistort a non-finite pixel".into()));
        }
        let (xq, yq) = self.pixel_to_normalized(q);
        let dist = &self.distortion;
        if dist.is_zero() {
            return Ok(Vector2::new(xq, yq));
        }
        let tol: T = tolerance(UNDISTORT_TOL, 16.0);
        let (mut x, mut y) = (xq, yq);
        let mut residual = T::max_value().unwrap_or_else(T::one);
        let mut best: Option<(T, T, T)> = None;
        for _ in 0..UNDISTORT_MAX_ITER {
            let (xd, yd) = dist.apply(x, y);
            residual = (xd - xq).abs().max((yd - yq).abs());
            if let Some((bx, by, br)) = best {
                if !(residual < br) {
                    return Ok(Vector2::new(bx, by));
                }
            }
            if residual < tol {
                best = Some((x, y, residual));
            }
            let dr = dist.radial(x, y);
            let (xt, yt) = dist.tangential(x, y);
            x = (xq - xt) / dr;
            y = (yq - yt) / dr;
            if !x.is_finite() || !y.is_finite() {
                break;
            }
        }
        if let Some((bx, by, _)) = best {
            return Ok(Vector2::new(bx, by));
        }
        let (xd, yd) = dist.apply(x, y);
        let last = (xd - xq).abs().max((yd - yq).abs());
        if last < tol {
            return Ok(Vector2::new(x, y));
        }
        Err(Error::NoConvergence {
            iterations: UNDISTORT_MAX_ITER,
            residual: to_f64(if last.is_finite() { last } else { residual }),
        })
    }
}

#[inline]
fn check_depth<T: Scalar>(z: T) -> Result<()> {
    if z > lit::<T>(DEPTH_EPSILON) {
        Ok(())
    } else {
        Err(Error::NonPositiveDepth { depth: to_f64(z) })
    }
}

/// Rotation matrix from a Rodrigues (axis times angle) vector.
pub fn rodrigues<T: Scalar>(v: Vector3<T>) -> Matrix3<T> {
    nalgebra::Rotation3::new(v).into_inner()
}
