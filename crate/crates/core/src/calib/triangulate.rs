use nalgebra::{Matrix4, Point2, Point3, RowVector4};

use super::{CameraModel, Rig};
use crate::error::{Error, Result};
use crate::scalar::{lit, tolerance, Scalar};

/// A triangulated point with the larger of the two pixel reprojection errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTriangulation<T: Scalar> {
    pub point: Point3<T>,
    pub residual: T,
}

fn dlt_rows<T: Scalar>(cam: &CameraModel<T>, q: &Point2<T>) -> Result<[RowVector4<T>; 2]> {
    let n = cam.undistort(q)?;
    let r = cam.rotation();
    let t = cam.translation();
    let row = |i: usize| RowVector4::new(r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
    let (p0, p1, p2) = (row(0), row(1), row(2));
    Ok([p2 * n.x - p0, p2 * n.y - p1])
}

/// Linear (DLT) triangulation of one observation pair on undistorted
/// normalized coordinates.
pub fn triangulate_pair<T: Scalar>(
    cam_a: &CameraModel<T>,
    cam_b: &CameraModel<T>,
    q_a: &Point2<T>,
    q_b: &Point2<T>,
) -> Result<PairTriangulation<T>> {
    let ra = dlt_rows(cam_a, q_a)?;
    let rb = dlt_rows(cam_b, q_b)?;
    solve_pair(&ra, &rb, (cam_a, q_a), (cam_b, q_b))
}

fn solve_pair<T: Scalar>(
    [a0, a1]: &[RowVector4<T>; 2],
    [b0, b1]: &[RowVector4<T>; 2],
    (cam_a, q_a): (&CameraModel<T>, &Point2<T>),
    (cam_b, q_b): (&CameraModel<T>, &Point2<T>),
) -> Result<PairTriangulation<T>> {
    let mut a = Matrix4::zeros();
    a.set_row(0, a0);
    a.set_row(1, a1);
    a.set_row(2, b0);
    a.set_row(3, b1);

    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::NumericalFailure("SVD did not produce right singular vectors".into()))?;
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| {
        svd.singular_values[i].partial_cmp(&svd.singular_values[j]).unwrap_or(std::cmp::Ordering::Equal)
    });
    let s_max = svd.singular_values[order[3]];
    let s_second = svd.singular_values[order[1]];
    let rank_tol: T = tolerance(1e-12, 1e4);
    if !(s_max > T::zero()) || s_second <= s_max * rank_tol {
        return Err(Error::DegenerateGeometry("rays are parallel or coincide".into()));
    }
    let h = v_t.row(order[0]);
    // h is unit norm, so a vanishing w means the rays meet at infinity
    if h[3].abs() <= tolerance::<T>(1e-14, 10.0) {
        return Err(Error::DegenerateGeometry("point at infinity".into()));
    }
    let point = Point3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    let mut residual = T::zero();
    for (cam, q) in [(cam_a, q_a), (cam_b, q_b)] {
        let proj = cam.project(&point).map_err(|_| {
            Error::DegenerateGeometry("triangulated point lies behind a camera".into())
        })?;
        residual = residual.max((proj - q).norm());
    }
    Ok(PairTriangulation { point, residual })
}

/// Component-wise median; even counts average the two central values.
pub(crate) fn median_in_place<T: Scalar>(values: &mut [T]) -> T {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) * lit(0.5)
    }
}

/// Triangulates every usable camera pair and takes the component-wise median.
///
/// Pairs with a missing observation, or whose DLT is degenerate, are skipped.
pub fn triangulate_median<T: Scalar>(rig: &Rig<T>, points: &[Option<Point2<T>>]) -> Result<Point3<T>> {
    if points.len() != rig.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} observations for a {}-camera rig",
            points.len(),
            rig.len()
        )));
    }
    let valid: Vec<usize> = (0..points.len())
        .filter(|&i| points[i].is_some_and(|q| q.x.is_finite() && q.y.is_finite()))
        .collect();
    if valid.len() < 2 {
        return Err(Error::InsufficientViews { valid: valid.len(), required: 2 });
    }
    let rows: Vec<Option<[RowVector4<T>; 2]>> = valid
        .iter()
        .map(|&i| match dlt_rows(rig.camera(i), points[i].as_ref().unwrap()) {
            Ok(r) => Ok(Some(r)),
            Err(Error::NoConvergence { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut zs = Vec::new();
    for (k, &i) in valid.iter().enumerate() {
        for (l, &j) in valid.iter().enumerate().skip(k + 1) {
            let (Some(ri), Some(rj)) = (&rows[k], &rows[l]) else {
                continue;
            };
            let (qi, qj) = (points[i].as_ref().unwrap(), points[j].as_ref().unwrap());
            match solve_pair(ri, rj, (rig.camera(i), qi), (rig.camera(j), qj)) {
                Ok(tri) => {
                    xs.push(tri.point.x);
                    ys.push(tri.point.y);
                    zs.push(tri.point.z);
                }
                Err(Error::DegenerateGeometry(_)) | Err(Error::NoConvergence { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    if xs.is_empty() {
        return Err(Error::DegenerateGeometry("no camera pair could be triangulated".into()));
    }
    Ok(Point3::new(median_in_place(&mut xs), median_in_place(&mut ys), median_in_place(&mut zs)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{look_at_camera, Distortion, Intrinsics};
    use nalgebra::{Matrix3, Vector3};

    fn intr() -> Intrinsics<f64> {
        Intrinsics { fx: 800.0, fy: 800.0, cx: 640.0, cy: 512.0 }
    }

    fn stereo() -> (CameraModel<f64>, CameraModel<f64>) {
        let a = CameraModel::new("a", Matrix3::identity(), Vector3::new(0.0, 0.0, 0.0), intr(), Distortion::none())
            .unwrap();
        let b = CameraModel::new("b", Matrix3::identity(), Vector3::new(-0.5, 0.0, 0.0), intr(), Distortion::none())
            .unwrap();
        (a, b)
    }

    fn ring(n: usize, dist: Distortion<f64>) -> Rig<f64> {
        let cams = (0..n)
            .map(|i| {
                let ang = i as f64 * std::f64::consts::TAU / n as f64;
                let eye = Point3::new(3.0 * ang.cos(), 3.0 * ang.sin(), 1.0);
                look_at_camera(format!("cam{i}"), eye, Point3::origin(), intr(), dist).unwrap()
            })
            .collect();
        Rig::new(cams).unwrap()
    }

    #[test]
    fn stereo_round_trip() {
        let (a, b) = stereo();
        let p = Point3::new(0.1, 0.2, 3.0);
        let tri = triangulate_pair(&a, &b, &a.project(&p).unwrap(), &b.project(&p).unwrap()).unwrap();
        assert!((tri.point - p).norm() < 1e-8);
        assert!(tri.residual < 1e-6);
    }

    #[test]
    fn zero_baseline_is_degenerate() {
        let (a, _) = stereo();
        let q = a.project(&Point3::new(0.1, 0.2, 3.0)).unwrap();
        let err = triangulate_pair(&a, &a.clone(), &q, &q).unwrap_err();
        assert!(matches!(err, Error::DegenerateGeometry(_)), "{err:?}");
    }

    #[test]
    fn median_of_consistent_views() {
        let rig = ring(6, Distortion { k1: -0.1, k2: 0.01, p1: 0.0005, p2: -0.0003 });
        let p = Point3::new(0.2, -0.1, 0.3);
        let obs: Vec<_> = rig.cameras().iter().map(|c| Some(c.project(&p).unwrap())).collect();
        let est = triangulate_median(&rig, &obs).unwrap();
        assert!((est - p).norm() < 1e-8);
    }

    #[test]
    fn two_view_median_equals_pair() {
        let rig = ring(2, Distortion::none());
        let p = Point3::new(0.1, 0.1, 0.1);
        let obs: Vec<_> = rig
            .cameras()
            .iter()
            .map(|c| Some(c.project(&p).unwrap() + nalgebra::Vector2::new(0.3, -0.2)))
            .collect();
        let pair = triangulate_pair(rig.camera(0), rig.camera(1), &obs[0].unwrap(), &obs[1].unwrap()).unwrap();
        assert_eq!(triangulate_median(&rig, &obs).unwrap(), pair.point);
    }

    #[test]
    fn missing_views_are_skipped() {
        let rig = ring(4, Distortion::none());
        let p = Point3::new(0.0, 0.1, 0.2);
        let mut obs: Vec<_> = rig.cameras().iter().map(|c| Some(c.project(&p).unwrap())).collect();
        obs[1] = None;
        assert!((triangulate_median(&rig, &obs).unwrap() - p).norm() < 1e-8);
        obs[0] = None;
        obs[2] = None;
        assert!(matches!(
            triangulate_median(&rig, &obs),
            Err(Error::InsufficientViews { valid: 1, required: 2 })
        ));
    }

    #[test]
    fn even_median_averages_center() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(median_in_place(&mut v), 2.5);
    }
}
