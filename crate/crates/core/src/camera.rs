//! Central projection of skeletons and its analytic derivatives.
//!
//! A keypoint `y_i` in the object frame maps to camera coordinates
//! `p_i = R(omega) y_i + t` and then to the image plane as
//! `(f p_x / p_z, f p_y / p_z)`, with the principal point at the origin.
//!
//! Parameter vectors and Jacobian columns share one layout,
//! `[alpha_1..alpha_K, omega_1..omega_3, t_1..t_3, f]`, and flattened 2D
//! keypoints are interleaved as `[x_0, y_0, x_1, y_1, ...]`.

use nalgebra::{DMatrix, DVector, Matrix2xX, Matrix3, Matrix3xX, Vector3};

use crate::error::{Error, Result};
use crate::skeleton::{Shape3D, SkeletonSpec, StructParams};

/// Minimum admissible keypoint depth in camera coordinates.
pub const DEPTH_EPSILON: f64 = 1e-4;

/// Below this rotation angle the exponential map uses its Taylor expansion.
const SMALL_ANGLE: f64 = 1e-8;

/// Number of pose parameters appended after the structural weights.
pub const POSE_DOF: usize = 7;

/// Camera extrinsics (axis-angle rotation, translation) and focal length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub omega: Vector3<f64>,
    pub t: Vector3<f64>,
    pub f: f64,
}

impl CameraPose {
    pub fn new(omega: Vector3<f64>, t: Vector3<f64>, f: f64) -> Result<Self> {
        let pose = Self { omega, t, f };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if self.omega.iter().chain(self.t.iter()).any(|v| !v.is_finite()) || !self.f.is_finite() {
            return Err(Error::argument("camera pose must be finite"));
        }
        if self.omega.norm() >= std::f64::consts::PI {
            return Err(Error::argument("rotation angle must be below pi"));
        }
        if self.f <= 0.0 {
            return Err(Error::argument("focal length must be positive"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rodrigues(&self.omega)
    }
}

/// 2D image-plane keypoints, one column per keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints2D {
    pub coords: Matrix2xX<f64>,
}

impl Keypoints2D {
    pub fn new(coords: Matrix2xX<f64>) -> Self {
        Self { coords }
    }

    pub fn n_keypoints(&self) -> usize {
        self.coords.ncols()
    }

    /// Interleaved `[x_0, y_0, x_1, y_1, ...]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.coords.as_slice().to_vec()
    }

    /// Keeps only the flagged columns.
    pub fn select(&self, mask: &[bool]) -> Keypoints2D {
        let cols: Vec<usize> = (0..self.n_keypoints()).filter(|&i| mask[i]).collect();
        Keypoints2D::new(Matrix2xX::from_fn(cols.len(), |r, c| self.coords[(r, cols[c])]))
    }
}

/// Derivative of flattened 2D keypoints with respect to `[alpha, omega, t, f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionJacobian {
    pub matrix: DMatrix<f64>,
}

/// Skew-symmetric cross-product matrix `[v]_x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from axis-angle to a rotation matrix.
pub fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Rotation matrix and its partial derivatives `dR/d omega_j`.
pub fn rodrigues_with_derivative(omega: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let r = rodrigues(omega);
    let theta2 = omega.norm_squared();
    let wx = skew(omega);
    let mut d = [Matrix3::zeros(); 3];
    if theta2.sqrt() < SMALL_ANGLE {
        for (j, dj) in d.iter_mut().enumerate() {
            let ej = skew(&Vector3::ith(j, 1.0));
            *dj = ej + 0.5 * (ej * wx + wx * ej);
        }
        return (r, d);
    }
    // dR/dw_j = (w_j [w]_x + [w x (I - R) e_j]_x) R / |w|^2
    let i_minus_r = Matrix3::identity() - r;
    for (j, dj) in d.iter_mut().enumerate() {
        let v = omega.cross(&i_minus_r.column(j).into_owned());
        *dj = (omega[j] * wx + skew(&v)) * r / theta2;
    }
    (r, d)
}

/// Rotates and translates a shape into camera coordinates.
pub fn to_camera(shape: &Shape3D, pose: &CameraPose) -> Matrix3xX<f64> {
    let mut p = pose.rotation() * &shape.coords;
    for mut col in p.column_iter_mut() {
        col += pose.t;
    }
    p
}

fn check_depths(p: &Matrix3xX<f64>) -> Result<()> {
    for (i, col) in p.column_iter().enumerate() {
        if !(col.z > DEPTH_EPSILON) {
            return Err(Error::Domain {
                index: i,
                depth: col.z,
                epsilon: DEPTH_EPSILON,
            });
        }
    }
    Ok(())
}

/// Central projection of camera-frame points.
fn project_camera_points(p: &Matrix3xX<f64>, f: f64) -> Keypoints2D {
    Keypoints2D::new(Matrix2xX::from_fn(p.ncols(), |r, c| f * p[(r, c)] / p[(2, c)]))
}

/// Projects a shape through the camera; fails if any depth is at or below
/// [`DEPTH_EPSILON`].
pub fn project(shape: &Shape3D, pose: &CameraPose) -> Result<Keypoints2D> {
    if !(pose.f > 0.0) || !pose.f.is_finite() {
        return Err(Error::argument("focal length must be positive"));
    }
    let p = to_camera(shape, pose);
    check_depths(&p)?;
    Ok(project_camera_points(&p, pose.f))
}

/// `X = P(R sum_k alpha_k B_k + T)`.
pub fn reproject(spec: &SkeletonSpec, params: &StructParams, pose: &CameraPose) -> Result<Keypoints2D> {
    project(&spec.compose_shape(params)?, pose)
}

/// Camera-frame points and their stacked derivative `d p / d theta`.
///
/// The Jacobian has `3N` rows (three per keypoint) and `K + 7` columns; the
/// `f` column is zero because `p` does not depend on the focal length.
pub fn camera_points_jacobian(
    spec: &SkeletonSpec,
    params: &StructParams,
    pose: &CameraPose,
) -> Result<(Matrix3xX<f64>, DMatrix<f64>)> {
    let shape = spec.compose_shape(params)?;
    let n = spec.n_keypoints();
    let k = spec.n_bases();
    let (r, dr) = rodrigues_with_derivative(&pose.omega);
    let mut p = &r * &shape.coords;
    for mut col in p.column_iter_mut() {
        col += pose.t;
    }
    let mut jac = DMatrix::zeros(3 * n, k + POSE_DOF);
    for i in 0..n {
        let y = shape.coords.column(i);
        for (kk, b) in spec.base_shapes().iter().enumerate() {
            let d = &r * b.column(i);
            for a in 0..3 {
                jac[(3 * i + a, kk)] = d[a];
            }
        }
        for (j, drj) in dr.iter().enumerate() {
            let d = drj * y;
            for a in 0..3 {
                jac[(3 * i + a, k + j)] = d[a];
            }
        }
        for a in 0..3 {
            jac[(3 * i + a, k + 3 + a)] = 1.0;
        }
    }
    Ok((p, jac))
}

/// Projected keypoints together with the analytic projection Jacobian.
pub fn reproject_with_jacobian(
    spec: &SkeletonSpec,
    params: &StructParams,
    pose: &CameraPose,
) -> Result<(Keypoints2D, ProjectionJacobian)> {
    let (p, dp) = camera_points_jacobian(spec, params, pose)?;
    check_depths(&p)?;
    let n = p.ncols();
    let cols = dp.ncols();
    let f = pose.f;
    let mut jac = DMatrix::zeros(2 * n, cols);
    for i in 0..n {
        let (px, py, pz) = (p[(0, i)], p[(1, i)], p[(2, i)]);
        let inv = 1.0 / pz;
        // d(x, y) / d(p): [[f/z, 0, -f x/z^2], [0, f/z, -f y/z^2]]
        let gx = [f * inv, 0.0, -f * px * inv * inv];
        let gy = [0.0, f * inv, -f * py * inv * inv];
        for c in 0..cols - 1 {
            let d0 = dp[(3 * i, c)];
            let d1 = dp[(3 * i + 1, c)];
            let d2 = dp[(3 * i + 2, c)];
            jac[(2 * i, c)] = gx[0] * d0 + gx[2] * d2;
            jac[(2 * i + 1, c)] = gy[1] * d1 + gy[2] * d2;
        }
        jac[(2 * i, cols - 1)] = px * inv;
        jac[(2 * i + 1, cols - 1)] = py * inv;
    }
    Ok((project_camera_points(&p, f), ProjectionJacobian { matrix: jac }))
}

/// Analytic `d X / d [alpha, omega, t, f]`.
pub fn projection_jacobian(
    spec: &SkeletonSpec,
    params: &StructParams,
    pose: &CameraPose,
) -> Result<ProjectionJacobian> {
    Ok(reproject_with_jacobian(spec, params, pose)?.1)
}

/// Packs parameters into the shared `[alpha, omega, t, f]` layout.
pub fn pack_theta(params: &StructParams, pose: &CameraPose) -> DVector<f64> {
    let k = params.len();
    let mut theta = DVector::zeros(k + POSE_DOF);
    theta.rows_mut(0, k).copy_from_slice(&params.alpha);
    theta.fixed_rows_mut::<3>(k).copy_from(&pose.omega);
    theta.fixed_rows_mut::<3>(k + 3).copy_from(&pose.t);
    theta[k + 6] = pose.f;
    theta
}

/// Inverse of [`pack_theta`].
pub fn unpack_theta(theta: &[f64], k: usize) -> (StructParams, CameraPose) {
    let params = StructParams::new(theta[..k].to_vec());
    let pose = CameraPose {
        omega: Vector3::new(theta[k], theta[k + 1], theta[k + 2]),
        t: Vector3::new(theta[k + 3], theta[k + 4], theta[k + 5]),
        f: theta[k + 6],
    };
    (params, pose)
}

/// Central-difference Jacobian of [`reproject`], used as a test oracle.
pub fn numeric_jacobian(
    spec: &SkeletonSpec,
    params: &StructParams,
    pose: &CameraPose,
    step: f64,
) -> Result<ProjectionJacobian> {
    if !(step > 0.0) {
        return Err(Error::argument("finite-difference step must be positive"));
    }
    let k = spec.n_bases();
    let theta = pack_theta(params, pose);
    let n = spec.n_keypoints();
    let mut jac = DMatrix::zeros(2 * n, theta.len());
    for j in 0..theta.len() {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[j] += step;
        minus[j] -= step;
        let (ap, pp) = unpack_theta(plus.as_slice(), k);
        let (am, pm) = unpack_theta(minus.as_slice(), k);
        let xp = reproject(spec, &ap, &pp)?;
        let xm = reproject(spec, &am, &pm)?;
        for (r, (a, b)) in xp.coords.iter().zip(xm.coords.iter()).enumerate() {
            jac[(r, j)] = (a - b) / (2.0 * step);
        }
    }
    Ok(ProjectionJacobian { matrix: jac })
}
