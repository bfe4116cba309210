//! Optimization baseline: parallel-projection initialization, then
//! perspective refinement of the reprojection error.
//!
//! The first structural weight is frozen at 1 throughout. It would otherwise
//! trade off against the orthographic scale or against `t_z / f`.

use nalgebra::{DMatrix, DVector, Matrix2xX, Matrix3, Matrix3xX, Rotation3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{reproject_with_jacobian, CameraPose, Keypoints2D, DEPTH_EPSILON};
use crate::error::{Error, Result};
use crate::heatmap::{decode_argmax, HeatmapStack};
use crate::skeleton::{SkeletonSpec, StructParams};

/// Ridge weight pulling `alpha` towards the mean shape.
pub const ALPHA_RIDGE: f64 = 1e-6;
/// Fewest visible keypoints a fit accepts.
pub const MIN_VISIBLE: usize = 4;

/// Outcome of [`refine_perspective`] and [`fit_baseline`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: StructParams,
    pub pose: CameraPose,
    /// Mean squared reprojection error over visible keypoints.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Orthographic estimate `x ~ s * P(R Y) + t2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelInit {
    pub params: StructParams,
    pub rotation: Matrix3<f64>,
    pub translation: Vector2<f64>,
    pub scale: f64,
    /// Mean squared orthographic residual.
    pub residual: f64,
    /// Set when a basis system was rank deficient and only the ridge kept it solvable.
    pub regularized: bool,
}

/// Stopping rules and lifting constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub relative_tol: f64,
    /// Alternating rounds of the orthographic initializer.
    pub init_rounds: usize,
    /// Focal length assumed when lifting the orthographic guess.
    pub initial_focal: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            gradient_tol: 1e-8,
            relative_tol: 1e-10,
            init_rounds: 100,
            initial_focal: 2.0,
        }
    }
}

/// Input of [`fit_baseline`]: heatmaps are decoded by argmax first.
#[derive(Debug, Clone, Copy)]
pub enum FitInput<'a> {
    Heatmaps(&'a HeatmapStack),
    Keypoints(&'a Keypoints2D, &'a [bool]),
}

fn visible_columns(x: &Keypoints2D, visibility: &[bool]) -> Result<Vec<usize>> {
    if visibility.len() != x.n_keypoints() {
        return Err(Error::argument("visibility mask length differs from keypoint count"));
    }
    let cols: Vec<usize> = (0..visibility.len()).filter(|&i| visibility[i]).collect();
    if cols.len() < MIN_VISIBLE {
        return Err(Error::Underdetermined {
            visible: cols.len(),
            required: MIN_VISIBLE,
        });
    }
    Ok(cols)
}

fn centered(m: &Matrix3xX<f64>) -> (Matrix3xX<f64>, Vector3<f64>) {
    let mean = m.column_mean();
    let mut c = m.clone();
    for mut col in c.column_iter_mut() {
        col -= mean;
    }
    (c, mean)
}

/// Nearest matrix with orthonormal rows, by polar factorization.
fn polar_rows(m: &nalgebra::Matrix2x3<f64>) -> nalgebra::Matrix2x3<f64> {
    let svd = m.svd(true, true);
    svd.u.unwrap() * svd.v_t.unwrap()
}

fn complete_rotation(q: &nalgebra::Matrix2x3<f64>) -> Matrix3<f64> {
    let r1 = q.row(0).transpose();
    let r2 = q.row(1).transpose();
    let r3 = r1.cross(&r2);
    Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()])
}

struct OrthoProblem {
    x: Matrix2xX<f64>,
    x_mean: Vector2<f64>,
    /// Centered visible basis columns.
    bases: Vec<Matrix3xX<f64>>,
    /// Centroid of each visible basis, to undo the centering.
    base_means: Vec<Vector3<f64>>,
    /// Mean squared distance of the keypoints from their centroid.
    spread: f64,
}

impl OrthoProblem {
    fn shape(&self, alpha: &[f64]) -> Matrix3xX<f64> {
        let mut y = Matrix3xX::zeros(self.x.ncols());
        for (b, a) in self.bases.iter().zip(alpha) {
            y += b * *a;
        }
        y
    }

    /// Best scale for fixed orthonormal rows.
    fn scale(&self, q: &nalgebra::Matrix2x3<f64>, yc: &Matrix3xX<f64>) -> f64 {
        let proj = q * yc;
        let den = proj.norm_squared();
        if den > 0.0 {
            (self.x.component_mul(&proj).sum() / den).max(1e-12)
        } else {
            1e-12
        }
    }

    /// Structural weights for fixed `s Q`, with `alpha_1 = 1` and a ridge.
    fn solve_alpha(&self, sq: &nalgebra::Matrix2x3<f64>, regularized: &mut bool) -> Vec<f64> {
        let k = self.bases.len();
        let mut alpha = vec![1.0; 1];
        if k == 1 {
            return alpha;
        }
        let target = &self.x - sq * &self.bases[0];
        let cols: Vec<Matrix2xX<f64>> = self.bases[1..].iter().map(|b| sq * b).collect();
        let m = k - 1;
        let mut a = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for i in 0..m {
            rhs[i] = cols[i].component_mul(&target).sum();
            for j in 0..m {
                a[(i, j)] = cols[i].component_mul(&cols[j]).sum();
            }
        }
        // the data term is normalized by the keypoint spread so the ridge is scale-free
        let n = self.x.ncols() as f64 * self.spread;
        a /= n;
        rhs /= n;
        let smallest = a.clone().symmetric_eigenvalues().min();
        if smallest < 1e-10 * a.trace().abs().max(1e-300) {
            *regularized = true;
        }
        for i in 0..m {
            a[(i, i)] += ALPHA_RIDGE;
        }
        let sol = a.cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| DVector::zeros(m));
        alpha.extend(sol.iter());
        alpha
    }

    fn residual(&self, sq: &nalgebra::Matrix2x3<f64>, alpha: &[f64]) -> f64 {
        let (yc, _) = centered(&self.shape(alpha));
        (&self.x - sq * yc).norm_squared() / self.x.ncols() as f64
    }

    /// Alternation from fixed orthonormal rows, keeping the best round.
    fn alternate(&self, mut q: nalgebra::Matrix2x3<f64>, rounds: usize) -> (Vec<f64>, nalgebra::Matrix2x3<f64>, f64, bool) {
        let mut regularized = false;
        let (yc, _) = centered(&self.shape(&StructParams::mean(self.bases.len()).alpha));
        let mut s = self.scale(&q, &yc);
        let mut alpha = self.solve_alpha(&(q * s), &mut regularized);
        let mut best = (self.residual(&(q * s), &alpha), alpha.clone(), q, s);
        for _ in 0..rounds {
            let (yc, _) = centered(&self.shape(&alpha));
            let gram = &yc * yc.transpose() + Matrix3::identity() * 1e-12;
            let m = match gram.try_inverse() {
                Some(inv) => self.x.clone() * yc.transpose() * inv,
                None => q * s,
            };
            q = polar_rows(&m);
            s = self.scale(&q, &yc);
            alpha = self.solve_alpha(&(q * s), &mut regularized);
            let res = self.residual(&(q * s), &alpha);
            let settled = (best.0 - res).abs() <= 1e-15 * best.0.max(1e-300);
            if res < best.0 {
                best = (res, alpha.clone(), q, s);
            }
            if settled {
                break;
            }
        }
        (best.1, best.2, best.3, regularized)
    }

    fn pack_init(&self, alpha: Vec<f64>, rotation: Matrix3<f64>, s: f64, regularized: bool) -> ParallelInit {
        let q = rotation.fixed_rows::<2>(0).into_owned();
        let mean3: Vector3<f64> = self.base_means.iter().zip(&alpha).map(|(m, a)| m * *a).sum();
        let translation = self.x_mean - s * (q * mean3);
        let residual = self.residual(&(q * s), &alpha);
        ParallelInit {
            params: StructParams::new(alpha),
            rotation,
            translation,
            scale: s,
            residual,
            regularized,
        }
    }

    /// Normalized orthographic residual rows (data then ridge).
    fn ortho_residual(&self, alpha: &[f64], r: &Matrix3<f64>, s: f64) -> DVector<f64> {
        let n = self.x.ncols();
        let k = alpha.len();
        let w = 1.0 / (n as f64 * self.spread).sqrt();
        let q = r.fixed_rows::<2>(0);
        let (yc, _) = centered(&self.shape(alpha));
        let model = q * yc * s;
        let mut out = DVector::zeros(2 * n + k - 1);
        for i in 0..n {
            for a in 0..2 {
                out[2 * i + a] = w * (self.x[(a, i)] - model[(a, i)]);
            }
        }
        for kk in 1..k {
            out[2 * n + kk - 1] = ALPHA_RIDGE.sqrt() * alpha[kk];
        }
        out
    }

    /// Damped Gauss-Newton polish of an alternation result over
    /// `(alpha_2.., rotation, scale)`; translation is eliminated by centering.
    fn polish(&self, mut alpha: Vec<f64>, mut r: Matrix3<f64>, mut s: f64, iterations: usize) -> (Vec<f64>, Matrix3<f64>, f64) {
        let n = self.x.ncols();
        let k = alpha.len();
        let w = 1.0 / (n as f64 * self.spread).sqrt();
        let m = k - 1 + 4;
        let mut res = self.ortho_residual(&alpha, &r, s);
        let mut energy = res.norm_squared();
        let mut lambda = 1e-3;
        for _ in 0..iterations {
            let (yc, _) = centered(&self.shape(&alpha));
            let p = r * &yc;
            let mut j = DMatrix::zeros(res.len(), m);
            for i in 0..n {
                for (kk, b) in self.bases.iter().enumerate().skip(1) {
                    let d = r * b.column(i) * s;
                    j[(2 * i, kk - 1)] = -w * d[0];
                    j[(2 * i + 1, kk - 1)] = -w * d[1];
                }
                let pi = p.column(i).into_owned();
                for a in 0..3 {
                    // left-multiplied rotation increment: d(R y) = e_a x (R y)
                    let d = Vector3::ith(a, 1.0).cross(&pi) * s;
                    j[(2 * i, k - 1 + a)] = -w * d[0];
                    j[(2 * i + 1, k - 1 + a)] = -w * d[1];
                }
                // log-scale column
                j[(2 * i, k + 2)] = -w * s * pi[0];
                j[(2 * i + 1, k + 2)] = -w * s * pi[1];
            }
            for kk in 1..k {
                j[(2 * n + kk - 1, kk - 1)] = ALPHA_RIDGE.sqrt();
            }
            let grad = j.transpose() * &res;
            if grad.norm() < 1e-16 {
                break;
            }
            let h = j.transpose() * &j;
            let mut improved = false;
            while lambda < 1e12 {
                let mut damped = h.clone();
                for i in 0..m {
                    damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
                }
                if let Some(step) = damped.cholesky().map(|c| -c.solve(&grad)) {
                    let mut a2 = alpha.clone();
                    for kk in 1..k {
                        a2[kk] += step[kk - 1];
                    }
                    let dw = Vector3::new(step[k - 1], step[k], step[k + 1]);
                    let r2 = Rotation3::from_scaled_axis(dw).into_inner() * r;
                    let s2 = s * step[k + 2].exp();
                    let res2 = self.ortho_residual(&a2, &r2, s2);
                    let e2 = res2.norm_squared();
                    if e2 < energy {
                        let rel = (energy - e2) / energy;
                        alpha = a2;
                        r = r2;
                        s = s2;
                        res = res2;
                        energy = e2;
                        lambda = (lambda / 3.0).max(1e-12);
                        improved = rel > 1e-15;
                        break;
                    }
                }
                lambda *= 10.0;
            }
            if !improved {
                break;
            }
        }
        (alpha, r, s)
    }
}

/// The 24 rotations of the cube, used as deterministic starting points.
fn cube_rotations() -> Vec<Matrix3<f64>> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for p in perms {
        for signs in 0..8u32 {
            let mut m = Matrix3::zeros();
            for (row, &col) in p.iter().enumerate() {
                m[(row, col)] = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

fn ortho_problem(x: &Keypoints2D, spec: &SkeletonSpec, cols: &[usize]) -> OrthoProblem {
    let pick = |m: &Matrix3xX<f64>| Matrix3xX::from_columns(&cols.iter().map(|&i| m.column(i)).collect::<Vec<_>>());
    let xv = Matrix2xX::from_columns(&cols.iter().map(|&i| x.coords.column(i)).collect::<Vec<_>>());
    let x_mean = xv.column_mean();
    let mut xc = xv;
    for mut c in xc.column_iter_mut() {
        c -= x_mean;
    }
    let spread = (xc.norm_squared() / cols.len() as f64).max(1e-300);
    // centering the basis columns keeps the model affine-consistent with xc
    let (bases, base_means) = spec.base_shapes().iter().map(|b| centered(&pick(b))).unzip();
    OrthoProblem {
        x: xc,
        x_mean,
        bases,
        base_means,
        spread,
    }
}

/// All orthographic candidates, best residual first.
pub fn parallel_candidates(
    x: &Keypoints2D,
    spec: &SkeletonSpec,
    visibility: &[bool],
    rounds: usize,
) -> Result<Vec<ParallelInit>> {
    let cols = visible_columns(x, visibility)?;
    if x.coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::argument("keypoints must be finite"));
    }
    let prob = ortho_problem(x, spec, &cols);
    let mut starts: Vec<nalgebra::Matrix2x3<f64>> = Vec::with_capacity(25);
    // data-driven start from the mean shape
    let (yc, _) = centered(&prob.shape(&StructParams::mean(spec.n_bases()).alpha));
    if let Some(inv) = (&yc * yc.transpose() + Matrix3::identity() * 1e-12).try_inverse() {
        starts.push(polar_rows(&(prob.x.clone() * yc.transpose() * inv)));
    }
    starts.extend(cube_rotations().iter().map(|r| r.fixed_rows::<2>(0).into_owned()));
    let mut out: Vec<ParallelInit> = Vec::new();
    for q in starts {
        let (alpha, q, scale, regularized) = prob.alternate(q, rounds);
        let (alpha, rotation, scale) = prob.polish(alpha, complete_rotation(&q), scale, 100);
        let cand = prob.pack_init(alpha, rotation, scale, regularized);
        let duplicate = out.iter().any(|c| {
            (c.rotation - cand.rotation).norm() < 1e-6
                && c.params.alpha.iter().zip(&cand.params.alpha).all(|(a, b)| (a - b).abs() < 1e-6)
        });
        if !duplicate {
            out.push(cand);
        }
    }
    out.sort_by(|a, b| a.residual.total_cmp(&b.residual));
    Ok(out)
}

/// Orthographic initialization by alternating least squares.
pub fn init_parallel(x: &Keypoints2D, spec: &SkeletonSpec, visibility: &[bool]) -> Result<ParallelInit> {
    Ok(parallel_candidates(x, spec, visibility, FitOptions::default().init_rounds)?.remove(0))
}

/// Lifts an orthographic guess to a central-projection pose.
pub fn lift_to_perspective(init: &ParallelInit, focal: f64) -> CameraPose {
    let tz = focal / init.scale;
    let omega = Rotation3::from_matrix(&init.rotation).scaled_axis();
    CameraPose {
        omega,
        t: Vector3::new(init.translation.x * tz / focal, init.translation.y * tz / focal, tz),
        f: focal,
    }
}

struct Objective<'a> {
    spec: &'a SkeletonSpec,
    x: &'a Keypoints2D,
    cols: Vec<usize>,
    /// Mean squared distance of the visible keypoints from their centroid.
    spread: f64,
}

impl Objective<'_> {
    /// Free parameters are everything except `alpha_1`.
    fn unpack(&self, free: &DVector<f64>) -> (StructParams, CameraPose) {
        let k = self.spec.n_bases();
        let mut alpha = vec![1.0];
        alpha.extend(free.rows(0, k - 1).iter());
        let o = k - 1;
        (
            StructParams::new(alpha),
            CameraPose {
                omega: Vector3::new(free[o], free[o + 1], free[o + 2]),
                t: Vector3::new(free[o + 3], free[o + 4], free[o + 5]),
                f: free[o + 6],
            },
        )
    }

    fn pack(&self, params: &StructParams, pose: &CameraPose) -> DVector<f64> {
        let mut v: Vec<f64> = params.alpha[1..].to_vec();
        v.extend(pose.omega.iter());
        v.extend(pose.t.iter());
        v.push(pose.f);
        DVector::from_vec(v)
    }

    /// Weighted residual vector (data then ridge rows), its Jacobian and
    /// the data part of the objective.
    fn evaluate(&self, free: &DVector<f64>, want_jac: bool) -> Option<(DVector<f64>, Option<DMatrix<f64>>, f64)> {
        let (params, pose) = self.unpack(free);
        if !(pose.f > 0.0) {
            return None;
        }
        let (proj, jac) = reproject_with_jacobian(self.spec, &params, &pose).ok()?;
        let k = self.spec.n_bases();
        let nv = self.cols.len();
        let w = 1.0 / (nv as f64 * self.spread).sqrt();
        let rw = ALPHA_RIDGE.sqrt();
        let m = free.len();
        let mut r = DVector::zeros(2 * nv + k - 1);
        let mut j = want_jac.then(|| DMatrix::zeros(2 * nv + k - 1, m));
        for (row, &i) in self.cols.iter().enumerate() {
            for a in 0..2 {
                r[2 * row + a] = w * (proj.coords[(a, i)] - self.x.coords[(a, i)]);
                if let Some(j) = j.as_mut() {
                    for c in 0..m {
                        // column 0 of the full Jacobian is alpha_1, which is frozen
                        j[(2 * row + a, c)] = w * jac.matrix[(2 * i + a, c + 1)];
                    }
                }
            }
        }
        let data = r.rows(0, 2 * nv).norm_squared() * self.spread;
        for kk in 1..k {
            r[2 * nv + kk - 1] = rw * params.alpha[kk];
            if let Some(j) = j.as_mut() {
                j[(2 * nv + kk - 1, kk - 1)] = rw;
            }
        }
        Some((r, j, data))
    }
}

/// Refines a perspective pose by damped Gauss-Newton-preconditioned descent
/// with a backtracking line search.
///
/// The minimized objective is the reprojection error divided by the spread of
/// the visible keypoints plus the `alpha` ridge; the reported residual is the
/// plain mean squared reprojection error.
///
/// Every accepted step lowers the objective. When no step can be accepted the
/// best iterate is returned with `converged = false`.
pub fn refine_perspective(
    x: &Keypoints2D,
    spec: &SkeletonSpec,
    visibility: &[bool],
    init: (&StructParams, &CameraPose),
    options: &FitOptions,
) -> Result<FitResult> {
    let cols = visible_columns(x, visibility)?;
    if init.0.len() != spec.n_bases() {
        return Err(Error::argument("initial structure has the wrong number of weights"));
    }
    let xv = Matrix2xX::from_columns(&cols.iter().map(|&i| x.coords.column(i)).collect::<Vec<_>>());
    let mean = xv.column_mean();
    let spread = xv.column_iter().map(|c| (c - mean).norm_squared()).sum::<f64>() / cols.len() as f64;
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::argument("visible keypoints must be finite and not all coincide"));
    }
    let obj = Objective { spec, x, cols, spread };
    let mut start = init.0.clone();
    start.alpha[0] = 1.0;
    let mut theta = obj.pack(&start, init.1);
    let Some((mut r, mut jac, mut data)) = obj.evaluate(&theta, true) else {
        return Err(Error::Domain {
            index: 0,
            depth: f64::NAN,
            epsilon: DEPTH_EPSILON,
        });
    };
    let mut energy = r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        let j = jac.take().expect("Jacobian of the current iterate");
        let grad = j.transpose() * &r;
        if 2.0 * grad.norm() < options.gradient_tol || energy == 0.0 {
            converged = true;
            break;
        }
        let h = j.transpose() * &j;
        let mut accepted = None;
        while lambda < 1e12 {
            let mut damped = h.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(dir) = damped.cholesky().map(|c| -c.solve(&grad)) else {
                lambda *= 10.0;
                continue;
            };
            let slope = grad.dot(&dir);
            let mut step = 1.0;
            for _ in 0..30 {
                let trial = &theta + &dir * step;
                if let Some((rt, _, dt)) = obj.evaluate(&trial, false) {
                    let et = rt.norm_squared();
                    if et <= energy + 1e-4 * step * 2.0 * slope && et < energy {
                        accepted = Some((trial, et, dt));
                        break;
                    }
                }
                step *= 0.5;
            }
            if accepted.is_some() {
                if step == 1.0 {
                    lambda = (lambda / 3.0).max(1e-12);
                }
                break;
            }
            lambda *= 10.0;
        }
        let Some((next, e_next, _)) = accepted else {
            break;
        };
        iterations += 1;
        let decrease = (energy - e_next) / energy;
        theta = next;
        let (rn, jn, dn) = obj.evaluate(&theta, true).expect("accepted iterate is feasible");
        r = rn;
        jac = jn;
        data = dn;
        energy = e_next;
        if decrease < options.relative_tol {
            converged = true;
            break;
        }
    }
    let (params, pose) = obj.unpack(&theta);
    Ok(FitResult {
        params,
        pose,
        residual: data,
        iterations,
        converged,
    })
}

/// Full baseline: decode if needed, initialize orthographically, refine.
///
/// Each distinct orthographic candidate (including the depth-mirrored
/// solution) is refined and the lowest-residual result is kept.
pub fn fit_baseline(input: FitInput<'_>, spec: &SkeletonSpec, options: &FitOptions) -> Result<FitResult> {
    let decoded;
    let (x, visibility): (&Keypoints2D, &[bool]) = match input {
        FitInput::Heatmaps(hm) => {
            if hm.n_channels() != spec.n_keypoints() {
                return Err(Error::argument("heatmap channel count differs from the skeleton"));
            }
            decoded = decode_argmax(hm);
            (&decoded.0, &decoded.1)
        }
        FitInput::Keypoints(x, v) => (x, v),
    };
    if x.n_keypoints() != spec.n_keypoints() {
        return Err(Error::argument("keypoint count differs from the skeleton"));
    }
    let candidates = parallel_candidates(x, spec, visibility, options.init_rounds)?;
    let mut best: Option<FitResult> = None;
    for cand in &candidates {
        let pose = lift_to_perspective(cand, options.initial_focal);
        let Ok(fit) = refine_perspective(x, spec, visibility, (&cand.params, &pose), options) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| fit.residual < b.residual) {
            best = Some(fit);
        }
    }
    best.ok_or_else(|| Error::Domain {
        index: 0,
        depth: f64::NAN,
        epsilon: DEPTH_EPSILON,
    })
}

/// Fits many instances in parallel; results keep the input order.
pub fn fit_baseline_batch(inputs: &[FitInput<'_>], spec: &SkeletonSpec, options: &FitOptions) -> Vec<Result<FitResult>> {
    inputs.par_iter().map(|inp| fit_baseline(*inp, spec, options)).collect()
}
