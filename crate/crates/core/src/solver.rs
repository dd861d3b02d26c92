//! Sliding-window Gauss-Newton MAP estimation, marginal extraction and
//! spherical-cubature sigmapoints.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{
    factor_cost, geman_mcclure_cost, geman_mcclure_weight, measurement_jacobians,
    MeasurementFactor,
};
use crate::liegroup::{exp_se3, Pose, Twist};
use crate::trajectory::{
    wnoa_error, wnoa_information, wnoa_jacobians, GaussianPosterior, MotionPriorConfig, StateKnot,
    Vector12,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Converged when every entry of the update is below this.
    pub tolerance: f64,
    /// Consecutive cost increases tolerated before giving up.
    pub divergence_patience: usize,
    /// Geman-McClure reweighting of the measurement factors.
    pub robust: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-6,
            divergence_patience: 5,
            robust: true,
        }
    }
}

/// One window: `knots[0]` is locked, the rest are optimized.
#[derive(Clone, Debug)]
pub struct WindowProblem<'a> {
    pub knots: Vec<StateKnot>,
    pub prior: MotionPriorConfig,
    pub measurements: &'a [MeasurementFactor],
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub posterior: GaussianPosterior,
    pub iterations: usize,
    pub converged: bool,
    pub cost: f64,
}

struct Linearization {
    hessian: DMatrix<f64>,
    gradient: DVector<f64>,
    cost: f64,
}

fn add_block<R: nalgebra::Dim, C: nalgebra::Dim, S: nalgebra::Storage<f64, R, C>>(
    h: &mut DMatrix<f64>,
    r: usize,
    c: usize,
    m: &nalgebra::Matrix<f64, R, C, S>,
) {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            h[(r + i, c + j)] += m[(i, j)];
        }
    }
}

fn add_rows<R: nalgebra::Dim, S: nalgebra::Storage<f64, R>>(
    g: &mut DVector<f64>,
    r: usize,
    m: &nalgebra::Vector<f64, R, S>,
) {
    for i in 0..m.nrows() {
        g[r + i] += m[i];
    }
}

fn linearize(
    knots: &[StateKnot],
    prior: &MotionPriorConfig,
    measurements: &[MeasurementFactor],
    robust: bool,
) -> Result<Linearization> {
    let n = 12 * (knots.len() - 1);
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut cost = 0.0;
    for k in 1..knots.len() {
        let (prev, next) = (&knots[k - 1], &knots[k]);
        let e = wnoa_error(prev, next)?;
        let q = wnoa_information(next.stamp - prev.stamp, prior)?;
        let (jp, jn) = wnoa_jacobians(prev, next)?;
        let qe = q * e;
        cost += 0.5 * e.dot(&qe);
        let bn = 12 * (k - 1);
        add_block(&mut h, bn, bn, &(jn.transpose() * q * jn));
        add_rows(&mut g, bn, &(jn.transpose() * qe));
        if k >= 2 {
            let bp = 12 * (k - 2);
            add_block(&mut h, bp, bp, &(jp.transpose() * q * jp));
            let cross = jp.transpose() * q * jn;
            add_block(&mut h, bp, bn, &cross);
            add_block(&mut h, bn, bp, &cross.transpose());
            add_rows(&mut g, bp, &(jp.transpose() * qe));
        }
    }
    let t_tau = knots[0].pose;
    for f in measurements {
        if f.frame == 0 || f.frame >= knots.len() {
            continue;
        }
        let tk = &knots[f.frame].pose;
        let e = f.error(tk, &t_tau);
        let we = f.winv * e;
        let s = e.dot(&we);
        let (w, c) = if robust {
            (geman_mcclure_weight(s), geman_mcclure_cost(s))
        } else {
            (1.0, 0.5 * s)
        };
        cost += c;
        let (jk, _) = measurement_jacobians(&f.r, tk, &t_tau);
        let b = 12 * (f.frame - 1);
        add_block(&mut h, b, b, &(w * jk.transpose() * f.winv * jk));
        add_rows(&mut g, b, &(w * jk.transpose() * we));
    }
    Ok(Linearization {
        hessian: h,
        gradient: g,
        cost,
    })
}

fn apply_update(knots: &[StateKnot], delta: &DVector<f64>) -> Vec<StateKnot> {
    let mut out = knots.to_vec();
    for k in 1..knots.len() {
        let d = Vector12::from_iterator(delta.rows(12 * (k - 1), 12).iter().copied());
        out[k] = knots[k].perturbed(&d);
    }
    out
}

/// Gauss-Newton with Geman-McClure IRLS; the returned information matrix is
/// the Gauss-Newton Hessian at the final estimate.
pub fn gauss_newton_solve(problem: &WindowProblem, opts: &SolverOptions) -> Result<SolveOutcome> {
    if problem.knots.len() < 2 {
        return Err(Error::Config("a window needs at least two frames".into()));
    }
    let mut knots = problem.knots.clone();
    let mut lin = linearize(&knots, &problem.prior, problem.measurements, opts.robust)?;
    let mut prev_cost = lin.cost;
    let mut increases = 0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        let chol = lin
            .hessian
            .clone()
            .cholesky()
            .ok_or(Error::SingularInformation)?;
        let delta = -chol.solve(&lin.gradient);
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularInformation);
        }
        knots = apply_update(&knots, &delta);
        iterations += 1;
        lin = linearize(&knots, &problem.prior, problem.measurements, opts.robust)?;
        if lin.cost > prev_cost {
            increases += 1;
            if increases >= opts.divergence_patience {
                return Err(Error::DivergedSolve(increases));
            }
        } else {
            increases = 0;
        }
        prev_cost = lin.cost;
        if delta.amax() < opts.tolerance {
            converged = true;
            break;
        }
    }
    let info = 0.5 * (&lin.hessian + lin.hessian.transpose());
    Ok(SolveOutcome {
        posterior: GaussianPosterior {
            knots,
            locked: 0,
            info,
        },
        iterations,
        converged,
        cost: lin.cost,
    })
}

/// Joint covariance of the requested knots (12 DOF each, in the given order);
/// the locked knot contributes zero rows and columns.
pub fn marginal_covariance(posterior: &GaussianPosterior, knots: &[usize]) -> Result<DMatrix<f64>> {
    let n = posterior.info.nrows();
    let chol = posterior
        .info
        .clone()
        .cholesky()
        .ok_or(Error::SingularInformation)?;
    let blocks: Vec<Option<usize>> = knots.iter().map(|&k| posterior.state_block(k)).collect();
    let mut rhs = DMatrix::zeros(n, 12 * knots.len());
    for (j, b) in blocks.iter().enumerate() {
        if let Some(b) = b {
            for i in 0..12 {
                rhs[(12 * b + i, 12 * j + i)] = 1.0;
            }
        }
    }
    let cols = chol.solve(&rhs);
    let m = 12 * knots.len();
    let mut out = DMatrix::zeros(m, m);
    for (i, bi) in blocks.iter().enumerate() {
        let Some(bi) = bi else { continue };
        for j in 0..knots.len() {
            out.view_mut((12 * i, 12 * j), (12, 12))
                .copy_from(&cols.view((12 * bi, 12 * j), (12, 12)));
        }
    }
    Ok(0.5 * (&out + out.transpose()))
}

#[derive(Clone, Debug)]
pub struct SigmaPointSet {
    pub points: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

/// Square root `S` with `S S^T = cov`; falls back to a symmetric eigen root
/// for positive semi-definite input.
pub fn psd_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = cov.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-9 * scale || !l.is_finite()) {
        return Err(Error::CholeskyFailure);
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root))
}

/// `2n` points `mean +- sqrt(n) S e_j`, equal weights.
pub fn cubature_points(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<SigmaPointSet> {
    let n = mean.len();
    let s = psd_sqrt(cov)? * (n as f64).sqrt();
    let mut points = Vec::with_capacity(2 * n);
    for j in 0..n {
        points.push(mean + s.column(j));
    }
    for j in 0..n {
        points.push(mean - s.column(j));
    }
    Ok(SigmaPointSet {
        points,
        weights: vec![1.0 / (2 * n) as f64; 2 * n],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpectationMode {
    MeanOnly,
    Cubature,
}

/// Poses of knot `k` at which its factors' expectations are evaluated:
/// the mean alone, or sigmapoints of the knot's 12-D marginal pushed
/// through the left perturbation.
pub fn knot_sigma_poses(
    posterior: &GaussianPosterior,
    k: usize,
    mode: ExpectationMode,
) -> Result<Vec<Pose>> {
    let mean = posterior.knots[k].pose;
    match mode {
        ExpectationMode::MeanOnly => Ok(vec![mean]),
        ExpectationMode::Cubature => {
            let cov = marginal_covariance(posterior, &[k])?;
            poses_from_marginal(&mean, &cov)
        }
    }
}

/// Sigmapoint poses for a 12x12 knot marginal (pose block first).
pub fn poses_from_marginal(mean: &Pose, cov: &DMatrix<f64>) -> Result<Vec<Pose>> {
    let set = cubature_points(&DVector::zeros(cov.nrows()), cov)?;
    Ok(set
        .points
        .iter()
        .map(|p| {
            let d = Twist::from_iterator(p.rows(0, 6).iter().copied());
            exp_se3(&d) * *mean
        })
        .collect())
}

/// `E[1/2 e^T W e] - ln|W|` over the given pose samples (equal weights).
pub fn expected_factor_cost(f: &MeasurementFactor, poses: &[Pose], t_tau: &Pose) -> f64 {
    let quad: f64 = poses
        .iter()
        .map(|p| factor_cost(&f.error(p, t_tau), &f.winv, 0.0))
        .sum::<f64>()
        / poses.len() as f64;
    quad - f.log_det_winv()
}

/// Prior-chain initialization by constant-velocity extrapolation.
pub fn extrapolate_window(first: &StateKnot, stamps: &[f64]) -> Vec<StateKnot> {
    stamps.iter().map(|&t| first.extrapolate(t)).collect()
}

/// Relative pose `T_{k,k-1}` of two knots and its covariance from their joint marginal.
pub fn relative_pose_with_covariance(
    posterior: &GaussianPosterior,
    k: usize,
) -> Result<(Pose, nalgebra::Matrix6<f64>)> {
    let rel = posterior.knots[k].pose * posterior.knots[k - 1].pose.inverse();
    let joint = marginal_covariance(posterior, &[k - 1, k])?;
    // delta_rel = delta_k - Ad(T_rel) delta_{k-1}
    let mut j = DMatrix::zeros(6, 24);
    j.view_mut((0, 0), (6, 6))
        .copy_from(&(-crate::liegroup::adjoint(&rel)));
    j.view_mut((0, 12), (6, 6))
        .copy_from(&nalgebra::Matrix6::<f64>::identity());
    let q = &j * joint * j.transpose();
    let q = nalgebra::Matrix6::from_iterator(q.iter().copied());
    Ok((rel, 0.5 * (q + q.transpose())))
}

/// Mean of `1/2 e^T W e` for a linear error model, used by tests of the
/// expectation machinery.
pub fn gaussian_quadratic_expectation(
    e0: &Vector3<f64>,
    jac: &DMatrix<f64>,
    winv: &Matrix3<f64>,
    cov: &DMatrix<f64>,
) -> f64 {
    let w = DMatrix::from_iterator(3, 3, winv.iter().copied());
    let jwj = jac.transpose() * &w * jac;
    0.5 * e0.dot(&(winv * e0)) + 0.5 * (jwj * cov).trace()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::keypoints::compose_winv;
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    fn factor(frame: usize, z: Vector3<f64>, r: Vector3<f64>, scale: f64) -> MeasurementFactor {
        let c = Vector6::new(0.0, 0.0, 0.0, scale.ln(), scale.ln(), scale.ln());
        MeasurementFactor {
            frame,
            keypoint: 0,
            z,
            r,
            covparams: c,
            winv: compose_winv(&c),
        }
    }

    fn constant_twist_window(v: Twist, n: usize) -> Vec<StateKnot> {
        let first = StateKnot::new(0.0, exp_se3(&Twist::new(2.0, -1.0, 0.5, 0.1, 0.0, 0.4)), v);
        (0..n).map(|k| first.extrapolate(0.1 * k as f64)).collect()
    }

    fn perfect_factors(gt: &[StateKnot], rng: &mut ChaCha8Rng) -> Vec<MeasurementFactor> {
        let mut out = Vec::new();
        for k in 1..gt.len() {
            let t_ktau = gt[k].pose * gt[0].pose.inverse();
            for _ in 0..30 {
                let r = Vector3::from_fn(|_, _| rng.random_range(-20.0..20.0));
                out.push(factor(k, t_ktau.transform_point(&r), r, 1.0));
            }
        }
        out
    }

    #[test]
    fn perfect_matches_recover_groundtruth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Twist::new(-8.0, 0.1, 0.0, 0.0, 0.01, -0.3);
        let gt = constant_twist_window(v, 4);
        let meas = perfect_factors(&gt, &mut rng);
        let mut init = gt.clone();
        for k in 1..4 {
            let d = Vector12::from_fn(|_, _| rng.random_range(-0.05..0.05));
            init[k] = gt[k].perturbed(&d);
        }
        let problem = WindowProblem {
            knots: init,
            prior: MotionPriorConfig::default(),
            measurements: &meas,
        };
        let out = gauss_newton_solve(&problem, &SolverOptions::default()).unwrap();
        assert!(out.converged);
        for k in 1..4 {
            let est = out.posterior.knots[k].pose * out.posterior.knots[k - 1].pose.inverse();
            let truth = gt[k].pose * gt[k - 1].pose.inverse();
            let err = crate::liegroup::log_se3(&(est * truth.inverse())).unwrap();
            assert!(err.fixed_rows::<3>(0).norm() < 1e-6);
            assert!(err.fixed_rows::<3>(3).norm() < 1e-7);
        }
        assert!(out.posterior.is_symmetric(1e-10));
        assert!(out.posterior.info.clone().cholesky().is_some());
    }

    #[test]
    fn prior_only_window_stays_at_extrapolation() {
        let v = Twist::new(-5.0, 0.0, 0.0, 0.0, 0.0, 0.2);
        let knots = constant_twist_window(v, 4);
        let problem = WindowProblem {
            knots: knots.clone(),
            prior: MotionPriorConfig::default(),
            measurements: &[],
        };
        let out = gauss_newton_solve(&problem, &SolverOptions::default()).unwrap();
        assert_eq!(out.iterations, 1);
        for (a, b) in out.posterior.knots.iter().zip(&knots) {
            assert!((a.pose.matrix() - b.pose.matrix()).amax() < 1e-9);
        }
    }

    #[test]
    fn uniform_measurement_scaling_does_not_move_the_optimum() {
        let v = Twist::new(-1.0, 0.0, 0.0, 0.0, 0.0, 0.1);
        let knots = constant_twist_window(v, 2);
        let solve = |scale: f64| {
            let meas = vec![factor(1, Vector3::new(1.0, 2.0, 0.5), Vector3::new(3.0, 1.5, 0.2), scale)];
            let problem = WindowProblem {
                knots: knots.clone(),
                prior: MotionPriorConfig {
                    qc_diag: [1e12; 6],
                },
                measurements: &meas,
            };
            let opts = SolverOptions {
                robust: false,
                ..SolverOptions::default()
            };
            gauss_newton_solve(&problem, &opts).unwrap().posterior
        };
        let a = solve(1.0);
        let b = solve(10.0);
        let d = (a.knots[1].pose.matrix() - b.knots[1].pose.matrix()).amax();
        assert!(d < 1e-6, "{d}");
        // and the single measurement is satisfied
        let f = factor(1, Vector3::new(1.0, 2.0, 0.5), Vector3::new(3.0, 1.5, 0.2), 1.0);
        assert!(f.error(&a.knots[1].pose, &a.knots[0].pose).norm() < 1e-6);
    }

    #[test]
    fn resolving_from_solution_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = constant_twist_window(Twist::new(-3.0, 0.0, 0.0, 0.0, 0.0, 0.3), 3);
        let mut meas = perfect_factors(&gt, &mut rng);
        for f in &mut meas {
            f.z += Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
        }
        let p = WindowProblem {
            knots: gt.clone(),
            prior: MotionPriorConfig::default(),
            measurements: &meas,
        };
        let first = gauss_newton_solve(&p, &SolverOptions::default()).unwrap();
        let p2 = WindowProblem {
            knots: first.posterior.knots.clone(),
            ..p
        };
        let second = gauss_newton_solve(&p2, &SolverOptions::default()).unwrap();
        for (a, b) in first.posterior.knots.iter().zip(&second.posterior.knots) {
            assert!((a.pose.matrix() - b.pose.matrix()).amax() < 1e-6);
        }
    }

    #[test]
    fn marginal_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let info = random_spd(&mut rng, 36);
        let knots = constant_twist_window(Twist::zeros(), 4);
        let post = GaussianPosterior {
            knots,
            locked: 0,
            info: info.clone(),
        };
        let dense = info.clone().try_inverse().unwrap();
        let m = marginal_covariance(&post, &[2, 3]).unwrap();
        assert!((m - dense.view((12, 12), (24, 24))).amax() < 1e-9);
        let full = marginal_covariance(&post, &[1, 2, 3]).unwrap();
        assert!((&full * &info - DMatrix::identity(36, 36)).amax() < 1e-8);
        let locked = marginal_covariance(&post, &[0]).unwrap();
        assert_eq!(locked, DMatrix::zeros(12, 12));
    }

    #[test]
    fn block_diagonal_marginal_is_block_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd(&mut rng, 12);
        let b = random_spd(&mut rng, 12);
        let mut info = DMatrix::zeros(24, 24);
        info.view_mut((0, 0), (12, 12)).copy_from(&a);
        info.view_mut((12, 12), (12, 12)).copy_from(&b);
        let post = GaussianPosterior {
            knots: constant_twist_window(Twist::zeros(), 3),
            locked: 0,
            info,
        };
        let m = marginal_covariance(&post, &[2]).unwrap();
        assert!((m - b.try_inverse().unwrap()).amax() < 1e-9);
    }

    #[test]
    fn scalar_cubature() {
        let s = cubature_points(&DVector::from_element(1, 0.0), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(s.points.len(), 2);
        assert_eq!(s.points[0][0], 1.0);
        assert_eq!(s.points[1][0], -1.0);
        assert_eq!(s.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn cubature_matches_moments_and_quadratics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cov = random_spd(&mut rng, 6);
        let mean = DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0));
        let s = cubature_points(&mean, &cov).unwrap();
        let m: DVector<f64> = s.points.iter().zip(&s.weights).map(|(p, w)| p * *w).sum();
        assert!((&m - &mean).amax() < 1e-12);
        let c: DMatrix<f64> = s
            .points
            .iter()
            .zip(&s.weights)
            .map(|(p, w)| (p - &m) * (p - &m).transpose() * *w)
            .sum();
        assert!((c - &cov).amax() < 1e-12);
        let b = random_spd(&mut rng, 6);
        let lin = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let q = |x: &DVector<f64>| (x.transpose() * &b * x)[0] + lin.dot(x) + 0.7;
        let expect: f64 = s.points.iter().zip(&s.weights).map(|(p, w)| q(p) * w).sum();
        let exact = (&b * &cov).trace() + q(&mean);
        assert!((expect - exact).abs() < 1e-9);
    }

    #[test]
    fn zero_covariance_is_accepted() {
        let s = cubature_points(&DVector::zeros(12), &DMatrix::zeros(12, 12)).unwrap();
        assert!(s.points.iter().all(|p| p.amax() == 0.0));
        let bad = -DMatrix::<f64>::identity(3, 3);
        assert!(matches!(cubature_points(&DVector::zeros(3), &bad), Err(Error::CholeskyFailure)));
    }

    #[test]
    fn expected_cost_modes() {
        let f = factor(1, Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.5, 2.0, 2.5), 2.0);
        let t = exp_se3(&Twist::new(0.1, 0.2, 0.0, 0.0, 0.0, 0.05));
        let tau = Pose::identity();
        let mean_only = expected_factor_cost(&f, &[t], &tau);
        let zero = poses_from_marginal(&t, &DMatrix::zeros(12, 12)).unwrap();
        assert!((expected_factor_cost(&f, &zero, &tau) - mean_only).abs() < 1e-15);

        // Linearized factor: cubature reproduces the Gaussian integral exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cov = random_spd(&mut rng, 12) * 0.01;
        let (jk, _) = measurement_jacobians(&f.r, &t, &tau);
        let jac = DMatrix::from_fn(3, 12, |i, j| if j < 6 { jk[(i, j)] } else { 0.0 });
        let e0 = f.error(&t, &tau);
        let set = cubature_points(&DVector::zeros(12), &cov).unwrap();
        let lin: f64 = set
            .points
            .iter()
            .zip(&set.weights)
            .map(|(p, w)| {
                let jd = &jac * p;
                let e = e0 + Vector3::new(jd[0], jd[1], jd[2]);
                w * factor_cost(&e, &f.winv, 0.0)
            })
            .sum::<f64>()
            - f.log_det_winv();
        let analytic = gaussian_quadratic_expectation(&e0, &jac, &f.winv, &cov) - f.log_det_winv();
        assert!((lin - analytic).abs() < 1e-9, "{lin} {analytic}");

        // The nonlinear factor approaches it as the covariance shrinks.
        let tiny = &cov * 1e-8;
        let cub = expected_factor_cost(&f, &poses_from_marginal(&t, &tiny).unwrap(), &tau);
        let analytic = gaussian_quadratic_expectation(&e0, &jac, &f.winv, &tiny) - f.log_det_winv();
        assert!((cub - analytic).abs() < 1e-9, "{cub} {analytic}");
        let poses = poses_from_marginal(&t, &cov).unwrap();
        let cub = expected_factor_cost(&f, &poses, &tau);
        assert!(cub >= mean_only);
    }
}
