//! Steady-state Kalman gain design and the gyro-as-input observer.

use std::io::Write;

use nalgebra::{Matrix2, Matrix3, Matrix3x2, SMatrix, SVector};

use crate::error::{Error, Result};
use crate::fmt9;
use crate::model::{Channel, InputVec, MeasVec, Model, NoiseConfig, PlantParams, StateVec};

/// Stopping tolerance on `||P_{k+1} - P_k||_inf`, relative to `max(1, ||P||_inf)`.
pub const RICCATI_TOLERANCE: f64 = 1e-10;
pub const RICCATI_MAX_ITERATIONS: usize = 100;
/// Acceptance bound on the Riccati residual relative to `||G Q G^T||_inf`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KalmanGain {
    pub k: Matrix3x2<f64>,
    /// Stabilizing solution of the filter Riccati equation.
    pub p: Matrix3<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl KalmanGain {
    /// Observer matrix `A - K C`.
    pub fn observer_matrix(&self, model: &Model) -> Matrix3<f64> {
        model.a - self.k * model.c
    }

    /// Plain-text dump: three rows of two values.
    pub fn to_text(&self) -> String {
        (0..3)
            .map(|i| format!("{} {}\n", fmt9(self.k[(i, 0)]), fmt9(self.k[(i, 1)])))
            .collect()
    }

    /// Parses the output of [`KalmanGain::to_text`]. `p` is left at zero.
    pub fn from_text(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != 3 {
            return Err(Error::Format(format!("expected 3 gain rows, got {}", rows.len())));
        }
        let mut k = Matrix3x2::zeros();
        for (i, row) in rows.iter().enumerate() {
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("gain row {}: {e}", i + 1)))?;
            if vals.len() != 2 {
                return Err(Error::Format(format!("gain row {} needs 2 values", i + 1)));
            }
            k[(i, 0)] = vals[0];
            k[(i, 1)] = vals[1];
        }
        Ok(Self {
            k,
            p: Matrix3::zeros(),
            iterations: 0,
            residual: 0.0,
        })
    }
}

/// Solves `M X + X M^T + N = 0` for square `X` through its Kronecker form.
fn solve_lyapunov(m: &Matrix3<f64>, n: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let eye = Matrix3::<f64>::identity();
    let mut op = SMatrix::<f64, 9, 9>::zeros();
    // column-major vec: vec(M X) = (I kron M) vec X, vec(X M^T) = (M kron I) vec X
    for (j, l) in (0..3).flat_map(|j| (0..3).map(move |l| (j, l))) {
        for (i, k) in (0..3).flat_map(|i| (0..3).map(move |k| (i, k))) {
            op[(3 * j + i, 3 * l + k)] = eye[(j, l)] * m[(i, k)] + m[(j, l)] * eye[(i, k)];
        }
    }
    let rhs = SVector::<f64, 9>::from_iterator(n.iter().map(|v| -v));
    let x = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("singular Lyapunov operator".into()))?;
    let x = Matrix3::from_iterator(x.iter().copied());
    Ok(0.5 * (x + x.transpose()))
}

fn inf_norm<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> f64 {
    m.abs().column_sum().max().max(m.abs().row_sum().max())
}

/// `A P + P A^T + G Q G^T - P C^T R^-1 C P`.
pub fn riccati_residual(
    a: &Matrix3<f64>,
    c: &SMatrix<f64, 2, 3>,
    gqg: &Matrix3<f64>,
    r_inv: &Matrix2<f64>,
    p: &Matrix3<f64>,
) -> Matrix3<f64> {
    a * p + p * a.transpose() + gqg - p * c.transpose() * r_inv * c * p
}

/// True when every eigenvalue of `m` has a strictly negative real part.
pub fn is_hurwitz(m: &Matrix3<f64>) -> bool {
    m.complex_eigenvalues().iter().all(|l| l.re < 0.0)
}

/// Stabilizing output injection `L` with `A - L C` Hurwitz (Bass construction on
/// the dual pair).
fn stabilizing_seed(a: &Matrix3<f64>, c: &SMatrix<f64, 2, 3>) -> Result<Matrix3x2<f64>> {
    let beta = 1.0 + a.abs().row_sum().max().max(a.abs().column_sum().max());
    let m = a.transpose() + Matrix3::identity() * beta;
    let z = solve_lyapunov(&m, &(-2.0 * c.transpose() * c))?;
    let z_inv = z
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("(A, C) is not observable".into()))?;
    Ok(z_inv * c.transpose())
}

/// Steady-state gain from the filter Riccati equation
/// `A P + P A^T + G Q G^T - P C^T R^-1 C P = 0`, `K = P C^T R^-1`, solved by
/// Newton-Kleinman iteration.
pub fn design_gain(model: &Model, noise: &NoiseConfig) -> Result<KalmanGain> {
    let (a, c) = (model.a, model.c);
    let r = noise.r_n;
    let gqg = noise.g * noise.q_n * noise.g.transpose();
    if a.iter().chain(c.iter()).chain(r.iter()).chain(gqg.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design_gain input"));
    }
    if r.symmetric_eigenvalues().min() <= 0.0 {
        return Err(Error::InvalidParameter("R_n must be positive definite".into()));
    }
    if gqg.symmetric_eigenvalues().min() < 0.0 {
        return Err(Error::InvalidParameter("G Q_n G^T must be positive semidefinite".into()));
    }
    let r_inv = r.try_inverse().expect("positive definite");

    let mut k = stabilizing_seed(&a, &c)?;
    let mut p = Matrix3::zeros();
    let mut delta = f64::INFINITY;
    for iteration in 1..=RICCATI_MAX_ITERATIONS {
        let closed = a - k * c;
        let next = solve_lyapunov(&closed, &(gqg + k * r * k.transpose()))?;
        delta = inf_norm(&(next - p));
        p = next;
        k = p * c.transpose() * r_inv;
        if delta < RICCATI_TOLERANCE * inf_norm(&p).max(1.0) {
            let residual = inf_norm(&riccati_residual(&a, &c, &gqg, &r_inv, &p));
            let gain = KalmanGain {
                k,
                p,
                iterations: iteration,
                residual,
            };
            if residual > RESIDUAL_TOLERANCE * inf_norm(&gqg).max(f64::MIN_POSITIVE) {
                return Err(Error::RiccatiNonConvergence {
                    iterations: iteration,
                    residual,
                });
            }
            if !is_hurwitz(&gain.observer_matrix(model)) {
                return Err(Error::Degenerate("A - K C is not Hurwitz".into()));
            }
            return Ok(gain);
        }
    }
    Err(Error::RiccatiNonConvergence {
        iterations: RICCATI_MAX_ITERATIONS,
        residual: if delta.is_finite() {
            inf_norm(&riccati_residual(&a, &c, &gqg, &r_inv, &p))
        } else {
            f64::INFINITY
        },
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlankingPolicy {
    /// Replace the altitude measurement with zero.
    #[default]
    ZeroSubstitute,
    /// Drop the altitude innovation.
    SkipUpdate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorState {
    pub q_hat: StateVec,
    pub t_since_liftoff: f64,
    pub blanking_policy: BlankingPolicy,
    pub blank_duration: f64,
}

impl EstimatorState {
    pub const DEFAULT_BLANK_DURATION: f64 = 1.8;

    /// Grounded start `q_hat = 0` at liftoff.
    pub fn at_liftoff(policy: BlankingPolicy, blank_duration: f64) -> Result<Self> {
        if !(blank_duration.is_finite() && blank_duration >= 0.0) {
            return Err(Error::InvalidParameter("blank_duration must be >= 0".into()));
        }
        Ok(Self {
            q_hat: StateVec::ZERO,
            t_since_liftoff: 0.0,
            blanking_policy: policy,
            blank_duration,
        })
    }

    pub fn blanking(&self) -> bool {
        self.t_since_liftoff < self.blank_duration
    }
}

impl Default for EstimatorState {
    fn default() -> Self {
        Self::at_liftoff(BlankingPolicy::default(), Self::DEFAULT_BLANK_DURATION)
            .expect("default blanking is valid")
    }
}

/// One Euler step of `q' = A q + B u + K (y - C q - D u)`. Unusable channels
/// contribute no innovation.
pub fn observer_step(
    est: &EstimatorState,
    y: &MeasVec,
    u: &InputVec,
    gain: &KalmanGain,
    model: &Model,
    dt: f64,
) -> Result<EstimatorState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter("dt must be > 0".into()));
    }
    if !u.omega_m.is_finite() {
        return Err(Error::NonFinite("observer input"));
    }
    let z_m = if est.blanking() {
        match est.blanking_policy {
            BlankingPolicy::ZeroSubstitute => Channel::new(0.0),
            BlankingPolicy::SkipUpdate => Channel::invalid(),
        }
    } else {
        y.z_m
    };
    let q = est.q_hat.to_vector();
    let predicted = model.c * q + model.d * u.omega_m;
    let mut innovation = nalgebra::Vector2::zeros();
    for (i, ch) in [y.flow, z_m].iter().enumerate() {
        if ch.usable() {
            innovation[i] = ch.value - predicted[i];
        }
    }
    let qdot = model.a * q + model.b * u.omega_m + gain.k * innovation;
    Ok(EstimatorState {
        q_hat: StateVec::from_vector(&(q + qdot * dt)),
        t_since_liftoff: est.t_since_liftoff + dt,
        ..*est
    })
}

/// Sequential observer bound to one model and gain.
#[derive(Clone, Debug)]
pub struct Observer {
    pub model: Model,
    pub gain: KalmanGain,
    pub dt: f64,
    pub state: EstimatorState,
}

impl Observer {
    pub fn new(params: &PlantParams, noise: &NoiseConfig, state: EstimatorState) -> Result<Self> {
        let model = Model::new(params)?;
        let gain = design_gain(&model, noise)?;
        Ok(Self {
            model,
            gain,
            dt: params.dt(),
            state,
        })
    }

    pub fn step(&mut self, y: &MeasVec, u: &InputVec) -> Result<StateVec> {
        self.state = observer_step(&self.state, y, u, &self.gain, &self.model, self.dt)?;
        Ok(self.state.q_hat)
    }
}

pub const LIFTOFF_SIGMA_FACTOR: f64 = 5.0;
pub const LIFTOFF_MIN_THRESHOLD: f64 = 0.05;
pub const LIFTOFF_CONSECUTIVE: usize = 3;
pub const PREFLIGHT_WINDOW: f64 = 1.0;

/// Time of the first of three consecutive gyro samples after the first second
/// whose magnitude exceeds `max(5 sigma, 0.05)`, with `sigma` the standard
/// deviation over the first second. `Ok(None)` when never exceeded.
pub fn liftoff_detect(t: &[f64], omega: &[f64]) -> Result<Option<f64>> {
    if t.len() != omega.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} timestamps vs {} samples",
            t.len(),
            omega.len()
        )));
    }
    let Some(&t0) = t.first() else {
        return Err(Error::InsufficientData("empty gyro stream".into()));
    };
    let split = t.partition_point(|&ti| ti < t0 + PREFLIGHT_WINDOW);
    if split < 2 || split == t.len() {
        return Err(Error::InsufficientData(
            "gyro stream needs at least 1 s of pre-flight data".into(),
        ));
    }
    let pre = &omega[..split];
    let mean = pre.iter().sum::<f64>() / pre.len() as f64;
    let sigma =
        (pre.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (pre.len() - 1) as f64).sqrt();
    let threshold = (LIFTOFF_SIGMA_FACTOR * sigma).max(LIFTOFF_MIN_THRESHOLD);
    let mut run = 0;
    for i in split..t.len() {
        if omega[i].abs() > threshold {
            run += 1;
            if run == LIFTOFF_CONSECUTIVE {
                return Ok(Some(t[i + 1 - LIFTOFF_CONSECUTIVE]));
            }
        } else {
            run = 0;
        }
    }
    Ok(None)
}

/// Drag coefficient whose designed gain best matches target magnitudes of
/// `K[0][0]` and `K[1][0]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DragFit {
    pub b_over_m: f64,
    pub gain: Matrix3x2<f64>,
    /// Sum of squared relative magnitude errors.
    pub cost: f64,
}

/// Scans `b/m` over `[lo, hi]` on a log grid of `points` values.
pub fn fit_drag_to_gain(
    base: &PlantParams,
    noise: &NoiseConfig,
    target: [f64; 2],
    (lo, hi): (f64, f64),
    points: usize,
) -> Result<DragFit> {
    if !(lo > 0.0 && hi > lo && points >= 2) {
        return Err(Error::InvalidParameter("need 0 < lo < hi and >= 2 points".into()));
    }
    let mut best: Option<DragFit> = None;
    for i in 0..points {
        let bm = lo * (hi / lo).powf(i as f64 / (points - 1) as f64);
        let params = PlantParams {
            b_over_m: bm,
            ..*base
        };
        let Ok(gain) = design_gain(&Model::new(&params)?, noise) else {
            continue;
        };
        let cost = (0..2)
            .map(|r| ((gain.k[(r, 0)].abs() - target[r].abs()) / target[r]).powi(2))
            .sum::<f64>();
        if best.is_none_or(|b| cost < b.cost) {
            best = Some(DragFit {
                b_over_m: bm,
                gain: gain.k,
                cost,
            });
        }
    }
    best.ok_or_else(|| Error::Degenerate("no admissible b/m on the grid".into()))
}

/// Estimate trace as `t,theta_hat,vx_hat,z_hat`.
pub fn write_estimate_csv<W: Write>(t: &[f64], q_hat: &[StateVec], mut out: W) -> Result<()> {
    if t.len() != q_hat.len() {
        return Err(Error::DimensionMismatch("estimate trace lengths".into()));
    }
    writeln!(out, "t,theta_hat,vx_hat,z_hat")?;
    for (ti, q) in t.iter().zip(q_hat) {
        writeln!(out, "{},{},{},{}", fmt9(*ti), fmt9(q.theta), fmt9(q.v_x), fmt9(q.z))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial_rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn default_gain() -> (Model, KalmanGain) {
        let model = Model::new(&PlantParams::default()).unwrap();
        let gain = design_gain(&model, &NoiseConfig::default()).unwrap();
        (model, gain)
    }

    #[test]
    fn lyapunov_matches_definition() {
        let m = Matrix3::new(-1.0, 0.5, 0.0, 0.2, -2.0, 0.3, 0.0, 0.1, -3.0);
        let n = Matrix3::new(2.0, 0.1, 0.0, 0.1, 1.0, 0.2, 0.0, 0.2, 3.0);
        let x = solve_lyapunov(&m, &n).unwrap();
        assert!(inf_norm(&(m * x + x * m.transpose() + n)) < 1e-12);
    }

    #[test]
    fn scalar_altitude_channel() {
        let (_, gain) = default_gain();
        let oracle = (0.22f64 * 0.22 / 0.0055).sqrt();
        assert_relative_eq!(gain.k[(2, 1)], oracle, max_relative = 1e-9);
        assert!((gain.k[(2, 1)] - 3.0).abs() < 0.06);
    }

    #[test]
    fn block_structure() {
        let (_, gain) = default_gain();
        for (i, j) in [(0, 1), (1, 1), (2, 0)] {
            assert!(gain.k[(i, j)].abs() < 1e-6, "K[{i}][{j}] = {}", gain.k[(i, j)]);
        }
        assert!(gain.k[(0, 0)].abs() > 1e-3 && gain.k[(1, 0)].abs() > 1e-3);
    }

    #[test]
    fn residual_and_stability() {
        let (model, gain) = default_gain();
        let gqg = NoiseConfig::default().q_n;
        assert!(gain.residual < RESIDUAL_TOLERANCE * inf_norm(&gqg));
        assert!(is_hurwitz(&gain.observer_matrix(&model)));
        assert!(gain.p.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn joint_scaling_leaves_gain_unchanged() {
        let model = Model::new(&PlantParams::default()).unwrap();
        let base = NoiseConfig::default();
        let scaled = NoiseConfig::diagonal(
            base.r_diag().map(|v| 4.0 * v),
            base.q_diag().map(|v| 4.0 * v),
        )
        .unwrap();
        let k1 = design_gain(&model, &base).unwrap();
        let k2 = design_gain(&model, &scaled).unwrap();
        assert!(inf_norm(&(k1.k - k2.k)) < 1e-9);
        assert!(inf_norm(&(4.0 * k1.p - k2.p)) < 1e-9);
    }

    #[test]
    fn rejects_bad_noise() {
        let model = Model::new(&PlantParams::default()).unwrap();
        let mut noise = NoiseConfig::default();
        noise.r_n[(1, 1)] = 0.0;
        assert!(design_gain(&model, &noise).is_err());
        noise.r_n[(1, 1)] = f64::NAN;
        assert!(design_gain(&model, &noise).is_err());
    }

    #[test]
    fn gain_text_round_trip() {
        let (_, gain) = default_gain();
        let parsed = KalmanGain::from_text(&gain.to_text()).unwrap();
        assert!(inf_norm(&(parsed.k - gain.k)) < 1e-8);
        assert!(KalmanGain::from_text("1 2\n3 4\n").is_err());
        assert!(KalmanGain::from_text("1 2\n3 x\n5 6\n").is_err());
    }

    #[test]
    fn zero_innovation_is_pure_prediction() {
        let (model, gain) = default_gain();
        let dt = 0.01;
        let mut est = EstimatorState::at_liftoff(BlankingPolicy::ZeroSubstitute, 0.0).unwrap();
        est.q_hat = StateVec::new(0.02, 0.3, 0.8);
        let u = InputVec::new(0.7);
        let y = model.c * est.q_hat.to_vector() + model.d * u.omega_m;
        let next = observer_step(&est, &MeasVec::from_vector(&y), &u, &gain, &model, dt).unwrap();
        let q = est.q_hat.to_vector();
        let expected = q + (model.a * q + model.b * u.omega_m) * dt;
        assert!((next.q_hat.to_vector() - expected).abs().max() < 1e-15);
    }

    #[test]
    fn equilibrium_is_fixed() {
        let (model, gain) = default_gain();
        let mut est = EstimatorState::at_liftoff(BlankingPolicy::ZeroSubstitute, 0.0).unwrap();
        est.q_hat = StateVec::new(0.0, 0.0, 1.0);
        for _ in 0..1000 {
            let next =
                observer_step(&est, &MeasVec::new(0.0, 1.0), &InputVec::new(0.0), &gain, &model, 0.01)
                    .unwrap();
            assert!((next.q_hat.to_vector() - est.q_hat.to_vector()).abs().max() < 1e-12);
            est = next;
        }
    }

    #[test]
    fn blanking_policies() {
        let (model, gain) = default_gain();
        let mut zero = EstimatorState::at_liftoff(BlankingPolicy::ZeroSubstitute, 1.8).unwrap();
        zero.q_hat.z = 0.5;
        let skip = EstimatorState {
            blanking_policy: BlankingPolicy::SkipUpdate,
            ..zero
        };
        let y = MeasVec::new(0.0, 0.9);
        let u = InputVec::new(0.0);
        // zero substitution pulls the estimate towards the ground
        assert!(observer_step(&zero, &y, &u, &gain, &model, 0.01).unwrap().q_hat.z < 0.5);
        assert_eq!(observer_step(&skip, &y, &u, &gain, &model, 0.01).unwrap().q_hat.z, 0.5);
        let late = EstimatorState {
            t_since_liftoff: 2.0,
            ..zero
        };
        assert!(observer_step(&late, &y, &u, &gain, &model, 0.01).unwrap().q_hat.z > 0.5);
    }

    #[test]
    fn invalid_flow_skips_row() {
        let (model, gain) = default_gain();
        let mut est = EstimatorState::at_liftoff(BlankingPolicy::SkipUpdate, 0.0).unwrap();
        est.q_hat = StateVec::new(0.1, 0.2, 1.0);
        let u = InputVec::new(0.0);
        let nan = observer_step(&est, &MeasVec::new(f64::NAN, 1.0), &u, &gain, &model, 0.01).unwrap();
        let predicted = model.c * est.q_hat.to_vector();
        let exact =
            observer_step(&est, &MeasVec::new(predicted[0], 1.0), &u, &gain, &model, 0.01).unwrap();
        assert_eq!(nan.q_hat, exact.q_hat);
        assert!(nan.q_hat.is_finite());
    }

    #[test]
    fn closed_loop_error_decays_exponentially() {
        let (model, gain) = default_gain();
        let slowest = gain
            .observer_matrix(&model)
            .complex_eigenvalues()
            .iter()
            .map(|l| l.re)
            .fold(f64::NEG_INFINITY, f64::max);
        let dt = 0.01;
        let mut rng = trial_rng(11, 0);
        for _ in 0..10 {
            let truth = StateVec::new(0.0, 0.0, 1.0);
            let mut est = EstimatorState::at_liftoff(BlankingPolicy::SkipUpdate, 0.0).unwrap();
            est.q_hat = StateVec::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..2.0),
            );
            let e0 = (est.q_hat.to_vector() - truth.to_vector()).norm();
            let steps = 2000;
            for _ in 0..steps {
                est = observer_step(&est, &MeasVec::new(0.0, 1.0), &InputVec::new(0.0), &gain, &model, dt)
                    .unwrap();
            }
            let e = (est.q_hat.to_vector() - truth.to_vector()).norm();
            let t = steps as f64 * dt;
            // transient constant allowance of 10
            assert!(e < 10.0 * e0 * (slowest * 0.9 * t).exp(), "{e} from {e0}");
            assert!(e < 1e-3 * e0);
        }
    }

    #[test]
    fn liftoff_cases() {
        let t: Vec<f64> = (0..400).map(|k| k as f64 * 0.01).collect();
        assert_eq!(liftoff_detect(&t, &vec![0.0; t.len()]).unwrap(), None);

        let mut rng = trial_rng(2, 0);
        let omega: Vec<f64> = t
            .iter()
            .map(|&ti| {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                (if ti >= 2.0 - 1e-9 { 1.0 } else { 0.0 }) + 0.01 * n
            })
            .collect();
        let lo = liftoff_detect(&t, &omega).unwrap().unwrap();
        assert!((lo - 2.0).abs() < 0.03, "{lo}");

        assert!(liftoff_detect(&t[..50], &omega[..50]).is_err());
        assert!(liftoff_detect(&t, &omega[..10]).is_err());
    }

    #[test]
    fn drag_fit_reports_a_grid_value() {
        let fit = fit_drag_to_gain(
            &PlantParams::default(),
            &NoiseConfig::default(),
            [0.095, -1.32],
            (0.01, 100.0),
            81,
        )
        .unwrap();
        assert!(fit.b_over_m >= 0.01 && fit.b_over_m <= 100.0);
        assert!(fit.cost.is_finite());
    }

    #[test]
    fn estimate_csv_layout() {
        let mut buf = Vec::new();
        write_estimate_csv(&[0.0, 0.01], &[StateVec::ZERO, StateVec::new(1.0, 2.0, 3.0)], &mut buf)
            .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,theta_hat,vx_hat,z_hat");
        assert_eq!(text.lines().count(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn every_design_is_stable(
            bm in 0.05f64..20.0,
            zd in 0.3f64..3.0,
            r in prop::array::uniform2(1e-4f64..1.0),
            q in prop::array::uniform3(1e-7f64..1.0),
        ) {
            let params = PlantParams { b_over_m: bm, z_d: zd, ..PlantParams::default() };
            let model = Model::new(&params).unwrap();
            let noise = NoiseConfig::diagonal(r, q).unwrap();
            let gain = design_gain(&model, &noise).unwrap();
            prop_assert!(is_hurwitz(&gain.observer_matrix(&model)));
            prop_assert!(gain.residual < RESIDUAL_TOLERANCE * inf_norm(&noise.q_n));
            prop_assert!(gain.k[(2, 0)].abs() < 1e-6);
            prop_assert!(gain.k[(0, 1)].abs() < 1e-6 && gain.k[(1, 1)].abs() < 1e-6);
        }
    }
}
