//! Linear hover plant propagation and ground-truth flight scenarios.

use std::io::Write;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{build_dynamics, InputVec, PlantParams, StateVec};
use crate::{fmt9, trial_rng};

/// One explicit Euler step of `q' = A q + B u + G w` with `G = I`.
pub fn step(
    q: StateVec,
    u: InputVec,
    w: Vector3<f64>,
    dt: f64,
    params: &PlantParams,
) -> Result<StateVec> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter("dt must be > 0".into()));
    }
    if !q.is_finite() || !u.omega_m.is_finite() || w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("step input"));
    }
    let (a, b) = build_dynamics(params);
    let x = q.to_vector();
    let xdot = a * x + b * u.omega_m + w;
    Ok(StateVec::from_vector(&(x + xdot * dt)))
}

/// Flight protocol: rise to `climb_altitude`, translate `cruise_distance` at
/// `cruise_speed`, descend back to the ground.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub climb_altitude: f64,
    pub cruise_distance: f64,
    pub cruise_speed: f64,
    pub total_duration: f64,
    pub seed: u64,
    /// Short acceleration/braking ramps that push |omega| above 3 rad/s.
    pub aggressive: bool,
    /// Time on the ground with propellers running before liftoff (s).
    pub preflight: f64,
    /// Delay between liftoff and the start of the climb (s).
    pub spinup: f64,
    /// Duration of the climb and of the descent (s).
    pub climb_time: f64,
    /// Amplitude of the pitch doublet commanded at liftoff (rad).
    pub takeoff_pitch: f64,
    /// Diagonal of the process noise spectral density; `None` is noiseless.
    pub process_noise: Option<[f64; 3]>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            climb_altitude: 1.0,
            cruise_distance: 1.0,
            cruise_speed: 1.0,
            total_duration: 12.0,
            seed: 0,
            aggressive: false,
            preflight: 1.0,
            spinup: 0.8,
            climb_time: 2.5,
            takeoff_pitch: 0.05,
            process_noise: None,
        }
    }
}

const DOUBLET_DURATION: f64 = 0.4;
const SETTLE_BEFORE_CRUISE: f64 = 0.3;
const SETTLE_AFTER_CRUISE: f64 = 0.5;

impl ScenarioSpec {
    fn ramp_time(&self) -> f64 {
        let nominal: f64 = if self.aggressive { 0.4 } else { 0.8 };
        if self.cruise_speed > 0.0 {
            nominal.min(self.cruise_distance / self.cruise_speed)
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("climb_altitude", self.climb_altitude),
            ("total_duration", self.total_duration),
            ("climb_time", self.climb_time),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0")));
            }
        }
        let non_negative = [
            ("cruise_distance", self.cruise_distance),
            ("cruise_speed", self.cruise_speed),
            ("preflight", self.preflight),
            ("spinup", self.spinup),
            ("takeoff_pitch", self.takeoff_pitch),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be >= 0")));
            }
        }
        if self.cruise_speed > 0.0 && self.cruise_distance <= 0.0 {
            return Err(Error::InvalidParameter(
                "cruise_distance must be > 0 when cruise_speed > 0".into(),
            ));
        }
        if let Some(q) = self.process_noise {
            if q.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidParameter("process noise must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Phase boundaries; fails when the protocol does not fit in `total_duration`.
    pub fn phases(&self) -> Result<Phases> {
        self.validate()?;
        let liftoff = self.preflight;
        let climb_start = liftoff + self.spinup;
        let climb_end = climb_start + self.climb_time;
        let (cruise_start, cruise_end) = if self.cruise_speed > 0.0 {
            let start = climb_end + SETTLE_BEFORE_CRUISE;
            (start, start + self.ramp_time() + self.cruise_distance / self.cruise_speed)
        } else {
            (climb_end, climb_end)
        };
        let descent_start = cruise_end + SETTLE_AFTER_CRUISE;
        let touchdown = descent_start + self.climb_time;
        if touchdown > self.total_duration {
            return Err(Error::InvalidParameter(format!(
                "infeasible scenario: protocol needs {touchdown:.2} s but total_duration is {:.2} s",
                self.total_duration
            )));
        }
        Ok(Phases {
            liftoff,
            climb_start,
            climb_end,
            cruise_start,
            cruise_end,
            descent_start,
            touchdown,
        })
    }
}

/// Scenario phase boundaries (s, scenario clock).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phases {
    pub liftoff: f64,
    pub climb_start: f64,
    pub climb_end: f64,
    pub cruise_start: f64,
    pub cruise_end: f64,
    pub descent_start: f64,
    pub touchdown: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub timestamps: Vec<f64>,
    pub states: Vec<StateVec>,
    /// True angular velocity (rad/s).
    pub inputs: Vec<InputVec>,
    pub phases: Phases,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,theta,vx,z,omega")?;
        for ((t, q), u) in self.timestamps.iter().zip(&self.states).zip(&self.inputs) {
            writeln!(
                out,
                "{},{},{},{},{}",
                fmt9(*t),
                fmt9(q.theta),
                fmt9(q.v_x),
                fmt9(q.z),
                fmt9(u.omega_m)
            )?;
        }
        Ok(())
    }
}

fn smoothstep(s: f64) -> (f64, f64) {
    let s = s.clamp(0.0, 1.0);
    (s * s * (3.0 - 2.0 * s), 6.0 * s * (1.0 - s))
}

/// Quintic smootherstep and its first two derivatives.
fn smootherstep(s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if s >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let s2 = s * s;
    let s3 = s2 * s;
    (
        s3 * (10.0 - 15.0 * s + 6.0 * s2),
        30.0 * s2 * (1.0 - s) * (1.0 - s),
        60.0 * s * (1.0 - s) * (1.0 - 2.0 * s),
    )
}

/// Commanded profiles of the scenario, evaluated analytically.
struct Profile<'a> {
    spec: &'a ScenarioSpec,
    phases: Phases,
    params: &'a PlantParams,
}

impl Profile<'_> {
    /// Commanded angular rate (rad/s).
    fn omega(&self, t: f64) -> f64 {
        if self.spec.cruise_speed <= 0.0 {
            return 0.0;
        }
        // Pitch doublet at liftoff: theta = a sin(2 pi s)(1 - cos(2 pi s)) / 2, zero net pitch.
        let mut omega = 0.0;
        let s = (t - self.phases.liftoff) / DOUBLET_DURATION;
        if (0.0..1.0).contains(&s) {
            let x = 2.0 * std::f64::consts::PI * s;
            omega += self.spec.takeoff_pitch * std::f64::consts::PI * (x.cos() - (2.0 * x).cos())
                / DOUBLET_DURATION;
        }
        // Velocity profile v(t) with pitch = (v' + (b/m) v) / g, so omega = (v'' + (b/m) v') / g.
        let (_, vd, vdd) = self.velocity(t);
        omega + (vdd + self.params.b_over_m * vd) / self.params.g
    }

    /// Commanded velocity and its first two derivatives.
    fn velocity(&self, t: f64) -> (f64, f64, f64) {
        let ramp = self.spec.ramp_time();
        if ramp <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let v = self.spec.cruise_speed;
        let hold = self.spec.cruise_distance / v - ramp;
        let up = smootherstep((t - self.phases.cruise_start) / ramp);
        let down = smootherstep((t - self.phases.cruise_start - ramp - hold) / ramp);
        (
            v * (up.0 - down.0),
            v / ramp * (up.1 - down.1),
            v / (ramp * ramp) * (up.2 - down.2),
        )
    }

    /// Commanded climb rate (m/s).
    fn climb_rate(&self, t: f64) -> f64 {
        let h = self.spec.climb_altitude;
        let tc = self.spec.climb_time;
        let up = smoothstep((t - self.phases.climb_start) / tc).1;
        let down = smoothstep((t - self.phases.descent_start) / tc).1;
        h / tc * (up - down)
    }
}

/// Simulates the scenario at `params.f_sample` with explicit Euler steps.
/// Process noise, when configured, is applied between liftoff and touchdown
/// (altitude noise only once the climb has started) and the altitude is held
/// at or above the ground.
pub fn generate_scenario(spec: &ScenarioSpec, params: &PlantParams) -> Result<Trajectory> {
    generate_trial(spec, params, 0)
}

/// Like [`generate_scenario`] with the RNG stream of Monte Carlo trial `trial`.
pub fn generate_trial(spec: &ScenarioSpec, params: &PlantParams, trial: u64) -> Result<Trajectory> {
    params.validate()?;
    let phases = spec.phases()?;
    let profile = Profile {
        spec,
        phases,
        params,
    };
    let dt = params.dt();
    let n = (spec.total_duration * params.f_sample).floor() as usize + 1;
    let mut rng = trial_rng(spec.seed, trial);
    let noise_scale = spec.process_noise.map(|q| q.map(|v| (v / dt).sqrt()));

    let mut timestamps = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n);
    let mut q = StateVec::ZERO;
    for k in 0..n {
        let t = k as f64 * dt;
        let u = InputVec::new(profile.omega(t));
        timestamps.push(t);
        states.push(q);
        inputs.push(u);

        let airborne = t >= phases.liftoff && t < phases.touchdown;
        let mut w = Vector3::zeros();
        if let (Some(scale), true) = (noise_scale, airborne) {
            for (i, s) in scale.iter().enumerate() {
                let draw: f64 = rng.sample(StandardNormal);
                w[i] = s * draw;
            }
            if t < phases.climb_start {
                w[2] = 0.0;
            }
        }
        let mut next = step(q, u, w, dt, params)?;
        next.z = (next.z + profile.climb_rate(t) * dt).max(0.0);
        q = next;
    }
    Ok(Trajectory {
        timestamps,
        states,
        inputs,
        phases,
    })
}

/// Independent trials `0..trials`, computed in parallel.
pub fn generate_batch(
    spec: &ScenarioSpec,
    params: &PlantParams,
    trials: usize,
) -> Result<Vec<Trajectory>> {
    (0..trials as u64)
        .into_par_iter()
        .map(|trial| generate_trial(spec, params, trial))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NoiseConfig;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn params() -> PlantParams {
        PlantParams::new(9.81, 1.0, 1.0, 100.0).unwrap()
    }

    #[test]
    fn equilibrium_is_fixed() {
        let q = step(StateVec::ZERO, InputVec::new(0.0), Vector3::zeros(), 0.01, &params()).unwrap();
        assert_eq!(q, StateVec::ZERO);
    }

    #[test]
    fn pitch_accelerates() {
        let q = step(
            StateVec::new(0.1, 0.0, 1.0),
            InputVec::new(0.0),
            Vector3::zeros(),
            0.01,
            &params(),
        )
        .unwrap();
        assert_abs_diff_eq!(q.v_x, 0.00981, epsilon = 1e-15);
        assert_eq!(q.theta, 0.1);
        assert_eq!(q.z, 1.0);
    }

    #[test]
    fn drag_decays() {
        let q = step(
            StateVec::new(0.0, 1.0, 1.0),
            InputVec::new(0.0),
            Vector3::zeros(),
            0.01,
            &params(),
        )
        .unwrap();
        assert_abs_diff_eq!(q.v_x, 0.99, epsilon = 1e-15);
    }

    #[test]
    fn step_rejects_bad_input() {
        let p = params();
        let u = InputVec::new(0.0);
        assert!(step(StateVec::ZERO, u, Vector3::zeros(), 0.0, &p).is_err());
        assert!(step(StateVec::new(f64::NAN, 0.0, 0.0), u, Vector3::zeros(), 0.01, &p).is_err());
        assert!(step(StateVec::ZERO, InputVec::new(f64::INFINITY), Vector3::zeros(), 0.01, &p).is_err());
    }

    #[test]
    fn default_scenario_envelope() {
        let traj = generate_scenario(&ScenarioSpec::default(), &params()).unwrap();
        let max_z = traj.states.iter().map(|q| q.z).fold(f64::MIN, f64::max);
        let max_v = traj.states.iter().map(|q| q.v_x).fold(f64::MIN, f64::max);
        assert!((0.95..=1.05).contains(&max_z), "max z {max_z}");
        assert!((0.9..=1.1).contains(&max_v), "max v {max_v}");
        assert!(traj.states.iter().all(|q| q.z >= 0.0));
        assert_eq!(traj.states[0], StateVec::ZERO);
        assert!(traj.states.last().unwrap().z.abs() < 1e-9);

        // uniform timeline
        for w in traj.timestamps.windows(2) {
            assert_abs_diff_eq!(w[1] - w[0], 0.01, epsilon = 1e-12);
        }
        // continuity of v_x and z rate: bounded increments
        for w in traj.states.windows(2) {
            assert!((w[1].v_x - w[0].v_x).abs() < 0.05);
            assert!((w[1].z - w[0].z).abs() < 0.01);
        }
        // horizontal distance covered
        let dist: f64 = traj.states.iter().map(|q| q.v_x * 0.01).sum();
        assert!((dist - 1.0).abs() < 0.1, "distance {dist}");
    }

    #[test]
    fn aggressive_exceeds_three_rad_per_s() {
        let spec = ScenarioSpec {
            aggressive: true,
            ..ScenarioSpec::default()
        };
        let traj = generate_scenario(&spec, &params()).unwrap();
        let peak = traj.inputs.iter().map(|u| u.omega_m.abs()).fold(0.0, f64::max);
        assert!(peak > 3.0, "peak omega {peak}");
        let calm = generate_scenario(&ScenarioSpec::default(), &params()).unwrap();
        let calm_peak = calm.inputs.iter().map(|u| u.omega_m.abs()).fold(0.0, f64::max);
        assert!(calm_peak < 1.5, "calm peak omega {calm_peak}");
    }

    #[test]
    fn vertical_only_flight() {
        let spec = ScenarioSpec {
            cruise_speed: 0.0,
            ..ScenarioSpec::default()
        };
        let traj = generate_scenario(&spec, &params()).unwrap();
        assert!(traj.states.iter().all(|q| q.v_x == 0.0 && q.theta == 0.0));
        assert!(traj.states.iter().any(|q| q.z > 0.95));
    }

    #[test]
    fn infeasible_rejected() {
        let spec = ScenarioSpec {
            total_duration: 5.0,
            ..ScenarioSpec::default()
        };
        assert!(generate_scenario(&spec, &params()).is_err());
        let spec = ScenarioSpec {
            cruise_distance: 20.0,
            ..ScenarioSpec::default()
        };
        assert!(generate_scenario(&spec, &params()).is_err());
        let spec = ScenarioSpec {
            climb_altitude: -1.0,
            ..ScenarioSpec::default()
        };
        assert!(generate_scenario(&spec, &params()).is_err());
    }

    #[test]
    fn seeded_runs_reproduce() {
        let spec = ScenarioSpec {
            seed: 11,
            process_noise: Some(NoiseConfig::default().q_diag()),
            ..ScenarioSpec::default()
        };
        let a = generate_trial(&spec, &params(), 3).unwrap();
        let b = generate_trial(&spec, &params(), 3).unwrap();
        let c = generate_trial(&spec, &params(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        a.write_csv(&mut csv_a).unwrap();
        b.write_csv(&mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
        let text = String::from_utf8(csv_a).unwrap();
        assert!(text.starts_with("t,theta,vx,z,omega\n"));
        assert_eq!(text.lines().count(), a.len() + 1);
    }

    #[test]
    fn monte_carlo_mean_tracks_noiseless() {
        let p = params();
        let noiseless = generate_scenario(&ScenarioSpec::default(), &p).unwrap();
        let spec = ScenarioSpec {
            seed: 2024,
            process_noise: Some(NoiseConfig::default().q_diag()),
            ..ScenarioSpec::default()
        };
        let trials = generate_batch(&spec, &p, 100).unwrap();
        let n = trials.len() as f64;
        let check_times = (0..noiseless.len()).step_by(25);
        for k in check_times {
            let truth = noiseless.states[k].to_vector();
            for i in 0..3 {
                // the ground clamp biases the altitude upward near z = 0
                if i == 2 && truth[2] < 0.5 {
                    continue;
                }
                let xs: Vec<f64> = trials.iter().map(|tr| tr.states[k].to_vector()[i]).collect();
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let se = (var / n).sqrt();
                let dev = (mean - truth[i]).abs();
                assert!(
                    dev <= 4.0 * se + 1e-12,
                    "state {i} at t={:.2}: mean deviation {dev:.4} > 4 SE ({se:.4})",
                    noiseless.timestamps[k]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn homogeneous_step_is_linear(
            q1 in prop::array::uniform3(-2.0..2.0f64),
            q2 in prop::array::uniform3(-2.0..2.0f64),
            u1 in -3.0..3.0f64,
            u2 in -3.0..3.0f64,
            a in -2.0..2.0f64,
            b in -2.0..2.0f64,
        ) {
            let p = params();
            let zero = Vector3::zeros();
            let s = |q: [f64; 3], u: f64| {
                step(StateVec::from_vector(&Vector3::from(q)), InputVec::new(u), zero, 0.01, &p)
                    .unwrap()
                    .to_vector()
            };
            let combo = Vector3::from(q1) * a + Vector3::from(q2) * b;
            let lhs = s(combo.into(), a * u1 + b * u2);
            let rhs = s(q1, u1) * a + s(q2, u2) * b;
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }

        #[test]
        fn drag_never_increases_speed_when_level(v0 in -5.0..5.0f64, bm in 0.01..10.0f64) {
            let p = PlantParams::new(9.81, bm, 1.0, 100.0).unwrap();
            let mut q = StateVec::new(0.0, v0, 1.0);
            for _ in 0..200 {
                let next = step(q, InputVec::new(0.0), Vector3::zeros(), 0.01, &p).unwrap();
                prop_assert!(next.v_x.abs() <= q.v_x.abs());
                q = next;
            }
        }
    }
}
