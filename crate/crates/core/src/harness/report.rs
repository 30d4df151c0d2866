//! Root-mean-square error against ground truth.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StateVec;

/// Altitude the vehicle must exceed before a landing can be detected (m).
pub const LANDING_ARM_HEIGHT: f64 = 0.5;
pub const LANDING_HEIGHT: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialRmse {
    /// m/s
    pub vx: f64,
    /// degrees
    pub theta_deg: f64,
    /// m
    pub z: f64,
}

impl TrialRmse {
    fn as_array(&self) -> [f64; 3] {
        [self.vx, self.theta_deg, self.z]
    }

    fn from_array(a: [f64; 3]) -> Self {
        Self {
            vx: a[0],
            theta_deg: a[1],
            z: a[2],
        }
    }
}

/// First time the altitude falls below `ground` after having exceeded `arm`.
pub fn landing_time(t: &[f64], z: &[f64], arm: f64, ground: f64) -> Option<f64> {
    let mut armed = false;
    for (ti, zi) in t.iter().zip(z) {
        if *zi > arm {
            armed = true;
        } else if armed && *zi < ground {
            return Some(*ti);
        }
    }
    None
}

/// RMSE of each state over samples with `start <= t <= end`; theta in degrees.
pub fn rmse(t: &[f64], est: &[StateVec], truth: &[StateVec], start: f64, end: f64) -> Result<TrialRmse> {
    if t.len() != est.len() || t.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} times, {} estimates, {} truth rows",
            t.len(),
            est.len(),
            truth.len()
        )));
    }
    let mut sums = [0.0; 3];
    let mut n = 0usize;
    for ((ti, e), q) in t.iter().zip(est).zip(truth) {
        if *ti < start || *ti > end {
            continue;
        }
        sums[0] += (e.v_x - q.v_x).powi(2);
        sums[1] += (e.theta - q.theta).powi(2);
        sums[2] += (e.z - q.z).powi(2);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InsufficientData(format!(
            "empty RMSE window [{start}, {end}]"
        )));
    }
    let r = sums.map(|s| (s / n as f64).sqrt());
    let out = TrialRmse::from_array([r[0], r[1].to_degrees(), r[2]]);
    if !out.as_array().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("rmse"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub trials: Vec<TrialRmse>,
    pub mean: TrialRmse,
    pub spread: TrialRmse,
    pub spread_statistic: String,
}

impl RmseReport {
    pub const SPREAD_STATISTIC: &'static str = "sample standard deviation";

    /// Mean and sample standard deviation (zero for a single trial).
    pub fn from_trials(trials: Vec<TrialRmse>) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::InsufficientData("report needs >= 1 trial".into()));
        }
        let n = trials.len() as f64;
        let mut mean = [0.0; 3];
        for tr in &trials {
            for (m, v) in mean.iter_mut().zip(tr.as_array()) {
                *m += v / n;
            }
        }
        let mut spread = [0.0; 3];
        if trials.len() > 1 {
            for tr in &trials {
                for ((s, v), m) in spread.iter_mut().zip(tr.as_array()).zip(mean) {
                    *s += (v - m).powi(2) / (n - 1.0);
                }
            }
            spread = spread.map(f64::sqrt);
        }
        Ok(Self {
            trials,
            mean: TrialRmse::from_array(mean),
            spread: TrialRmse::from_array(spread),
            spread_statistic: Self::SPREAD_STATISTIC.to_string(),
        })
    }

    /// `mean ± spread` per state in the column order v_x, theta, z.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>18} {:>18} {:>18}", "", "v_x (m/s)", "theta (deg)", "z (m)");
        let cell = |m: f64, s: f64| format!("{m:.3} ± {s:.3}");
        let _ = writeln!(
            out,
            "{:<12} {:>18} {:>18} {:>18}",
            "estimate",
            cell(self.mean.vx, self.spread.vx),
            cell(self.mean.theta_deg, self.spread.theta_deg),
            cell(self.mean.z, self.spread.z)
        );
        let _ = writeln!(out, "({} trials, ± is {})", self.trials.len(), self.spread_statistic);
        out
    }
}
