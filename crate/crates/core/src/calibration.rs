//! Measurement variance estimation and process-noise tuning.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fmt9;

pub const MIN_FLOW_SAMPLES: usize = 30;
/// Length of the constant-altitude hold used for the pressure variance (s).
pub const PRESSURE_HOLD: f64 = 60.0;

fn centered_variance(xs: impl ExactSizeIterator<Item = f64> + Clone) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Sample variance of `flow - truth`.
pub fn estimate_flow_variance(flow: &[f64], truth: &[f64]) -> Result<f64> {
    if flow.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} flow samples vs {} truth samples",
            flow.len(),
            truth.len()
        )));
    }
    if flow.len() < MIN_FLOW_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "flow variance needs >= {MIN_FLOW_SAMPLES} samples, got {}",
            flow.len()
        )));
    }
    if flow.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("flow residual"));
    }
    Ok(centered_variance(flow.iter().zip(truth).map(|(f, t)| f - t)))
}

/// Sample variance of a constant-altitude hold of at least 60 s at `f_sample`.
pub fn estimate_pressure_variance(readings: &[f64], f_sample: f64) -> Result<f64> {
    if !(f_sample.is_finite() && f_sample > 0.0) {
        return Err(Error::InvalidParameter("f_sample must be > 0".into()));
    }
    let required = (PRESSURE_HOLD * f_sample).ceil() as usize;
    if readings.len() < required.max(2) {
        return Err(Error::InsufficientData(format!(
            "pressure variance needs >= {required} samples, got {}",
            readings.len()
        )));
    }
    if readings.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pressure reading"));
    }
    Ok(centered_variance(readings.iter().copied()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneSpec {
    /// Candidate values for each diagonal entry of `Q_n`.
    pub grid: [Vec<f64>; 3],
    /// Relative finite-difference step.
    pub gd_step: f64,
    pub gd_iters: usize,
    /// RMSE weights over `(theta, v_x, z)`.
    pub weights: [f64; 3],
}

/// `n` logarithmically spaced values from `lo` to `hi`.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
            .collect(),
    }
}

impl Default for TuneSpec {
    fn default() -> Self {
        let axis = log_space(1e-6, 1.0, 5);
        Self {
            grid: [axis.clone(), axis.clone(), axis],
            gd_step: 0.25,
            gd_iters: 50,
            weights: [1.0, 1.0, 1.0],
        }
    }
}

impl TuneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.iter().any(|g| g.is_empty()) {
            return Err(Error::InvalidParameter("tuning grid lists must be non-empty".into()));
        }
        if self.grid.iter().flatten().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter("grid values must be > 0".into()));
        }
        if !(self.gd_step.is_finite() && self.gd_step > 0.0) {
            return Err(Error::InvalidParameter("gd_step must be > 0".into()));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter("weights must be >= 0".into()));
        }
        Ok(())
    }

    /// Weighted sum of per-state RMSEs.
    pub fn combine(&self, rmse: [f64; 3]) -> f64 {
        self.weights.iter().zip(rmse).map(|(w, r)| w * r).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TuneStep {
    pub iter: usize,
    pub q: [f64; 3],
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub q: [f64; 3],
    pub objective: f64,
    /// Grid winner at `iter = 0`, then one entry per descent iteration.
    pub trace: Vec<TuneStep>,
}

pub const RELATIVE_IMPROVEMENT_STOP: f64 = 1e-4;
const MAX_STEP_HALVINGS: usize = 6;

/// Grid search over the candidate lists followed by coordinate-wise descent in
/// log space. Candidates with a non-finite objective are discarded.
///
/// Each descent iteration probes every coordinate at `q (1 + s)^{+-1}` and keeps
/// the best improvement. An iteration without improvement halves `s`; the
/// search stops when an improving iteration gains less than 1e-4 relative, when
/// `s` has been halved six times, or after `gd_iters` iterations.
pub fn tune_q<F>(spec: &TuneSpec, objective: F) -> Result<TuneResult>
where
    F: Fn([f64; 3]) -> f64 + Sync,
{
    spec.validate()?;
    let candidates: Vec<[f64; 3]> = spec.grid[0]
        .iter()
        .flat_map(|&a| {
            spec.grid[1]
                .iter()
                .flat_map(move |&b| spec.grid[2].iter().map(move |&c| [a, b, c]))
        })
        .collect();
    let scored: Vec<(usize, f64)> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, &q)| (i, objective(q)))
        .collect();
    let (best_idx, best_f) = scored
        .into_iter()
        .filter(|(_, f)| f.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .ok_or_else(|| Error::Degenerate("every grid candidate has a non-finite objective".into()))?;

    let mut q = candidates[best_idx];
    let mut f = best_f;
    let mut trace = vec![TuneStep {
        iter: 0,
        q,
        objective: f,
    }];
    let mut step = spec.gd_step;
    let mut halvings = 0;
    for iter in 1..=spec.gd_iters {
        let start = f;
        for i in 0..3 {
            for factor in [1.0 + step, 1.0 / (1.0 + step)] {
                let mut probe = q;
                probe[i] *= factor;
                let fp = objective(probe);
                if fp.is_finite() && fp < f {
                    q = probe;
                    f = fp;
                }
            }
        }
        assert!(f <= start, "descent objective increased");
        trace.push(TuneStep {
            iter,
            q,
            objective: f,
        });
        if f < start {
            if (start - f) / start.abs().max(f64::MIN_POSITIVE) < RELATIVE_IMPROVEMENT_STOP {
                break;
            }
        } else {
            halvings += 1;
            if halvings > MAX_STEP_HALVINGS {
                break;
            }
            step *= 0.5;
        }
    }
    Ok(TuneResult {
        q,
        objective: f,
        trace,
    })
}

/// Tuning report as `iter,q_theta,q_vx,q_z,objective`.
pub fn write_tune_csv<W: Write>(trace: &[TuneStep], mut out: W) -> Result<()> {
    writeln!(out, "iter,q_theta,q_vx,q_z,objective")?;
    for s in trace {
        writeln!(
            out,
            "{},{},{},{},{}",
            s.iter,
            fmt9(s.q[0]),
            fmt9(s.q[1]),
            fmt9(s.q[2]),
            fmt9(s.objective)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normal(n: usize, mean: f64, var: f64, seed: u64) -> Vec<f64> {
        let mut rng = trial_rng(seed, 0);
        (0..n)
            .map(|_| mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    #[test]
    fn flow_variance_examples() {
        let truth: Vec<f64> = (0..100).map(|i| (i as f64 * 0.1).sin()).collect();
        assert_eq!(estimate_flow_variance(&truth, &truth).unwrap(), 0.0);

        let zero = vec![0.0; 2000];
        let v = estimate_flow_variance(&normal(2000, 0.0, 0.017, 1), &zero).unwrap();
        assert!((v / 0.017 - 1.0).abs() < 0.15, "{v}");

        let shifted: Vec<f64> = normal(2000, 0.1, 0.017, 1);
        let v2 = estimate_flow_variance(&shifted, &zero).unwrap();
        assert!((v2 - v).abs() < 1e-12);

        assert!(estimate_flow_variance(&zero[..29], &zero[..29]).is_err());
        assert!(estimate_flow_variance(&zero[..40], &zero[..30]).is_err());
    }

    #[test]
    fn pressure_variance_examples() {
        assert_eq!(estimate_pressure_variance(&vec![1.0; 6000], 100.0).unwrap(), 0.0);
        let v = estimate_pressure_variance(&normal(6000, 1.0, 0.0055, 2), 100.0).unwrap();
        assert!((v / 0.0055 - 1.0).abs() < 0.1, "{v}");
        assert!(estimate_pressure_variance(&vec![1.0; 5999], 100.0).is_err());

        let drift: Vec<f64> = normal(6000, 1.0, 0.0055, 2)
            .iter()
            .enumerate()
            .map(|(i, x)| x + 0.001 * i as f64 / 100.0)
            .collect();
        assert!(estimate_pressure_variance(&drift, 100.0).unwrap() > v);
    }

    #[test]
    fn grid_selects_exact_member() {
        let target: [f64; 3] = [1e-3, 1e-5, 1e-1];
        let spec = TuneSpec {
            grid: [
                log_space(1e-5, 1e-1, 5),
                log_space(1e-6, 1e-2, 5),
                log_space(1e-3, 1.0, 4),
            ],
            gd_iters: 0,
            ..TuneSpec::default()
        };
        let obj = |q: [f64; 3]| {
            q.iter()
                .zip(target)
                .map(|(a, b)| (a.ln() - b.ln()).powi(2))
                .sum::<f64>()
        };
        let result = tune_q(&spec, obj).unwrap();
        for (a, b) in result.q.iter().zip(target) {
            assert!((a / b - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn descent_refines_off_grid_optimum() {
        let target: [f64; 3] = [3e-4, 2e-6, 0.05];
        let obj = |q: [f64; 3]| {
            1.0 + q
                .iter()
                .zip(target)
                .map(|(a, b)| (a.ln() - b.ln()).powi(2))
                .sum::<f64>()
        };
        let result = tune_q(&TuneSpec::default(), obj).unwrap();
        assert!(result.objective < 1.01);
        for w in result.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective);
        }
        assert_eq!(result.trace[0].iter, 0);
    }

    #[test]
    fn non_finite_candidates_are_discarded() {
        let obj = |q: [f64; 3]| if q[0] > 1e-3 { f64::NAN } else { q[0] + q[1] + q[2] };
        let result = tune_q(&TuneSpec::default(), obj).unwrap();
        assert!(result.objective.is_finite());
        assert!(tune_q(&TuneSpec::default(), |_| f64::NAN).is_err());
    }

    #[test]
    fn rejects_bad_spec() {
        let mut spec = TuneSpec::default();
        spec.grid[1].clear();
        assert!(tune_q(&spec, |_| 0.0).is_err());
        let spec = TuneSpec {
            gd_step: 0.0,
            ..TuneSpec::default()
        };
        assert!(tune_q(&spec, |_| 0.0).is_err());
    }

    #[test]
    fn tune_csv_layout() {
        let mut buf = Vec::new();
        let trace = [TuneStep {
            iter: 0,
            q: [1.0, 2.0, 3.0],
            objective: 0.5,
        }];
        write_tune_csv(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "iter,q_theta,q_vx,q_z,objective");
        assert!(text.lines().nth(1).unwrap().starts_with("0,"));
    }

    proptest! {
        #[test]
        fn variance_scale_equivariance(
            xs in prop::collection::vec(-10.0f64..10.0, 6000..6100),
            c in -5.0f64..5.0,
        ) {
            let zeros = vec![0.0; xs.len()];
            let scaled: Vec<f64> = xs.iter().map(|x| c * x).collect();
            let v = estimate_flow_variance(&xs, &zeros).unwrap();
            let vc = estimate_flow_variance(&scaled, &zeros).unwrap();
            prop_assert!((vc - c * c * v).abs() <= 1e-9 * (1.0 + c * c * v));
            let p = estimate_pressure_variance(&xs, 100.0).unwrap();
            let pc = estimate_pressure_variance(&scaled, 100.0).unwrap();
            prop_assert!((pc - c * c * p).abs() <= 1e-9 * (1.0 + c * c * p));
        }
    }
}
