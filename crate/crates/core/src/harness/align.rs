//! Resampling of the flight log streams onto the sensor timeline.

use crate::error::{Error, Result};
use crate::harness::log::{EstimateRecord, FlightLog, TruthRecord};
use crate::model::StateVec;
use crate::sensors::SensorRecord;

/// Gaps wider than this many target periods are flagged.
pub const GAP_PERIODS: f64 = 5.0;
pub const VELOCITY_WINDOW: usize = 5;

/// All streams on the sensor timeline, restricted to the common time range.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedTable {
    pub t: Vec<f64>,
    pub sensors: Vec<SensorRecord>,
    /// Index of each row in the source sensor stream.
    pub sensor_index: Vec<usize>,
    pub truth_x: Vec<f64>,
    /// Truth `(theta, v_x, z)`; `v_x` is the smoothed derivative of `truth_x`.
    pub truth: Vec<StateVec>,
    pub reference: Option<Vec<StateVec>>,
    /// Row interpolated across a gap wider than five sample periods.
    pub gap: Vec<bool>,
}

impl AlignedTable {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Log whose streams all share this table's timeline.
    pub fn to_log(&self, epoch: chrono::DateTime<chrono::Utc>) -> FlightLog {
        FlightLog {
            epoch,
            sensors: self.sensors.clone(),
            truth: self
                .t
                .iter()
                .zip(&self.truth_x)
                .zip(&self.truth)
                .map(|((&t, &x), q)| TruthRecord {
                    t,
                    x,
                    z: q.z,
                    theta: q.theta,
                })
                .collect(),
            reference: self.reference.as_ref().map(|r| {
                self.t
                    .iter()
                    .zip(r)
                    .map(|(&t, &state)| EstimateRecord { t, state })
                    .collect()
            }),
        }
    }
}

/// Linear interpolation cursor over a strictly increasing time series.
struct Interp<'a> {
    t: &'a [f64],
    j: usize,
}

impl<'a> Interp<'a> {
    fn new(t: &'a [f64]) -> Self {
        Self { t, j: 0 }
    }

    /// Bracketing index and weight for `tq` (non-decreasing across calls).
    fn locate(&mut self, tq: f64) -> (usize, f64, f64) {
        while self.j + 2 < self.t.len() && self.t[self.j + 1] < tq {
            self.j += 1;
        }
        let (t0, t1) = (self.t[self.j], self.t[self.j + 1]);
        (self.j, ((tq - t0) / (t1 - t0)).clamp(0.0, 1.0), t1 - t0)
    }
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    if w == 0.0 {
        a
    } else if w == 1.0 {
        b
    } else {
        a + (b - a) * w
    }
}

/// Centered difference (one-sided at the ends) followed by a centered moving
/// average of `window` samples, shrunk at the ends.
pub fn differentiate(t: &[f64], x: &[f64], window: usize) -> Vec<f64> {
    let n = t.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            (x[b] - x[a]) / (t[b] - t[a])
        })
        .collect();
    let half = window / 2;
    (0..n)
        .map(|i| {
            let r = half.min(i).min(n - 1 - i);
            let slice = &raw[i - r..=i + r];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

fn stream_range(ts: &[f64]) -> Option<(f64, f64)> {
    Some((*ts.first()?, *ts.last()?))
}

/// Interpolates truth (and reference) onto the sensor timeline. Truth velocity
/// is the smoothed derivative of the resampled truth position.
pub fn align(log: &FlightLog, target_rate: f64) -> Result<AlignedTable> {
    if !(target_rate.is_finite() && target_rate > 0.0) {
        return Err(Error::InvalidParameter("target_rate must be > 0".into()));
    }
    log.validate()?;
    if log.truth.len() < 2 {
        return Err(Error::InsufficientData("truth stream needs >= 2 records".into()));
    }
    let sensor_t: Vec<f64> = log.sensors.iter().map(|r| r.t).collect();
    let truth_t: Vec<f64> = log.truth.iter().map(|r| r.t).collect();
    let ref_t: Option<Vec<f64>> = log
        .reference
        .as_ref()
        .map(|r| r.iter().map(|e| e.t).collect());

    let mut ranges = vec![stream_range(&sensor_t).ok_or(Error::NoOverlap)?, stream_range(&truth_t).unwrap()];
    if let Some(rt) = &ref_t {
        if rt.len() < 2 {
            return Err(Error::InsufficientData("reference stream needs >= 2 records".into()));
        }
        ranges.push(stream_range(rt).unwrap());
    }
    let lo = ranges.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let hi = ranges.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let rows: Vec<usize> = (0..sensor_t.len())
        .filter(|&i| sensor_t[i] >= lo && sensor_t[i] <= hi)
        .collect();
    if rows.is_empty() {
        return Err(Error::NoOverlap);
    }

    let max_gap = GAP_PERIODS / target_rate * (1.0 + 1e-9);
    let mut t = Vec::with_capacity(rows.len());
    let mut truth_x = Vec::with_capacity(rows.len());
    let mut theta = Vec::with_capacity(rows.len());
    let mut z = Vec::with_capacity(rows.len());
    let mut gap = Vec::with_capacity(rows.len());
    let mut cursor = Interp::new(&truth_t);
    for &i in &rows {
        let tq = sensor_t[i];
        let (j, w, span) = cursor.locate(tq);
        let (a, b) = (&log.truth[j], &log.truth[j + 1]);
        t.push(tq);
        truth_x.push(lerp(a.x, b.x, w));
        z.push(lerp(a.z, b.z, w));
        theta.push(lerp(a.theta, b.theta, w));
        gap.push(span > max_gap);
    }

    let reference = match (&log.reference, &ref_t) {
        (Some(reference), Some(rt)) => {
            let mut cursor = Interp::new(rt);
            let mut out = Vec::with_capacity(rows.len());
            for (k, &tq) in t.iter().enumerate() {
                let (j, w, span) = cursor.locate(tq);
                let (a, b) = (reference[j].state, reference[j + 1].state);
                out.push(StateVec::new(
                    lerp(a.theta, b.theta, w),
                    lerp(a.v_x, b.v_x, w),
                    lerp(a.z, b.z, w),
                ));
                gap[k] |= span > max_gap;
            }
            Some(out)
        }
        _ => None,
    };

    let vx = differentiate(&t, &truth_x, VELOCITY_WINDOW);
    let truth = (0..t.len()).map(|k| StateVec::new(theta[k], vx[k], z[k])).collect();
    Ok(AlignedTable {
        sensors: rows.iter().map(|&i| log.sensors[i]).collect(),
        sensor_index: rows,
        t,
        truth_x,
        truth,
        reference,
        gap,
    })
}
