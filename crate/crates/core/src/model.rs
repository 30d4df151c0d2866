//! Plant parameters, state/input/measurement values and the linearized
//! hover model matrices.
//!
//! The state is `[theta, v_x, z]` (pitch, world-frame horizontal velocity,
//! altitude). The gyroscope reading is the only input and the two outputs are
//! optic flow and pressure altitude.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value threshold used by [`observability_rank`].
pub const RANK_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    /// Gravitational acceleration (m/s^2).
    pub g: f64,
    /// Translational drag over mass (1/s).
    pub b_over_m: f64,
    /// Linearization altitude (m).
    pub z_d: f64,
    /// Sensor update rate (Hz).
    pub f_sample: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            g: 9.81,
            b_over_m: 1.0,
            z_d: 1.0,
            f_sample: 100.0,
        }
    }
}

impl PlantParams {
    pub fn new(g: f64, b_over_m: f64, z_d: f64, f_sample: f64) -> Result<Self> {
        let params = Self {
            g,
            b_over_m,
            z_d,
            f_sample,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |cond: bool, msg: &str| {
            if cond {
                Ok(())
            } else {
                Err(Error::InvalidParameter(msg.to_string()))
            }
        };
        ok(self.g.is_finite() && self.g > 0.0, "g must be > 0")?;
        ok(
            self.b_over_m.is_finite() && self.b_over_m >= 0.0,
            "b_over_m must be >= 0",
        )?;
        ok(self.z_d.is_finite() && self.z_d > 0.0, "z_d must be > 0")?;
        ok(
            self.f_sample.is_finite() && self.f_sample > 0.0,
            "f_sample must be > 0",
        )
    }

    /// Sample period `1 / f_sample`.
    pub fn dt(&self) -> f64 {
        1.0 / self.f_sample
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateVec {
    pub theta: f64,
    pub v_x: f64,
    pub z: f64,
}

impl StateVec {
    pub const ZERO: StateVec = StateVec {
        theta: 0.0,
        v_x: 0.0,
        z: 0.0,
    };

    pub fn new(theta: f64, v_x: f64, z: f64) -> Self {
        Self { theta, v_x, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.theta, self.v_x, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.v_x.is_finite() && self.z.is_finite()
    }
}

impl fmt::Display for StateVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[theta={:.6}, v_x={:.6}, z={:.6}]",
            self.theta, self.v_x, self.z
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InputVec {
    /// Measured angular velocity (rad/s).
    pub omega_m: f64,
}

impl InputVec {
    pub fn new(omega_m: f64) -> Self {
        Self { omega_m }
    }
}

/// One measurement channel with its validity flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub value: f64,
    pub valid: bool,
}

impl Channel {
    /// Valid iff the value is finite.
    pub fn new(value: f64) -> Self {
        Self {
            value,
            valid: value.is_finite(),
        }
    }

    pub fn invalid() -> Self {
        Self {
            value: 0.0,
            valid: false,
        }
    }

    pub fn usable(&self) -> bool {
        self.valid && self.value.is_finite()
    }
}

/// Output vector `y = [Omega_m, z_m]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasVec {
    /// Optic flow (rad/s).
    pub flow: Channel,
    /// Pressure-derived altitude (m).
    pub z_m: Channel,
}

impl MeasVec {
    pub fn new(flow: f64, z_m: f64) -> Self {
        Self {
            flow: Channel::new(flow),
            z_m: Channel::new(z_m),
        }
    }

    pub fn from_vector(y: &Vector2<f64>) -> Self {
        Self::new(y[0], y[1])
    }
}

/// Measurement and process noise statistics used for gain design.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    /// Measurement covariance (diagonal), `[flow, pressure]`.
    pub r_n: Matrix2<f64>,
    /// Process covariance (diagonal), `[theta, v_x, z]`.
    pub q_n: Matrix3<f64>,
    /// Disturbance input matrix.
    pub g: Matrix3<f64>,
}

impl Default for NoiseConfig {
    /// Flight-tuned values: `R = diag(0.017, 0.0055)`,
    /// `Q = diag(0.0124^2, 0.001^2, 0.22^2)`, `G = I`.
    fn default() -> Self {
        Self::diagonal([0.017, 0.0055], [0.0124 * 0.0124, 0.001 * 0.001, 0.22 * 0.22])
            .expect("default noise is valid")
    }
}

impl NoiseConfig {
    pub fn diagonal(r: [f64; 2], q: [f64; 3]) -> Result<Self> {
        if r.iter().chain(q.iter()).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter(
                "noise variances must be finite and > 0".into(),
            ));
        }
        Ok(Self {
            r_n: Matrix2::from_diagonal(&Vector2::from(r)),
            q_n: Matrix3::from_diagonal(&Vector3::from(q)),
            g: Matrix3::identity(),
        })
    }

    pub fn r_diag(&self) -> [f64; 2] {
        [self.r_n[(0, 0)], self.r_n[(1, 1)]]
    }

    pub fn q_diag(&self) -> [f64; 3] {
        [self.q_n[(0, 0)], self.q_n[(1, 1)], self.q_n[(2, 2)]]
    }

    pub fn with_q(&self, q: [f64; 3]) -> Result<Self> {
        let mut out = Self::diagonal(self.r_diag(), q)?;
        out.g = self.g;
        Ok(out)
    }
}

/// `A` (3x3) and `B` (3x1) of the linearized hover dynamics.
pub fn build_dynamics(params: &PlantParams) -> (Matrix3<f64>, Vector3<f64>) {
    #[rustfmt::skip]
    let a = Matrix3::new(
        0.0,      0.0,              0.0,
        params.g, -params.b_over_m, 0.0,
        0.0,      0.0,              0.0,
    );
    (a, Vector3::new(1.0, 0.0, 0.0))
}

/// `C` (2x3) and `D` (2x1) of the observation model linearized at `z_d`.
pub fn build_observation(params: &PlantParams) -> Result<(Matrix2x3<f64>, Vector2<f64>)> {
    if !(params.z_d.is_finite() && params.z_d > 0.0) {
        return Err(Error::InvalidParameter("z_d must be > 0".into()));
    }
    #[rustfmt::skip]
    let c = Matrix2x3::new(
        0.0, -1.0 / params.z_d, 0.0,
        0.0, 0.0,               1.0,
    );
    Ok((c, Vector2::new(1.0, 0.0)))
}

/// Rank of `[C; CA]`. Singular values below `RANK_TOLERANCE * s_max` count as zero.
pub fn observability_rank(a: &Matrix3<f64>, c: &Matrix2x3<f64>) -> usize {
    let ca = c * a;
    let mut stacked = SMatrix::<f64, 4, 3>::zeros();
    stacked.fixed_view_mut::<2, 3>(0, 0).copy_from(c);
    stacked.fixed_view_mut::<2, 3>(2, 0).copy_from(&ca);
    let sv = stacked.svd(false, false).singular_values;
    let s_max = sv.max();
    if s_max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOLERANCE * s_max).count()
}

/// Bundled matrices of the estimator model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Model {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    pub c: Matrix2x3<f64>,
    pub d: Vector2<f64>,
}

impl Model {
    pub fn new(params: &PlantParams) -> Result<Self> {
        params.validate()?;
        let (a, b) = build_dynamics(params);
        let (c, d) = build_observation(params)?;
        Ok(Self { a, b, c, d })
    }
}

/// Plant and noise parameters as read from a `key = value` config file.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Config {
    pub plant: PlantParams,
    pub noise: NoiseConfig,
}

impl Config {
    pub const KEYS: [&'static str; 9] = [
        "g", "b_over_m", "z_d", "f_sample", "r_flow", "r_press", "q_theta", "q_vx", "q_z",
    ];

    /// Parses `key = value` lines. Blank lines and `#` comments are ignored;
    /// missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut plant = PlantParams::default();
        let mut r = NoiseConfig::default().r_diag();
        let mut q = NoiseConfig::default().q_diag();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let value: f64 = value.trim().parse().map_err(|_| Error::Config {
                line: line_no,
                message: format!("`{}` is not a number", value.trim()),
            })?;
            match key {
                "g" => plant.g = value,
                "b_over_m" => plant.b_over_m = value,
                "z_d" => plant.z_d = value,
                "f_sample" => plant.f_sample = value,
                "r_flow" => r[0] = value,
                "r_press" => r[1] = value,
                "q_theta" => q[0] = value,
                "q_vx" => q[1] = value,
                "q_z" => q[2] = value,
                other => {
                    return Err(Error::Config {
                        line: line_no,
                        message: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        plant.validate()?;
        Ok(Self {
            plant,
            noise: NoiseConfig::diagonal(r, q)?,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let r = self.noise.r_diag();
        let q = self.noise.q_diag();
        let values = [
            self.plant.g,
            self.plant.b_over_m,
            self.plant.z_d,
            self.plant.f_sample,
            r[0],
            r[1],
            q[0],
            q[1],
            q[2],
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v:e}\n"))
            .collect()
    }
}
