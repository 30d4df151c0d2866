//! Gyroscope, pressure altimeter and downward camera models.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::flow::Frame;
use crate::model::{Channel, InputVec, MeasVec, StateVec};
use crate::{fmt9, trial_rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GyroModel {
    /// White noise floor added after sampling (rad/s).
    pub noise_std: f64,
    pub bias: f64,
    /// Propeller vibration amplitude seen by the sensing element (rad/s).
    pub vib_amplitude: f64,
    pub vib_freq: f64,
    /// First-order anti-alias low-pass cutoff (Hz); `None` bypasses it.
    pub aa_cutoff: Option<f64>,
}

impl Default for GyroModel {
    fn default() -> Self {
        Self {
            noise_std: 0.02,
            bias: 0.0,
            vib_amplitude: 0.2,
            vib_freq: 180.0,
            aa_cutoff: Some(42.0),
        }
    }
}

impl GyroModel {
    pub fn ideal() -> Self {
        Self {
            noise_std: 0.0,
            bias: 0.0,
            vib_amplitude: 0.0,
            vib_freq: 0.0,
            aa_cutoff: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.vib_freq >= 0.0 && self.vib_amplitude.is_finite()) {
            return Err(Error::InvalidParameter(
                "gyro noise_std and vib_freq must be >= 0".into(),
            ));
        }
        if let Some(fc) = self.aa_cutoff {
            if !(fc.is_finite() && fc > 0.0) {
                return Err(Error::InvalidParameter("aa_cutoff must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Magnitude response of the anti-alias filter at `freq`.
    pub fn filter_gain(&self, freq: f64) -> f64 {
        match self.aa_cutoff {
            Some(fc) => 1.0 / (1.0 + (freq / fc).powi(2)).sqrt(),
            None => 1.0,
        }
    }
}

/// Samples a gyroscope whose anti-alias filter acts in continuous time ahead
/// of the sampler.
///
/// The filter is linear, so the angular-rate path and the vibration path are
/// filtered separately: the rate is treated as piecewise linear between
/// samples (exact first-order-hold update) and the vibration tone is filtered
/// in closed form, including its start-up transient.
#[derive(Clone, Debug)]
pub struct GyroSampler {
    model: GyroModel,
    state: Option<FilterState>,
}

#[derive(Clone, Copy, Debug)]
struct FilterState {
    t0: f64,
    t_last: f64,
    x_last: f64,
    y_rate: f64,
}

impl GyroSampler {
    pub fn new(model: GyroModel) -> Result<Self> {
        model.validate()?;
        Ok(Self { model, state: None })
    }

    pub fn model(&self) -> &GyroModel {
        &self.model
    }

    fn vibration(&self, t: f64, t0: f64) -> f64 {
        let m = &self.model;
        let w = 2.0 * PI * m.vib_freq;
        match m.aa_cutoff {
            None => m.vib_amplitude * (w * t).sin(),
            Some(fc) => {
                let tau = 1.0 / (2.0 * PI * fc);
                let gain = m.filter_gain(m.vib_freq);
                let phase = -(w * tau).atan();
                m.vib_amplitude
                    * gain
                    * ((w * t + phase).sin() - (w * t0 + phase).sin() * (-(t - t0) / tau).exp())
            }
        }
    }

    /// Reading at time `t` for true rate `omega_true`; calls must be in time order.
    pub fn sample<R: Rng + ?Sized>(&mut self, omega_true: f64, t: f64, rng: &mut R) -> f64 {
        let filtered = match (self.model.aa_cutoff, self.state) {
            (None, _) => omega_true,
            (Some(_), None) => omega_true,
            (Some(fc), Some(s)) => {
                let tau = 1.0 / (2.0 * PI * fc);
                let h = t - s.t_last;
                if h <= 0.0 {
                    s.y_rate
                } else {
                    let e = (-h / tau).exp();
                    let slope = (omega_true - s.x_last) / h;
                    omega_true + (s.y_rate - s.x_last) * e - slope * tau * (1.0 - e)
                }
            }
        };
        let t0 = self.state.map_or(t, |s| s.t0);
        self.state = Some(FilterState {
            t0,
            t_last: t,
            x_last: omega_true,
            y_rate: filtered,
        });
        let noise = if self.model.noise_std > 0.0 {
            self.model.noise_std * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        let vib = if self.model.vib_amplitude != 0.0 {
            self.vibration(t, t0)
        } else {
            0.0
        };
        filtered + vib + self.model.bias + noise
    }
}

/// Frequency a tone at `freq` folds to when sampled at `fs`.
pub fn alias_frequency(freq: f64, fs: f64) -> f64 {
    (freq - (freq / fs).round() * fs).abs()
}

/// Single-sided amplitude spectrum `(frequency, amplitude)` for bins `1..N/2`.
pub fn amplitude_spectrum(samples: &[f64], fs: f64) -> Vec<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Vec::new();
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&s| Complex::new(s - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    (1..=n / 2)
        .map(|k| (k as f64 * fs / n as f64, 2.0 * buf[k].norm() / n as f64))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PressureModel {
    pub noise_std: f64,
    pub bias_init_samples: usize,
    /// Peak altitude drop caused by propeller wash at takeoff (m).
    pub ground_effect_depth: f64,
    pub ground_effect_duration: f64,
    /// Absolute altitude the sensor reports on the ground (m); removed by the
    /// bias initialization.
    pub station_altitude: f64,
}

impl Default for PressureModel {
    fn default() -> Self {
        Self {
            noise_std: 0.0055f64.sqrt(),
            bias_init_samples: 25,
            ground_effect_depth: 0.4,
            ground_effect_duration: 1.8,
            station_altitude: 47.0,
        }
    }
}

impl PressureModel {
    pub fn validate(&self) -> Result<()> {
        if self.bias_init_samples < 1 {
            return Err(Error::InvalidParameter("bias_init_samples must be >= 1".into()));
        }
        if !(self.ground_effect_duration >= 0.0 && self.noise_std >= 0.0) {
            return Err(Error::InvalidParameter(
                "ground_effect_duration and noise_std must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Altitude error from ground effect `t` seconds after takeoff:
    /// `depth * exp(-t / tau)` with `tau = duration / 3`, zero outside `[0, duration)`.
    pub fn ground_effect(&self, t_since_takeoff: f64) -> f64 {
        if t_since_takeoff < 0.0 || t_since_takeoff >= self.ground_effect_duration {
            return 0.0;
        }
        let tau = self.ground_effect_duration / 3.0;
        self.ground_effect_depth * (-t_since_takeoff / tau).exp()
    }
}

/// Pressure altimeter whose bias is the mean of its first grounded readings.
#[derive(Clone, Debug)]
pub struct PressureSampler {
    model: PressureModel,
    sum: f64,
    collected: usize,
    bias: Option<f64>,
}

impl PressureSampler {
    pub fn new(model: PressureModel) -> Result<Self> {
        model.validate()?;
        Ok(Self {
            model,
            sum: 0.0,
            collected: 0,
            bias: None,
        })
    }

    pub fn bias(&self) -> Option<f64> {
        self.bias
    }

    /// Bias-corrected altitude. The first `bias_init_samples` readings are
    /// consumed by the bias estimate and report [`Error::NotReady`].
    pub fn sample<R: Rng + ?Sized>(
        &mut self,
        z_true: f64,
        t_since_takeoff: f64,
        rng: &mut R,
    ) -> Result<f64> {
        let noise = if self.model.noise_std > 0.0 {
            self.model.noise_std * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        let raw = self.model.station_altitude + z_true - self.model.ground_effect(t_since_takeoff)
            + noise;
        match self.bias {
            Some(bias) => Ok(raw - bias),
            None => {
                self.sum += raw;
                self.collected += 1;
                if self.collected == self.model.bias_init_samples {
                    self.bias = Some(self.sum / self.collected as f64);
                }
                Err(Error::NotReady {
                    collected: self.collected,
                    required: self.model.bias_init_samples,
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view (degrees).
    pub fov_deg: f64,
    pub frame_rate: f64,
    pub skip_factor: usize,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            fov_deg: 120.0,
            frame_rate: 100.0,
            skip_factor: 4,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.skip_factor == 0 {
            return Err(Error::InvalidParameter(
                "camera width, height and skip_factor must be positive".into(),
            ));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::InvalidParameter("fov must be in (0, 180) degrees".into()));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::InvalidParameter("frame_rate must be > 0".into()));
        }
        Ok(())
    }

    /// Angular pitch of one full-resolution pixel (rad).
    pub fn pixel_pitch(&self) -> f64 {
        self.fov_deg.to_radians() / self.width as f64
    }

    /// Flow calibration constant for pixel-skipped frames. Image columns
    /// increase towards world -x, which makes the constant negative.
    pub fn flow_alpha(&self) -> f64 {
        -self.pixel_pitch() * self.skip_factor as f64
    }
}

/// Camera pose in the x-z plane.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub z: f64,
    pub theta: f64,
}

/// Periodic ground texture with bilinear sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    size: usize,
    /// Texel edge length (m).
    texel: f64,
    data: Vec<f32>,
}

impl Texture {
    pub const DEFAULT_SIZE: usize = 512;
    pub const DEFAULT_TEXEL: f64 = 0.1;

    pub fn uniform(value: f32) -> Self {
        Self {
            size: 1,
            texel: 1.0,
            data: vec![value],
        }
    }

    /// White noise blurred with a Gaussian of `sigma_texels`, scaled to mean 128
    /// and standard deviation 40.
    pub fn band_limited(seed: u64, size: usize, texel: f64, sigma_texels: f64) -> Result<Self> {
        if size < 2 || !(texel > 0.0) || !(sigma_texels > 0.0) {
            return Err(Error::InvalidParameter("bad texture parameters".into()));
        }
        let mut rng = trial_rng(seed, 0xfeed);
        let noise: Vec<f64> = (0..size * size).map(|_| rng.sample(StandardNormal)).collect();

        let radius = (3.0 * sigma_texels).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma_texels * sigma_texels)).exp())
            .collect();
        let ksum: f64 = kernel.iter().sum();
        let n = size as isize;
        let wrap = |i: isize| i.rem_euclid(n) as usize;

        let mut rows = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size as isize {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    acc += w * noise[y * size + wrap(x + k as isize - radius)];
                }
                rows[y * size + x as usize] = acc / ksum;
            }
        }
        let mut blurred = vec![0.0; size * size];
        for y in 0..size as isize {
            for x in 0..size {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    acc += w * rows[wrap(y + k as isize - radius) * size + x];
                }
                blurred[y as usize * size + x] = acc / ksum;
            }
        }
        let mean = blurred.iter().sum::<f64>() / blurred.len() as f64;
        let std = (blurred.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / blurred.len() as f64)
            .sqrt();
        let data = blurred
            .iter()
            .map(|v| (128.0 + 40.0 * (v - mean) / std) as f32)
            .collect();
        Ok(Self { size, texel, data })
    }

    pub fn default_ground(seed: u64) -> Self {
        Self::band_limited(seed, Self::DEFAULT_SIZE, Self::DEFAULT_TEXEL, 2.0)
            .expect("default texture parameters are valid")
    }

    /// Bilinear lookup at ground coordinates (m).
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let u = x / self.texel;
        let v = y / self.texel;
        let (u0, v0) = (u.floor(), v.floor());
        let (fu, fv) = (u - u0, v - v0);
        let n = self.size as i64;
        let idx = |a: f64, b: f64| {
            let i = (a as i64).rem_euclid(n) as usize;
            let j = (b as i64).rem_euclid(n) as usize;
            f64::from(self.data[j * self.size + i])
        };
        let top = idx(u0, v0) * (1.0 - fu) + idx(u0 + 1.0, v0) * fu;
        let bottom = idx(u0, v0 + 1.0) * (1.0 - fu) + idx(u0 + 1.0, v0 + 1.0) * fu;
        top * (1.0 - fv) + bottom * fv
    }
}

/// Luminance assigned to rays that do not hit the ground.
const SKY: u8 = 128;

/// Renders the ground plane seen by a downward camera with equal-angular
/// pixel spacing. Pitching the body forward tilts the optical axis towards -x.
pub fn render_frame(
    pose: Pose,
    camera: &CameraModel,
    texture: &Texture,
    timestamp: f64,
) -> Result<Frame> {
    camera.validate()?;
    if !(pose.z.is_finite() && pose.z > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "camera must be above the ground (z = {})",
            pose.z
        )));
    }
    if !pose.x.is_finite() || !pose.theta.is_finite() {
        return Err(Error::NonFinite("camera pose"));
    }
    let pitch = camera.pixel_pitch();
    let cx = (camera.width as f64 - 1.0) / 2.0;
    let cy = (camera.height as f64 - 1.0) / 2.0;
    let limit = 89f64.to_radians();

    // per column: ground x offset per unit altitude and the y stretch factor
    let columns: Vec<Option<(f64, f64)>> = (0..camera.width)
        .map(|i| {
            let phi = -(i as f64 - cx) * pitch;
            let tilt = phi - pose.theta;
            (tilt.abs() < limit).then(|| (tilt.tan(), phi.cos() / tilt.cos()))
        })
        .collect();
    let rows: Vec<f64> = (0..camera.height)
        .map(|j| ((j as f64 - cy) * pitch).tan())
        .collect();

    let mut pixels = Vec::with_capacity(camera.width * camera.height);
    for tan_y in &rows {
        for col in &columns {
            let value = match col {
                Some((tan_x, stretch)) => {
                    let gx = pose.x + pose.z * tan_x;
                    let gy = pose.z * tan_y * stretch;
                    texture.sample(gx, gy).round().clamp(0.0, 255.0) as u8
                }
                None => SKY,
            };
            pixels.push(value);
        }
    }
    Frame::new(camera.width, camera.height, pixels, timestamp)
}

/// Optic flow of flat ground: `omega - v_x / z`.
pub fn true_flow(q: &StateVec, omega: f64) -> Result<f64> {
    if !(q.z.is_finite() && q.z > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "optic flow undefined at z = {}",
            q.z
        )));
    }
    Ok(omega - q.v_x / q.z)
}

/// One timestamped sensor sample. Unavailable values are NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorRecord {
    pub t: f64,
    /// Body rates `[roll, pitch, yaw]` (rad/s); planar flight uses the pitch axis.
    pub gyro: [f64; 3],
    /// Bias-corrected pressure altitude (m).
    pub z_m: f64,
    /// Optic flow `[x, y]` (rad/s).
    pub flow: [f64; 2],
    pub frame: Option<u64>,
}

impl SensorRecord {
    pub fn planar(t: f64, omega_m: f64, z_m: f64, flow: f64, frame: Option<u64>) -> Self {
        Self {
            t,
            gyro: [0.0, omega_m, 0.0],
            z_m,
            flow: [flow, 0.0],
            frame,
        }
    }

    pub fn omega_m(&self) -> f64 {
        self.gyro[1]
    }

    pub fn input(&self) -> InputVec {
        InputVec::new(self.omega_m())
    }

    pub fn measurement(&self) -> MeasVec {
        MeasVec {
            flow: Channel::new(self.flow[0]),
            z_m: Channel::new(self.z_m),
        }
    }
}

/// Sensor stream as `t,omega_m,z_m,frame` (empty frame field when no frame).
pub fn write_sensor_csv<W: Write>(records: &[SensorRecord], mut out: W) -> Result<()> {
    writeln!(out, "t,omega_m,z_m,frame")?;
    for r in records {
        let frame = r.frame.map(|f| f.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", fmt9(r.t), fmt9(r.omega_m()), fmt9(r.z_m), frame)?;
    }
    Ok(())
}
