//! Lucas-Kanade optic flow on pixel-skipped frames.
//!
//! Flow is solved as `v = (J^T J)^-1 J^T b` where the rows of `J` are the
//! spatial gradients `[I_x, I_y]` at each interior pixel and `b = -I_t`.
//! Spatial gradients are central differences on the previous frame; the
//! temporal gradient is the two-frame difference.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fmt9;

/// 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    /// Capture time (s).
    pub timestamp: f64,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, timestamp: f64) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {width}x{height} frame",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            timestamp,
        })
    }

    pub fn uniform(width: usize, height: usize, value: u8, timestamp: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
            timestamp,
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        timestamp: f64,
        mut f: impl FnMut(usize, usize) -> u8,
    ) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
            timestamp,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f64 {
        f64::from(self.pixels[y * self.width + x])
    }

    pub fn flip_horizontal(&self) -> Frame {
        Frame::from_fn(self.width, self.height, self.timestamp, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    /// Binary PGM (P5).
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_pgm(std::io::BufWriter::new(file))
    }

    pub fn read_pgm<R: Read>(input: R, timestamp: f64) -> Result<Frame> {
        let mut reader = BufReader::new(input);
        let mut tokens = Vec::new();
        let mut line = String::new();
        while tokens.len() < 4 {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated PGM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_owned));
        }
        if tokens[0] != "P5" || tokens.len() != 4 {
            return Err(Error::Format("expected a binary (P5) PGM header".into()));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM header field `{s}`")))
        };
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 255 {
            return Err(Error::Format("only 8-bit PGM is supported".into()));
        }
        let mut pixels = vec![0u8; width * height];
        reader.read_exact(&mut pixels)?;
        Frame::new(width, height, pixels, timestamp)
    }

    pub fn load_pgm(path: impl AsRef<Path>, timestamp: f64) -> Result<Frame> {
        Self::read_pgm(std::fs::File::open(path)?, timestamp)
    }
}

/// Pixel-skipping decimation: keeps every `factor`-th pixel in each axis.
pub fn downsample(frame: &Frame, factor: usize) -> Result<Frame> {
    if factor == 0 || frame.width % factor != 0 || frame.height % factor != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} is not divisible by {factor}",
            frame.width, frame.height
        )));
    }
    Ok(Frame::from_fn(
        frame.width / factor,
        frame.height / factor,
        frame.timestamp,
        |x, y| frame.get(x * factor, y * factor),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowMode {
    Dense,
    Patches,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    /// Pixel-to-angle calibration (rad/pixel); the sign encodes camera orientation.
    pub alpha: f64,
    pub mode: FlowMode,
    pub patch_size: usize,
    pub patch_count: usize,
    /// Smallest eigenvalue of `J^T J` accepted as well conditioned (luminance^2).
    pub cond_threshold: f64,
    /// Minimum number of well-conditioned patches.
    pub quorum: usize,
    pub frame_rate: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            alpha: -0.027,
            mode: FlowMode::Dense,
            patch_size: 10,
            patch_count: 12,
            cond_threshold: 100.0 * f64::EPSILON * 255.0 * 255.0,
            quorum: 4,
            frame_rate: 100.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha != 0.0) {
            return Err(Error::InvalidParameter("alpha must be nonzero".into()));
        }
        if self.patch_size < 3 {
            return Err(Error::InvalidParameter("patch_size must be >= 3".into()));
        }
        if self.patch_count == 0 || self.quorum == 0 || self.quorum > self.patch_count {
            return Err(Error::InvalidParameter(
                "need 1 <= quorum <= patch_count".into(),
            ));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::InvalidParameter("frame_rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowEstimate {
    /// Image flow `[V_x, V_y]` (px/frame).
    pub v_px: [f64; 2],
    /// Angular rate `alpha * V_x * F` (rad/s).
    pub omega: f64,
    /// Smallest eigenvalue of `J^T J` among the systems that were used.
    pub min_eig: f64,
    pub valid: bool,
}

impl FlowEstimate {
    fn invalid(min_eig: f64) -> Self {
        Self {
            v_px: [0.0, 0.0],
            omega: 0.0,
            min_eig,
            valid: false,
        }
    }
}

/// Normal equations accumulated over one image region.
#[derive(Clone, Copy, Debug, Default)]
struct NormalEquations {
    xx: f64,
    xy: f64,
    yy: f64,
    xb: f64,
    yb: f64,
}

impl NormalEquations {
    fn accumulate(prev: &Frame, curr: &Frame, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        let mut ne = Self::default();
        for y in (y0 + 1)..(y0 + h - 1) {
            for x in (x0 + 1)..(x0 + w - 1) {
                let ix = 0.5 * (prev.at(x + 1, y) - prev.at(x - 1, y));
                let iy = 0.5 * (prev.at(x, y + 1) - prev.at(x, y - 1));
                let b = -(curr.at(x, y) - prev.at(x, y));
                ne.xx += ix * ix;
                ne.xy += ix * iy;
                ne.yy += iy * iy;
                ne.xb += ix * b;
                ne.yb += iy * b;
            }
        }
        ne
    }

    fn min_eig(&self) -> f64 {
        let mean = 0.5 * (self.xx + self.yy);
        let half_diff = 0.5 * (self.xx - self.yy);
        mean - (half_diff * half_diff + self.xy * self.xy).sqrt()
    }

    fn solve(&self, threshold: f64) -> Option<[f64; 2]> {
        if self.min_eig() < threshold {
            return None;
        }
        let det = self.xx * self.yy - self.xy * self.xy;
        if det <= 0.0 {
            return None;
        }
        Some([
            (self.yy * self.xb - self.xy * self.yb) / det,
            (self.xx * self.yb - self.xy * self.xb) / det,
        ])
    }
}

fn check_pair(prev: &Frame, curr: &Frame) -> Result<()> {
    if prev.width != curr.width || prev.height != curr.height {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            prev.width, prev.height, curr.width, curr.height
        )));
    }
    if prev.width < 3 || prev.height < 3 {
        return Err(Error::DimensionMismatch("frames need interior pixels".into()));
    }
    Ok(())
}

/// Single solve over all `(W-2)(H-2)` interior pixels.
pub fn lk_dense(prev: &Frame, curr: &Frame, config: &FlowConfig) -> Result<FlowEstimate> {
    check_pair(prev, curr)?;
    let ne = NormalEquations::accumulate(prev, curr, 0, 0, prev.width, prev.height);
    let min_eig = ne.min_eig();
    Ok(match ne.solve(config.cond_threshold) {
        Some(v) => FlowEstimate {
            v_px: v,
            omega: to_angular(v[0], config.alpha, config.frame_rate),
            min_eig,
            valid: true,
        },
        None => FlowEstimate::invalid(min_eig),
    })
}

/// Top-left corners of `count` square patches laid out as an evenly spaced
/// grid whose shape best matches the frame aspect ratio.
pub fn patch_origins(
    width: usize,
    height: usize,
    patch: usize,
    count: usize,
) -> Result<Vec<(usize, usize)>> {
    let aspect = width as f64 / height as f64;
    let grid = (1..=count)
        .filter(|c| count % c == 0)
        .map(|cols| (cols, count / cols))
        .filter(|&(cols, rows)| cols * patch <= width && rows * patch <= height)
        .min_by(|a, b| {
            let da = ((a.0 as f64 / a.1 as f64) / aspect).ln().abs();
            let db = ((b.0 as f64 / b.1 as f64) / aspect).ln().abs();
            da.total_cmp(&db)
        });
    let (cols, rows) = grid.ok_or_else(|| {
        Error::DimensionMismatch(format!(
            "{count} patches of {patch}x{patch} do not fit in {width}x{height}"
        ))
    })?;
    let gap_x = (width - cols * patch) / (cols + 1);
    let gap_y = (height - rows * patch) / (rows + 1);
    let mut out = Vec::with_capacity(count);
    for r in 0..rows {
        for c in 0..cols {
            out.push((gap_x + c * (patch + gap_x), gap_y + r * (patch + gap_y)));
        }
    }
    Ok(out)
}

/// Per-patch solves averaged over the well-conditioned patches.
pub fn lk_patches(prev: &Frame, curr: &Frame, config: &FlowConfig) -> Result<FlowEstimate> {
    check_pair(prev, curr)?;
    config.validate()?;
    let origins = patch_origins(prev.width, prev.height, config.patch_size, config.patch_count)?;
    let p = config.patch_size;
    let mut sum = [0.0; 2];
    let mut used = 0usize;
    let mut min_eig = f64::INFINITY;
    for &(x0, y0) in &origins {
        let ne = NormalEquations::accumulate(prev, curr, x0, y0, p, p);
        if let Some(v) = ne.solve(config.cond_threshold) {
            sum[0] += v[0];
            sum[1] += v[1];
            used += 1;
            min_eig = min_eig.min(ne.min_eig());
        }
    }
    if used < config.quorum {
        return Ok(FlowEstimate::invalid(if used == 0 { 0.0 } else { min_eig }));
    }
    let v = [sum[0] / used as f64, sum[1] / used as f64];
    Ok(FlowEstimate {
        v_px: v,
        omega: to_angular(v[0], config.alpha, config.frame_rate),
        min_eig,
        valid: true,
    })
}

/// Dispatches on `config.mode`.
pub fn estimate(prev: &Frame, curr: &Frame, config: &FlowConfig) -> Result<FlowEstimate> {
    match config.mode {
        FlowMode::Dense => lk_dense(prev, curr, config),
        FlowMode::Patches => lk_patches(prev, curr, config),
    }
}

/// Converts image flow (px/frame) to an angular rate (rad/s).
pub fn to_angular(v_px: f64, alpha: f64, frame_rate: f64) -> f64 {
    alpha * v_px * frame_rate
}

/// Largest angular rate measurable before the inter-frame displacement
/// exceeds half a pixel: `0.5 |alpha| F`.
pub fn saturation_rate(alpha: f64, frame_rate: f64) -> f64 {
    0.5 * alpha.abs() * frame_rate
}

/// Least-squares slope through the origin of `gyro / F` against `flow_px`.
pub fn calibrate_alpha(flow_px: &[f64], gyro: &[f64], frame_rate: f64) -> Result<f64> {
    if flow_px.len() != gyro.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} flow samples vs {} gyro samples",
            flow_px.len(),
            gyro.len()
        )));
    }
    if flow_px.len() < 10 {
        return Err(Error::InsufficientData(
            "alpha calibration needs at least 10 samples".into(),
        ));
    }
    if !(frame_rate.is_finite() && frame_rate > 0.0) {
        return Err(Error::InvalidParameter("frame_rate must be > 0".into()));
    }
    let sxx: f64 = flow_px.iter().map(|f| f * f).sum();
    let sxy: f64 = flow_px
        .iter()
        .zip(gyro)
        .map(|(f, g)| f * g / frame_rate)
        .sum();
    if !sxx.is_finite() || sxx <= f64::EPSILON * flow_px.len() as f64 {
        return Err(Error::Degenerate("flow has no excitation".into()));
    }
    let gyro_energy: f64 = gyro.iter().map(|g| g * g).sum();
    if gyro_energy <= 0.0 {
        return Err(Error::Degenerate("gyro has no excitation".into()));
    }
    Ok(sxy / sxx)
}

/// One row of a flow trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSample {
    pub t: f64,
    pub estimate: FlowEstimate,
}

pub fn write_flow_csv<W: Write>(samples: &[FlowSample], mut out: W) -> Result<()> {
    writeln!(out, "t,vx_px,vy_px,omega_rad_s,min_eig,valid")?;
    for s in samples {
        let e = &s.estimate;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt9(s.t),
            fmt9(e.v_px[0]),
            fmt9(e.v_px[1]),
            fmt9(e.omega),
            fmt9(e.min_eig),
            u8::from(e.valid)
        )?;
    }
    Ok(())
}
