//! Flight log streams, their CSV files and the binary sensor packet.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, SecondsFormat, TimeZone, Utc};

use crate::error::{Error, Result};
use crate::fmt9;
use crate::model::StateVec;
use crate::sensors::SensorRecord;

/// Motion-capture pose sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthRecord {
    pub t: f64,
    pub x: f64,
    pub z: f64,
    pub theta: f64,
}

/// State estimate from an external reference system.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimateRecord {
    pub t: f64,
    pub state: StateVec,
}

/// Independently clocked streams of one flight. `t` fields are seconds after
/// `epoch`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlightLog {
    pub epoch: DateTime<Utc>,
    pub sensors: Vec<SensorRecord>,
    pub truth: Vec<TruthRecord>,
    pub reference: Option<Vec<EstimateRecord>>,
}

pub const SENSOR_FILE: &str = "sensors.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const REFERENCE_FILE: &str = "reference.csv";

/// Fixed epoch used by simulated logs.
pub fn simulation_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

fn check_monotone(ts: impl Iterator<Item = f64>, stream: &str) -> Result<()> {
    let mut last = f64::NEG_INFINITY;
    for (i, t) in ts.enumerate() {
        if !t.is_finite() || t <= last {
            return Err(Error::Format(format!(
                "{stream} stream not strictly increasing at row {}",
                i + 1
            )));
        }
        last = t;
    }
    Ok(())
}

fn utc_of(epoch: DateTime<Utc>, t: f64) -> String {
    let micros = (t * 1e6).round() as i64;
    (epoch + Duration::microseconds(micros)).to_rfc3339_opts(SecondsFormat::Micros, true)
}

fn seconds_since(epoch: DateTime<Utc>, utc: &str, row: usize) -> Result<f64> {
    let stamp = DateTime::parse_from_rfc3339(utc)
        .map_err(|e| Error::Format(format!("row {row}: bad UTC timestamp {utc:?}: {e}")))?;
    let delta = stamp.with_timezone(&Utc) - epoch;
    Ok(delta.num_microseconds().unwrap_or(i64::MAX) as f64 * 1e-6)
}

fn parse_f64(field: Option<&str>, row: usize, name: &str) -> Result<f64> {
    let s = field.ok_or_else(|| Error::Format(format!("row {row}: missing {name}")))?;
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    s.parse()
        .map_err(|e| Error::Format(format!("row {row}: bad {name} {s:?}: {e}")))
}

fn read_rows(
    path: &Path,
    header: &[&str],
) -> Result<Vec<csv::StringRecord>> {
    let mut reader = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let found: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Format(format!(
            "{}: expected header {}, found {}",
            path.display(),
            header.join(","),
            found.join(",")
        )));
    }
    Ok(reader.records().collect::<std::result::Result<_, _>>()?)
}

const SENSOR_HEADER: [&str; 8] = ["utc", "t", "gyro_x", "gyro_y", "gyro_z", "z_m", "flow_x", "flow_y"];
const TRUTH_HEADER: [&str; 5] = ["utc", "t", "x", "z", "theta"];
const REFERENCE_HEADER: [&str; 5] = ["utc", "t", "theta", "vx", "z"];

impl FlightLog {
    pub fn validate(&self) -> Result<()> {
        check_monotone(self.sensors.iter().map(|r| r.t), "sensor")?;
        check_monotone(self.truth.iter().map(|r| r.t), "truth")?;
        if let Some(reference) = &self.reference {
            check_monotone(reference.iter().map(|r| r.t), "reference")?;
        }
        Ok(())
    }

    /// Writes one CSV per stream into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut out = BufWriter::new(File::create(dir.join(SENSOR_FILE))?);
        writeln!(out, "{}", SENSOR_HEADER.join(","))?;
        for r in &self.sensors {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                utc_of(self.epoch, r.t),
                fmt9(r.t),
                fmt9(r.gyro[0]),
                fmt9(r.gyro[1]),
                fmt9(r.gyro[2]),
                fmt9(r.z_m),
                fmt9(r.flow[0]),
                fmt9(r.flow[1])
            )?;
        }
        out.flush()?;

        let mut out = BufWriter::new(File::create(dir.join(TRUTH_FILE))?);
        writeln!(out, "{}", TRUTH_HEADER.join(","))?;
        for r in &self.truth {
            writeln!(
                out,
                "{},{},{},{},{}",
                utc_of(self.epoch, r.t),
                fmt9(r.t),
                fmt9(r.x),
                fmt9(r.z),
                fmt9(r.theta)
            )?;
        }
        out.flush()?;

        if let Some(reference) = &self.reference {
            let mut out = BufWriter::new(File::create(dir.join(REFERENCE_FILE))?);
            writeln!(out, "{}", REFERENCE_HEADER.join(","))?;
            for r in reference {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    utc_of(self.epoch, r.t),
                    fmt9(r.t),
                    fmt9(r.state.theta),
                    fmt9(r.state.v_x),
                    fmt9(r.state.z)
                )?;
            }
            out.flush()?;
        }
        Ok(())
    }

    /// Reads a log directory. Streams are synchronized through their UTC
    /// columns, relative to the first sensor timestamp.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let sensor_rows = read_rows(&dir.join(SENSOR_FILE), &SENSOR_HEADER)?;
        let first = sensor_rows
            .first()
            .ok_or_else(|| Error::InsufficientData("sensor stream is empty".into()))?;
        let epoch = DateTime::parse_from_rfc3339(&first[0])
            .map_err(|e| Error::Format(format!("bad UTC timestamp {:?}: {e}", &first[0])))?
            .with_timezone(&Utc);

        let mut sensors = Vec::with_capacity(sensor_rows.len());
        for (i, row) in sensor_rows.iter().enumerate() {
            let n = i + 2;
            let f = |k: usize, name: &str| parse_f64(row.get(k), n, name);
            sensors.push(SensorRecord {
                t: seconds_since(epoch, &row[0], n)?,
                gyro: [f(2, "gyro_x")?, f(3, "gyro_y")?, f(4, "gyro_z")?],
                z_m: f(5, "z_m")?,
                flow: [f(6, "flow_x")?, f(7, "flow_y")?],
                frame: None,
            });
        }

        let mut truth = Vec::new();
        for (i, row) in read_rows(&dir.join(TRUTH_FILE), &TRUTH_HEADER)?.iter().enumerate() {
            let n = i + 2;
            let f = |k: usize, name: &str| parse_f64(row.get(k), n, name);
            truth.push(TruthRecord {
                t: seconds_since(epoch, &row[0], n)?,
                x: f(2, "x")?,
                z: f(3, "z")?,
                theta: f(4, "theta")?,
            });
        }

        let ref_path = dir.join(REFERENCE_FILE);
        let reference = if ref_path.exists() {
            let mut out = Vec::new();
            for (i, row) in read_rows(&ref_path, &REFERENCE_HEADER)?.iter().enumerate() {
                let n = i + 2;
                let f = |k: usize, name: &str| parse_f64(row.get(k), n, name);
                out.push(EstimateRecord {
                    t: seconds_since(epoch, &row[0], n)?,
                    state: StateVec::new(f(2, "theta")?, f(3, "vx")?, f(4, "z")?),
                });
            }
            Some(out)
        } else {
            None
        };
        let log = Self {
            epoch,
            sensors,
            truth,
            reference,
        };
        log.validate()?;
        Ok(log)
    }
}

/// Wire format of one 100 Hz sensor record: little-endian `u64` microsecond
/// timestamp, three `f32` gyro rates, one `f32` pressure altitude and two
/// `f32` flow components (32 bytes).
#[derive(Clone, Copy, Debug)]
pub struct SensorPacket {
    pub t_us: u64,
    pub gyro: [f32; 3],
    pub pressure_alt: f32,
    pub flow: [f32; 2],
}

impl PartialEq for SensorPacket {
    /// Bitwise comparison, so NaN payloads compare equal to themselves.
    fn eq(&self, other: &Self) -> bool {
        self.t_us == other.t_us
            && self.gyro.map(f32::to_bits) == other.gyro.map(f32::to_bits)
            && self.pressure_alt.to_bits() == other.pressure_alt.to_bits()
            && self.flow.map(f32::to_bits) == other.flow.map(f32::to_bits)
    }
}

impl SensorPacket {
    pub const SIZE: usize = 32;

    pub fn from_record(r: &SensorRecord) -> Result<Self> {
        if !(r.t.is_finite() && r.t >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "packet timestamp must be >= 0, got {}",
                r.t
            )));
        }
        Ok(Self {
            t_us: (r.t * 1e6).round() as u64,
            gyro: r.gyro.map(|v| v as f32),
            pressure_alt: r.z_m as f32,
            flow: r.flow.map(|v| v as f32),
        })
    }

    pub fn to_record(&self) -> SensorRecord {
        SensorRecord {
            t: self.t_us as f64 * 1e-6,
            gyro: self.gyro.map(f64::from),
            z_m: f64::from(self.pressure_alt),
            flow: self.flow.map(f64::from),
            frame: None,
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.t_us.to_le_bytes());
        for v in self.gyro {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.pressure_alt.to_le_bytes());
        for v in self.flow {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::SIZE {
            return Err(Error::Format(format!(
                "packet must be {} bytes, got {}",
                Self::SIZE,
                bytes.len()
            )));
        }
        let f = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        Ok(Self {
            t_us: u64::from_le_bytes(bytes[0..8].try_into().unwrap()),
            gyro: [f(8), f(12), f(16)],
            pressure_alt: f(20),
            flow: [f(24), f(28)],
        })
    }
}

pub fn encode_packets(packets: &[SensorPacket]) -> Vec<u8> {
    let mut out = Vec::with_capacity(packets.len() * SensorPacket::SIZE);
    for p in packets {
        p.encode(&mut out);
    }
    out
}

pub fn decode_packets(bytes: &[u8]) -> Result<Vec<SensorPacket>> {
    if bytes.len() % SensorPacket::SIZE != 0 {
        return Err(Error::Format(format!(
            "stream length {} is not a multiple of {}",
            bytes.len(),
            SensorPacket::SIZE
        )));
    }
    bytes.chunks_exact(SensorPacket::SIZE).map(SensorPacket::decode).collect()
}
