//! Operation-count, cycle and power model of the onboard flow computation.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::flow::FlowMode;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskCost {
    pub name: String,
    pub occurrences_per_update: u64,
    pub single_cycle_ops: u64,
    pub int_div_ops: u64,
    pub float_div_ops: u64,
}

impl TaskCost {
    pub fn new(name: &str, occurrences: u64, ops: u64, int_div: u64, float_div: u64) -> Self {
        Self {
            name: name.to_string(),
            occurrences_per_update: occurrences,
            single_cycle_ops: ops,
            int_div_ops: int_div,
            float_div_ops: float_div,
        }
    }

    pub fn cycles(&self, model: &PowerModel) -> u64 {
        self.single_cycle_ops
            + model.cycles_per_int_div * self.int_div_ops
            + model.cycles_per_float_div * self.float_div_ops
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerModel {
    pub cycles_per_int_div: u64,
    pub cycles_per_float_div: u64,
    /// Supply current per clock rate (uA/MHz).
    pub efficiency: f64,
    pub voltage: f64,
    pub update_rate: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        Self {
            cycles_per_int_div: 12,
            cycles_per_float_div: 14,
            efficiency: 52.0,
            voltage: 4.2,
            update_rate: 100.0,
        }
    }
}

impl PowerModel {
    pub fn validate(&self) -> Result<()> {
        if self.cycles_per_int_div == 0 || self.cycles_per_float_div == 0 {
            return Err(Error::InvalidParameter("division cycle counts must be > 0".into()));
        }
        for (v, name) in [
            (self.efficiency, "efficiency"),
            (self.voltage, "voltage"),
            (self.update_rate, "update_rate"),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0")));
            }
        }
        Ok(())
    }

    /// Clock rate needed for `cycles` per update (MHz).
    pub fn mhz(&self, cycles: u64) -> f64 {
        cycles as f64 * self.update_rate / 1e6
    }
}

/// Multiplications of one Lucas-Kanade solve: `4n` for `J^T J` and `2n` for
/// `J^T b` over the `n` interior pixels, plus 2 for the final product and 7 for
/// the 2x2 inverse when `include_minor` is set.
///
/// Dense mode counts a single solve over the `W x H` frame; patch mode counts
/// twelve `10 x 10` patches.
pub fn lk_mult_count(width: u64, height: u64, mode: FlowMode, include_minor: bool) -> Result<u64> {
    match mode {
        FlowMode::Dense => solve_mults(width, height, include_minor),
        FlowMode::Patches => Ok(12 * solve_mults(10, 10, include_minor)?),
    }
}

/// Multiplications of `count` solves over `size x size` patches.
pub fn patch_mult_count(size: u64, count: u64, include_minor: bool) -> Result<u64> {
    Ok(count * solve_mults(size, size, include_minor)?)
}

fn solve_mults(width: u64, height: u64, include_minor: bool) -> Result<u64> {
    if width < 3 || height < 3 {
        return Err(Error::InvalidParameter("width and height must be >= 3".into()));
    }
    let n = (width - 2) * (height - 2);
    Ok(4 * n + 2 * n + if include_minor { 2 + 7 } else { 0 })
}

/// `sum occurrences * (ops + c_idiv * idiv + c_fdiv * fdiv)`.
pub fn cycles_per_update(tasks: &[TaskCost], model: &PowerModel) -> Result<u64> {
    if tasks.is_empty() {
        return Err(Error::InvalidParameter("task list is empty".into()));
    }
    Ok(tasks
        .iter()
        .map(|t| t.occurrences_per_update * t.cycles(model))
        .sum())
}

/// Power draw (mW) at `model.update_rate`.
pub fn estimate_power(cycles_per_update: u64, model: &PowerModel) -> f64 {
    model.mhz(cycles_per_update) * model.efficiency * model.voltage / 1000.0
}

/// Measured per-task costs of the flight firmware's flow pipeline.
pub fn firmware_tasks() -> Vec<TaskCost> {
    vec![
        TaskCost::new("skip frame", 1, 8493, 0, 8),
        TaskCost::new("LK optic flow", 12, 18434, 128, 2),
        TaskCost::new("copy", 1, 1200, 0, 0),
    ]
}

/// Text table with per-task and total cycle, rate and power figures.
pub fn format_table(tasks: &[TaskCost], model: &PowerModel) -> Result<String> {
    model.validate()?;
    let total = cycles_per_update(tasks, model)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>6} {:>10} {:>8} {:>8} {:>12}",
        "task", "count", "1-cycle", "int div", "flt div", "cycles/upd"
    );
    for t in tasks {
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>10} {:>8} {:>8} {:>12}",
            t.name,
            t.occurrences_per_update,
            t.single_cycle_ops,
            t.int_div_ops,
            t.float_div_ops,
            t.occurrences_per_update * t.cycles(model)
        );
    }
    let _ = writeln!(out, "total cycles/update: {total}");
    let _ = writeln!(out, "total cycles/s (MHz): {:.2}", model.mhz(total));
    let _ = writeln!(out, "power (mW): {:.2}", estimate_power(total, model));
    Ok(out)
}
