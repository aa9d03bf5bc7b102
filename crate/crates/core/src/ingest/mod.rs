//! Raw feed loading and imputation onto the uniform 5-minute grid.
//!
//! Speeds are carried as `Option<f64>` until imputed: `None` is a missing
//! observation, never zero speed.

mod csv_io;
mod graph;

pub use csv_io::{
    format_timestamp, load_study, parse_timestamp, read_graph, read_incidents, read_weather, write_incidents,
    IngestConfig, IngestedStudy, InputPaths, RawStudy, SegmentRaw,
};
pub use graph::{Direction, Neighbor, RoadGraph};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinMatrix, TimeGrid};
use crate::stats::{harmonic_mean, percentile};

pub type RawSeries = Vec<Option<f64>>;

/// One-minute samples per five-minute slot.
pub const MINUTES_PER_SLOT: usize = 5;

pub const WEATHER_CHANNELS: [&str; 7] = [
    "temp",
    "humidity",
    "precip",
    "snowfall",
    "snow_depth",
    "wind_speed",
    "wind_dir",
];

/// Complete per-segment series after imputation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSeries {
    pub segment_id: String,
    pub v_all: Vec<f64>,
    pub v_car: Vec<f64>,
    pub v_truck: Vec<f64>,
    pub density: Vec<f64>,
    /// Free-flow (85th percentile) speed of the observed training span.
    pub p85: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncidentReport {
    pub segment_id: String,
    pub start: NaiveDateTime,
    pub end: NaiveDateTime,
    pub kind: String,
}

impl IncidentReport {
    /// Slot interval `[first, last)` after rounding start down and end up.
    pub fn slot_span(&self, grid: &TimeGrid) -> (i64, i64) {
        (grid.floor_slot(self.start), grid.ceil_slot(self.end))
    }
}

/// Per-slot weather channels in [`WEATHER_CHANNELS`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherSeries {
    pub slots: Vec<[f64; 7]>,
}

fn check_speeds(values: &[Option<f64>]) -> Result<()> {
    for (slot, v) in values.iter().enumerate() {
        if let Some(v) = *v {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::NonPositiveSpeed { slot, value: v });
            }
        }
    }
    Ok(())
}

/// Space-mean aggregation of one-minute speeds into five-minute slots.
///
/// Slot `t` covers minutes `5t .. 5t+5`; a slot whose minutes are all missing
/// stays missing.
pub fn aggregate_one_min(one_min: &[Option<f64>], n_slots: usize) -> Result<RawSeries> {
    if one_min.len() != n_slots * MINUTES_PER_SLOT {
        return Err(Error::LengthMismatch {
            what: "one-minute series",
            expected: n_slots * MINUTES_PER_SLOT,
            actual: one_min.len(),
        });
    }
    check_speeds(one_min)?;
    Ok(one_min
        .chunks_exact(MINUTES_PER_SLOT)
        .map(|chunk| {
            let present: Vec<f64> = chunk.iter().flatten().copied().collect();
            harmonic_mean(&present)
        })
        .collect())
}

/// Fills missing five-minute all-vehicle speeds.
///
/// Gaps take the space-mean of the slot's one-minute observations, or the
/// free-flow speed `p85` when none exist.
pub fn impute_all_vehicle(five_min: &[Option<f64>], one_min: &[Option<f64>], p85: f64) -> Result<Vec<f64>> {
    if five_min.is_empty() {
        return Err(Error::EmptySeries("five-minute all-vehicle speeds"));
    }
    if !(p85 > 0.0) {
        return Err(Error::InvalidParameter(format!("free-flow speed must be positive, got {p85}")));
    }
    check_speeds(five_min)?;
    let from_one_min = aggregate_one_min(one_min, five_min.len())?;
    Ok(five_min
        .iter()
        .zip(from_one_min)
        .map(|(v5, v1)| v5.or(v1).unwrap_or(p85))
        .collect())
}

/// Aggregates a vehicle-class series to five minutes and fills its gaps by
/// the mean class/all-vehicle ratio.
///
/// The ratio uses slots where both the class aggregate and the raw
/// all-vehicle observation exist; if there are none it falls back to the
/// completed all-vehicle series, and to 1 when the class is never observed.
pub fn impute_class_speeds(
    class_1min: &[Option<f64>],
    all_complete: &[f64],
    all_observed: &[Option<f64>],
) -> Result<Vec<f64>> {
    let n = all_complete.len();
    if n == 0 {
        return Err(Error::EmptySeries("all-vehicle speeds"));
    }
    if all_observed.len() != n {
        return Err(Error::LengthMismatch {
            what: "observed all-vehicle series",
            expected: n,
            actual: all_observed.len(),
        });
    }
    check_speeds(&all_complete.iter().map(|&v| Some(v)).collect::<Vec<_>>())?;
    let class = aggregate_one_min(class_1min, n)?;

    let paired: Vec<f64> = class
        .iter()
        .zip(all_observed)
        .filter_map(|(c, a)| Some(c.as_ref()? / a.as_ref()?))
        .collect();
    let ratios = if paired.is_empty() {
        class
            .iter()
            .zip(all_complete)
            .filter_map(|(c, a)| Some(c.as_ref()? / a))
            .collect()
    } else {
        paired
    };
    let r = if ratios.is_empty() {
        1.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    Ok(class
        .iter()
        .zip(all_complete)
        .map(|(c, a)| c.unwrap_or(r * a))
        .collect())
}

/// Maps probe density codes to `A=1, B=2/3, C=1/3, missing=0`.
pub fn normalize_density<S: AsRef<str>>(codes: &[Option<S>]) -> Result<Vec<f64>> {
    codes
        .iter()
        .enumerate()
        .map(|(slot, code)| match code.as_ref().map(|c| c.as_ref().trim()) {
            None | Some("") => Ok(0.0),
            Some("A") => Ok(1.0),
            Some("B") => Ok(2.0 / 3.0),
            Some("C") => Ok(1.0 / 3.0),
            Some(other) => Err(Error::UnknownDensityCode {
                slot,
                code: other.to_string(),
            }),
        })
        .collect()
}

/// Free-flow speed: linear-interpolation 85th percentile of observed values.
pub fn free_flow_speed(observed: &[Option<f64>]) -> Result<f64> {
    let values: Vec<f64> = observed.iter().flatten().copied().collect();
    percentile(&values, 85.0).ok_or(Error::EmptySeries("observed speeds for free-flow estimate"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rasterized {
    /// `n_days x slots_per_day` report indicator.
    pub inc: BinMatrix,
    pub warnings: Vec<String>,
}

/// Rasterizes one segment's reports to the binary INC matrix.
///
/// Coverage is inclusive: start rounds down and end rounds up to the grid.
/// Overlapping reports union. Reports reaching outside the grid are clipped
/// and noted in `warnings`.
pub fn rasterize_reports(reports: &[IncidentReport], grid: &TimeGrid, segment: &str) -> Rasterized {
    let mut flat = vec![false; grid.n_slots()];
    let mut warnings = Vec::new();
    let n = grid.n_slots() as i64;
    for r in reports.iter().filter(|r| r.segment_id == segment) {
        let (lo, hi) = r.slot_span(grid);
        let (clo, chi) = (lo.clamp(0, n), hi.clamp(0, n));
        if (clo, chi) != (lo, hi) {
            warnings.push(format!(
                "report on {} {}..{} clipped to the grid",
                r.segment_id,
                format_timestamp(r.start),
                format_timestamp(r.end)
            ));
        }
        for cell in &mut flat[clo as usize..chi.max(clo) as usize] {
            *cell = true;
        }
    }
    let inc = BinMatrix::from_vec(grid.n_days, grid.slots_per_day, flat).expect("grid-sized buffer");
    Rasterized { inc, warnings }
}

/// Spreads timestamped weather observations onto the grid by forward fill.
///
/// Slots before the first observation take the first observation. Wind
/// direction is wrapped into `[0, 360)`.
pub fn forward_fill_weather(grid: &TimeGrid, observations: &[(NaiveDateTime, [f64; 7])]) -> Result<WeatherSeries> {
    if observations.is_empty() {
        return Err(Error::EmptySeries("weather observations"));
    }
    let mut obs = observations.to_vec();
    obs.sort_by_key(|(t, _)| *t);
    let mut slots = Vec::with_capacity(grid.n_slots());
    let mut idx = 0;
    let mut current = obs[0].1;
    for s in 0..grid.n_slots() {
        let t = grid.timestamp(s);
        while idx < obs.len() && obs[idx].0 <= t {
            current = obs[idx].1;
            idx += 1;
        }
        let mut row = current;
        row[6] = row[6].rem_euclid(360.0);
        slots.push(row);
    }
    Ok(WeatherSeries { slots })
}
