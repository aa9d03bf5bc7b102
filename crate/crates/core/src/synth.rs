//! Synthetic corridor with injected incidents and imperfect reports.
//!
//! Segments `SEG00, SEG01, ...` form a line with traffic flowing toward
//! higher indices, so lower indices are upstream. Daily speeds follow a
//! free-flow level with morning and evening dips plus Gaussian noise. Each
//! incident lowers its host segment's speed (ramp, hold, linear recovery)
//! and sends a weaker, delayed slowdown upstream. Reports start a random
//! delay after the incident, close a fixed lag after clearance, and may be
//! dropped.

use std::io::Write;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::ingest::{format_timestamp, Direction, IncidentReport, RawStudy, RoadGraph, SegmentRaw, MINUTES_PER_SLOT};

/// Lowest speed emitted after noise, in mph.
pub const SPEED_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    /// Center as hours after midnight.
    pub center_hour: f64,
    pub width_hours: f64,
    pub depth_mph: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_segments: usize,
    pub segment_length_miles: f64,
    pub start_date: NaiveDate,
    pub n_days: usize,
    pub free_flow_mph: f64,
    /// Relative spread of per-segment free-flow speed and peak depth.
    pub segment_spread: f64,
    pub am_peak: Peak,
    pub pm_peak: Peak,
    pub noise_std_mph: f64,
    /// Expected incidents per segment-day.
    pub incident_rate: f64,
    /// Fraction of speed lost on the host segment at full impact.
    pub impact_drop: f64,
    pub onset_minutes: f64,
    pub duration_min_minutes: f64,
    pub duration_max_minutes: f64,
    pub recovery_minutes: f64,
    /// Speed at which the slowdown travels upstream, mph.
    pub backward_speed_mph: f64,
    /// Impact multiplier per upstream hop.
    pub upstream_attenuation: f64,
    /// Incidents start between these hours.
    pub incident_start_hour: f64,
    pub incident_end_hour: f64,
    pub report_delay_min_minutes: u32,
    pub report_delay_max_minutes: u32,
    pub report_drop_prob: f64,
    /// Minutes a report stays open after clearance.
    pub report_clear_lag_minutes: f64,
    /// Reports per segment-day with no incident behind them.
    pub false_report_rate: f64,
    /// Feeds are emitted only between these hours.
    pub data_start_hour: u32,
    pub data_end_hour: u32,
    pub five_min_missing_prob: f64,
    /// Probability that a slot carries one-minute samples.
    pub one_min_coverage: f64,
    pub one_min_missing_prob: f64,
    pub one_min_jitter_mph: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_segments: 10,
            segment_length_miles: 0.5,
            start_date: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
            n_days: 120,
            free_flow_mph: 65.0,
            segment_spread: 0.03,
            am_peak: Peak {
                center_hour: 8.0,
                width_hours: 1.0,
                depth_mph: 12.0,
            },
            pm_peak: Peak {
                center_hour: 17.5,
                width_hours: 1.25,
                depth_mph: 15.0,
            },
            noise_std_mph: 2.0,
            incident_rate: 0.05,
            impact_drop: 0.4,
            onset_minutes: 5.0,
            duration_min_minutes: 30.0,
            duration_max_minutes: 90.0,
            recovery_minutes: 20.0,
            backward_speed_mph: 10.0,
            upstream_attenuation: 0.3,
            incident_start_hour: 6.0,
            incident_end_hour: 19.5,
            report_delay_min_minutes: 5,
            report_delay_max_minutes: 20,
            report_drop_prob: 0.3,
            report_clear_lag_minutes: 20.0,
            false_report_rate: 0.0,
            data_start_hour: 5,
            data_end_hour: 22,
            five_min_missing_prob: 0.02,
            one_min_coverage: 0.1,
            one_min_missing_prob: 0.2,
            one_min_jitter_mph: 1.5,
            seed: 7,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        for (name, p) in [
            ("impact_drop", self.impact_drop),
            ("report_drop_prob", self.report_drop_prob),
            ("five_min_missing_prob", self.five_min_missing_prob),
            ("one_min_coverage", self.one_min_coverage),
            ("one_min_missing_prob", self.one_min_missing_prob),
            ("upstream_attenuation", self.upstream_attenuation),
            ("segment_spread", self.segment_spread),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name}={p} must lie in [0, 1]"));
            }
        }
        if self.n_segments < 2 || self.n_days == 0 {
            return bad("need at least two segments and one day".into());
        }
        if !(self.backward_speed_mph > 0.0) || !(self.segment_length_miles > 0.0) {
            return bad("propagation speed and segment length must be positive".into());
        }
        if !(self.incident_rate >= 0.0) || !(self.false_report_rate >= 0.0) || !(self.noise_std_mph >= 0.0) {
            return bad("rates and noise must be nonnegative".into());
        }
        if self.report_delay_min_minutes > self.report_delay_max_minutes {
            return bad("report delay minimum exceeds maximum".into());
        }
        if !(self.duration_min_minutes > 0.0 && self.duration_min_minutes <= self.duration_max_minutes) {
            return bad("incident durations must be positive and ordered".into());
        }
        if self.onset_minutes < 0.0 || self.recovery_minutes < 0.0 || !(self.report_clear_lag_minutes >= 0.0) {
            return bad("onset and recovery must be nonnegative".into());
        }
        if !(self.incident_start_hour < self.incident_end_hour && self.incident_end_hour <= 24.0) {
            return bad("incident start window is empty".into());
        }
        if self.data_start_hour >= self.data_end_hour || self.data_end_hour > 24 {
            return bad("data hours are empty".into());
        }
        let worst = self.free_flow_mph * (1.0 - self.segment_spread)
            - (1.0 + self.segment_spread) * (self.am_peak.depth_mph + self.pm_peak.depth_mph);
        let worst = worst * (1.0 - self.impact_drop);
        if !(worst > 0.0) {
            return bad(format!("lowest noise-free speed {worst:.2} mph is not positive"));
        }
        Ok(())
    }

    pub fn segment_id(i: usize) -> String {
        format!("SEG{i:02}")
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.start_date, self.n_days)
    }

    /// Upstream impact delay for `hops` segments, in minutes.
    fn upstream_delay(&self, hops: usize) -> f64 {
        hops as f64 * self.segment_length_miles / self.backward_speed_mph * 60.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueIncident {
    pub segment_id: String,
    pub start: NaiveDateTime,
    /// Clearance time; recovery follows.
    pub end: NaiveDateTime,
    pub report_start: Option<NaiveDateTime>,
}

impl TrueIncident {
    pub fn reported(&self) -> bool {
        self.report_start.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub incidents: Vec<TrueIncident>,
    pub reports: Vec<IncidentReport>,
    /// Reports not caused by any incident.
    pub false_reports: Vec<IncidentReport>,
}

impl GroundTruth {
    pub fn unreported(&self) -> impl Iterator<Item = &TrueIncident> {
        self.incidents.iter().filter(|i| !i.reported())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub raw: RawStudy,
    pub truth: GroundTruth,
}

/// Impact fraction in `[0, 1]` at `t` minutes after onset.
fn impact_profile(t: f64, onset: f64, duration: f64, recovery: f64) -> f64 {
    if t < 0.0 {
        0.0
    } else if t < onset {
        t / onset
    } else if t < duration {
        1.0
    } else if t < duration + recovery {
        1.0 - (t - duration) / recovery
    } else {
        0.0
    }
}

fn gaussian_dip(hour: f64, peak: &Peak) -> f64 {
    let z = (hour - peak.center_hour) / peak.width_hours;
    peak.depth_mph * (-0.5 * z * z).exp()
}

struct Placed {
    segment: usize,
    day: usize,
    /// Onset, minutes after midnight.
    start_min: f64,
    duration: f64,
}

fn quantize(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Generates raw feeds and ground truth from a seed-deterministic scenario.
pub fn generate(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let grid = config.grid();
    let n = config.n_segments;
    let ids: Vec<String> = (0..n).map(ScenarioConfig::segment_id).collect();

    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dir = if j < i { Direction::Up } else { Direction::Down };
                let miles = i.abs_diff(j) as f64 * config.segment_length_miles;
                edges.push((ids[i].clone(), ids[j].clone(), dir, miles));
            }
        }
    }
    let graph = RoadGraph::from_edges(edges)?;

    let spread = config.segment_spread;
    let free_flow: Vec<f64> = (0..n)
        .map(|_| config.free_flow_mph * (1.0 + rng.random_range(-spread..=spread)))
        .collect();
    let peak_scale: Vec<f64> = (0..n).map(|_| 1.0 + rng.random_range(-spread..=spread)).collect();

    // Incidents and their reports.
    let per_day = Poisson::new(config.incident_rate.max(1e-12)).map_err(|e| Error::InvalidScenario(e.to_string()))?;
    let false_per_day = Poisson::new(config.false_report_rate.max(1e-12)).map_err(|e| Error::InvalidScenario(e.to_string()))?;
    let mut placed = Vec::new();
    let mut truth = GroundTruth {
        incidents: Vec::new(),
        reports: Vec::new(),
        false_reports: Vec::new(),
    };
    let window = (config.incident_start_hour * 60.0, config.incident_end_hour * 60.0);
    let at = |day: usize, minute: f64| {
        NaiveDateTime::new(grid.date(day), chrono::NaiveTime::MIN) + Duration::minutes(minute.round() as i64)
    };
    for day in 0..config.n_days {
        for seg in 0..n {
            let count = if config.incident_rate > 0.0 { per_day.sample(&mut rng) as usize } else { 0 };
            for _ in 0..count {
                let start_min = rng.random_range(window.0..window.1).round();
                let duration = rng.random_range(config.duration_min_minutes..=config.duration_max_minutes).round();
                let dropped = rng.random_bool(config.report_drop_prob);
                let delay = rng.random_range(config.report_delay_min_minutes..=config.report_delay_max_minutes);
                let start = at(day, start_min);
                let end = at(day, start_min + duration);
                let report_start = (!dropped).then(|| start + Duration::minutes(delay as i64));
                if let Some(rs) = report_start {
                    truth.reports.push(IncidentReport {
                        segment_id: ids[seg].clone(),
                        start: rs,
                        end: (end + Duration::minutes(config.report_clear_lag_minutes.round() as i64))
                            .max(rs + Duration::minutes(MINUTES_PER_SLOT as i64)),
                        kind: "incident".into(),
                    });
                }
                truth.incidents.push(TrueIncident {
                    segment_id: ids[seg].clone(),
                    start,
                    end,
                    report_start,
                });
                placed.push(Placed {
                    segment: seg,
                    day,
                    start_min,
                    duration,
                });
            }
            let fakes = if config.false_report_rate > 0.0 { false_per_day.sample(&mut rng) as usize } else { 0 };
            for _ in 0..fakes {
                let start_min = rng.random_range(window.0..window.1).round();
                truth.false_reports.push(IncidentReport {
                    segment_id: ids[seg].clone(),
                    start: at(day, start_min),
                    end: at(day, start_min + 30.0),
                    kind: "incident".into(),
                });
            }
        }
    }
    let mut reports: Vec<IncidentReport> = truth.reports.iter().chain(&truth.false_reports).cloned().collect();
    reports.sort_by(|a, b| (a.start, &a.segment_id).cmp(&(b.start, &b.segment_id)));

    // Impact fraction per segment and slot, worst incident wins.
    let slots = grid.n_slots();
    let step = grid.step_minutes as f64;
    let mut impact = vec![vec![0.0f64; slots]; n];
    let reach = config.duration_max_minutes + config.recovery_minutes;
    for inc in &placed {
        let mut hop = 0;
        loop {
            let weight = config.upstream_attenuation.powi(hop as i32);
            if hop > inc.segment || weight < 0.05 {
                break;
            }
            let seg = inc.segment - hop;
            let onset = inc.start_min + config.upstream_delay(hop);
            let first = ((onset / step).floor() as usize).min(grid.slots_per_day);
            let last = (((onset + reach) / step).ceil() as usize + 1).min(grid.slots_per_day);
            for q in first..last {
                let mid = q as f64 * step + step / 2.0;
                let f = weight * impact_profile(mid - onset, config.onset_minutes, inc.duration, config.recovery_minutes);
                let cell = &mut impact[seg][grid.global(inc.day, q)];
                *cell = cell.max(f);
            }
            hop += 1;
        }
    }

    let noise = Normal::new(0.0, config.noise_std_mph).map_err(|e| Error::InvalidScenario(e.to_string()))?;
    let jitter = Normal::new(0.0, config.one_min_jitter_mph).map_err(|e| Error::InvalidScenario(e.to_string()))?;
    let data_slots = (config.data_start_hour as usize * 60 / grid.step_minutes as usize)
        ..(config.data_end_hour as usize * 60 / grid.step_minutes as usize);
    let mut segments = Vec::with_capacity(n);
    for seg in 0..n {
        let mut raw = SegmentRaw::empty(&ids[seg], &grid);
        for g in 0..slots {
            let (_, q) = grid.day_slot(g);
            if !data_slots.contains(&q) {
                continue;
            }
            let hour = (q as f64 * step + step / 2.0) / 60.0;
            let recurrent = free_flow[seg]
                - peak_scale[seg] * (gaussian_dip(hour, &config.am_peak) + gaussian_dip(hour, &config.pm_peak));
            let clean = recurrent * (1.0 - config.impact_drop * impact[seg][g]);
            let v = (clean + noise.sample(&mut rng)).max(SPEED_FLOOR);
            let ratio = v / free_flow[seg];
            raw.density[g] = Some(if ratio > 0.85 { "A" } else if ratio > 0.6 { "B" } else { "C" }.to_string());
            if !rng.random_bool(config.five_min_missing_prob) {
                raw.five_min[g] = Some(quantize(v));
            }
            if rng.random_bool(config.one_min_coverage) {
                for m in 0..MINUTES_PER_SLOT {
                    let k = g * MINUTES_PER_SLOT + m;
                    let all = (v + jitter.sample(&mut rng)).max(SPEED_FLOOR);
                    let car = (all * 1.03 + jitter.sample(&mut rng) / 2.0).max(SPEED_FLOOR);
                    let truck = (all * 0.9 + jitter.sample(&mut rng) / 2.0).max(SPEED_FLOOR);
                    for (series, value) in [
                        (&mut raw.one_min_all, all),
                        (&mut raw.one_min_car, car),
                        (&mut raw.one_min_truck, truck),
                    ] {
                        if !rng.random_bool(config.one_min_missing_prob) {
                            series[k] = Some(quantize(value));
                        }
                    }
                }
            }
        }
        segments.push(raw);
    }

    let weather = weather_walk(&grid, &mut rng);
    Ok(Scenario {
        config: config.clone(),
        raw: RawStudy {
            grid,
            graph,
            segments,
            reports,
            weather,
        },
        truth,
    })
}

/// Hourly bounded random walks for the weather channels.
/// Hourly weather as mean-reverting walks, so every stretch of days spans
/// the same range: temperature around a diurnal cycle, humidity and wind
/// around fixed levels, occasional rain that turns to snow below freezing.
fn weather_walk<R: Rng>(grid: &TimeGrid, rng: &mut R) -> Vec<(NaiveDateTime, [f64; 7])> {
    const REVERT: f64 = 0.05;
    let hours = grid.n_days * 24;
    let (mut temp_dev, mut humidity, mut wind, mut wind_dir) = (0.0f64, 65.0f64, 8.0f64, 180.0f64);
    let (mut snow_depth, mut rain_left) = (0.0f64, 0u32);
    let mut out = Vec::with_capacity(hours);
    for h in 0..hours {
        let step = |rng: &mut R, s: f64| rng.random_range(-s..=s);
        temp_dev = temp_dev * (1.0 - REVERT) + step(rng, 1.0);
        let diurnal = 6.0 * (2.0 * std::f64::consts::PI * ((h % 24) as f64 - 9.0) / 24.0).sin();
        let temp = (12.0 + diurnal + temp_dev).clamp(-10.0, 35.0);
        humidity = (65.0 + (humidity - 65.0) * (1.0 - REVERT) + step(rng, 4.0)).clamp(15.0, 100.0);
        wind = (8.0 + (wind - 8.0) * (1.0 - REVERT) + step(rng, 2.0)).clamp(0.0, 40.0);
        wind_dir = (wind_dir + step(rng, 20.0)).rem_euclid(360.0);
        if rain_left == 0 && rng.random_bool(0.02) {
            rain_left = rng.random_range(2..8);
        }
        let precip = if rain_left > 0 {
            rain_left -= 1;
            quantize(rng.random_range(0.01..0.3))
        } else {
            0.0
        };
        let freezing = temp < 0.0;
        let snowfall = if freezing { precip * 10.0 } else { 0.0 };
        snow_depth = (snow_depth + snowfall - if freezing { 0.0 } else { 0.5 }).max(0.0);
        let row = [temp, humidity, precip, snowfall, snow_depth, wind, wind_dir].map(quantize);
        out.push((grid.start + Duration::hours(h as i64), row));
    }
    out
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let mut out = String::from("segment_id,true_start,true_end,reported,report_start\n");
    for i in &truth.incidents {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            i.segment_id,
            format_timestamp(i.start),
            format_timestamp(i.end),
            u8::from(i.reported()),
            i.report_start.map(format_timestamp).unwrap_or_default()
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
