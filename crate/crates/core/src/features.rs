//! Engineered speed features and per-target sub-graph feature frames.
//!
//! Per segment we derive seven channels on the grid: all-vehicle, car and
//! truck speed, probe density, slowdown speed (SD), travel time index (TTI)
//! and seasonal recurrent speed (SRS). A [`FeatureFrame`] lays these out for
//! the target and its nearest upstream/downstream neighbors, followed by the
//! eight cyclic time encodings and seven weather channels, z-scored with
//! statistics from training slots only.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::Datelike;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{StudyWindow, TimeGrid};
use crate::ingest::{format_timestamp, IngestedStudy, RoadGraph, WeatherSeries, WEATHER_CHANNELS};

pub const SEGMENT_CHANNELS: [&str; 7] = ["v_all", "v_car", "v_truck", "density", "sd", "tti", "srs"];
pub const TIME_CHANNELS: [&str; 8] = [
    "month_sin", "month_cos", "week_sin", "week_cos", "dow_sin", "dow_cos", "tod_sin", "tod_cos",
];
/// Weeks of same-weekday history averaged by the seasonal recurrent speed.
pub const SRS_WEEKS: usize = 3;
pub const STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_UPSTREAM_MILES: f64 = 2.0;

/// `SD(t) = max(mean_j v_j(t) - v_target(t), 0)` over the upstream set.
pub fn slowdown_speed(target: &[f64], upstream: &[&[f64]]) -> Result<Vec<f64>> {
    if upstream.is_empty() {
        return Err(Error::InvalidParameter(
            "empty upstream set for slowdown speed; widen the upstream distance or exclude the segment".into(),
        ));
    }
    for u in upstream {
        if u.len() != target.len() {
            return Err(Error::LengthMismatch {
                what: "upstream series",
                expected: target.len(),
                actual: u.len(),
            });
        }
    }
    let k = upstream.len() as f64;
    Ok(target
        .iter()
        .enumerate()
        .map(|(t, &v)| {
            let mean = upstream.iter().map(|u| u[t]).sum::<f64>() / k;
            (mean - v).max(0.0)
        })
        .collect())
}

/// `TTI(t) = max(p85 / v(t), 1)`.
pub fn travel_time_index(series: &[f64], p85: f64) -> Result<Vec<f64>> {
    series
        .iter()
        .enumerate()
        .map(|(slot, &v)| {
            if v > 0.0 {
                Ok((p85 / v).max(1.0))
            } else {
                Err(Error::NonPositiveSpeed { slot, value: v })
            }
        })
        .collect()
}

/// Mean speed at the same slot over the previous three weeks, skipping
/// weeks with a report at that slot.
///
/// Slots earlier than three weeks into the grid are `None` (unavailable).
/// When every week is excluded the free-flow speed `p85` is used.
pub fn seasonal_recurrent_speed(series: &[f64], inc: &[bool], grid: &TimeGrid, p85: f64) -> Vec<Option<f64>> {
    assert_eq!(series.len(), inc.len(), "speed and report series differ in length");
    let week = 7 * grid.slots_per_day;
    (0..series.len())
        .map(|t| {
            if t < SRS_WEEKS * week {
                return None;
            }
            let (sum, count) = (1..=SRS_WEEKS)
                .map(|j| t - j * week)
                .filter(|&s| !inc[s])
                .fold((0.0, 0usize), |(sum, n), s| (sum + series[s], n + 1));
            Some(if count == 0 { p85 } else { sum / count as f64 })
        })
        .collect()
}

fn cyclic(index: usize, period: usize) -> (f64, f64) {
    let arg = 2.0 * std::f64::consts::PI * index as f64 / period as f64;
    (arg.sin(), arg.cos())
}

/// Sine/cosine pairs for month, week of year, day of week and time of day.
pub fn encode_time(grid: &TimeGrid, slot: usize) -> [f64; 8] {
    let (day, tod) = grid.day_slot(slot);
    let date = grid.date(day);
    // ISO week 53 folds into week 52.
    let week = date.iso_week().week().min(52) as usize - 1;
    let pairs = [
        cyclic(date.month0() as usize, 12),
        cyclic(week, 52),
        cyclic(date.weekday().num_days_from_monday() as usize, 7),
        cyclic(tod, grid.slots_per_day),
    ];
    let mut out = [0.0; 8];
    for (i, (s, c)) in pairs.into_iter().enumerate() {
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
    out
}

/// The seven per-segment channels over the whole grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentChannels {
    pub segment_id: String,
    pub p85: f64,
    pub v_all: Vec<f64>,
    pub v_car: Vec<f64>,
    pub v_truck: Vec<f64>,
    pub density: Vec<f64>,
    /// `None` when the segment has no upstream segment within range.
    pub sd: Option<Vec<f64>>,
    pub tti: Vec<f64>,
    pub srs: Vec<Option<f64>>,
}

impl SegmentChannels {
    fn channel(&self, k: usize, t: usize) -> f64 {
        match k {
            0 => self.v_all[t],
            1 => self.v_car[t],
            2 => self.v_truck[t],
            3 => self.density[t],
            4 => self.sd.as_ref().map_or(0.0, |sd| sd[t]),
            5 => self.tti[t],
            _ => self.srs[t].unwrap_or(0.0),
        }
    }

    pub fn sd_or_err(&self, max_miles: f64) -> Result<&[f64]> {
        self.sd
            .as_deref()
            .ok_or_else(|| Error::NoUpstream(self.segment_id.clone(), max_miles))
    }
}

/// Computes per-segment channels for every segment of an ingested study.
///
/// `inc` holds each segment's flat report indicator (used by SRS).
pub fn segment_channels(
    study: &IngestedStudy,
    inc: &BTreeMap<String, Vec<bool>>,
    upstream_miles: f64,
) -> Result<Vec<SegmentChannels>> {
    let by_id: BTreeMap<&str, &crate::ingest::SegmentSeries> =
        study.segments.iter().map(|s| (s.segment_id.as_str(), s)).collect();
    let no_reports = vec![false; study.grid.n_slots()];
    study
        .segments
        .iter()
        .map(|s| {
            let ups: Vec<&[f64]> = study
                .graph
                .upstream_within(&s.segment_id, upstream_miles)
                .into_iter()
                .filter_map(|n| by_id.get(n.id.as_str()).map(|u| u.v_all.as_slice()))
                .collect();
            let sd = if ups.is_empty() {
                None
            } else {
                Some(slowdown_speed(&s.v_all, &ups)?)
            };
            let seg_inc = inc.get(&s.segment_id).unwrap_or(&no_reports);
            Ok(SegmentChannels {
                segment_id: s.segment_id.clone(),
                p85: s.p85,
                tti: travel_time_index(&s.v_all, s.p85)?,
                srs: seasonal_recurrent_speed(&s.v_all, seg_inc, &study.grid, s.p85),
                sd,
                v_all: s.v_all.clone(),
                v_car: s.v_car.clone(),
                v_truck: s.v_truck.clone(),
                density: s.density.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Sub-graph feature matrix for one target segment, `n_slots x width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub target: String,
    /// Target, then upstream (nearest first), then downstream.
    pub neighborhood: Vec<String>,
    pub hops_up: usize,
    pub hops_down: usize,
    pub channel_names: Vec<String>,
    pub stats: Vec<ChannelStats>,
    values: Vec<f64>,
    available: Vec<bool>,
    width: usize,
}

impl FeatureFrame {
    /// Wraps already-normalized values (`n_slots x width`, row-major).
    pub fn from_values(target: &str, width: usize, values: Vec<f64>, available: Vec<bool>) -> Result<Self> {
        if width == 0 || values.len() != available.len() * width {
            return Err(Error::Shape(format!(
                "{} values for {} slots of width {width}",
                values.len(),
                available.len()
            )));
        }
        Ok(Self {
            target: target.to_string(),
            neighborhood: vec![target.to_string()],
            hops_up: 0,
            hops_down: 0,
            channel_names: (0..width).map(|i| format!("f{i}")).collect(),
            stats: vec![ChannelStats { mean: 0.0, std: 1.0 }; width],
            values,
            available,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_slots(&self) -> usize {
        self.available.len()
    }

    pub fn row(&self, slot: usize) -> &[f64] {
        &self.values[slot * self.width..(slot + 1) * self.width]
    }

    /// Flattened rows `[last - len + 1, last]`, oldest first.
    pub fn window(&self, last: usize, len: usize) -> &[f64] {
        let first = last + 1 - len;
        &self.values[first * self.width..(last + 1) * self.width]
    }

    /// Sets the named channels to zero, their training mean after
    /// normalization, in every slot. Segment channels are matched by the
    /// part after `SEGMENT:`, so `sd` zeroes the slowdown of every member.
    pub fn exclude_channels(&mut self, names: &[String]) -> Result<()> {
        let mut cols = Vec::new();
        for name in names {
            let hits: Vec<usize> = self
                .channel_names
                .iter()
                .enumerate()
                .filter(|(_, c)| *c == name || c.rsplit_once(':').is_some_and(|(_, k)| k == name))
                .map(|(i, _)| i)
                .collect();
            if hits.is_empty() {
                return Err(Error::InvalidParameter(format!("unknown feature channel {name:?}")));
            }
            cols.extend(hits);
        }
        for row in self.values.chunks_mut(self.width) {
            for &c in &cols {
                row[c] = 0.0;
            }
        }
        Ok(())
    }

    /// Whether every channel at `slot` is defined (SRS has enough history).
    pub fn available(&self, slot: usize) -> bool {
        self.available[slot]
    }
}

/// Feature width for a neighborhood of the given effective size.
pub fn frame_width(hops_up: usize, hops_down: usize) -> usize {
    SEGMENT_CHANNELS.len() * (1 + hops_up + hops_down) + TIME_CHANNELS.len() + WEATHER_CHANNELS.len()
}

/// Builds the z-scored sub-graph frame for `target`.
///
/// Uses up to `hops_up` nearest upstream and `hops_down` nearest downstream
/// segments; fewer are used when the graph has fewer, and the effective
/// counts are stored on the frame. Normalization statistics come from the
/// available slots of `stat_days` inside `window`.
#[allow(clippy::too_many_arguments)]
pub fn assemble(
    grid: &TimeGrid,
    graph: &RoadGraph,
    channels: &[SegmentChannels],
    weather: &WeatherSeries,
    target: &str,
    hops_up: usize,
    hops_down: usize,
    stat_days: &[usize],
    window: &StudyWindow,
) -> Result<FeatureFrame> {
    if !graph.contains(target) && !channels.iter().any(|c| c.segment_id == target) {
        return Err(Error::UnknownSegment(target.to_string()));
    }
    let lookup = |id: &str| channels.iter().find(|c| c.segment_id == id);
    let target_ch = lookup(target).ok_or_else(|| Error::UnknownSegment(target.to_string()))?;
    let ups: Vec<&SegmentChannels> = graph
        .upstream_of(target)
        .iter()
        .filter_map(|n| lookup(&n.id))
        .take(hops_up)
        .collect();
    let downs: Vec<&SegmentChannels> = graph
        .downstream_of(target)
        .iter()
        .filter_map(|n| lookup(&n.id))
        .take(hops_down)
        .collect();
    if ups.len() < hops_up || downs.len() < hops_down {
        log::info!(
            "{target}: using {} upstream and {} downstream neighbors (requested {hops_up}/{hops_down})",
            ups.len(),
            downs.len()
        );
    }
    let members: Vec<&SegmentChannels> = std::iter::once(target_ch).chain(ups.iter().copied()).chain(downs.iter().copied()).collect();
    let width = frame_width(ups.len(), downs.len());
    let n = grid.n_slots();
    if weather.slots.len() != n {
        return Err(Error::LengthMismatch {
            what: "weather series",
            expected: n,
            actual: weather.slots.len(),
        });
    }

    let mut channel_names = Vec::with_capacity(width);
    for m in &members {
        for c in SEGMENT_CHANNELS {
            channel_names.push(format!("{}:{c}", m.segment_id));
        }
    }
    channel_names.extend(TIME_CHANNELS.iter().map(|s| s.to_string()));
    channel_names.extend(WEATHER_CHANNELS.iter().map(|s| s.to_string()));

    let available: Vec<bool> = (0..n)
        .map(|t| members.iter().all(|m| m.srs[t].is_some()))
        .collect();
    let mut values = Vec::with_capacity(n * width);
    for t in 0..n {
        for m in &members {
            for k in 0..SEGMENT_CHANNELS.len() {
                values.push(m.channel(k, t));
            }
        }
        values.extend_from_slice(&encode_time(grid, t));
        values.extend_from_slice(&weather.slots[t]);
    }

    let stat_slots: Vec<usize> = stat_days
        .iter()
        .flat_map(|&d| (window.start..window.end).map(move |q| grid.global(d, q)))
        .filter(|&t| available[t])
        .collect();
    let stats: Vec<ChannelStats> = (0..width)
        .map(|c| {
            if stat_slots.is_empty() {
                return ChannelStats { mean: 0.0, std: 1.0 };
            }
            let k = stat_slots.len() as f64;
            let mean = stat_slots.iter().map(|&t| values[t * width + c]).sum::<f64>() / k;
            let var = stat_slots
                .iter()
                .map(|&t| (values[t * width + c] - mean).powi(2))
                .sum::<f64>()
                / k;
            ChannelStats {
                mean,
                std: var.sqrt().max(STD_FLOOR),
            }
        })
        .collect();
    for t in 0..n {
        let row = &mut values[t * width..(t + 1) * width];
        for (v, s) in row.iter_mut().zip(&stats) {
            *v = (*v - s.mean) / s.std;
        }
        if !available[t] {
            row.fill(0.0);
        }
    }

    Ok(FeatureFrame {
        target: target.to_string(),
        neighborhood: members.iter().map(|m| m.segment_id.clone()).collect(),
        hops_up: ups.len(),
        hops_down: downs.len(),
        channel_names,
        stats,
        values,
        available,
        width,
    })
}

/// Writes per-segment channels in long form: `segment_id,timestamp,channel,value`.
pub fn write_features_csv(path: &Path, grid: &TimeGrid, channels: &[SegmentChannels]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "segment_id,timestamp,channel,value").map_err(io)?;
    for ch in channels {
        for t in 0..grid.n_slots() {
            let ts = format_timestamp(grid.timestamp(t));
            for (k, name) in SEGMENT_CHANNELS.iter().enumerate() {
                let missing = (k == 4 && ch.sd.is_none()) || (k == 6 && ch.srs[t].is_none());
                if missing {
                    continue;
                }
                writeln!(w, "{},{ts},{name},{}", ch.segment_id, ch.channel(k, t)).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}
