//! CSV schemas for the raw input feeds.
//!
//! ```text
//! speed_1min.csv  segment_id,timestamp,vehicle_class,speed_mph
//! speed_5min.csv  segment_id,timestamp,speed_mph,density_code
//! incidents.csv   segment_id,start,end,kind
//! weather.csv     timestamp,temp,humidity,precip,snowfall,snow_depth,wind_speed,wind_dir
//! graph.csv       segment_id,neighbor_id,direction,distance_miles
//! ```
//!
//! Missing observations are either absent rows or empty speed fields.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::graph::{Direction, RoadGraph};
use super::{
    forward_fill_weather, free_flow_speed, impute_all_vehicle, impute_class_speeds, normalize_density,
    IncidentReport, RawSeries, SegmentSeries, WeatherSeries, MINUTES_PER_SLOT,
};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;

const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format(TS_FORMAT).to_string()
}

/// Parses ISO-8601 local timestamps, with or without seconds, `T` or space separated.
pub fn parse_timestamp(text: &str) -> Option<NaiveDateTime> {
    let text = text.trim();
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(text, f).ok())
}

/// Standard file names inside an input directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputPaths {
    pub speed_1min: PathBuf,
    pub speed_5min: PathBuf,
    pub incidents: PathBuf,
    pub weather: PathBuf,
    pub graph: PathBuf,
}

impl InputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            speed_1min: dir.join("speed_1min.csv"),
            speed_5min: dir.join("speed_5min.csv"),
            incidents: dir.join("incidents.csv"),
            weather: dir.join("weather.csv"),
            graph: dir.join("graph.csv"),
        }
    }

    pub fn all(&self) -> [&Path; 5] {
        [
            &self.speed_1min,
            &self.speed_5min,
            &self.incidents,
            &self.weather,
            &self.graph,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    /// Report kinds to keep; empty keeps every kind.
    pub report_kinds: Vec<String>,
    /// Leading days whose observations define the free-flow speed.
    pub train_days: usize,
}

/// One segment's raw feeds on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRaw {
    pub segment_id: String,
    pub five_min: RawSeries,
    pub density: Vec<Option<String>>,
    pub one_min_all: RawSeries,
    pub one_min_car: RawSeries,
    pub one_min_truck: RawSeries,
}

impl SegmentRaw {
    pub fn empty(segment_id: &str, grid: &TimeGrid) -> Self {
        let n = grid.n_slots();
        Self {
            segment_id: segment_id.to_string(),
            five_min: vec![None; n],
            density: vec![None; n],
            one_min_all: vec![None; n * MINUTES_PER_SLOT],
            one_min_car: vec![None; n * MINUTES_PER_SLOT],
            one_min_truck: vec![None; n * MINUTES_PER_SLOT],
        }
    }
}

/// All raw feeds of a study, aligned to one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStudy {
    pub grid: TimeGrid,
    pub graph: RoadGraph,
    pub segments: Vec<SegmentRaw>,
    pub reports: Vec<IncidentReport>,
    pub weather: Vec<(NaiveDateTime, [f64; 7])>,
}

/// Imputed, grid-aligned study data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestedStudy {
    pub grid: TimeGrid,
    pub graph: RoadGraph,
    pub segments: Vec<SegmentSeries>,
    pub reports: Vec<IncidentReport>,
    pub weather: WeatherSeries,
}

impl RawStudy {
    pub fn segment(&self, id: &str) -> Option<&SegmentRaw> {
        self.segments.iter().find(|s| s.segment_id == id)
    }

    /// Runs every imputation step and returns complete series.
    pub fn impute(&self, config: &IngestConfig) -> Result<IngestedStudy> {
        let train_slots = config.train_days.min(self.grid.n_days) * self.grid.slots_per_day;
        let segments = self
            .segments
            .iter()
            .map(|s| {
                let p85 = free_flow_speed(&s.five_min[..train_slots])
                    .or_else(|_| free_flow_speed(&s.five_min))?;
                let v_all = impute_all_vehicle(&s.five_min, &s.one_min_all, p85)?;
                let v_car = impute_class_speeds(&s.one_min_car, &v_all, &s.five_min)?;
                let v_truck = impute_class_speeds(&s.one_min_truck, &v_all, &s.five_min)?;
                let density = normalize_density(&s.density)?;
                Ok(SegmentSeries {
                    segment_id: s.segment_id.clone(),
                    v_all,
                    v_car,
                    v_truck,
                    density,
                    p85,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let reports = self
            .reports
            .iter()
            .filter(|r| config.report_kinds.is_empty() || config.report_kinds.contains(&r.kind))
            .cloned()
            .collect();
        Ok(IngestedStudy {
            grid: self.grid,
            graph: self.graph.clone(),
            segments,
            reports,
            weather: forward_fill_weather(&self.grid, &self.weather)?,
        })
    }

    /// Writes the five input CSVs into `dir` using the standard names.
    pub fn write_csvs(&self, dir: &Path) -> Result<InputPaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = InputPaths::in_dir(dir);
        self.write_speed_5min(&paths.speed_5min)?;
        self.write_speed_1min(&paths.speed_1min)?;
        write_incidents(&paths.incidents, &self.reports)?;
        self.write_weather(&paths.weather)?;
        self.write_graph(&paths.graph)?;
        Ok(paths)
    }

    fn write_speed_5min(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(w, "segment_id,timestamp,speed_mph,density_code").map_err(io)?;
        for s in &self.segments {
            for slot in 0..self.grid.n_slots() {
                let (speed, code) = (&s.five_min[slot], &s.density[slot]);
                if speed.is_none() && code.is_none() {
                    continue;
                }
                let ts = format_timestamp(self.grid.timestamp(slot));
                let speed = speed.map(|v| v.to_string()).unwrap_or_default();
                let code = code.as_deref().unwrap_or("");
                writeln!(w, "{},{ts},{speed},{code}", s.segment_id).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    fn write_speed_1min(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(w, "segment_id,timestamp,vehicle_class,speed_mph").map_err(io)?;
        for s in &self.segments {
            let n = self.grid.n_slots() * MINUTES_PER_SLOT;
            for minute in 0..n {
                let classes = [
                    ("all", s.one_min_all[minute]),
                    ("car", s.one_min_car[minute]),
                    ("truck", s.one_min_truck[minute]),
                ];
                if classes.iter().all(|(_, v)| v.is_none()) {
                    continue;
                }
                let ts = format_timestamp(self.grid.start + chrono::Duration::minutes(minute as i64));
                for (class, v) in classes {
                    if let Some(v) = v {
                        writeln!(w, "{},{ts},{class},{v}", s.segment_id).map_err(io)?;
                    }
                }
            }
        }
        w.flush().map_err(io)
    }

    fn write_weather(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(w, "timestamp,temp,humidity,precip,snowfall,snow_depth,wind_speed,wind_dir").map_err(io)?;
        for (ts, row) in &self.weather {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{}", format_timestamp(*ts), vals.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    fn write_graph(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(w, "segment_id,neighbor_id,direction,distance_miles").map_err(io)?;
        for (dir, map) in [("up", &self.graph.upstream), ("down", &self.graph.downstream)] {
            for (seg, list) in map {
                for n in list {
                    writeln!(w, "{seg},{},{dir},{}", n.id, n.distance).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_incidents(path: &Path, reports: &[IncidentReport]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "segment_id,start,end,kind").map_err(io)?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{}",
            r.segment_id,
            format_timestamp(r.start),
            format_timestamp(r.end),
            r.kind
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

fn open(path: &Path) -> Result<csv::Reader<File>> {
    if !path.exists() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        });
    }
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        msg: msg.into(),
    }
}

fn ts_field(path: &Path, line: u64, text: &str) -> Result<NaiveDateTime> {
    parse_timestamp(text).ok_or_else(|| parse_err(path, line, format!("bad timestamp {text:?}")))
}

fn speed_field(path: &Path, line: u64, text: &str) -> Result<Option<f64>> {
    if text.is_empty() || text.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    text.parse::<f64>()
        .map(Some)
        .map_err(|_| parse_err(path, line, format!("bad speed {text:?}")))
}

#[derive(Debug, Deserialize)]
struct IncidentRecord {
    segment_id: String,
    start: String,
    end: String,
    kind: String,
}

#[derive(Debug, Deserialize)]
struct GraphRecord {
    segment_id: String,
    neighbor_id: String,
    direction: String,
    distance_miles: f64,
}

pub fn read_graph(path: &Path) -> Result<RoadGraph> {
    let mut rdr = open(path)?;
    let mut edges = Vec::new();
    for (i, rec) in rdr.deserialize::<GraphRecord>().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let dir = match rec.direction.as_str() {
            "up" => Direction::Up,
            "down" => Direction::Down,
            other => return Err(parse_err(path, i as u64 + 2, format!("bad direction {other:?}"))),
        };
        edges.push((rec.segment_id, rec.neighbor_id, dir, rec.distance_miles));
    }
    RoadGraph::from_edges(edges)
}

pub fn read_incidents(path: &Path) -> Result<Vec<IncidentReport>> {
    let mut rdr = open(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<IncidentRecord>().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let start = ts_field(path, line, &rec.start)?;
        let end = ts_field(path, line, &rec.end)?;
        if start >= end {
            return Err(parse_err(path, line, "report start is not before its end"));
        }
        out.push(IncidentReport {
            segment_id: rec.segment_id,
            start,
            end,
            kind: rec.kind,
        });
    }
    Ok(out)
}

pub fn read_weather(path: &Path) -> Result<Vec<(NaiveDateTime, [f64; 7])>> {
    let mut rdr = open(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if rec.len() != 8 {
            return Err(parse_err(path, line, format!("expected 8 fields, got {}", rec.len())));
        }
        let ts = ts_field(path, line, &rec[0])?;
        let mut row = [0.0; 7];
        for (k, v) in row.iter_mut().enumerate() {
            *v = rec[k + 1]
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad weather value {:?}", &rec[k + 1])))?;
        }
        out.push((ts, row));
    }
    Ok(out)
}

/// Reads every input feed. The grid spans the calendar days present in the
/// five-minute speed file.
pub fn load_study(paths: &InputPaths) -> Result<RawStudy> {
    let graph = read_graph(&paths.graph)?;

    let path = paths.speed_5min.as_path();
    let mut rows = Vec::new();
    let mut rdr = open(path)?;
    let mut record = csv::StringRecord::new();
    let mut line = 1u64;
    while rdr.read_record(&mut record).map_err(|e| Error::csv(path, e))? {
        line += 1;
        if record.len() != 4 {
            return Err(parse_err(path, line, "expected 4 fields"));
        }
        let ts = ts_field(path, line, &record[1])?;
        let speed = speed_field(path, line, &record[2])?;
        let code = (!record[3].is_empty()).then(|| record[3].to_string());
        rows.push((record[0].to_string(), ts, speed, code));
    }
    let (first, last) = rows
        .iter()
        .map(|r| r.1.date())
        .fold(None, |acc: Option<(_, _)>, d| match acc {
            None => Some((d, d)),
            Some((a, b)) => Some((a.min(d), b.max(d))),
        })
        .ok_or(Error::EmptySeries("five-minute speed file"))?;
    let grid = TimeGrid::new(first, (last - first).num_days() as usize + 1);

    let mut ids: BTreeSet<String> = rows.iter().map(|r| r.0.clone()).collect();
    ids.extend(graph.segments.iter().cloned());
    let mut segments: Vec<SegmentRaw> = ids.iter().map(|id| SegmentRaw::empty(id, &grid)).collect();
    let index: HashMap<String, usize> = ids.into_iter().enumerate().map(|(i, s)| (s, i)).collect();

    for (seg, ts, speed, code) in rows {
        let slot = grid
            .slot_of(ts)
            .ok_or_else(|| parse_err(path, 0, format!("timestamp {ts} is off the 5-minute grid")))?;
        let s = &mut segments[index[&seg]];
        s.five_min[slot] = speed;
        s.density[slot] = code;
    }

    let path = paths.speed_1min.as_path();
    let mut rdr = open(path)?;
    let n_minutes = grid.n_slots() as i64 * MINUTES_PER_SLOT as i64;
    let mut line = 1u64;
    while rdr.read_record(&mut record).map_err(|e| Error::csv(path, e))? {
        line += 1;
        if record.len() != 4 {
            return Err(parse_err(path, line, "expected 4 fields"));
        }
        let Some(&i) = index.get(&record[0]) else {
            log::warn!("{}: line {line}: segment {} has no five-minute data", path.display(), &record[0]);
            continue;
        };
        let ts = ts_field(path, line, &record[1])?;
        let minute = (ts - grid.start).num_minutes();
        if !(0..n_minutes).contains(&minute) {
            continue;
        }
        let speed = speed_field(path, line, &record[3])?;
        let s = &mut segments[i];
        let series = match &record[2] {
            "all" => &mut s.one_min_all,
            "car" => &mut s.one_min_car,
            "truck" => &mut s.one_min_truck,
            other => return Err(parse_err(path, line, format!("bad vehicle class {other:?}"))),
        };
        series[minute as usize] = speed;
    }

    Ok(RawStudy {
        grid,
        graph,
        segments,
        reports: read_incidents(&paths.incidents)?,
        weather: read_weather(&paths.weather)?,
    })
}
