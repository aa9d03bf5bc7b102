use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{DenoiseIterate, Error, Result};
use crate::evaluation::{EvalReport, IncidentTally};
use crate::grid::{BinMatrix, StudyWindow, TimeGrid};
use crate::windowing::{SplitSpec, WindowConfig};

use super::config::{Calibration, LabelMode, Selection};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Label matrices of one target, `days x study slots`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLabels {
    pub inc: BinMatrix,
    pub sir: BinMatrix,
    pub ano: BinMatrix,
    pub aan: BinMatrix,
}

impl SegmentLabels {
    pub fn for_mode(&self, mode: LabelMode) -> &BinMatrix {
        match mode {
            LabelMode::Ano => &self.ano,
            LabelMode::Aan => &self.aan,
        }
    }
}

/// Writes `segment_id,date,slot,INC,ANO,AAN,SIR` for every study slot;
/// `slot` is the slot of day.
pub fn write_labels_csv(path: &Path, grid: &TimeGrid, window: &StudyWindow, labels: &BTreeMap<String, SegmentLabels>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "segment_id,date,slot,INC,ANO,AAN,SIR").map_err(io)?;
    let bit = |m: &BinMatrix, d: usize, c: usize| u8::from(*m.get(d, c));
    for (seg, l) in labels {
        for d in 0..grid.n_days {
            let date = grid.date(d).format("%Y-%m-%d");
            for c in 0..window.len() {
                writeln!(
                    w,
                    "{seg},{date},{},{},{},{},{}",
                    window.start + c,
                    bit(&l.inc, d, c),
                    bit(&l.ano, d, c),
                    bit(&l.aan, d, c),
                    bit(&l.sir, d, c)
                )
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn read_labels_csv(path: &Path, grid: &TimeGrid, window: &StudyWindow) -> Result<BTreeMap<String, SegmentLabels>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out: BTreeMap<String, SegmentLabels> = BTreeMap::new();
    let mut record = csv::StringRecord::new();
    let mut line = 1usize;
    let parse_err = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    while rdr.read_record(&mut record).map_err(|e| Error::csv(path, e))? {
        line += 1;
        if record.len() != 7 {
            return Err(parse_err(line, "expected 7 fields"));
        }
        let date = NaiveDate::parse_from_str(&record[1], "%Y-%m-%d").map_err(|_| parse_err(line, "bad date"))?;
        let d = (date - grid.first_day()).num_days();
        if d < 0 || d as usize >= grid.n_days {
            return Err(parse_err(line, "date off the grid"));
        }
        let q: usize = record[2].parse().map_err(|_| parse_err(line, "bad slot"))?;
        if !window.contains(q) {
            return Err(parse_err(line, "slot outside the study window"));
        }
        let (d, c) = (d as usize, q - window.start);
        let entry = out.entry(record[0].to_string()).or_insert_with(|| {
            let z = BinMatrix::zeros(grid.n_days, window.len());
            SegmentLabels {
                inc: z.clone(),
                sir: z.clone(),
                ano: z.clone(),
                aan: z,
            }
        });
        for (k, m) in [&mut entry.inc, &mut entry.ano, &mut entry.aan, &mut entry.sir].into_iter().enumerate() {
            match &record[3 + k] {
                "0" => {}
                "1" => m.set(d, c, true),
                _ => return Err(parse_err(line, "label must be 0 or 1")),
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub inc: usize,
    pub asd: usize,
    pub sir: usize,
    pub add: usize,
    pub ano: usize,
    pub aan: usize,
}

/// Labeling record of one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAudit {
    /// `corridor`, `segment`, or `initial_percentile` when the training
    /// days had no reports to calibrate against.
    pub calibration: String,
    pub n_final: f64,
    pub theta_sd: f64,
    pub removal_train: f64,
    pub addition_train: f64,
    /// Percentile search iterates; empty when calibrated corridor-wide.
    pub trace: Vec<DenoiseIterate>,
    pub removal_all: f64,
    pub addition_all: f64,
    pub counts: LabelCounts,
}

/// Corridor-wide percentile search on training days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledAudit {
    pub n_final: f64,
    pub removal: f64,
    pub addition: f64,
    pub trace: Vec<DenoiseIterate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAudit {
    pub calibration: Calibration,
    pub pooled: Option<PooledAudit>,
    pub segments: BTreeMap<String, SegmentAudit>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub samples: usize,
    pub skipped_unavailable: usize,
    pub positive_steps_ano: usize,
    pub positive_steps_aan: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitArtifact {
    pub split: SplitSpec,
    pub study: StudyWindow,
    pub window: WindowConfig,
    pub targets: BTreeMap<String, BTreeMap<String, PartitionCounts>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContaminationPair {
    pub a: String,
    pub b: String,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContaminationArtifact {
    pub pairs: Vec<ContaminationPair>,
    pub total_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedTarget {
    pub input_dim: usize,
    pub w_ano: f64,
    pub samples: usize,
    pub positive_steps: usize,
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub labels: LabelMode,
    pub targets: BTreeMap<String, TrainedTarget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub tau: f64,
    pub epoch: usize,
    pub f_tune: f64,
    pub f_val: f64,
    /// Set when tuning or validation days had no positive labels and
    /// other days stood in for them.
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionArtifact {
    pub labels: LabelMode,
    pub beta: f64,
    pub selection: Selection,
    pub targets: BTreeMap<String, SelectionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEval {
    pub report: EvalReport,
    pub tally: IncidentTally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub labels: LabelMode,
    pub pooled: EvalReport,
    pub pooled_tally: IncidentTally,
    pub segments: BTreeMap<String, SegmentEval>,
}
