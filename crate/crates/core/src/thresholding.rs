//! Alert threshold tuning and epoch selection.
//!
//! Every epoch snapshot gets its own threshold from a sweep over
//! `0.01, 0.02, ..., 0.99` on the tuning days; the snapshot whose threshold
//! scores best on the validation days is kept.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{train, DetectorParams, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::windowing::WindowSample;

pub const GRID_STEPS: usize = 99;

/// The threshold grid `0.01..=0.99`.
pub fn tau_grid() -> impl Iterator<Item = f64> {
    (1..=GRID_STEPS).map(|i| i as f64 / 100.0)
}

/// `(1 + b^2) P R / (b^2 P + R)`, or 0 when the denominator vanishes.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn from_pairs(scores: &[f64], labels: &[bool], tau: f64) -> Self {
        let mut c = Self::default();
        for (&s, &y) in scores.iter().zip(labels) {
            c.add(s >= tau, y);
        }
        c
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.tp + self.fp + self.fn_ + self.tn)
    }

    pub fn f_beta(&self, beta: f64) -> f64 {
        f_beta(self.precision(), self.recall(), beta)
    }
}

/// Best grid threshold for pooled step-level scores; ties go to the smaller
/// threshold.
pub fn sweep(scores: &[f64], labels: &[bool], beta: f64) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if !labels.iter().any(|&y| y) {
        return Err(Error::NoPositives);
    }
    let mut best = (0.0, f64::NEG_INFINITY);
    for tau in tau_grid() {
        let f = Confusion::from_pairs(scores, labels, tau).f_beta(beta);
        if f > best.1 {
            best = (tau, f);
        }
    }
    Ok(best)
}

/// Flattens predictions and targets of samples into pooled step vectors.
pub fn pooled(params: &DetectorParams, samples: &[WindowSample]) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::with_capacity(samples.len() * params.horizon);
    let mut labels = Vec::with_capacity(samples.len() * params.horizon);
    for s in samples {
        scores.extend(params.forward(s.input, None)?);
        labels.extend(s.target.iter().map(|&y| y > 0.5));
    }
    Ok((scores, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    /// One-based epoch number.
    pub epoch: usize,
    pub tau: f64,
    pub f_tune: f64,
    pub f_val: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdedDetector {
    pub params: DetectorParams,
    pub tau: f64,
    pub beta: f64,
    pub epoch: usize,
    pub selection_trace: Vec<SelectionRow>,
}

/// Picks the snapshot with the best validation score at its tuned threshold.
///
/// The first snapshot is kept unless a later one is strictly better.
pub fn select(snapshots: &[DetectorParams], tune: &[WindowSample], val: &[WindowSample], beta: f64) -> Result<ThresholdedDetector> {
    let (b, trace) = select_pooled(
        &[SelectionCase {
            snapshots,
            tune,
            val,
        }],
        beta,
    )?;
    Ok(ThresholdedDetector {
        params: snapshots[b].clone(),
        tau: trace[b].tau,
        beta,
        epoch: b + 1,
        selection_trace: trace,
    })
}

/// One detector's epoch snapshots with its tuning and validation samples.
#[derive(Debug, Clone, Copy)]
pub struct SelectionCase<'s, 'a> {
    pub snapshots: &'s [DetectorParams],
    pub tune: &'s [WindowSample<'a>],
    pub val: &'s [WindowSample<'a>],
}

/// Selects one epoch index and one threshold shared by several detectors.
///
/// Each epoch's threshold is swept on the scores of all detectors' tuning
/// samples pooled together, then scored on their pooled validation samples.
/// Returns the zero-based chosen epoch and the per-epoch trace. With a
/// single case this is [`select`].
pub fn select_pooled(cases: &[SelectionCase], beta: f64) -> Result<(usize, Vec<SelectionRow>)> {
    let epochs = cases.first().map_or(0, |c| c.snapshots.len());
    if epochs == 0 || cases.iter().any(|c| c.snapshots.len() != epochs) {
        return Err(Error::EmptySeries("epoch snapshots (or unequal epoch counts)"));
    }
    if cases.iter().all(|c| c.tune.is_empty()) || cases.iter().all(|c| c.val.is_empty()) {
        return Err(Error::EmptySeries("tuning or validation samples"));
    }
    let positive = |set: &[WindowSample]| set.iter().any(|s| s.target.iter().any(|&y| y > 0.5));
    if !cases.iter().any(|c| positive(c.val)) {
        return Err(Error::NoPositives);
    }
    let mut trace = Vec::with_capacity(epochs);
    let mut best: Option<usize> = None;
    for e in 0..epochs {
        let (mut ts, mut tl, mut vs, mut vl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for c in cases {
            let (s, l) = pooled(&c.snapshots[e], c.tune)?;
            ts.extend(s);
            tl.extend(l);
            let (s, l) = pooled(&c.snapshots[e], c.val)?;
            vs.extend(s);
            vl.extend(l);
        }
        let (tau, f_tune) = sweep(&ts, &tl, beta)?;
        let f_val = Confusion::from_pairs(&vs, &vl, tau).f_beta(beta);
        log::debug!("epoch {}: tau {tau:.2} f_tune {f_tune:.4} f_val {f_val:.4}", e + 1);
        trace.push(SelectionRow {
            epoch: e + 1,
            tau,
            f_tune,
            f_val,
        });
        if best.is_none_or(|b| f_val > trace[b].f_val) {
            best = Some(e);
        }
    }
    Ok((best.expect("nonempty snapshots"), trace))
}

/// Trains, then selects epoch and threshold.
pub fn fit(
    train_set: &[WindowSample],
    tune: &[WindowSample],
    val: &[WindowSample],
    config: &TrainConfig,
    beta: f64,
) -> Result<(TrainOutcome, ThresholdedDetector)> {
    let outcome = train(train_set, config)?;
    let chosen = select(&outcome.snapshots, tune, val, beta)?;
    Ok((outcome, chosen))
}

pub fn write_selection_trace(path: &Path, rows: &[SelectionRow]) -> Result<()> {
    let mut out = String::from("epoch,tau,f_tune,f_val\n");
    for r in rows {
        out.push_str(&format!("{},{:.2},{},{}\n", r.epoch, r.tau, r.f_tune, r.f_val));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
