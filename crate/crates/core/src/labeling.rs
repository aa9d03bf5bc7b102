//! Anomaly ground truth from noisy incident reports.
//!
//! [`denoise`] searches the slowdown percentile `n` so that report removal
//! and slowdown-based addition stay within their budgets. A report episode
//! survives when any cell in it carries an abnormal slowdown; runs of
//! abnormal slowdown lasting at least `theta_t` slots outside kept reports
//! become added anomalies. [`denoise_pooled`] runs the same search for
//! several segments at once under shared budgets. [`ahead_label`] then
//! extends every anomaly episode backwards by `theta_ahead` slots.
//!
//! All matrices are `days x slots`; episodes and runs never cross a row.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{DenoiseIterate, Error, Result};
use crate::grid::{BinMatrix, DayMatrix};
use crate::stats::percentile;

pub const DEFAULT_THETA_AHEAD: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseParams {
    /// Maximum fraction of report cells that may be removed.
    pub theta1: f64,
    /// Maximum added cells, as a fraction of report cells.
    pub theta2: f64,
    /// Minimum run length (slots) of a prolonged abnormal slowdown.
    pub theta_t: usize,
    /// Initial top-percent of slowdown cells flagged abnormal.
    pub n0: f64,
    pub alpha: f64,
    pub max_iters: usize,
}

impl Default for DenoiseParams {
    fn default() -> Self {
        Self {
            theta1: 0.6,
            theta2: 1.0,
            theta_t: 3,
            n0: 5.0,
            alpha: 0.5,
            max_iters: 50,
        }
    }
}

impl DenoiseParams {
    fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.theta1) || !unit.contains(&self.theta2) {
            return Err(Error::InvalidParameter("theta1 and theta2 must lie in [0, 1]".into()));
        }
        if self.theta_t < 1 {
            return Err(Error::InvalidParameter("theta_t must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidParameter("alpha must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelBundle {
    pub inc: BinMatrix,
    pub asd: BinMatrix,
    pub sir: BinMatrix,
    pub psa: BinMatrix,
    pub add: BinMatrix,
    pub ano: BinMatrix,
    pub aan: BinMatrix,
    pub n_final: f64,
    pub theta_sd: f64,
    pub removal: f64,
    pub addition: f64,
    pub iterations: usize,
    pub trace: Vec<DenoiseIterate>,
    pub params: DenoiseParams,
    pub theta_ahead: usize,
}

impl LabelBundle {
    /// Replaces `aan` with the ahead-labeled `ano`.
    pub fn with_ahead_labels(mut self, theta_ahead: usize) -> Self {
        self.aan = ahead_label(&self.ano, theta_ahead);
        self.theta_ahead = theta_ahead;
        self
    }
}

/// Maximal runs of `true` in a row as `(start, len)`.
pub fn runs(row: &[bool]) -> impl Iterator<Item = (usize, usize)> + '_ {
    let mut q = 0;
    std::iter::from_fn(move || {
        while q < row.len() && !row[q] {
            q += 1;
        }
        if q >= row.len() {
            return None;
        }
        let start = q;
        while q < row.len() && row[q] {
            q += 1;
        }
        Some((start, q - start))
    })
}

/// Flags slowdown cells in the top `n` percent.
///
/// The threshold is the `(100 - n)`-th linear-interpolation percentile of all
/// cells, and a cell is abnormal when `SD >= threshold`.
pub fn abnormal_slowdown(sd: &DayMatrix<f64>, n: f64) -> Result<(f64, BinMatrix)> {
    if !(n > 0.0 && n < 100.0) {
        return Err(Error::InvalidParameter(format!("slowdown percentile n={n} outside (0, 100)")));
    }
    let theta_sd = percentile(sd.as_slice(), 100.0 - n).ok_or(Error::EmptySeries("slowdown matrix"))?;
    if !(theta_sd > 0.0) {
        return Err(Error::DegenerateSlowdown { n, theta_sd });
    }
    Ok((theta_sd, sd.map(|&v| v >= theta_sd)))
}

/// Keeps every report episode that contains at least one abnormal cell.
pub fn significant_reports(inc: &BinMatrix, asd: &BinMatrix) -> BinMatrix {
    let mut sir = BinMatrix::zeros(inc.rows(), inc.cols());
    for p in 0..inc.rows() {
        let (inc_row, asd_row) = (inc.row(p), asd.row(p));
        for (q, r) in runs(inc_row).collect::<Vec<_>>() {
            if asd_row[q..q + r].iter().any(|&b| b) {
                sir.row_mut(p)[q..q + r].fill(true);
            }
        }
    }
    sir
}

/// Abnormal runs lasting at least `theta_t` slots.
pub fn prolonged_anomalies(asd: &BinMatrix, theta_t: usize) -> BinMatrix {
    let mut psa = BinMatrix::zeros(asd.rows(), asd.cols());
    for p in 0..asd.rows() {
        for (q, r) in runs(asd.row(p)).collect::<Vec<_>>() {
            if r >= theta_t {
                psa.row_mut(p)[q..q + r].fill(true);
            }
        }
    }
    psa
}

struct Pass {
    theta_sd: f64,
    asd: BinMatrix,
    sir: BinMatrix,
    psa: BinMatrix,
    add: BinMatrix,
    removal: f64,
    addition: f64,
}

fn label_pass(inc: &BinMatrix, asd: BinMatrix, theta_sd: f64, theta_t: usize) -> Pass {
    let sir = significant_reports(inc, &asd);
    let psa = prolonged_anomalies(&asd, theta_t);
    // Added cells: abnormal, outside kept reports, and part of a prolonged run.
    let add = asd.zip_map(&sir, |&a, &s| a && !s).zip_map(&psa, |&a, &p| a && p);
    let reported = inc.count();
    let (removal, addition) = if reported == 0 {
        (0.0, if add.count() == 0 { 0.0 } else { f64::INFINITY })
    } else {
        (
            1.0 - sir.count() as f64 / reported as f64,
            add.count() as f64 / reported as f64,
        )
    };
    Pass {
        theta_sd,
        asd,
        sir,
        psa,
        add,
        removal,
        addition,
    }
}

fn finish(inc: &BinMatrix, pass: Pass, n: f64, params: DenoiseParams, trace: Vec<DenoiseIterate>) -> LabelBundle {
    let ano = pass.sir.zip_map(&pass.add, |&s, &a| s || a);
    LabelBundle {
        inc: inc.clone(),
        aan: ano.clone(),
        ano,
        asd: pass.asd,
        sir: pass.sir,
        psa: pass.psa,
        add: pass.add,
        n_final: n,
        theta_sd: pass.theta_sd,
        removal: pass.removal,
        addition: pass.addition,
        iterations: trace.len(),
        trace,
        params,
        theta_ahead: 0,
    }
}

/// Labels with a fixed slowdown threshold instead of searching `n`.
///
/// Used to apply a threshold calibrated on training days to other days.
pub fn label_with_threshold(inc: &BinMatrix, sd: &DayMatrix<f64>, theta_sd: f64, params: DenoiseParams) -> Result<LabelBundle> {
    check_shapes(inc, sd)?;
    if !(theta_sd > 0.0) {
        return Err(Error::InvalidParameter(format!("slowdown threshold {theta_sd} must be positive")));
    }
    let asd = sd.map(|&v| v >= theta_sd);
    let pass = label_pass(inc, asd, theta_sd, params.theta_t);
    Ok(finish(inc, pass, f64::NAN, params, Vec::new()))
}

/// Searches the slowdown percentile and produces denoised anomaly labels.
///
/// Starting from `n0`, `n` grows by `alpha` while too many reports are
/// removed and shrinks while too many cells are added. Both budgets failing
/// at once is an error. If `n` returns to an earlier value the iterate with
/// the smallest total budget overshoot is accepted.
pub fn denoise(inc: &BinMatrix, sd: &DayMatrix<f64>, params: DenoiseParams) -> Result<LabelBundle> {
    params.validate()?;
    check_shapes(inc, sd)?;
    if inc.count() == 0 {
        return Err(Error::NoReports);
    }
    let (n, pass, trace) = search(params, |n| {
        let (theta_sd, asd) = abnormal_slowdown(sd, n)?;
        let pass = label_pass(inc, asd, theta_sd, params.theta_t);
        let it = DenoiseIterate {
            n,
            theta_sd,
            removal: pass.removal,
            addition: pass.addition,
        };
        Ok((it, pass))
    })?;
    Ok(finish(inc, pass, n, params, trace))
}

/// Denoising of several segments under one shared percentile.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledLabels {
    /// One bundle per input case, each with its own slowdown threshold and
    /// its own removal and addition fractions.
    pub bundles: Vec<LabelBundle>,
    pub n_final: f64,
    /// Removal fraction over all cases' report cells.
    pub removal: f64,
    /// Added cells over all cases' report cells.
    pub addition: f64,
    /// Search iterates with pooled fractions; `theta_sd` is the mean of the
    /// per-case thresholds.
    pub trace: Vec<DenoiseIterate>,
}

/// Like [`denoise`], but the removal and addition budgets apply to the sums
/// over all `(INC, SD)` cases while each case keeps its own threshold at the
/// shared percentile. With a single case this equals [`denoise`].
pub fn denoise_pooled(cases: &[(&BinMatrix, &DayMatrix<f64>)], params: DenoiseParams) -> Result<PooledLabels> {
    params.validate()?;
    for (inc, sd) in cases {
        check_shapes(inc, sd)?;
    }
    let reported: usize = cases.iter().map(|(inc, _)| inc.count()).sum();
    if reported == 0 {
        return Err(Error::NoReports);
    }
    let (n, passes, trace) = search(params, |n| {
        let mut passes = Vec::with_capacity(cases.len());
        for (inc, sd) in cases {
            let (theta_sd, asd) = abnormal_slowdown(sd, n)?;
            passes.push(label_pass(inc, asd, theta_sd, params.theta_t));
        }
        let it = pooled_iterate(n, &passes, reported);
        Ok((it, passes))
    })?;
    let last = pooled_iterate(n, &passes, reported);
    let bundles = cases
        .iter()
        .zip(passes)
        .map(|((inc, _), pass)| finish(inc, pass, n, params, trace.clone()))
        .collect();
    Ok(PooledLabels {
        bundles,
        n_final: n,
        removal: last.removal,
        addition: last.addition,
        trace,
    })
}

fn pooled_iterate(n: f64, passes: &[Pass], reported: usize) -> DenoiseIterate {
    let kept: usize = passes.iter().map(|p| p.sir.count()).sum();
    let added: usize = passes.iter().map(|p| p.add.count()).sum();
    DenoiseIterate {
        n,
        theta_sd: passes.iter().map(|p| p.theta_sd).sum::<f64>() / passes.len().max(1) as f64,
        removal: 1.0 - kept as f64 / reported as f64,
        addition: added as f64 / reported as f64,
    }
}

fn check_shapes(inc: &BinMatrix, sd: &DayMatrix<f64>) -> Result<()> {
    if inc.shape() != sd.shape() {
        return Err(Error::Shape(format!("INC {:?} vs SD {:?}", inc.shape(), sd.shape())));
    }
    Ok(())
}

/// The percentile walk shared by [`denoise`] and [`denoise_pooled`].
///
/// `eval` labels at a given `n` and reports the resulting fractions.
fn search<S>(
    params: DenoiseParams,
    mut eval: impl FnMut(f64) -> Result<(DenoiseIterate, S)>,
) -> Result<(f64, S, Vec<DenoiseIterate>)> {
    let n_at = |k: i64| params.n0 + k as f64 * params.alpha;
    let mut k: i64 = 0;
    let mut visited = BTreeSet::new();
    let mut trace: Vec<DenoiseIterate> = Vec::new();
    let mut overshoot: Vec<(i64, f64)> = Vec::new();
    loop {
        if trace.len() >= params.max_iters {
            return Err(Error::NoConvergence {
                iters: trace.len(),
                trace,
            });
        }
        let n = n_at(k);
        if !(n > 0.0 && n < 100.0) {
            return Err(Error::PercentileOutOfRange { trace });
        }
        visited.insert(k);
        let (it, state) = eval(n)?;
        trace.push(it);
        let removal_ok = it.removal <= params.theta1;
        let addition_ok = it.addition <= params.theta2;
        overshoot.push((
            k,
            (it.removal - params.theta1).max(0.0) + (it.addition - params.theta2).max(0.0),
        ));
        match (removal_ok, addition_ok) {
            (true, true) => return Ok((n, state, trace)),
            (false, true) => k += 1,
            (true, false) => k -= 1,
            (false, false) => {
                return Err(Error::UnreasonableThresholds {
                    n,
                    removal: it.removal,
                    addition: it.addition,
                })
            }
        }
        if visited.contains(&k) {
            let (best_k, _) = overshoot
                .iter()
                .copied()
                .fold(None, |best: Option<(i64, f64)>, cur| match best {
                    Some(b) if b.1 <= cur.1 => Some(b),
                    _ => Some(cur),
                })
                .expect("at least one iterate");
            let n = n_at(best_k);
            log::warn!("slowdown percentile search oscillates; accepting n={n}");
            let (_, state) = eval(n)?;
            return Ok((n, state, trace));
        }
    }
}

/// Extends each anomaly episode start `q` back over `[q - theta_ahead, q)`,
/// clamped at the row start.
pub fn ahead_label(ano: &BinMatrix, theta_ahead: usize) -> BinMatrix {
    let mut aan = ano.clone();
    for p in 0..ano.rows() {
        let starts: Vec<usize> = runs(ano.row(p)).map(|(q, _)| q).collect();
        let row = aan.row_mut(p);
        for q in starts {
            row[q.saturating_sub(theta_ahead)..q].fill(true);
        }
    }
    aan
}

/// Number of anomaly episodes (row-bounded runs).
pub fn episode_count(m: &BinMatrix) -> usize {
    (0..m.rows()).map(|p| runs(m.row(p)).count()).sum()
}
