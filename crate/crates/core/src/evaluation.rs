//! Alerts from horizon scores and the metrics computed on them.
//!
//! A decision is taken at the slot right after each window's last input
//! slot. It raises an alert when the smallest of its horizon scores reaches
//! the threshold. Consecutive alerts form an alarm event whose coverage runs
//! from its first decision slot through the last horizon step of its last
//! decision.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::ingest::format_timestamp;
use crate::thresholding::{tau_grid, Confusion};
use crate::windowing::Span;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Global slot at which the decision is made.
    pub slot: usize,
    pub scores: Vec<f64>,
    pub score_min: f64,
    pub alert: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmEvent {
    /// First and last alerting decision slots.
    pub first: usize,
    pub last: usize,
    pub coverage: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertStream {
    pub tau: f64,
    pub horizon: usize,
    pub decisions: Vec<Decision>,
    pub events: Vec<AlarmEvent>,
}

/// Builds alerts from `(anchor, horizon scores)` pairs.
///
/// Alerts on decisions more than `max_gap` slots apart belong to different
/// events, so events never bridge a night or a skipped window.
pub fn alert_stream(scored: &[(usize, Vec<f64>)], tau: f64, max_gap: usize) -> Result<AlertStream> {
    let horizon = scored.first().map_or(0, |(_, s)| s.len());
    let mut decisions: Vec<Decision> = Vec::with_capacity(scored.len());
    for (anchor, scores) in scored {
        if scores.len() != horizon || horizon == 0 {
            return Err(Error::Shape(format!("decision at anchor {anchor} has {} scores", scores.len())));
        }
        let score_min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        decisions.push(Decision {
            slot: anchor + 1,
            scores: scores.clone(),
            score_min,
            alert: score_min >= tau,
        });
    }
    decisions.sort_by_key(|d| d.slot);
    let mut events: Vec<AlarmEvent> = Vec::new();
    let mut prev_slot: Option<usize> = None;
    let mut prev_alert = false;
    for d in &decisions {
        if d.alert {
            let joins = prev_alert && prev_slot.is_some_and(|p| d.slot - p <= max_gap);
            match events.last_mut() {
                Some(e) if joins => {
                    e.last = d.slot;
                    e.coverage.end = d.slot + horizon - 1;
                }
                _ => events.push(AlarmEvent {
                    first: d.slot,
                    last: d.slot,
                    coverage: Span {
                        start: d.slot,
                        end: d.slot + horizon - 1,
                    },
                }),
            }
        }
        prev_alert = d.alert;
        prev_slot = Some(d.slot);
    }
    Ok(AlertStream {
        tau,
        horizon,
        decisions,
        events,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// One-based horizon step.
    pub step: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
}

impl StepMetrics {
    pub fn from_confusion(step: usize, c: Confusion) -> Self {
        Self {
            step,
            recall: c.recall(),
            precision: c.precision(),
            f1: c.f_beta(1.0),
            accuracy: c.accuracy(),
            confusion: c,
        }
    }
}

fn step_confusions(scores: &[f64], labels: &[bool], horizon: usize, tau: f64) -> Result<Vec<Confusion>> {
    if scores.len() != labels.len() || horizon == 0 || scores.len() % horizon != 0 {
        return Err(Error::Shape(format!(
            "{} scores, {} labels, horizon {horizon}",
            scores.len(),
            labels.len()
        )));
    }
    let mut out = vec![Confusion::default(); horizon];
    for (i, (&s, &y)) in scores.iter().zip(labels).enumerate() {
        out[i % horizon].add(s >= tau, y);
    }
    Ok(out)
}

/// Per-step metrics for row-major `samples x horizon` scores and labels.
pub fn step_metrics(scores: &[f64], labels: &[bool], horizon: usize, tau: f64) -> Result<Vec<StepMetrics>> {
    Ok(step_confusions(scores, labels, horizon, tau)?
        .into_iter()
        .enumerate()
        .map(|(k, c)| StepMetrics::from_confusion(k + 1, c))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrRow {
    pub tau: f64,
    pub step: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Step metrics at every grid threshold, `99 x horizon` rows.
pub fn pr_curve(scores: &[f64], labels: &[bool], horizon: usize) -> Result<Vec<PrRow>> {
    let mut rows = Vec::with_capacity(99 * horizon);
    for tau in tau_grid() {
        for m in step_metrics(scores, labels, horizon, tau)? {
            rows.push(PrRow {
                tau,
                step: m.step,
                recall: m.recall,
                precision: m.precision,
                f1: m.f1,
                accuracy: m.accuracy,
            });
        }
    }
    Ok(rows)
}

/// A report's rasterized slot span and whether denoising kept it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSpan {
    pub span: Span,
    pub significant: bool,
}

/// Raw counts behind the incident metrics; tallies of several segments can
/// be merged before rates are taken.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IncidentTally {
    pub reports: usize,
    pub significant: usize,
    /// `t_alarm - t_report` in slots for detected reports.
    pub leads: Vec<i64>,
    pub significant_leads: Vec<i64>,
    pub alarms: usize,
    pub alarms_on_reports: usize,
    pub alarms_on_anomalies_only: usize,
    pub false_alarms: usize,
}

impl IncidentTally {
    pub fn merge(&mut self, other: &IncidentTally) {
        self.reports += other.reports;
        self.significant += other.significant;
        self.leads.extend_from_slice(&other.leads);
        self.significant_leads.extend_from_slice(&other.significant_leads);
        self.alarms += other.alarms;
        self.alarms_on_reports += other.alarms_on_reports;
        self.alarms_on_anomalies_only += other.alarms_on_anomalies_only;
        self.false_alarms += other.false_alarms;
    }

    pub fn metrics(&self, step_minutes: u32) -> IncidentMetrics {
        let rate = |n: usize, d: usize| (d > 0).then(|| n as f64 / d as f64);
        let minutes = |v: &[i64]| (!v.is_empty()).then(|| v.iter().sum::<i64>() as f64 / v.len() as f64 * step_minutes as f64);
        IncidentMetrics {
            n_reports: self.reports,
            n_detected: self.leads.len(),
            dr: rate(self.leads.len(), self.reports),
            mttd_minutes: minutes(&self.leads),
            n_significant: self.significant,
            n_detected_significant: self.significant_leads.len(),
            dr_s: rate(self.significant_leads.len(), self.significant),
            mttd_s_minutes: minutes(&self.significant_leads),
            n_alarms: self.alarms,
            n_false_alarms: self.false_alarms,
            far: rate(self.false_alarms, self.alarms),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncidentMetrics {
    pub n_reports: usize,
    pub n_detected: usize,
    pub dr: Option<f64>,
    pub mttd_minutes: Option<f64>,
    pub n_significant: usize,
    pub n_detected_significant: usize,
    pub dr_s: Option<f64>,
    pub mttd_s_minutes: Option<f64>,
    pub n_alarms: usize,
    pub n_false_alarms: usize,
    pub far: Option<f64>,
}

/// Matches alarm events against reports and anomaly cells.
///
/// A report is detected when an event's coverage intersects its span; the
/// earliest such event gives `t_alarm`. An event is false when it meets
/// neither a report nor an anomaly cell (`anomaly[g]` for global slot `g`).
pub fn incident_tally(stream: &AlertStream, reports: &[ReportSpan], anomaly: &[bool]) -> IncidentTally {
    let mut tally = IncidentTally {
        reports: reports.len(),
        significant: reports.iter().filter(|r| r.significant).count(),
        alarms: stream.events.len(),
        ..Default::default()
    };
    for r in reports {
        let hit = stream.events.iter().find(|e| e.coverage.intersects(&r.span));
        if let Some(e) = hit {
            let lead = e.first as i64 - r.span.start as i64;
            tally.leads.push(lead);
            if r.significant {
                tally.significant_leads.push(lead);
            }
        }
    }
    for e in &stream.events {
        if reports.iter().any(|r| e.coverage.intersects(&r.span)) {
            tally.alarms_on_reports += 1;
        } else if (e.coverage.start..=e.coverage.end).any(|g| anomaly.get(g).copied().unwrap_or(false)) {
            tally.alarms_on_anomalies_only += 1;
        } else {
            tally.false_alarms += 1;
        }
    }
    tally
}

pub fn incident_metrics(stream: &AlertStream, reports: &[ReportSpan], anomaly: &[bool], step_minutes: u32) -> IncidentMetrics {
    incident_tally(stream, reports, anomaly).metrics(step_minutes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Alert threshold; `None` for reports pooled over several detectors.
    pub tau: Option<f64>,
    pub steps: Vec<StepMetrics>,
    pub incidents: IncidentMetrics,
}

impl EvalReport {
    /// `(metric, name, value)` rows; `None` marks an undefined value.
    pub fn rows(&self) -> Vec<(String, String, Option<f64>)> {
        let mut rows = vec![("threshold".into(), "tau".into(), self.tau)];
        for s in &self.steps {
            let m = format!("step_{}", s.step);
            for (name, v) in [
                ("recall", s.recall),
                ("precision", s.precision),
                ("f1", s.f1),
                ("accuracy", s.accuracy),
            ] {
                rows.push((m.clone(), name.into(), Some(v)));
            }
        }
        let i = &self.incidents;
        let count = |n: usize| Some(n as f64);
        for (name, v) in [
            ("DR", i.dr),
            ("MTTD_minutes", i.mttd_minutes),
            ("FAR", i.far),
            ("DR_S", i.dr_s),
            ("MTTD_S_minutes", i.mttd_s_minutes),
            ("N_reports", count(i.n_reports)),
            ("N_detected", count(i.n_detected)),
            ("N_significant", count(i.n_significant)),
            ("N_detected_significant", count(i.n_detected_significant)),
            ("N_alarms", count(i.n_alarms)),
            ("N_false_alarms", count(i.n_false_alarms)),
        ] {
            rows.push(("incident".into(), name.into(), v));
        }
        rows
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub fn write_eval_report(path: &Path, rows: &[(String, String, Option<f64>)]) -> Result<()> {
    let mut out = String::from("metric,name,value\n");
    for (metric, name, value) in rows {
        let v = value.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{metric},{name},{v}\n"));
    }
    write_text(path, &out)
}

pub fn write_alerts(path: &Path, grid: &TimeGrid, streams: &[(String, AlertStream)]) -> Result<()> {
    let mut out = String::from("segment_id,timestamp,score_min,alert\n");
    for (segment, stream) in streams {
        for d in &stream.decisions {
            out.push_str(&format!(
                "{segment},{},{},{}\n",
                format_timestamp(grid.timestamp(d.slot)),
                d.score_min,
                u8::from(d.alert)
            ));
        }
    }
    write_text(path, &out)
}

pub fn write_pr_curve(path: &Path, rows: &[PrRow]) -> Result<()> {
    let mut out = String::from("tau,step,recall,precision,f1,accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{:.2},{},{},{},{},{}\n",
            r.tau, r.step, r.recall, r.precision, r.f1, r.accuracy
        ));
    }
    write_text(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(flags: &[u8], start_anchor: usize, horizon: usize) -> AlertStream {
        let scored: Vec<(usize, Vec<f64>)> = flags
            .iter()
            .enumerate()
            .map(|(i, &f)| (start_anchor + i, vec![if f == 1 { 0.9 } else { 0.1 }; horizon]))
            .collect();
        alert_stream(&scored, 0.5, 1).unwrap()
    }

    #[test]
    fn min_of_horizons_rule() {
        let s = alert_stream(&[(10, vec![0.9, 0.8, 0.7, 0.6, 0.6, 0.6])], 0.56, 1).unwrap();
        assert!(s.decisions[0].alert);
        assert_eq!(s.decisions[0].slot, 11);
        let s = alert_stream(&[(10, vec![0.9, 0.8, 0.7, 0.5, 0.6, 0.6])], 0.56, 1).unwrap();
        assert!(!s.decisions[0].alert);
        assert!(s.events.is_empty());
    }

    #[test]
    fn runs_become_events_with_coverage() {
        let s = stream(&[0, 1, 1, 0, 1], 100, 6);
        assert_eq!(s.events.len(), 2);
        assert_eq!(s.events[0].first, 102);
        assert_eq!(s.events[0].last, 103);
        assert_eq!(s.events[0].coverage, Span { start: 102, end: 108 });
        assert_eq!(s.events[1].coverage, Span { start: 105, end: 110 });
    }

    #[test]
    fn gaps_split_events() {
        let scored = vec![(10, vec![0.9]), (11, vec![0.9]), (400, vec![0.9])];
        let s = alert_stream(&scored, 0.5, 1).unwrap();
        assert_eq!(s.events.len(), 2);
    }

    #[test]
    fn early_alarm_gives_negative_lead() {
        // Alarm from decision slot 100 (anchor 99); report starts at 102,
        // i.e. ten minutes later.
        let s = stream(&[1], 99, 6);
        let reports = [ReportSpan {
            span: Span { start: 102, end: 110 },
            significant: true,
        }];
        let m = incident_metrics(&s, &reports, &[], 5);
        assert_eq!(m.dr, Some(1.0));
        assert_eq!(m.mttd_minutes, Some(-10.0));
        assert_eq!(m.dr_s, Some(1.0));
        assert_eq!(m.far, Some(0.0));
    }

    #[test]
    fn alarm_after_report_is_not_detection() {
        let s = stream(&[1], 200, 6);
        let reports = [ReportSpan {
            span: Span { start: 100, end: 150 },
            significant: false,
        }];
        let m = incident_metrics(&s, &reports, &[], 5);
        assert_eq!(m.dr, Some(0.0));
        assert_eq!(m.mttd_minutes, None);
        assert_eq!(m.far, Some(1.0));
        assert_eq!(m.dr_s, None);
    }

    #[test]
    fn anomaly_overlap_is_not_false_alarm() {
        let s = stream(&[1, 0, 0, 0, 0, 0, 0, 0, 1], 10, 2);
        let mut anomaly = vec![false; 40];
        anomaly[12] = true;
        let t = incident_tally(&s, &[], &anomaly);
        assert_eq!(t.alarms, 2);
        assert_eq!(t.alarms_on_anomalies_only, 1);
        assert_eq!(t.false_alarms, 1);
        assert_eq!(t.metrics(5).far, Some(0.5));
        assert_eq!(t.metrics(5).dr, None);
    }

    #[test]
    fn no_events_means_undefined_far() {
        let s = stream(&[0, 0], 10, 3);
        assert_eq!(incident_metrics(&s, &[], &[], 5).far, None);
    }

    #[test]
    fn step_metrics_hand_count() {
        // Two horizon steps, four samples.
        let scores = [0.9, 0.2, 0.6, 0.7, 0.1, 0.8, 0.4, 0.3];
        let labels = [true, false, false, true, true, true, false, false];
        let m = step_metrics(&scores, &labels, 2, 0.5).unwrap();
        // Step 1: (0.9,T) tp, (0.6,F) fp, (0.1,T) fn, (0.4,F) tn.
        assert_eq!(m[0].confusion, Confusion { tp: 1, fp: 1, fn_: 1, tn: 1 });
        // Step 2: (0.2,F) tn, (0.7,T) tp, (0.8,T) tp, (0.3,F) tn.
        assert_eq!(m[1].confusion, Confusion { tp: 2, fp: 0, fn_: 0, tn: 2 });
        assert_eq!(m[1].f1, 1.0);
        assert_eq!(m[0].recall, 0.5);
    }

    #[test]
    fn pr_curve_shape_and_monotone_recall() {
        let scores: Vec<f64> = (0..60).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
        let labels: Vec<bool> = (0..60).map(|i| i % 4 == 0).collect();
        let rows = pr_curve(&scores, &labels, 3).unwrap();
        assert_eq!(rows.len(), 99 * 3);
        for k in 1..=3 {
            let r: Vec<f64> = rows.iter().filter(|r| r.step == k).map(|r| r.recall).collect();
            assert!(r.windows(2).all(|w| w[1] <= w[0]));
        }
        let all = step_metrics(&scores, &labels, 3, 0.0).unwrap();
        assert!(all.iter().all(|m| m.recall == 1.0));
    }
}
