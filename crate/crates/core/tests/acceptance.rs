//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so every line is printed. Pass criterion numbers
//! as arguments (`cargo test --test acceptance -- 1 7`) to run a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use traffic_anomaly::detector::{grad_check, wbce, DetectorParams};
use traffic_anomaly::error::Error;
use traffic_anomaly::evaluation::{alert_stream, incident_metrics, pr_curve, ReportSpan};
use traffic_anomaly::features::{FeatureFrame, SegmentChannels};
use traffic_anomaly::grid::{window_matrix, BinMatrix, DayMatrix, StudyWindow, TimeGrid};
use traffic_anomaly::labeling::{
    abnormal_slowdown, ahead_label, denoise, episode_count, label_with_threshold, prolonged_anomalies,
    significant_reports, DenoiseParams, LabelBundle,
};
use traffic_anomaly::pipeline::{
    read_json, read_labels_csv, EvalArtifact, LabelAudit, LabelMode, Pipeline, PipelineConfig, SegmentLabels, Stage,
    AUDIT_FILE, CHANNELS_FILE, LABELS_FILE,
};
use traffic_anomaly::synth::generate;
use traffic_anomaly::thresholding::{sweep, tau_grid};
use traffic_anomaly::windowing::{contamination_check, make_windows, split_days, Partition, Span, WindowConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, pass: String, fail: String) -> Outcome {
    if ok {
        Ok(pass)
    } else {
        Err(fail)
    }
}

fn bin(rows: &[&[u8]]) -> BinMatrix {
    BinMatrix::from_rows(rows.iter().map(|r| r.iter().map(|&b| b == 1).collect()).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Label denoising against a naive transcription.

mod naive {
    //! Straight loop-by-loop denoising, written without the library helpers.

    #[derive(Debug, PartialEq)]
    pub enum Outcome {
        Labels {
            n: f64,
            theta_sd: f64,
            asd: Vec<Vec<bool>>,
            sir: Vec<Vec<bool>>,
            psa: Vec<Vec<bool>>,
            add: Vec<Vec<bool>>,
            ano: Vec<Vec<bool>>,
        },
        NoReports,
        Degenerate,
        Unreasonable,
        NoConvergence(usize),
        OutOfRange,
    }

    pub struct Params {
        pub theta1: f64,
        pub theta2: f64,
        pub theta_t: usize,
        pub n0: f64,
        pub alpha: f64,
        pub max_iters: usize,
    }

    fn percentile(values: &[f64], q: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = q / 100.0 * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    }

    struct Iterate {
        theta_sd: f64,
        asd: Vec<Vec<bool>>,
        sir: Vec<Vec<bool>>,
        psa: Vec<Vec<bool>>,
        add: Vec<Vec<bool>>,
        rm: f64,
        ad: f64,
    }

    fn one_pass(inc: &[Vec<bool>], sd: &[Vec<f64>], n: f64, theta_t: usize) -> Option<Iterate> {
        let flat: Vec<f64> = sd.iter().flatten().copied().collect();
        let theta_sd = percentile(&flat, 100.0 - n);
        if theta_sd <= 0.0 {
            return None;
        }
        let rows = inc.len();
        let cols = inc[0].len();
        let mut asd = vec![vec![false; cols]; rows];
        for p in 0..rows {
            for q in 0..cols {
                asd[p][q] = sd[p][q] >= theta_sd;
            }
        }
        // Step 1: keep a report episode if it touches an abnormal cell.
        let mut sir = vec![vec![false; cols]; rows];
        for p in 0..rows {
            let mut q = 0;
            while q < cols {
                if inc[p][q] {
                    let s = q;
                    while q < cols && inc[p][q] {
                        q += 1;
                    }
                    let mut touched = false;
                    for c in s..q {
                        if asd[p][c] {
                            touched = true;
                        }
                    }
                    if touched {
                        for c in s..q {
                            sir[p][c] = true;
                        }
                    }
                } else {
                    q += 1;
                }
            }
        }
        // Step 2: abnormal runs of at least theta_t slots.
        let mut psa = vec![vec![false; cols]; rows];
        for p in 0..rows {
            let mut q = 0;
            while q < cols {
                if asd[p][q] {
                    let s = q;
                    while q < cols && asd[p][q] {
                        q += 1;
                    }
                    if q - s >= theta_t {
                        for c in s..q {
                            psa[p][c] = true;
                        }
                    }
                } else {
                    q += 1;
                }
            }
        }
        // Step 3: additions and the two fractions.
        let mut add = vec![vec![false; cols]; rows];
        let (mut n_inc, mut n_sir, mut n_add) = (0usize, 0usize, 0usize);
        for p in 0..rows {
            for q in 0..cols {
                add[p][q] = asd[p][q] && !sir[p][q] && psa[p][q];
                n_inc += inc[p][q] as usize;
                n_sir += sir[p][q] as usize;
                n_add += add[p][q] as usize;
            }
        }
        Some(Iterate {
            theta_sd,
            asd,
            sir,
            psa,
            add,
            rm: 1.0 - n_sir as f64 / n_inc as f64,
            ad: n_add as f64 / n_inc as f64,
        })
    }

    fn emit(n: f64, it: Iterate) -> Outcome {
        let ano = it
            .sir
            .iter()
            .zip(&it.add)
            .map(|(s, a)| s.iter().zip(a).map(|(&x, &y)| x || y).collect())
            .collect();
        Outcome::Labels {
            n,
            theta_sd: it.theta_sd,
            asd: it.asd,
            sir: it.sir,
            psa: it.psa,
            add: it.add,
            ano,
        }
    }

    pub fn denoise(inc: &[Vec<bool>], sd: &[Vec<f64>], p: &Params) -> Outcome {
        if !inc.iter().flatten().any(|&b| b) {
            return Outcome::NoReports;
        }
        let mut k: i64 = 0;
        let mut seen: Vec<i64> = Vec::new();
        let mut overshoots: Vec<(i64, f64)> = Vec::new();
        let mut iters = 0;
        loop {
            if iters >= p.max_iters {
                return Outcome::NoConvergence(iters);
            }
            let n = p.n0 + k as f64 * p.alpha;
            if n <= 0.0 || n >= 100.0 {
                return Outcome::OutOfRange;
            }
            seen.push(k);
            iters += 1;
            let Some(it) = one_pass(inc, sd, n, p.theta_t) else {
                return Outcome::Degenerate;
            };
            let over = (it.rm - p.theta1).max(0.0) + (it.ad - p.theta2).max(0.0);
            overshoots.push((k, over));
            let rm_bad = it.rm > p.theta1;
            let ad_bad = it.ad > p.theta2;
            if !rm_bad && !ad_bad {
                return emit(n, it);
            }
            if rm_bad && ad_bad {
                return Outcome::Unreasonable;
            }
            if rm_bad {
                k += 1;
            } else {
                k -= 1;
            }
            if seen.contains(&k) {
                let mut best = overshoots[0];
                for &o in &overshoots[1..] {
                    if o.1 < best.1 {
                        best = o;
                    }
                }
                let n = p.n0 + best.0 as f64 * p.alpha;
                return emit(n, one_pass(inc, sd, n, p.theta_t).unwrap());
            }
        }
    }
}

fn to_rows<T: Clone>(m: &DayMatrix<T>) -> Vec<Vec<T>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn random_case(rng: &mut ChaCha8Rng) -> (BinMatrix, DayMatrix<f64>) {
    let (rows, cols) = (20, 180);
    let mut inc = BinMatrix::zeros(rows, cols);
    let mut sd = DayMatrix::filled(rows, cols, 0.0);
    let background = rng.random_range(0.05..0.4);
    for p in 0..rows {
        for q in 0..cols {
            if rng.random_bool(background) {
                sd.set(p, q, rng.random_range(0.0..8.0));
            }
        }
        for _ in 0..rng.random_range(0..3) {
            let start = rng.random_range(0..cols - 1);
            let len = rng.random_range(1..12).min(cols - start);
            let severe = rng.random_bool(0.6);
            for q in start..start + len {
                inc.set(p, q, true);
                if severe {
                    sd.set(p, q, rng.random_range(5.0..25.0));
                }
            }
        }
        // Unreported slowdowns.
        if rng.random_bool(0.3) {
            let start = rng.random_range(0..cols - 1);
            let len = rng.random_range(1..10).min(cols - start);
            for q in start..start + len {
                sd.set(p, q, rng.random_range(8.0..25.0));
            }
        }
    }
    (inc, sd)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let started = Instant::now();
    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for case in 0..100 {
        let (inc, sd) = random_case(&mut rng);
        let params = DenoiseParams {
            theta1: rng.random_range(0.0..1.0),
            theta2: rng.random_range(0.0..1.0),
            theta_t: rng.random_range(1..5),
            n0: rng.random_range(2.0..12.0),
            alpha: [0.25, 0.5, 1.0][rng.random_range(0..3)],
            max_iters: rng.random_range(3..30),
        };
        let naive_params = naive::Params {
            theta1: params.theta1,
            theta2: params.theta2,
            theta_t: params.theta_t,
            n0: params.n0,
            alpha: params.alpha,
            max_iters: params.max_iters,
        };
        let expected = naive::denoise(&to_rows(&inc), &to_rows(&sd), &naive_params);
        let got = match denoise(&inc, &sd, params) {
            Ok(b) => naive::Outcome::Labels {
                n: b.n_final,
                theta_sd: b.theta_sd,
                asd: to_rows(&b.asd),
                sir: to_rows(&b.sir),
                psa: to_rows(&b.psa),
                add: to_rows(&b.add),
                ano: to_rows(&b.ano),
            },
            Err(Error::NoReports) => naive::Outcome::NoReports,
            Err(Error::DegenerateSlowdown { .. }) => naive::Outcome::Degenerate,
            Err(Error::UnreasonableThresholds { .. }) => naive::Outcome::Unreasonable,
            Err(Error::NoConvergence { iters, .. }) => naive::Outcome::NoConvergence(iters),
            Err(Error::PercentileOutOfRange { .. }) => naive::Outcome::OutOfRange,
            Err(e) => return Err(format!("case {case}: unexpected error {e}")),
        };
        if got != expected {
            return Err(format!("case {case}: module and naive transcription differ"));
        }
        let kind = match expected {
            naive::Outcome::Labels { .. } => "labeled",
            naive::Outcome::NoReports => "no_reports",
            naive::Outcome::Degenerate => "degenerate",
            naive::Outcome::Unreasonable => "unreasonable",
            naive::Outcome::NoConvergence(_) => "no_convergence",
            naive::Outcome::OutOfRange => "out_of_range",
        };
        *tally.entry(kind).or_default() += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    let labeled = tally.get("labeled").copied().unwrap_or(0);
    check(
        secs < 10.0 && labeled >= 50,
        format!("100/100 cases match cell-for-cell in {secs:.2}s; outcomes {tally:?}"),
        format!("took {secs:.2}s with outcomes {tally:?}"),
    )
}

// ---------------------------------------------------------------------------
// 2. Ahead labeling.

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..200 {
        let rows = rng.random_range(1..6);
        let cols = rng.random_range(1..60);
        let density = rng.random_range(0.0..0.6);
        let ano = BinMatrix::from_rows(
            (0..rows)
                .map(|_| (0..cols).map(|_| rng.random_bool(density)).collect())
                .collect(),
        )
        .unwrap();
        let theta = rng.random_range(0..8);
        let aan = ahead_label(&ano, theta);
        let superset = ano.as_slice().iter().zip(aan.as_slice()).all(|(&a, &b)| !a || b);
        let bound = aan.count() - ano.count() <= theta * episode_count(&ano);
        if !superset || !bound {
            return Err(format!("case {case}: superset {superset}, added-cell bound {bound}"));
        }
        if ahead_label(&ano, 0) != ano {
            return Err(format!("case {case}: theta_ahead 0 is not the identity"));
        }
    }
    let hand = [
        (bin(&[&[0, 0, 0, 0, 1, 1, 0, 0]]), 3, bin(&[&[0, 1, 1, 1, 1, 1, 0, 0]])),
        (bin(&[&[0, 1, 1, 0, 0, 0]]), 3, bin(&[&[1, 1, 1, 0, 0, 0]])),
        (
            bin(&[&[0, 0, 0, 0, 0, 1, 0, 0, 1, 1], &[1, 0, 0, 0, 0, 0, 0, 1, 0, 0]]),
            2,
            bin(&[&[0, 0, 0, 1, 1, 1, 1, 1, 1, 1], &[1, 0, 0, 0, 0, 1, 1, 1, 0, 0]]),
        ),
    ];
    for (i, (ano, theta, want)) in hand.iter().enumerate() {
        if ahead_label(ano, *theta) != *want {
            return Err(format!("hand trace {i} differs"));
        }
    }
    // Denoising hand traces that feed the ahead labels.
    let inc = bin(&[&[0, 0, 1, 1, 0, 0, 0, 0, 0, 0]]);
    let asd = bin(&[&[0, 0, 1, 0, 0, 0, 0, 0, 0, 0]]);
    if significant_reports(&inc, &asd) != bin(&[&[0, 0, 1, 1, 0, 0, 0, 0, 0, 0]]) {
        return Err("significant report hand trace differs".into());
    }
    if prolonged_anomalies(&bin(&[&[0, 1, 1, 1, 0]]), 3) != bin(&[&[0, 1, 1, 1, 0]]) {
        return Err("prolonged anomaly hand trace differs".into());
    }
    Ok("200 random matrices: AAN contains ANO, added cells within theta_ahead x episodes, theta_ahead 0 identity; 5 hand traces exact".into())
}

// ---------------------------------------------------------------------------
// 3. Split and window contamination.

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let first = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
    let mut total_samples = 0;
    for case in 0..50 {
        let n_days = rng.random_range(12..40);
        let grid = TimeGrid::new(first, n_days);
        let len = rng.random_range(20..288);
        let start = rng.random_range(0..=288 - len);
        let window = StudyWindow::new(start, start + len, rng.random_bool(0.3)).unwrap();
        let config = WindowConfig {
            lookback: rng.random_range(1..18),
            horizon: rng.random_range(1..10),
            stride: rng.random_range(1..4),
        };
        let n_slots = grid.n_slots();
        let frame = FeatureFrame::from_values("S", 1, (0..n_slots).map(|g| g as f64).collect(), vec![true; n_slots]).unwrap();
        let labels = BinMatrix::zeros(n_days, window.len());
        let split = split_days(n_days).unwrap();
        let mut spans: Vec<(Partition, Vec<Span>)> = Vec::new();
        for part in Partition::ALL {
            let set = make_windows(&frame, &grid, &labels, &window, &split, part, config).unwrap();
            total_samples += set.samples.len();
            spans.push((part, set.spans()));
        }
        for i in 0..spans.len() {
            for j in i + 1..spans.len() {
                let report = contamination_check(&spans[i].1, &spans[j].1);
                if !report.is_clean() {
                    return Err(format!(
                        "case {case}: {} violations between {} and {}",
                        report.violations.len(),
                        spans[i].0.name(),
                        spans[j].0.name()
                    ));
                }
            }
        }
    }
    // Deliberate misuse: window the continuous series first, then assign
    // each window to the partition of its anchor day.
    let n_days = 20;
    let grid = TimeGrid::new(first, n_days);
    let split = split_days(n_days).unwrap();
    let config = WindowConfig::default();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for anchor in config.lookback - 1..grid.n_slots() - config.horizon {
        let span = Span {
            start: anchor + 1 - config.lookback,
            end: anchor + config.horizon,
        };
        match split.partition_of(grid.day_slot(anchor).0) {
            Some(Partition::Train) => train.push(span),
            Some(Partition::Test) => test.push(span),
            _ => {}
        }
    }
    let leaked = contamination_check(&train, &test).violations.len();
    check(
        leaked >= 1,
        format!("50 random configs ({total_samples} samples) clean; window-then-split counterexample has {leaked} violations"),
        "window-then-split counterexample reported no violations".into(),
    )
}

// ---------------------------------------------------------------------------
// 4. Gradient check.

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = [0.0f64; 2];
    for draw in 0..10 {
        let lookback = rng.random_range(1..5);
        let width = rng.random_range(1..4);
        let hidden = rng.random_range(2..7);
        let horizon = rng.random_range(1..7);
        let params = DetectorParams::init(lookback * width, hidden, horizon, &mut rng);
        let input: Vec<f64> = (0..lookback * width).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target: Vec<f64> = (0..horizon).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
        let w_ano = rng.random_range(1.0..5.0);
        for (m, teacher) in [true, false].into_iter().enumerate() {
            let err = grad_check(&params, &input, &target, w_ano, teacher).map_err(|e| e.to_string())?;
            worst[m] = worst[m].max(err);
            if !(err < 1e-4) {
                return Err(format!("draw {draw}, teacher forcing {teacher}: relative error {err:.3e}"));
            }
        }
    }
    Ok(format!(
        "10 draws, max relative error {:.2e} teacher-forced, {:.2e} self-feed",
        worst[0], worst[1]
    ))
}

// ---------------------------------------------------------------------------
// 5. Weighted cross-entropy.

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..200);
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        let targets: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
        let plain = probs
            .iter()
            .zip(&targets)
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / n as f64;
        worst = worst.max((wbce(&probs, &targets, 1.0) - plain).abs());
    }
    let weighted = wbce(&[0.5], &[1.0], 2.0);
    check(
        worst <= 1e-12 && (weighted - 1.386294).abs() <= 1e-6,
        format!("w_ano=1 matches plain BCE within {worst:.1e}; w_ano=2,y=1,p=0.5 gives {weighted:.6}"),
        format!("plain BCE gap {worst:.1e}, weighted value {weighted}"),
    )
}

// ---------------------------------------------------------------------------
// 6. Threshold sweep against exhaustive search.

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut ties = 0;
    for case in 0..20 {
        let n = rng.random_range(5..400);
        let coarse = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = rng.random_range(0.0..1.0);
                if coarse {
                    (s * 10.0).round() / 10.0
                } else {
                    s
                }
            })
            .collect();
        let mut labels: Vec<bool> = scores.iter().map(|&s| rng.random_bool(0.2 + 0.6 * s)).collect();
        labels[0] = true;
        let beta = [0.5, 1.0, 2.0][case % 3];
        let (tau, f) = sweep(&scores, &labels, beta).map_err(|e| e.to_string())?;
        let mut best: Option<(f64, f64)> = None;
        let mut at_best = 0;
        for i in 1..=99 {
            let t = i as f64 / 100.0;
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for (&s, &y) in scores.iter().zip(&labels) {
                match (s >= t, y) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    _ => {}
                }
            }
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let b2 = beta * beta;
            let score = if b2 * p + r > 0.0 { (1.0 + b2) * p * r / (b2 * p + r) } else { 0.0 };
            match best {
                Some((_, bf)) if score < bf => {}
                Some((_, bf)) if score == bf => at_best += 1,
                _ => {
                    best = Some((t, score));
                    at_best = 1;
                }
            }
        }
        let (bt, bf) = best.unwrap();
        if at_best > 1 {
            ties += 1;
        }
        if tau != bt || f != bf {
            return Err(format!("case {case}: sweep ({tau}, {f}) vs exhaustive ({bt}, {bf})"));
        }
    }
    Ok(format!("20 random sets match exactly, {ties} with tied maxima resolved to the smallest threshold"))
}

// ---------------------------------------------------------------------------
// 7. Incident and step metrics.

fn scored(range: std::ops::Range<usize>, alerts: &[usize], horizon: usize) -> Vec<(usize, Vec<f64>)> {
    // Decision slot is anchor + 1.
    range
        .map(|slot| {
            let s = if alerts.contains(&slot) { 0.9 } else { 0.1 };
            (slot - 1, vec![s; horizon])
        })
        .collect()
}

fn criterion_7() -> Outcome {
    let approx = |a: Option<f64>, b: f64| a.is_some_and(|a| (a - b).abs() < 1e-12);

    // A single report with coverage starting two slots early.
    let stream = alert_stream(&scored(5..40, &[10, 11], 3), 0.5, 1).map_err(|e| e.to_string())?;
    let report = [ReportSpan {
        span: Span { start: 12, end: 15 },
        significant: true,
    }];
    let m = incident_metrics(&stream, &report, &[], 5);
    if !(approx(m.dr, 1.0) && approx(m.mttd_minutes, -10.0) && approx(m.far, 0.0)) {
        return Err(format!("early alarm case: {m:?}"));
    }

    // Mixed case: detected early, detected late, missed, an anomaly-only
    // alarm and a false alarm.
    let stream = alert_stream(&scored(5..60, &[10, 11, 34, 35, 40, 45], 3), 0.5, 1).map_err(|e| e.to_string())?;
    let reports = [
        ReportSpan {
            span: Span { start: 12, end: 15 },
            significant: true,
        },
        ReportSpan {
            span: Span { start: 30, end: 36 },
            significant: false,
        },
        ReportSpan {
            span: Span { start: 50, end: 52 },
            significant: true,
        },
    ];
    let mut anomaly = vec![false; 70];
    anomaly[41] = true;
    let m = incident_metrics(&stream, &reports, &anomaly, 5);
    let expected = stream.events.len() == 4
        && approx(m.dr, 2.0 / 3.0)
        && approx(m.mttd_minutes, 5.0)
        && approx(m.far, 0.25)
        && approx(m.dr_s, 0.5)
        && approx(m.mttd_s_minutes, -10.0);
    if !expected {
        return Err(format!("mixed case: {m:?}"));
    }

    // An alarm strictly after the report is not a detection.
    let stream = alert_stream(&scored(5..40, &[20], 3), 0.5, 1).map_err(|e| e.to_string())?;
    let m = incident_metrics(&stream, &report, &[], 5);
    if !(approx(m.dr, 0.0) && m.mttd_minutes.is_none() && approx(m.far, 1.0)) {
        return Err(format!("late alarm case: {m:?}"));
    }

    // The minimum over horizons decides.
    let s = alert_stream(&[(0, vec![0.9, 0.8, 0.7, 0.6, 0.6, 0.6])], 0.56, 1).map_err(|e| e.to_string())?;
    let t = alert_stream(&[(0, vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.6])], 0.56, 1).map_err(|e| e.to_string())?;
    if !(s.decisions[0].alert && !t.decisions[0].alert) {
        return Err("min-of-horizons rule".into());
    }

    // Recall never rises with the threshold.
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let horizon = 6;
    let scores: Vec<f64> = (0..600 * horizon).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<bool> = scores.iter().map(|&s| rng.random_bool(0.1 + 0.5 * s)).collect();
    let rows = pr_curve(&scores, &labels, horizon).map_err(|e| e.to_string())?;
    for k in 1..=horizon {
        let recalls: Vec<f64> = rows.iter().filter(|r| r.step == k).map(|r| r.recall).collect();
        if recalls.len() != tau_grid().count() || recalls.windows(2).any(|w| w[1] > w[0]) {
            return Err(format!("recall not monotone at step {k}"));
        }
    }
    Ok("hand traces reproduce DR, MTTD (incl. -10 min), FAR, DR(S), MTTD(S); recall non-increasing over the full grid".into())
}

// ---------------------------------------------------------------------------
// 8. End-to-end synthetic benchmark.

/// Values from the first run of the fixed-seed scenario.
struct Frozen {
    unreported_share: f64,
    aan_dr_s: f64,
    aan_far: f64,
    aan_mttd: f64,
    ano_mttd: f64,
}

const FROZEN: Frozen = Frozen {
    unreported_share: 1.0,
    aan_dr_s: 0.917,
    aan_far: 0.297,
    aan_mttd: 13.2,
    ano_mttd: 9.5,
};

const RATE_TOL: f64 = 0.05;
/// One slot, in minutes.
const MTTD_TOL: f64 = 5.0;

struct Benchmark {
    _dir: tempfile::TempDir,
    config: PipelineConfig,
    out: std::path::PathBuf,
}

fn run_benchmark() -> Result<(Benchmark, f64), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let config = PipelineConfig::default();
    let started = Instant::now();
    Pipeline::new(&config, &out)
        .and_then(|p| p.run_all())
        .map_err(|e| format!("aan run: {e}"))?;
    let ano = PipelineConfig {
        labels: LabelMode::Ano,
        ..config.clone()
    };
    let p = Pipeline::new(&ano, &out).map_err(|e| e.to_string())?;
    for stage in [Stage::Train, Stage::Tune, Stage::Evaluate] {
        p.run(stage).map_err(|e| format!("ano {}: {e}", stage.name()))?;
    }
    let secs = started.elapsed().as_secs_f64();
    Ok((
        Benchmark {
            _dir: dir,
            config,
            out,
        },
        secs,
    ))
}

fn read_labels(bench: &Benchmark) -> Result<(TimeGrid, StudyWindow, BTreeMap<String, SegmentLabels>), String> {
    let grid = bench.config.scenario.grid();
    let window = bench.config.study_window(&grid).map_err(|e| e.to_string())?;
    let labels = read_labels_csv(&bench.out.join("label").join(LABELS_FILE), &grid, &window).map_err(|e| e.to_string())?;
    Ok((grid, window, labels))
}

/// Share of unreported incidents on labeled segments with an ANO cell
/// between onset and clearance.
fn unreported_share(bench: &Benchmark) -> Result<(f64, usize), String> {
    let (grid, window, labels) = read_labels(bench)?;
    let truth = generate(&bench.config.resolved().scenario).map_err(|e| e.to_string())?.truth;
    let (mut hit, mut total) = (0, 0);
    for inc in truth.unreported() {
        let Some(l) = labels.get(&inc.segment_id) else { continue };
        let cells: Vec<(usize, usize)> = (grid.floor_slot(inc.start)..grid.ceil_slot(inc.end))
            .filter(|&g| g >= 0 && (g as usize) < grid.n_slots())
            .map(|g| grid.day_slot(g as usize))
            .filter(|&(_, q)| window.contains(q))
            .collect();
        if cells.is_empty() {
            continue;
        }
        total += 1;
        if cells.iter().any(|&(d, q)| *l.ano.get(d, q - window.start)) {
            hit += 1;
        }
    }
    if total == 0 {
        return Err("no unreported incidents in the study window".into());
    }
    Ok((hit as f64 / total as f64, total))
}

fn read_eval(bench: &Benchmark, mode: LabelMode) -> Result<EvalArtifact, String> {
    let config = PipelineConfig {
        labels: mode,
        ..bench.config.clone()
    };
    Pipeline::new(&config, &bench.out)
        .and_then(|p| p.read_eval())
        .map_err(|e| e.to_string())
}

fn criterion_8(bench: &Benchmark, secs: f64) -> Outcome {
    let (share, n_unreported) = unreported_share(bench)?;
    let aan = read_eval(bench, LabelMode::Aan)?.pooled.incidents;
    let ano = read_eval(bench, LabelMode::Ano)?.pooled.incidents;
    let (dr_s, far) = (aan.dr_s.unwrap_or(0.0), aan.far.unwrap_or(1.0));
    let (aan_mttd, ano_mttd) = (
        aan.mttd_minutes.unwrap_or(f64::INFINITY),
        ano.mttd_minutes.unwrap_or(f64::INFINITY),
    );
    let near = |v: f64, frozen: f64, tol: f64| (v - frozen).abs() <= tol;
    let checks = [
        ("(a) unreported incidents labeled >= 0.70", share >= 0.70),
        ("(b) DR(S) >= 0.8", dr_s >= 0.8),
        ("(b) FAR <= 0.3", far <= 0.3),
        ("(c) MTTD < 0", aan_mttd < 0.0),
        ("(c) MTTD with ahead labels <= without", aan_mttd <= ano_mttd),
        (
            "frozen regression values",
            near(share, FROZEN.unreported_share, RATE_TOL)
                && near(dr_s, FROZEN.aan_dr_s, RATE_TOL)
                && near(far, FROZEN.aan_far, RATE_TOL)
                && near(aan_mttd, FROZEN.aan_mttd, MTTD_TOL)
                && near(ano_mttd, FROZEN.ano_mttd, MTTD_TOL),
        ),
        ("runtime < 300 s", secs < 300.0),
    ];
    let detail = format!(
        "unreported labeled {share:.3} of {n_unreported}; with ahead labels DR {:.3} DR(S) {dr_s:.3} FAR {far:.3} MTTD {aan_mttd:+.1} min \
         ({} reports, {} alarms); without DR(S) {:.3} FAR {:.3} MTTD {ano_mttd:+.1} min; {secs:.0}s",
        aan.dr.unwrap_or(0.0),
        aan.n_reports,
        aan.n_alarms,
        ano.dr_s.unwrap_or(0.0),
        ano.far.unwrap_or(1.0),
    );
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    for (name, ok) in &checks {
        println!("    8 {name}: {}", if *ok { "pass" } else { "FAIL" });
    }
    if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failed: {}", failed.join(", ")))
    }
}

// ---------------------------------------------------------------------------
// 9. Sensitivity to the slowdown percentile.

fn ano_total(labels: &BTreeMap<String, SegmentLabels>) -> usize {
    labels.values().map(|l| l.ano.count()).sum()
}

fn criterion_9(bench: &Benchmark) -> Outcome {
    let (grid, window, labels) = read_labels(bench)?;
    let base: LabelAudit = read_json(&bench.out.join("label").join(AUDIT_FILE)).map_err(|e| e.to_string())?;
    let base_n = base.pooled.as_ref().map(|p| p.n_final).ok_or("no pooled calibration")?;

    // Rerun labeling with n0 raised by 2 on a copy of the upstream stages.
    let rerun = tempfile::tempdir().map_err(|e| e.to_string())?;
    for stage in ["ingest", "featurize"] {
        copy_dir(&bench.out.join(stage), &rerun.path().join(stage)).map_err(|e| e.to_string())?;
    }
    let mut loose = bench.config.clone();
    loose.labeling.denoise.n0 += 2.0;
    Pipeline::new(&loose, rerun.path())
        .and_then(|p| p.run(Stage::Label))
        .map_err(|e| format!("rerun: {e}"))?;
    let rerun_labels =
        read_labels_csv(&rerun.path().join("label").join(LABELS_FILE), &grid, &window).map_err(|e| e.to_string())?;
    let rerun_audit: LabelAudit = read_json(&rerun.path().join("label").join(AUDIT_FILE)).map_err(|e| e.to_string())?;
    let rerun_n = rerun_audit.pooled.as_ref().map(|p| p.n_final).ok_or("no pooled calibration")?;

    // Apply the calibrated percentile and the same percentile loosened by
    // 2 to every labeled segment.
    let channels: Vec<SegmentChannels> =
        read_json(&bench.out.join("featurize").join(CHANNELS_FILE)).map_err(|e| e.to_string())?;
    let split = split_days(grid.n_days).map_err(|e| e.to_string())?;
    let train_days = split.study_days(&grid, &window, Partition::Train);
    let params = bench.config.labeling.denoise;
    let (mut asd_at, mut ano_at) = ([0usize; 2], [0usize; 2]);
    for ch in &channels {
        let (Some(sd), Some(l)) = (&ch.sd, labels.get(&ch.segment_id)) else { continue };
        let sd = window_matrix(&grid, sd, &window);
        let sd_train = sd.select_rows(&train_days);
        for (k, n) in [base_n, base_n + 2.0].into_iter().enumerate() {
            let (theta, asd) = abnormal_slowdown(&sd_train, n).map_err(|e| e.to_string())?;
            asd_at[k] += asd.count();
            let bundle: LabelBundle = label_with_threshold(&l.inc, &sd, theta, params).map_err(|e| e.to_string())?;
            ano_at[k] += bundle.ano.count();
        }
    }
    let stage_base = ano_total(&labels);
    let detail = format!(
        "calibrated n {base_n} -> {rerun_n} after raising n0 by 2 (ANO cells {stage_base} -> {}); applied percentile {base_n} -> {}: \
         ASD cells {} -> {}, ANO cells {} -> {}",
        ano_total(&rerun_labels),
        base_n + 2.0,
        asd_at[0],
        asd_at[1],
        ano_at[0],
        ano_at[1],
    );
    let ok = ano_at[0] == stage_base
        && asd_at[1] > asd_at[0]
        && ano_at[1] > ano_at[0]
        && ano_total(&rerun_labels) >= stage_base
        && (rerun_n > base_n) == (ano_total(&rerun_labels) > stage_base);
    check(ok, detail.clone(), detail)
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            std::fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let unit: [(u32, &str, fn() -> Outcome); 7] = [
        (1, "label denoising oracle", criterion_1),
        (2, "ahead labeling", criterion_2),
        (3, "contamination", criterion_3),
        (4, "gradient check", criterion_4),
        (5, "weighted cross-entropy", criterion_5),
        (6, "threshold sweep", criterion_6),
        (7, "metrics", criterion_7),
    ];
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    for (n, name, f) in unit {
        if selected(n) {
            results.push((n, name, guarded(f)));
            print_result(results.last().unwrap());
        }
    }
    if selected(8) || selected(9) {
        let bench = catch_unwind(run_benchmark).unwrap_or_else(|_| Err("benchmark run panicked".into()));
        match bench {
            Ok((bench, secs)) => {
                if selected(8) {
                    results.push((8, "end-to-end benchmark", guarded(|| criterion_8(&bench, secs))));
                    print_result(results.last().unwrap());
                }
                if selected(9) {
                    results.push((9, "percentile sensitivity", guarded(|| criterion_9(&bench))));
                    print_result(results.last().unwrap());
                }
            }
            Err(e) => {
                for (n, name) in [(8, "end-to-end benchmark"), (9, "percentile sensitivity")] {
                    if selected(n) {
                        results.push((n, name, Err(e.clone())));
                        print_result(results.last().unwrap());
                    }
                }
            }
        }
    }
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn print_result((n, name, outcome): &(u32, &str, Outcome)) {
    match outcome {
        Ok(detail) => println!("criterion {n} ({name}): PASS - {detail}"),
        Err(detail) => println!("criterion {n} ({name}): FAIL - {detail}"),
    }
}
