//! Stage-by-stage pipeline over an on-disk artifact tree.
//!
//! Every stage reads the artifacts of earlier stages from the output
//! directory, writes its own into a directory named after it, and records a
//! manifest with content hashes. Model stages (`train` onward) are suffixed
//! with the label mode, so both label arms share the data stages.

mod artifacts;
mod config;
mod manifest;

pub use artifacts::*;
pub use config::*;
pub use manifest::*;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::detector::{read_checkpoint, train, write_checkpoint, DetectorParams};
use crate::error::{Error, Result};
use crate::evaluation::{
    alert_stream, incident_tally, pr_curve, step_metrics, write_alerts, write_eval_report, write_pr_curve, AlertStream,
    EvalReport, IncidentTally, ReportSpan, StepMetrics,
};
use crate::features::{assemble, segment_channels, write_features_csv, FeatureFrame, SegmentChannels};
use crate::error::DenoiseIterate;
use crate::grid::{window_matrix, BinMatrix, DayMatrix, StudyWindow, TimeGrid};
use crate::ingest::{load_study, rasterize_reports, IngestConfig, IngestedStudy, InputPaths};
use crate::labeling::{abnormal_slowdown, denoise, denoise_pooled, label_with_threshold, runs};
use crate::synth::{generate, write_ground_truth};
use crate::thresholding::{select_pooled, write_selection_trace, Confusion, SelectionCase};
use crate::windowing::{contamination_check, make_windows, split_days, Partition, Span, SplitSpec, WindowSample, WindowSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Ingest,
    Featurize,
    Label,
    Split,
    Train,
    Tune,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Simulate,
        Stage::Ingest,
        Stage::Featurize,
        Stage::Label,
        Stage::Split,
        Stage::Train,
        Stage::Tune,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Ingest => "ingest",
            Stage::Featurize => "featurize",
            Stage::Label => "label",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Tune => "tune",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Whether the stage depends on the label mode.
    pub fn is_model_stage(self) -> bool {
        matches!(self, Stage::Train | Stage::Tune | Stage::Evaluate | Stage::Report)
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

pub const STUDY_FILE: &str = "study.json";
pub const CHANNELS_FILE: &str = "channels.json";
pub const LABELS_FILE: &str = "labels.csv";
pub const AUDIT_FILE: &str = "audit.json";
pub const SPLIT_FILE: &str = "split.json";
pub const CONTAMINATION_FILE: &str = "contamination.json";
pub const TRAIN_SUMMARY_FILE: &str = "summary.json";
pub const SELECTION_FILE: &str = "selection.json";
pub const EVAL_FILE: &str = "eval.json";

/// Slowdown threshold of one segment and how it was found.
struct Calibrated {
    calibration: &'static str,
    n_final: f64,
    theta_sd: f64,
    removal: f64,
    addition: f64,
    trace: Vec<DenoiseIterate>,
}

/// Everything the modeling stages need, reloaded from artifacts.
struct Data {
    grid: TimeGrid,
    window: StudyWindow,
    split: SplitSpec,
    study: IngestedStudy,
    channels: Vec<SegmentChannels>,
    labels: BTreeMap<String, SegmentLabels>,
    inputs: Vec<PathBuf>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(config: &PipelineConfig, out: &Path) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        Ok(Self {
            config,
            out: out.to_path_buf(),
        })
    }

    pub fn mode(&self) -> LabelMode {
        self.config.labels
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        if stage.is_model_stage() {
            self.out.join(format!("{}-{}", stage.name(), self.mode().name()))
        } else {
            self.out.join(stage.name())
        }
    }

    /// Path of an artifact that an earlier stage must have produced.
    pub fn require(&self, stage: Stage, file: &str) -> Result<PathBuf> {
        let path = self.stage_dir(stage).join(file);
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact {
                stage: stage.name(),
                path,
            })
        }
    }

    /// Directory holding the five input CSVs.
    pub fn inputs_dir(&self) -> PathBuf {
        match &self.config.inputs {
            Some(dir) => dir.clone(),
            None => self.stage_dir(Stage::Simulate).join("inputs"),
        }
    }

    fn fresh_dir(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn finish(&self, stage: Stage, dir: &Path, inputs: &[PathBuf]) -> Result<()> {
        let config = serde_json::to_value(&self.config)?;
        write_manifest(&self.out, stage.name(), dir, inputs, config)?;
        log::info!("{} done", stage.name());
        Ok(())
    }

    /// Runs one stage.
    pub fn run(&self, stage: Stage) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let echo = self.out.join("config.toml");
        write_text(&echo, &self.config.to_toml_string()?)?;
        log::info!("running {}", stage.name());
        match stage {
            Stage::Simulate => self.simulate(),
            Stage::Ingest => self.ingest(),
            Stage::Featurize => self.featurize(),
            Stage::Label => self.label(),
            Stage::Split => self.split(),
            Stage::Train => self.train(),
            Stage::Tune => self.tune(),
            Stage::Evaluate => self.evaluate(),
            Stage::Report => self.report(),
        }
    }

    /// Runs every stage in order; `simulate` is skipped when input CSVs
    /// are configured.
    pub fn run_all(&self) -> Result<()> {
        for stage in Stage::ALL {
            if stage == Stage::Simulate && self.config.inputs.is_some() {
                continue;
            }
            self.run(stage)?;
        }
        Ok(())
    }

    fn simulate(&self) -> Result<()> {
        let dir = self.fresh_dir(Stage::Simulate)?;
        let scenario = generate(&self.config.scenario)?;
        scenario.raw.write_csvs(&dir.join("inputs"))?;
        write_ground_truth(&dir.join("ground_truth.csv"), &scenario.truth)?;
        write_json(&dir.join("scenario.json"), &self.config.scenario)?;
        self.finish(Stage::Simulate, &dir, &[])
    }

    fn input_paths(&self) -> Result<InputPaths> {
        let paths = InputPaths::in_dir(&self.inputs_dir());
        for p in paths.all() {
            if !p.is_file() {
                return Err(Error::MissingArtifact {
                    stage: Stage::Simulate.name(),
                    path: p.to_path_buf(),
                });
            }
        }
        Ok(paths)
    }

    fn ingest(&self) -> Result<()> {
        let paths = self.input_paths()?;
        let raw = load_study(&paths)?;
        let split = split_days(raw.grid.n_days)?;
        let study = raw.impute(&IngestConfig {
            report_kinds: self.config.ingest.report_kinds.clone(),
            train_days: split.train.len(),
        })?;
        let dir = self.fresh_dir(Stage::Ingest)?;
        write_json(&dir.join(STUDY_FILE), &study)?;
        let inputs: Vec<PathBuf> = paths.all().iter().map(|p| p.to_path_buf()).collect();
        self.finish(Stage::Ingest, &dir, &inputs)
    }

    fn load_study(&self) -> Result<(PathBuf, IngestedStudy)> {
        let path = self.require(Stage::Ingest, STUDY_FILE)?;
        let study = read_json(&path)?;
        Ok((path, study))
    }

    fn featurize(&self) -> Result<()> {
        let (study_path, study) = self.load_study()?;
        let mut inc = BTreeMap::new();
        for s in &study.segments {
            let r = rasterize_reports(&study.reports, &study.grid, &s.segment_id);
            for w in &r.warnings {
                log::warn!("{w}");
            }
            inc.insert(s.segment_id.clone(), r.inc.as_slice().to_vec());
        }
        let channels = segment_channels(&study, &inc, self.config.features.upstream_miles)?;
        let dir = self.fresh_dir(Stage::Featurize)?;
        write_json(&dir.join(CHANNELS_FILE), &channels)?;
        if self.config.features.long_csv {
            write_features_csv(&dir.join("features.csv"), &study.grid, &channels)?;
        }
        self.finish(Stage::Featurize, &dir, &[study_path])
    }

    fn load_channels(&self) -> Result<(PathBuf, Vec<SegmentChannels>)> {
        let path = self.require(Stage::Featurize, CHANNELS_FILE)?;
        let channels = read_json(&path)?;
        Ok((path, channels))
    }

    /// Targets: segments with an upstream neighborhood, or the one requested.
    fn targets<'a>(&self, channels: &'a [SegmentChannels]) -> Result<Vec<&'a SegmentChannels>> {
        let miles = self.config.features.upstream_miles;
        match &self.config.segment {
            Some(id) => {
                let ch = channels
                    .iter()
                    .find(|c| &c.segment_id == id)
                    .ok_or_else(|| Error::UnknownSegment(id.clone()))?;
                ch.sd_or_err(miles)?;
                Ok(vec![ch])
            }
            None => {
                for c in channels.iter().filter(|c| c.sd.is_none()) {
                    log::info!("{} has no upstream segment within {miles} mi; not a target", c.segment_id);
                }
                Ok(channels.iter().filter(|c| c.sd.is_some()).collect())
            }
        }
    }

    fn label(&self) -> Result<()> {
        let (study_path, study) = self.load_study()?;
        let (channels_path, channels) = self.load_channels()?;
        let grid = study.grid;
        let window = self.config.study_window(&grid)?;
        let split = split_days(grid.n_days)?;
        let train_days = split.study_days(&grid, &window, Partition::Train);
        let params = self.config.labeling.denoise;
        let miles = self.config.features.upstream_miles;
        self.targets(&channels)?;
        // Every segment with a slowdown signal is labeled so that corridor
        // calibration does not depend on `--segment`.
        let mut full = Vec::new();
        for ch in channels.iter().filter(|c| c.sd.is_some()) {
            let inc = window_matrix(&grid, rasterize_reports(&study.reports, &grid, &ch.segment_id).inc.as_slice(), &window);
            let sd = window_matrix(&grid, ch.sd_or_err(miles)?, &window);
            full.push((ch.segment_id.clone(), inc, sd));
        }
        let train: Vec<(BinMatrix, DayMatrix<f64>)> = full
            .iter()
            .map(|(_, inc, sd)| (inc.select_rows(&train_days), sd.select_rows(&train_days)))
            .collect();

        let mut calibrated: Vec<Calibrated> = Vec::new();
        let mut pooled_audit = None;
        let initial = |sd: &DayMatrix<f64>| -> Result<Calibrated> {
            Ok(Calibrated {
                calibration: "initial_percentile",
                n_final: params.n0,
                theta_sd: abnormal_slowdown(sd, params.n0)?.0,
                removal: 0.0,
                addition: 0.0,
                trace: Vec::new(),
            })
        };
        match self.config.labeling.calibration {
            Calibration::Corridor => {
                let cases: Vec<(&BinMatrix, &DayMatrix<f64>)> = train.iter().map(|(i, s)| (i, s)).collect();
                match denoise_pooled(&cases, params) {
                    Ok(p) => {
                        for b in &p.bundles {
                            calibrated.push(Calibrated {
                                calibration: "corridor",
                                n_final: p.n_final,
                                theta_sd: b.theta_sd,
                                removal: b.removal,
                                addition: b.addition,
                                trace: Vec::new(),
                            });
                        }
                        pooled_audit = Some(PooledAudit {
                            n_final: p.n_final,
                            removal: p.removal,
                            addition: p.addition,
                            trace: p.trace,
                        });
                    }
                    Err(Error::NoReports) => {
                        log::warn!("no reports on training days; using the initial percentile");
                        for (_, sd) in &train {
                            calibrated.push(initial(sd)?);
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
            Calibration::Segment => {
                for ((seg, _, _), (inc, sd)) in full.iter().zip(&train) {
                    calibrated.push(match denoise(inc, sd, params) {
                        Ok(b) => Calibrated {
                            calibration: "segment",
                            n_final: b.n_final,
                            theta_sd: b.theta_sd,
                            removal: b.removal,
                            addition: b.addition,
                            trace: b.trace,
                        },
                        Err(Error::NoReports) => {
                            log::warn!("{seg}: no reports on training days; using the initial percentile");
                            initial(sd)?
                        }
                        Err(e) => return Err(Error::Config(format!("{seg}: {e}"))),
                    });
                }
            }
        }

        let mut labels = BTreeMap::new();
        let mut segments = BTreeMap::new();
        for ((seg, inc, sd), c) in full.iter().zip(calibrated) {
            let bundle = label_with_threshold(inc, sd, c.theta_sd, params)?.with_ahead_labels(self.config.labeling.theta_ahead);
            log::info!("{seg}: n={} theta_sd={:.3} ANO cells {}", c.n_final, c.theta_sd, bundle.ano.count());
            segments.insert(
                seg.clone(),
                SegmentAudit {
                    calibration: c.calibration.into(),
                    n_final: c.n_final,
                    theta_sd: c.theta_sd,
                    removal_train: c.removal,
                    addition_train: c.addition,
                    trace: c.trace,
                    removal_all: bundle.removal,
                    addition_all: bundle.addition,
                    counts: LabelCounts {
                        inc: bundle.inc.count(),
                        asd: bundle.asd.count(),
                        sir: bundle.sir.count(),
                        add: bundle.add.count(),
                        ano: bundle.ano.count(),
                        aan: bundle.aan.count(),
                    },
                },
            );
            labels.insert(
                seg.clone(),
                SegmentLabels {
                    inc: bundle.inc,
                    sir: bundle.sir,
                    ano: bundle.ano,
                    aan: bundle.aan,
                },
            );
        }
        let audit = LabelAudit {
            calibration: self.config.labeling.calibration,
            pooled: pooled_audit,
            segments,
        };
        let dir = self.fresh_dir(Stage::Label)?;
        write_labels_csv(&dir.join(LABELS_FILE), &grid, &window, &labels)?;
        write_json(&dir.join(AUDIT_FILE), &audit)?;
        self.finish(Stage::Label, &dir, &[study_path, channels_path])
    }

    fn load_data(&self) -> Result<Data> {
        let (study_path, study) = self.load_study()?;
        let (channels_path, channels) = self.load_channels()?;
        let labels_path = self.require(Stage::Label, LABELS_FILE)?;
        let grid = study.grid;
        let window = self.config.study_window(&grid)?;
        let mut labels = read_labels_csv(&labels_path, &grid, &window)?;
        if let Some(id) = &self.config.segment {
            labels.retain(|k, _| k == id);
            if labels.is_empty() {
                return Err(Error::UnknownSegment(format!("{id} (not labeled; rerun `label`)")));
            }
        }
        Ok(Data {
            grid,
            window,
            split: split_days(grid.n_days)?,
            study,
            channels,
            labels,
            inputs: vec![study_path, channels_path, labels_path],
        })
    }

    fn frame(&self, data: &Data, target: &str) -> Result<FeatureFrame> {
        let stat_days = data.split.study_days(&data.grid, &data.window, Partition::Train);
        let mut frame = assemble(
            &data.grid,
            &data.study.graph,
            &data.channels,
            &data.study.weather,
            target,
            self.config.features.hops_up,
            self.config.features.hops_down,
            &stat_days,
            &data.window,
        )?;
        frame.exclude_channels(&self.config.features.exclude)?;
        Ok(frame)
    }

    fn windows<'a>(&self, data: &Data, frame: &'a FeatureFrame, labels: &BinMatrix, partition: Partition) -> Result<WindowSet<'a>> {
        make_windows(frame, &data.grid, labels, &data.window, &data.split, partition, self.config.window)
    }

    fn split(&self) -> Result<()> {
        let data = self.load_data()?;
        let mut targets = BTreeMap::new();
        let mut spans: BTreeMap<Partition, Vec<Span>> = BTreeMap::new();
        for (seg, l) in &data.labels {
            let frame = self.frame(&data, seg)?;
            let mut counts = BTreeMap::new();
            for p in Partition::ALL {
                let ano = self.windows(&data, &frame, &l.ano, p)?;
                let aan = self.windows(&data, &frame, &l.aan, p)?;
                spans.entry(p).or_default().extend(ano.spans());
                counts.insert(
                    p.name().to_string(),
                    PartitionCounts {
                        samples: ano.samples.len(),
                        skipped_unavailable: ano.skipped_unavailable,
                        positive_steps_ano: ano.positive_steps(),
                        positive_steps_aan: aan.positive_steps(),
                    },
                );
            }
            targets.insert(seg.clone(), counts);
        }
        let mut pairs = Vec::new();
        for (i, a) in Partition::ALL.iter().enumerate() {
            for b in &Partition::ALL[i + 1..] {
                let empty = Vec::new();
                let report = contamination_check(spans.get(a).unwrap_or(&empty), spans.get(b).unwrap_or(&empty));
                pairs.push(ContaminationPair {
                    a: a.name().into(),
                    b: b.name().into(),
                    violations: report.violations.len(),
                });
            }
        }
        let total_violations = pairs.iter().map(|p| p.violations).sum();
        if total_violations > 0 {
            log::error!("{total_violations} window spans shared across partitions");
        }
        let dir = self.fresh_dir(Stage::Split)?;
        write_json(
            &dir.join(SPLIT_FILE),
            &SplitArtifact {
                split: data.split.clone(),
                study: data.window,
                window: self.config.window,
                targets,
            },
        )?;
        write_json(&dir.join(CONTAMINATION_FILE), &ContaminationArtifact { pairs, total_violations })?;
        self.finish(Stage::Split, &dir, &data.inputs)
    }

    fn train(&self) -> Result<()> {
        let split_path = self.require(Stage::Split, SPLIT_FILE)?;
        let data = self.load_data()?;
        let mode = self.mode();
        let dir = self.fresh_dir(Stage::Train)?;
        let mut summary = TrainSummary {
            labels: mode,
            targets: BTreeMap::new(),
        };
        for (seg, l) in &data.labels {
            let frame = self.frame(&data, seg)?;
            let set = self.windows(&data, &frame, l.for_mode(mode), Partition::Train)?;
            log::info!("{seg}: training on {} samples", set.samples.len());
            let outcome = train(&set.samples, &self.config.train).map_err(|e| match e {
                Error::NoPositives => Error::Config(format!("{seg}: no positive {} labels on training days", mode.name())),
                e => e,
            })?;
            let seg_dir = dir.join(seg);
            std::fs::create_dir_all(&seg_dir).map_err(|e| Error::io(&seg_dir, e))?;
            let echo = serde_json::json!({
                "segment": seg,
                "labels": mode,
                "train": self.config.train,
                "w_ano": outcome.w_ano,
            });
            for (e, params) in outcome.snapshots.iter().enumerate() {
                write_checkpoint(&seg_dir.join(epoch_file(e + 1)), params, self.config.train.seed, echo.clone())?;
            }
            let mut log_csv = String::from("epoch,loss\n");
            for (e, l) in outcome.epoch_losses.iter().enumerate() {
                log_csv.push_str(&format!("{},{l}\n", e + 1));
            }
            write_text(&seg_dir.join("train_log.csv"), &log_csv)?;
            summary.targets.insert(
                seg.clone(),
                TrainedTarget {
                    input_dim: frame.width() * self.config.window.lookback,
                    w_ano: outcome.w_ano,
                    samples: set.samples.len(),
                    positive_steps: set.positive_steps(),
                    epochs: outcome.snapshots.len(),
                    epoch_losses: outcome.epoch_losses,
                },
            );
        }
        write_json(&dir.join(TRAIN_SUMMARY_FILE), &summary)?;
        let mut inputs = data.inputs;
        inputs.push(split_path);
        self.finish(Stage::Train, &dir, &inputs)
    }

    fn tune(&self) -> Result<()> {
        let summary_path = self.require(Stage::Train, TRAIN_SUMMARY_FILE)?;
        let summary: TrainSummary = read_json(&summary_path)?;
        let data = self.load_data()?;
        let mode = self.mode();
        let beta = self.config.threshold.beta;
        let train_dir = self.stage_dir(Stage::Train);
        let mut inputs = data.inputs.clone();
        inputs.push(summary_path);

        let segs: Vec<&String> = data.labels.keys().collect();
        let mut snapshots = Vec::with_capacity(segs.len());
        let mut frames = Vec::with_capacity(segs.len());
        for seg in &segs {
            let trained = summary.targets.get(*seg).ok_or_else(|| Error::MissingArtifact {
                stage: Stage::Train.name(),
                path: train_dir.join(seg),
            })?;
            let mut snaps = Vec::with_capacity(trained.epochs);
            for e in 1..=trained.epochs {
                let path = self.require(Stage::Train, &format!("{seg}/{}", epoch_file(e)))?;
                snaps.push(read_checkpoint(&path)?.1);
                inputs.push(path);
            }
            snapshots.push(snaps);
            frames.push(self.frame(&data, seg)?);
        }
        let mut sets = Vec::with_capacity(segs.len());
        for (seg, frame) in segs.iter().zip(&frames) {
            let labels = data.labels[*seg].for_mode(mode);
            let set = |p| self.windows(&data, frame, labels, p).map(|w| w.samples);
            sets.push((set(Partition::Tune)?, set(Partition::Validation)?, set(Partition::Train)?));
        }

        // Each group shares one selection: all targets, or one per target.
        let groups: Vec<Vec<usize>> = match self.config.threshold.selection {
            Selection::Corridor => vec![(0..segs.len()).collect()],
            Selection::Segment => (0..segs.len()).map(|i| vec![i]).collect(),
        };
        let mut chosen = vec![None; segs.len()];
        for group in groups {
            let case = |i: usize, tune, val| SelectionCase {
                snapshots: &snapshots[i],
                tune,
                val,
            };
            let tune_pos = group.iter().any(|&i| has_positive(&sets[i].0));
            let val_pos = group.iter().any(|&i| has_positive(&sets[i].1));
            let unions: Vec<Vec<WindowSample>> = group
                .iter()
                .map(|&i| sets[i].0.iter().chain(&sets[i].1).cloned().collect())
                .collect();
            let (cases, fallback): (Vec<SelectionCase>, Option<&str>) = if tune_pos && val_pos {
                (group.iter().map(|&i| case(i, &sets[i].0, &sets[i].1)).collect(), None)
            } else if tune_pos || val_pos {
                (
                    group.iter().zip(&unions).map(|(&i, u)| case(i, u, u)).collect(),
                    Some("tuning or validation days lack positives; used their union for both"),
                )
            } else {
                (
                    group.iter().map(|&i| case(i, &sets[i].2, &sets[i].2)).collect(),
                    Some("tuning and validation days lack positives; used training days"),
                )
            };
            let (best, trace) = select_pooled(&cases, beta)?;
            let names: Vec<&str> = group.iter().map(|&i| segs[i].as_str()).collect();
            if let Some(f) = fallback {
                log::warn!("{}: {f}", names.join(","));
            }
            log::info!("{}: epoch {} tau {:.2}", names.join(","), best + 1, trace[best].tau);
            for &i in &group {
                chosen[i] = Some((best, trace.clone(), fallback.map(String::from)));
            }
        }

        let dir = self.fresh_dir(Stage::Tune)?;
        let mut selection = SelectionArtifact {
            labels: mode,
            beta,
            selection: self.config.threshold.selection,
            targets: BTreeMap::new(),
        };
        for (i, seg) in segs.iter().enumerate() {
            let (best, trace, fallback) = chosen[i].take().expect("every target belongs to a group");
            let row = trace[best];
            let seg_dir = dir.join(seg);
            std::fs::create_dir_all(&seg_dir).map_err(|e| Error::io(&seg_dir, e))?;
            write_selection_trace(&seg_dir.join("selection_trace.csv"), &trace)?;
            write_checkpoint(
                &seg_dir.join("model.ckpt"),
                &snapshots[i][best],
                self.config.train.seed,
                serde_json::json!({"segment": seg, "labels": mode, "epoch": row.epoch, "tau": row.tau}),
            )?;
            selection.targets.insert(
                seg.to_string(),
                SelectionEntry {
                    tau: row.tau,
                    epoch: row.epoch,
                    f_tune: row.f_tune,
                    f_val: row.f_val,
                    fallback,
                },
            );
        }
        write_json(&dir.join(SELECTION_FILE), &selection)?;
        self.finish(Stage::Tune, &dir, &inputs)
    }

    fn evaluate(&self) -> Result<()> {
        self.require(Stage::Train, TRAIN_SUMMARY_FILE)?;
        let selection_path = self.require(Stage::Tune, SELECTION_FILE)?;
        let selection: SelectionArtifact = read_json(&selection_path)?;
        let data = self.load_data()?;
        let mode = self.mode();
        let h = self.config.window.horizon;
        let mut inputs = data.inputs.clone();
        inputs.push(selection_path);
        let mut segments = BTreeMap::new();
        let mut streams: Vec<(String, AlertStream)> = Vec::new();
        let mut pooled_tally = IncidentTally::default();
        let mut pooled_conf = vec![Confusion::default(); h];
        let (mut all_scores, mut all_labels) = (Vec::new(), Vec::new());
        for (seg, l) in &data.labels {
            let entry = selection.targets.get(seg).ok_or_else(|| Error::MissingArtifact {
                stage: Stage::Tune.name(),
                path: self.stage_dir(Stage::Tune).join(seg),
            })?;
            let model_path = self.require(Stage::Tune, &format!("{seg}/model.ckpt"))?;
            let (_, params) = read_checkpoint(&model_path)?;
            inputs.push(model_path);
            let frame = self.frame(&data, seg)?;
            let test = self.windows(&data, &frame, l.for_mode(mode), Partition::Test)?;
            let (report, tally, stream, scores, labels) = self.evaluate_target(&data, l, &params, &test.samples, entry.tau)?;
            for (acc, s) in pooled_conf.iter_mut().zip(&report.steps) {
                acc.tp += s.confusion.tp;
                acc.fp += s.confusion.fp;
                acc.fn_ += s.confusion.fn_;
                acc.tn += s.confusion.tn;
            }
            all_scores.extend(scores);
            all_labels.extend(labels);
            pooled_tally.merge(&tally);
            streams.push((seg.clone(), stream));
            segments.insert(seg.clone(), SegmentEval { report, tally });
        }
        let pooled = EvalReport {
            tau: None,
            steps: pooled_conf
                .into_iter()
                .enumerate()
                .map(|(k, c)| StepMetrics::from_confusion(k + 1, c))
                .collect(),
            incidents: pooled_tally.metrics(data.grid.step_minutes),
        };
        let dir = self.fresh_dir(Stage::Evaluate)?;
        write_alerts(&dir.join("alerts.csv"), &data.grid, &streams)?;
        let mut rows = pooled.rows();
        for (seg, e) in &segments {
            rows.extend(e.report.rows().into_iter().map(|(m, n, v)| (format!("{seg}/{m}"), n, v)));
        }
        write_eval_report(&dir.join("eval_report.csv"), &rows)?;
        if all_scores.is_empty() {
            write_pr_curve(&dir.join("pr_curve.csv"), &[])?;
        } else {
            write_pr_curve(&dir.join("pr_curve.csv"), &pr_curve(&all_scores, &all_labels, h)?)?;
        }
        let m = &pooled.incidents;
        log::info!(
            "test: DR {:?} DR(S) {:?} MTTD {:?} min FAR {:?}",
            m.dr,
            m.dr_s,
            m.mttd_minutes,
            m.far
        );
        write_json(
            &dir.join(EVAL_FILE),
            &EvalArtifact {
                labels: mode,
                pooled,
                pooled_tally,
                segments,
            },
        )?;
        self.finish(Stage::Evaluate, &dir, &inputs)
    }

    #[allow(clippy::type_complexity)]
    fn evaluate_target(
        &self,
        data: &Data,
        labels: &SegmentLabels,
        params: &DetectorParams,
        samples: &[WindowSample],
        tau: f64,
    ) -> Result<(EvalReport, IncidentTally, AlertStream, Vec<f64>, Vec<bool>)> {
        let h = self.config.window.horizon;
        let mut scored = Vec::with_capacity(samples.len());
        let mut scores = Vec::with_capacity(samples.len() * h);
        let mut flat_labels = Vec::with_capacity(samples.len() * h);
        for s in samples {
            let p = params.forward(s.input, None)?;
            scores.extend_from_slice(&p);
            flat_labels.extend(s.target.iter().map(|&y| y > 0.5));
            scored.push((s.anchor, p));
        }
        let steps = if samples.is_empty() {
            (1..=h).map(|k| StepMetrics::from_confusion(k, Default::default())).collect()
        } else {
            step_metrics(&scores, &flat_labels, h, tau)?
        };
        let stream = if scored.is_empty() {
            AlertStream {
                tau,
                horizon: h,
                decisions: Vec::new(),
                events: Vec::new(),
            }
        } else {
            alert_stream(&scored, tau, self.config.window.stride)?
        };
        let (grid, window) = (&data.grid, &data.window);
        let mut reports = Vec::new();
        let mut anomaly = vec![false; grid.n_slots()];
        for d in data.split.study_days(grid, window, Partition::Test) {
            for (q, r) in runs(labels.inc.row(d)) {
                let start = grid.global(d, window.start + q);
                reports.push(ReportSpan {
                    span: Span {
                        start,
                        end: start + r - 1,
                    },
                    significant: *labels.sir.get(d, q),
                });
            }
            for (c, &a) in labels.aan.row(d).iter().enumerate() {
                anomaly[grid.global(d, window.start + c)] = a;
            }
        }
        let tally = incident_tally(&stream, &reports, &anomaly);
        let report = EvalReport {
            tau: Some(tau),
            steps,
            incidents: tally.metrics(grid.step_minutes),
        };
        Ok((report, tally, stream, scores, flat_labels))
    }

    fn report(&self) -> Result<()> {
        let eval_path = self.require(Stage::Evaluate, EVAL_FILE)?;
        let selection_path = self.require(Stage::Tune, SELECTION_FILE)?;
        let summary_path = self.require(Stage::Train, TRAIN_SUMMARY_FILE)?;
        let audit_path = self.require(Stage::Label, AUDIT_FILE)?;
        let eval: EvalArtifact = read_json(&eval_path)?;
        let selection: SelectionArtifact = read_json(&selection_path)?;
        let summary: TrainSummary = read_json(&summary_path)?;
        let audit: LabelAudit = read_json(&audit_path)?;
        let dir = self.fresh_dir(Stage::Report)?;
        let mut inputs = vec![eval_path.clone(), selection_path, summary_path, audit_path];

        let mut trace = String::from("segment_id,epoch,tau,f_tune,f_val\n");
        for seg in selection.targets.keys() {
            let path = self.require(Stage::Tune, &format!("{seg}/selection_trace.csv"))?;
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for line in text.lines().skip(1) {
                trace.push_str(&format!("{seg},{line}\n"));
            }
            inputs.push(path);
        }
        write_text(&dir.join("selection_trace.csv"), &trace)?;

        let mut losses = String::from("segment_id,epoch,loss\n");
        for (seg, t) in &summary.targets {
            for (e, l) in t.epoch_losses.iter().enumerate() {
                losses.push_str(&format!("{seg},{},{l}\n", e + 1));
            }
        }
        write_text(&dir.join("training_loss.csv"), &losses)?;

        for file in ["eval_report.csv", "pr_curve.csv"] {
            let src = self.require(Stage::Evaluate, file)?;
            std::fs::copy(&src, dir.join(file)).map_err(|e| Error::io(&src, e))?;
            inputs.push(src);
        }
        write_json(
            &dir.join("summary.json"),
            &serde_json::json!({
                "labels": self.mode(),
                "test": eval.pooled,
                "selection": selection.targets,
                "labeling": audit,
            }),
        )?;
        self.finish(Stage::Report, &dir, &inputs)
    }

    /// Reads the pooled evaluation of the current label mode.
    pub fn read_eval(&self) -> Result<EvalArtifact> {
        read_json(&self.require(Stage::Evaluate, EVAL_FILE)?)
    }
}

fn epoch_file(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

fn has_positive(samples: &[WindowSample]) -> bool {
    samples.iter().any(|s| s.target.iter().any(|&y| y > 0.5))
}
