//! Chronological day split and leakage-safe sliding windows.
//!
//! Days are split 7:2:1 into train, test and val in time order, and val is
//! halved into a threshold-tuning part and a validation part. Windows are
//! cut only after splitting and never leave their day, so no slot can be
//! shared by samples of two partitions.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureFrame;
use crate::grid::{BinMatrix, StudyWindow, TimeGrid};

pub const MIN_SPLIT_DAYS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
    Tune,
    Validation,
}

impl Partition {
    pub const ALL: [Partition; 4] = [Partition::Train, Partition::Test, Partition::Tune, Partition::Validation];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test => "test",
            Partition::Tune => "tune",
            Partition::Validation => "validation",
        }
    }
}

/// Day ranges of each partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_days: usize,
    pub train: Range<usize>,
    pub test: Range<usize>,
    pub tune: Range<usize>,
    pub validation: Range<usize>,
}

impl SplitSpec {
    pub fn days(&self, partition: Partition) -> Range<usize> {
        match partition {
            Partition::Train => self.train.clone(),
            Partition::Test => self.test.clone(),
            Partition::Tune => self.tune.clone(),
            Partition::Validation => self.validation.clone(),
        }
    }

    pub fn partition_of(&self, day: usize) -> Option<Partition> {
        Partition::ALL.into_iter().find(|&p| self.days(p).contains(&day))
    }

    /// Partition days that fall inside the study calendar.
    pub fn study_days(&self, grid: &TimeGrid, window: &StudyWindow, partition: Partition) -> Vec<usize> {
        self.days(partition).filter(|&d| window.includes_day(grid, d)).collect()
    }
}

/// Splits `n_days` chronologically: train 70% (floor), test 20% (floor), and
/// the rest as val, whose first `ceil(val / 2)` days tune the threshold.
pub fn split_days(n_days: usize) -> Result<SplitSpec> {
    if n_days < MIN_SPLIT_DAYS {
        return Err(Error::TooFewDays(n_days));
    }
    let n_train = n_days * 7 / 10;
    let n_test = n_days * 2 / 10;
    let n_val = n_days - n_train - n_test;
    let n_tune = n_val.div_ceil(2);
    if n_tune == 0 || n_val - n_tune == 0 {
        return Err(Error::TooFewDays(n_days));
    }
    let val_start = n_train + n_test;
    Ok(SplitSpec {
        n_days,
        train: 0..n_train,
        test: n_train..val_start,
        tune: val_start..val_start + n_tune,
        validation: val_start + n_tune..n_days,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            lookback: 12,
            horizon: 6,
            stride: 1,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::InvalidParameter(format!(
                "lookback, horizon and stride must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Anchor slots-of-day of a study window, oldest first.
    pub fn anchors(&self, window: &StudyWindow) -> impl Iterator<Item = usize> {
        let first = window.start + self.lookback - 1;
        let last = window.end as isize - self.horizon as isize - 1;
        let range = if last < first as isize { first..first } else { first..last as usize + 1 };
        range.step_by(self.stride.max(1))
    }

    pub fn samples_per_day(&self, window: &StudyWindow) -> usize {
        self.anchors(window).count()
    }
}

/// Inclusive global slot span `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn intersects(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// One multi-step sample; `input` borrows `lookback` rows of the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample<'a> {
    pub day: usize,
    /// Slot of day of the last input slot.
    pub slot: usize,
    /// Global slot of the last input slot.
    pub anchor: usize,
    pub input: &'a [f64],
    /// Labels at `anchor + 1 ..= anchor + horizon`, as 0.0 or 1.0.
    pub target: Vec<f64>,
}

impl WindowSample<'_> {
    pub fn span(&self, config: &WindowConfig) -> Span {
        Span {
            start: self.anchor + 1 - config.lookback,
            end: self.anchor + config.horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet<'a> {
    pub partition: Partition,
    pub config: WindowConfig,
    pub samples: Vec<WindowSample<'a>>,
    /// Anchors dropped because an input slot lacked seasonal history.
    pub skipped_unavailable: usize,
}

impl WindowSet<'_> {
    pub fn spans(&self) -> Vec<Span> {
        self.samples.iter().map(|s| s.span(&self.config)).collect()
    }

    pub fn positive_steps(&self) -> usize {
        self.samples.iter().map(|s| s.target.iter().filter(|&&y| y > 0.5).count()).sum()
    }
}

/// Cuts the windows of one partition.
///
/// `labels` is `days x window.len()` with column 0 at `window.start`.
pub fn make_windows<'a>(
    frame: &'a FeatureFrame,
    grid: &TimeGrid,
    labels: &BinMatrix,
    window: &StudyWindow,
    split: &SplitSpec,
    partition: Partition,
    config: WindowConfig,
) -> Result<WindowSet<'a>> {
    config.validate()?;
    if labels.shape() != (grid.n_days, window.len()) {
        return Err(Error::Shape(format!(
            "labels {:?}, expected ({}, {})",
            labels.shape(),
            grid.n_days,
            window.len()
        )));
    }
    if frame.n_slots() != grid.n_slots() {
        return Err(Error::Shape(format!(
            "frame has {} slots, grid has {}",
            frame.n_slots(),
            grid.n_slots()
        )));
    }
    if split.n_days != grid.n_days {
        return Err(Error::Shape(format!("split covers {} days, grid has {}", split.n_days, grid.n_days)));
    }
    let mut samples = Vec::new();
    let mut skipped = 0;
    for day in split.study_days(grid, window, partition) {
        let row = labels.row(day);
        for slot in config.anchors(window) {
            let anchor = grid.global(day, slot);
            if !(anchor + 1 - config.lookback..=anchor).all(|g| frame.available(g)) {
                skipped += 1;
                continue;
            }
            let first_target = slot + 1 - window.start;
            let target = row[first_target..first_target + config.horizon]
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect();
            samples.push(WindowSample {
                day,
                slot,
                anchor,
                input: frame.window(anchor, config.lookback),
                target,
            });
        }
    }
    Ok(WindowSet {
        partition,
        config,
        samples,
        skipped_unavailable: skipped,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContaminationReport {
    /// Index pairs `(i, j)` where span `a[i]` shares a slot with `b[j]`.
    pub violations: Vec<(usize, usize)>,
}

impl ContaminationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Finds every pair of spans from `a` and `b` that share a slot.
pub fn contamination_check(a: &[Span], b: &[Span]) -> ContaminationReport {
    let mut order: Vec<usize> = (0..b.len()).collect();
    order.sort_by_key(|&j| (b[j].start, j));
    let starts: Vec<usize> = order.iter().map(|&j| b[j].start).collect();
    let max_len = b.iter().map(|s| s.end - s.start).max().unwrap_or(0);
    let mut violations = Vec::new();
    for (i, sa) in a.iter().enumerate() {
        let lo = starts.partition_point(|&s| s + max_len < sa.start);
        let hi = starts.partition_point(|&s| s <= sa.end);
        for &j in &order[lo..hi] {
            if sa.intersects(&b[j]) {
                violations.push((i, j));
            }
        }
    }
    violations.sort_unstable();
    ContaminationReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn grid(days: usize) -> TimeGrid {
        TimeGrid::new(NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(), days)
    }

    fn frame(grid: &TimeGrid, width: usize) -> FeatureFrame {
        let n = grid.n_slots();
        let values = (0..n * width).map(|i| (i / width) as f64).collect();
        FeatureFrame::from_values("T", width, values, vec![true; n]).unwrap()
    }

    #[test]
    fn split_examples() {
        let s = split_days(100).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.tune.len(), s.validation.len()), (70, 20, 5, 5));
        let s = split_days(20).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.tune.len(), s.validation.len()), (14, 4, 1, 1));
        let s = split_days(120).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.tune.len(), s.validation.len()), (84, 24, 6, 6));
        assert_eq!(s.test.start, 84);
        assert!(matches!(split_days(10), Err(Error::TooFewDays(10))));
        assert!(split_days(9).is_err());
    }

    #[test]
    fn split_partitions_cover_days_in_order() {
        for n in 11..200 {
            let Ok(s) = split_days(n) else { continue };
            let all: Vec<usize> = Partition::ALL.into_iter().flat_map(|p| s.days(p)).collect();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(!s.tune.is_empty() && !s.validation.is_empty());
        }
    }

    #[test]
    fn first_anchor_and_target_follow_the_clock() {
        let g = grid(1);
        let w = StudyWindow::from_clock(&g, "06:00", "21:00", false).unwrap();
        let cfg = WindowConfig::default();
        let first = cfg.anchors(&w).next().unwrap();
        // 06:55 is slot 83; targets start at 07:00.
        assert_eq!(first, 83);
        assert_eq!(cfg.samples_per_day(&w), 163);
        let strided = WindowConfig { stride: 5, ..cfg };
        assert_eq!(strided.samples_per_day(&w), 33);
    }

    #[test]
    fn windows_round_trip_labels_and_inputs() {
        let g = grid(20);
        let w = StudyWindow::from_clock(&g, "06:00", "21:00", false).unwrap();
        let f = frame(&g, 3);
        let mut labels = BinMatrix::zeros(20, w.len());
        for d in 0..20 {
            for q in 0..w.len() {
                labels.set(d, q, (d * 7 + q) % 5 == 0);
            }
        }
        let split = split_days(20).unwrap();
        let cfg = WindowConfig::default();
        let set = make_windows(&f, &g, &labels, &w, &split, Partition::Train, cfg).unwrap();
        assert_eq!(set.samples.len(), 14 * 163);
        assert_eq!(set.skipped_unavailable, 0);
        for s in &set.samples {
            for k in 0..cfg.horizon {
                let want = *labels.get(s.day, s.slot + 1 + k - w.start);
                assert_eq!(s.target[k] > 0.5, want);
            }
            assert_eq!(s.input.len(), cfg.lookback * 3);
            assert_eq!(s.input[0], (s.anchor + 1 - cfg.lookback) as f64);
            assert_eq!(*s.input.last().unwrap(), s.anchor as f64);
            let span = s.span(&cfg);
            assert_eq!(g.day_slot(span.start).0, s.day);
            assert_eq!(g.day_slot(span.end).0, s.day);
        }
        let pair = &set.samples[0..2];
        assert_eq!(pair[0].input[3..], pair[1].input[..33]);
    }

    #[test]
    fn unavailable_slots_skip_samples() {
        let g = grid(20);
        let w = StudyWindow::from_clock(&g, "06:00", "21:00", false).unwrap();
        let n = g.n_slots();
        let mut avail = vec![true; n];
        avail[g.global(0, 100)] = false;
        let f = FeatureFrame::from_values("T", 1, vec![0.0; n], avail).unwrap();
        let labels = BinMatrix::zeros(20, w.len());
        let split = split_days(20).unwrap();
        let set = make_windows(&f, &g, &labels, &w, &split, Partition::Train, WindowConfig::default()).unwrap();
        assert_eq!(set.skipped_unavailable, 12);
        assert_eq!(set.samples.len(), 14 * 163 - 12);
    }

    #[test]
    fn weekdays_only_drops_weekends() {
        // 2024-01-01 is a Monday; the first 14 days hold 4 weekend days.
        let g = grid(20);
        let w = StudyWindow::from_clock(&g, "06:00", "21:00", true).unwrap();
        let split = split_days(20).unwrap();
        assert_eq!(split.study_days(&g, &w, Partition::Train).len(), 10);
    }

    #[test]
    fn contamination_examples() {
        let a = [Span { start: 0, end: 17 }, Span { start: 40, end: 57 }];
        let b = [Span { start: 18, end: 35 }, Span { start: 57, end: 60 }];
        assert_eq!(contamination_check(&a, &b).violations, vec![(1, 1)]);
        assert!(contamination_check(&[], &b).is_clean());
        assert!(contamination_check(&a, &[]).is_clean());
    }

    #[test]
    fn contamination_matches_brute_force() {
        let mut x: u64 = 7;
        let mut next = |m: usize| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (x >> 33) as usize % m
        };
        for _ in 0..50 {
            let mk = |n: usize, next: &mut dyn FnMut(usize) -> usize| {
                (0..n)
                    .map(|_| {
                        let s = next(500);
                        Span { start: s, end: s + next(30) }
                    })
                    .collect::<Vec<_>>()
            };
            let a = mk(next(40), &mut next);
            let b = mk(next(40), &mut next);
            let mut brute = Vec::new();
            for (i, sa) in a.iter().enumerate() {
                for (j, sb) in b.iter().enumerate() {
                    if sa.intersects(sb) {
                        brute.push((i, j));
                    }
                }
            }
            assert_eq!(contamination_check(&a, &b).violations, brute);
        }
    }
}
