//! The shared 5-minute time grid and day-by-slot matrices.
//!
//! Every series in a study lives on one [`TimeGrid`]. A global slot index
//! maps one-to-one onto a `(day, slot-of-day)` pair, and label matrices are
//! stored as `days x slots` row-major [`DayMatrix`] values.

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, NaiveTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEP_MINUTES: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    /// Midnight of the first study day.
    pub start: NaiveDateTime,
    pub step_minutes: u32,
    pub slots_per_day: usize,
    pub n_days: usize,
}

impl TimeGrid {
    pub fn new(first_day: NaiveDate, n_days: usize) -> Self {
        Self::with_step(first_day, n_days, DEFAULT_STEP_MINUTES).expect("5 minutes divides a day")
    }

    pub fn with_step(first_day: NaiveDate, n_days: usize, step_minutes: u32) -> Result<Self> {
        if step_minutes == 0 || 1440 % step_minutes != 0 {
            return Err(Error::InvalidGrid(format!(
                "step of {step_minutes} minutes does not divide 24h"
            )));
        }
        if n_days == 0 {
            return Err(Error::InvalidGrid("grid has no days".into()));
        }
        Ok(Self {
            start: first_day.and_time(NaiveTime::MIN),
            step_minutes,
            slots_per_day: (1440 / step_minutes) as usize,
            n_days,
        })
    }

    pub fn n_slots(&self) -> usize {
        self.n_days * self.slots_per_day
    }

    pub fn step(&self) -> Duration {
        Duration::minutes(self.step_minutes as i64)
    }

    pub fn first_day(&self) -> NaiveDate {
        self.start.date()
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.first_day() + Duration::days(day as i64)
    }

    pub fn weekday(&self, day: usize) -> Weekday {
        self.date(day).weekday()
    }

    pub fn is_weekday(&self, day: usize) -> bool {
        !matches!(self.weekday(day), Weekday::Sat | Weekday::Sun)
    }

    pub fn global(&self, day: usize, slot: usize) -> usize {
        debug_assert!(slot < self.slots_per_day);
        day * self.slots_per_day + slot
    }

    pub fn day_slot(&self, global: usize) -> (usize, usize) {
        (global / self.slots_per_day, global % self.slots_per_day)
    }

    pub fn timestamp(&self, global: usize) -> NaiveDateTime {
        self.start + Duration::minutes(global as i64 * self.step_minutes as i64)
    }

    /// Signed offset of `ts` from the grid start, in whole minutes.
    fn minutes_from_start(&self, ts: NaiveDateTime) -> i64 {
        (ts - self.start).num_minutes()
    }

    /// Slot containing `ts` (rounded down). May lie outside `[0, n_slots)`.
    pub fn floor_slot(&self, ts: NaiveDateTime) -> i64 {
        let secs = (ts - self.start).num_seconds();
        secs.div_euclid(self.step_minutes as i64 * 60)
    }

    /// First slot boundary at or after `ts` (rounded up).
    pub fn ceil_slot(&self, ts: NaiveDateTime) -> i64 {
        let step = self.step_minutes as i64 * 60;
        let secs = (ts - self.start).num_seconds();
        -(-secs).div_euclid(step)
    }

    /// Exact slot index of an on-grid timestamp.
    pub fn slot_of(&self, ts: NaiveDateTime) -> Option<usize> {
        let mins = self.minutes_from_start(ts);
        if ts.second() != 0 || mins < 0 || mins % self.step_minutes as i64 != 0 {
            return None;
        }
        let slot = (mins / self.step_minutes as i64) as usize;
        (slot < self.n_slots()).then_some(slot)
    }
}

/// Daily study window in slot-of-day units, `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyWindow {
    pub start: usize,
    pub end: usize,
    pub weekdays_only: bool,
}

impl StudyWindow {
    pub fn new(start: usize, end: usize, weekdays_only: bool) -> Result<Self> {
        if start >= end {
            return Err(Error::InvalidParameter(format!(
                "study window start slot {start} is not before end slot {end}"
            )));
        }
        Ok(Self {
            start,
            end,
            weekdays_only,
        })
    }

    /// Builds a window from `HH:MM` clock strings on the given grid.
    pub fn from_clock(grid: &TimeGrid, start: &str, end: &str, weekdays_only: bool) -> Result<Self> {
        let s = parse_clock(start, grid.step_minutes)?;
        let e = parse_clock(end, grid.step_minutes)?;
        if e > grid.slots_per_day {
            return Err(Error::InvalidParameter(format!("study end {end} beyond day")));
        }
        Self::new(s, e, weekdays_only)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, slot_of_day: usize) -> bool {
        (self.start..self.end).contains(&slot_of_day)
    }

    pub fn includes_day(&self, grid: &TimeGrid, day: usize) -> bool {
        !self.weekdays_only || grid.is_weekday(day)
    }
}

fn parse_clock(text: &str, step_minutes: u32) -> Result<usize> {
    let bad = || Error::InvalidParameter(format!("bad clock time {text:?}, expected HH:MM"));
    let (h, m) = text.split_once(':').ok_or_else(bad)?;
    let h: u32 = h.trim().parse().map_err(|_| bad())?;
    let m: u32 = m.trim().parse().map_err(|_| bad())?;
    if h > 24 || m >= 60 || (h == 24 && m != 0) {
        return Err(bad());
    }
    let mins = h * 60 + m;
    if mins % step_minutes != 0 {
        return Err(Error::InvalidParameter(format!(
            "clock time {text} is not on the {step_minutes}-minute grid"
        )));
    }
    Ok((mins / step_minutes) as usize)
}

/// Dense `rows x cols` matrix, one row per day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type BinMatrix = DayMatrix<bool>;

impl<T: Clone> DayMatrix<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let n = rows.len();
        Ok(Self {
            rows: n,
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [T] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn map<U, F: FnMut(&T) -> U>(&self, f: F) -> DayMatrix<U> {
        DayMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn zip_map<U: Clone, V, F: FnMut(&T, &U) -> V>(&self, other: &DayMatrix<U>, mut f: F) -> DayMatrix<V> {
        assert_eq!(self.shape(), other.shape(), "matrix shapes differ");
        DayMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(a, b))
                .collect(),
        }
    }

    /// New matrix made of the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

impl BinMatrix {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, false)
    }
}

/// Reshapes a per-slot global series into a `days x window` matrix.
pub fn window_matrix<T: Clone>(grid: &TimeGrid, series: &[T], window: &StudyWindow) -> DayMatrix<T> {
    assert_eq!(series.len(), grid.n_slots(), "series is not on the grid");
    let mut data = Vec::with_capacity(grid.n_days * window.len());
    for day in 0..grid.n_days {
        let base = day * grid.slots_per_day;
        data.extend_from_slice(&series[base + window.start..base + window.end]);
    }
    DayMatrix {
        rows: grid.n_days,
        cols: window.len(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(), 3)
    }

    #[test]
    fn slot_day_bijection() {
        let g = grid();
        assert_eq!(g.slots_per_day, 288);
        for s in [0, 1, 287, 288, 600, g.n_slots() - 1] {
            let (d, q) = g.day_slot(s);
            assert_eq!(g.global(d, q), s);
            assert_eq!(g.slot_of(g.timestamp(s)), Some(s));
        }
    }

    #[test]
    fn rounding_helpers() {
        let g = grid();
        let t = NaiveDate::from_ymd_opt(2024, 1, 1)
            .unwrap()
            .and_hms_opt(7, 3, 0)
            .unwrap();
        assert_eq!(g.floor_slot(t), 84);
        assert_eq!(g.ceil_slot(t), 85);
        let on = t.with_minute(5).unwrap();
        assert_eq!(g.floor_slot(on), 85);
        assert_eq!(g.ceil_slot(on), 85);
        let before = g.start - Duration::minutes(7);
        assert_eq!(g.floor_slot(before), -2);
        assert_eq!(g.ceil_slot(before), -1);
    }

    #[test]
    fn step_must_divide_day() {
        let d = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        assert!(TimeGrid::with_step(d, 1, 7).is_err());
        assert!(TimeGrid::with_step(d, 1, 15).is_ok());
    }

    #[test]
    fn study_window_from_clock() {
        let g = grid();
        let w = StudyWindow::from_clock(&g, "06:00", "21:00", false).unwrap();
        assert_eq!((w.start, w.end, w.len()), (72, 252, 180));
        assert!(StudyWindow::from_clock(&g, "06:03", "21:00", false).is_err());
        assert!(StudyWindow::from_clock(&g, "21:00", "06:00", false).is_err());
    }

    #[test]
    fn weekday_filter() {
        // 2024-01-06 is a Saturday.
        let g = grid();
        let w = StudyWindow::new(0, 10, true).unwrap();
        let g2 = TimeGrid::new(NaiveDate::from_ymd_opt(2024, 1, 6).unwrap(), 3);
        assert!(w.includes_day(&g, 0));
        assert!(!w.includes_day(&g2, 0));
        assert!(!w.includes_day(&g2, 1));
        assert!(w.includes_day(&g2, 2));
    }

    #[test]
    fn window_matrix_reshape() {
        let g = grid();
        let series: Vec<usize> = (0..g.n_slots()).collect();
        let w = StudyWindow::new(10, 13, false).unwrap();
        let m = window_matrix(&g, &series, &w);
        assert_eq!(m.shape(), (3, 3));
        assert_eq!(m.row(1), &[298, 299, 300]);
    }
}
