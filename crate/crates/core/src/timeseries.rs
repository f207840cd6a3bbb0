//! Hourly volume series and their period-stacked matrix form.
//!
//! A road's hourly series is folded into an `m × n` matrix whose column `j` is
//! period `j` and whose row `i` is the hour-of-period, so cell `(i, j)` holds the
//! volume at period-relative hour `j·m + i`. With a weekly period the rows are
//! the 168 hours of the week and recurring weekly structure shows up as low rank.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike, Weekday};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::stats::median_in_place;
use crate::time::{format_hour, from_hour_index, hour_index, is_on_hour, parse_timestamp};

pub const HOURS_PER_WEEK: usize = 168;

/// One road's hourly volumes. `None` marks a missing hour.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    road_id: String,
    start: NaiveDateTime,
    values: Vec<Option<f64>>,
}

impl TrafficSeries {
    pub fn new(road_id: impl Into<String>, start: NaiveDateTime, values: Vec<Option<f64>>) -> Result<Self> {
        let road_id = road_id.into();
        if !is_on_hour(&start) {
            return Err(Error::ResolutionMismatch(format!(
                "series for {road_id} starts at {start}, which is not on the hour"
            )));
        }
        if let Some((k, v)) = values
            .iter()
            .enumerate()
            .find_map(|(k, v)| v.filter(|x| !x.is_finite() || *x < 0.0).map(|x| (k, x)))
        {
            return Err(Error::InvalidInput(format!(
                "series for {road_id} has volume {v} at offset {k}; volumes must be finite and non-negative"
            )));
        }
        Ok(Self { road_id, start, values })
    }

    pub fn road_id(&self) -> &str {
        &self.road_id
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp_at(&self, offset: usize) -> NaiveDateTime {
        from_hour_index(hour_index(&self.start) + offset as i64)
    }
}

/// Where periods begin: the weekday and hour of row 0.
///
/// For periods other than a week the weekday still anchors the phase, so a
/// 24-hour period with `hour = 6` starts every column at 06:00.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeriodAlignment {
    pub weekday: Weekday,
    pub hour: u32,
}

impl Default for PeriodAlignment {
    fn default() -> Self {
        Self {
            weekday: Weekday::Mon,
            hour: 0,
        }
    }
}

impl PeriodAlignment {
    /// The alignment that makes `ts` the first cell of a period.
    pub fn starting_at(ts: &NaiveDateTime) -> Self {
        Self {
            weekday: ts.weekday(),
            hour: ts.hour(),
        }
    }

    fn anchor_hour_index(&self) -> i64 {
        // 2001-01-01 was a Monday.
        let monday = NaiveDate::from_ymd_opt(2001, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        hour_index(&monday) + 24 * self.weekday.num_days_from_monday() as i64 + self.hour as i64
    }
}

/// A road's volumes stacked one period per column.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficMatrix {
    road_id: String,
    period_start: NaiveDateTime,
    cells: DMatrix<Option<f64>>,
    imputed: DMatrix<bool>,
    leading: usize,
    observed_len: usize,
}

impl TrafficMatrix {
    /// Builds a matrix directly from dense values; every cell counts as observed.
    pub fn from_dense(road_id: impl Into<String>, period_start: NaiveDateTime, values: &DMatrix<f64>) -> Self {
        let (m, n) = values.shape();
        Self {
            road_id: road_id.into(),
            period_start,
            cells: values.map(Some),
            imputed: DMatrix::from_element(m, n, false),
            leading: 0,
            observed_len: m * n,
        }
    }

    pub fn road_id(&self) -> &str {
        &self.road_id
    }

    /// Rows: hours per period.
    pub fn period_hours(&self) -> usize {
        self.cells.nrows()
    }

    /// Columns: number of periods.
    pub fn periods(&self) -> usize {
        self.cells.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.cells.shape()
    }

    pub fn period_start(&self) -> NaiveDateTime {
        self.period_start
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[(row, col)]
    }

    pub fn is_imputed(&self, row: usize, col: usize) -> bool {
        self.imputed[(row, col)]
    }

    pub fn imputed_mask(&self) -> &DMatrix<bool> {
        &self.imputed
    }

    pub fn missing_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_none()).count()
    }

    /// Period-relative hour range `[first, last)` that the source series covered.
    pub fn window(&self) -> std::ops::Range<usize> {
        self.leading..self.leading + self.observed_len
    }

    pub fn timestamp_of(&self, row: usize, col: usize) -> NaiveDateTime {
        let g = global_hour_of(row, col, self.period_hours());
        from_hour_index(hour_index(&self.period_start) + g as i64)
    }

    /// Dense values, failing if any cell is still missing.
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        if self.missing_count() > 0 {
            return Err(Error::InvalidInput(format!(
                "matrix for {} has {} missing cells; impute before decomposing",
                self.road_id,
                self.missing_count()
            )));
        }
        Ok(self.cells.map(|c| c.unwrap_or(0.0)))
    }

    /// The first `periods` columns as their own matrix.
    pub fn leading_periods(&self, periods: usize) -> TrafficMatrix {
        let periods = periods.min(self.periods());
        let m = self.period_hours();
        TrafficMatrix {
            road_id: self.road_id.clone(),
            period_start: self.period_start,
            cells: self.cells.columns(0, periods).into_owned(),
            imputed: self.imputed.columns(0, periods).into_owned(),
            leading: self.leading.min(m * periods),
            observed_len: (self.leading + self.observed_len)
                .min(m * periods)
                .saturating_sub(self.leading),
        }
    }

    /// Flattens back to an hourly series over the original window.
    pub fn to_series(&self) -> TrafficSeries {
        let m = self.period_hours();
        let values = self
            .window()
            .map(|g| {
                let (i, j) = cell_of(g, m);
                if self.imputed[(i, j)] {
                    None
                } else {
                    self.cells[(i, j)]
                }
            })
            .collect();
        TrafficSeries {
            road_id: self.road_id.clone(),
            start: from_hour_index(hour_index(&self.period_start) + self.leading as i64),
            values,
        }
    }
}

/// Period-relative hour of cell `(row, col)`.
pub fn global_hour_of(row: usize, col: usize, period_hours: usize) -> usize {
    debug_assert!(row < period_hours);
    col * period_hours + row
}

/// Inverse of [`global_hour_of`].
pub fn cell_of(global_hour: usize, period_hours: usize) -> (usize, usize) {
    (global_hour % period_hours, global_hour / period_hours)
}

/// Folds a series into a period-stacked matrix.
///
/// Hours before the first aligned period start and after the series end are
/// padded with missing markers so that every column is a full period.
pub fn build_matrix(series: &TrafficSeries, period_hours: usize, alignment: PeriodAlignment) -> Result<TrafficMatrix> {
    if period_hours < 2 {
        return Err(Error::InvalidInput(format!(
            "period must span at least 2 hours, got {period_hours}"
        )));
    }
    if !is_on_hour(&series.start) {
        return Err(Error::ResolutionMismatch(format!(
            "series for {} starts at {}, which is not on the hour",
            series.road_id, series.start
        )));
    }
    if series.len() < period_hours {
        return Err(Error::InsufficientData(format!(
            "series for {} has {} hours, shorter than one {}-hour period",
            series.road_id,
            series.len(),
            period_hours
        )));
    }
    let start = hour_index(&series.start);
    let leading = (start - alignment.anchor_hour_index()).rem_euclid(period_hours as i64) as usize;
    let total = leading + series.len();
    let periods = total.div_ceil(period_hours);

    let mut cells = DMatrix::from_element(period_hours, periods, None);
    for (k, value) in series.values.iter().enumerate() {
        let (i, j) = cell_of(leading + k, period_hours);
        cells[(i, j)] = *value;
    }
    Ok(TrafficMatrix {
        road_id: series.road_id.clone(),
        period_start: from_hour_index(start - leading as i64),
        cells,
        imputed: DMatrix::from_element(period_hours, periods, false),
        leading,
        observed_len: series.len(),
    })
}

/// Fills each missing cell with the median of the present cells in its row
/// (same hour-of-period across periods); rows with nothing present get 0.
pub fn impute_missing(matrix: &TrafficMatrix) -> TrafficMatrix {
    let mut out = matrix.clone();
    let (m, n) = matrix.shape();
    let mut present = Vec::with_capacity(n);
    for i in 0..m {
        present.clear();
        present.extend((0..n).filter_map(|j| matrix.cells[(i, j)]));
        if present.len() == n {
            continue;
        }
        let fill = median_in_place(&mut present).unwrap_or(0.0);
        for j in 0..n {
            if out.cells[(i, j)].is_none() {
                out.cells[(i, j)] = Some(fill);
                out.imputed[(i, j)] = true;
            }
        }
    }
    out
}

/// Reads `road_id,timestamp,volume` rows into one series per road, sorted by road id.
///
/// Rows may arrive in any order. Repeated hours for a road are averaged over
/// their present values; hours absent between a road's first and last
/// timestamp become missing markers.
pub fn read_traffic_csv<R: Read>(reader: R) -> Result<Vec<TrafficSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["road_id", "timestamp", "volume"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::malformed(1, format!("expected header `road_id,timestamp,volume`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }

    let mut by_road: BTreeMap<String, BTreeMap<i64, Vec<f64>>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(Error::malformed(line, format!("expected 3 fields, got {}", record.len())));
        }
        let road = record[0].to_string();
        if road.is_empty() {
            return Err(Error::malformed(line, "empty road_id"));
        }
        let ts = parse_timestamp(&record[1])
            .ok_or_else(|| Error::malformed(line, format!("unparseable timestamp `{}`", &record[1])))?;
        if !is_on_hour(&ts) {
            return Err(Error::ResolutionMismatch(format!(
                "line {line}: timestamp `{}` is not truncated to the hour",
                &record[1]
            )));
        }
        let hours = by_road.entry(road).or_default().entry(hour_index(&ts)).or_default();
        let raw = &record[2];
        if raw.is_empty() {
            continue;
        }
        let volume: f64 = raw
            .parse()
            .map_err(|_| Error::malformed(line, format!("unparseable volume `{raw}`")))?;
        if !volume.is_finite() || volume < 0.0 {
            return Err(Error::malformed(line, format!("volume `{raw}` must be a non-negative number")));
        }
        hours.push(volume);
    }

    by_road
        .into_iter()
        .map(|(road, hours)| {
            let first = *hours.keys().next().expect("road has at least one row");
            let last = *hours.keys().next_back().expect("road has at least one row");
            let mut values = vec![None; (last - first + 1) as usize];
            for (h, vals) in hours {
                if !vals.is_empty() {
                    values[(h - first) as usize] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
            TrafficSeries::new(road, from_hour_index(first), values)
        })
        .collect()
}

pub fn write_traffic_csv<W: Write>(writer: W, series: &[TrafficSeries]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["road_id", "timestamp", "volume"])?;
    for s in series {
        for (k, v) in s.values.iter().enumerate() {
            let volume = v.map(|x| x.to_string()).unwrap_or_default();
            wtr.write_record([s.road_id.as_str(), &format_hour(&s.timestamp_at(k)), &volume])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn monday() -> NaiveDateTime {
        parse_timestamp("2024-01-01T00:00:00Z").unwrap()
    }

    fn series(len: usize) -> TrafficSeries {
        TrafficSeries::new("r", monday(), (0..len).map(|k| Some(k as f64)).collect()).unwrap()
    }

    #[test]
    fn whole_weeks_fill_the_matrix() {
        let m = build_matrix(&series(1176), 168, PeriodAlignment::default()).unwrap();
        assert_eq!(m.shape(), (168, 7));
        assert_eq!(m.missing_count(), 0);
        assert_eq!(m.get(167, 6), Some(1175.0));
    }

    #[test]
    fn partial_trailing_week_is_padded() {
        let m = build_matrix(&series(1180), 168, PeriodAlignment::default()).unwrap();
        assert_eq!(m.shape(), (168, 8));
        let filled_last = (0..168).filter(|&i| m.get(i, 7).is_some()).count();
        assert_eq!(filled_last, 4);
        assert_eq!(m.missing_count(), 164);
        assert_eq!(m.get(3, 7), Some(1179.0));
    }

    #[test]
    fn interior_gaps_map_to_their_cells() {
        let gaps = [5usize, 400, 1000];
        let values = (0..1176).map(|k| if gaps.contains(&k) { None } else { Some(1.0) }).collect();
        let s = TrafficSeries::new("r", monday(), values).unwrap();
        let m = build_matrix(&s, 168, PeriodAlignment::default()).unwrap();
        assert_eq!(m.missing_count(), 3);
        for g in gaps {
            // independent arithmetic: row = g mod 168, column = floor(g / 168)
            let (row, col) = (g % 168, g / 168);
            assert_eq!(m.get(row, col), None);
        }
    }

    #[test]
    fn misaligned_start_pads_leading_hours() {
        let tuesday_3am = parse_timestamp("2024-01-02T03:00:00Z").unwrap();
        let s = TrafficSeries::new("r", tuesday_3am, vec![Some(1.0); 168]).unwrap();
        let m = build_matrix(&s, 168, PeriodAlignment::default()).unwrap();
        assert_eq!(m.period_start(), monday());
        assert_eq!(m.shape(), (168, 2));
        assert_eq!(m.window(), 27..195);
        assert_eq!(m.get(26, 0), None);
        assert_eq!(m.get(27, 0), Some(1.0));
        assert_eq!(m.timestamp_of(27, 0), tuesday_3am);
    }

    #[test]
    fn short_series_is_insufficient() {
        let err = build_matrix(&series(100), 168, PeriodAlignment::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn off_hour_start_is_a_resolution_mismatch() {
        let ts = parse_timestamp("2024-01-01T00:15:00Z").unwrap();
        let err = TrafficSeries::new("r", ts, vec![Some(1.0)]).unwrap_err();
        assert!(matches!(err, Error::ResolutionMismatch(_)));
    }

    #[test]
    fn negative_volume_is_rejected() {
        assert!(TrafficSeries::new("r", monday(), vec![Some(-1.0)]).is_err());
    }

    #[test]
    fn global_hour_examples() {
        assert_eq!(global_hour_of(0, 0, 168), 0);
        assert_eq!(global_hour_of(167, 6, 168), 1175);
        assert_eq!(cell_of(1175, 168), (167, 6));
    }

    #[test]
    fn row_median_imputation() {
        let row = [Some(10.0), None, Some(12.0), Some(11.0), Some(10.0), Some(12.0), Some(10.0)];
        let mut dense = DMatrix::from_element(2, 7, 1.0);
        for (j, v) in row.iter().enumerate() {
            dense[(0, j)] = v.unwrap_or(0.0);
        }
        let mut m = TrafficMatrix::from_dense("r", monday(), &dense);
        m.cells[(0, 1)] = None;
        // whole second row missing
        for j in 0..7 {
            m.cells[(1, j)] = None;
        }
        let out = impute_missing(&m);
        assert_eq!(out.get(0, 1), Some(10.5));
        assert!(out.is_imputed(0, 1));
        assert!(!out.is_imputed(0, 0));
        assert!((0..7).all(|j| out.get(1, j) == Some(0.0) && out.is_imputed(1, j)));
        assert_eq!(out.missing_count(), 0);
    }

    #[test]
    fn imputation_without_gaps_is_identity() {
        let m = build_matrix(&series(336), 168, PeriodAlignment::default()).unwrap();
        assert_eq!(impute_missing(&m), m);
    }

    #[test]
    fn csv_ingestion_sorts_averages_and_marks_gaps() {
        let csv = "road_id,timestamp,volume\n\
                   b,2024-01-01T02:00:00Z,7\n\
                   a,2024-01-01T01:00:00Z,4\n\
                   a,2024-01-01T00:00:00Z,1\n\
                   a,2024-01-01T01:00:00Z,6\n\
                   a,2024-01-01T03:00:00Z,\n\
                   a,2024-01-01T04:00:00Z,2.5\n";
        let series = read_traffic_csv(csv.as_bytes()).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].road_id(), "a");
        assert_eq!(series[0].values(), &[Some(1.0), Some(5.0), None, None, Some(2.5)]);
        assert_eq!(series[1].values(), &[Some(7.0)]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let csv = "road_id,timestamp,volume\na,2024-01-01T00:00:00Z,1\na,not-a-time,2\n";
        match read_traffic_csv(csv.as_bytes()).unwrap_err() {
            Error::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let csv = "road_id,timestamp,volume\na,2024-01-01T00:30:00Z,1\n";
        assert!(matches!(read_traffic_csv(csv.as_bytes()), Err(Error::ResolutionMismatch(_))));
        let csv = "road,time,count\n";
        assert!(read_traffic_csv(csv.as_bytes()).is_err());
    }
}
