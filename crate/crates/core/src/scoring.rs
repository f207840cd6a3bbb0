//! Normalized anomaly scores and flags.
//!
//! A score is the anomaly relative to the expected volume, `A / L`: positive
//! when traffic ran above expectation, negative when below. Scores are NA where
//! the ratio is not meaningful: rows whose median volume across periods is
//! below `tau_min`, cells whose expected volume is numerically zero, and cells
//! that were filled by imputation.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spcp::Decomposition;
use crate::stats::median_in_place;
use crate::time::{format_hour, from_hour_index, hour_index, is_on_hour, parse_timestamp};
use crate::timeseries::{cell_of, TrafficMatrix};

pub const DEFAULT_TAU_MIN: f64 = 10.0;
pub const DEFAULT_THETA: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringParams {
    /// Rows with a lower median volume are NA.
    pub tau_min: f64,
    /// Flag threshold on `|score|`.
    pub theta: f64,
    /// Expected volumes below this magnitude give NA.
    pub epsilon: f64,
}

impl Default for ScoringParams {
    fn default() -> Self {
        Self {
            tau_min: DEFAULT_TAU_MIN,
            theta: DEFAULT_THETA,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Flag {
    Anomalous,
    Normal,
    Na,
}

impl Flag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Flag::Anomalous => "anomalous",
            Flag::Normal => "normal",
            Flag::Na => "NA",
        }
    }

    fn parse(raw: &str) -> Option<Self> {
        match raw {
            "anomalous" => Some(Flag::Anomalous),
            "normal" => Some(Flag::Normal),
            "NA" => Some(Flag::Na),
            _ => None,
        }
    }
}

/// Per-cell `A / L` with the NA overrides applied.
pub fn normalize(dec: &Decomposition, t: &TrafficMatrix, tau_min: f64, epsilon: f64) -> Result<DMatrix<Option<f64>>> {
    let (m, n) = t.shape();
    if dec.shape() != (m, n) {
        return Err(Error::DimensionMismatch(format!(
            "decomposition is {:?} but traffic matrix is {m}×{n}",
            dec.shape()
        )));
    }
    let mut scores = DMatrix::from_element(m, n, None);
    let mut row = Vec::with_capacity(n);
    for i in 0..m {
        row.clear();
        row.extend((0..n).filter_map(|j| t.get(i, j)));
        let row_median = median_in_place(&mut row).unwrap_or(0.0);
        if row_median < tau_min {
            continue;
        }
        for j in 0..n {
            let expected = dec.low_rank[(i, j)];
            if t.is_imputed(i, j) || t.get(i, j).is_none() || expected.abs() < epsilon {
                continue;
            }
            scores[(i, j)] = Some(dec.sparse[(i, j)] / expected);
        }
    }
    Ok(scores)
}

pub fn flag_score(score: Option<f64>, theta: f64) -> Flag {
    match score {
        None => Flag::Na,
        Some(s) if s.abs() >= theta => Flag::Anomalous,
        Some(_) => Flag::Normal,
    }
}

pub fn flag(scores: &DMatrix<Option<f64>>, theta: f64) -> DMatrix<Flag> {
    scores.map(|s| flag_score(s, theta))
}

/// Scores and flags for one road over the hours its series covered.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadScores {
    pub road_id: String,
    /// Hours since the Unix epoch of the first cell.
    pub first_hour: i64,
    pub scores: Vec<Option<f64>>,
    pub flags: Vec<Flag>,
}

impl RoadScores {
    /// Scores a decomposed road over its in-window hours.
    pub fn from_decomposition(t: &TrafficMatrix, dec: &Decomposition, params: &ScoringParams) -> Result<Self> {
        let scores = normalize(dec, t, params.tau_min, params.epsilon)?;
        let m = t.period_hours();
        let window = t.window();
        let first_hour = hour_index(&t.period_start()) + window.start as i64;
        let cells: Vec<Option<f64>> = window
            .map(|g| {
                let (i, j) = cell_of(g, m);
                scores[(i, j)]
            })
            .collect();
        Ok(Self {
            road_id: t.road_id().to_string(),
            first_hour,
            flags: cells.iter().map(|&s| flag_score(s, params.theta)).collect(),
            scores: cells,
        })
    }

    pub fn hours(&self) -> std::ops::Range<i64> {
        self.first_hour..self.first_hour + self.scores.len() as i64
    }

    pub fn score_at(&self, hour: i64) -> Option<f64> {
        self.index_of(hour).and_then(|k| self.scores[k])
    }

    pub fn flag_at(&self, hour: i64) -> Flag {
        self.index_of(hour).map(|k| self.flags[k]).unwrap_or(Flag::Na)
    }

    fn index_of(&self, hour: i64) -> Option<usize> {
        self.hours().contains(&hour).then(|| (hour - self.first_hour) as usize)
    }
}

/// Scores over all roads, keyed by road id in sorted order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnomalyGrid {
    roads: Vec<RoadScores>,
}

impl AnomalyGrid {
    pub fn new(mut roads: Vec<RoadScores>) -> Result<Self> {
        roads.sort_by(|a, b| a.road_id.cmp(&b.road_id));
        if let Some(w) = roads.windows(2).find(|w| w[0].road_id == w[1].road_id) {
            return Err(Error::InvalidInput(format!("road {} appears twice in the grid", w[0].road_id)));
        }
        for road in &roads {
            if road.scores.len() != road.flags.len() {
                return Err(Error::InvalidInput(format!("road {} has mismatched scores and flags", road.road_id)));
            }
            if let Some(k) = (0..road.scores.len()).find(|&k| road.scores[k].is_none() != (road.flags[k] == Flag::Na)) {
                return Err(Error::InvalidInput(format!(
                    "road {} hour offset {k}: score and flag disagree on NA",
                    road.road_id
                )));
            }
        }
        Ok(Self { roads })
    }

    pub fn roads(&self) -> &[RoadScores] {
        &self.roads
    }

    pub fn road(&self, road_id: &str) -> Option<&RoadScores> {
        self.roads
            .binary_search_by(|r| r.road_id.as_str().cmp(road_id))
            .ok()
            .map(|k| &self.roads[k])
    }

    pub fn road_ids(&self) -> impl Iterator<Item = &str> {
        self.roads.iter().map(|r| r.road_id.as_str())
    }

    /// Every anomalous cell as `(road id, hour)`.
    pub fn flagged_cells(&self) -> Vec<(&str, i64)> {
        self.roads
            .iter()
            .flat_map(|r| {
                r.flags
                    .iter()
                    .enumerate()
                    .filter(|(_, f)| **f == Flag::Anomalous)
                    .map(move |(k, _)| (r.road_id.as_str(), r.first_hour + k as i64))
            })
            .collect()
    }

    pub fn score_at(&self, road_id: &str, hour: i64) -> Option<f64> {
        self.road(road_id).and_then(|r| r.score_at(hour))
    }

    pub fn flag_at(&self, road_id: &str, hour: i64) -> Flag {
        self.road(road_id).map(|r| r.flag_at(hour)).unwrap_or(Flag::Na)
    }

    /// Re-flags every cell at a new threshold.
    pub fn reflag(&self, theta: f64) -> AnomalyGrid {
        let roads = self
            .roads
            .iter()
            .map(|r| RoadScores {
                flags: r.scores.iter().map(|&s| flag_score(s, theta)).collect(),
                ..r.clone()
            })
            .collect();
        AnomalyGrid { roads }
    }
}

/// Writes `road_id,timestamp,score,flag`, with `NA` for overridden cells.
pub fn write_scores_csv<W: Write>(writer: W, grid: &AnomalyGrid) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["road_id", "timestamp", "score", "flag"])?;
    for road in grid.roads() {
        for (k, (score, flag)) in road.scores.iter().zip(&road.flags).enumerate() {
            let ts = format_hour(&from_hour_index(road.first_hour + k as i64));
            let score = score.map(|s| s.to_string()).unwrap_or_else(|| "NA".into());
            wtr.write_record([road.road_id.as_str(), &ts, &score, flag.as_str()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a scores CSV back into a grid. Hours absent between a road's first and
/// last row become NA.
pub fn read_scores_csv<R: Read>(reader: R) -> Result<AnomalyGrid> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["road_id", "timestamp", "score", "flag"] {
        return Err(Error::malformed(1, "expected header `road_id,timestamp,score,flag`"));
    }
    let mut by_road: BTreeMap<String, BTreeMap<i64, (Option<f64>, Flag)>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 4 {
            return Err(Error::malformed(line, format!("expected 4 fields, got {}", record.len())));
        }
        let ts = parse_timestamp(&record[1])
            .filter(is_on_hour)
            .ok_or_else(|| Error::malformed(line, format!("bad hourly timestamp `{}`", &record[1])))?;
        let score = match &record[2] {
            "NA" => None,
            raw => Some(
                raw.parse::<f64>()
                    .ok()
                    .filter(|s| s.is_finite())
                    .ok_or_else(|| Error::malformed(line, format!("bad score `{raw}`")))?,
            ),
        };
        let flag = Flag::parse(&record[3]).ok_or_else(|| Error::malformed(line, format!("bad flag `{}`", &record[3])))?;
        if score.is_none() != (flag == Flag::Na) {
            return Err(Error::malformed(line, "score and flag disagree on NA"));
        }
        by_road
            .entry(record[0].to_string())
            .or_default()
            .insert(hour_index(&ts), (score, flag));
    }
    let roads = by_road
        .into_iter()
        .map(|(road_id, cells)| {
            let first = *cells.keys().next().expect("nonempty");
            let last = *cells.keys().next_back().expect("nonempty");
            let len = (last - first + 1) as usize;
            let mut scores = vec![None; len];
            let mut flags = vec![Flag::Na; len];
            for (h, (s, f)) in cells {
                scores[(h - first) as usize] = s;
                flags[(h - first) as usize] = f;
            }
            RoadScores {
                road_id,
                first_hour: first,
                scores,
                flags,
            }
        })
        .collect();
    AnomalyGrid::new(roads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spcp::SpcpParams;
    use crate::time::parse_timestamp;

    fn decomposition(l: DMatrix<f64>, a: DMatrix<f64>, t: &DMatrix<f64>) -> Decomposition {
        let noise = t - &l - &a;
        Decomposition {
            low_rank: l,
            sparse: a,
            noise,
            rank: 1,
            iterations: 1,
            objective_trace: vec![0.0],
            converged: true,
            params: SpcpParams::new(0.1, 1.0),
        }
    }

    fn start() -> chrono::NaiveDateTime {
        parse_timestamp("2024-01-01T00:00:00Z").unwrap()
    }

    #[test]
    fn ratio_of_anomaly_to_expected() {
        let t = DMatrix::from_row_slice(1, 3, &[125.0, 100.0, 100.0]);
        let l = DMatrix::from_element(1, 3, 100.0);
        let a = DMatrix::from_row_slice(1, 3, &[25.0, 0.0, 0.0]);
        let tm = TrafficMatrix::from_dense("r", start(), &t);
        let s = normalize(&decomposition(l, a, &t), &tm, 10.0, 1e-6).unwrap();
        assert_eq!(s[(0, 0)], Some(0.25));
        assert_eq!(s[(0, 1)], Some(0.0));
    }

    #[test]
    fn low_volume_rows_are_na() {
        let t = DMatrix::from_row_slice(2, 3, &[2.0, 2.0, 3.0, 100.0, 100.0, 100.0]);
        let l = t.clone();
        let a = DMatrix::from_element(2, 3, 0.0);
        let tm = TrafficMatrix::from_dense("r", start(), &t);
        let s = normalize(&decomposition(l, a, &t), &tm, 5.0, 1e-6).unwrap();
        assert!((0..3).all(|j| s[(0, j)].is_none()));
        assert!((0..3).all(|j| s[(1, j)] == Some(0.0)));
    }

    #[test]
    fn vanishing_expectation_is_na() {
        let t = DMatrix::from_row_slice(1, 3, &[50.0, 50.0, 50.0]);
        let l = DMatrix::from_row_slice(1, 3, &[50.0, 1e-9, 50.0]);
        let a = DMatrix::from_row_slice(1, 3, &[0.0, 50.0, 0.0]);
        let tm = TrafficMatrix::from_dense("r", start(), &t);
        let s = normalize(&decomposition(l, a, &t), &tm, 10.0, 1e-6).unwrap();
        assert_eq!(s[(0, 1)], None);
    }

    #[test]
    fn flag_examples() {
        assert_eq!(flag_score(Some(0.8), 0.5), Flag::Anomalous);
        assert_eq!(flag_score(Some(-0.6), 0.5), Flag::Anomalous);
        assert_eq!(flag_score(Some(0.2), 0.5), Flag::Normal);
        assert_eq!(flag_score(None, 0.5), Flag::Na);
    }

    #[test]
    fn grid_rejects_inconsistent_na() {
        let road = RoadScores {
            road_id: "a".into(),
            first_hour: 0,
            scores: vec![None],
            flags: vec![Flag::Normal],
        };
        assert!(AnomalyGrid::new(vec![road]).is_err());
    }

    #[test]
    fn scores_csv_round_trip() {
        let grid = AnomalyGrid::new(vec![
            RoadScores {
                road_id: "b".into(),
                first_hour: 470_000,
                scores: vec![Some(0.75), None, Some(-0.125)],
                flags: vec![Flag::Anomalous, Flag::Na, Flag::Normal],
            },
            RoadScores {
                road_id: "a".into(),
                first_hour: 470_001,
                scores: vec![Some(0.0)],
                flags: vec![Flag::Normal],
            },
        ])
        .unwrap();
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &grid).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("road_id,timestamp,score,flag\na,"));
        assert!(text.contains(",NA,NA\n"));
        assert_eq!(read_scores_csv(buf.as_slice()).unwrap(), grid);
    }
}
