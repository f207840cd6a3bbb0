//! Per-road detection and the end-to-end pipeline.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::events::{group_anomalies, summarize_all, AnomalyEvent, EventSummary, GroupingParams};
use crate::network::RoadNetwork;
use crate::scoring::{AnomalyGrid, RoadScores, ScoringParams, DEFAULT_EPSILON, DEFAULT_TAU_MIN, DEFAULT_THETA};
use crate::spcp::{
    default_lambda, default_mu, solve_dense, warm_start_extend, Decomposition, SpcpParams, DEFAULT_MAX_ITERS,
    DEFAULT_RANK_CAP, DEFAULT_REL_TOL,
};
use crate::time::format_hour;
use crate::timeseries::{build_matrix, cell_of, impute_missing, PeriodAlignment, TrafficMatrix, TrafficSeries, HOURS_PER_WEEK};

/// Periods in the first cold solve of a periodic refresh chain.
pub const INITIAL_PERIODS: usize = 3;

/// A tunable that is either estimated from the data or fixed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Setting {
    #[default]
    Auto,
    Fixed(f64),
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Setting::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => Ok(Setting::Fixed(v)),
            _ => Err(Error::Config(format!("expected `auto` or a positive number, got `{s}`"))),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Auto => f.write_str("auto"),
            Setting::Fixed(v) => write!(f, "{v}"),
        }
    }
}

/// How often a road's decomposition is refit as periods arrive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Refresh {
    /// One solve over all periods.
    Batch,
    /// Cold solve on the first periods, then a warm-started refit each time
    /// `k` more periods are complete.
    Every(usize),
}

impl Default for Refresh {
    fn default() -> Self {
        Refresh::Every(1)
    }
}

impl FromStr for Refresh {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("batch") {
            return Ok(Refresh::Batch);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(Refresh::Every(k)),
            _ => Err(Error::Config(format!("expected `batch` or a positive period count, got `{s}`"))),
        }
    }
}

impl fmt::Display for Refresh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Refresh::Batch => f.write_str("batch"),
            Refresh::Every(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    pub lambda: Setting,
    pub mu: Setting,
    pub rel_tol: f64,
    pub max_iters: usize,
    pub rank_cap: usize,
    pub tau_min: f64,
    pub theta: f64,
    pub epsilon: f64,
    pub period_hours: usize,
    pub alignment: PeriodAlignment,
    pub refresh: Refresh,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            lambda: Setting::Auto,
            mu: Setting::Auto,
            rel_tol: DEFAULT_REL_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            rank_cap: DEFAULT_RANK_CAP,
            tau_min: DEFAULT_TAU_MIN,
            theta: DEFAULT_THETA,
            epsilon: DEFAULT_EPSILON,
            period_hours: HOURS_PER_WEEK,
            alignment: PeriodAlignment::default(),
            refresh: Refresh::default(),
        }
    }
}

impl DetectConfig {
    /// Concrete solver parameters for `t`.
    pub fn spcp_params(&self, t: &DMatrix<f64>) -> SpcpParams {
        let (m, n) = t.shape();
        let lambda = match self.lambda {
            Setting::Auto => default_lambda(m, n),
            Setting::Fixed(v) => v,
        };
        let mu = match self.mu {
            Setting::Auto => default_mu(t),
            Setting::Fixed(v) => v,
        };
        SpcpParams {
            lambda,
            mu,
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            rank_cap: self.rank_cap,
        }
    }

    pub fn scoring(&self) -> ScoringParams {
        ScoringParams {
            tau_min: self.tau_min,
            theta: self.theta,
            epsilon: self.epsilon,
        }
    }
}

/// Diagnostics for one solve in a road's refresh chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub periods: usize,
    pub iterations: usize,
    pub converged: bool,
    pub warm: bool,
}

#[derive(Debug, Clone)]
pub struct RoadDetection {
    /// The imputed matrix that was decomposed.
    pub matrix: TrafficMatrix,
    pub decomposition: Decomposition,
    pub scores: RoadScores,
    pub solves: Vec<SolveStats>,
}

fn stats(dec: &Decomposition, warm: bool) -> SolveStats {
    SolveStats {
        periods: dec.shape().1,
        iterations: dec.iterations,
        converged: dec.converged,
        warm,
    }
}

/// Decomposes a dense matrix under the refresh policy, returning the final
/// decomposition and per-solve diagnostics.
pub fn decompose(t: &DMatrix<f64>, config: &DetectConfig) -> Result<(Decomposition, Vec<SolveStats>)> {
    let n = t.ncols();
    let step = match config.refresh {
        Refresh::Batch => n,
        Refresh::Every(k) => k,
    };
    let first = if step >= n { n } else { INITIAL_PERIODS.max(step).min(n) };
    let head = t.columns(0, first).into_owned();
    let mut dec = solve_dense(&head, &config.spcp_params(&head))?;
    let mut solves = vec![stats(&dec, false)];
    let mut done = first;
    while done < n {
        done = (done + step).min(n);
        let block = t.columns(0, done).into_owned();
        dec = warm_start_extend(&block, &dec, &config.spcp_params(&block))?;
        solves.push(stats(&dec, true));
    }
    Ok((dec, solves))
}

pub fn detect_road(series: &TrafficSeries, config: &DetectConfig) -> Result<RoadDetection> {
    let matrix = impute_missing(&build_matrix(series, config.period_hours, config.alignment)?);
    let (decomposition, solves) = decompose(&matrix.to_dense()?, config)?;
    let scores = RoadScores::from_decomposition(&matrix, &decomposition, &config.scoring())?;
    Ok(RoadDetection {
        matrix,
        decomposition,
        scores,
        solves,
    })
}

/// Runs detection for every road on the current rayon pool. Results keep the
/// input order; failures are collected into one report.
pub fn detect_roads(series: &[TrafficSeries], config: &DetectConfig) -> Result<Vec<RoadDetection>> {
    let results: Vec<Result<RoadDetection>> = series.par_iter().map(|s| detect_road(s, config)).collect();
    let mut ok = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (s, r) in series.iter().zip(results) {
        match r {
            Ok(d) => ok.push(d),
            Err(e) => failures.push((s.road_id().to_string(), e)),
        }
    }
    if failures.is_empty() {
        Ok(ok)
    } else {
        Err(Error::Roads(failures))
    }
}

/// Runs `f` on a pool of `workers` threads, or rayon's default size for `None`.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| Error::Internal(e.to_string()))?;
    Ok(pool.install(f))
}

pub fn anomaly_grid(detections: &[RoadDetection]) -> Result<AnomalyGrid> {
    AnomalyGrid::new(detections.iter().map(|d| d.scores.clone()).collect())
}

/// Writes `road_id,timestamp,T,L,A,E` for every in-window cell.
pub fn write_decomposition_csv<W: Write>(writer: W, detections: &[RoadDetection]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["road_id", "timestamp", "T", "L", "A", "E"])?;
    for d in detections {
        let m = d.matrix.period_hours();
        let dec = &d.decomposition;
        for g in d.matrix.window() {
            let (i, j) = cell_of(g, m);
            let t = dec.low_rank[(i, j)] + dec.sparse[(i, j)] + dec.noise[(i, j)];
            wtr.write_record([
                d.matrix.road_id().to_string(),
                format_hour(&d.matrix.timestamp_of(i, j)),
                t.to_string(),
                dec.low_rank[(i, j)].to_string(),
                dec.sparse[(i, j)].to_string(),
                dec.noise[(i, j)].to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Events and their summaries for a scored grid.
pub fn group_and_summarize(
    grid: &AnomalyGrid,
    network: &RoadNetwork,
    params: GroupingParams,
) -> Result<(Vec<AnomalyEvent>, Vec<EventSummary>)> {
    let events = group_anomalies(grid, network, params)?;
    let summaries = summarize_all(&events, grid, network, params)?;
    Ok((events, summaries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn weekly_series(weeks: usize) -> TrafficSeries {
        let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let values = (0..weeks * HOURS_PER_WEEK)
            .map(|h| {
                let hod = (h % 24) as f64;
                let week = (h / HOURS_PER_WEEK) as f64;
                Some(100.0 + 50.0 * (hod / 24.0 * std::f64::consts::TAU).sin() * (1.0 + 0.05 * week) + (h % 7) as f64)
            })
            .collect();
        TrafficSeries::new("a", start, values).unwrap()
    }

    #[test]
    fn settings_parse() {
        assert_eq!("auto".parse::<Setting>().unwrap(), Setting::Auto);
        assert_eq!("0.5".parse::<Setting>().unwrap(), Setting::Fixed(0.5));
        assert!("-1".parse::<Setting>().is_err());
        assert_eq!("batch".parse::<Refresh>().unwrap(), Refresh::Batch);
        assert_eq!("2".parse::<Refresh>().unwrap(), Refresh::Every(2));
        assert!("0".parse::<Refresh>().is_err());
    }

    #[test]
    fn auto_lambda_for_weekly_matrix() {
        let p = DetectConfig::default().spcp_params(&DMatrix::from_element(168, 7, 1.0));
        assert!((p.lambda - 0.0771517).abs() < 1e-7);
    }

    #[test]
    fn periodic_refresh_chain_shape() {
        let s = weekly_series(5);
        let d = detect_road(&s, &DetectConfig::default()).unwrap();
        let periods: Vec<usize> = d.solves.iter().map(|s| s.periods).collect();
        assert_eq!(periods, vec![3, 4, 5]);
        assert!(!d.solves[0].warm && d.solves[1..].iter().all(|s| s.warm));
        assert_eq!(d.scores.scores.len(), 5 * HOURS_PER_WEEK);

        let batch = detect_road(&s, &DetectConfig { refresh: Refresh::Batch, ..Default::default() }).unwrap();
        assert_eq!(batch.solves.len(), 1);
        let every3 = detect_road(&s, &DetectConfig { refresh: Refresh::Every(3), ..Default::default() }).unwrap();
        assert_eq!(every3.solves.iter().map(|s| s.periods).collect::<Vec<_>>(), vec![3, 5]);
    }

    #[test]
    fn failures_are_reported_per_road() {
        let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let short = TrafficSeries::new("short", start, vec![Some(1.0); 10]).unwrap();
        let err = detect_roads(&[weekly_series(2), short], &DetectConfig::default()).unwrap_err();
        match &err {
            Error::Roads(f) => {
                assert_eq!(f.len(), 1);
                assert_eq!(f[0].0, "short");
            }
            other => panic!("unexpected {other}"),
        }
        assert!(err.is_input_error());
    }

    #[test]
    fn decomposition_export_rows() {
        let d = detect_road(&weekly_series(2), &DetectConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_decomposition_csv(&mut buf, &[d]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * HOURS_PER_WEEK);
        assert!(text.starts_with("road_id,timestamp,T,L,A,E\na,2024-01-01T00:00:00Z,"));
    }
}
