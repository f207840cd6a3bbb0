//! Synthetic scenarios with planted anomalies and ground truth.
//!
//! Expected traffic on each road is a mix of one or two smooth hour-of-week
//! templates, one with weekday commute peaks and one peaking in the evening
//! and on weekends, with per-week coefficients. Anomalies are planted as
//! blocks of consecutive hours over a connected handful of nearby roads, then
//! Gaussian noise is added and volumes are clamped at zero.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};

use chrono::{NaiveDate, NaiveDateTime};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::events::AnomalyEvent;
use crate::network::{NodeAttrs, RoadNetwork};
use crate::scoring::{AnomalyGrid, Flag};
use crate::time::{format_hour, from_hour_index, hour_index, parse_timestamp};
use crate::timeseries::{TrafficSeries, HOURS_PER_WEEK};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NetworkModel {
    /// Near-square lattice with 4-neighbor adjacency.
    Grid,
    /// Random spanning tree plus uniform extra edges up to the mean degree.
    Random { mean_degree: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub road_count: usize,
    pub weeks: usize,
    pub network: NetworkModel,
    /// Number of weekly templates mixed per road, 1 or 2.
    pub profile_rank: usize,
    /// Range of per-road volume scale.
    pub base_scale: (f64, f64),
    /// Relative week-to-week variation of template coefficients.
    pub weekly_variation: f64,
    /// Noise standard deviation as a fraction of the road's mean expected volume.
    pub noise_sigma: f64,
    /// Target fraction of anomalous cells.
    pub anomaly_rate: f64,
    /// Stop planting after this many events even if the rate is not reached.
    pub max_events: Option<usize>,
    /// Minimum anomaly magnitude in multiples of the road's noise deviation.
    pub magnitude_noise_multiple: f64,
    /// Anomaly magnitude range as a fraction of expected volume.
    pub magnitude_volume_range: (f64, f64),
    /// Probability that an event is a drop rather than a surge.
    pub negative_fraction: f64,
    pub roads_per_event: (usize, usize),
    pub duration_hours: (usize, usize),
    /// First hour of the scenario; should be a Monday midnight to align with weeks.
    pub start: NaiveDateTime,
    pub rng_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            road_count: 200,
            weeks: 7,
            network: NetworkModel::Random { mean_degree: 4.0 },
            profile_rank: 2,
            base_scale: (100.0, 400.0),
            weekly_variation: 0.1,
            noise_sigma: 0.05,
            anomaly_rate: 0.02,
            max_events: None,
            magnitude_noise_multiple: 5.0,
            magnitude_volume_range: (0.75, 1.5),
            negative_fraction: 0.25,
            roads_per_event: (1, 4),
            duration_hours: (4, 8),
            start: NaiveDate::from_ymd_opt(2024, 1, 1)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap(),
            rng_seed: 42,
        }
    }
}

impl ScenarioConfig {
    pub fn total_hours(&self) -> usize {
        self.weeks * HOURS_PER_WEEK
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.road_count == 0 || self.weeks == 0 {
            return bad("road_count and weeks must be positive".into());
        }
        if !matches!(self.profile_rank, 1 | 2) {
            return bad(format!("profile_rank must be 1 or 2, got {}", self.profile_rank));
        }
        for (name, v) in [
            ("anomaly_rate", self.anomaly_rate),
            ("negative_fraction", self.negative_fraction),
            ("noise_sigma", self.noise_sigma),
            ("weekly_variation", self.weekly_variation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        let (lo, hi) = self.base_scale;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("invalid base_scale range ({lo}, {hi})"));
        }
        let (lo, hi) = self.magnitude_volume_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) || self.magnitude_noise_multiple <= 0.0 {
            return bad("anomaly magnitudes must be positive".into());
        }
        if let NetworkModel::Random { mean_degree } = self.network {
            if mean_degree.is_nan() || mean_degree < 0.0 {
                return bad(format!("mean_degree must be nonnegative, got {mean_degree}"));
            }
        }
        Ok(())
    }

    /// Checks that the requested anomaly blocks fit in the scenario.
    fn check_feasible(&self) -> Result<()> {
        let (rlo, rhi) = self.roads_per_event;
        let (dlo, dhi) = self.duration_hours;
        if rlo == 0 || rhi < rlo || dlo == 0 || dhi < dlo {
            return Err(Error::InfeasibleScenario("event shape ranges must be positive and ordered".into()));
        }
        if rhi > self.road_count {
            return Err(Error::InfeasibleScenario(format!(
                "events span up to {rhi} roads but the network has {}",
                self.road_count
            )));
        }
        if dhi > self.total_hours() {
            return Err(Error::InfeasibleScenario(format!(
                "events last up to {dhi} hours but the series has {}",
                self.total_hours()
            )));
        }
        if self.anomaly_rate > 0.5 && self.max_events.is_none() {
            return Err(Error::InfeasibleScenario(format!(
                "anomaly_rate {} leaves too few normal cells",
                self.anomaly_rate
            )));
        }
        Ok(())
    }
}

/// One planted anomalous road-hour.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCell {
    pub road_id: String,
    /// Hours since the Unix epoch.
    pub hour: i64,
    /// Signed planted anomaly before clamping.
    pub magnitude: f64,
    pub event_id: usize,
}

/// Components that make up one road's generated volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadTruth {
    pub road_id: String,
    pub expected: Vec<f64>,
    pub anomaly: Vec<f64>,
    pub noise: Vec<f64>,
    /// Noise standard deviation used for this road.
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub start: NaiveDateTime,
    pub roads: Vec<RoadTruth>,
    /// Sorted by `(hour, road_id)`.
    pub cells: Vec<PlantedCell>,
    pub event_count: usize,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub network: RoadNetwork,
    pub series: Vec<TrafficSeries>,
    pub truth: GroundTruth,
}

const STREAM_NETWORK: u64 = 0;
const STREAM_PLANTING: u64 = 1;

fn road_stream(seed: u64, road: usize, noise: bool) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + 2 * road as u64 + noise as u64);
    rng
}

fn bump(x: f64, center: f64, width: f64) -> f64 {
    (-0.5 * ((x - center) / width).powi(2)).exp()
}

/// Weekday commute template and evening/weekend template over one week.
pub fn weekly_templates() -> [Vec<f64>; 2] {
    let mut commute = Vec::with_capacity(HOURS_PER_WEEK);
    let mut evening = Vec::with_capacity(HOURS_PER_WEEK);
    for h in 0..HOURS_PER_WEEK {
        let day = h / 24;
        let hod = (h % 24) as f64;
        let weekday = day < 5;
        let c = 0.25
            + if weekday {
                bump(hod, 8.0, 1.5) + bump(hod, 17.0, 2.0)
            } else {
                0.6 * bump(hod, 14.0, 3.0)
            }
            + 0.3 * bump(hod, 13.0, 4.0);
        let e = 0.2
            + 0.5 * bump(hod, 20.0, 2.5)
            + if day >= 4 { 0.6 * bump(hod, 21.0, 2.0) } else { 0.0 }
            + 0.2 * bump(hod, 12.0, 5.0);
        commute.push(c);
        evening.push(e);
    }
    [commute, evening]
}

fn road_ids(count: usize) -> Vec<String> {
    let width = (count.saturating_sub(1)).to_string().len().max(3);
    (0..count).map(|k| format!("r{k:0width$}")).collect()
}

fn build_network(config: &ScenarioConfig, ids: &[String]) -> Result<RoadNetwork> {
    let n = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(STREAM_NETWORK);
    let mut edges = BTreeSet::new();
    let mut coords = Vec::with_capacity(n);
    match config.network {
        NetworkModel::Grid => {
            let cols = (n as f64).sqrt().ceil() as usize;
            for k in 0..n {
                let (row, col) = (k / cols, k % cols);
                coords.push((col as f64, row as f64));
                if col + 1 < cols && k + 1 < n {
                    edges.insert((k, k + 1));
                }
                if k + cols < n {
                    edges.insert((k, k + cols));
                }
            }
        }
        NetworkModel::Random { mean_degree } => {
            let max_edges = n * (n - 1) / 2;
            let target = ((mean_degree * n as f64 / 2.0).round() as usize).max(n - 1);
            if target > max_edges {
                return Err(Error::InfeasibleScenario(format!(
                    "mean degree {mean_degree} needs {target} edges but {n} roads allow {max_edges}"
                )));
            }
            for k in 1..n {
                edges.insert((rng.random_range(0..k), k));
            }
            while edges.len() < target {
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n);
                if a != b {
                    edges.insert((a.min(b), a.max(b)));
                }
            }
            for _ in 0..n {
                coords.push((rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)));
            }
        }
    }
    let nodes = ids
        .iter()
        .zip(coords)
        .map(|(id, c)| NodeAttrs {
            id: id.clone(),
            coords: Some(c),
            hop_override: None,
        })
        .collect();
    RoadNetwork::from_parts(edges.iter().map(|&(a, b)| (ids[a].as_str(), ids[b].as_str())), nodes)
}

fn expected_volumes(config: &ScenarioConfig, road: usize, templates: &[Vec<f64>; 2]) -> Vec<f64> {
    let mut rng = road_stream(config.rng_seed, road, false);
    let scale = rng.random_range(config.base_scale.0..=config.base_scale.1);
    let weekly = |rng: &mut ChaCha8Rng, level: f64| -> Vec<f64> {
        (0..config.weeks)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                level * (1.0 + config.weekly_variation * z).max(0.1)
            })
            .collect()
    };
    let mix: Vec<(usize, Vec<f64>)> = if config.profile_rank == 1 {
        let which = usize::from(rng.random_bool(0.5));
        let level = rng.random_range(0.3..1.0);
        vec![(which, weekly(&mut rng, level))]
    } else {
        let (a, b) = (rng.random_range(0.3..1.0), rng.random_range(0.3..1.0));
        vec![(0, weekly(&mut rng, a)), (1, weekly(&mut rng, b))]
    };
    let mut out = vec![0.0; config.total_hours()];
    for (template, coefs) in mix {
        for (week, c) in coefs.iter().enumerate() {
            for (h, t) in templates[template].iter().enumerate() {
                out[week * HOURS_PER_WEEK + h] += scale * c * t;
            }
        }
    }
    out
}

/// Grows a connected set of `size` roads from `seed` by adding random
/// neighbors of roads already chosen.
fn connected_roads(net: &RoadNetwork, seed: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut chosen = vec![seed];
    let mut member: HashSet<usize> = HashSet::from([seed]);
    while chosen.len() < size {
        let frontier: Vec<usize> = chosen
            .iter()
            .flat_map(|&r| net.neighbors(r).iter().copied())
            .filter(|v| !member.contains(v))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if frontier.is_empty() {
            break;
        }
        let next = frontier[rng.random_range(0..frontier.len())];
        member.insert(next);
        chosen.push(next);
    }
    chosen
}

/// Anomaly volumes per road, planted (road, hour, volume, event) cells and event count.
type Planted = (Vec<Vec<f64>>, Vec<(usize, usize, f64, usize)>, usize);

fn plant_anomalies(
    config: &ScenarioConfig,
    net: &RoadNetwork,
    expected: &[Vec<f64>],
    sigmas: &[f64],
) -> Result<Planted> {
    let hours = config.total_hours();
    let n = expected.len();
    let mut anomaly = vec![vec![0.0; hours]; n];
    let mut planted = Vec::new();
    let target = (config.anomaly_rate * (n * hours) as f64).ceil() as usize;
    let max_events = config.max_events.unwrap_or(usize::MAX);
    if target == 0 || max_events == 0 {
        return Ok((anomaly, planted, 0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(STREAM_PLANTING);
    let (rlo, rhi) = config.roads_per_event;
    let (dlo, dhi) = config.duration_hours;
    let (vlo, vhi) = config.magnitude_volume_range;
    let k_noise = config.magnitude_noise_multiple;
    let attempt_cap = 100 * (target + 1);
    let mut events = 0;
    let mut attempts = 0;
    while planted.len() < target && events < max_events {
        attempts += 1;
        if attempts > attempt_cap {
            return Err(Error::InfeasibleScenario(format!(
                "placed {} of {target} anomalous cells before running out of room",
                planted.len()
            )));
        }
        let seed_road = rng.random_range(0..n);
        let size = rng.random_range(rlo..=rhi);
        let duration = rng.random_range(dlo..=dhi);
        let start = rng.random_range(0..=hours - duration);
        let roads = connected_roads(net, seed_road, size, &mut rng);
        let cells: Vec<(usize, usize)> = roads
            .iter()
            .flat_map(|&r| (start..start + duration).map(move |h| (r, h)))
            .filter(|&(r, h)| anomaly[r][h] == 0.0)
            .collect();
        if cells.is_empty() {
            continue;
        }
        // A drop must stay above a tenth of the expected volume while still
        // clearing the noise floor; otherwise the event is a surge.
        let drop_ok = cells
            .iter()
            .all(|&(r, h)| k_noise * sigmas[r] <= 0.9 * expected[r][h]);
        let negative = drop_ok && rng.random_bool(config.negative_fraction);
        for (r, h) in cells {
            let base = expected[r][h];
            let mut magnitude = (k_noise * sigmas[r]).max(rng.random_range(vlo..=vhi) * base);
            if negative {
                magnitude = -magnitude.min(0.9 * base);
            }
            anomaly[r][h] = magnitude;
            planted.push((r, h, magnitude, events));
        }
        events += 1;
    }
    Ok((anomaly, planted, events))
}

/// Builds a scenario; identical configs give bit-identical output.
pub fn generate(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    config.check_feasible()?;
    let ids = road_ids(config.road_count);
    let network = build_network(config, &ids)?;
    let templates = weekly_templates();
    let hours = config.total_hours();

    let expected: Vec<Vec<f64>> = (0..config.road_count)
        .map(|r| expected_volumes(config, r, &templates))
        .collect();
    let sigmas: Vec<f64> = expected
        .iter()
        .map(|e| config.noise_sigma * e.iter().sum::<f64>() / hours as f64)
        .collect();
    let (anomaly, planted, event_count) = plant_anomalies(config, &network, &expected, &sigmas)?;

    let base_hour = hour_index(&config.start);
    let mut roads = Vec::with_capacity(config.road_count);
    let mut series = Vec::with_capacity(config.road_count);
    for (r, id) in ids.iter().enumerate() {
        let mut rng = road_stream(config.rng_seed, r, true);
        let noise: Vec<f64> = (0..hours)
            .map(|_| sigmas[r] * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let values = (0..hours)
            .map(|h| Some((expected[r][h] + anomaly[r][h] + noise[h]).max(0.0)))
            .collect();
        series.push(TrafficSeries::new(id.clone(), config.start, values)?);
        roads.push(RoadTruth {
            road_id: id.clone(),
            expected: expected[r].clone(),
            anomaly: anomaly[r].clone(),
            noise,
            noise_sigma: sigmas[r],
        });
    }
    let mut cells: Vec<PlantedCell> = planted
        .into_iter()
        .map(|(r, h, magnitude, event_id)| PlantedCell {
            road_id: ids[r].clone(),
            hour: base_hour + h as i64,
            magnitude,
            event_id,
        })
        .collect();
    cells.sort_by(|a, b| (a.hour, &a.road_id).cmp(&(b.hour, &b.road_id)));
    Ok(Scenario {
        network,
        series,
        truth: GroundTruth {
            start: config.start,
            roads,
            cells,
            event_count,
        },
    })
}

/// Writes planted cells as `road_id,timestamp,planted_magnitude,event_id`.
pub fn write_truth_csv<W: Write>(writer: W, cells: &[PlantedCell]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["road_id", "timestamp", "planted_magnitude", "event_id"])?;
    for c in cells {
        wtr.write_record([
            c.road_id.clone(),
            format_hour(&from_hour_index(c.hour)),
            c.magnitude.to_string(),
            c.event_id.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_truth_csv<R: Read>(reader: R) -> Result<Vec<PlantedCell>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let expected = ["road_id", "timestamp", "planted_magnitude", "event_id"];
    if rdr.headers()?.iter().collect::<Vec<_>>() != expected {
        return Err(Error::malformed(1, format!("expected header {}", expected.join(","))));
    }
    let mut cells = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let line = k as u64 + 2;
        let record = record?;
        if record.len() != 4 {
            return Err(Error::malformed(line, format!("expected 4 fields, got {}", record.len())));
        }
        let ts = parse_timestamp(&record[1]).ok_or_else(|| Error::malformed(line, format!("bad timestamp `{}`", &record[1])))?;
        let magnitude = record[2]
            .parse()
            .map_err(|_| Error::malformed(line, format!("bad magnitude `{}`", &record[2])))?;
        let event_id = record[3]
            .parse()
            .map_err(|_| Error::malformed(line, format!("bad event id `{}`", &record[3])))?;
        cells.push(PlantedCell {
            road_id: record[0].to_string(),
            hour: hour_index(&ts),
            magnitude,
            event_id,
        });
    }
    Ok(cells)
}

/// Cell- and event-level detection quality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    /// Cells excluded because their score is NA.
    pub na_cells: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when nothing was predicted; precision is then reported as 0.
    pub precision_defined: bool,
    /// False when nothing was planted; recall is then reported as 0.
    pub recall_defined: bool,
    pub planted_events: usize,
    pub detected_planted_events: usize,
    pub event_recall: f64,
}

/// Compares flags against planted cells. A planted event counts as detected
/// when any of its cells is predicted anomalous, which is exactly when some
/// detected event contains it.
pub fn evaluate(grid: &AnomalyGrid, truth: &[PlantedCell]) -> Metrics {
    let planted: HashMap<(&str, i64), usize> = truth.iter().map(|c| ((c.road_id.as_str(), c.hour), c.event_id)).collect();
    let (mut tp, mut fp, mut fn_, mut tn, mut na) = (0, 0, 0, 0, 0);
    let mut hit_events = HashSet::new();
    for road in grid.roads() {
        for (hour, flag) in road.hours().zip(&road.flags) {
            let truth_event = planted.get(&(road.road_id.as_str(), hour));
            match (flag, truth_event) {
                (Flag::Na, _) => na += 1,
                (Flag::Anomalous, Some(&e)) => {
                    tp += 1;
                    hit_events.insert(e);
                }
                (Flag::Anomalous, None) => fp += 1,
                (Flag::Normal, Some(_)) => fn_ += 1,
                (Flag::Normal, None) => tn += 1,
            }
        }
    }
    let precision_defined = tp + fp > 0;
    let recall_defined = tp + fn_ > 0;
    let precision = if precision_defined { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if recall_defined { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let planted_events: BTreeSet<usize> = truth.iter().map(|c| c.event_id).collect();
    let event_recall = if planted_events.is_empty() {
        0.0
    } else {
        hit_events.len() as f64 / planted_events.len() as f64
    };
    Metrics {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        true_negatives: tn,
        na_cells: na,
        precision,
        recall,
        f1,
        precision_defined,
        recall_defined,
        planted_events: planted_events.len(),
        detected_planted_events: hit_events.len(),
        event_recall,
    }
}

/// Planted events intersected by at least one detected event, and their share
/// of all planted events.
pub fn event_recall_of(events: &[AnomalyEvent], truth: &[PlantedCell]) -> (usize, f64) {
    let planted: HashMap<(&str, i64), usize> = truth.iter().map(|c| ((c.road_id.as_str(), c.hour), c.event_id)).collect();
    let hit: HashSet<usize> = events
        .iter()
        .flat_map(|e| &e.cells)
        .filter_map(|c| planted.get(&(c.road_id.as_str(), c.hour)).copied())
        .collect();
    let total = truth.iter().map(|c| c.event_id).collect::<BTreeSet<_>>().len();
    let recall = if total == 0 { 0.0 } else { hit.len() as f64 / total as f64 };
    (hit.len(), recall)
}
