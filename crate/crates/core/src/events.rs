//! Grouping flagged road-hours into anomaly events.
//!
//! Two flagged cells `(r1, t1)` and `(r2, t2)` are adjacent when the roads are
//! within the hop radius of each other and `|t1 - t2| <= s`. Events are the
//! connected components of that adjacency. They are found by breadth-first
//! expansion from each ungrouped cell until nothing flagged remains in reach.
//! Components do not depend on which seed is picked first or in which order
//! neighbors are appended. Event ids follow the canonical order of each
//! event's earliest `(hour, road_id)` cell.
//!
//! With per-road hop overrides the radius for a pair is the larger of the two
//! roads' radii, so adjacency stays symmetric.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, RngExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::network::RoadNetwork;
use crate::scoring::AnomalyGrid;
use crate::stats::median;
use crate::time::{format_hour, from_hour_index, hour_index, parse_timestamp};

pub const DEFAULT_HOPS: usize = 5;
pub const DEFAULT_TIME_WINDOW: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupingParams {
    /// Hop radius `n` on the road network.
    pub hops: usize,
    /// Time window `s` in hours, before and after.
    pub time_window: usize,
}

impl Default for GroupingParams {
    fn default() -> Self {
        Self {
            hops: DEFAULT_HOPS,
            time_window: DEFAULT_TIME_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventCell {
    /// Hours since the Unix epoch.
    pub hour: i64,
    pub road_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnomalyEvent {
    pub id: usize,
    /// Sorted by `(hour, road_id)`.
    pub cells: Vec<EventCell>,
}

impl AnomalyEvent {
    pub fn first_cell(&self) -> &EventCell {
        &self.cells[0]
    }
}

/// Flagged cells indexed by road for window lookups.
struct CellIndex {
    /// Network node per flagged road, ascending.
    roads: Vec<usize>,
    /// Sorted flagged hours per entry of `roads`.
    hours: Vec<Vec<i64>>,
    /// Component label per cell, parallel to `hours`.
    labels: Vec<Vec<Option<usize>>>,
    /// For each entry of `roads`, the positions (into `roads`) of flagged roads in reach.
    reach: Vec<Vec<usize>>,
}

impl CellIndex {
    fn build(cells: &[(usize, i64)], net: &RoadNetwork, hops: usize) -> Self {
        let mut by_road: BTreeMap<usize, Vec<i64>> = BTreeMap::new();
        for &(r, t) in cells {
            by_road.entry(r).or_default().push(t);
        }
        let roads: Vec<usize> = by_road.keys().copied().collect();
        let hours: Vec<Vec<i64>> = by_road
            .into_values()
            .map(|mut h| {
                h.sort_unstable();
                h.dedup();
                h
            })
            .collect();
        let labels = hours.iter().map(|h| vec![None; h.len()]).collect();
        let position: HashMap<usize, usize> = roads.iter().enumerate().map(|(k, &r)| (r, k)).collect();
        let max_radius = roads.iter().map(|&r| net.hop_radius(r, hops)).max().unwrap_or(hops);
        let reach = roads
            .iter()
            .map(|&r| {
                let own = net.hop_radius(r, hops);
                let mut out: Vec<usize> = net
                    .hop_ball(r, max_radius)
                    .into_iter()
                    .filter_map(|(v, d)| {
                        let k = *position.get(&v)?;
                        (d <= own.max(net.hop_radius(v, hops))).then_some(k)
                    })
                    .collect();
                out.sort_unstable();
                out
            })
            .collect();
        Self {
            roads,
            hours,
            labels,
            reach,
        }
    }

    /// Cells adjacent to `(road position, hour)`, as `(road position, hour slot)`.
    fn neighbors(&self, road: usize, hour: i64, s: i64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &k in &self.reach[road] {
            let hours = &self.hours[k];
            let lo = hours.partition_point(|&h| h < hour - s);
            let hi = hours.partition_point(|&h| h <= hour + s);
            out.extend((lo..hi).map(|slot| (k, slot)));
        }
        out
    }
}

fn flagged_nodes(grid: &AnomalyGrid, net: &RoadNetwork) -> Result<Vec<(usize, i64)>> {
    net.validate_roads(grid.road_ids())?;
    Ok(grid
        .flagged_cells()
        .into_iter()
        .map(|(road, hour)| (net.index_of(road).expect("validated"), hour))
        .collect())
}

/// Connected components of flagged cells under `(hops, time_window)` adjacency.
pub fn group_anomalies(grid: &AnomalyGrid, net: &RoadNetwork, params: GroupingParams) -> Result<Vec<AnomalyEvent>> {
    let cells = flagged_nodes(grid, net)?;
    let mut index = CellIndex::build(&cells, net, params.hops);
    let s = params.time_window as i64;

    // Seeds in canonical (hour, road) order.
    let mut seeds: Vec<(i64, usize, usize)> = index
        .hours
        .iter()
        .enumerate()
        .flat_map(|(k, hs)| hs.iter().enumerate().map(move |(slot, &h)| (h, k, slot)))
        .collect();
    seeds.sort_unstable();

    let mut components = 0;
    for (_, k, slot) in seeds {
        if index.labels[k][slot].is_some() {
            continue;
        }
        let label = components;
        components += 1;
        index.labels[k][slot] = Some(label);
        let mut queue = VecDeque::from([(k, slot)]);
        while let Some((road, slot)) = queue.pop_front() {
            let hour = index.hours[road][slot];
            for (nk, ns) in index.neighbors(road, hour, s) {
                if index.labels[nk][ns].is_none() {
                    index.labels[nk][ns] = Some(label);
                    queue.push_back((nk, ns));
                }
            }
        }
    }
    Ok(collect_events(&index, net))
}

/// Same grouping with a randomized seed order, randomized neighbor append
/// order and a random mix of queue and stack expansion. The resulting
/// partition must not depend on `rng`.
pub fn group_anomalies_shuffled<R: Rng + ?Sized>(
    grid: &AnomalyGrid,
    net: &RoadNetwork,
    params: GroupingParams,
    rng: &mut R,
) -> Result<Vec<AnomalyEvent>> {
    let cells = flagged_nodes(grid, net)?;
    let mut index = CellIndex::build(&cells, net, params.hops);
    let s = params.time_window as i64;
    let mut seeds: Vec<(usize, usize)> = index
        .hours
        .iter()
        .enumerate()
        .flat_map(|(k, hs)| (0..hs.len()).map(move |slot| (k, slot)))
        .collect();
    seeds.shuffle(rng);

    let mut components = 0;
    for (k, slot) in seeds {
        if index.labels[k][slot].is_some() {
            continue;
        }
        let label = components;
        components += 1;
        index.labels[k][slot] = Some(label);
        let mut frontier = VecDeque::from([(k, slot)]);
        loop {
            let next = if rng.random_bool(0.5) {
                frontier.pop_front()
            } else {
                frontier.pop_back()
            };
            let Some((road, slot)) = next else { break };
            let hour = index.hours[road][slot];
            let mut nbrs = index.neighbors(road, hour, s);
            nbrs.shuffle(rng);
            for (nk, ns) in nbrs {
                if index.labels[nk][ns].is_none() {
                    index.labels[nk][ns] = Some(label);
                    frontier.push_back((nk, ns));
                }
            }
        }
    }
    Ok(collect_events(&index, net))
}

fn collect_events(index: &CellIndex, net: &RoadNetwork) -> Vec<AnomalyEvent> {
    let mut groups: HashMap<usize, Vec<EventCell>> = HashMap::new();
    for (k, &road) in index.roads.iter().enumerate() {
        for (slot, &hour) in index.hours[k].iter().enumerate() {
            let label = index.labels[k][slot].expect("every flagged cell is labeled");
            groups.entry(label).or_default().push(EventCell {
                hour,
                road_id: net.id(road).to_string(),
            });
        }
    }
    let mut events: Vec<Vec<EventCell>> = groups
        .into_values()
        .map(|mut cells| {
            cells.sort();
            cells
        })
        .collect();
    events.sort_by(|a, b| a[0].cmp(&b[0]));
    events
        .into_iter()
        .enumerate()
        .map(|(id, cells)| AnomalyEvent { id, cells })
        .collect()
}

/// Quantities describing one event.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventSummary {
    pub cell_count: usize,
    pub road_count: usize,
    pub first_hour: i64,
    pub last_hour: i64,
    /// Hours between the first and last cell.
    pub time_span: i64,
    /// Hour with the largest total `|score|`; the earliest on ties.
    pub peak_hour: i64,
    pub mean_hour: f64,
    /// Standard deviation of cell hours.
    pub hour_spread: f64,
    /// Mean `(lon, lat)` over cells whose road has coordinates.
    pub centroid: Option<(f64, f64)>,
    /// Mean planar distance of located cells from the centroid.
    pub spatial_spread: Option<f64>,
    pub score_max: f64,
    pub score_median: f64,
    pub score_min: f64,
    /// Sum of `|score|` over cells.
    pub seriousness: f64,
    /// Cells at or before the peak per hour from the first hour to the peak.
    pub birth_speed: f64,
    /// Cells at or after the peak per hour from the peak to the last hour.
    pub death_speed: f64,
    /// Mean second difference of the cumulative cell count over the birth hours.
    pub birth_acceleration: f64,
    /// Mean second difference of the cumulative cell count over the death hours.
    pub death_acceleration: f64,
    /// Mean shortest-path length over pairs of cells in the event's cell graph.
    pub avg_path_length: f64,
    pub avg_degree: f64,
}

/// Adjacency lists of the cell graph induced on `cells`.
pub fn cell_graph(cells: &[EventCell], net: &RoadNetwork, params: GroupingParams) -> Result<Vec<Vec<usize>>> {
    let mut by_road: BTreeMap<usize, Vec<(i64, usize)>> = BTreeMap::new();
    for (k, c) in cells.iter().enumerate() {
        let r = net
            .index_of(&c.road_id)
            .ok_or_else(|| Error::UnknownRoad(c.road_id.clone()))?;
        by_road.entry(r).or_default().push((c.hour, k));
    }
    for list in by_road.values_mut() {
        list.sort_unstable();
    }
    let roads: Vec<usize> = by_road.keys().copied().collect();
    let max_radius = roads
        .iter()
        .map(|&r| net.hop_radius(r, params.hops))
        .max()
        .unwrap_or(params.hops);
    let s = params.time_window as i64;
    let mut adjacency = vec![Vec::new(); cells.len()];
    for &r in &roads {
        let own = net.hop_radius(r, params.hops);
        let in_reach: Vec<usize> = net
            .hop_ball(r, max_radius)
            .into_iter()
            .filter(|&(v, d)| by_road.contains_key(&v) && d <= own.max(net.hop_radius(v, params.hops)))
            .map(|(v, _)| v)
            .collect();
        for &(hour, k) in &by_road[&r] {
            for v in &in_reach {
                let list = &by_road[v];
                let lo = list.partition_point(|&(h, _)| h < hour - s);
                let hi = list.partition_point(|&(h, _)| h <= hour + s);
                adjacency[k].extend(list[lo..hi].iter().map(|&(_, j)| j).filter(|&j| j != k));
            }
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    Ok(adjacency)
}

fn bfs_distance_sum(adjacency: &[Vec<usize>], source: usize) -> (u64, u64) {
    let mut dist = vec![u32::MAX; adjacency.len()];
    dist[source] = 0;
    let mut queue = VecDeque::from([source]);
    let (mut sum, mut reached) = (0u64, 0u64);
    while let Some(u) = queue.pop_front() {
        for &v in &adjacency[u] {
            if dist[v] == u32::MAX {
                dist[v] = dist[u] + 1;
                sum += dist[v] as u64;
                reached += 1;
                queue.push_back(v);
            }
        }
    }
    (sum, reached)
}

pub fn summarize_event(
    event: &AnomalyEvent,
    grid: &AnomalyGrid,
    net: &RoadNetwork,
    params: GroupingParams,
) -> Result<EventSummary> {
    let cells = &event.cells;
    if cells.is_empty() {
        return Err(Error::InvalidInput(format!("event {} has no cells", event.id)));
    }
    let scores: Vec<f64> = cells
        .iter()
        .map(|c| {
            grid.score_at(&c.road_id, c.hour).ok_or_else(|| {
                Error::InvalidInput(format!("event {} cell ({}, {}) has no score", event.id, c.road_id, c.hour))
            })
        })
        .collect::<Result<_>>()?;
    let count = cells.len();
    let first = cells.iter().map(|c| c.hour).min().expect("nonempty");
    let last = cells.iter().map(|c| c.hour).max().expect("nonempty");

    let mut per_hour: BTreeMap<i64, (usize, f64)> = BTreeMap::new();
    for (c, s) in cells.iter().zip(&scores) {
        let entry = per_hour.entry(c.hour).or_default();
        entry.0 += 1;
        entry.1 += s.abs();
    }
    let peak = per_hour
        .iter()
        .fold((first, f64::NEG_INFINITY), |best, (&h, &(_, mass))| if mass > best.1 { (h, mass) } else { best })
        .0;
    let new_at = |h: i64| per_hour.get(&h).map(|e| e.0).unwrap_or(0) as f64;
    let before = cells.iter().filter(|c| c.hour <= peak).count() as f64;
    let after = cells.iter().filter(|c| c.hour >= peak).count() as f64;
    let birth_hours = (peak - first + 1) as f64;
    let death_hours = (last - peak + 1) as f64;
    // Second differences of the cumulative count telescope to differences of
    // per-hour arrivals across each window.
    let birth_acceleration = (new_at(peak) - new_at(first - 1)) / birth_hours;
    let death_acceleration = (new_at(last + 1) - new_at(peak)) / death_hours;

    let hours: Vec<f64> = cells.iter().map(|c| c.hour as f64).collect();
    let mean_hour = hours.iter().sum::<f64>() / count as f64;
    let hour_spread = (hours.iter().map(|h| (h - mean_hour).powi(2)).sum::<f64>() / count as f64).sqrt();

    let located: Vec<(f64, f64)> = cells
        .iter()
        .filter_map(|c| net.index_of(&c.road_id).and_then(|k| net.coords(k)))
        .collect();
    let centroid = (!located.is_empty()).then(|| {
        let k = located.len() as f64;
        (
            located.iter().map(|p| p.0).sum::<f64>() / k,
            located.iter().map(|p| p.1).sum::<f64>() / k,
        )
    });
    let spatial_spread = centroid.map(|(cx, cy)| {
        located.iter().map(|(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt()).sum::<f64>() / located.len() as f64
    });

    let mut roads: Vec<&str> = cells.iter().map(|c| c.road_id.as_str()).collect();
    roads.sort_unstable();
    roads.dedup();

    let adjacency = cell_graph(cells, net, params)?;
    let avg_degree = adjacency.iter().map(Vec::len).sum::<usize>() as f64 / count as f64;
    let (dist_sum, pairs) = (0..count)
        .into_par_iter()
        .map(|k| bfs_distance_sum(&adjacency, k))
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let avg_path_length = if pairs == 0 { 0.0 } else { dist_sum as f64 / pairs as f64 };

    Ok(EventSummary {
        cell_count: count,
        road_count: roads.len(),
        first_hour: first,
        last_hour: last,
        time_span: last - first,
        peak_hour: peak,
        mean_hour,
        hour_spread,
        centroid,
        spatial_spread,
        score_max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        score_median: median(&scores).expect("nonempty"),
        score_min: scores.iter().copied().fold(f64::INFINITY, f64::min),
        seriousness: scores.iter().map(|s| s.abs()).sum(),
        birth_speed: before / birth_hours,
        death_speed: after / death_hours,
        birth_acceleration,
        death_acceleration,
        avg_path_length,
        avg_degree,
    })
}

/// Summaries for all events, computed in parallel, in event order.
pub fn summarize_all(
    events: &[AnomalyEvent],
    grid: &AnomalyGrid,
    net: &RoadNetwork,
    params: GroupingParams,
) -> Result<Vec<EventSummary>> {
    events
        .par_iter()
        .map(|e| summarize_event(e, grid, net, params))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CellRecord {
    road_id: String,
    hour: String,
}

/// One NDJSON line per event with its cells and summary.
pub fn write_events_ndjson<W: Write>(mut writer: W, events: &[AnomalyEvent], summaries: &[EventSummary]) -> Result<()> {
    for (event, summary) in events.iter().zip(summaries) {
        let cells: Vec<CellRecord> = event
            .cells
            .iter()
            .map(|c| CellRecord {
                road_id: c.road_id.clone(),
                hour: format_hour(&from_hour_index(c.hour)),
                })
            .collect();
        let mut summary_json = serde_json::to_value(summary)?;
        for key in ["first_hour", "last_hour", "peak_hour"] {
            let h = summary_json[key].as_i64().expect("integer hour");
            summary_json[key] = json!(format_hour(&from_hour_index(h)));
        }
        let line = json!({ "id": event.id, "cells": cells, "summary": summary_json });
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads event ids and cells back from NDJSON; summaries are ignored.
pub fn read_events_ndjson<R: BufRead>(reader: R) -> Result<Vec<AnomalyEvent>> {
    #[derive(Deserialize)]
    struct Record {
        id: usize,
        cells: Vec<CellRecord>,
    }
    let mut events = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|e| Error::malformed(k as u64 + 1, e.to_string()))?;
        let cells = record
            .cells
            .into_iter()
            .map(|c| {
                let ts = parse_timestamp(&c.hour)
                    .ok_or_else(|| Error::malformed(k as u64 + 1, format!("bad hour `{}`", c.hour)))?;
                Ok(EventCell {
                    hour: hour_index(&ts),
                    road_id: c.road_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        events.push(AnomalyEvent { id: record.id, cells });
    }
    Ok(events)
}

/// Color bucket for a normalized anomaly value.
pub fn score_bucket(score: f64) -> (&'static str, &'static str) {
    if score < -0.5 {
        ("strong_negative", "#2166ac")
    } else if score < 0.0 {
        ("negative", "#67a9cf")
    } else if score < 0.5 {
        ("mild_positive", "#fddbc7")
    } else if score < 1.0 {
        ("positive", "#ef8a62")
    } else {
        ("strong_positive", "#b2182b")
    }
}

/// GeoJSON with one MultiPoint feature per event hour, over roads with coordinates.
pub fn events_geojson(events: &[AnomalyEvent], grid: &AnomalyGrid, net: &RoadNetwork) -> serde_json::Value {
    let mut features = Vec::new();
    for event in events {
        let mut by_hour: BTreeMap<i64, Vec<&EventCell>> = BTreeMap::new();
        for c in &event.cells {
            by_hour.entry(c.hour).or_default().push(c);
        }
        for (hour, cells) in by_hour {
            let points: Vec<[f64; 2]> = cells
                .iter()
                .filter_map(|c| net.index_of(&c.road_id).and_then(|k| net.coords(k)))
                .map(|(lon, lat)| [lon, lat])
                .collect();
            if points.is_empty() {
                continue;
            }
            let scores: Vec<f64> = cells.iter().filter_map(|c| grid.score_at(&c.road_id, c.hour)).collect();
            let mean = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
            let (bucket, color) = score_bucket(mean);
            features.push(json!({
                "type": "Feature",
                "geometry": { "type": "MultiPoint", "coordinates": points },
                "properties": {
                    "event_id": event.id,
                    "timestamp": format_hour(&from_hour_index(hour)),
                    "cells": cells.len(),
                    "mean_score": mean,
                    "bucket": bucket,
                    "color": color,
                },
            }));
        }
    }
    json!({ "type": "FeatureCollection", "features": features })
}
