#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::{Rng, RngExt};
use roadflow::events::{AnomalyEvent, GroupingParams};
use roadflow::network::{NodeAttrs, RoadNetwork};
use roadflow::scoring::{AnomalyGrid, Flag, RoadScores};

pub const UNREACHABLE: usize = usize::MAX;

pub fn road_name(k: usize) -> String {
    format!("n{k:03}")
}

/// Erdos-Renyi graph on `nodes` nodes with edge probability `p`; every node
/// is listed so isolated nodes survive.
pub fn random_network<R: Rng>(rng: &mut R, nodes: usize, p: f64) -> RoadNetwork {
    let mut edges = Vec::new();
    for a in 0..nodes {
        for b in a + 1..nodes {
            if rng.random_bool(p) {
                edges.push((road_name(a), road_name(b)));
            }
        }
    }
    let attrs = (0..nodes)
        .map(|k| NodeAttrs {
            id: road_name(k),
            ..Default::default()
        })
        .collect();
    RoadNetwork::from_parts(edges, attrs).unwrap()
}

/// All-pairs hop distances by Floyd-Warshall over the explicit adjacency.
pub fn floyd_warshall(net: &RoadNetwork) -> Vec<Vec<usize>> {
    let n = net.node_count();
    let mut d = vec![vec![UNREACHABLE; n]; n];
    for (a, row) in d.iter_mut().enumerate() {
        row[a] = 0;
        for &b in net.neighbors(a) {
            row[b] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            if d[i][k] == UNREACHABLE {
                continue;
            }
            for j in 0..n {
                if d[k][j] != UNREACHABLE && d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

/// Grid over every network road and `hours` hours with each cell flagged with
/// probability `rate`. Flagged cells get |score| >= 0.6, others < 0.4.
pub fn random_grid<R: Rng>(rng: &mut R, net: &RoadNetwork, first_hour: i64, hours: usize, rate: f64) -> AnomalyGrid {
    let roads = net
        .ids()
        .iter()
        .map(|id| {
            let mut scores = Vec::with_capacity(hours);
            let mut flags = Vec::with_capacity(hours);
            for _ in 0..hours {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                if rng.random_bool(rate) {
                    scores.push(Some(sign * rng.random_range(0.6..1.5)));
                    flags.push(Flag::Anomalous);
                } else {
                    scores.push(Some(sign * rng.random_range(0.0..0.4)));
                    flags.push(Flag::Normal);
                }
            }
            RoadScores {
                road_id: id.clone(),
                first_hour,
                scores,
                flags,
            }
        })
        .collect();
    AnomalyGrid::new(roads).unwrap()
}

/// Grid with exactly `cells` flagged at score 1 and everything else normal
/// at score 0, spanning `hours` from `first_hour` on every network road.
pub fn grid_with_flags(net: &RoadNetwork, first_hour: i64, hours: usize, cells: &[(String, i64)]) -> AnomalyGrid {
    let set: BTreeSet<(&str, i64)> = cells.iter().map(|(r, h)| (r.as_str(), *h)).collect();
    let roads = net
        .ids()
        .iter()
        .map(|id| {
            let flagged: Vec<bool> = (0..hours)
                .map(|k| set.contains(&(id.as_str(), first_hour + k as i64)))
                .collect();
            RoadScores {
                road_id: id.clone(),
                first_hour,
                scores: flagged.iter().map(|&f| Some(if f { 1.0 } else { 0.0 })).collect(),
                flags: flagged
                    .iter()
                    .map(|&f| if f { Flag::Anomalous } else { Flag::Normal })
                    .collect(),
            }
        })
        .collect();
    AnomalyGrid::new(roads).unwrap()
}

pub type Partition = BTreeSet<BTreeSet<(i64, String)>>;

pub fn partition_of(events: &[AnomalyEvent]) -> Partition {
    events
        .iter()
        .map(|e| e.cells.iter().map(|c| (c.hour, c.road_id.clone())).collect())
        .collect()
}

/// Connected components over every pair of flagged cells, testing the
/// joint hop and hour predicate directly.
pub fn brute_force_partition(grid: &AnomalyGrid, net: &RoadNetwork, params: GroupingParams) -> Partition {
    let dist = floyd_warshall(net);
    let cells: Vec<(usize, i64)> = grid
        .flagged_cells()
        .into_iter()
        .map(|(r, h)| (net.index_of(r).unwrap(), h))
        .collect();
    let n = cells.len();
    let radius = |k: usize| net.hop_radius(k, params.hops);
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            let (ri, hi) = cells[i];
            let (rj, hj) = cells[j];
            let d = dist[ri][rj];
            if d != UNREACHABLE && d <= radius(ri).max(radius(rj)) && (hi - hj).unsigned_abs() as usize <= params.time_window {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    let mut seen = vec![false; n];
    let mut out = Partition::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = BTreeSet::new();
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            comp.insert((cells[v].1, net.id(cells[v].0).to_string()));
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        out.insert(comp);
    }
    out
}

/// Mean BFS distance over connected ordered pairs of an adjacency list.
pub fn all_pairs_mean_distance(adj: &[Vec<usize>]) -> f64 {
    let n = adj.len();
    let (mut total, mut pairs) = (0usize, 0usize);
    for s in 0..n {
        let mut dist: HashMap<usize, usize> = HashMap::from([(s, 0)]);
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !dist.contains_key(&w) {
                    dist.insert(w, dist[&v] + 1);
                    queue.push_back(w);
                }
            }
        }
        for (&t, &d) in &dist {
            if t != s {
                total += d;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total as f64 / pairs as f64
    }
}
