//! Road segment adjacency graph.
//!
//! Nodes are road segments as they appear in the traffic input; a road carried
//! in two directions is two nodes. Distances are unweighted hop counts.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Optional per-node attributes from the nodes file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeAttrs {
    pub id: String,
    /// `(lon, lat)`.
    pub coords: Option<(f64, f64)>,
    /// Replaces the global hop radius for cells on this road.
    pub hop_override: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    adjacency: Vec<Vec<usize>>,
    coords: Vec<Option<(f64, f64)>>,
    hop_override: Vec<Option<usize>>,
}

impl RoadNetwork {
    /// Builds a network from undirected edges plus optional node attributes.
    /// Duplicate edges in either orientation collapse; self-loops are rejected.
    pub fn from_parts<I, S>(edges: I, nodes: Vec<NodeAttrs>) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut pairs = BTreeSet::new();
        let mut names: BTreeSet<String> = nodes.iter().map(|n| n.id.clone()).collect();
        for (a, b) in edges {
            let (a, b) = (a.into(), b.into());
            if a == b {
                return Err(Error::InvalidInput(format!("self-loop on road {a}")));
            }
            names.insert(a.clone());
            names.insert(b.clone());
            pairs.insert(if a < b { (a, b) } else { (b, a) });
        }
        let ids: Vec<String> = names.into_iter().collect();
        let index: HashMap<String, usize> = ids.iter().enumerate().map(|(k, id)| (id.clone(), k)).collect();
        let mut adjacency = vec![Vec::new(); ids.len()];
        for (a, b) in &pairs {
            let (ia, ib) = (index[a], index[b]);
            adjacency[ia].push(ib);
            adjacency[ib].push(ia);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        let mut coords = vec![None; ids.len()];
        let mut hop_override = vec![None; ids.len()];
        for node in nodes {
            let k = index[&node.id];
            coords[k] = node.coords;
            hop_override[k] = node.hop_override;
        }
        Ok(Self {
            ids,
            index,
            adjacency,
            coords,
            hop_override,
        })
    }

    /// Loads an edge CSV (`road_id_a,road_id_b`) and an optional node CSV
    /// (`road_id[,lon,lat][,n_override]`).
    pub fn load<E: Read, N: Read>(edges: E, nodes: Option<N>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(edges);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["road_id_a", "road_id_b"] {
            return Err(Error::malformed(1, "expected header `road_id_a,road_id_b`"));
        }
        let mut pairs = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| csv_line_error(&e))?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != 2 || record[0].is_empty() || record[1].is_empty() {
                return Err(Error::malformed(line, "expected two nonempty road ids"));
            }
            if record[0] == record[1] {
                return Err(Error::malformed(line, format!("self-loop on road {}", &record[0])));
            }
            pairs.push((record[0].to_string(), record[1].to_string()));
        }
        let nodes = match nodes {
            Some(reader) => read_nodes(reader)?,
            None => Vec::new(),
        };
        Self::from_parts(pairs, nodes)
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn neighbors(&self, index: usize) -> &[usize] {
        &self.adjacency[index]
    }

    pub fn coords(&self, index: usize) -> Option<(f64, f64)> {
        self.coords[index]
    }

    pub fn has_coords(&self) -> bool {
        self.coords.iter().any(Option::is_some)
    }

    pub fn hop_override(&self, index: usize) -> Option<usize> {
        self.hop_override[index]
    }

    /// Hop radius for cells on this road given the global default.
    pub fn hop_radius(&self, index: usize, default: usize) -> usize {
        self.hop_override[index].unwrap_or(default)
    }

    /// Nodes within `radius` hops of `seed`, with their distances, in BFS order.
    pub fn hop_ball(&self, seed: usize, radius: usize) -> Vec<(usize, usize)> {
        let mut dist: HashMap<usize, usize> = HashMap::from([(seed, 0)]);
        let mut order = vec![(seed, 0)];
        let mut queue = VecDeque::from([seed]);
        while let Some(u) = queue.pop_front() {
            let d = dist[&u];
            if d == radius {
                continue;
            }
            for &v in &self.adjacency[u] {
                if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(v) {
                    e.insert(d + 1);
                    order.push((v, d + 1));
                    queue.push_back(v);
                }
            }
        }
        order
    }

    /// All roads at hop distance at most `n` from `seed`, including `seed`, sorted by id.
    pub fn khop_neighbors(&self, seed: &str, n: usize) -> Result<Vec<&str>> {
        let k = self.index_of(seed).ok_or_else(|| Error::UnknownRoad(seed.to_string()))?;
        let mut out: Vec<usize> = self.hop_ball(k, n).into_iter().map(|(v, _)| v).collect();
        out.sort_unstable();
        Ok(out.into_iter().map(|v| self.ids[v].as_str()).collect())
    }

    /// Fails with the sorted list of ids that are not nodes.
    pub fn validate_roads<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let missing: BTreeSet<String> = ids
            .into_iter()
            .filter(|id| !self.contains(id))
            .map(str::to_string)
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::RoadsNotInNetwork(missing.into_iter().collect()))
        }
    }

    pub fn write_edges_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["road_id_a", "road_id_b"])?;
        for (a, list) in self.adjacency.iter().enumerate() {
            for &b in list.iter().filter(|&&b| b > a) {
                wtr.write_record([&self.ids[a], &self.ids[b]])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Writes `road_id,lon,lat[,n_override]`.
    pub fn write_nodes_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let with_override = self.hop_override.iter().any(Option::is_some);
        let mut header = vec!["road_id", "lon", "lat"];
        if with_override {
            header.push("n_override");
        }
        wtr.write_record(&header)?;
        for (k, id) in self.ids.iter().enumerate() {
            let (lon, lat) = self.coords[k]
                .map(|(x, y)| (x.to_string(), y.to_string()))
                .unwrap_or_default();
            let mut row = vec![id.clone(), lon, lat];
            if with_override {
                row.push(self.hop_override[k].map(|n| n.to_string()).unwrap_or_default());
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn csv_line_error(e: &csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::malformed(line, e.to_string())
}

fn read_nodes<R: Read>(reader: R) -> Result<Vec<NodeAttrs>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("road_id").ok_or_else(|| Error::malformed(1, "nodes file needs a `road_id` column"))?;
    let lon_col = col("lon");
    let lat_col = col("lat");
    if lon_col.is_some() != lat_col.is_some() {
        return Err(Error::malformed(1, "nodes file must carry both `lon` and `lat` or neither"));
    }
    let n_col = col("n_override");

    let mut nodes = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_line_error(&e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |k: Option<usize>| k.and_then(|k| record.get(k)).filter(|s| !s.is_empty());
        let id = field(Some(id_col)).ok_or_else(|| Error::malformed(line, "empty road_id"))?;
        let parse_f = |raw: &str| {
            raw.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::malformed(line, format!("bad coordinate `{raw}`")))
        };
        let coords = match (field(lon_col), field(lat_col)) {
            (Some(lon), Some(lat)) => Some((parse_f(lon)?, parse_f(lat)?)),
            (None, None) => None,
            _ => return Err(Error::malformed(line, "coordinate pair is incomplete")),
        };
        let hop_override = field(n_col)
            .map(|raw| {
                raw.parse::<usize>()
                    .map_err(|_| Error::malformed(line, format!("bad n_override `{raw}`")))
            })
            .transpose()?;
        nodes.push(NodeAttrs {
            id: id.to_string(),
            coords,
            hop_override,
        });
    }
    Ok(nodes)
}
