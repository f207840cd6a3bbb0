//! Command-line interface.
//!
//! Every tunable can come from a flag or from a flat `key = value` config
//! file whose keys are the long flag names without dashes in front. Flags win
//! over the file; anything left unset takes the library default.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::events::{events_geojson, read_events_ndjson, write_events_ndjson, GroupingParams};
use crate::network::RoadNetwork;
use crate::pipeline::{
    anomaly_grid, detect_roads, group_and_summarize, with_workers, write_decomposition_csv, DetectConfig, Refresh,
    RoadDetection, Setting,
};
use crate::scoring::{read_scores_csv, write_scores_csv, AnomalyGrid};
use crate::synth::{evaluate, event_recall_of, generate, read_truth_csv, write_truth_csv, Metrics, NetworkModel, ScenarioConfig};
use crate::time::parse_timestamp;
use crate::timeseries::{read_traffic_csv, write_traffic_csv};

#[derive(Debug, Parser)]
#[command(name = "roadflow", version, about = "Road traffic anomaly detection and event grouping")]
pub struct Cli {
    /// Flat key=value configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-road work [default: available parallelism].
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decompose each road's traffic and write per-hour scores.
    Detect {
        #[command(flatten)]
        io: DetectIo,
        #[command(flatten)]
        tune: DetectArgs,
    },
    /// Group flagged road-hours from a scores file into events.
    Group {
        #[command(flatten)]
        io: GroupIo,
        #[command(flatten)]
        tune: GroupArgs,
    },
    /// Detect and group in one process.
    Run {
        #[command(flatten)]
        detect_io: DetectIo,
        #[command(flatten)]
        group_io: NetworkIo,
        /// Events NDJSON output.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Optional GeoJSON output, one feature per event hour.
        #[arg(long)]
        geojson: Option<PathBuf>,
        #[command(flatten)]
        detect: DetectArgs,
        #[command(flatten)]
        group: GroupArgs,
    },
    /// Generate a synthetic scenario with ground truth.
    Synth(SynthArgs),
    /// Score predictions against planted ground truth.
    Eval {
        /// Scores CSV from detect.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Ground-truth CSV from synth.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Events NDJSON; when given, event recall is computed from event membership.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Metrics JSON output [default: stdout].
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DetectIo {
    /// Traffic CSV with columns road_id,timestamp,volume.
    #[arg(long)]
    pub traffic: Option<PathBuf>,
    /// Scores CSV output.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Also write road_id,timestamp,T,L,A,E for every cell.
    #[arg(long)]
    pub emit_decomposition: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Sparsity weight, `auto` or a positive number.
    #[arg(long)]
    pub lambda: Option<Setting>,
    /// Noise penalty, `auto` or a positive number.
    #[arg(long)]
    pub mu: Option<Setting>,
    /// Relative convergence tolerance.
    #[arg(long)]
    pub rel_tol: Option<f64>,
    /// Iteration cap per solve.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Rows whose median volume is below this are scored NA.
    #[arg(long)]
    pub tau_min: Option<f64>,
    /// Flag threshold on |A / L|.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Hours per period (matrix rows).
    #[arg(long)]
    pub period_hours: Option<usize>,
    /// `batch`, or refit every k complete periods from a warm start.
    #[arg(long)]
    pub refresh: Option<Refresh>,
}

#[derive(Debug, Args)]
pub struct NetworkIo {
    /// Edge CSV with columns road_id_a,road_id_b.
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// Optional node CSV with road_id and any of lon,lat,n_override.
    #[arg(long)]
    pub nodes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GroupIo {
    /// Scores CSV from detect.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[command(flatten)]
    pub network: NetworkIo,
    /// Events NDJSON output.
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Optional GeoJSON output, one feature per event hour.
    #[arg(long)]
    pub geojson: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GroupArgs {
    /// Hop radius n on the road network.
    #[arg(long)]
    pub hops: Option<usize>,
    /// Time window s in hours.
    #[arg(long)]
    pub time_window: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory for traffic.csv, edges.csv, nodes.csv and truth.csv.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Number of roads.
    #[arg(long)]
    pub roads: Option<usize>,
    /// Number of weekly periods.
    #[arg(long)]
    pub weeks: Option<usize>,
    /// RNG seed; equal seeds give identical files.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `random` or `grid`.
    #[arg(long)]
    pub network: Option<String>,
    /// Mean node degree of the random network.
    #[arg(long)]
    pub mean_degree: Option<f64>,
    /// Rank of the expected weekly profiles.
    #[arg(long)]
    pub profile_rank: Option<usize>,
    /// Noise deviation as a fraction of each road's mean volume.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Target fraction of anomalous cells.
    #[arg(long)]
    pub anomaly_rate: Option<f64>,
    /// Upper bound on planted events.
    #[arg(long)]
    pub max_events: Option<usize>,
    /// Fewest roads per planted event.
    #[arg(long)]
    pub min_event_roads: Option<usize>,
    /// Most roads per planted event.
    #[arg(long)]
    pub max_event_roads: Option<usize>,
    /// Shortest planted event, in hours.
    #[arg(long)]
    pub min_duration: Option<usize>,
    /// Longest planted event, in hours.
    #[arg(long)]
    pub max_duration: Option<usize>,
    /// First hour of the scenario.
    #[arg(long)]
    pub start: Option<String>,
}

const CONFIG_KEYS: &[&str] = &[
    "workers",
    "traffic",
    "scores",
    "emit-decomposition",
    "lambda",
    "mu",
    "rel-tol",
    "max-iters",
    "tau-min",
    "theta",
    "period-hours",
    "refresh",
    "edges",
    "nodes",
    "events",
    "geojson",
    "hops",
    "time-window",
    "out-dir",
    "roads",
    "weeks",
    "seed",
    "network",
    "mean-degree",
    "profile-rank",
    "noise-sigma",
    "anomaly-rate",
    "max-events",
    "min-event-roads",
    "max-event-roads",
    "min-duration",
    "max-duration",
    "start",
    "truth",
    "output",
];

/// Parsed `key = value` configuration.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
    base: PathBuf,
}

impl ConfigFile {
    /// Parses config text. Blank lines and `#` comments are skipped; keys may
    /// be written with dashes or underscores. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", k + 1)))?;
            let key = key.trim().replace('_', "-");
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("line {}: unknown key `{key}`", k + 1)));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self {
            values,
            base: base.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.values.get(key).map(|v| self.base.join(v))
    }
}

fn pick<T: FromStr>(flag: Option<T>, config: &ConfigFile, key: &str) -> Result<Option<T>> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => config.get(key),
    }
}

fn pick_path(flag: &Option<PathBuf>, config: &ConfigFile, key: &str) -> Option<PathBuf> {
    flag.clone().or_else(|| config.path(key))
}

fn require_path(flag: &Option<PathBuf>, config: &ConfigFile, key: &str) -> Result<PathBuf> {
    pick_path(flag, config, key).ok_or_else(|| Error::Config(format!("missing --{key}")))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn detect_config(args: &DetectArgs, config: &ConfigFile) -> Result<DetectConfig> {
    let d = DetectConfig::default();
    let out = DetectConfig {
        lambda: pick(args.lambda, config, "lambda")?.unwrap_or(d.lambda),
        mu: pick(args.mu, config, "mu")?.unwrap_or(d.mu),
        rel_tol: pick(args.rel_tol, config, "rel-tol")?.unwrap_or(d.rel_tol),
        max_iters: pick(args.max_iters, config, "max-iters")?.unwrap_or(d.max_iters),
        tau_min: pick(args.tau_min, config, "tau-min")?.unwrap_or(d.tau_min),
        theta: pick(args.theta, config, "theta")?.unwrap_or(d.theta),
        period_hours: pick(args.period_hours, config, "period-hours")?.unwrap_or(d.period_hours),
        refresh: pick(args.refresh, config, "refresh")?.unwrap_or(d.refresh),
        ..d
    };
    if out.theta.is_nan() || out.theta <= 0.0 || out.tau_min.is_nan() || out.tau_min < 0.0 {
        return Err(Error::Config("theta must be positive and tau-min nonnegative".into()));
    }
    Ok(out)
}

fn grouping_params(args: &GroupArgs, config: &ConfigFile) -> Result<GroupingParams> {
    let d = GroupingParams::default();
    Ok(GroupingParams {
        hops: pick(args.hops, config, "hops")?.unwrap_or(d.hops),
        time_window: pick(args.time_window, config, "time-window")?.unwrap_or(d.time_window),
    })
}

fn load_network(io: &NetworkIo, config: &ConfigFile) -> Result<RoadNetwork> {
    let edges = open(&require_path(&io.edges, config, "edges")?)?;
    match pick_path(&io.nodes, config, "nodes") {
        Some(p) => RoadNetwork::load(edges, Some(open(&p)?)),
        None => RoadNetwork::load(edges, None::<&[u8]>),
    }
}

fn log_parameters(detections: &[RoadDetection]) {
    let mut shapes: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for d in detections {
        let entry = shapes
            .entry(d.decomposition.shape())
            .or_insert((d.decomposition.params.lambda, 0));
        entry.1 += 1;
    }
    for ((m, n), (lambda, count)) in shapes {
        info!("lambda={lambda:.6} for {m}x{n} matrices ({count} roads)");
    }
    let unconverged = detections
        .iter()
        .filter(|d| !d.decomposition.converged)
        .map(|d| d.matrix.road_id())
        .collect::<Vec<_>>();
    if !unconverged.is_empty() {
        warn!("{} road(s) hit max-iters: {}", unconverged.len(), unconverged.join(", "));
    }
}

fn run_detect(io: &DetectIo, args: &DetectArgs, config: &ConfigFile, workers: Option<usize>) -> Result<AnomalyGrid> {
    let detect = detect_config(args, config)?;
    let traffic = require_path(&io.traffic, config, "traffic")?;
    let scores_path = require_path(&io.scores, config, "scores")?;
    let series = read_traffic_csv(open(&traffic)?)?;
    info!("read {} road series from {}", series.len(), traffic.display());
    let detections = with_workers(workers, || detect_roads(&series, &detect))??;
    log_parameters(&detections);
    let grid = anomaly_grid(&detections)?;
    write_scores_csv(create(&scores_path)?, &grid)?;
    if let Some(path) = pick_path(&io.emit_decomposition, config, "emit-decomposition") {
        write_decomposition_csv(create(&path)?, &detections)?;
    }
    info!("flagged {} road-hours", grid.flagged_cells().len());
    Ok(grid)
}

fn run_group(
    grid: &AnomalyGrid,
    network: &RoadNetwork,
    params: GroupingParams,
    events_path: &Path,
    geojson: Option<PathBuf>,
    workers: Option<usize>,
) -> Result<()> {
    let (events, summaries) = with_workers(workers, || group_and_summarize(grid, network, params))??;
    write_events_ndjson(create(events_path)?, &events, &summaries)?;
    info!("grouped into {} events", events.len());
    if let Some(path) = geojson {
        if !network.has_coords() {
            warn!("network has no coordinates; GeoJSON will have no features");
        }
        let mut w = create(&path)?;
        serde_json::to_writer(&mut w, &events_geojson(&events, grid, network))?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

fn scenario_config(args: &SynthArgs, config: &ConfigFile) -> Result<ScenarioConfig> {
    let d = ScenarioConfig::default();
    let mean_degree = pick(args.mean_degree, config, "mean-degree")?;
    let network = match pick(args.network.clone(), config, "network")?.as_deref() {
        None | Some("random") => NetworkModel::Random {
            mean_degree: mean_degree.unwrap_or(match d.network {
                NetworkModel::Random { mean_degree } => mean_degree,
                NetworkModel::Grid => 4.0,
            }),
        },
        Some("grid") => NetworkModel::Grid,
        Some(other) => return Err(Error::Config(format!("unknown network model `{other}`"))),
    };
    let start = match pick(args.start.clone(), config, "start")? {
        None => d.start,
        Some(s) => parse_timestamp(&s).ok_or_else(|| Error::Config(format!("bad start timestamp `{s}`")))?,
    };
    Ok(ScenarioConfig {
        road_count: pick(args.roads, config, "roads")?.unwrap_or(d.road_count),
        weeks: pick(args.weeks, config, "weeks")?.unwrap_or(d.weeks),
        network,
        profile_rank: pick(args.profile_rank, config, "profile-rank")?.unwrap_or(d.profile_rank),
        noise_sigma: pick(args.noise_sigma, config, "noise-sigma")?.unwrap_or(d.noise_sigma),
        anomaly_rate: pick(args.anomaly_rate, config, "anomaly-rate")?.unwrap_or(d.anomaly_rate),
        max_events: pick(args.max_events, config, "max-events")?.or(d.max_events),
        roads_per_event: (
            pick(args.min_event_roads, config, "min-event-roads")?.unwrap_or(d.roads_per_event.0),
            pick(args.max_event_roads, config, "max-event-roads")?.unwrap_or(d.roads_per_event.1),
        ),
        duration_hours: (
            pick(args.min_duration, config, "min-duration")?.unwrap_or(d.duration_hours.0),
            pick(args.max_duration, config, "max-duration")?.unwrap_or(d.duration_hours.1),
        ),
        start,
        rng_seed: pick(args.seed, config, "seed")?.unwrap_or(d.rng_seed),
        ..d
    })
}

fn run_synth(args: &SynthArgs, config: &ConfigFile) -> Result<()> {
    let scenario_config = scenario_config(args, config)?;
    let dir = require_path(&args.out_dir, config, "out-dir")?;
    fs::create_dir_all(&dir)?;
    let scenario = generate(&scenario_config)?;
    write_traffic_csv(create(&dir.join("traffic.csv"))?, &scenario.series)?;
    scenario.network.write_edges_csv(create(&dir.join("edges.csv"))?)?;
    scenario.network.write_nodes_csv(create(&dir.join("nodes.csv"))?)?;
    write_truth_csv(create(&dir.join("truth.csv"))?, &scenario.truth.cells)?;
    info!(
        "wrote {} roads, {} planted cells in {} events to {}",
        scenario.series.len(),
        scenario.truth.cells.len(),
        scenario.truth.event_count,
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(flatten)]
    metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    detected_events: Option<usize>,
}

fn run_eval(
    scores: &Option<PathBuf>,
    truth: &Option<PathBuf>,
    events: &Option<PathBuf>,
    output: &Option<PathBuf>,
    config: &ConfigFile,
) -> Result<()> {
    let grid = read_scores_csv(open(&require_path(scores, config, "scores")?)?)?;
    let truth = read_truth_csv(open(&require_path(truth, config, "truth")?)?)?;
    let mut metrics = evaluate(&grid, &truth);
    let mut detected_events = None;
    if let Some(path) = pick_path(events, config, "events") {
        let events = read_events_ndjson(open(&path)?)?;
        let (hit, recall) = event_recall_of(&events, &truth);
        metrics.detected_planted_events = hit;
        metrics.event_recall = recall;
        detected_events = Some(events.len());
    }
    let report = EvalReport {
        metrics,
        detected_events,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    match pick_path(output, config, "output") {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let workers = pick(cli.workers, &config, "workers")?;
    match &cli.command {
        Command::Detect { io, tune } => run_detect(io, tune, &config, workers).map(|_| ()),
        Command::Group { io, tune } => {
            let params = grouping_params(tune, &config)?;
            let grid = read_scores_csv(open(&require_path(&io.scores, &config, "scores")?)?)?;
            let network = load_network(&io.network, &config)?;
            let events = require_path(&io.events, &config, "events")?;
            run_group(&grid, &network, params, &events, pick_path(&io.geojson, &config, "geojson"), workers)
        }
        Command::Run {
            detect_io,
            group_io,
            events,
            geojson,
            detect,
            group,
        } => {
            let params = grouping_params(group, &config)?;
            let network = load_network(group_io, &config)?;
            let events = require_path(events, &config, "events")?;
            let grid = run_detect(detect_io, detect, &config, workers)?;
            run_group(&grid, &network, params, &events, pick_path(geojson, &config, "geojson"), workers)
        }
        Command::Synth(args) => run_synth(args, &config),
        Command::Eval {
            scores,
            truth,
            events,
            output,
        } => run_eval(scores, truth, events, output, &config),
    }
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 1 for bad input or usage, 2 for internal failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                1
            } else {
                2
            }
        }
    }
}
