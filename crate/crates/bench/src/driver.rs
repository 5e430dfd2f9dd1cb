//! Runs a workload against an engine configuration and collects per-step
//! timings and byte counts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info};
use stagecoach::aggregation::{
    assign_aggregators, AggregatorAssignment, FileEngineConfig, FileJob, FileJobSummary, FileOutput, RankTopology,
    Routing,
};
use stagecoach::burst::{BurstBuffer, BurstConfig};
use stagecoach::format::GlobalIndex;
use stagecoach::shim::StorageTarget;
use stagecoach::staging::{StagingConfig, StagingJob, StagingReader, StagingSummary};
use stagecoach::{DType, Error, Result, StepReader, Writer};

use crate::config::{Backend, EngineConfig, EngineKind};
use crate::error::{BenchError, BenchResult};
use crate::workload::WorkloadSpec;

/// One row of the report: a single step of a single repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub config_id: String,
    pub repeat: usize,
    pub step: u64,
    /// Longest time any rank spent inside `end_step`.
    pub perceived_write_s: f64,
    pub bytes_raw: u64,
    /// Stored payload bytes, headers excluded.
    pub bytes_stored: u64,
    /// Background drain time of the whole repeat.
    pub drain_s: f64,
}

/// Output of one repeat.
#[derive(Debug)]
pub struct RepeatOutcome {
    pub rows: Vec<StepReport>,
    pub data_files: usize,
    /// Where a reader can open the output (file engine only).
    pub index_dir: Option<PathBuf>,
    pub index: Option<GlobalIndex>,
    pub staging: Option<StagingSummary>,
    pub wall_s: f64,
}

#[derive(Debug, Default)]
pub struct RunReport {
    pub rows: Vec<StepReport>,
    /// Data files of the last repeat.
    pub data_files: usize,
    pub index_dir: Option<PathBuf>,
}

impl RunReport {
    pub fn mean_perceived_write(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.perceived_write_s))
    }

    pub fn bytes_raw_per_repeat(&self) -> BTreeMap<usize, u64> {
        let mut out = BTreeMap::new();
        for r in &self.rows {
            *out.entry(r.repeat).or_insert(0) += r.bytes_raw;
        }
        out
    }

    pub fn averaged(&self) -> Option<AveragedRow> {
        let first = self.rows.first()?;
        Some(AveragedRow {
            config_id: first.config_id.clone(),
            perceived_write_s: self.mean_perceived_write(),
            bytes_raw: mean(self.rows.iter().map(|r| r.bytes_raw as f64)),
            bytes_stored: mean(self.rows.iter().map(|r| r.bytes_stored as f64)),
            drain_s: mean(self.rows.iter().map(|r| r.drain_s)),
        })
    }
}

/// Means over every row of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedRow {
    pub config_id: String,
    pub perceived_write_s: f64,
    pub bytes_raw: f64,
    pub bytes_stored: f64,
    pub drain_s: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeepOutput {
    Nothing,
    LastRepeat,
    Everything,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub repeats: usize,
    pub keep: KeepOutput,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            repeats: 5,
            keep: KeepOutput::LastRepeat,
        }
    }
}

/// Run `spec` `opts.repeats` times under `cfg`. Output of repeat `k` goes to
/// `<pfs_dir>/<label>/rep<k>`.
pub fn run_workload(spec: &WorkloadSpec, cfg: &EngineConfig, opts: &RunOptions) -> BenchResult<RunReport> {
    spec.validate()?;
    cfg.validate()?;
    let label = cfg.label();
    let mut report = RunReport::default();
    for repeat in 0..opts.repeats {
        let dir = cfg.pfs_dir.join(&label).join(format!("rep{repeat}"));
        let outcome = run_once(spec, cfg, &label, repeat, &dir)?;
        info!(
            "{label} repeat {repeat}: mean write {:.4}s, wall {:.2}s",
            mean(outcome.rows.iter().map(|r| r.perceived_write_s)),
            outcome.wall_s
        );
        report.rows.extend(outcome.rows);
        report.data_files = outcome.data_files;
        report.index_dir = outcome.index_dir;
        let keep = match opts.keep {
            KeepOutput::Nothing => false,
            KeepOutput::LastRepeat => repeat + 1 == opts.repeats,
            KeepOutput::Everything => true,
        };
        if !keep {
            let _ = fs::remove_dir_all(&dir);
            report.index_dir = None;
        }
    }
    Ok(report)
}

/// The aggregation layout a backend implies.
pub fn layout(spec: &WorkloadSpec, cfg: &EngineConfig) -> Result<(RankTopology, AggregatorAssignment, Routing)> {
    let topology = RankTopology::uniform(spec.nodes, spec.ranks_per_node);
    Ok(match cfg.backend {
        Backend::Funnel => {
            let a = AggregatorAssignment::single(&topology);
            (topology, a, Routing::Funnel)
        }
        Backend::Fpp => {
            let a = assign_aggregators(&topology, spec.ranks_per_node)?;
            (topology, a, Routing::Chain)
        }
        Backend::Agg => {
            let a = assign_aggregators(&topology, cfg.aggregators_per_node)?;
            (topology, a, Routing::Chain)
        }
    })
}

/// Start a file engine writing under `dir`.
pub fn launch_file_engine(spec: &WorkloadSpec, cfg: &EngineConfig, dir: &Path) -> Result<(FileJob, Vec<Writer>)> {
    let (topology, assignment, routing) = layout(spec, cfg)?;
    let pfs_dir = dir.join("pfs");
    stagecoach::shim::ensure_dir(&pfs_dir)?;
    let pfs = StorageTarget::throttled(&pfs_dir, cfg.shim.pfs_shared, cfg.shim.pfs_per_stream);
    let output = if cfg.burst {
        let bb_dir = match &cfg.bb_dir {
            Some(root) => root.join(dir.file_name().unwrap_or_default()),
            None => dir.join("bb"),
        };
        stagecoach::shim::ensure_dir(&bb_dir)?;
        let bb = BurstBuffer::start(
            BurstConfig {
                bb_dir,
                pfs_dir,
                drain: cfg.drain,
                drain_rate_limit: cfg.drain_rate_limit,
            },
            spec.nodes,
            cfg.shim.bb,
            pfs,
            None,
        )?;
        FileOutput::Burst(bb)
    } else {
        FileOutput::Direct(pfs)
    };
    FileJob::launch(FileEngineConfig {
        topology,
        assignment,
        routing,
        output,
        ops: cfg.operators(),
    })
}

pub fn staging_config(spec: &WorkloadSpec, cfg: &EngineConfig) -> StagingConfig {
    StagingConfig {
        endpoint: stagecoach::staging::resolve_endpoint(&cfg.endpoint),
        queue: cfg.queue(),
        ranks: spec.world_size(),
        ops: cfg.operators(),
    }
}

/// Per-rank timing of each step's compute and write phases.
#[derive(Debug, Clone, Default)]
pub struct RankLog {
    pub write: Vec<Duration>,
    /// (start of compute, end of write) per step.
    pub spans: Vec<(Instant, Instant)>,
}

/// Run every rank on its own thread: compute sleep, generate and put, barrier,
/// `end_step`.
/// A failing rank keeps meeting the barriers so its peers are not stranded.
pub fn run_ranks(spec: &WorkloadSpec, writers: Vec<Writer>) -> Result<Vec<RankLog>> {
    let spec = Arc::new(spec.clone());
    let barrier = Arc::new(Barrier::new(writers.len()));
    let handles: Vec<_> = writers
        .into_iter()
        .map(|w| {
            let spec = spec.clone();
            let barrier = barrier.clone();
            thread::Builder::new()
                .name(format!("rank{}", w.rank()))
                .spawn(move || rank_loop(&spec, w, &barrier))
                .map_err(|e| Error::io("spawn rank", e))
        })
        .collect::<Result<_>>()?;
    let mut logs = Vec::new();
    let mut first_err = None;
    for h in handles {
        match h.join() {
            Ok(Ok(log)) => logs.push(log),
            Ok(Err(e)) => {
                first_err.get_or_insert(e);
            }
            Err(_) => {
                first_err.get_or_insert(Error::TransportFailure("rank thread panicked".into()));
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(logs),
    }
}

fn rank_loop(spec: &WorkloadSpec, mut w: Writer, barrier: &Barrier) -> Result<RankLog> {
    let rank = w.rank() as usize;
    let fields = spec.fields();
    let patch = spec.patch(rank);
    let mut err = None;
    for f in &fields {
        if let Err(e) = w.declare_variable(&f.name, DType::F32, &spec.shape(f)) {
            err.get_or_insert(e);
        }
    }
    let mut spans = Vec::new();
    for step in 0..spec.steps {
        let started = Instant::now();
        thread::sleep(Duration::from_millis(spec.compute_ms));
        // puts only buffer; the barrier lines up every rank's end_step
        let token = if err.is_none() {
            let staged = (|| {
                let token = w.begin_step()?;
                for f in &fields {
                    w.put(&f.name, &spec.selection(f, &patch), &spec.patch_bytes(f, step, &patch))?;
                }
                Ok(token)
            })();
            staged.map_err(|e| err.get_or_insert(e)).ok()
        } else {
            None
        };
        barrier.wait();
        let Some(mut token) = token else { continue };
        let result = w.end_step(&mut token);
        spans.push((started, Instant::now()));
        if let Err(e) = result {
            debug!("rank {rank} step {step}: {e}");
            err = Some(e);
        }
    }
    let write = w.step_timings().to_vec();
    let closed = w.close();
    match err {
        Some(e) => Err(e),
        None => closed.map(|_| RankLog { write, spans }),
    }
}

/// Largest per-rank write time of each step.
pub fn perceived_per_step(logs: &[RankLog], steps: u64) -> Vec<f64> {
    (0..steps as usize)
        .map(|s| {
            logs.iter()
                .filter_map(|l| l.write.get(s))
                .map(Duration::as_secs_f64)
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Raw and stored payload bytes per step, read from an index.
pub fn bytes_per_step(index: &GlobalIndex) -> BTreeMap<u64, (u64, u64)> {
    index
        .steps
        .iter()
        .map(|(&s, rec)| {
            let raw = rec.entries.iter().map(|e| e.raw_len).sum();
            let stored = rec.entries.iter().map(|e| e.stored_len).sum();
            (u64::from(s), (raw, stored))
        })
        .collect()
}

/// One repeat into `dir`, which is emptied first.
pub fn run_once(spec: &WorkloadSpec, cfg: &EngineConfig, label: &str, repeat: usize, dir: &Path) -> BenchResult<RepeatOutcome> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    stagecoach::shim::ensure_dir(dir)?;
    let started = Instant::now();
    let row = |step: u64, perceived: f64, (raw, stored): (u64, u64), drain_s: f64| StepReport {
        config_id: label.to_string(),
        repeat,
        step,
        perceived_write_s: perceived,
        bytes_raw: raw,
        bytes_stored: stored,
        drain_s,
    };
    match cfg.engine {
        EngineKind::File => {
            let (job, writers) = launch_file_engine(spec, cfg, dir)?;
            let logs = run_ranks(spec, writers);
            let summary: FileJobSummary = job.finish()?;
            let logs = logs?;
            let bytes = bytes_per_step(&summary.index);
            let rows = perceived_per_step(&logs, spec.steps)
                .into_iter()
                .enumerate()
                .map(|(s, t)| {
                    let b = bytes.get(&(s as u64)).copied().unwrap_or_default();
                    row(s as u64, t, b, summary.drain_seconds)
                })
                .collect();
            Ok(RepeatOutcome {
                rows,
                data_files: summary.data_files,
                index_dir: Some(summary.index_dir),
                index: Some(summary.index),
                staging: None,
                wall_s: started.elapsed().as_secs_f64(),
            })
        }
        EngineKind::Staging => {
            let (job, writers) = StagingJob::serve(staging_config(spec, cfg))?;
            let addr = job.local_addr();
            let consumer = thread::Builder::new()
                .name("drain-consumer".into())
                .spawn(move || drain_stream(&addr.to_string()))
                .map_err(|e| Error::io("spawn consumer", e))?;
            let logs = run_ranks(spec, writers);
            let staged = job.finish();
            let bytes = consumer
                .join()
                .map_err(|_| BenchError::ConsumerFailed("consumer thread panicked".into()))??;
            let staged = staged?;
            let logs = logs?;
            let rows = perceived_per_step(&logs, spec.steps)
                .into_iter()
                .enumerate()
                .map(|(s, t)| row(s as u64, t, bytes.get(&(s as u64)).copied().unwrap_or_default(), 0.0))
                .collect();
            Ok(RepeatOutcome {
                rows,
                data_files: 0,
                index_dir: None,
                index: None,
                staging: Some(staged),
                wall_s: started.elapsed().as_secs_f64(),
            })
        }
    }
}

/// Read every variable of every staged step; returns raw and stored bytes per step.
pub fn drain_stream(endpoint: &str) -> Result<BTreeMap<u64, (u64, u64)>> {
    let mut reader = StagingReader::connect(endpoint)?;
    let mut out = BTreeMap::new();
    while let Some(step) = reader.begin_step()? {
        let announce = reader.announce().expect("announce after begin_step");
        let raw = announce.blocks.iter().map(|b| b.raw_len).sum();
        let stored = announce.blocks.iter().map(|b| b.stored_len).sum();
        let vars: Vec<u32> = announce.variables.iter().map(|v| v.0).collect();
        for var in vars {
            reader.fetch_blocks(var)?;
        }
        reader.end_step()?;
        out.insert(step, (raw, stored));
    }
    Ok(out)
}

/// The value a sweep parameter takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Nodes,
    AggregatorsPerNode,
    Codec,
    Backend,
    Bb,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "nodes" => Ok(SweepParam::Nodes),
            "aggregators_per_node" | "aggregators-per-node" => Ok(SweepParam::AggregatorsPerNode),
            "codec" => Ok(SweepParam::Codec),
            "backend" => Ok(SweepParam::Backend),
            "bb" => Ok(SweepParam::Bb),
            other => Err(Error::Config(format!(
                "sweep parameter must be nodes|aggregators_per_node|codec|backend|bb, got `{other}`"
            ))),
        }
    }
}

/// Apply one sweep value to copies of the spec and config.
pub fn apply_sweep_value(
    param: SweepParam,
    value: &str,
    spec: &WorkloadSpec,
    cfg: &EngineConfig,
) -> Result<(WorkloadSpec, EngineConfig)> {
    let mut spec = spec.clone();
    let mut cfg = cfg.clone();
    let bad = |what: &str| Error::Config(format!("bad {what} value `{value}`"));
    match param {
        SweepParam::Nodes => {
            spec.nodes = value.trim().parse().map_err(|_| bad("nodes"))?;
            spec.auto_decomposition();
        }
        SweepParam::AggregatorsPerNode => {
            cfg.aggregators_per_node = value.trim().parse().map_err(|_| bad("aggregators_per_node"))?;
        }
        SweepParam::Codec => cfg.codec = value.parse()?,
        SweepParam::Backend => cfg.set_backend(value)?,
        SweepParam::Bb => {
            cfg.burst = match value.trim() {
                "on" | "true" | "1" => true,
                "off" | "false" | "0" => false,
                _ => return Err(bad("bb")),
            }
        }
    }
    Ok((spec, cfg))
}

#[derive(Debug, Default)]
pub struct SweepTable {
    pub rows: Vec<StepReport>,
    /// One per value, in sweep order.
    pub averaged: Vec<(String, AveragedRow)>,
}

/// Run one configuration per value. The config id of each row is
/// `<param>=<value>`.
pub fn sweep(
    param: SweepParam,
    values: &[String],
    spec: &WorkloadSpec,
    cfg: &EngineConfig,
    opts: &RunOptions,
) -> BenchResult<SweepTable> {
    let mut table = SweepTable::default();
    for value in values {
        let (s, c) = apply_sweep_value(param, value, spec, cfg)?;
        s.validate()?;
        let mut report = run_workload(&s, &c, opts)?;
        let id = format!("{}={}", param_name(param), value.trim());
        for r in &mut report.rows {
            r.config_id = id.clone();
        }
        if let Some(avg) = report.averaged() {
            table.averaged.push((value.trim().to_string(), avg));
        }
        table.rows.extend(report.rows);
    }
    Ok(table)
}

fn param_name(p: SweepParam) -> &'static str {
    match p {
        SweepParam::Nodes => "nodes",
        SweepParam::AggregatorsPerNode => "aggregators_per_node",
        SweepParam::Codec => "codec",
        SweepParam::Backend => "backend",
        SweepParam::Bb => "bb",
    }
}

pub const CSV_HEADER: [&str; 7] = [
    "config_id",
    "repeat",
    "step",
    "perceived_write_s",
    "bytes_raw",
    "bytes_stored",
    "drain_s",
];

/// Per-step rows followed by one `mean` row per configuration.
pub fn write_csv<W: Write>(out: W, rows: &[StepReport], averaged: &[AveragedRow]) -> BenchResult<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.config_id.clone(),
            r.repeat.to_string(),
            r.step.to_string(),
            format!("{:.6}", r.perceived_write_s),
            r.bytes_raw.to_string(),
            r.bytes_stored.to_string(),
            format!("{:.6}", r.drain_s),
        ])?;
    }
    for a in averaged {
        w.write_record([
            a.config_id.clone(),
            "mean".into(),
            "all".into(),
            format!("{:.6}", a.perceived_write_s),
            format!("{:.0}", a.bytes_raw),
            format!("{:.0}", a.bytes_stored),
            format!("{:.6}", a.drain_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}
