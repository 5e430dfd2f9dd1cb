//! Post-hoc versus in-situ time-to-solution.
//!
//! Post-hoc: the producer writes every step to files, then the analysis reads
//! them back. In-situ: the producer stages steps and the analysis consumes
//! them over TCP while the simulation keeps computing.
//!
//! The analysis is either the built-in slice-statistics consumer or an
//! external command. External commands run under `sh -c` and find their input
//! in `STAGECOACH_ENDPOINT` (in-situ) or `STAGECOACH_INPUT` (post-hoc, the
//! directory holding `md.idx`).

use std::path::Path;
use std::process::{Child, Command};
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use stagecoach::staging::{
    pipeline_overlap_report, OverlapStats, SpanLog, StagingJob, StagingReader, StepSpan, ENDPOINT_ENV,
};
use stagecoach::{DType, Error, FileReader, Result, Selection, StepReader};

use crate::config::{EngineConfig, EngineKind};
use crate::driver::{launch_file_engine, run_ranks, staging_config, RankLog};
use crate::error::{BenchError, BenchResult};
use crate::workload::WorkloadSpec;

pub const INPUT_ENV: &str = "STAGECOACH_INPUT";

#[derive(Debug, Clone, PartialEq)]
pub enum Analysis {
    /// Slice statistics of one field plus `analysis_ms` of simulated plotting.
    Builtin { field: Option<String>, k: u64, analysis_ms: u64 },
    Command(String),
}

/// Statistics of one horizontal slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceStats {
    pub step: u64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

pub fn slice_stats(step: u64, bytes: &[u8]) -> SliceStats {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        min = min.min(v);
        max = max.max(v);
        sum += v;
        n += 1;
    }
    SliceStats {
        step,
        min,
        max,
        mean: if n == 0 { f64::NAN } else { sum / n as f64 },
    }
}

/// Walk every step of `reader`, computing statistics of level `k` of `field`
/// (the first variable when `None`). Each step's span is logged if `spans` is given.
pub fn analyze(
    reader: &mut dyn StepReader,
    field: Option<&str>,
    k: u64,
    analysis_ms: u64,
    mut spans: Option<&mut SpanLog>,
) -> Result<Vec<SliceStats>> {
    let mut out = Vec::new();
    while let Some(step) = reader.begin_step()? {
        let started = Instant::now();
        let vars = reader.variables();
        let var = match field {
            Some(name) => vars.iter().find(|v| v.name == name),
            None => vars.first(),
        }
        .ok_or_else(|| Error::VariableNotFound(field.unwrap_or("<any>").to_string()))?;
        if var.dtype != DType::F32 {
            return Err(Error::Config(format!("analysis expects f32, `{}` is {}", var.name, var.dtype)));
        }
        let selection = match var.shape.len() {
            3 => {
                if k >= var.shape[0] {
                    return Err(Error::SelectionOutOfBounds(format!("level {k} of `{}`", var.name)));
                }
                Selection::new(&[k, 0, 0], &[1, var.shape[1], var.shape[2]])
            }
            _ => Selection::full(&var.shape),
        };
        let bytes = reader.get(&var.name, &selection)?;
        out.push(slice_stats(step, &bytes));
        thread::sleep(Duration::from_millis(analysis_ms));
        reader.end_step()?;
        if let Some(log) = spans.as_deref_mut() {
            log.record(step, started, Instant::now());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub post_hoc_s: f64,
    pub in_situ_s: f64,
    /// Built-in analysis only.
    pub post_hoc_stats: Vec<SliceStats>,
    pub in_situ_stats: Vec<SliceStats>,
    pub in_situ_overlap: Option<OverlapStats>,
}

impl PipelineReport {
    /// In-situ over post-hoc time-to-solution.
    pub fn ratio(&self) -> f64 {
        self.in_situ_s / self.post_hoc_s
    }
}

/// Run both pipelines on the same workload. File output goes under
/// `cfg.pfs_dir/pipeline`.
pub fn pipeline_compare(spec: &WorkloadSpec, cfg: &EngineConfig, analysis: &Analysis) -> BenchResult<PipelineReport> {
    spec.validate()?;
    cfg.validate()?;
    let (post_hoc_s, post_hoc_stats) = post_hoc(spec, cfg, analysis)?;
    info!("post-hoc time-to-solution {post_hoc_s:.3}s");
    let (in_situ_s, in_situ_stats, overlap) = in_situ(spec, cfg, analysis)?;
    info!("in-situ time-to-solution {in_situ_s:.3}s");
    Ok(PipelineReport {
        post_hoc_s,
        in_situ_s,
        post_hoc_stats,
        in_situ_stats,
        in_situ_overlap: overlap,
    })
}

fn spawn_command(cmd: &str, env: (&str, &str)) -> BenchResult<Child> {
    Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .env(env.0, env.1)
        .spawn()
        .map_err(|e| BenchError::ConsumerLaunchFailure {
            cmd: cmd.to_string(),
            reason: e.to_string(),
        })
}

fn wait_command(cmd: &str, child: &mut Child) -> BenchResult<()> {
    let status = child
        .wait()
        .map_err(|e| BenchError::ConsumerFailed(format!("`{cmd}`: {e}")))?;
    if status.success() {
        Ok(())
    } else if status.code() == Some(127) {
        Err(BenchError::ConsumerLaunchFailure {
            cmd: cmd.to_string(),
            reason: "command not found".into(),
        })
    } else {
        Err(BenchError::ConsumerFailed(format!("`{cmd}` exited with {status}")))
    }
}

fn post_hoc(spec: &WorkloadSpec, cfg: &EngineConfig, analysis: &Analysis) -> BenchResult<(f64, Vec<SliceStats>)> {
    let dir = cfg.pfs_dir.join("pipeline").join("post-hoc");
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let mut file_cfg = cfg.clone();
    file_cfg.engine = EngineKind::File;
    let started = Instant::now();
    let (job, writers) = launch_file_engine(spec, &file_cfg, &dir)?;
    let ranks = run_ranks(spec, writers);
    let summary = job.finish()?;
    ranks?;
    let stats = run_file_analysis(&summary.index_dir, analysis)?;
    Ok((started.elapsed().as_secs_f64(), stats))
}

fn run_file_analysis(index_dir: &Path, analysis: &Analysis) -> BenchResult<Vec<SliceStats>> {
    match analysis {
        Analysis::Builtin { field, k, analysis_ms } => {
            let mut reader = FileReader::open(index_dir)?;
            Ok(analyze(&mut reader, field.as_deref(), *k, *analysis_ms, None)?)
        }
        Analysis::Command(cmd) => {
            let dir = index_dir.display().to_string();
            let mut child = spawn_command(cmd, (INPUT_ENV, &dir))?;
            wait_command(cmd, &mut child)?;
            Ok(Vec::new())
        }
    }
}

type InSitu = (f64, Vec<SliceStats>, Option<OverlapStats>);

fn in_situ(spec: &WorkloadSpec, cfg: &EngineConfig, analysis: &Analysis) -> BenchResult<InSitu> {
    let started = Instant::now();
    let (job, writers) = StagingJob::serve(staging_config(spec, cfg))?;
    let endpoint = job.local_addr().to_string();
    match analysis {
        Analysis::Builtin { field, k, analysis_ms } => {
            let (field, k, ms) = (field.clone(), *k, *analysis_ms);
            let ep = endpoint.clone();
            let consumer = thread::Builder::new()
                .name("analysis".into())
                .spawn(move || -> Result<(Vec<SliceStats>, Vec<StepSpan>)> {
                    let mut log = SpanLog::new(started);
                    let mut reader = StagingReader::connect(ep.as_str())?;
                    let stats = analyze(&mut reader, field.as_deref(), k, ms, Some(&mut log))?;
                    Ok((stats, log.into_spans()))
                })
                .map_err(|e| Error::io("spawn analysis", e))?;
            let ranks = run_ranks(spec, writers);
            let served = job.finish();
            let consumed = consumer
                .join()
                .map_err(|_| BenchError::ConsumerFailed("analysis thread panicked".into()))?;
            let elapsed = started.elapsed().as_secs_f64();
            let (stats, consumer_spans) = consumed?;
            served?;
            let producer_spans = producer_spans(&ranks?, started);
            Ok((elapsed, stats, Some(pipeline_overlap_report(&producer_spans, &consumer_spans))))
        }
        Analysis::Command(cmd) => {
            let mut child = spawn_command(cmd, (ENDPOINT_ENV, &endpoint))?;
            let ranks_thread = {
                let spec = spec.clone();
                thread::spawn(move || run_ranks(&spec, writers))
            };
            let waited = wait_command(cmd, &mut child);
            if waited.is_err() {
                rescue(&endpoint);
            }
            let ranks = ranks_thread
                .join()
                .map_err(|_| BenchError::ConsumerFailed("producer thread panicked".into()))?;
            let served = job.finish();
            let elapsed = started.elapsed().as_secs_f64();
            waited?;
            served?;
            ranks?;
            Ok((elapsed, Vec::new(), None))
        }
    }
}

/// Drain a stream whose consumer died so the producer can finish. Does
/// nothing if the producer already stopped listening.
fn rescue(endpoint: &str) {
    match StagingReader::connect(endpoint) {
        Ok(mut reader) => {
            warn!("consumer exited early; draining the stream");
            while let Ok(Some(_)) = reader.begin_step() {
                if reader.end_step().is_err() {
                    break;
                }
            }
        }
        Err(e) => info!("no stream left to drain: {e}"),
    }
}

/// One span per step covering every rank's `end_step`.
fn producer_spans(logs: &[RankLog], origin: Instant) -> Vec<StepSpan> {
    let steps = logs.iter().map(|l| l.spans.len()).max().unwrap_or(0);
    let mut log = SpanLog::new(origin);
    for s in 0..steps {
        let mut writes = logs
            .iter()
            .filter_map(|l| Some((l.spans.get(s)?.1, *l.write.get(s)?)))
            .map(|(end, took)| (end.checked_sub(took).unwrap_or(end), end));
        if let Some(first) = writes.next() {
            let (start, end) = writes.fold(first, |(lo, hi), (a, b)| (lo.min(a), hi.max(b)));
            log.record(s as u64, start, end);
        }
    }
    log.into_spans()
}
