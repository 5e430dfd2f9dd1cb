//! Engine configuration and the sectioned `key = value` run file.
//!
//! ```ini
//! [workload]
//! nx = 128
//! nodes = 2
//! ranks_per_node = 4
//!
//! [engine]
//! engine = file
//! backend = agg+bb
//! aggregators_per_node = 1
//!
//! [burst]
//! bb_dir = /tmp/bb
//! drain = async
//!
//! [compression]
//! codec = zstd
//! shuffle = on
//!
//! [shim]
//! pfs_mb_per_s = 200
//! ```
//!
//! Every key may be overridden from the command line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use stagecoach::burst::DrainMode;
use stagecoach::shim::MB;
use stagecoach::staging::{QueueConfig, QueuePolicy};
use stagecoach::{CodecId, Error, OperatorSpec, OperatorTable, Result};

use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineKind {
    File,
    Staging,
}

impl FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "file" => Ok(EngineKind::File),
            "staging" => Ok(EngineKind::Staging),
            other => Err(Error::Config(format!("engine must be file|staging, got `{other}`"))),
        }
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineKind::File => "file",
            EngineKind::Staging => "staging",
        })
    }
}

/// How ranks map onto data files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Rank 0 gathers everything into one file.
    Funnel,
    /// One file per rank.
    Fpp,
    /// `aggregators_per_node` sub-files per node.
    Agg,
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "funnel" => Ok(Backend::Funnel),
            "fpp" => Ok(Backend::Fpp),
            "agg" => Ok(Backend::Agg),
            other => Err(Error::Config(format!("backend must be funnel|fpp|agg, got `{other}`"))),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Funnel => "funnel",
            Backend::Fpp => "fpp",
            Backend::Agg => "agg",
        })
    }
}

/// Filesystem shim rates in bytes per second; `None` leaves a tier unthrottled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShimRates {
    pub pfs_shared: Option<f64>,
    /// Bandwidth a single open PFS file can reach.
    pub pfs_per_stream: Option<f64>,
    /// Per node.
    pub bb: Option<f64>,
}

impl Default for ShimRates {
    fn default() -> Self {
        ShimRates {
            pfs_shared: Some(200.0 * MB),
            pfs_per_stream: Some(100.0 * MB),
            bb: Some(1000.0 * MB),
        }
    }
}

impl ShimRates {
    pub fn unthrottled() -> Self {
        ShimRates {
            pfs_shared: None,
            pfs_per_stream: None,
            bb: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub engine: EngineKind,
    pub backend: Backend,
    pub aggregators_per_node: usize,
    /// Write sub-files to node-local burst buffers.
    pub burst: bool,
    /// Burst-buffer root; a scratch directory is used when unset.
    pub bb_dir: Option<PathBuf>,
    /// Output directory standing in for the parallel file system.
    pub pfs_dir: PathBuf,
    pub drain: DrainMode,
    pub drain_rate_limit: Option<f64>,
    pub codec: CodecId,
    pub codec_level: Option<i32>,
    pub shuffle: bool,
    pub endpoint: String,
    pub queue_max_steps: usize,
    pub queue_policy: QueuePolicy,
    pub shim: ShimRates,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let queue = QueueConfig::default();
        EngineConfig {
            engine: EngineKind::File,
            backend: Backend::Agg,
            aggregators_per_node: 1,
            burst: false,
            bb_dir: None,
            pfs_dir: PathBuf::from("stagecoach-out"),
            drain: DrainMode::Async,
            drain_rate_limit: None,
            codec: CodecId::None,
            codec_level: None,
            shuffle: false,
            endpoint: "127.0.0.1:0".into(),
            queue_max_steps: queue.max_steps,
            queue_policy: queue.policy,
            shim: ShimRates::default(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key} must be on|off, got `{other}`"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

/// A rate in MB/s where 0 means unthrottled.
fn parse_mb_rate(key: &str, v: &str) -> Result<Option<f64>> {
    let r: f64 = parse_num(key, v)?;
    if r < 0.0 {
        return Err(Error::Config(format!("{key} must not be negative")));
    }
    Ok((r > 0.0).then_some(r * MB))
}

impl EngineConfig {
    /// Apply a backend name, including the `agg+bb` and `agg+bb+zstd` presets.
    pub fn set_backend(&mut self, name: &str) -> Result<()> {
        let mut parts = name.trim().split('+');
        self.backend = parts.next().unwrap_or_default().parse()?;
        self.burst = false;
        for extra in parts {
            match extra {
                "bb" => self.burst = true,
                "zstd" => {
                    self.codec = CodecId::Zstd;
                    self.shuffle = true;
                }
                other => return Err(Error::Config(format!("unknown backend modifier `{other}`"))),
            }
        }
        Ok(())
    }

    /// Label used as the CSV config id.
    pub fn label(&self) -> String {
        let mut s = match self.engine {
            EngineKind::Staging => "staging".to_string(),
            EngineKind::File => self.backend.to_string(),
        };
        if self.engine == EngineKind::File && self.backend == Backend::Agg {
            s.push_str(&format!("{}", self.aggregators_per_node));
        }
        if self.burst && self.engine == EngineKind::File {
            s.push_str("+bb");
        }
        if self.codec != CodecId::None {
            s.push('+');
            if self.shuffle {
                s.push_str("shuf+");
            }
            s.push_str(self.codec.name());
        }
        s
    }

    pub fn operator_spec(&self) -> OperatorSpec {
        let spec = OperatorSpec::new(self.codec, self.shuffle);
        match self.codec_level {
            Some(level) => spec.with_level(level),
            None => spec,
        }
    }

    pub fn operators(&self) -> OperatorTable {
        OperatorTable::uniform(self.operator_spec())
    }

    pub fn queue(&self) -> QueueConfig {
        QueueConfig {
            max_steps: self.queue_max_steps,
            policy: self.queue_policy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aggregators_per_node == 0 {
            return Err(Error::Config("aggregators_per_node must be at least 1".into()));
        }
        if self.queue_max_steps == 0 {
            return Err(Error::Config("queue_max_steps must be at least 1".into()));
        }
        self.operator_spec().validate()
    }

    /// Set one engine key. Returns `Ok(false)` for keys this struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "engine" => self.engine = value.parse()?,
            "backend" => self.set_backend(value)?,
            "aggregators_per_node" => self.aggregators_per_node = parse_num(key, value)?,
            "bb" | "burst" => self.burst = parse_bool(key, value)?,
            "bb_dir" => self.bb_dir = Some(PathBuf::from(value.trim())),
            "pfs_dir" | "output_dir" => self.pfs_dir = PathBuf::from(value.trim()),
            "drain" => self.drain = value.parse()?,
            "drain_rate_limit_bytes_per_sec" => {
                let r: f64 = parse_num(key, value)?;
                self.drain_rate_limit = (r > 0.0).then_some(r);
            }
            "codec" => self.codec = value.parse()?,
            "level" | "codec_level" => self.codec_level = Some(parse_num(key, value)?),
            "shuffle" => self.shuffle = parse_bool(key, value)?,
            "endpoint" => self.endpoint = value.trim().to_string(),
            "queue_max_steps" | "max_steps" => self.queue_max_steps = parse_num(key, value)?,
            "queue_policy" | "policy" => self.queue_policy = value.parse()?,
            "pfs_mb_per_s" => self.shim.pfs_shared = parse_mb_rate(key, value)?,
            "pfs_stream_mb_per_s" => self.shim.pfs_per_stream = parse_mb_rate(key, value)?,
            "bb_mb_per_s" => self.shim.bb = parse_mb_rate(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Set one workload key. Returns `Ok(false)` for unknown keys.
pub fn set_workload(spec: &mut WorkloadSpec, key: &str, value: &str) -> Result<bool> {
    match key {
        "nx" => spec.nx = parse_num(key, value)?,
        "ny" => spec.ny = parse_num(key, value)?,
        "nz" => spec.nz = parse_num(key, value)?,
        "fields_3d" | "n_3d_fields" => spec.fields_3d = parse_num(key, value)?,
        "fields_2d" | "n_2d_fields" => spec.fields_2d = parse_num(key, value)?,
        "steps" => spec.steps = parse_num(key, value)?,
        "compute_ms" | "compute_ms_per_step" => spec.compute_ms = parse_num(key, value)?,
        "px" => spec.px = parse_num(key, value)?,
        "py" => spec.py = parse_num(key, value)?,
        "nodes" => spec.nodes = parse_num(key, value)?,
        "ranks_per_node" => spec.ranks_per_node = parse_num(key, value)?,
        "generator" => spec.generator = value.parse()?,
        "seed" => spec.seed = parse_num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Everything a run file can set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFile {
    pub workload: WorkloadSpec,
    pub engine: EngineConfig,
    /// Whether the file named `px`/`py`; otherwise they are derived.
    pub explicit_decomposition: bool,
}

impl Default for RunFile {
    fn default() -> Self {
        RunFile {
            workload: WorkloadSpec::default(),
            engine: EngineConfig::default(),
            explicit_decomposition: false,
        }
    }
}

impl RunFile {
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        let mut out = RunFile::default();
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                out.set(key, value)
                    .map_err(|e| annotate(e, section))?;
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Set any key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if matches!(key, "px" | "py") {
            self.explicit_decomposition = true;
        }
        if set_workload(&mut self.workload, key, value)? || self.engine.set(key, value)? {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key `{key}`")))
        }
    }

    /// Derive the decomposition if needed and validate.
    pub fn finish(mut self) -> Result<(WorkloadSpec, EngineConfig)> {
        if !self.explicit_decomposition {
            self.workload.auto_decomposition();
        }
        self.workload.validate()?;
        self.engine.validate()?;
        Ok((self.workload, self.engine))
    }
}

fn annotate(e: Error, section: Option<&str>) -> Error {
    match (e, section) {
        (Error::Config(m), Some(s)) => Error::Config(format!("[{s}] {m}")),
        (e, _) => e,
    }
}
