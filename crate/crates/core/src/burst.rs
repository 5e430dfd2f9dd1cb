//! Node-local burst buffer with background drain to the parallel file system.
//!
//! Each synthetic node writes its sub-files under `<bb_dir>/node<k>/`. When
//! drain is asynchronous, one worker per node copies every completed step's
//! byte range to `<pfs_dir>/data.<m>`, re-reads the copy and checks each
//! block's CRC. Writers only enqueue drain work; [`BurstBuffer::finalize`] is
//! the single point that waits for it, and publishes `md.idx` to the PFS only
//! once every sub-file has been drained and verified.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use log::{debug, warn};

use crate::error::{Error, IoContext, Result};
use crate::format::{self, GlobalIndex, IndexEntry, SubfileWriter};
use crate::shim::{self, PacedWriter, StorageTarget, Throttle};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrainMode {
    Off,
    Async,
}

impl FromStr for DrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "off" => Ok(DrainMode::Off),
            "async" => Ok(DrainMode::Async),
            other => Err(Error::Config(format!("drain must be off|async, got `{other}`"))),
        }
    }
}

impl fmt::Display for DrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DrainMode::Off => "off",
            DrainMode::Async => "async",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BurstConfig {
    /// Root of the node-local directories; must exist.
    pub bb_dir: PathBuf,
    pub pfs_dir: PathBuf,
    pub drain: DrainMode,
    pub drain_rate_limit: Option<f64>,
}

impl BurstConfig {
    pub fn node_dir(&self, node: usize) -> PathBuf {
        self.bb_dir.join(format!("node{node}"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.bb_dir == self.pfs_dir {
            return Err(Error::Config("bb_dir and pfs_dir must differ".into()));
        }
        if matches!(self.drain_rate_limit, Some(r) if r <= 0.0) {
            return Err(Error::Config("drain rate limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrainState {
    Pending,
    Draining,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub node: usize,
    pub bb_path: PathBuf,
    pub bytes_written: u64,
    pub bytes_drained: u64,
    pub state: DrainState,
    pub error: Option<String>,
}

/// Per sub-file drain progress, shared by writers and drain workers.
#[derive(Debug, Default)]
pub struct DrainManifest {
    entries: Mutex<BTreeMap<u32, ManifestEntry>>,
    window: Mutex<Option<(Instant, Instant)>>,
}

impl DrainManifest {
    pub fn snapshot(&self) -> BTreeMap<u32, ManifestEntry> {
        self.entries.lock().unwrap().clone()
    }

    pub fn total_written(&self) -> u64 {
        self.entries.lock().unwrap().values().map(|e| e.bytes_written).sum()
    }

    /// Wall time between the first drain copy starting and the last finishing.
    pub fn drain_seconds(&self) -> f64 {
        self.window
            .lock()
            .unwrap()
            .map(|(a, b)| (b - a).as_secs_f64())
            .unwrap_or(0.0)
    }

    fn insert(&self, subfile_id: u32, entry: ManifestEntry) {
        self.entries.lock().unwrap().insert(subfile_id, entry);
    }

    fn update<T>(&self, subfile_id: u32, f: impl FnOnce(&mut ManifestEntry) -> T) -> T {
        let mut entries = self.entries.lock().unwrap();
        f(entries.get_mut(&subfile_id).expect("sub-file registered in manifest"))
    }

    fn note_activity(&self, started: Instant, finished: Instant) {
        let mut w = self.window.lock().unwrap();
        *w = Some(match *w {
            Some((a, b)) => (a.min(started), b.max(finished)),
            None => (started, finished),
        });
    }
}

/// Test hook run after a range is copied to the PFS and before it is verified.
pub type PostCopyHook = Arc<dyn Fn(&Path) + Send + Sync>;

#[derive(Debug)]
struct DrainTask {
    subfile_id: u32,
    bb_path: PathBuf,
    start: u64,
    end: u64,
    entries: Vec<IndexEntry>,
}

struct DrainWorker {
    tx: Sender<DrainTask>,
    handle: JoinHandle<()>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BurstSummary {
    /// Header + payload bytes written to the burst buffer.
    pub bytes_written: u64,
    pub drain_seconds: f64,
    /// Directory a reader should open.
    pub index_dir: PathBuf,
    /// The index as published there.
    pub index: GlobalIndex,
}

pub struct BurstBuffer {
    config: BurstConfig,
    node_targets: Vec<StorageTarget>,
    manifest: Arc<DrainManifest>,
    workers: Vec<DrainWorker>,
}

impl fmt::Debug for BurstBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BurstBuffer")
            .field("config", &self.config)
            .field("nodes", &self.node_targets.len())
            .finish()
    }
}

impl BurstBuffer {
    /// `bb_rate` throttles each node's device independently; `pfs` is the
    /// drain destination (its throttles apply to drain copies).
    pub fn start(
        config: BurstConfig,
        nodes: usize,
        bb_rate: Option<f64>,
        pfs: StorageTarget,
        post_copy_hook: Option<PostCopyHook>,
    ) -> Result<Self> {
        config.validate()?;
        if !config.bb_dir.is_dir() {
            return Err(Error::io(
                format!("{}", config.bb_dir.display()),
                std::io::Error::new(std::io::ErrorKind::NotFound, "bb dir not found"),
            ));
        }
        let mut node_targets = Vec::with_capacity(nodes);
        for node in 0..nodes {
            let dir = config.node_dir(node);
            shim::ensure_dir(&dir)?;
            node_targets.push(StorageTarget::throttled(dir, bb_rate, None));
        }
        let manifest = Arc::new(DrainManifest::default());
        let mut workers = Vec::new();
        if config.drain == DrainMode::Async {
            shim::ensure_dir(&config.pfs_dir)?;
            let limit = config.drain_rate_limit.map(Throttle::new);
            for node in 0..nodes {
                let (tx, rx) = mpsc::channel();
                let ctx = DrainContext {
                    manifest: manifest.clone(),
                    pfs: pfs.clone(),
                    limit: limit.clone(),
                    hook: post_copy_hook.clone(),
                };
                let handle = std::thread::Builder::new()
                    .name(format!("drain-node{node}"))
                    .spawn(move || drain_worker(rx, ctx))
                    .map_err(|e| Error::io("spawn drain worker", e))?;
                workers.push(DrainWorker { tx, handle });
            }
        }
        Ok(BurstBuffer {
            config,
            node_targets,
            manifest,
            workers,
        })
    }

    pub fn config(&self) -> &BurstConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Arc<DrainManifest> {
        &self.manifest
    }

    /// Index location while the stream runs.
    pub fn index_dir(&self) -> &Path {
        &self.config.bb_dir
    }

    /// Relative path of a node-local sub-file under `bb_dir`.
    pub fn relative_path(node: usize, subfile_id: u32) -> String {
        format!("node{node}/{}", format::subfile_name(subfile_id))
    }

    pub fn open_bb_subfile(&self, node: usize, subfile_id: u32) -> Result<BurstSink> {
        let target = self
            .node_targets
            .get(node)
            .ok_or_else(|| Error::Config(format!("node {node} has no burst buffer")))?;
        let name = format::subfile_name(subfile_id);
        let writer = target.create(&name)?;
        self.manifest.insert(
            subfile_id,
            ManifestEntry {
                node,
                bb_path: target.path(&name),
                bytes_written: 0,
                bytes_drained: 0,
                state: DrainState::Pending,
                error: None,
            },
        );
        Ok(BurstSink {
            subfile: SubfileWriter::new(subfile_id, writer),
            node,
            drained_to: 0,
            tx: self.workers.get(node).map(|w| w.tx.clone()),
            manifest: self.manifest.clone(),
        })
    }

    /// Wait for outstanding drains, then publish the index next to the data.
    pub fn finalize(self, index: &GlobalIndex) -> Result<BurstSummary> {
        let BurstBuffer {
            config,
            manifest,
            workers,
            ..
        } = self;
        let bytes_written = manifest.total_written();
        if config.drain == DrainMode::Off {
            return Ok(BurstSummary {
                bytes_written,
                drain_seconds: 0.0,
                index_dir: config.bb_dir,
                index: index.clone(),
            });
        }
        for w in workers {
            drop(w.tx);
            if w.handle.join().is_err() {
                return Err(Error::DrainVerifyFailure("drain worker panicked".into()));
            }
        }
        let snapshot = manifest.snapshot();
        let failures: Vec<String> = snapshot
            .iter()
            .filter(|(_, e)| e.state != DrainState::Complete)
            .map(|(id, e)| {
                format!(
                    "data.{id}: {}/{} bytes drained{}",
                    e.bytes_drained,
                    e.bytes_written,
                    e.error.as_deref().map(|m| format!(" ({m})")).unwrap_or_default()
                )
            })
            .collect();
        if !failures.is_empty() {
            return Err(Error::DrainVerifyFailure(failures.join("; ")));
        }
        let mut flat = index.clone();
        for (id, path) in flat.subfiles.iter_mut() {
            *path = format::subfile_name(*id);
        }
        let last_step = flat.steps.keys().next_back().copied().unwrap_or(0);
        flat.store(&config.pfs_dir, last_step)?;
        Ok(BurstSummary {
            bytes_written,
            drain_seconds: manifest.drain_seconds(),
            index_dir: config.pfs_dir,
            index: flat,
        })
    }
}

/// Append handle for one node-local sub-file.
pub struct BurstSink {
    subfile: SubfileWriter<PacedWriter<File>>,
    node: usize,
    drained_to: u64,
    tx: Option<Sender<DrainTask>>,
    manifest: Arc<DrainManifest>,
}

impl fmt::Debug for BurstSink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BurstSink")
            .field("subfile", &self.subfile.subfile_id())
            .field("node", &self.node)
            .finish()
    }
}

impl BurstSink {
    pub fn subfile(&mut self) -> &mut SubfileWriter<PacedWriter<File>> {
        &mut self.subfile
    }

    pub fn node(&self) -> usize {
        self.node
    }

    /// Record a completed step and hand its byte range to the drain worker.
    pub fn step_completed(&mut self, entries: &[IndexEntry]) -> Result<()> {
        self.subfile.flush()?;
        let end = self.subfile.len();
        let id = self.subfile.subfile_id();
        self.manifest.update(id, |e| {
            e.bytes_written = end;
            if e.state == DrainState::Complete && end > e.bytes_drained {
                e.state = DrainState::Pending;
            }
        });
        if let Some(tx) = &self.tx {
            if end > self.drained_to {
                let task = DrainTask {
                    subfile_id: id,
                    bb_path: self.manifest.update(id, |e| e.bb_path.clone()),
                    start: self.drained_to,
                    end,
                    entries: entries.to_vec(),
                };
                if tx.send(task).is_err() {
                    warn!("drain worker for node {} is gone", self.node);
                }
                self.drained_to = end;
            }
        }
        Ok(())
    }

    pub fn close(self) -> Result<()> {
        // an empty sub-file still gets its PFS counterpart
        if let (Some(tx), 0) = (&self.tx, self.subfile.len()) {
            let id = self.subfile.subfile_id();
            let task = DrainTask {
                subfile_id: id,
                bb_path: self.manifest.update(id, |e| e.bb_path.clone()),
                start: 0,
                end: 0,
                entries: Vec::new(),
            };
            let _ = tx.send(task);
        }
        let id = self.subfile.subfile_id();
        let file = self.subfile.into_inner().into_inner();
        file.sync_data().ctx(|| format!("sync sub-file {id}"))
    }
}

struct DrainContext {
    manifest: Arc<DrainManifest>,
    pfs: StorageTarget,
    limit: Option<Arc<Throttle>>,
    hook: Option<PostCopyHook>,
}

fn drain_worker(rx: Receiver<DrainTask>, ctx: DrainContext) {
    let mut outputs: BTreeMap<u32, PacedWriter<File>> = BTreeMap::new();
    let mut failed: BTreeMap<u32, String> = BTreeMap::new();
    for task in rx {
        if failed.contains_key(&task.subfile_id) {
            continue;
        }
        let id = task.subfile_id;
        ctx.manifest.update(id, |e| e.state = DrainState::Draining);
        let started = Instant::now();
        match drain_range(&ctx, &mut outputs, &task) {
            Ok(()) => ctx.manifest.update(id, |e| {
                e.bytes_drained = task.end;
                e.state = if e.bytes_drained == e.bytes_written {
                    DrainState::Complete
                } else {
                    DrainState::Pending
                };
            }),
            Err(err) => {
                warn!("drain of data.{id} failed: {err}");
                ctx.manifest.update(id, |e| {
                    e.state = DrainState::Pending;
                    e.error = Some(err.to_string());
                });
                failed.insert(id, err.to_string());
            }
        }
        ctx.manifest.note_activity(started, Instant::now());
    }
    for (id, out) in outputs {
        if let Err(e) = out.into_inner().sync_data() {
            warn!("sync of drained data.{id} failed: {e}");
        }
    }
}

/// Copy `[start, end)` of a burst-buffer sub-file to the PFS and verify it.
fn drain_range(ctx: &DrainContext, outputs: &mut BTreeMap<u32, PacedWriter<File>>, task: &DrainTask) -> Result<()> {
    let name = format::subfile_name(task.subfile_id);
    let dst_path = ctx.pfs.path(&name);
    if !outputs.contains_key(&task.subfile_id) {
        let mut pacer = ctx.pfs.stream_pacer();
        if let Some(limit) = &ctx.limit {
            pacer = pacer.with(limit.clone());
        }
        let file = shim::create_file(&dst_path)?;
        outputs.insert(task.subfile_id, PacedWriter::new(file, pacer));
    }
    let out = outputs.get_mut(&task.subfile_id).unwrap();

    let mut src = File::open(&task.bb_path).ctx(|| format!("open {}", task.bb_path.display()))?;
    src.seek(SeekFrom::Start(task.start))
        .ctx(|| format!("seek {}", task.bb_path.display()))?;
    let mut remaining = task.end - task.start;
    let mut buf = vec![0u8; shim::THROTTLE_CHUNK];
    while remaining > 0 {
        let n = remaining.min(buf.len() as u64) as usize;
        src.read_exact(&mut buf[..n])
            .ctx(|| format!("read {}", task.bb_path.display()))?;
        out.write_all(&buf[..n]).ctx(|| format!("write {}", dst_path.display()))?;
        remaining -= n as u64;
    }
    out.flush().ctx(|| format!("flush {}", dst_path.display()))?;
    debug!("drained data.{} [{}, {})", task.subfile_id, task.start, task.end);

    if let Some(hook) = &ctx.hook {
        hook(&dst_path);
    }
    verify_drained(&dst_path, &task.entries)
}

fn verify_drained(path: &Path, entries: &[IndexEntry]) -> Result<()> {
    let file = OpenOptions::new()
        .read(true)
        .open(path)
        .ctx(|| format!("open {}", path.display()))?;
    let mut reader = BufReader::new(file);
    for entry in entries {
        format::verify_block(&mut reader, entry).map_err(|e| {
            Error::DrainVerifyFailure(format!(
                "{} block at offset {}: {e}",
                path.display(),
                entry.byte_offset
            ))
        })?;
    }
    Ok(())
}
