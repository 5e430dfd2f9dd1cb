//! N-M file engine.
//!
//! The N ranks of a stream are split into M aggregator groups. Inside a group
//! ranks form a chain in ascending rank order; at the end of each step every
//! rank hands its blocks to its lower neighbour, relays whatever arrives from
//! its upper neighbour, and the aggregator at the head of the chain appends
//! blocks to its sub-file as they arrive. Links are bounded channels holding
//! at most [`LINK_CAPACITY`] messages, so an aggregator never holds more than
//! the block it is currently appending.
//!
//! ```text
//!   group 0                     group 1
//!   0 ← 1 ← 2 ← 3               4 ← 5 ← 6 ← 7
//!   │                           │
//!   data.0                      data.1        committer → md.idx
//! ```
//!
//! The funnel routing mode is the root-gather baseline: every rank sends
//! straight to rank 0, which collects the whole step in memory before writing
//! a single file.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, SyncSender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use log::warn;

use crate::burst::{BurstBuffer, BurstSink, BurstSummary};
use crate::error::{Error, IoContext, Result};
use crate::format::{self, GlobalIndex, IndexCommitter, IndexEntry, SubfileWriter, HEADER_LEN};
use crate::model::{DataBlock, RankEngine, VariableDef, Writer};
use crate::ops::OperatorTable;
use crate::shim::{self, PacedWriter, StorageTarget};

/// Messages a link between neighbouring ranks can buffer.
pub const LINK_CAPACITY: usize = 2;

/// Synthetic node map: each node owns a contiguous run of ranks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankTopology {
    nodes: Vec<Vec<u32>>,
}

impl RankTopology {
    pub fn uniform(nodes: usize, ranks_per_node: usize) -> Self {
        RankTopology {
            nodes: (0..nodes)
                .map(|n| ((n * ranks_per_node) as u32..((n + 1) * ranks_per_node) as u32).collect())
                .collect(),
        }
    }

    /// Nodes with the given rank counts, numbered contiguously.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let mut next = 0u32;
        let mut nodes = Vec::new();
        for &c in counts {
            if c == 0 {
                return Err(Error::Config("a node must host at least one rank".into()));
            }
            nodes.push((next..next + c as u32).collect());
            next += c as u32;
        }
        Self::new(nodes)
    }

    pub fn new(nodes: Vec<Vec<u32>>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Config("topology needs at least one node".into()));
        }
        let mut expected = 0u32;
        for (i, node) in nodes.iter().enumerate() {
            if node.is_empty() {
                return Err(Error::Config(format!("node {i} hosts no ranks")));
            }
            for &r in node {
                if r != expected {
                    return Err(Error::Config(format!(
                        "node {i}: ranks must partition 0..N contiguously, found {r} where {expected} was expected"
                    )));
                }
                expected += 1;
            }
        }
        Ok(RankTopology { nodes })
    }

    pub fn world_size(&self) -> usize {
        self.nodes.iter().map(Vec::len).sum()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Vec<u32>] {
        &self.nodes
    }

    pub fn max_ranks_per_node(&self) -> usize {
        self.nodes.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn node_of(&self, rank: u32) -> usize {
        self.nodes
            .iter()
            .position(|n| n.contains(&rank))
            .expect("rank outside topology")
    }
}

/// One aggregator's group; `members[0]` is the aggregator, chain order ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregatorGroup {
    pub subfile_id: u32,
    pub node: usize,
    pub members: Vec<u32>,
}

impl AggregatorGroup {
    pub fn aggregator(&self) -> u32 {
        self.members[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregatorAssignment {
    groups: Vec<AggregatorGroup>,
    /// rank → (group index, position in chain)
    by_rank: Vec<(usize, usize)>,
}

impl AggregatorAssignment {
    fn from_groups(groups: Vec<AggregatorGroup>) -> Self {
        let n: usize = groups.iter().map(|g| g.members.len()).sum();
        let mut by_rank = vec![(0, 0); n];
        for (g, group) in groups.iter().enumerate() {
            for (p, &r) in group.members.iter().enumerate() {
                by_rank[r as usize] = (g, p);
            }
        }
        AggregatorAssignment { groups, by_rank }
    }

    /// Single group holding every rank, rank 0 as aggregator.
    pub fn single(topology: &RankTopology) -> Self {
        Self::from_groups(vec![AggregatorGroup {
            subfile_id: 0,
            node: 0,
            members: (0..topology.world_size() as u32).collect(),
        }])
    }

    pub fn groups(&self) -> &[AggregatorGroup] {
        &self.groups
    }

    pub fn num_aggregators(&self) -> usize {
        self.groups.len()
    }

    pub fn aggregators(&self) -> Vec<u32> {
        self.groups.iter().map(AggregatorGroup::aggregator).collect()
    }

    pub fn group_of(&self, rank: u32) -> &AggregatorGroup {
        &self.groups[self.by_rank[rank as usize].0]
    }

    pub fn aggregator_of(&self, rank: u32) -> u32 {
        self.group_of(rank).aggregator()
    }

    pub fn position_of(&self, rank: u32) -> usize {
        self.by_rank[rank as usize].1
    }

    pub fn subfile_of(&self, rank: u32) -> u32 {
        self.group_of(rank).subfile_id
    }

    /// Intermediate ranks a block from `rank` passes through before its aggregator.
    pub fn relay_hops(&self, rank: u32) -> usize {
        self.position_of(rank).saturating_sub(1)
    }
}

/// Split each node's ranks into `aggregators_per_node` contiguous groups; the
/// lowest rank of each group aggregates. Nodes with fewer ranks than requested
/// are clamped to one rank per group.
pub fn assign_aggregators(topology: &RankTopology, aggregators_per_node: usize) -> Result<AggregatorAssignment> {
    if aggregators_per_node == 0 {
        return Err(Error::InvalidAggregatorCount("aggregators per node must be at least 1".into()));
    }
    if aggregators_per_node > topology.max_ranks_per_node() {
        return Err(Error::InvalidAggregatorCount(format!(
            "{aggregators_per_node} aggregators per node exceeds {} ranks per node",
            topology.max_ranks_per_node()
        )));
    }
    let mut groups = Vec::new();
    for (node, ranks) in topology.nodes().iter().enumerate() {
        let k = if aggregators_per_node > ranks.len() {
            warn!(
                "node {node} has {} ranks, clamping {aggregators_per_node} aggregators to {}",
                ranks.len(),
                ranks.len()
            );
            ranks.len()
        } else {
            aggregators_per_node
        };
        let (base, extra) = (ranks.len() / k, ranks.len() % k);
        let mut at = 0;
        for g in 0..k {
            let size = base + usize::from(g < extra);
            groups.push(AggregatorGroup {
                subfile_id: groups.len() as u32,
                node,
                members: ranks[at..at + size].to_vec(),
            });
            at += size;
        }
    }
    Ok(AggregatorAssignment::from_groups(groups))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    /// Neighbour-to-neighbour chains toward each group's aggregator.
    Chain,
    /// Everyone sends to rank 0, which gathers the step and writes one file.
    Funnel,
}

/// Where sub-files land.
pub enum FileOutput {
    Direct(StorageTarget),
    Burst(BurstBuffer),
}

impl fmt::Debug for FileOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FileOutput::Direct(t) => f.debug_tuple("Direct").field(&t.dir).finish(),
            FileOutput::Burst(b) => f.debug_tuple("Burst").field(b).finish(),
        }
    }
}

#[derive(Debug)]
pub struct FileEngineConfig {
    pub topology: RankTopology,
    pub assignment: AggregatorAssignment,
    pub routing: Routing,
    pub output: FileOutput,
    pub ops: OperatorTable,
}

/// Byte gauge for data an aggregator holds in memory.
#[derive(Debug, Default)]
pub struct MemoryGauge {
    current: AtomicU64,
    peak: AtomicU64,
}

impl MemoryGauge {
    fn add(&self, bytes: u64) {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn sub(&self, bytes: u64) {
        self.current.fetch_sub(bytes, Ordering::SeqCst);
    }

    pub fn peak(&self) -> u64 {
        self.peak.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Default)]
pub struct AggregatorStats {
    pub gauge: MemoryGauge,
    largest_block: AtomicU64,
    /// (origin rank, var id, relay hops) per appended block.
    hops: Mutex<Vec<(u32, u32, u32)>>,
}

impl AggregatorStats {
    /// Largest single record (header + stored payload) appended.
    pub fn largest_block(&self) -> u64 {
        self.largest_block.load(Ordering::SeqCst)
    }

    pub fn hop_log(&self) -> Vec<(u32, u32, u32)> {
        self.hops.lock().unwrap().clone()
    }
}

enum ChainMsg {
    Block { origin: u32, hops: u32, block: DataBlock },
    Done { rank: u32, step: u32 },
    /// Upstream ranks that will never report for this step.
    Broken { step: u32, missing: Vec<u32> },
}

impl ChainMsg {
    fn step(&self) -> u32 {
        match self {
            ChainMsg::Block { block, .. } => block.step,
            ChainMsg::Done { step, .. } | ChainMsg::Broken { step, .. } => *step,
        }
    }
}

/// Receive the next message for `step`. Several senders share one funnel link,
/// so a fast rank's next step can arrive early; park it until its step opens.
fn recv_for(
    up: &Receiver<ChainMsg>,
    early: &mut VecDeque<ChainMsg>,
    step: u32,
) -> std::result::Result<ChainMsg, mpsc::RecvError> {
    if let Some(i) = early.iter().position(|m| m.step() == step) {
        return Ok(early.remove(i).unwrap());
    }
    loop {
        let msg = up.recv()?;
        if msg.step() == step {
            return Ok(msg);
        }
        early.push_back(msg);
    }
}

struct CommitMsg {
    step: u32,
    vars: Vec<VariableDef>,
    entries: Vec<IndexEntry>,
    reported: BTreeSet<u32>,
}

enum Sink {
    Direct(SubfileWriter<PacedWriter<File>>),
    Burst(BurstSink),
}

impl Sink {
    fn subfile(&mut self) -> &mut SubfileWriter<PacedWriter<File>> {
        match self {
            Sink::Direct(w) => w,
            Sink::Burst(b) => b.subfile(),
        }
    }

    fn step_completed(&mut self, entries: &[IndexEntry]) -> Result<()> {
        match self {
            Sink::Direct(w) => w.flush(),
            Sink::Burst(b) => b.step_completed(entries),
        }
    }

    fn close(self) -> Result<()> {
        match self {
            Sink::Direct(w) => {
                let id = w.subfile_id();
                w.into_inner()
                    .into_inner()
                    .sync_data()
                    .ctx(|| format!("sync sub-file {id}"))
            }
            Sink::Burst(b) => b.close(),
        }
    }
}

struct AggregatorRole {
    group: Vec<u32>,
    sink: Option<Sink>,
    commit: Option<Sender<CommitMsg>>,
    stats: Arc<AggregatorStats>,
    gather: bool,
}

struct ChainRank {
    rank: u32,
    /// Ranks whose Done must pass through this rank, not counting itself.
    upstream_members: Vec<u32>,
    downstream: Option<SyncSender<ChainMsg>>,
    upstream: Option<Receiver<ChainMsg>>,
    early: VecDeque<ChainMsg>,
    aggregator: Option<AggregatorRole>,
}

impl ChainRank {
    fn relay(&mut self, step: u32) -> Result<()> {
        let down = self.downstream.as_ref().expect("relay has a downstream link");
        let gone = |r: u32| Error::TransportFailure(format!("rank {r}: downstream neighbour is gone"));
        let Some(up) = &self.upstream else {
            return Ok(());
        };
        let mut pending: BTreeSet<u32> = self.upstream_members.iter().copied().collect();
        while !pending.is_empty() {
            match up.recv() {
                Ok(ChainMsg::Block { origin, hops, block }) => down
                    .send(ChainMsg::Block {
                        origin,
                        hops: hops + 1,
                        block,
                    })
                    .map_err(|_| gone(self.rank))?,
                Ok(ChainMsg::Done { rank, step: s }) => {
                    check_step(step, s)?;
                    pending.remove(&rank);
                    down.send(ChainMsg::Done { rank, step: s }).map_err(|_| gone(self.rank))?;
                }
                Ok(ChainMsg::Broken { step: s, missing }) => {
                    check_step(step, s)?;
                    for r in &missing {
                        pending.remove(r);
                    }
                    down.send(ChainMsg::Broken { step: s, missing }).map_err(|_| gone(self.rank))?;
                }
                Err(_) => {
                    let missing: Vec<u32> = pending.into_iter().collect();
                    let _ = down.send(ChainMsg::Broken {
                        step,
                        missing: missing.clone(),
                    });
                    return Err(Error::TransportFailure(format!(
                        "rank {}: upstream neighbour vanished, ranks {missing:?} never reported step {step}",
                        self.rank
                    )));
                }
            }
        }
        Ok(())
    }

    fn forward(&mut self, step: u32, blocks: Vec<DataBlock>) -> Result<()> {
        let gone = || Error::TransportFailure(format!("rank {}: downstream neighbour is gone", self.rank));
        let down = self.downstream.as_ref().expect("non-aggregator has a downstream link");
        for block in blocks {
            down.send(ChainMsg::Block {
                origin: self.rank,
                hops: 0,
                block,
            })
            .map_err(|_| gone())?;
        }
        down.send(ChainMsg::Done { rank: self.rank, step }).map_err(|_| gone())?;
        self.relay(step)
    }

    fn aggregate(&mut self, step: u32, vars: &[VariableDef], blocks: Vec<DataBlock>) -> Result<()> {
        let role = self.aggregator.as_mut().expect("aggregator role");
        let sink = role
            .sink
            .as_mut()
            .ok_or_else(|| Error::TransportFailure("aggregator already closed".into()))?;
        let stats = role.stats.clone();
        let mut entries = Vec::new();
        let mut reported = BTreeSet::new();
        let mut failure = None;
        let mut gathered = Vec::new();

        let append = |origin: u32, hops: u32, block: DataBlock, sink: &mut Sink| -> Result<IndexEntry> {
            let held = HEADER_LEN as u64 + block.stored_len();
            let entry = sink.subfile().append_block(&block);
            stats.largest_block.fetch_max(held, Ordering::SeqCst);
            stats.hops.lock().unwrap().push((origin, block.var_id, hops));
            drop(block);
            stats.gauge.sub(held);
            entry
        };

        for block in blocks {
            stats.gauge.add(HEADER_LEN as u64 + block.stored_len());
            if role.gather {
                gathered.push((self.rank, 0, block));
            } else {
                entries.push(append(self.rank, 0, block, sink)?);
            }
        }
        reported.insert(self.rank);

        if let Some(up) = &self.upstream {
            let mut pending: BTreeSet<u32> = self.upstream_members.iter().copied().collect();
            while !pending.is_empty() {
                match recv_for(up, &mut self.early, step) {
                    Ok(ChainMsg::Block { origin, hops, block }) => {
                        stats.gauge.add(HEADER_LEN as u64 + block.stored_len());
                        if role.gather {
                            gathered.push((origin, hops, block));
                        } else {
                            entries.push(append(origin, hops, block, sink)?);
                        }
                    }
                    Ok(ChainMsg::Done { rank, step: s }) => {
                        check_step(step, s)?;
                        pending.remove(&rank);
                        reported.insert(rank);
                    }
                    Ok(ChainMsg::Broken { step: s, missing }) => {
                        check_step(step, s)?;
                        for r in &missing {
                            pending.remove(r);
                        }
                        failure = Some(format!("ranks {missing:?} never reported step {step}"));
                    }
                    Err(_) => {
                        failure = Some(format!("ranks {pending:?} vanished during step {step}"));
                        break;
                    }
                }
            }
        }
        for (origin, hops, block) in gathered {
            entries.push(append(origin, hops, block, sink)?);
        }
        let entries = close_step(sink, entries)?;
        if let Some(commit) = &role.commit {
            let _ = commit.send(CommitMsg {
                step,
                vars: vars.to_vec(),
                entries,
                reported: reported.clone(),
            });
        }
        match failure {
            Some(msg) => Err(Error::TransportFailure(format!("aggregator {}: {msg}", self.rank))),
            None => Ok(()),
        }
    }
}

/// Flush a step's appends and hand the entries on to the committer.
fn close_step(sink: &mut Sink, entries: Vec<IndexEntry>) -> Result<Vec<IndexEntry>> {
    sink.step_completed(&entries)?;
    Ok(entries)
}

fn check_step(expected: u32, got: u32) -> Result<()> {
    if expected != got {
        return Err(Error::TransportFailure(format!(
            "chain out of step: expected step {expected}, received step {got}"
        )));
    }
    Ok(())
}

impl RankEngine for ChainRank {
    fn end_step(&mut self, step: u64, vars: &[VariableDef], blocks: Vec<DataBlock>) -> Result<()> {
        let step = step as u32;
        if self.aggregator.is_some() {
            self.aggregate(step, vars, blocks)
        } else {
            self.forward(step, blocks)
        }
    }

    fn close(&mut self) -> Result<()> {
        self.downstream = None;
        self.upstream = None;
        if let Some(role) = &mut self.aggregator {
            role.commit = None;
            if let Some(sink) = role.sink.take() {
                sink.close()?;
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct FileJobSummary {
    pub index: GlobalIndex,
    /// Directory holding the index a reader should open.
    pub index_dir: PathBuf,
    pub incomplete_steps: Vec<u64>,
    /// Header + payload bytes across all sub-files.
    pub bytes_written: u64,
    pub drain_seconds: f64,
    pub data_files: usize,
}

/// A running file-engine stream.
pub struct FileJob {
    committer: JoinHandle<Result<(GlobalIndex, Vec<u64>)>>,
    burst: Option<BurstBuffer>,
    index_dir: PathBuf,
    stats: Vec<Arc<AggregatorStats>>,
    data_files: usize,
}

impl fmt::Debug for FileJob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FileJob")
            .field("index_dir", &self.index_dir)
            .field("data_files", &self.data_files)
            .finish()
    }
}

impl FileJob {
    /// Start the engine and return one [`Writer`] per rank, in rank order.
    pub fn launch(config: FileEngineConfig) -> Result<(FileJob, Vec<Writer>)> {
        config.ops.validate()?;
        let FileEngineConfig {
            topology,
            assignment,
            routing,
            output,
            ops,
        } = config;
        let n = topology.world_size();
        let assignment = match routing {
            Routing::Chain => assignment,
            Routing::Funnel => AggregatorAssignment::single(&topology),
        };
        if assignment.by_rank.len() != n {
            return Err(Error::Config(format!(
                "assignment covers {} ranks, topology has {n}",
                assignment.by_rank.len()
            )));
        }
        let ops = Arc::new(ops);

        let (index_dir, burst) = match output {
            FileOutput::Direct(target) => {
                shim::ensure_dir(&target.dir)?;
                (target.dir.clone(), Err(target))
            }
            FileOutput::Burst(bb) => (bb.index_dir().to_path_buf(), Ok(bb)),
        };

        let mut committer = IndexCommitter::new(&index_dir);
        let mut sinks = BTreeMap::new();
        for group in assignment.groups() {
            let id = group.subfile_id;
            let sink = match &burst {
                Err(target) => {
                    committer.register_subfile(id, format::subfile_name(id));
                    Sink::Direct(SubfileWriter::new(id, target.create(&format::subfile_name(id))?))
                }
                Ok(bb) => {
                    committer.register_subfile(id, BurstBuffer::relative_path(group.node, id));
                    Sink::Burst(bb.open_bb_subfile(group.node, id)?)
                }
            };
            sinks.insert(id, sink);
        }

        let (commit_tx, commit_rx) = mpsc::channel();
        let expected_reports = assignment.num_aggregators();
        let world = n as u32;
        let committer = std::thread::Builder::new()
            .name("index-committer".into())
            .spawn(move || run_committer(committer, commit_rx, expected_reports, world))
            .map_err(|e| Error::io("spawn committer", e))?;

        let mut engines: Vec<Option<ChainRank>> = (0..n).map(|_| None).collect();
        let mut stats = Vec::new();
        for group in assignment.groups() {
            let group_stats = Arc::new(AggregatorStats::default());
            stats.push(group_stats.clone());
            let m = group.members.len();
            match routing {
                Routing::Chain => {
                    // link i carries traffic from members[i + 1] to members[i]
                    let (mut txs, mut rxs): (Vec<_>, Vec<_>) =
                        (1..m).map(|_| mpsc::sync_channel(LINK_CAPACITY)).map(|(t, r)| (Some(t), Some(r))).unzip();
                    for (pos, &rank) in group.members.iter().enumerate() {
                        let downstream = if pos > 0 { txs[pos - 1].take() } else { None };
                        let upstream = if pos + 1 < m { rxs[pos].take() } else { None };
                        engines[rank as usize] = Some(ChainRank {
                            rank,
                            upstream_members: group.members[pos + 1..].to_vec(),
                            downstream,
                            upstream,
                            early: VecDeque::new(),
                            aggregator: None,
                        });
                    }
                }
                Routing::Funnel => {
                    let (tx, rx) = mpsc::sync_channel(LINK_CAPACITY);
                    for (pos, &rank) in group.members.iter().enumerate() {
                        engines[rank as usize] = Some(ChainRank {
                            rank,
                            upstream_members: if pos == 0 { group.members[1..].to_vec() } else { Vec::new() },
                            downstream: (pos > 0).then(|| tx.clone()),
                            upstream: None,
                            early: VecDeque::new(),
                            aggregator: None,
                        });
                    }
                    let root = engines[group.aggregator() as usize].as_mut().unwrap();
                    root.upstream = (m > 1).then_some(rx);
                }
            }
            let head = engines[group.aggregator() as usize].as_mut().unwrap();
            head.aggregator = Some(AggregatorRole {
                group: group.members.clone(),
                sink: sinks.remove(&group.subfile_id),
                commit: Some(commit_tx.clone()),
                stats: group_stats,
                gather: routing == Routing::Funnel,
            });
        }
        drop(commit_tx);

        let writers = engines
            .into_iter()
            .enumerate()
            .map(|(rank, e)| Writer::new(rank as u32, ops.clone(), Box::new(e.expect("every rank placed"))))
            .collect();
        Ok((
            FileJob {
                committer,
                burst: burst.ok(),
                index_dir,
                stats,
                data_files: expected_reports,
            },
            writers,
        ))
    }

    pub fn index_dir(&self) -> &Path {
        &self.index_dir
    }

    /// Per-group aggregator statistics, in sub-file order.
    pub fn aggregator_stats(&self) -> &[Arc<AggregatorStats>] {
        &self.stats
    }

    /// Wait for every writer to be closed or dropped, then finalize.
    pub fn finish(self) -> Result<FileJobSummary> {
        let (index, incomplete_steps) = self
            .committer
            .join()
            .map_err(|_| Error::TransportFailure("index committer panicked".into()))??;
        let (index, bytes_written, drain_seconds, index_dir) = match self.burst {
            Some(bb) => {
                let BurstSummary {
                    bytes_written,
                    drain_seconds,
                    index_dir,
                    index,
                } = bb.finalize(&index)?;
                (index, bytes_written, drain_seconds, index_dir)
            }
            None => {
                let written = index.steps.values().map(|s| s.stored_bytes()).sum();
                (index, written, 0.0, self.index_dir)
            }
        };
        Ok(FileJobSummary {
            index,
            index_dir,
            incomplete_steps,
            bytes_written,
            drain_seconds,
            data_files: self.data_files,
        })
    }
}

fn run_committer(
    mut committer: IndexCommitter,
    rx: Receiver<CommitMsg>,
    expected_reports: usize,
    world: u32,
) -> Result<(GlobalIndex, Vec<u64>)> {
    let mut pending: BTreeMap<u32, (usize, Vec<IndexEntry>, BTreeSet<u32>)> = BTreeMap::new();
    let mut incomplete = Vec::new();
    let mut publish = |committer: &mut IndexCommitter, step, entries, reported: BTreeSet<u32>| match committer
        .publish_step(step, entries, &reported, world)
    {
        Ok(()) => Ok(()),
        Err(Error::IncompleteStep(s)) => {
            warn!("step {s} published incomplete: {}/{world} ranks reported", reported.len());
            incomplete.push(s);
            Ok(())
        }
        Err(e) => Err(e),
    };
    for msg in rx {
        committer.register_variables(&msg.vars)?;
        let slot = pending.entry(msg.step).or_default();
        slot.0 += 1;
        slot.1.extend(msg.entries);
        slot.2.extend(msg.reported);
        if slot.0 == expected_reports {
            let (_, entries, reported) = pending.remove(&msg.step).unwrap();
            publish(&mut committer, msg.step, entries, reported)?;
        }
    }
    // aggregators that vanished never reported these steps
    for (step, (_, entries, reported)) in std::mem::take(&mut pending) {
        publish(&mut committer, step, entries, reported)?;
    }
    // a stream with no steps still gets an index readers can open
    if committer.index().steps.is_empty() {
        committer.index().store(committer.dir(), 0)?;
    }
    Ok((committer.into_index(), incomplete))
}

impl fmt::Debug for AggregatorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AggregatorRole").field("group", &self.group).finish()
    }
}
