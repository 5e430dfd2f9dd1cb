//! Producer/consumer step streaming over TCP.
//!
//! The producer side buffers each completed step in a bounded [`StepQueue`]
//! and a transfer thread serves one consumer at a time. The consumer pulls:
//! after a step is announced it requests blocks per variable and finally
//! releases the step, which frees its slot in the queue.
//!
//! Frames are `u32 length | u8 type | body`, little-endian, where `length`
//! counts the type byte and the body.
//!
//! | type | message | body |
//! |-----:|---------|------|
//! | 1 | HELLO | magic `SCST`, u16 version |
//! | 2 | HELLO_ACK | u16 version |
//! | 3 | STEP_ANNOUNCE | u32 step, u16 nvars, variables, u32 nblocks, block descriptors |
//! | 4 | BLOCK_REQUEST | u32 step, u32 var_id |
//! | 5 | BLOCK_DATA | u32 step, u32 block index, stored payload (rest of frame) |
//! | 6 | STEP_RELEASE | u32 step |
//! | 7 | END_OF_STREAM | empty |
//! | 8 | ERROR | u16 length + UTF-8 message |
//!
//! A variable is `u32 var_id | u8 dtype | u8 ndim | u64 shape[ndim] | u16 len | name`.
//! A block descriptor is `u32 var_id | u8 ndim | u64 start[4] | u64 count[4] |
//! u8 dtype | u8 codec | u8 shuffle | u64 raw_len | u64 stored_len | u32 crc32`
//! (92 bytes). Block indices count descriptors in announce order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use log::{debug, info, warn};

use crate::error::{Error, Result};
use crate::format::{self, read_box};
use crate::le::{LeReader, PutLe};
use crate::model::{DType, DataBlock, RankEngine, Selection, VariableDef, Writer};
use crate::ops::{self, CodecId, OperatorTable};
use crate::reader::{assemble, StepReader};

pub const WIRE_MAGIC: &[u8; 4] = b"SCST";
pub const PROTOCOL_VERSION: u16 = 1;
pub const ENDPOINT_ENV: &str = "STAGECOACH_ENDPOINT";
/// Largest frame either side accepts.
pub const MAX_FRAME: u32 = 1 << 30;
pub const BLOCK_DESCRIPTOR_LEN: usize = 92;

const MSG_HELLO: u8 = 1;
const MSG_HELLO_ACK: u8 = 2;
const MSG_STEP_ANNOUNCE: u8 = 3;
const MSG_BLOCK_REQUEST: u8 = 4;
const MSG_BLOCK_DATA: u8 = 5;
const MSG_STEP_RELEASE: u8 = 6;
const MSG_END_OF_STREAM: u8 = 7;
const MSG_ERROR: u8 = 8;

/// `STAGECOACH_ENDPOINT` if set, otherwise the configured endpoint.
pub fn resolve_endpoint(configured: &str) -> String {
    match std::env::var(ENDPOINT_ENV) {
        Ok(v) if !v.trim().is_empty() => v.trim().to_string(),
        _ => configured.to_string(),
    }
}

/// Block metadata as announced; no file offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockDescriptor {
    pub var_id: u32,
    pub start: Vec<u64>,
    pub count: Vec<u64>,
    pub dtype: DType,
    pub codec: CodecId,
    pub shuffled: bool,
    pub raw_len: u64,
    pub stored_len: u64,
    pub crc32: u32,
}

impl BlockDescriptor {
    pub fn of(block: &DataBlock) -> Self {
        BlockDescriptor {
            var_id: block.var_id,
            start: block.start.clone(),
            count: block.count.clone(),
            dtype: block.dtype,
            codec: block.codec,
            shuffled: block.shuffled,
            raw_len: block.raw_len,
            stored_len: block.stored_len(),
            crc32: format::crc32(&block.payload),
        }
    }

    pub fn selection(&self) -> Selection {
        Selection::new(&self.start, &self.count)
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.put_u32(self.var_id);
        format::put_box(out, &self.start, &self.count);
        out.put_u8(self.dtype.code());
        out.put_u8(self.codec.id());
        out.put_u8(u8::from(self.shuffled));
        out.put_u64(self.raw_len);
        out.put_u64(self.stored_len);
        out.put_u32(self.crc32);
    }

    fn decode_from(r: &mut LeReader<'_>) -> Result<Self> {
        let var_id = r.u32()?;
        let (start, count) = read_box(r)?;
        Ok(BlockDescriptor {
            var_id,
            start,
            count,
            dtype: DType::from_code(r.u8()?)?,
            codec: CodecId::from_id(r.u8()?)?,
            shuffled: r.u8()? != 0,
            raw_len: r.u64()?,
            stored_len: r.u64()?,
            crc32: r.u32()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepAnnounce {
    pub step: u32,
    pub variables: Vec<(u32, VariableDef)>,
    pub blocks: Vec<BlockDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireMessage {
    Hello { magic: [u8; 4], version: u16 },
    HelloAck { version: u16 },
    StepAnnounce(StepAnnounce),
    BlockRequest { step: u32, var_id: u32 },
    BlockData { step: u32, block_index: u32, payload: Vec<u8> },
    StepRelease { step: u32 },
    EndOfStream,
    Error { message: String },
}

impl WireMessage {
    pub fn hello() -> Self {
        WireMessage::Hello {
            magic: *WIRE_MAGIC,
            version: PROTOCOL_VERSION,
        }
    }

    pub fn msg_type(&self) -> u8 {
        match self {
            WireMessage::Hello { .. } => MSG_HELLO,
            WireMessage::HelloAck { .. } => MSG_HELLO_ACK,
            WireMessage::StepAnnounce(_) => MSG_STEP_ANNOUNCE,
            WireMessage::BlockRequest { .. } => MSG_BLOCK_REQUEST,
            WireMessage::BlockData { .. } => MSG_BLOCK_DATA,
            WireMessage::StepRelease { .. } => MSG_STEP_RELEASE,
            WireMessage::EndOfStream => MSG_END_OF_STREAM,
            WireMessage::Error { .. } => MSG_ERROR,
        }
    }

    /// The complete frame, length prefix included.
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        match self {
            WireMessage::Hello { magic, version } => {
                body.extend_from_slice(magic);
                body.put_u16(*version);
            }
            WireMessage::HelloAck { version } => body.put_u16(*version),
            WireMessage::StepAnnounce(a) => {
                body.put_u32(a.step);
                body.put_u16(a.variables.len() as u16);
                for (id, v) in &a.variables {
                    format::encode_variable(&mut body, *id, v);
                }
                body.put_u32(a.blocks.len() as u32);
                for b in &a.blocks {
                    b.encode_into(&mut body);
                }
            }
            WireMessage::BlockRequest { step, var_id } => {
                body.put_u32(*step);
                body.put_u32(*var_id);
            }
            WireMessage::BlockData {
                step,
                block_index,
                payload,
            } => {
                body.put_u32(*step);
                body.put_u32(*block_index);
                body.extend_from_slice(payload);
            }
            WireMessage::StepRelease { step } => body.put_u32(*step),
            WireMessage::EndOfStream => {}
            WireMessage::Error { message } => body.put_str16(message),
        }
        let mut frame = Vec::with_capacity(5 + body.len());
        frame.put_u32(body.len() as u32 + 1);
        frame.put_u8(self.msg_type());
        frame.extend_from_slice(&body);
        frame
    }

    /// Decode a frame's type byte and body.
    pub fn decode(msg_type: u8, body: &[u8]) -> Result<Self> {
        let mut r = LeReader::new(body, "wire message");
        let msg = match msg_type {
            MSG_HELLO => WireMessage::Hello {
                magic: r.array()?,
                version: r.u16()?,
            },
            MSG_HELLO_ACK => WireMessage::HelloAck { version: r.u16()? },
            MSG_STEP_ANNOUNCE => {
                let step = r.u32()?;
                let nvars = r.u16()?;
                let variables = (0..nvars)
                    .map(|_| format::decode_variable(&mut r))
                    .collect::<Result<Vec<_>>>()?;
                let nblocks = r.u32()?;
                let blocks = (0..nblocks)
                    .map(|_| BlockDescriptor::decode_from(&mut r))
                    .collect::<Result<Vec<_>>>()?;
                WireMessage::StepAnnounce(StepAnnounce {
                    step,
                    variables,
                    blocks,
                })
            }
            MSG_BLOCK_REQUEST => WireMessage::BlockRequest {
                step: r.u32()?,
                var_id: r.u32()?,
            },
            MSG_BLOCK_DATA => WireMessage::BlockData {
                step: r.u32()?,
                block_index: r.u32()?,
                payload: r.rest().to_vec(),
            },
            MSG_STEP_RELEASE => WireMessage::StepRelease { step: r.u32()? },
            MSG_END_OF_STREAM => WireMessage::EndOfStream,
            MSG_ERROR => WireMessage::Error { message: r.str16()? },
            other => return Err(Error::Protocol(format!("unknown message type {other}"))),
        };
        if r.remaining() != 0 {
            return Err(Error::Protocol(format!(
                "{} trailing bytes after message type {msg_type}",
                r.remaining()
            )));
        }
        Ok(msg)
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &WireMessage) -> io::Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()
}

/// Read one frame; `Ok(None)` on a clean end of stream before the length.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<WireMessage>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(Error::TransportFailure(format!("read frame length: {e}"))),
    }
    let len = u32::from_le_bytes(len);
    if len == 0 || len > MAX_FRAME {
        return Err(Error::Protocol(format!("bad frame length {len}")));
    }
    let mut frame = vec![0u8; len as usize];
    r.read_exact(&mut frame)
        .map_err(|e| Error::TransportFailure(format!("read frame body: {e}")))?;
    WireMessage::decode(frame[0], &frame[1..]).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueuePolicy {
    Block,
    DiscardOldest,
}

impl FromStr for QueuePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "block" => Ok(QueuePolicy::Block),
            "discard_oldest" => Ok(QueuePolicy::DiscardOldest),
            other => Err(Error::Config(format!("queue policy must be block|discard_oldest, got `{other}`"))),
        }
    }
}

impl fmt::Display for QueuePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueuePolicy::Block => "block",
            QueuePolicy::DiscardOldest => "discard_oldest",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueConfig {
    pub max_steps: usize,
    pub policy: QueuePolicy,
}

impl Default for QueueConfig {
    fn default() -> Self {
        QueueConfig {
            max_steps: 4,
            policy: QueuePolicy::Block,
        }
    }
}

/// A step whose blocks from every rank have arrived.
#[derive(Debug)]
pub struct BufferedStep {
    pub step: u32,
    pub variables: Vec<(u32, VariableDef)>,
    pub blocks: Vec<DataBlock>,
}

impl BufferedStep {
    pub fn stored_bytes(&self) -> u64 {
        self.blocks.iter().map(DataBlock::stored_len).sum()
    }

    fn announce(&self) -> StepAnnounce {
        StepAnnounce {
            step: self.step,
            variables: self.variables.clone(),
            blocks: self.blocks.iter().map(BlockDescriptor::of).collect(),
        }
    }
}

#[derive(Debug)]
struct Slot {
    step: u32,
    variables: BTreeMap<u32, VariableDef>,
    blocks: Vec<DataBlock>,
    reported: usize,
    ready: Option<Arc<BufferedStep>>,
    pinned: bool,
}

impl Slot {
    fn bytes(&self) -> u64 {
        match &self.ready {
            Some(s) => s.stored_bytes(),
            None => self.blocks.iter().map(DataBlock::stored_len).sum(),
        }
    }
}

#[derive(Debug, Default)]
struct QueueState {
    slots: VecDeque<Slot>,
    /// Steps evicted or refused, in order; later contributions are dropped.
    dropped: Vec<u32>,
    dropped_set: BTreeSet<u32>,
    bytes: u64,
    high_water: u64,
    closed_ranks: usize,
    detached: bool,
    blocked_waits: usize,
}

/// Bounded buffer of steps between the application and the transfer thread.
///
/// A step takes a slot as soon as its first rank reports, so the memory held
/// never exceeds `max_steps` steps.
#[derive(Debug)]
pub struct StepQueue {
    config: QueueConfig,
    ranks: usize,
    state: Mutex<QueueState>,
    changed: Condvar,
}

impl StepQueue {
    pub fn new(config: QueueConfig, ranks: usize) -> Result<Self> {
        if config.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        if ranks == 0 {
            return Err(Error::Config("a staging stream needs at least one rank".into()));
        }
        Ok(StepQueue {
            config,
            ranks,
            state: Mutex::new(QueueState::default()),
            changed: Condvar::new(),
        })
    }

    pub fn config(&self) -> QueueConfig {
        self.config
    }

    /// One rank's share of a step. Under `Block` this waits for a free slot.
    pub fn contribute(&self, step: u32, vars: &[VariableDef], blocks: Vec<DataBlock>) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        if st.detached {
            return Err(Error::TransportFailure("staging consumer disconnected".into()));
        }
        if st.dropped_set.contains(&step) {
            return Ok(());
        }
        if !st.slots.iter().any(|s| s.step == step) {
            let mut waited = false;
            while st.slots.len() >= self.config.max_steps
                && !st.detached
                && !st.slots.iter().any(|s| s.step == step)
                && !st.dropped_set.contains(&step)
            {
                match self.config.policy {
                    QueuePolicy::Block => {
                        waited = true;
                        st = self.changed.wait(st).unwrap();
                    }
                    QueuePolicy::DiscardOldest => {
                        match st.slots.iter().position(|s| !s.pinned) {
                            Some(i) => {
                                let victim = st.slots.remove(i).unwrap();
                                st.bytes -= victim.bytes();
                                warn!("staging queue full, dropped step {}", victim.step);
                                st.dropped.push(victim.step);
                                st.dropped_set.insert(victim.step);
                            }
                            None => {
                                warn!("staging queue full of in-flight steps, dropped step {step}");
                                st.dropped.push(step);
                                st.dropped_set.insert(step);
                                return Ok(());
                            }
                        }
                    }
                }
            }
            if waited {
                st.blocked_waits += 1;
            }
            if st.detached {
                return Err(Error::TransportFailure("staging consumer disconnected".into()));
            }
            // another rank may have opened the slot while we waited
            if st.dropped_set.contains(&step) {
                return Ok(());
            }
            if !st.slots.iter().any(|s| s.step == step) {
                st.slots.push_back(Slot {
                    step,
                    variables: BTreeMap::new(),
                    blocks: Vec::new(),
                    reported: 0,
                    ready: None,
                    pinned: false,
                });
            }
        }
        let added: u64 = blocks.iter().map(DataBlock::stored_len).sum();
        let ranks = self.ranks;
        let slot = st.slots.iter_mut().find(|s| s.step == step).unwrap();
        for (id, v) in vars.iter().enumerate() {
            slot.variables.entry(id as u32).or_insert_with(|| v.clone());
        }
        slot.blocks.extend(blocks);
        slot.reported += 1;
        if slot.reported == ranks {
            let mut blocks = std::mem::take(&mut slot.blocks);
            blocks.sort_by(|a, b| (a.var_id, &a.start).cmp(&(b.var_id, &b.start)));
            slot.ready = Some(Arc::new(BufferedStep {
                step,
                variables: std::mem::take(&mut slot.variables).into_iter().collect(),
                blocks,
            }));
        }
        st.bytes += added;
        st.high_water = st.high_water.max(st.bytes);
        self.changed.notify_all();
        Ok(())
    }

    pub fn close_rank(&self) {
        let mut st = self.state.lock().unwrap();
        st.closed_ranks += 1;
        self.changed.notify_all();
    }

    /// Oldest complete step, pinned until released; `None` once every rank
    /// has closed and the queue is empty.
    pub fn next_ready(&self) -> Option<Arc<BufferedStep>> {
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(front) = st.slots.iter_mut().find(|s| s.ready.is_some()) {
                front.pinned = true;
                return front.ready.clone();
            }
            if st.closed_ranks >= self.ranks && st.slots.iter().all(|s| s.ready.is_none()) {
                if !st.slots.is_empty() {
                    let partial: Vec<u32> = st.slots.iter().map(|s| s.step).collect();
                    warn!("stream closed with partial steps {partial:?}");
                }
                return None;
            }
            st = self.changed.wait(st).unwrap();
        }
    }

    pub fn release(&self, step: u32) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        let i = st
            .slots
            .iter()
            .position(|s| s.step == step && s.pinned)
            .ok_or_else(|| Error::Protocol(format!("release of step {step}, which is not in flight")))?;
        let slot = st.slots.remove(i).unwrap();
        st.bytes -= slot.bytes();
        self.changed.notify_all();
        Ok(())
    }

    /// Unblock writers after the consumer went away.
    pub fn detach(&self) {
        let mut st = self.state.lock().unwrap();
        st.detached = true;
        self.changed.notify_all();
    }

    pub fn buffered_steps(&self) -> usize {
        self.state.lock().unwrap().slots.len()
    }

    pub fn bytes(&self) -> u64 {
        self.state.lock().unwrap().bytes
    }

    pub fn high_water_bytes(&self) -> u64 {
        self.state.lock().unwrap().high_water
    }

    pub fn dropped_steps(&self) -> Vec<u32> {
        self.state.lock().unwrap().dropped.clone()
    }

    /// Contributions that had to wait for a free slot.
    pub fn blocked_waits(&self) -> usize {
        self.state.lock().unwrap().blocked_waits
    }
}

struct StagingRank {
    queue: Arc<StepQueue>,
    closed: bool,
}

impl RankEngine for StagingRank {
    fn end_step(&mut self, step: u64, vars: &[VariableDef], blocks: Vec<DataBlock>) -> Result<()> {
        self.queue.contribute(step as u32, vars, blocks)
    }

    fn close(&mut self) -> Result<()> {
        if !self.closed {
            self.closed = true;
            self.queue.close_rank();
        }
        Ok(())
    }
}

impl Drop for StagingRank {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

#[derive(Debug, Clone)]
pub struct StagingConfig {
    /// `host:port`; port 0 picks a free one.
    pub endpoint: String,
    pub queue: QueueConfig,
    pub ranks: usize,
    pub ops: OperatorTable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagingSummary {
    pub steps_served: Vec<u32>,
    pub dropped_steps: Vec<u32>,
    pub high_water_bytes: u64,
    pub blocked_waits: usize,
}

/// A producer stream being served on a TCP endpoint.
pub struct StagingJob {
    queue: Arc<StepQueue>,
    addr: SocketAddr,
    transfer: JoinHandle<Result<Vec<u32>>>,
}

impl fmt::Debug for StagingJob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StagingJob").field("addr", &self.addr).finish()
    }
}

impl StagingJob {
    /// Bind the endpoint, start the transfer thread and return one writer per rank.
    pub fn serve(config: StagingConfig) -> Result<(StagingJob, Vec<Writer>)> {
        config.ops.validate()?;
        let queue = Arc::new(StepQueue::new(config.queue, config.ranks)?);
        let endpoint = config.endpoint.clone();
        let listener = TcpListener::bind(&endpoint).map_err(|source| Error::BindFailure {
            endpoint: endpoint.clone(),
            source,
        })?;
        let addr = listener.local_addr().map_err(|e| Error::io("local address", e))?;
        info!("staging producer listening on {addr}");
        let q = queue.clone();
        let transfer = std::thread::Builder::new()
            .name("staging-transfer".into())
            .spawn(move || transfer_loop(listener, q))
            .map_err(|e| Error::io("spawn transfer thread", e))?;
        let ops = Arc::new(config.ops);
        let writers = (0..config.ranks)
            .map(|r| {
                Writer::new(
                    r as u32,
                    ops.clone(),
                    Box::new(StagingRank {
                        queue: queue.clone(),
                        closed: false,
                    }),
                )
            })
            .collect();
        Ok((StagingJob { queue, addr, transfer }, writers))
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn queue(&self) -> &Arc<StepQueue> {
        &self.queue
    }

    /// Wait until the consumer has been sent END_OF_STREAM.
    pub fn finish(self) -> Result<StagingSummary> {
        let served = self
            .transfer
            .join()
            .map_err(|_| Error::TransportFailure("transfer thread panicked".into()))??;
        Ok(StagingSummary {
            steps_served: served,
            dropped_steps: self.queue.dropped_steps(),
            high_water_bytes: self.queue.high_water_bytes(),
            blocked_waits: self.queue.blocked_waits(),
        })
    }
}

fn transfer_loop(listener: TcpListener, queue: Arc<StepQueue>) -> Result<Vec<u32>> {
    loop {
        let (stream, peer) = listener.accept().map_err(|e| Error::io("accept consumer", e))?;
        stream.set_nodelay(true).ok();
        match handshake(&stream) {
            Ok(()) => {
                info!("staging consumer attached from {peer}");
                let result = serve_consumer(stream, &queue);
                if result.is_err() {
                    queue.detach();
                }
                return result;
            }
            Err(e) => warn!("rejected consumer {peer}: {e}"),
        }
    }
}

fn handshake(stream: &TcpStream) -> Result<()> {
    let mut r = stream;
    let mut w = stream;
    let reply = |w: &mut &TcpStream, msg: String| {
        let _ = write_message(w, &WireMessage::Error { message: msg.clone() });
        let _ = w.shutdown(std::net::Shutdown::Both);
        Err(Error::Protocol(msg))
    };
    match read_message(&mut r) {
        Ok(Some(WireMessage::Hello { magic, version })) => {
            if &magic != WIRE_MAGIC {
                return reply(&mut w, format!("bad magic {magic:?}"));
            }
            if version != PROTOCOL_VERSION {
                return reply(
                    &mut w,
                    format!("protocol version {version} not supported, producer speaks {PROTOCOL_VERSION}"),
                );
            }
            write_message(&mut w, &WireMessage::HelloAck {
                version: PROTOCOL_VERSION,
            })
            .map_err(|e| Error::TransportFailure(format!("send HELLO_ACK: {e}")))
        }
        Ok(Some(other)) => reply(&mut w, format!("expected HELLO, got message type {}", other.msg_type())),
        Ok(None) => Err(Error::Protocol("consumer closed before HELLO".into())),
        Err(e) => reply(&mut w, e.to_string()),
    }
}

fn serve_consumer(stream: TcpStream, queue: &StepQueue) -> Result<Vec<u32>> {
    let mut r = BufReader::new(stream.try_clone().map_err(|e| Error::io("clone socket", e))?);
    let mut w = BufWriter::new(stream);
    let send = |w: &mut BufWriter<TcpStream>, msg: &WireMessage| {
        write_message(w, msg).map_err(|e| Error::TransportFailure(format!("send to consumer: {e}")))
    };
    let mut served = Vec::new();
    while let Some(step) = queue.next_ready() {
        send(&mut w, &WireMessage::StepAnnounce(step.announce()))?;
        loop {
            match read_message(&mut r)? {
                Some(WireMessage::BlockRequest { step: s, var_id }) => {
                    if s != step.step {
                        let msg = format!("request for step {s} while step {} is in flight", step.step);
                        let _ = send(&mut w, &WireMessage::Error { message: msg.clone() });
                        return Err(Error::Protocol(msg));
                    }
                    for (i, b) in step.blocks.iter().enumerate().filter(|(_, b)| b.var_id == var_id) {
                        send(&mut w, &WireMessage::BlockData {
                            step: s,
                            block_index: i as u32,
                            payload: b.payload.clone(),
                        })?;
                    }
                }
                Some(WireMessage::StepRelease { step: s }) if s == step.step => {
                    queue.release(s)?;
                    served.push(s);
                    debug!("consumer released step {s}");
                    break;
                }
                Some(other) => {
                    let msg = format!("unexpected message type {} during step {}", other.msg_type(), step.step);
                    let _ = send(&mut w, &WireMessage::Error { message: msg.clone() });
                    return Err(Error::Protocol(msg));
                }
                None => {
                    return Err(Error::TransportFailure(format!(
                        "consumer disconnected during step {}",
                        step.step
                    )))
                }
            }
        }
    }
    send(&mut w, &WireMessage::EndOfStream)?;
    Ok(served)
}

/// Consumer end of a staging stream.
pub struct StagingReader {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    current: Option<StepAnnounce>,
    variables: BTreeMap<u32, VariableDef>,
    finished: bool,
}

impl fmt::Debug for StagingReader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StagingReader")
            .field("step", &self.current.as_ref().map(|a| a.step))
            .finish()
    }
}

impl StagingReader {
    pub fn connect(endpoint: impl ToSocketAddrs + fmt::Display) -> Result<Self> {
        let name = endpoint.to_string();
        let stream = TcpStream::connect(endpoint).map_err(|source| Error::ConnectFailure {
            endpoint: name,
            source,
        })?;
        Self::handshake(stream, WireMessage::hello())
    }

    /// Connect with an arbitrary opening message (for protocol tests).
    pub fn handshake(stream: TcpStream, hello: WireMessage) -> Result<Self> {
        stream.set_nodelay(true).ok();
        let mut writer = BufWriter::new(stream.try_clone().map_err(|e| Error::io("clone socket", e))?);
        let mut reader = BufReader::new(stream);
        write_message(&mut writer, &hello).map_err(|e| Error::TransportFailure(format!("send HELLO: {e}")))?;
        match read_message(&mut reader)? {
            Some(WireMessage::HelloAck { version }) if version == PROTOCOL_VERSION => Ok(StagingReader {
                reader,
                writer,
                current: None,
                variables: BTreeMap::new(),
                finished: false,
            }),
            Some(WireMessage::HelloAck { version }) => Err(Error::Protocol(format!("producer speaks version {version}"))),
            Some(WireMessage::Error { message }) => Err(Error::Protocol(message)),
            Some(other) => Err(Error::Protocol(format!("expected HELLO_ACK, got type {}", other.msg_type()))),
            None => Err(Error::Protocol("producer closed during handshake".into())),
        }
    }

    fn send(&mut self, msg: &WireMessage) -> Result<()> {
        write_message(&mut self.writer, msg).map_err(|e| Error::TransportFailure(format!("send to producer: {e}")))
    }

    fn recv(&mut self) -> Result<WireMessage> {
        match read_message(&mut self.reader)? {
            Some(WireMessage::Error { message }) => Err(Error::Protocol(message)),
            Some(m) => Ok(m),
            None => Err(Error::TransportFailure("producer closed the connection".into())),
        }
    }

    /// The announce of the open step.
    pub fn announce(&self) -> Option<&StepAnnounce> {
        self.current.as_ref()
    }

    /// Fetch every block of `var_id` in the open step, decompressed.
    pub fn fetch_blocks(&mut self, var_id: u32) -> Result<Vec<DataBlock>> {
        let announce = self.current.clone().ok_or(Error::StepNotOpen)?;
        let wanted: Vec<usize> = announce
            .blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.var_id == var_id)
            .map(|(i, _)| i)
            .collect();
        self.send(&WireMessage::BlockRequest {
            step: announce.step,
            var_id,
        })?;
        let mut out = Vec::with_capacity(wanted.len());
        for &i in &wanted {
            let (step, index, payload) = match self.recv()? {
                WireMessage::BlockData {
                    step,
                    block_index,
                    payload,
                } => (step, block_index, payload),
                other => {
                    return Err(Error::Protocol(format!(
                        "expected BLOCK_DATA, got type {}",
                        other.msg_type()
                    )))
                }
            };
            if step != announce.step || index as usize != i {
                return Err(Error::Protocol(format!(
                    "got block {index} of step {step}, expected block {i} of step {}",
                    announce.step
                )));
            }
            let d = &announce.blocks[i];
            let computed = format::crc32(&payload);
            if computed != d.crc32 {
                return Err(Error::ChecksumMismatch {
                    stored: d.crc32,
                    computed,
                });
            }
            if payload.len() as u64 != d.stored_len {
                return Err(Error::Protocol(format!(
                    "block {i}: {} bytes, announced {}",
                    payload.len(),
                    d.stored_len
                )));
            }
            out.push(ops::decompress_block(DataBlock {
                var_id: d.var_id,
                step,
                dtype: d.dtype,
                start: d.start.clone(),
                count: d.count.clone(),
                codec: d.codec,
                shuffled: d.shuffled,
                raw_len: d.raw_len,
                payload,
            })?);
        }
        Ok(out)
    }
}

impl StepReader for StagingReader {
    fn begin_step(&mut self) -> Result<Option<u64>> {
        if self.current.is_some() {
            return Err(Error::StepAlreadyOpen);
        }
        if self.finished {
            return Ok(None);
        }
        match self.recv()? {
            WireMessage::StepAnnounce(a) => {
                for (id, v) in &a.variables {
                    self.variables.insert(*id, v.clone());
                }
                let step = a.step as u64;
                self.current = Some(a);
                Ok(Some(step))
            }
            WireMessage::EndOfStream => {
                self.finished = true;
                Ok(None)
            }
            other => Err(Error::Protocol(format!(
                "expected STEP_ANNOUNCE or END_OF_STREAM, got type {}",
                other.msg_type()
            ))),
        }
    }

    fn variables(&self) -> Vec<VariableDef> {
        self.variables.values().cloned().collect()
    }

    fn get(&mut self, name: &str, selection: &Selection) -> Result<Vec<u8>> {
        let announce = self.current.as_ref().ok_or(Error::StepNotOpen)?;
        let (var_id, var) = announce
            .variables
            .iter()
            .find(|(_, v)| v.name == name)
            .cloned()
            .ok_or_else(|| Error::VariableNotFound(name.to_string()))?;
        selection.validate(&var.shape)?;
        if !announce.blocks.iter().any(|b| b.var_id == var_id) {
            return Err(Error::VariableNotFound(name.to_string()));
        }
        let blocks = self.fetch_blocks(var_id)?;
        assemble(
            &var,
            selection,
            blocks.iter().map(|b| (b.selection(), b.payload.as_slice())),
        )
    }

    fn end_step(&mut self) -> Result<()> {
        let a = self.current.take().ok_or(Error::StepNotOpen)?;
        self.send(&WireMessage::StepRelease { step: a.step })
    }
}

/// Start/end of one step's activity, in seconds since a shared origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSpan {
    pub step: u64,
    pub start: f64,
    pub end: f64,
}

impl StepSpan {
    pub fn duration(&self) -> f64 {
        (self.end - self.start).max(0.0)
    }
}

/// Records spans against a common origin.
#[derive(Debug, Clone)]
pub struct SpanLog {
    origin: Instant,
    spans: Vec<StepSpan>,
}

impl SpanLog {
    pub fn new(origin: Instant) -> Self {
        SpanLog {
            origin,
            spans: Vec::new(),
        }
    }

    pub fn record(&mut self, step: u64, started: Instant, ended: Instant) {
        self.spans.push(StepSpan {
            step,
            start: (started - self.origin).as_secs_f64(),
            end: (ended - self.origin).as_secs_f64(),
        });
    }

    pub fn spans(&self) -> &[StepSpan] {
        &self.spans
    }

    pub fn into_spans(self) -> Vec<StepSpan> {
        self.spans
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OverlapStats {
    pub steps: usize,
    /// Last activity of either side, measured from the origin.
    pub time_to_solution: f64,
    /// Time the producer spent inside `end_step`.
    pub producer_blocked: f64,
    /// Time between the consumer's first possible start (the first step's
    /// publication) and its last step's end not spent analysing.
    pub consumer_idle: f64,
}

/// `producer_log` holds one span per `end_step`; `consumer_log` one span per
/// analysed step, from `begin_step` returning to `end_step`.
pub fn pipeline_overlap_report(producer_log: &[StepSpan], consumer_log: &[StepSpan]) -> OverlapStats {
    if producer_log.is_empty() && consumer_log.is_empty() {
        return OverlapStats::default();
    }
    let last = producer_log
        .iter()
        .chain(consumer_log)
        .map(|s| s.end)
        .fold(0.0f64, f64::max);
    let producer_blocked = producer_log.iter().map(StepSpan::duration).sum();
    let consumer_idle = match (producer_log.iter().map(|s| s.end).reduce(f64::min), consumer_log.last()) {
        (Some(first_ready), Some(_)) => {
            let end = consumer_log.iter().map(|s| s.end).fold(0.0f64, f64::max);
            let busy: f64 = consumer_log.iter().map(StepSpan::duration).sum();
            (end - first_ready - busy).max(0.0)
        }
        _ => 0.0,
    };
    OverlapStats {
        steps: producer_log.len().max(consumer_log.len()),
        time_to_solution: last,
        producer_blocked,
        consumer_idle,
    }
}
