//! Self-describing container: per-aggregator data sub-files plus a global index.
//!
//! A stream directory holds
//!
//! * `data.<m>`: the sub-file of aggregator `m`, an append-only sequence of
//!   `BlockHeader` + stored payload records;
//! * `md.idx`: the [`GlobalIndex`], rewritten atomically at every step
//!   publication (`md.step.<s>.tmp` is written, synced and renamed).
//!
//! All integers are little-endian.
//!
//! Block header, 100 bytes:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4  | magic `SCBK` |
//! | 4  | 4  | var_id |
//! | 8  | 4  | step |
//! | 12 | 1  | ndim |
//! | 13 | 32 | start\[4\] (u64, unused slots zero) |
//! | 45 | 32 | count\[4\] |
//! | 77 | 1  | dtype code |
//! | 78 | 1  | codec id |
//! | 79 | 1  | shuffle flag |
//! | 80 | 8  | raw_len |
//! | 88 | 8  | stored_len |
//! | 96 | 4  | CRC-32 (IEEE) of the stored payload |
//!
//! Index file: magic `SCIX`, u16 format version, then records of
//! `u32 body_len | u8 type | body` until end of file. Record types are
//! variable (1), sub-file (2) and step (3); see [`GlobalIndex::encode`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};
use crate::le::{LeReader, PutLe};
use crate::model::{DType, DataBlock, Selection, VariableDef, MAX_RANK};
use crate::ops::{self, CodecId};

pub const BLOCK_MAGIC: &[u8; 4] = b"SCBK";
pub const INDEX_MAGIC: &[u8; 4] = b"SCIX";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 100;
pub const ENTRY_LEN: usize = 103;
pub const INDEX_FILE: &str = "md.idx";

const REC_VARIABLE: u8 = 1;
const REC_SUBFILE: u8 = 2;
const REC_STEP: u8 = 3;

pub fn subfile_name(subfile_id: u32) -> String {
    format!("data.{subfile_id}")
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

pub(crate) fn put_box(out: &mut Vec<u8>, start: &[u64], count: &[u64]) {
    out.put_u8(count.len() as u8);
    for d in 0..MAX_RANK {
        out.put_u64(start.get(d).copied().unwrap_or(0));
    }
    for d in 0..MAX_RANK {
        out.put_u64(count.get(d).copied().unwrap_or(0));
    }
}

pub(crate) fn read_box(r: &mut LeReader<'_>) -> Result<(Vec<u64>, Vec<u64>)> {
    let ndim = r.u8()? as usize;
    if ndim > MAX_RANK {
        return Err(Error::Format(format!("ndim {ndim} exceeds {MAX_RANK}")));
    }
    let mut start = [0u64; MAX_RANK];
    let mut count = [0u64; MAX_RANK];
    for s in start.iter_mut() {
        *s = r.u64()?;
    }
    for c in count.iter_mut() {
        *c = r.u64()?;
    }
    Ok((start[..ndim].to_vec(), count[..ndim].to_vec()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockHeader {
    pub var_id: u32,
    pub step: u32,
    pub start: Vec<u64>,
    pub count: Vec<u64>,
    pub dtype_code: u8,
    pub codec_id: u8,
    pub shuffle_flag: u8,
    pub raw_len: u64,
    pub stored_len: u64,
    pub crc32: u32,
}

impl BlockHeader {
    pub fn for_block(block: &DataBlock) -> Self {
        BlockHeader {
            var_id: block.var_id,
            step: block.step,
            start: block.start.clone(),
            count: block.count.clone(),
            dtype_code: block.dtype.code(),
            codec_id: block.codec.id(),
            shuffle_flag: block.shuffled as u8,
            raw_len: block.raw_len,
            stored_len: block.stored_len(),
            crc32: crc32(&block.payload),
        }
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(BLOCK_MAGIC);
        out.put_u32(self.var_id);
        out.put_u32(self.step);
        put_box(&mut out, &self.start, &self.count);
        out.put_u8(self.dtype_code);
        out.put_u8(self.codec_id);
        out.put_u8(self.shuffle_flag);
        out.put_u64(self.raw_len);
        out.put_u64(self.stored_len);
        out.put_u32(self.crc32);
        out.try_into().expect("header layout is 100 bytes")
    }

    /// Decode a header; `offset` is only used for diagnostics.
    pub fn decode(bytes: &[u8], offset: u64) -> Result<Self> {
        let mut r = LeReader::new(bytes, "block header");
        if r.bytes(4)? != BLOCK_MAGIC {
            return Err(Error::BadMagic {
                offset,
                expected: "SCBK",
            });
        }
        let var_id = r.u32()?;
        let step = r.u32()?;
        let (start, count) = read_box(&mut r)?;
        Ok(BlockHeader {
            var_id,
            step,
            start,
            count,
            dtype_code: r.u8()?,
            codec_id: r.u8()?,
            shuffle_flag: r.u8()?,
            raw_len: r.u64()?,
            stored_len: r.u64()?,
            crc32: r.u32()?,
        })
    }
}

/// Locates one block inside one sub-file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub var_id: u32,
    pub step: u32,
    pub subfile_id: u32,
    /// Offset of the block header magic.
    pub byte_offset: u64,
    pub stored_len: u64,
    pub start: Vec<u64>,
    pub count: Vec<u64>,
    pub codec_id: u8,
    pub shuffle_flag: u8,
    pub raw_len: u64,
}

impl IndexEntry {
    pub fn selection(&self) -> Selection {
        Selection::new(&self.start, &self.count)
    }

    /// Header plus payload bytes occupied in the sub-file.
    pub fn record_len(&self) -> u64 {
        HEADER_LEN as u64 + self.stored_len
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.put_u32(self.var_id);
        out.put_u32(self.step);
        out.put_u32(self.subfile_id);
        out.put_u64(self.byte_offset);
        out.put_u64(self.stored_len);
        put_box(out, &self.start, &self.count);
        out.put_u8(self.codec_id);
        out.put_u8(self.shuffle_flag);
        out.put_u64(self.raw_len);
    }

    fn decode_from(r: &mut LeReader<'_>) -> Result<Self> {
        let var_id = r.u32()?;
        let step = r.u32()?;
        let subfile_id = r.u32()?;
        let byte_offset = r.u64()?;
        let stored_len = r.u64()?;
        let (start, count) = read_box(r)?;
        Ok(IndexEntry {
            var_id,
            step,
            subfile_id,
            byte_offset,
            stored_len,
            start,
            count,
            codec_id: r.u8()?,
            shuffle_flag: r.u8()?,
            raw_len: r.u64()?,
        })
    }
}

pub(crate) fn encode_variable(out: &mut Vec<u8>, var_id: u32, var: &VariableDef) {
    out.put_u32(var_id);
    out.put_u8(var.dtype.code());
    out.put_u8(var.shape.len() as u8);
    for &e in &var.shape {
        out.put_u64(e);
    }
    out.put_str16(&var.name);
}

pub(crate) fn decode_variable(r: &mut LeReader<'_>) -> Result<(u32, VariableDef)> {
    let var_id = r.u32()?;
    let dtype = DType::from_code(r.u8()?)?;
    let ndim = r.u8()? as usize;
    if ndim > MAX_RANK {
        return Err(Error::Format(format!("variable {var_id} has {ndim} dimensions")));
    }
    let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let name = r.str16()?;
    let def = VariableDef::new(name, dtype, &shape).map_err(|e| Error::Format(e.to_string()))?;
    Ok((var_id, def))
}

/// Append side of one sub-file. Exactly one aggregator owns each instance.
#[derive(Debug)]
pub struct SubfileWriter<W> {
    subfile_id: u32,
    sink: W,
    len: u64,
}

impl<W: Write> SubfileWriter<W> {
    pub fn new(subfile_id: u32, sink: W) -> Self {
        SubfileWriter {
            subfile_id,
            sink,
            len: 0,
        }
    }

    pub fn subfile_id(&self) -> u32 {
        self.subfile_id
    }

    /// Bytes appended so far.
    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn append_block(&mut self, block: &DataBlock) -> Result<IndexEntry> {
        let header = BlockHeader::for_block(block);
        let byte_offset = self.len;
        let id = self.subfile_id;
        self.sink
            .write_all(&header.encode())
            .and_then(|_| self.sink.write_all(&block.payload))
            .ctx(|| format!("append to sub-file {id}"))?;
        self.len += HEADER_LEN as u64 + block.stored_len();
        Ok(IndexEntry {
            var_id: block.var_id,
            step: block.step,
            subfile_id: id,
            byte_offset,
            stored_len: header.stored_len,
            start: header.start,
            count: header.count,
            codec_id: header.codec_id,
            shuffle_flag: header.shuffle_flag,
            raw_len: header.raw_len,
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        let id = self.subfile_id;
        self.sink.flush().ctx(|| format!("flush sub-file {id}"))
    }

    pub fn get_ref(&self) -> &W {
        &self.sink
    }

    pub fn into_inner(self) -> W {
        self.sink
    }
}

fn read_record<R: Read + Seek>(src: &mut R, entry: &IndexEntry) -> Result<(BlockHeader, Vec<u8>)> {
    let ctx = || format!("read sub-file {} at {}", entry.subfile_id, entry.byte_offset);
    src.seek(SeekFrom::Start(entry.byte_offset)).ctx(ctx)?;
    let mut raw_header = [0u8; HEADER_LEN];
    src.read_exact(&mut raw_header).ctx(ctx)?;
    let header = BlockHeader::decode(&raw_header, entry.byte_offset)?;
    if header.var_id != entry.var_id || header.step != entry.step || header.stored_len != entry.stored_len {
        return Err(Error::Format(format!(
            "header at {} of sub-file {} does not match its index entry",
            entry.byte_offset, entry.subfile_id
        )));
    }
    let mut payload = vec![0u8; header.stored_len as usize];
    src.read_exact(&mut payload).ctx(ctx)?;
    let computed = crc32(&payload);
    if computed != header.crc32 {
        return Err(Error::ChecksumMismatch {
            stored: header.crc32,
            computed,
        });
    }
    Ok((header, payload))
}

/// Check magic and CRC of the record an entry points at, without decoding.
pub fn verify_block<R: Read + Seek>(src: &mut R, entry: &IndexEntry) -> Result<()> {
    read_record(src, entry).map(drop)
}

/// Read, verify and decompress the block an index entry points at.
pub fn read_block<R: Read + Seek>(src: &mut R, entry: &IndexEntry) -> Result<DataBlock> {
    let codec = CodecId::from_id(entry.codec_id)?;
    let (header, payload) = read_record(src, entry)?;
    let header_codec = CodecId::from_id(header.codec_id)?;
    if header_codec != codec {
        return Err(Error::Format(format!(
            "entry says codec {codec}, header says {header_codec}"
        )));
    }
    let block = DataBlock {
        var_id: header.var_id,
        step: header.step,
        dtype: DType::from_code(header.dtype_code)?,
        start: header.start,
        count: header.count,
        codec,
        shuffled: header.shuffle_flag != 0,
        raw_len: header.raw_len,
        payload,
    };
    ops::decompress_block(block)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRecord {
    pub step: u32,
    pub complete: bool,
    pub expected_ranks: u32,
    pub reported_ranks: u32,
    pub entries: Vec<IndexEntry>,
}

impl StepRecord {
    /// Header + payload bytes of every block in the step.
    pub fn stored_bytes(&self) -> u64 {
        self.entries.iter().map(IndexEntry::record_len).sum()
    }
}

/// The global metadata index: variables, sub-files and per-step block entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalIndex {
    pub format_version: u16,
    pub variables: BTreeMap<u32, VariableDef>,
    /// Sub-file id → path relative to the index directory (`/` separated).
    pub subfiles: BTreeMap<u32, String>,
    pub steps: BTreeMap<u32, StepRecord>,
}

impl Default for GlobalIndex {
    fn default() -> Self {
        GlobalIndex {
            format_version: FORMAT_VERSION,
            variables: BTreeMap::new(),
            subfiles: BTreeMap::new(),
            steps: BTreeMap::new(),
        }
    }
}

impl GlobalIndex {
    pub fn variable_id(&self, name: &str) -> Option<u32> {
        self.variables.iter().find(|(_, v)| v.name == name).map(|(&id, _)| id)
    }

    pub fn subfile_path(&self, dir: &Path, subfile_id: u32) -> PathBuf {
        match self.subfiles.get(&subfile_id) {
            Some(rel) => rel.split('/').fold(dir.to_path_buf(), |p, c| p.join(c)),
            None => dir.join(subfile_name(subfile_id)),
        }
    }

    /// Merge a variable table, rejecting conflicting redefinitions.
    pub fn register_variables(&mut self, vars: &[VariableDef]) -> Result<()> {
        for (id, var) in vars.iter().enumerate() {
            match self.variables.get(&(id as u32)) {
                Some(existing) if existing != var => {
                    return Err(Error::Format(format!(
                        "variable {id} declared as `{}` and `{}` by different ranks",
                        existing.name, var.name
                    )))
                }
                Some(_) => {}
                None => {
                    self.variables.insert(id as u32, var.clone());
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.put_u16(self.format_version);
        let mut body = Vec::new();
        let record = |out: &mut Vec<u8>, kind: u8, body: &mut Vec<u8>| {
            out.put_u32(body.len() as u32);
            out.put_u8(kind);
            out.append(body);
        };
        for (&id, var) in &self.variables {
            encode_variable(&mut body, id, var);
            record(&mut out, REC_VARIABLE, &mut body);
        }
        for (&id, path) in &self.subfiles {
            body.put_u32(id);
            body.put_str16(path);
            record(&mut out, REC_SUBFILE, &mut body);
        }
        for step in self.steps.values() {
            body.put_u32(step.step);
            body.put_u8(step.complete as u8);
            body.put_u32(step.expected_ranks);
            body.put_u32(step.reported_ranks);
            body.put_u32(step.entries.len() as u32);
            for e in &step.entries {
                e.encode_into(&mut body);
            }
            record(&mut out, REC_STEP, &mut body);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::new(bytes, "index");
        if r.bytes(4)? != INDEX_MAGIC {
            return Err(Error::BadMagic {
                offset: 0,
                expected: "SCIX",
            });
        }
        let format_version = r.u16()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported index format version {format_version}")));
        }
        let mut index = GlobalIndex::default();
        while r.remaining() > 0 {
            let len = r.u32()? as usize;
            let kind = r.u8()?;
            let mut body = LeReader::new(r.bytes(len)?, "index record");
            match kind {
                REC_VARIABLE => {
                    let (id, var) = decode_variable(&mut body)?;
                    index.variables.insert(id, var);
                }
                REC_SUBFILE => {
                    let id = body.u32()?;
                    index.subfiles.insert(id, body.str16()?);
                }
                REC_STEP => {
                    let step = body.u32()?;
                    let complete = body.u8()? != 0;
                    let expected_ranks = body.u32()?;
                    let reported_ranks = body.u32()?;
                    let n = body.u32()? as usize;
                    if body.remaining() != n * ENTRY_LEN {
                        return Err(Error::Format(format!("step {step} record has a bad length")));
                    }
                    let entries = (0..n)
                        .map(|_| IndexEntry::decode_from(&mut body))
                        .collect::<Result<Vec<_>>>()?;
                    index.steps.insert(
                        step,
                        StepRecord {
                            step,
                            complete,
                            expected_ranks,
                            reported_ranks,
                            entries,
                        },
                    );
                }
                other => return Err(Error::Format(format!("unknown index record type {other}"))),
            }
            if body.remaining() != 0 {
                return Err(Error::Format(format!("trailing bytes in index record type {kind}")));
            }
        }
        for step in index.steps.values() {
            if let Some(e) = step.entries.iter().find(|e| !index.variables.contains_key(&e.var_id)) {
                return Err(Error::Format(format!("step {} references unknown variable {}", step.step, e.var_id)));
            }
        }
        Ok(index)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let bytes = fs::read(&path).ctx(|| format!("read {}", path.display()))?;
        Self::decode(&bytes)
    }

    /// Atomically replace `dir/md.idx` via `md.step.<step>.tmp`.
    pub fn store(&self, dir: &Path, step: u32) -> Result<()> {
        let tmp = dir.join(format!("md.step.{step}.tmp"));
        let mut file = File::create(&tmp).ctx(|| format!("create {}", tmp.display()))?;
        file.write_all(&self.encode())
            .and_then(|_| file.sync_data())
            .ctx(|| format!("write {}", tmp.display()))?;
        drop(file);
        let dst = dir.join(INDEX_FILE);
        fs::rename(&tmp, &dst).ctx(|| format!("rename {} -> {}", tmp.display(), dst.display()))
    }
}

/// Single committer that owns a stream's index and publishes steps.
#[derive(Debug)]
pub struct IndexCommitter {
    dir: PathBuf,
    index: GlobalIndex,
}

impl IndexCommitter {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        IndexCommitter {
            dir: dir.into(),
            index: GlobalIndex::default(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn index(&self) -> &GlobalIndex {
        &self.index
    }

    pub fn register_variables(&mut self, vars: &[VariableDef]) -> Result<()> {
        self.index.register_variables(vars)
    }

    pub fn register_subfile(&mut self, subfile_id: u32, rel_path: impl Into<String>) {
        self.index.subfiles.insert(subfile_id, rel_path.into());
    }

    /// Publish a step. The step is always made visible; when some of the
    /// `expected_ranks` never reported it is stored with `complete = false`
    /// and `IncompleteStep` is returned.
    pub fn publish_step(
        &mut self,
        step: u32,
        mut entries: Vec<IndexEntry>,
        reported: &BTreeSet<u32>,
        expected_ranks: u32,
    ) -> Result<()> {
        entries.sort_by_key(|e| (e.var_id, e.subfile_id, e.byte_offset));
        let complete = (0..expected_ranks).all(|r| reported.contains(&r));
        self.index.steps.insert(
            step,
            StepRecord {
                step,
                complete,
                expected_ranks,
                reported_ranks: reported.len() as u32,
                entries,
            },
        );
        self.index.store(&self.dir, step)?;
        if complete {
            Ok(())
        } else {
            Err(Error::IncompleteStep(step as u64))
        }
    }

    pub fn into_index(self) -> GlobalIndex {
        self.index
    }
}

/// Publish one step's entries into `index_dir`, merging with any index
/// already there.
pub fn publish_step_index(
    index_dir: &Path,
    step: u32,
    vars: &[VariableDef],
    entries: Vec<IndexEntry>,
    reported: &BTreeSet<u32>,
    expected_ranks: u32,
) -> Result<()> {
    let existing = match GlobalIndex::load(index_dir) {
        Ok(index) => index,
        Err(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => GlobalIndex::default(),
        Err(e) => return Err(e),
    };
    let mut committer = IndexCommitter {
        dir: index_dir.to_path_buf(),
        index: existing,
    };
    committer.register_variables(vars)?;
    committer.publish_step(step, entries, reported, expected_ranks)
}
