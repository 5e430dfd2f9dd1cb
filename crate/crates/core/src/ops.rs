//! In-line operator chain: optional byte shuffle followed by a lossless codec.
//!
//! Codec output that does not shrink the block is discarded and the raw bytes
//! are stored instead (`codec = none`, `shuffled = false`), so a stored payload
//! is never larger than its raw payload.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::DataBlock;

/// Wire- and disk-stable codec registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodecId {
    None,
    Lz4,
    Deflate,
    Zstd,
}

impl CodecId {
    pub const ALL: [CodecId; 4] = [CodecId::None, CodecId::Lz4, CodecId::Deflate, CodecId::Zstd];

    pub const fn id(self) -> u8 {
        match self {
            CodecId::None => 0,
            CodecId::Lz4 => 1,
            CodecId::Deflate => 2,
            CodecId::Zstd => 3,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(CodecId::None),
            1 => Ok(CodecId::Lz4),
            2 => Ok(CodecId::Deflate),
            3 => Ok(CodecId::Zstd),
            other => Err(Error::Codec(format!("unknown codec {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CodecId::None => "none",
            CodecId::Lz4 => "lz4",
            CodecId::Deflate => "deflate",
            CodecId::Zstd => "zstd",
        }
    }

    /// Accepted level range; `None` for codecs without levels.
    pub fn level_range(self) -> Option<(i32, i32)> {
        match self {
            CodecId::None | CodecId::Lz4 => None,
            CodecId::Deflate => Some((0, 9)),
            CodecId::Zstd => Some((-7, 22)),
        }
    }

    pub fn default_level(self) -> i32 {
        match self {
            CodecId::None | CodecId::Lz4 => 0,
            CodecId::Deflate => 6,
            CodecId::Zstd => 3,
        }
    }
}

impl fmt::Display for CodecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CodecId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(CodecId::None),
            "lz4" => Ok(CodecId::Lz4),
            "deflate" | "zlib" => Ok(CodecId::Deflate),
            "zstd" => Ok(CodecId::Zstd),
            other => Err(Error::Config(format!("unknown codec `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OperatorSpec {
    pub shuffle: bool,
    pub codec: CodecId,
    /// Codec level; `None` uses the codec default.
    pub level: Option<i32>,
}

impl Default for OperatorSpec {
    fn default() -> Self {
        OperatorSpec {
            shuffle: true,
            codec: CodecId::Lz4,
            level: None,
        }
    }
}

impl OperatorSpec {
    pub const NONE: OperatorSpec = OperatorSpec {
        shuffle: false,
        codec: CodecId::None,
        level: None,
    };

    pub fn new(codec: CodecId, shuffle: bool) -> Self {
        OperatorSpec {
            shuffle,
            codec,
            level: None,
        }
    }

    pub fn with_level(mut self, level: i32) -> Self {
        self.level = Some(level);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let (Some(level), Some((lo, hi))) = (self.level, self.codec.level_range()) {
            if level < lo || level > hi {
                return Err(Error::Config(format!(
                    "{} level {level} outside {lo}..={hi}",
                    self.codec
                )));
            }
        }
        Ok(())
    }

    fn effective_level(&self) -> i32 {
        self.level.unwrap_or_else(|| self.codec.default_level())
    }
}

/// Stream-level default with per-variable overrides keyed by variable name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OperatorTable {
    pub default: OperatorSpec,
    pub overrides: HashMap<String, OperatorSpec>,
}

impl OperatorTable {
    pub fn uniform(spec: OperatorSpec) -> Self {
        OperatorTable {
            default: spec,
            overrides: HashMap::new(),
        }
    }

    pub fn none() -> Self {
        Self::uniform(OperatorSpec::NONE)
    }

    pub fn with_override(mut self, var: impl Into<String>, spec: OperatorSpec) -> Self {
        self.overrides.insert(var.into(), spec);
        self
    }

    pub fn spec_for(&self, var: &str) -> OperatorSpec {
        self.overrides.get(var).copied().unwrap_or(self.default)
    }

    pub fn validate(&self) -> Result<()> {
        self.default.validate()?;
        self.overrides.values().try_for_each(OperatorSpec::validate)
    }
}

/// Byte-transpose: byte `j` of element `i` moves to `j * n_elems + i`.
pub fn shuffle(payload: &[u8], elem_size: usize) -> Result<Vec<u8>> {
    check_multiple(payload.len(), elem_size)?;
    let mut out = vec![0u8; payload.len()];
    if payload.is_empty() {
        return Ok(out);
    }
    match elem_size {
        1 => out.copy_from_slice(payload),
        2 => transpose::<2>(payload, &mut out),
        4 => transpose::<4>(payload, &mut out),
        8 => transpose::<8>(payload, &mut out),
        _ => {
            let n = payload.len() / elem_size;
            for (i, e) in payload.chunks_exact(elem_size).enumerate() {
                for (j, &b) in e.iter().enumerate() {
                    out[j * n + i] = b;
                }
            }
        }
    }
    Ok(out)
}

pub fn unshuffle(bytes: &[u8], elem_size: usize) -> Result<Vec<u8>> {
    check_multiple(bytes.len(), elem_size)?;
    let mut out = vec![0u8; bytes.len()];
    if bytes.is_empty() {
        return Ok(out);
    }
    match elem_size {
        1 => out.copy_from_slice(bytes),
        2 => untranspose::<2>(bytes, &mut out),
        4 => untranspose::<4>(bytes, &mut out),
        8 => untranspose::<8>(bytes, &mut out),
        _ => {
            let n = bytes.len() / elem_size;
            for (i, e) in out.chunks_exact_mut(elem_size).enumerate() {
                for (j, b) in e.iter_mut().enumerate() {
                    *b = bytes[j * n + i];
                }
            }
        }
    }
    Ok(out)
}

fn transpose<const W: usize>(src: &[u8], dst: &mut [u8]) {
    let n = src.len() / W;
    let planes: Vec<&mut [u8]> = dst.chunks_exact_mut(n).take(W).collect();
    let planes: [&mut [u8]; W] = planes.try_into().unwrap_or_else(|_| unreachable!());
    for (i, e) in src.chunks_exact(W).enumerate() {
        for j in 0..W {
            planes[j][i] = e[j];
        }
    }
}

fn untranspose<const W: usize>(src: &[u8], dst: &mut [u8]) {
    let n = src.len() / W;
    let planes: Vec<&[u8]> = src.chunks_exact(n).take(W).collect();
    for (i, e) in dst.chunks_exact_mut(W).enumerate() {
        for j in 0..W {
            e[j] = planes[j][i];
        }
    }
}

fn check_multiple(len: usize, elem_size: usize) -> Result<()> {
    if elem_size == 0 || len % elem_size != 0 {
        return Err(Error::SizeNotMultiple { len, elem_size });
    }
    Ok(())
}

fn encode(codec: CodecId, level: i32, data: &[u8]) -> Result<Vec<u8>> {
    match codec {
        CodecId::None => Ok(data.to_vec()),
        CodecId::Lz4 => Ok(lz4_flex::block::compress(data)),
        CodecId::Deflate => {
            let mut enc = flate2::write::DeflateEncoder::new(
                Vec::with_capacity(data.len() / 2),
                flate2::Compression::new(level as u32),
            );
            enc.write_all(data).and_then(|_| enc.finish()).map_err(|e| Error::Codec(e.to_string()))
        }
        CodecId::Zstd => zstd::bulk::compress(data, level).map_err(|e| Error::Codec(e.to_string())),
    }
}

fn decode(codec: CodecId, data: &[u8], raw_len: usize) -> Result<Vec<u8>> {
    let out = match codec {
        CodecId::None => data.to_vec(),
        CodecId::Lz4 => lz4_flex::block::decompress(data, raw_len)
            .map_err(|e| Error::Codec(format!("lz4: {e}")))?,
        CodecId::Deflate => {
            let mut out = Vec::with_capacity(raw_len);
            flate2::read::DeflateDecoder::new(data)
                .take(raw_len as u64 + 1)
                .read_to_end(&mut out)
                .map_err(|e| Error::Codec(format!("deflate: {e}")))?;
            out
        }
        CodecId::Zstd => zstd::bulk::decompress(data, raw_len)
            .map_err(|e| Error::Codec(format!("zstd: {e}")))?,
    };
    if out.len() != raw_len {
        return Err(Error::Codec(format!(
            "{codec} produced {} bytes, expected {raw_len}",
            out.len()
        )));
    }
    Ok(out)
}

/// Run a raw block through the operator chain.
pub fn compress_block(block: DataBlock, spec: &OperatorSpec) -> Result<DataBlock> {
    debug_assert_eq!(block.codec, CodecId::None);
    if spec.codec == CodecId::None {
        return Ok(block);
    }
    let elem_size = block.dtype.size();
    let shuffled = spec.shuffle && elem_size > 1;
    let encoded = if shuffled {
        encode(spec.codec, spec.effective_level(), &shuffle(&block.payload, elem_size)?)?
    } else {
        encode(spec.codec, spec.effective_level(), &block.payload)?
    };
    if encoded.len() as u64 >= block.raw_len {
        return Ok(block);
    }
    Ok(DataBlock {
        codec: spec.codec,
        shuffled,
        payload: encoded,
        ..block
    })
}

/// Undo [`compress_block`], restoring the raw payload bit-exactly.
pub fn decompress_block(block: DataBlock) -> Result<DataBlock> {
    if block.codec == CodecId::None && !block.shuffled {
        if block.stored_len() != block.raw_len {
            return Err(Error::Codec(format!(
                "raw block stores {} bytes but declares {}",
                block.stored_len(),
                block.raw_len
            )));
        }
        return Ok(block);
    }
    let raw = decode(block.codec, &block.payload, block.raw_len as usize)?;
    let raw = if block.shuffled {
        unshuffle(&raw, block.dtype.size())?
    } else {
        raw
    };
    Ok(DataBlock {
        codec: CodecId::None,
        shuffled: false,
        payload: raw,
        ..block
    })
}

/// Raw vs stored byte totals (headers excluded).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CompressionTotals {
    pub raw: u64,
    pub stored: u64,
}

impl CompressionTotals {
    pub fn add(&mut self, block: &DataBlock) {
        self.raw += block.raw_len;
        self.stored += block.stored_len();
    }

    pub fn merge(&mut self, other: CompressionTotals) {
        self.raw += other.raw;
        self.stored += other.stored;
    }

    /// Σraw / Σstored; 1.0 when nothing was stored.
    pub fn ratio(&self) -> f64 {
        if self.stored == 0 {
            1.0
        } else {
            self.raw as f64 / self.stored as f64
        }
    }
}
