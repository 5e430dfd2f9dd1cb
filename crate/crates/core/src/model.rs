//! Step-based data model shared by every engine.
//!
//! A [`Writer`] is one simulated rank's handle onto an output stream. The
//! lifecycle mirrors a history write in a simulation code:
//!
//! ```text
//! declare_variable*  ( begin_step  put*  end_step )*  close
//! ```
//!
//! `put` captures a copy of the caller's payload, so the caller may reuse its
//! buffer as soon as the call returns. `end_step` runs the operator chain
//! (shuffle + codec) over the captured blocks and hands them to the engine,
//! which either writes them out (file engines) or publishes the step to a
//! consumer (staging).
//!
//! Arrays are row-major with the last dimension fastest. Every rank of a
//! stream must declare the same variables in the same order; the declaration
//! index is the variable id used on disk and on the wire.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::ops::{self, CodecId, OperatorTable};

/// Maximum number of dimensions of a variable.
pub const MAX_RANK: usize = 4;

/// Rank that owns scalar variables.
pub const SCALAR_OWNER: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    I32,
    I64,
    U8,
}

impl DType {
    pub const fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }

    /// Stable on-disk / on-wire code.
    pub const fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::I32 => 3,
            DType::I64 => 4,
            DType::U8 => 5,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            1 => DType::F32,
            2 => DType::F64,
            3 => DType::I32,
            4 => DType::I64,
            5 => DType::U8,
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I32 => "i32",
            DType::I64 => "i64",
            DType::U8 => "u8",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A named, typed, globally shaped array. An empty shape is a scalar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableDef {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
}

impl VariableDef {
    pub fn new(name: impl Into<String>, dtype: DType, shape: &[u64]) -> Result<Self> {
        let name = name.into();
        if !valid_name(&name) {
            return Err(Error::InvalidName(name));
        }
        if shape.len() > MAX_RANK {
            return Err(Error::InvalidShape(format!(
                "`{name}` has {} dimensions, at most {MAX_RANK} are supported",
                shape.len()
            )));
        }
        if let Some(d) = shape.iter().position(|&e| e == 0) {
            return Err(Error::InvalidShape(format!("`{name}` has zero extent in dimension {d}")));
        }
        Ok(VariableDef {
            name,
            dtype,
            shape: shape.to_vec(),
        })
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn num_elements(&self) -> u64 {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.num_elements() * self.dtype.size() as u64
    }
}

fn valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// A hyperslab: an axis-aligned box `start .. start + count` in global coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Selection {
    pub start: Vec<u64>,
    pub count: Vec<u64>,
}

impl Selection {
    pub fn new(start: &[u64], count: &[u64]) -> Self {
        Selection {
            start: start.to_vec(),
            count: count.to_vec(),
        }
    }

    /// The whole of a variable.
    pub fn full(shape: &[u64]) -> Self {
        Selection {
            start: vec![0; shape.len()],
            count: shape.to_vec(),
        }
    }

    pub fn ndim(&self) -> usize {
        self.count.len()
    }

    pub fn num_elements(&self) -> u64 {
        self.count.iter().product()
    }

    pub fn validate(&self, shape: &[u64]) -> Result<()> {
        if self.start.len() != shape.len() || self.count.len() != shape.len() {
            return Err(Error::SelectionOutOfBounds(format!(
                "selection has {}/{} dims, variable has {}",
                self.start.len(),
                self.count.len(),
                shape.len()
            )));
        }
        for d in 0..shape.len() {
            if self.count[d] == 0 {
                return Err(Error::SelectionOutOfBounds(format!("zero count in dimension {d}")));
            }
            match self.start[d].checked_add(self.count[d]) {
                Some(end) if end <= shape[d] => {}
                _ => {
                    return Err(Error::SelectionOutOfBounds(format!(
                        "dimension {d}: {}+{} > {}",
                        self.start[d], self.count[d], shape[d]
                    )))
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepState {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepToken {
    pub step_index: u64,
    pub state: StepState,
}

/// One rank's payload for one variable at one step, plus its codec envelope.
///
/// `payload` holds the stored bytes: raw when `codec` is [`CodecId::None`],
/// otherwise the codec output (optionally of the shuffled raw bytes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataBlock {
    pub var_id: u32,
    pub step: u32,
    pub dtype: DType,
    pub start: Vec<u64>,
    pub count: Vec<u64>,
    pub codec: CodecId,
    pub shuffled: bool,
    pub raw_len: u64,
    pub payload: Vec<u8>,
}

impl DataBlock {
    /// An uncompressed block.
    pub fn raw(var_id: u32, step: u32, dtype: DType, selection: &Selection, payload: Vec<u8>) -> Self {
        DataBlock {
            var_id,
            step,
            dtype,
            start: selection.start.clone(),
            count: selection.count.clone(),
            codec: CodecId::None,
            shuffled: false,
            raw_len: payload.len() as u64,
            payload,
        }
    }

    pub fn selection(&self) -> Selection {
        Selection {
            start: self.start.clone(),
            count: self.count.clone(),
        }
    }

    pub fn stored_len(&self) -> u64 {
        self.payload.len() as u64
    }
}

/// The per-rank back end a [`Writer`] hands completed steps to.
pub trait RankEngine: Send {
    /// Called once per step with every block this rank put, already passed
    /// through the operator chain.
    fn end_step(&mut self, step: u64, vars: &[VariableDef], blocks: Vec<DataBlock>) -> Result<()>;

    fn close(&mut self) -> Result<()>;
}

/// Engine that keeps every step in memory. Used by tests and as the
/// single-writer reference.
#[derive(Debug, Default, Clone)]
pub struct MemoryEngine {
    pub steps: Arc<std::sync::Mutex<Vec<(u64, Vec<VariableDef>, Vec<DataBlock>)>>>,
}

impl RankEngine for MemoryEngine {
    fn end_step(&mut self, step: u64, vars: &[VariableDef], blocks: Vec<DataBlock>) -> Result<()> {
        self.steps.lock().unwrap().push((step, vars.to_vec(), blocks));
        Ok(())
    }

    fn close(&mut self) -> Result<()> {
        Ok(())
    }
}

struct OpenStep {
    index: u64,
    blocks: Vec<DataBlock>,
    written: HashSet<u32>,
}

/// One rank's write handle onto a stream.
pub struct Writer {
    rank: u32,
    vars: Vec<VariableDef>,
    by_name: HashMap<String, u32>,
    open: Option<OpenStep>,
    next_step: u64,
    ops: Arc<OperatorTable>,
    engine: Box<dyn RankEngine>,
    timings: Vec<Duration>,
}

impl fmt::Debug for Writer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Writer")
            .field("rank", &self.rank)
            .field("vars", &self.vars.len())
            .field("next_step", &self.next_step)
            .finish()
    }
}

impl Writer {
    pub fn new(rank: u32, ops: Arc<OperatorTable>, engine: Box<dyn RankEngine>) -> Self {
        Writer {
            rank,
            vars: Vec::new(),
            by_name: HashMap::new(),
            open: None,
            next_step: 0,
            ops,
            engine,
            timings: Vec::new(),
        }
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn variables(&self) -> &[VariableDef] {
        &self.vars
    }

    pub fn declare_variable(&mut self, name: &str, dtype: DType, shape: &[u64]) -> Result<VariableDef> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        let def = VariableDef::new(name, dtype, shape)?;
        self.by_name.insert(def.name.clone(), self.vars.len() as u32);
        self.vars.push(def.clone());
        Ok(def)
    }

    pub fn begin_step(&mut self) -> Result<StepToken> {
        if self.open.is_some() {
            return Err(Error::StepAlreadyOpen);
        }
        let index = self.next_step;
        self.open = Some(OpenStep {
            index,
            blocks: Vec::new(),
            written: HashSet::new(),
        });
        Ok(StepToken {
            step_index: index,
            state: StepState::Open,
        })
    }

    pub fn put(&mut self, name: &str, selection: &Selection, payload: &[u8]) -> Result<()> {
        let step = self.open.as_mut().ok_or(Error::StepNotOpen)?;
        let var_id = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))?;
        let def = &self.vars[var_id as usize];
        if def.is_scalar() && self.rank != SCALAR_OWNER {
            return Err(Error::NotOwner {
                rank: self.rank,
                name: name.to_string(),
            });
        }
        selection.validate(&def.shape)?;
        let expected = selection.num_elements() as usize * def.dtype.size();
        if payload.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                actual: payload.len(),
            });
        }
        if !step.written.insert(var_id) {
            return Err(Error::AlreadyPut(name.to_string()));
        }
        step.blocks.push(DataBlock::raw(
            var_id,
            step.index as u32,
            def.dtype,
            selection,
            payload.to_vec(),
        ));
        Ok(())
    }

    /// Close the open step and hand it to the engine. The step index advances
    /// even when the engine reports a failure.
    pub fn end_step(&mut self, token: &mut StepToken) -> Result<()> {
        let step = match &self.open {
            Some(s) if s.index == token.step_index && token.state == StepState::Open => {
                self.open.take().unwrap()
            }
            _ => return Err(Error::StepNotOpen),
        };
        token.state = StepState::Closed;
        self.next_step += 1;

        let started = Instant::now();
        let mut blocks = Vec::with_capacity(step.blocks.len());
        for block in step.blocks {
            let spec = self.ops.spec_for(&self.vars[block.var_id as usize].name);
            blocks.push(ops::compress_block(block, &spec)?);
        }
        let result = self.engine.end_step(step.index, &self.vars, blocks);
        self.timings.push(started.elapsed());
        result
    }

    /// Wall time each `end_step` spent in the operator chain and engine.
    pub fn step_timings(&self) -> &[Duration] {
        &self.timings
    }

    pub fn close(mut self) -> Result<()> {
        if self.open.is_some() {
            return Err(Error::StepAlreadyOpen);
        }
        self.engine.close()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn writer(rank: u32) -> (Writer, MemoryEngine) {
        let mem = MemoryEngine::default();
        let w = Writer::new(rank, Arc::new(OperatorTable::none()), Box::new(mem.clone()));
        (w, mem)
    }

    #[test]
    fn declare_registers_and_rejects_duplicates() {
        let (mut w, _) = writer(0);
        let v = w.declare_variable("T2", DType::F32, &[300, 300]).unwrap();
        assert_eq!(v.ndim(), 2);
        assert!(matches!(
            w.declare_variable("T2", DType::F32, &[300, 300]),
            Err(Error::DuplicateName(n)) if n == "T2"
        ));
        let p = w.declare_variable("P", DType::F64, &[35, 1000, 1500]).unwrap();
        assert_eq!(p.ndim(), 3);
        assert_eq!(p.dtype.size(), 8);
    }

    #[test]
    fn declare_rejects_bad_shapes_and_names() {
        let (mut w, _) = writer(0);
        assert!(matches!(w.declare_variable("U", DType::F32, &[4, 0]), Err(Error::InvalidShape(_))));
        assert!(matches!(
            w.declare_variable("U", DType::F32, &[1, 1, 1, 1, 1]),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(w.declare_variable("9x", DType::F32, &[4]), Err(Error::InvalidName(_))));
        assert!(matches!(w.declare_variable("", DType::F32, &[4]), Err(Error::InvalidName(_))));
        assert!(w.declare_variable("_ok_9", DType::U8, &[]).is_ok());
    }

    #[test]
    fn step_lifecycle() {
        let (mut w, _) = writer(0);
        let mut t = w.begin_step().unwrap();
        assert_eq!(t.step_index, 0);
        assert!(matches!(w.begin_step(), Err(Error::StepAlreadyOpen)));
        w.end_step(&mut t).unwrap();
        assert_eq!(t.state, StepState::Closed);
        assert!(matches!(w.end_step(&mut t), Err(Error::StepNotOpen)));
        let t = w.begin_step().unwrap();
        assert_eq!(t.step_index, 1);
    }

    #[test]
    fn put_validation() {
        let (mut w, mem) = writer(0);
        w.declare_variable("A", DType::F32, &[4, 4]).unwrap();
        let full = Selection::new(&[0, 0], &[4, 4]);
        assert!(matches!(w.put("A", &full, &[0; 64]), Err(Error::StepNotOpen)));
        let mut t = w.begin_step().unwrap();
        assert!(matches!(
            w.put("A", &full, &[0; 60]),
            Err(Error::SizeMismatch { expected: 64, actual: 60 })
        ));
        assert!(matches!(
            w.put("A", &Selection::new(&[2, 2], &[3, 3]), &[0; 36]),
            Err(Error::SelectionOutOfBounds(_))
        ));
        assert!(matches!(w.put("B", &full, &[0; 64]), Err(Error::UnknownVariable(_))));
        w.put("A", &full, &[7; 64]).unwrap();
        assert!(matches!(w.put("A", &full, &[7; 64]), Err(Error::AlreadyPut(_))));
        w.end_step(&mut t).unwrap();
        let steps = mem.steps.lock().unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].2[0].payload, vec![7; 64]);
    }

    #[test]
    fn scalars_belong_to_rank_zero() {
        let (mut w0, _) = writer(0);
        let (mut w1, _) = writer(1);
        for w in [&mut w0, &mut w1] {
            w.declare_variable("DT", DType::F64, &[]).unwrap();
            w.begin_step().unwrap();
        }
        let scalar = Selection::full(&[]);
        w0.put("DT", &scalar, &1.5f64.to_le_bytes()).unwrap();
        assert!(matches!(
            w1.put("DT", &scalar, &1.5f64.to_le_bytes()),
            Err(Error::NotOwner { rank: 1, .. })
        ));
        // exactly one element
        assert!(matches!(w0.put("DT", &scalar, &[0; 16]), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn put_copies_the_caller_buffer() {
        let (mut w, mem) = writer(0);
        w.declare_variable("A", DType::U8, &[8]).unwrap();
        let mut t = w.begin_step().unwrap();
        let mut buf = vec![1u8; 8];
        w.put("A", &Selection::full(&[8]), &buf).unwrap();
        buf.iter_mut().for_each(|b| *b = 9);
        w.end_step(&mut t).unwrap();
        assert_eq!(mem.steps.lock().unwrap()[0].2[0].payload, vec![1u8; 8]);
    }

    #[test]
    fn close_with_open_step_fails() {
        let (mut w, _) = writer(0);
        w.begin_step().unwrap();
        assert!(matches!(w.close(), Err(Error::StepAlreadyOpen)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn step_indices_have_no_gaps(calls in proptest::collection::vec(any::<bool>(), 0..64)) {
                let (mut w, _) = writer(0);
                let mut token: Option<StepToken> = None;
                let mut seen = Vec::new();
                for begin in calls {
                    if begin {
                        match w.begin_step() {
                            Ok(t) => { prop_assert!(token.is_none()); seen.push(t.step_index); token = Some(t); }
                            Err(Error::StepAlreadyOpen) => prop_assert!(token.is_some()),
                            Err(e) => return Err(TestCaseError::fail(e.to_string())),
                        }
                    } else if let Some(mut t) = token.take() {
                        w.end_step(&mut t).unwrap();
                    } else {
                        let mut stale = StepToken { step_index: 0, state: StepState::Closed };
                        prop_assert!(matches!(w.end_step(&mut stale), Err(Error::StepNotOpen)));
                    }
                }
                let expected: Vec<u64> = (0..seen.len() as u64).collect();
                prop_assert_eq!(seen, expected);
            }
        }
    }
}
