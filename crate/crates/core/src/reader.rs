//! Reconstruct global arrays or hyperslabs from blocks.
//!
//! Each block that intersects a request contributes its overlap box, copied
//! as contiguous innermost-dimension runs from the block payload into the
//! output buffer (row-major, last dimension fastest).

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};
use crate::format::{self, GlobalIndex, IndexEntry};
use crate::model::{Selection, VariableDef};

/// Per-dimension `max(starts) .. min(ends)`; `None` when any dimension is empty.
pub fn intersect(a: &Selection, b: &Selection) -> Result<Option<Selection>> {
    if a.ndim() != b.ndim() || a.start.len() != a.ndim() || b.start.len() != b.ndim() {
        return Err(Error::RankMismatch(a.ndim(), b.ndim()));
    }
    let mut start = Vec::with_capacity(a.ndim());
    let mut count = Vec::with_capacity(a.ndim());
    for d in 0..a.ndim() {
        let lo = a.start[d].max(b.start[d]);
        let hi = (a.start[d] + a.count[d]).min(b.start[d] + b.count[d]);
        if hi <= lo {
            return Ok(None);
        }
        start.push(lo);
        count.push(hi - lo);
    }
    Ok(Some(Selection { start, count }))
}

/// One contiguous byte copy from a block payload into the output buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopyRun {
    pub src: usize,
    pub dst: usize,
    pub len: usize,
}

/// Overlap of a request with one source block, in global coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIntersection {
    pub overlap: Selection,
    /// Overlap start relative to the block origin.
    pub src_offset: Vec<u64>,
    /// Overlap start relative to the request origin.
    pub dst_offset: Vec<u64>,
}

impl BlockIntersection {
    pub fn new(request: &Selection, block: &Selection) -> Result<Option<Self>> {
        Ok(intersect(request, block)?.map(|overlap| BlockIntersection {
            src_offset: overlap.start.iter().zip(&block.start).map(|(o, b)| o - b).collect(),
            dst_offset: overlap.start.iter().zip(&request.start).map(|(o, r)| o - r).collect(),
            overlap,
        }))
    }

    /// Row-major copy plan: one run per innermost row of the overlap.
    pub fn runs(&self, request: &Selection, block: &Selection, elem_size: usize) -> Vec<CopyRun> {
        let ndim = self.overlap.ndim();
        if ndim == 0 {
            return vec![CopyRun {
                src: 0,
                dst: 0,
                len: elem_size,
            }];
        }
        let strides = |count: &[u64]| {
            let mut s = vec![1u64; ndim];
            for d in (0..ndim - 1).rev() {
                s[d] = s[d + 1] * count[d + 1];
            }
            s
        };
        let src_strides = strides(&block.count);
        let dst_strides = strides(&request.count);
        let inner = self.overlap.count[ndim - 1] as usize * elem_size;
        let outer: u64 = self.overlap.count[..ndim - 1].iter().product();
        let mut runs = Vec::with_capacity(outer as usize);
        let mut idx = vec![0u64; ndim - 1];
        for _ in 0..outer {
            let mut src = 0u64;
            let mut dst = 0u64;
            for d in 0..ndim {
                let i = if d < ndim - 1 { idx[d] } else { 0 };
                src += (self.src_offset[d] + i) * src_strides[d];
                dst += (self.dst_offset[d] + i) * dst_strides[d];
            }
            runs.push(CopyRun {
                src: src as usize * elem_size,
                dst: dst as usize * elem_size,
                len: inner,
            });
            for d in (0..ndim - 1).rev() {
                idx[d] += 1;
                if idx[d] < self.overlap.count[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        runs
    }
}

/// Scatter blocks into a freshly allocated request buffer.
///
/// Fails unless the blocks cover every requested element exactly once.
pub fn assemble<'a>(
    var: &VariableDef,
    request: &Selection,
    blocks: impl IntoIterator<Item = (Selection, &'a [u8])>,
) -> Result<Vec<u8>> {
    request.validate(&var.shape)?;
    let elem = var.dtype.size();
    let wanted = request.num_elements();
    let mut out = vec![0u8; wanted as usize * elem];
    let mut covered = 0u64;
    for (sel, payload) in blocks {
        let Some(hit) = BlockIntersection::new(request, &sel)? else {
            continue;
        };
        if payload.len() as u64 != sel.num_elements() * elem as u64 {
            return Err(Error::Format(format!(
                "block of `{}` holds {} bytes for {} elements",
                var.name,
                payload.len(),
                sel.num_elements()
            )));
        }
        covered += hit.overlap.num_elements();
        for run in hit.runs(request, &sel, elem) {
            out[run.dst..run.dst + run.len].copy_from_slice(&payload[run.src..run.src + run.len]);
        }
    }
    if covered != wanted {
        return Err(Error::Format(format!(
            "blocks of `{}` cover {covered} of {wanted} requested elements",
            var.name
        )));
    }
    Ok(out)
}

/// Shared read surface for the file reader and the staging consumer.
pub trait StepReader {
    /// Advance to the next available step; `None` at end of stream.
    fn begin_step(&mut self) -> Result<Option<u64>>;

    fn variables(&self) -> Vec<VariableDef>;

    fn get(&mut self, name: &str, selection: &Selection) -> Result<Vec<u8>>;

    fn end_step(&mut self) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepDescriptor {
    pub step: u64,
    pub variables: Vec<String>,
    /// Header + stored payload bytes.
    pub stored_bytes: u64,
    pub raw_bytes: u64,
}

#[derive(Debug)]
pub struct FileReader {
    dir: PathBuf,
    index: GlobalIndex,
    files: HashMap<u32, BufReader<File>>,
    cursor: Option<u64>,
    current: Option<u64>,
}

impl FileReader {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let index = GlobalIndex::load(&dir)?;
        Ok(FileReader {
            dir,
            index,
            files: HashMap::new(),
            cursor: None,
            current: None,
        })
    }

    pub fn index(&self) -> &GlobalIndex {
        &self.index
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Re-read `md.idx` to pick up newly published steps.
    pub fn refresh(&mut self) -> Result<()> {
        self.index = GlobalIndex::load(&self.dir)?;
        Ok(())
    }

    /// Complete steps in ascending order.
    pub fn list_steps(&self) -> Vec<StepDescriptor> {
        self.index
            .steps
            .values()
            .filter(|s| s.complete)
            .map(|s| {
                let mut names: Vec<String> = s
                    .entries
                    .iter()
                    .map(|e| self.index.variables[&e.var_id].name.clone())
                    .collect();
                names.sort();
                names.dedup();
                StepDescriptor {
                    step: s.step as u64,
                    variables: names,
                    stored_bytes: s.stored_bytes(),
                    raw_bytes: s.entries.iter().map(|e| e.raw_len).sum(),
                }
            })
            .collect()
    }

    fn subfile(&mut self, id: u32) -> Result<&mut BufReader<File>> {
        if !self.files.contains_key(&id) {
            let path = self.index.subfile_path(&self.dir, id);
            let file = File::open(&path).ctx(|| format!("open sub-file {id} at {}", path.display()))?;
            self.files.insert(id, BufReader::new(file));
        }
        Ok(self.files.get_mut(&id).unwrap())
    }

    /// Read `selection` of variable `name` at `step`.
    pub fn read_step(&mut self, step: u64, name: &str, selection: &Selection) -> Result<Vec<u8>> {
        let record = self
            .index
            .steps
            .get(&(step as u32))
            .ok_or(Error::StepNotFound(step))?;
        if !record.complete {
            return Err(Error::IncompleteStep(step));
        }
        let var_id = self
            .index
            .variable_id(name)
            .ok_or_else(|| Error::VariableNotFound(name.to_string()))?;
        let var = self.index.variables[&var_id].clone();
        selection.validate(&var.shape)?;
        let entries: Vec<IndexEntry> = record
            .entries
            .iter()
            .filter(|e| e.var_id == var_id)
            .cloned()
            .collect();
        if entries.is_empty() {
            return Err(Error::VariableNotFound(name.to_string()));
        }
        let mut blocks = Vec::new();
        for entry in &entries {
            if intersect(selection, &entry.selection())?.is_none() {
                continue;
            }
            let src = self.subfile(entry.subfile_id)?;
            blocks.push(format::read_block(src, entry)?);
        }
        assemble(
            &var,
            selection,
            blocks.iter().map(|b| (b.selection(), b.payload.as_slice())),
        )
    }
}

impl StepReader for FileReader {
    fn begin_step(&mut self) -> Result<Option<u64>> {
        if self.current.is_some() {
            return Err(Error::StepAlreadyOpen);
        }
        let next = self
            .index
            .steps
            .values()
            .filter(|s| s.complete)
            .map(|s| s.step as u64)
            .find(|&s| self.cursor.is_none_or(|c| s > c));
        self.current = next;
        if let Some(s) = next {
            self.cursor = Some(s);
        }
        Ok(next)
    }

    fn variables(&self) -> Vec<VariableDef> {
        self.index.variables.values().cloned().collect()
    }

    fn get(&mut self, name: &str, selection: &Selection) -> Result<Vec<u8>> {
        let step = self.current.ok_or(Error::StepNotOpen)?;
        self.read_step(step, name, selection)
    }

    fn end_step(&mut self) -> Result<()> {
        self.current.take().map(drop).ok_or(Error::StepNotOpen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DType;
    use proptest::prelude::*;

    fn sel(start: &[u64], count: &[u64]) -> Selection {
        Selection::new(start, count)
    }

    #[test]
    fn intersect_examples() {
        assert_eq!(
            intersect(&sel(&[0, 0], &[4, 4]), &sel(&[2, 2], &[4, 4])).unwrap(),
            Some(sel(&[2, 2], &[2, 2]))
        );
        assert_eq!(intersect(&sel(&[0, 0], &[2, 2]), &sel(&[4, 4], &[2, 2])).unwrap(), None);
        // touching edges do not overlap
        assert_eq!(intersect(&sel(&[0], &[4]), &sel(&[4], &[4])).unwrap(), None);
        let b = sel(&[1, 2, 3], &[4, 5, 6]);
        assert_eq!(intersect(&b, &b).unwrap(), Some(b.clone()));
        assert!(matches!(intersect(&sel(&[0], &[1]), &sel(&[0, 0], &[1, 1])), Err(Error::RankMismatch(1, 2))));
        assert_eq!(intersect(&sel(&[], &[]), &sel(&[], &[])).unwrap(), Some(sel(&[], &[])));
    }

    /// Naive element-by-element reference for the run planner.
    fn element_scatter(request: &Selection, block: &Selection, elem: usize, out: &mut [u8], payload: &[u8]) {
        let n = request.ndim();
        let total = block.num_elements();
        for lin in 0..total {
            let mut rem = lin;
            let mut coord = vec![0u64; n];
            for d in (0..n).rev() {
                coord[d] = block.start[d] + rem % block.count[d];
                rem /= block.count[d];
            }
            let inside = (0..n).all(|d| coord[d] >= request.start[d] && coord[d] < request.start[d] + request.count[d]);
            if !inside {
                continue;
            }
            let mut dst = 0u64;
            for d in 0..n {
                dst = dst * request.count[d] + (coord[d] - request.start[d]);
            }
            let (dst, src) = (dst as usize * elem, lin as usize * elem);
            out[dst..dst + elem].copy_from_slice(&payload[src..src + elem]);
        }
    }

    fn boxes(max_rank: usize) -> impl Strategy<Value = (Vec<u64>, Selection, Selection)> {
        (1..=max_rank)
            .prop_flat_map(|n| proptest::collection::vec(1u64..7, n))
            .prop_flat_map(|shape| {
                let pick = shape
                    .iter()
                    .map(|&e| (0..e).prop_flat_map(move |s| (Just(s), 1..=e - s)))
                    .collect::<Vec<_>>();
                (Just(shape), pick.clone(), pick)
            })
            .prop_map(|(shape, a, b)| {
                let mk = |v: Vec<(u64, u64)>| Selection {
                    start: v.iter().map(|p| p.0).collect(),
                    count: v.iter().map(|p| p.1).collect(),
                };
                (shape, mk(a), mk(b))
            })
    }

    proptest! {
        #[test]
        fn runs_match_element_scatter((_shape, request, block) in boxes(4), elem in prop_oneof![Just(1usize), Just(4), Just(8)]) {
            let payload: Vec<u8> = (0..block.num_elements() as usize * elem).map(|i| (i * 31 % 251) as u8).collect();
            let mut expected = vec![0u8; request.num_elements() as usize * elem];
            element_scatter(&request, &block, elem, &mut expected, &payload);
            let mut got = vec![0u8; expected.len()];
            if let Some(hit) = BlockIntersection::new(&request, &block).unwrap() {
                for r in hit.runs(&request, &block, elem) {
                    got[r.dst..r.dst + r.len].copy_from_slice(&payload[r.src..r.src + r.len]);
                }
            }
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn tiles_are_scattered_exactly_once(
            shape in proptest::collection::vec(1u64..9, 1..=3),
            cuts in proptest::collection::vec(1u64..4, 3),
            (rs, rc) in (0u64..8, 1u64..9),
        ) {
            // split each axis into `cuts[d]` slabs, then request a clipped box
            let n = shape.len();
            let mut tiles = vec![Selection { start: vec![], count: vec![] }];
            for d in 0..n {
                let parts = cuts[d].min(shape[d]);
                let mut next = Vec::new();
                for t in &tiles {
                    for p in 0..parts {
                        let lo = shape[d] * p / parts;
                        let hi = shape[d] * (p + 1) / parts;
                        let mut t = t.clone();
                        t.start.push(lo);
                        t.count.push(hi - lo);
                        next.push(t);
                    }
                }
                tiles = next;
            }
            let request = Selection {
                start: shape.iter().map(|&e| rs.min(e - 1)).collect(),
                count: shape.iter().map(|&e| rc.min(e - rs.min(e - 1))).collect(),
            };
            let mut hits = vec![0u32; request.num_elements() as usize];
            for t in &tiles {
                if let Some(hit) = BlockIntersection::new(&request, t).unwrap() {
                    for r in hit.runs(&request, t, 1) {
                        for h in &mut hits[r.dst..r.dst + r.len] { *h += 1; }
                    }
                }
            }
            prop_assert!(hits.iter().all(|&h| h == 1), "write counts {:?}", hits);
        }
    }

    #[test]
    fn assemble_detects_gaps_and_overlaps() {
        let var = VariableDef::new("A", DType::U8, &[4]).unwrap();
        let full = Selection::full(&[4]);
        let left = sel(&[0], &[2]);
        let right = sel(&[2], &[2]);
        let out = assemble(&var, &full, [(left.clone(), &[1u8, 2][..]), (right, &[3u8, 4][..])]).unwrap();
        assert_eq!(out, vec![1, 2, 3, 4]);
        assert!(assemble(&var, &full, [(left.clone(), &[1u8, 2][..])]).is_err());
        assert!(assemble(&var, &full, [(full.clone(), &[0u8; 4][..]), (left, &[1u8, 2][..])]).is_err());
    }
}
