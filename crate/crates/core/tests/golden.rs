//! Byte-level fixtures for the on-disk container and the wire protocol.
//! Set `STAGECOACH_REGEN_FIXTURES=1` to rewrite them after a deliberate
//! format change.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use stagecoach::aggregation::{assign_aggregators, FileEngineConfig, FileJob, FileOutput, RankTopology, Routing};
use stagecoach::shim::StorageTarget;
use stagecoach::staging::{BlockDescriptor, StepAnnounce, WireMessage};
use stagecoach::{CodecId, DType, DataBlock, FileReader, OperatorSpec, OperatorTable, Selection, VariableDef};
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn check_or_regen(name: &str, bytes: &[u8]) {
    let path = fixture(name);
    if std::env::var_os("STAGECOACH_REGEN_FIXTURES").is_some() {
        fs::write(&path, bytes).unwrap();
    }
    let want = fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(bytes, want.as_slice(), "{name} differs from fixture");
}

fn temp_row(step: u64, rank: u32) -> Vec<f32> {
    (0..4).map(|j| step as f32 + rank as f32 * 10.0 + j as f32 * 0.5).collect()
}

/// Two ranks, one aggregator, two steps; `temp` goes through shuffle + lz4.
fn write_small_stream(dir: &Path) {
    let topology = RankTopology::uniform(1, 2);
    let ops = OperatorTable::none().with_override(
        "temp",
        OperatorSpec {
            shuffle: true,
            codec: CodecId::Lz4,
            level: None,
        },
    );
    let (job, writers) = FileJob::launch(FileEngineConfig {
        assignment: assign_aggregators(&topology, 1).unwrap(),
        topology,
        routing: Routing::Chain,
        output: FileOutput::Direct(StorageTarget::unthrottled(dir)),
        ops,
    })
    .unwrap();
    let handles: Vec<_> = writers
        .into_iter()
        .map(|mut w| {
            thread::spawn(move || {
                w.declare_variable("temp", DType::F32, &[2, 4]).unwrap();
                w.declare_variable("count", DType::I32, &[]).unwrap();
                for step in 0..2u64 {
                    let mut tok = w.begin_step().unwrap();
                    let r = w.rank();
                    let row: Vec<u8> = temp_row(step, r).into_iter().flat_map(f32::to_le_bytes).collect();
                    w.put("temp", &Selection::new(&[r as u64, 0], &[1, 4]), &row).unwrap();
                    if r == 0 {
                        w.put("count", &Selection::new(&[], &[]), &(step as i32 + 40).to_le_bytes())
                            .unwrap();
                    }
                    w.end_step(&mut tok).unwrap();
                }
                w.close().unwrap();
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    job.finish().unwrap();
}

#[test]
fn container_bytes_are_stable() {
    let tmp = TempDir::new().unwrap();
    write_small_stream(tmp.path());
    check_or_regen("small/data.0", &fs::read(tmp.path().join("data.0")).unwrap());
    check_or_regen("small/md.idx", &fs::read(tmp.path().join("md.idx")).unwrap());
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Walk the fixture with a hand-rolled parser instead of the library decoder.
#[test]
fn fixture_parses_by_hand() {
    let idx = fs::read(fixture("small/md.idx")).unwrap();
    assert_eq!(&idx[..4], b"SCIX");
    assert_eq!(u16::from_le_bytes([idx[4], idx[5]]), 1);
    let mut at = 6;
    let mut kinds = Vec::new();
    let mut step_entries = Vec::new();
    while at < idx.len() {
        let len = u32_at(&idx, at) as usize;
        let kind = idx[at + 4];
        let body = &idx[at + 5..at + 5 + len];
        kinds.push(kind);
        if kind == 3 {
            // step u32, complete u8, expected u32, reported u32, n u32, n × 103-byte entries
            assert_eq!(body[4], 1, "step complete");
            assert_eq!(u32_at(body, 5), 2);
            assert_eq!(u32_at(body, 9), 2);
            let n = u32_at(body, 13) as usize;
            assert_eq!(body.len(), 17 + n * 103);
            for e in body[17..].chunks_exact(103) {
                step_entries.push(e.to_vec());
            }
        }
        at += 5 + len;
    }
    assert_eq!(at, idx.len());
    assert_eq!(kinds, vec![1, 1, 2, 3, 3]);
    assert_eq!(step_entries.len(), 6);

    step_entries.sort_by_key(|e| u64_at(e, 12));
    let data = fs::read(fixture("small/data.0")).unwrap();
    let mut expected_offset = 0u64;
    for e in &step_entries {
        // var_id, step, subfile_id, byte_offset, stored_len, ...
        let offset = u64_at(e, 12);
        let stored = u64_at(e, 20);
        assert_eq!(offset, expected_offset, "records are packed back to back");
        let h = &data[offset as usize..offset as usize + 100];
        assert_eq!(&h[..4], b"SCBK");
        assert_eq!(u32_at(h, 4), u32_at(e, 0));
        assert_eq!(u64_at(h, 88), stored);
        let payload = &data[offset as usize + 100..(offset + 100 + stored) as usize];
        assert_eq!(u32_at(h, 96), crc32fast::hash(payload));
        expected_offset = offset + 100 + stored;
    }
    assert_eq!(expected_offset, data.len() as u64);
}

#[test]
fn fixture_reads_back() {
    let mut r = FileReader::open(fixture("small")).unwrap();
    for step in 0..2u64 {
        let t: Vec<f32> = r
            .read_step(step, "temp", &Selection::full(&[2, 4]))
            .unwrap()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut want = temp_row(step, 0);
        want.extend(temp_row(step, 1));
        assert_eq!(t, want);
        let c = r.read_step(step, "count", &Selection::new(&[], &[])).unwrap();
        assert_eq!(i32::from_le_bytes(c.try_into().unwrap()), step as i32 + 40);
    }
}

#[test]
fn announce_frame_is_stable() {
    let var = VariableDef::new("T2", DType::F64, &[2, 3]).unwrap();
    let block = DataBlock::raw(0, 5, DType::F64, &Selection::new(&[1, 0], &[1, 3]), vec![0u8; 24]);
    let msg = WireMessage::StepAnnounce(StepAnnounce {
        step: 5,
        variables: vec![(0, var)],
        blocks: vec![BlockDescriptor::of(&block)],
    });
    check_or_regen("announce.bin", &msg.encode());
}
