mod common;

use std::fs::{self, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Arc;

use common::*;
use stagecoach::aggregation::{assign_aggregators, FileEngineConfig, FileJob, FileOutput, RankTopology, Routing};
use stagecoach::burst::{BurstBuffer, BurstConfig, DrainMode, DrainState};
use stagecoach::format::{HEADER_LEN, INDEX_FILE};
use stagecoach::shim::StorageTarget;
use stagecoach::{DType, DataBlock, Error, FileReader, OperatorTable, Selection};
use tempfile::TempDir;

fn config(root: &Path, drain: DrainMode, limit: Option<f64>) -> BurstConfig {
    let bb = root.join("bb");
    fs::create_dir_all(&bb).unwrap();
    BurstConfig {
        bb_dir: bb,
        pfs_dir: root.join("pfs"),
        drain,
        drain_rate_limit: limit,
    }
}

fn start(cfg: &BurstConfig, nodes: usize) -> BurstBuffer {
    BurstBuffer::start(cfg.clone(), nodes, None, StorageTarget::unthrottled(&cfg.pfs_dir), None).unwrap()
}

fn run_job(bb: BurstBuffer, nodes: usize, rpn: usize, steps: u64) -> stagecoach::aggregation::FileJobSummary {
    let topology = RankTopology::uniform(nodes, rpn);
    let assignment = assign_aggregators(&topology, 1).unwrap();
    let (job, writers) = FileJob::launch(FileEngineConfig {
        topology,
        assignment,
        routing: Routing::Chain,
        output: FileOutput::Burst(bb),
        ops: OperatorTable::default(),
    })
    .unwrap();
    assert_all_ok(&run_ranks(writers, steps));
    job.finish().unwrap()
}

#[test]
fn node_local_paths() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), DrainMode::Async, None);
    assert_eq!(cfg.node_dir(0), tmp.path().join("bb").join("node0"));
    assert_eq!(BurstBuffer::relative_path(0, 0), "node0/data.0");
    assert_eq!(BurstBuffer::relative_path(3, 7), "node3/data.7");
    let bb = start(&cfg, 2);
    let sink = bb.open_bb_subfile(1, 1).unwrap();
    assert_eq!(sink.node(), 1);
    assert!(tmp.path().join("bb/node1/data.1").is_file());
}

#[test]
fn missing_bb_dir_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = BurstConfig {
        bb_dir: tmp.path().join("nope"),
        pfs_dir: tmp.path().join("pfs"),
        drain: DrainMode::Async,
        drain_rate_limit: None,
    };
    let err = BurstBuffer::start(cfg, 1, None, StorageTarget::unthrottled(tmp.path().join("pfs")), None).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("bb dir not found"), "{err}");
}

#[test]
fn drain_mode_parses() {
    assert_eq!("off".parse::<DrainMode>().unwrap(), DrainMode::Off);
    assert_eq!("async".parse::<DrainMode>().unwrap(), DrainMode::Async);
    assert!("sync".parse::<DrainMode>().is_err());
    assert_eq!(DrainMode::Async.to_string(), "async");
}

#[test]
fn async_drain_lands_every_subfile_on_pfs() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), DrainMode::Async, None);
    let bb = start(&cfg, 2);
    let manifest = bb.manifest().clone();
    let summary = run_job(bb, 2, 4, 3);

    let snap = manifest.snapshot();
    assert_eq!(snap.len(), 2);
    for (id, e) in &snap {
        assert_eq!(e.node, *id as usize);
        assert_eq!(e.state, DrainState::Complete);
        assert_eq!(e.bytes_drained, e.bytes_written);
        let bb_len = fs::metadata(&e.bb_path).unwrap().len();
        let pfs_len = fs::metadata(cfg.pfs_dir.join(format!("data.{id}"))).unwrap().len();
        assert_eq!(bb_len, e.bytes_written);
        assert_eq!(pfs_len, bb_len);
    }
    assert_eq!(summary.index_dir, cfg.pfs_dir);
    assert_eq!(summary.bytes_written, snap.values().map(|e| e.bytes_written).sum::<u64>());
    assert_eq!(
        summary.bytes_written,
        summary.index.steps.values().map(|s| s.stored_bytes()).sum::<u64>()
    );
    assert!(cfg.pfs_dir.join(INDEX_FILE).is_file());

    // the published index names PFS-local files
    let mut reader = FileReader::open(&cfg.pfs_dir).unwrap();
    assert_eq!(reader.index().subfiles[&1], "data.1");
    assert_eq!(reader.index(), &summary.index);
    for step in 0..3 {
        let t = f64s(&reader.read_step(step, "temperature", &Selection::full(&[32, COLS])).unwrap());
        assert_eq!(t, temperature_global(step, 8));
    }
}

#[test]
fn drain_off_leaves_pfs_untouched() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), DrainMode::Off, None);
    let bb = start(&cfg, 2);
    let summary = run_job(bb, 2, 2, 2);
    assert!(!cfg.pfs_dir.exists() || fs::read_dir(&cfg.pfs_dir).unwrap().next().is_none());
    assert_eq!(summary.drain_seconds, 0.0);
    assert_eq!(summary.index_dir, cfg.bb_dir);
    // readable in place through the node-relative paths
    let mut reader = FileReader::open(&cfg.bb_dir).unwrap();
    assert_eq!(reader.index().subfiles[&0], "node0/data.0");
    let p = f32s(&reader.read_step(1, "pressure", &Selection::full(&[P_ROWS, 4 * P_COLS_PER_RANK])).unwrap());
    assert_eq!(p, pressure_global(1, 4));
}

fn big_block(step: u32, bytes: usize) -> DataBlock {
    let n = bytes / 8;
    let payload: Vec<u8> = (0..n as u64).flat_map(|i| (i * 2654435761).to_le_bytes()).collect();
    DataBlock::raw(0, step, DType::F64, &Selection::new(&[0], &[n as u64]), payload)
}

#[test]
fn drain_rate_limit_paces_the_copy() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), DrainMode::Async, Some(50e6));
    let bb = start(&cfg, 1);
    let mut sink = bb.open_bb_subfile(0, 0).unwrap();
    // 100 MB in ten steps of 10 MB
    let block_bytes = 10_000_000 - HEADER_LEN;
    for step in 0..10 {
        let entry = sink.subfile().append_block(&big_block(step, block_bytes)).unwrap();
        sink.step_completed(&[entry]).unwrap();
    }
    sink.close().unwrap();
    let index = stagecoach::format::GlobalIndex::default();
    let summary = bb.finalize(&index).unwrap();
    assert_eq!(summary.bytes_written, 100_000_000 - 10 * (block_bytes % 8) as u64);
    let expected = summary.bytes_written as f64 / 50e6;
    assert!(
        (summary.drain_seconds - expected).abs() <= 0.25 * expected,
        "drain took {:.3}s, expected {expected:.3}s",
        summary.drain_seconds
    );
}

#[test]
fn corrupted_copy_fails_verification() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), DrainMode::Async, None);
    let hook: stagecoach::burst::PostCopyHook = Arc::new(|path: &Path| {
        let mut f = OpenOptions::new().write(true).open(path).unwrap();
        f.seek(SeekFrom::Start(HEADER_LEN as u64 + 3)).unwrap();
        f.write_all(&[0xFF, 0x00, 0xFF]).unwrap();
    });
    let bb = BurstBuffer::start(cfg.clone(), 1, None, StorageTarget::unthrottled(&cfg.pfs_dir), Some(hook)).unwrap();
    let mut sink = bb.open_bb_subfile(0, 0).unwrap();
    let entry = sink.subfile().append_block(&big_block(0, 4096)).unwrap();
    sink.step_completed(&[entry]).unwrap();
    sink.close().unwrap();
    let err = bb.finalize(&Default::default()).unwrap_err();
    assert!(matches!(err, Error::DrainVerifyFailure(_)), "{err}");
    assert!(!cfg.pfs_dir.join(INDEX_FILE).exists());
}

#[test]
fn zero_step_streams_publish_an_empty_index() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), DrainMode::Async, None);
    let summary = run_job(start(&cfg, 2), 2, 2, 0);
    assert!(summary.index.steps.is_empty());
    let mut reader = FileReader::open(&summary.index_dir).unwrap();
    assert_eq!(reader.index(), &summary.index);
    assert_eq!(stagecoach::StepReader::begin_step(&mut reader).unwrap(), None);

    let direct = tmp.path().join("direct");
    fs::create_dir_all(&direct).unwrap();
    let topology = RankTopology::uniform(1, 3);
    let assignment = assign_aggregators(&topology, 1).unwrap();
    let (job, writers) = FileJob::launch(FileEngineConfig {
        topology,
        assignment,
        routing: Routing::Chain,
        output: FileOutput::Direct(StorageTarget::unthrottled(&direct)),
        ops: OperatorTable::default(),
    })
    .unwrap();
    assert_all_ok(&run_ranks(writers, 0));
    let summary = job.finish().unwrap();
    assert!(FileReader::open(&summary.index_dir).unwrap().index().steps.is_empty());
}
