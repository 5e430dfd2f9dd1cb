mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use common::*;
use stagecoach::aggregation::{
    assign_aggregators, AggregatorAssignment, FileEngineConfig, FileJob, FileJobSummary, FileOutput, RankTopology,
    Routing,
};
use stagecoach::format::INDEX_FILE;
use stagecoach::reader::StepReader;
use stagecoach::shim::StorageTarget;
use stagecoach::{CodecId, Error, FileReader, OperatorSpec, OperatorTable, Selection};
use tempfile::TempDir;

const STEPS: u64 = 3;

fn launch(dir: &Path, nodes: usize, rpn: usize, agg: usize, routing: Routing, ops: OperatorTable) -> (FileJob, Vec<stagecoach::Writer>) {
    let topology = RankTopology::uniform(nodes, rpn);
    let assignment = assign_aggregators(&topology, agg).unwrap();
    FileJob::launch(FileEngineConfig {
        topology,
        assignment,
        routing,
        output: FileOutput::Direct(StorageTarget::unthrottled(dir)),
        ops,
    })
    .unwrap()
}

fn run(dir: &Path, nodes: usize, rpn: usize, agg: usize, routing: Routing, ops: OperatorTable) -> FileJobSummary {
    let (job, writers) = launch(dir, nodes, rpn, agg, routing, ops);
    let results = run_ranks(writers, STEPS);
    assert_all_ok(&results);
    job.finish().unwrap()
}

fn data_files(dir: &Path) -> BTreeSet<String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("data."))
        .collect()
}

fn check_contents(dir: &Path, ranks: u64) {
    let mut reader = FileReader::open(dir).unwrap();
    let t_shape = [ranks * ROWS_PER_RANK, COLS];
    let p_shape = [P_ROWS, ranks * P_COLS_PER_RANK];
    for step in 0..STEPS {
        let t = f64s(&reader.read_step(step, "temperature", &Selection::full(&t_shape)).unwrap());
        assert_eq!(t, temperature_global(step, ranks), "temperature step {step}");
        let p = f32s(&reader.read_step(step, "pressure", &Selection::full(&p_shape)).unwrap());
        assert_eq!(p, pressure_global(step, ranks), "pressure step {step}");
        let s = f64s(&reader.read_step(step, "time", &Selection::new(&[], &[])).unwrap());
        assert_eq!(s, vec![time_value(step)]);
    }
}

#[test]
fn chain_round_trip_one_aggregator_per_node() {
    let tmp = TempDir::new().unwrap();
    let summary = run(tmp.path(), 2, 4, 1, Routing::Chain, OperatorTable::default());
    assert!(summary.incomplete_steps.is_empty());
    assert_eq!(summary.data_files, 2);
    assert_eq!(data_files(tmp.path()), ["data.0", "data.1"].map(String::from).into());
    assert!(tmp.path().join(INDEX_FILE).is_file());
    check_contents(tmp.path(), 8);
}

#[test]
fn file_count_matches_aggregators() {
    for (agg, routing, expected) in [
        (1, Routing::Chain, 2),
        (2, Routing::Chain, 4),
        (4, Routing::Chain, 8),
        (1, Routing::Funnel, 1),
        (2, Routing::Funnel, 1),
    ] {
        let tmp = TempDir::new().unwrap();
        let summary = run(tmp.path(), 2, 4, agg, routing, OperatorTable::none());
        assert_eq!(data_files(tmp.path()).len(), expected, "agg={agg} {routing:?}");
        assert_eq!(summary.data_files, expected);
        assert_eq!(summary.index.subfiles.len(), expected);
    }
}

#[test]
fn reconstruction_is_invariant_across_configurations() {
    let ops_variants = [
        OperatorTable::none(),
        OperatorTable::default(),
        OperatorTable::uniform(OperatorSpec {
            shuffle: true,
            codec: CodecId::Zstd,
            level: Some(3),
        }),
        OperatorTable::uniform(OperatorSpec {
            shuffle: false,
            codec: CodecId::Deflate,
            level: None,
        }),
    ];
    let mut reference: Option<Vec<Vec<u8>>> = None;
    for (agg, routing) in [(1, Routing::Chain), (2, Routing::Chain), (3, Routing::Chain), (1, Routing::Funnel)] {
        for ops in ops_variants.iter().cloned() {
            let tmp = TempDir::new().unwrap();
            run(tmp.path(), 2, 3, agg, routing, ops);
            let mut reader = FileReader::open(tmp.path()).unwrap();
            let mut got = Vec::new();
            // an off-grid hyperslab crossing rank boundaries in both variables
            for step in 0..STEPS {
                got.push(reader.read_step(step, "temperature", &Selection::new(&[2, 3], &[15, 7])).unwrap());
                got.push(reader.read_step(step, "pressure", &Selection::new(&[1, 2], &[4, 13])).unwrap());
            }
            match &reference {
                None => reference = Some(got),
                Some(r) => assert_eq!(r, &got, "agg={agg} {routing:?}"),
            }
        }
    }
    // and the reference agrees with the analytic field
    let r = reference.unwrap();
    let ranks = 6;
    for step in 0..STEPS {
        let full = temperature_global(step, ranks);
        let want: Vec<f64> = (2..17)
            .flat_map(|i| (3..10).map(move |j| (i, j)))
            .map(|(i, j)| full[(i * COLS + j) as usize])
            .collect();
        assert_eq!(f64s(&r[2 * step as usize]), want);
        let full = pressure_global(step, ranks);
        let w = ranks * P_COLS_PER_RANK;
        let want: Vec<f32> = (1..5)
            .flat_map(|i| (2..15).map(move |j| (i, j)))
            .map(|(i, j)| full[(i * w + j) as usize])
            .collect();
        assert_eq!(f32s(&r[2 * step as usize + 1]), want);
    }
}

#[test]
fn blocks_land_in_their_group_subfile() {
    let tmp = TempDir::new().unwrap();
    let topology = RankTopology::uniform(2, 4);
    let assignment = assign_aggregators(&topology, 2).unwrap();
    let (job, writers) = launch(tmp.path(), 2, 4, 2, Routing::Chain, OperatorTable::none());
    let stats = job.aggregator_stats().to_vec();
    assert_all_ok(&run_ranks(writers, STEPS));
    let summary = job.finish().unwrap();

    for (g, group) in assignment.groups().iter().enumerate() {
        let log = stats[g].hop_log();
        // 2 array blocks per member per step, plus the scalar on rank 0
        let scalar = usize::from(group.members.contains(&0));
        assert_eq!(log.len(), (group.members.len() * 2 + scalar) * STEPS as usize);
        for (origin, _var, hops) in log {
            assert!(group.members.contains(&origin), "group {g} got a block from rank {origin}");
            assert_eq!(hops as usize, assignment.relay_hops(origin));
        }
    }
    // each block's sub-file is its writer's group, identified by its rows
    let t_id = summary.index.variable_id("temperature").unwrap();
    for rec in summary.index.steps.values() {
        for e in rec.entries.iter().filter(|e| e.var_id == t_id) {
            let rank = (e.start[0] / ROWS_PER_RANK) as u32;
            assert_eq!(e.subfile_id, assignment.subfile_of(rank));
        }
    }
}

#[test]
fn chain_aggregator_holds_one_block_funnel_holds_the_step() {
    let tmp = TempDir::new().unwrap();
    let (job, writers) = launch(tmp.path(), 1, 8, 1, Routing::Chain, OperatorTable::none());
    let stats = job.aggregator_stats().to_vec();
    assert_all_ok(&run_ranks(writers, STEPS));
    job.finish().unwrap();
    assert!(stats[0].largest_block() > 0);
    assert_eq!(stats[0].gauge.peak(), stats[0].largest_block());

    let tmp = TempDir::new().unwrap();
    let (job, writers) = launch(tmp.path(), 1, 8, 1, Routing::Funnel, OperatorTable::none());
    let stats = job.aggregator_stats().to_vec();
    assert_all_ok(&run_ranks(writers, STEPS));
    let summary = job.finish().unwrap();
    let per_step = summary.index.steps[&0].stored_bytes();
    assert!(stats[0].gauge.peak() >= per_step);
}

#[test]
fn step_reader_walks_complete_steps() {
    let tmp = TempDir::new().unwrap();
    run(tmp.path(), 1, 2, 1, Routing::Chain, OperatorTable::default());
    let mut reader = FileReader::open(tmp.path()).unwrap();
    let mut seen = Vec::new();
    while let Some(step) = reader.begin_step().unwrap() {
        let t = f64s(&reader.get("temperature", &Selection::new(&[1, 0], &[2, COLS])).unwrap());
        assert_eq!(t[0], temperature_value(step, 1, 0));
        reader.end_step().unwrap();
        seen.push(step);
    }
    assert_eq!(seen, vec![0, 1, 2]);
    let steps = reader.list_steps();
    assert_eq!(steps.len(), 3);
    assert_eq!(steps[0].variables, vec!["pressure", "temperature", "time"]);
}

#[test]
fn killed_relay_fails_the_step_and_marks_it_incomplete() {
    let tmp = TempDir::new().unwrap();
    let (job, mut writers) = launch(tmp.path(), 1, 4, 1, Routing::Chain, OperatorTable::none());
    // rank 2 dies before writing anything
    drop(writers.remove(2));
    let ranks = 4;
    let handles: Vec<_> = writers
        .into_iter()
        .map(|mut w| {
            std::thread::spawn(move || {
                declare(&mut w, ranks);
                let mut tok = w.begin_step().unwrap();
                put_step(&mut w, 0).unwrap();
                let r = w.end_step(&mut tok);
                (w.rank(), r)
            })
        })
        .collect();
    let outcomes: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    for (rank, r) in &outcomes {
        assert!(matches!(r, Err(Error::TransportFailure(_))), "rank {rank}: {r:?}");
    }
    let summary = job.finish().unwrap();
    assert_eq!(summary.incomplete_steps, vec![0]);
    let rec = &summary.index.steps[&0];
    assert!(!rec.complete);
    assert_eq!(rec.reported_ranks, 2);
    assert_eq!(rec.expected_ranks, 4);

    let mut reader = FileReader::open(tmp.path()).unwrap();
    assert!(reader.list_steps().is_empty());
    assert!(matches!(
        reader.read_step(0, "temperature", &Selection::new(&[0, 0], &[1, 1])),
        Err(Error::IncompleteStep(0))
    ));
}

#[test]
fn dead_aggregator_leaves_steps_incomplete() {
    let tmp = TempDir::new().unwrap();
    let (job, mut writers) = launch(tmp.path(), 2, 2, 1, Routing::Chain, OperatorTable::none());
    drop(writers.remove(2)); // aggregator of node 1
    let results: Vec<_> = writers
        .into_iter()
        .map(|mut w| {
            std::thread::spawn(move || {
                declare(&mut w, 4);
                let mut tok = w.begin_step().unwrap();
                put_step(&mut w, 0).unwrap();
                (w.rank(), w.end_step(&mut tok))
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|h| h.join().unwrap())
        .collect();
    for (rank, r) in results {
        if rank == 3 {
            assert!(matches!(r, Err(Error::TransportFailure(_))));
        } else {
            assert!(r.is_ok(), "rank {rank}: {r:?}");
        }
    }
    let summary = job.finish().unwrap();
    assert_eq!(summary.incomplete_steps, vec![0]);
}

#[test]
fn funnel_tolerates_ranks_racing_ahead() {
    // many steps, tiny blocks: senders routinely enter step s+1 while the
    // root is still collecting step s
    let tmp = TempDir::new().unwrap();
    let (job, writers) = launch(tmp.path(), 1, 6, 1, Routing::Funnel, OperatorTable::none());
    let results = run_ranks(writers, 20);
    assert_all_ok(&results);
    let summary = job.finish().unwrap();
    assert_eq!(summary.index.steps.len(), 20);
    assert!(summary.index.steps.values().all(|s| s.complete));
    let mut reader = FileReader::open(tmp.path()).unwrap();
    for step in [0u64, 7, 19] {
        let t = f64s(&reader.read_step(step, "temperature", &Selection::full(&[24, COLS])).unwrap());
        assert_eq!(t, temperature_global(step, 6));
    }
}

#[test]
fn single_assignment_matches_funnel_groups() {
    let topo = RankTopology::uniform(2, 3);
    let a = AggregatorAssignment::single(&topo);
    assert_eq!(a.aggregators(), vec![0]);
    assert_eq!(a.relay_hops(5), 4);
}
