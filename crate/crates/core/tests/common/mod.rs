#![allow(dead_code)]

use std::thread;

use stagecoach::{DType, Result, Selection, Writer};

pub const ROWS_PER_RANK: u64 = 4;
pub const COLS: u64 = 12;
pub const P_ROWS: u64 = 6;
pub const P_COLS_PER_RANK: u64 = 3;

pub fn temperature_value(step: u64, i: u64, j: u64) -> f64 {
    step as f64 * 100.0 + i as f64 * 0.5 + j as f64 * 0.25
}

pub fn pressure_value(step: u64, i: u64, j: u64) -> f32 {
    (step * 10_000 + i * 100 + j) as f32
}

pub fn time_value(step: u64) -> f64 {
    step as f64 * 0.1
}

/// Row-major global temperature array, built element by element.
pub fn temperature_global(step: u64, ranks: u64) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..ranks * ROWS_PER_RANK {
        for j in 0..COLS {
            out.push(temperature_value(step, i, j));
        }
    }
    out
}

pub fn pressure_global(step: u64, ranks: u64) -> Vec<f32> {
    let mut out = Vec::new();
    for i in 0..P_ROWS {
        for j in 0..ranks * P_COLS_PER_RANK {
            out.push(pressure_value(step, i, j));
        }
    }
    out
}

pub fn f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn declare(w: &mut Writer, ranks: u64) {
    w.declare_variable("temperature", DType::F64, &[ranks * ROWS_PER_RANK, COLS]).unwrap();
    w.declare_variable("pressure", DType::F32, &[P_ROWS, ranks * P_COLS_PER_RANK]).unwrap();
    w.declare_variable("time", DType::F64, &[]).unwrap();
}

/// Put this rank's share of one step: a row slab of temperature, a column
/// slab of pressure and, on rank 0, the scalar.
pub fn put_step(w: &mut Writer, step: u64) -> Result<()> {
    let r = w.rank() as u64;
    let rows = r * ROWS_PER_RANK..(r + 1) * ROWS_PER_RANK;
    let t: Vec<u8> = rows
        .clone()
        .flat_map(|i| (0..COLS).map(move |j| temperature_value(step, i, j)))
        .flat_map(f64::to_le_bytes)
        .collect();
    w.put("temperature", &Selection::new(&[rows.start, 0], &[ROWS_PER_RANK, COLS]), &t)?;
    let cols = r * P_COLS_PER_RANK..(r + 1) * P_COLS_PER_RANK;
    let p: Vec<u8> = (0..P_ROWS)
        .flat_map(|i| cols.clone().map(move |j| pressure_value(step, i, j)))
        .flat_map(f32::to_le_bytes)
        .collect();
    w.put("pressure", &Selection::new(&[0, cols.start], &[P_ROWS, P_COLS_PER_RANK]), &p)?;
    if r == 0 {
        w.put("time", &Selection::new(&[], &[]), &time_value(step).to_le_bytes())?;
    }
    Ok(())
}

/// Drive every writer through `steps` steps on its own thread and close it.
/// Returns per-rank results of each `end_step` and of `close`.
pub fn run_ranks(writers: Vec<Writer>, steps: u64) -> Vec<(Vec<Result<()>>, Result<()>)> {
    let ranks = writers.len() as u64;
    let handles: Vec<_> = writers
        .into_iter()
        .map(|mut w| {
            thread::spawn(move || {
                declare(&mut w, ranks);
                let mut results = Vec::new();
                for step in 0..steps {
                    let mut tok = w.begin_step().unwrap();
                    put_step(&mut w, step).unwrap();
                    results.push(w.end_step(&mut tok));
                }
                let closed = w.close();
                (results, closed)
            })
        })
        .collect();
    handles.into_iter().map(|h| h.join().unwrap()).collect()
}

pub fn assert_all_ok(results: &[(Vec<Result<()>>, Result<()>)]) {
    for (rank, (steps, close)) in results.iter().enumerate() {
        for (s, r) in steps.iter().enumerate() {
            assert!(r.is_ok(), "rank {rank} step {s}: {r:?}");
        }
        assert!(close.is_ok(), "rank {rank} close: {close:?}");
    }
}
