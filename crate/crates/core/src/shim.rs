//! Throttleable filesystem shim.
//!
//! A [`Throttle`] is a pacing token bucket: each reservation of `n` bytes
//! occupies `n / rate` seconds of a virtual timeline shared by every holder of
//! the throttle. A [`StorageTarget`] is a directory whose files write through
//! an optional shared throttle (aggregate bandwidth of the target) and an
//! optional per-stream throttle (bandwidth one open file can reach).

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::error::{IoContext, Result};

/// Bytes moved per throttle reservation.
pub const THROTTLE_CHUNK: usize = 1 << 20;

pub const MB: f64 = 1_000_000.0;

#[derive(Debug)]
pub struct Throttle {
    bytes_per_sec: f64,
    next_free: Mutex<Instant>,
}

impl Throttle {
    pub fn new(bytes_per_sec: f64) -> Arc<Self> {
        assert!(bytes_per_sec > 0.0, "throttle rate must be positive");
        Arc::new(Throttle {
            bytes_per_sec,
            next_free: Mutex::new(Instant::now()),
        })
    }

    pub fn rate(&self) -> f64 {
        self.bytes_per_sec
    }

    /// Book `bytes` on the timeline and return when the transfer may finish.
    pub fn reserve(&self, bytes: usize) -> Instant {
        let span = Duration::from_secs_f64(bytes as f64 / self.bytes_per_sec);
        let mut next = self.next_free.lock().unwrap();
        let start = (*next).max(Instant::now());
        *next = start + span;
        *next
    }

    pub fn acquire(&self, bytes: usize) {
        sleep_until(self.reserve(bytes));
    }
}

pub fn sleep_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now {
        std::thread::sleep(deadline - now);
    }
}

/// A set of throttles that must all admit a transfer.
#[derive(Debug, Clone, Default)]
pub struct Pacer {
    throttles: Vec<Arc<Throttle>>,
}

impl Pacer {
    pub fn new(throttles: Vec<Arc<Throttle>>) -> Self {
        Pacer { throttles }
    }

    pub fn unthrottled() -> Self {
        Pacer::default()
    }

    pub fn with(mut self, throttle: Arc<Throttle>) -> Self {
        self.throttles.push(throttle);
        self
    }

    pub fn is_throttled(&self) -> bool {
        !self.throttles.is_empty()
    }

    pub fn reserve(&self, bytes: usize) -> Option<Instant> {
        self.throttles.iter().map(|t| t.reserve(bytes)).max()
    }
}

/// Writer whose throughput is bounded by a [`Pacer`].
#[derive(Debug)]
pub struct PacedWriter<W> {
    inner: W,
    pacer: Pacer,
}

impl<W: Write> PacedWriter<W> {
    pub fn new(inner: W, pacer: Pacer) -> Self {
        PacedWriter { inner, pacer }
    }

    pub fn get_ref(&self) -> &W {
        &self.inner
    }

    pub fn get_mut(&mut self) -> &mut W {
        &mut self.inner
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

impl<W: Write> Write for PacedWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = buf.len().min(THROTTLE_CHUNK);
        let deadline = self.pacer.reserve(n);
        self.inner.write_all(&buf[..n])?;
        if let Some(deadline) = deadline {
            sleep_until(deadline);
        }
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// A directory standing in for a storage tier.
#[derive(Debug, Clone)]
pub struct StorageTarget {
    pub dir: PathBuf,
    shared: Option<Arc<Throttle>>,
    per_stream_rate: Option<f64>,
}

impl StorageTarget {
    pub fn unthrottled(dir: impl Into<PathBuf>) -> Self {
        StorageTarget {
            dir: dir.into(),
            shared: None,
            per_stream_rate: None,
        }
    }

    /// `shared_rate` bounds the whole target, `per_stream_rate` each open file.
    pub fn throttled(dir: impl Into<PathBuf>, shared_rate: Option<f64>, per_stream_rate: Option<f64>) -> Self {
        StorageTarget {
            dir: dir.into(),
            shared: shared_rate.map(Throttle::new),
            per_stream_rate,
        }
    }

    /// Same directory policy but sharing `throttle` with other targets.
    pub fn sharing(dir: impl Into<PathBuf>, throttle: Option<Arc<Throttle>>, per_stream_rate: Option<f64>) -> Self {
        StorageTarget {
            dir: dir.into(),
            shared: throttle,
            per_stream_rate,
        }
    }

    pub fn shared_throttle(&self) -> Option<Arc<Throttle>> {
        self.shared.clone()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Pacer for one new stream into this target.
    pub fn stream_pacer(&self) -> Pacer {
        let mut pacer = Pacer::unthrottled();
        if let Some(shared) = &self.shared {
            pacer = pacer.with(shared.clone());
        }
        if let Some(rate) = self.per_stream_rate {
            pacer = pacer.with(Throttle::new(rate));
        }
        pacer
    }

    /// Create (truncating) a file for appending through this target's throttles.
    pub fn create(&self, name: &str) -> Result<PacedWriter<File>> {
        let path = self.path(name);
        let file = create_file(&path)?;
        Ok(PacedWriter::new(file, self.stream_pacer()))
    }
}

pub(crate) fn create_file(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .truncate(true)
        .write(true)
        .open(path)
        .ctx(|| format!("create {}", path.display()))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).ctx(|| format!("create directory {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn throttle_paces_writes() {
        let dir = tempfile::tempdir().unwrap();
        let target = StorageTarget::throttled(dir.path(), Some(20.0 * MB), None);
        let mut w = target.create("x").unwrap();
        let started = Instant::now();
        w.write_all(&vec![0u8; 4_000_000]).unwrap();
        let secs = started.elapsed().as_secs_f64();
        assert!((0.18..0.35).contains(&secs), "4 MB at 20 MB/s took {secs}s");
        assert_eq!(fs::metadata(dir.path().join("x")).unwrap().len(), 4_000_000);
    }

    #[test]
    fn shared_throttle_splits_bandwidth_and_stream_cap_binds() {
        let dir = tempfile::tempdir().unwrap();
        // two streams capped at 10 MB/s each under a 40 MB/s target
        let target = StorageTarget::throttled(dir.path(), Some(40.0 * MB), Some(10.0 * MB));
        let started = Instant::now();
        std::thread::scope(|s| {
            for i in 0..2 {
                let t = target.clone();
                s.spawn(move || t.create(&format!("f{i}")).unwrap().write_all(&vec![1u8; 2_000_000]).unwrap());
            }
        });
        let secs = started.elapsed().as_secs_f64();
        assert!((0.18..0.35).contains(&secs), "took {secs}s");
    }
}
