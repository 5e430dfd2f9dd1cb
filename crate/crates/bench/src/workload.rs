//! Synthetic weather-model history output.
//!
//! The horizontal grid `nx × ny` is split into `px × py` patches, one per
//! rank, with remainders going to the low-index patches. 3-D fields have
//! shape `[nz, ny, nx]`, 2-D fields `[ny, nx]`; all values are `f32`.
//!
//! Field values depend only on the global coordinates, the field, the step
//! and the seed, so any decomposition yields the same global arrays.

use std::fmt;
use std::str::FromStr;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stagecoach::{Error, Result, Selection};

const NAMES_3D: [&str; 8] = ["T", "U", "V", "W", "PH", "P", "QVAPOR", "QCLOUD"];
const NAMES_2D: [&str; 8] = ["T2", "PSFC", "U10", "V10", "Q2", "RAINNC", "HFX", "LH"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    /// Low-frequency sinusoids plus small noise.
    Smooth,
    /// Uniformly random bit patterns.
    Random,
    Constant,
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "smooth" => Ok(Generator::Smooth),
            "random" => Ok(Generator::Random),
            "constant" => Ok(Generator::Constant),
            other => Err(Error::Config(format!("generator must be smooth|random|constant, got `{other}`"))),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Generator::Smooth => "smooth",
            Generator::Random => "random",
            Generator::Constant => "constant",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub nx: u64,
    pub ny: u64,
    pub nz: u64,
    pub fields_3d: usize,
    pub fields_2d: usize,
    pub steps: u64,
    pub compute_ms: u64,
    pub px: u64,
    pub py: u64,
    pub nodes: usize,
    pub ranks_per_node: usize,
    pub generator: Generator,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            nx: 64,
            ny: 64,
            nz: 16,
            fields_3d: 4,
            fields_2d: 4,
            steps: 4,
            compute_ms: 0,
            px: 4,
            py: 2,
            nodes: 2,
            ranks_per_node: 4,
            generator: Generator::Smooth,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub index: usize,
    pub name: String,
    pub three_d: bool,
}

/// A rank's horizontal patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub x0: u64,
    pub nx: u64,
    pub y0: u64,
    pub ny: u64,
}

/// `(start, len)` of part `i` when `n` is split into `parts` pieces.
pub fn split(n: u64, parts: u64, i: u64) -> (u64, u64) {
    let base = n / parts;
    let extra = n % parts;
    (i * base + i.min(extra), base + u64::from(i < extra))
}

impl WorkloadSpec {
    pub fn world_size(&self) -> usize {
        self.nodes * self.ranks_per_node
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return bad("grid extents must be positive".into());
        }
        if self.nodes == 0 || self.ranks_per_node == 0 {
            return bad("topology needs at least one node and one rank per node".into());
        }
        if self.px * self.py != self.world_size() as u64 {
            return bad(format!(
                "decomposition {}x{} does not match {} ranks",
                self.px,
                self.py,
                self.world_size()
            ));
        }
        if self.px > self.nx || self.py > self.ny {
            return bad(format!(
                "decomposition {}x{} is finer than the {}x{} grid",
                self.px, self.py, self.nx, self.ny
            ));
        }
        if self.fields_3d + self.fields_2d == 0 {
            return bad("workload needs at least one field".into());
        }
        Ok(())
    }

    /// Pick `px × py = world_size` as square as possible.
    pub fn auto_decomposition(&mut self) {
        let n = self.world_size() as u64;
        let mut py = (n as f64).sqrt() as u64;
        while py > 1 && n % py != 0 {
            py -= 1;
        }
        self.py = py.max(1);
        self.px = n / self.py;
    }

    pub fn fields(&self) -> Vec<Field> {
        let name = |names: &[&str], i: usize, suffix: &str| {
            names
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("F{suffix}_{i}"))
        };
        let mut out = Vec::new();
        for i in 0..self.fields_3d {
            out.push(Field {
                index: out.len(),
                name: name(&NAMES_3D, i, "3D"),
                three_d: true,
            });
        }
        for i in 0..self.fields_2d {
            out.push(Field {
                index: out.len(),
                name: name(&NAMES_2D, i, "2D"),
                three_d: false,
            });
        }
        out
    }

    pub fn shape(&self, field: &Field) -> Vec<u64> {
        if field.three_d {
            vec![self.nz, self.ny, self.nx]
        } else {
            vec![self.ny, self.nx]
        }
    }

    pub fn patch(&self, rank: usize) -> Patch {
        let (ix, iy) = (rank as u64 % self.px, rank as u64 / self.px);
        let (x0, nx) = split(self.nx, self.px, ix);
        let (y0, ny) = split(self.ny, self.py, iy);
        Patch { x0, nx, y0, ny }
    }

    pub fn selection(&self, field: &Field, p: &Patch) -> Selection {
        if field.three_d {
            Selection::new(&[0, p.y0, p.x0], &[self.nz, p.ny, p.nx])
        } else {
            Selection::new(&[p.y0, p.x0], &[p.ny, p.nx])
        }
    }

    /// Raw bytes of one step over all fields.
    pub fn step_bytes(&self) -> u64 {
        self.fields()
            .iter()
            .map(|f| self.shape(f).iter().product::<u64>() * 4)
            .sum()
    }

    /// Values of `field` over patch `p` at `step`, row-major.
    pub fn patch_values(&self, field: &Field, step: u64, p: &Patch) -> Vec<f32> {
        let nz = if field.three_d { self.nz } else { 1 };
        let mut out = Vec::with_capacity((nz * p.ny * p.nx) as usize);
        let mut rng = self.noise(field, step);
        for z in 0..nz {
            for y in p.y0..p.y0 + p.ny {
                // one 32-bit word per element, addressed by global position
                rng.set_word_pos(((z * self.ny + y) * self.nx + p.x0) as u128);
                for x in p.x0..p.x0 + p.nx {
                    out.push(self.value(field, step, x, y, z, rng.next_u32()));
                }
            }
        }
        out
    }

    pub fn patch_bytes(&self, field: &Field, step: u64, p: &Patch) -> Vec<u8> {
        self.patch_values(field, step, p)
            .into_iter()
            .flat_map(f32::to_le_bytes)
            .collect()
    }

    /// The whole field, as a single writer would produce it.
    pub fn global_bytes(&self, field: &Field, step: u64) -> Vec<u8> {
        self.patch_bytes(
            field,
            step,
            &Patch {
                x0: 0,
                nx: self.nx,
                y0: 0,
                ny: self.ny,
            },
        )
    }

    fn noise(&self, field: &Field, step: u64) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.seed.to_le_bytes());
        seed[8..16].copy_from_slice(&(field.index as u64).to_le_bytes());
        seed[16..24].copy_from_slice(&step.to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }

    fn value(&self, field: &Field, step: u64, x: u64, y: u64, z: u64, bits: u32) -> f32 {
        match self.generator {
            Generator::Constant => 100.0 + field.index as f32,
            Generator::Random => {
                let v = f32::from_bits(bits);
                if v.is_finite() {
                    v
                } else {
                    f32::from_bits(bits & 0xBFFF_FFFF)
                }
            }
            Generator::Smooth => {
                use std::f64::consts::TAU;
                let fx = x as f64 / self.nx as f64;
                let fy = y as f64 / self.ny as f64;
                let fz = z as f64 / self.nz as f64;
                let phase = 0.7 * field.index as f64 + 0.05 * step as f64;
                let base = 250.0 + 10.0 * field.index as f64;
                let wave = 12.0 * (TAU * fx + phase).sin() * (TAU * fy).cos()
                    + 4.0 * (TAU * 2.0 * fy + phase).sin()
                    - 20.0 * fz;
                let noise = (bits as f64 / u32::MAX as f64 - 0.5) * 0.02;
                // sensor-like resolution: values carry about 1/64 precision
                (((base + wave + noise) * 64.0).round() / 64.0) as f32
            }
        }
    }
}
