//! Patch-level hierarchical vector quantization.
//!
//! Level 0 snaps each raw patch to its nearest subaction prototype; every
//! higher level snaps the previous level's *quantized* value to its nearest
//! prototype. Codebooks are never touched by the optimizer: they follow their
//! assigned inputs through the moving-average update and get re-seeded from
//! the current batch when they fall out of use.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{squared_distance, Tensor};

/// Below this the moving-average count is treated as empty.
pub const COUNT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HvqConfig {
    /// Number of actions; `None` takes the manifest's class count.
    pub k: Option<usize>,
    pub alpha: usize,
    pub beta: f64,
    pub nu_z: f64,
    pub nu_a: f64,
    pub stale_patience: u32,
    pub levels: usize,
    pub ema: EmaRule,
}

/// Numerator carried between moving-average updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmaRule {
    /// `beta z + (1 - beta) sum x`, the previous prototype itself.
    #[serde(rename = "literal")]
    Literal,
    /// `beta m + (1 - beta) sum x` with `m` the previous numerator, so the
    /// prototype is the count-weighted running mean of its inputs.
    #[serde(rename = "running_sum")]
    RunningSum,
}

impl Default for HvqConfig {
    fn default() -> Self {
        Self {
            k: None,
            alpha: 2,
            beta: 0.5,
            nu_z: 3.0,
            nu_a: 1.0,
            stale_patience: 5,
            levels: 2,
            ema: EmaRule::RunningSum,
        }
    }
}

impl HvqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == Some(0) {
            return Err(Error::Config("hvq.k must be >= 1".into()));
        }
        if self.alpha < 1 {
            return Err(Error::Config("hvq.alpha must be >= 1".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config("hvq.beta must be in (0, 1)".into()));
        }
        if !(1..=3).contains(&self.levels) {
            return Err(Error::Config(format!("hvq.levels must be 1, 2 or 3, got {}", self.levels)));
        }
        Ok(())
    }

    /// Codebook sizes from finest to coarsest: `alpha^(L-1) K, ..., alpha K, K`.
    pub fn level_sizes(&self, k: usize) -> Vec<usize> {
        (0..self.levels)
            .rev()
            .map(|l| k * self.alpha.pow(l as u32))
            .collect()
    }

    /// Usage threshold of level `level` in a hierarchy of `self.levels`.
    pub fn threshold(&self, level: usize) -> f64 {
        if self.levels > 1 && level + 1 == self.levels {
            self.nu_a
        } else {
            self.nu_z
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    /// `[size, dim]`
    pub prototypes: Tensor,
    pub ema_count: Vec<f64>,
    /// Last numerator of the moving-average update, `[size, dim]`.
    pub ema_sum: Tensor,
    pub stale_batches: Vec<u32>,
}

impl Codebook {
    pub fn new(prototypes: Tensor) -> Result<Self> {
        if prototypes.rank() != 2 || prototypes.dim(0) == 0 {
            return Err(Error::invalid("codebook", "empty codebook"));
        }
        let size = prototypes.dim(0);
        Ok(Self {
            ema_sum: prototypes.clone(),
            prototypes,
            ema_count: vec![1.0; size],
            stale_batches: vec![0; size],
        })
    }

    pub fn size(&self) -> usize {
        self.prototypes.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.prototypes.dim(1)
    }

    pub fn prototype(&self, j: usize) -> &[f64] {
        self.prototypes.row(j)
    }

    /// Index and squared distance of the closest prototype; ties go to the
    /// lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.size() {
            let d = squared_distance(x, self.prototype(j));
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    /// Moving-average re-estimation from the rows assigned to each prototype.
    ///
    /// `N' = beta N + (1 - beta) n_j` and `z' = num' / N'`, where `num'` is
    /// `beta z + (1 - beta) sum x` under [`EmaRule::Literal`] and
    /// `beta num + (1 - beta) sum x` under [`EmaRule::RunningSum`]. A
    /// prototype whose `N'` is numerically zero keeps its value.
    pub fn ema_update(&mut self, inputs: &[&[f64]], assignments: &[usize], beta: f64, rule: EmaRule) -> Result<()> {
        if inputs.len() != assignments.len() {
            return Err(Error::shape("ema_update", "one assignment per input required"));
        }
        let (size, dim) = (self.size(), self.dim());
        let mut counts = vec![0usize; size];
        let mut sums = vec![0.0; size * dim];
        for (x, &j) in inputs.iter().zip(assignments) {
            if x.len() != dim || j >= size {
                return Err(Error::shape("ema_update", format!("input of {} for dim {}, index {}", x.len(), dim, j)));
            }
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(x.iter()) {
                *s += v;
            }
        }
        for j in 0..size {
            let n_hat = beta * self.ema_count[j] + (1.0 - beta) * counts[j] as f64;
            self.ema_count[j] = n_hat;
            let prev = match rule {
                EmaRule::Literal => self.prototypes.data()[j * dim..(j + 1) * dim].to_vec(),
                EmaRule::RunningSum => self.ema_sum.data()[j * dim..(j + 1) * dim].to_vec(),
            };
            let num = &mut self.ema_sum.data_mut()[j * dim..(j + 1) * dim];
            for ((nv, z), &s) in num.iter_mut().zip(prev).zip(&sums[j * dim..(j + 1) * dim]) {
                *nv = beta * z + (1.0 - beta) * s;
            }
            if n_hat < COUNT_EPSILON {
                continue;
            }
            let num = self.ema_sum.data()[j * dim..(j + 1) * dim].to_vec();
            for (z, nv) in self.prototypes.data_mut()[j * dim..(j + 1) * dim].iter_mut().zip(num) {
                *z = nv / n_hat;
            }
        }
        Ok(())
    }

    /// Advances staleness counters and re-seeds every prototype that has been
    /// under `threshold` for `patience` consecutive batches with a uniformly
    /// sampled row of `batch`. Returns the replaced indices.
    pub fn replace_dead(&mut self, batch: &[&[f64]], threshold: f64, patience: u32, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if batch.is_empty() {
            return Err(Error::invalid("batch", "dead-code replacement needs a non-empty batch"));
        }
        let dim = self.dim();
        let mut replaced = Vec::new();
        for j in 0..self.size() {
            if self.ema_count[j] >= threshold {
                self.stale_batches[j] = 0;
                continue;
            }
            self.stale_batches[j] += 1;
            if self.stale_batches[j] >= patience {
                let pick = batch[rng.random_range(0..batch.len())];
                if pick.len() != dim {
                    return Err(Error::shape("replace_dead", "batch row has wrong dimension"));
                }
                self.prototypes.data_mut()[j * dim..(j + 1) * dim].copy_from_slice(pick);
                self.ema_sum.data_mut()[j * dim..(j + 1) * dim].copy_from_slice(pick);
                self.ema_count[j] = 1.0;
                self.stale_batches[j] = 0;
                replaced.push(j);
            }
        }
        Ok(replaced)
    }

    /// Prototypes drawn without replacement from `rows`, or from
    /// `N(0, 0.02)` when there are fewer rows than prototypes.
    pub fn from_batch(size: usize, rows: &[&[f64]], dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("codebook", "empty codebook"));
        }
        let data = if rows.len() >= size {
            let picks = sample(rng, rows.len(), size);
            picks.iter().flat_map(|i| rows[i].iter().copied()).collect()
        } else {
            let normal = Normal::new(0.0, 0.02).expect("valid sigma");
            (0..size * dim).map(|_| normal.sample(rng)).collect()
        };
        Codebook::new(Tensor::new(vec![size, dim], data)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.size() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for block in [self.prototypes.data(), self.ema_sum.data(), &self.ema_count] {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in &self.stale_batches {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    /// Inverse of [`Codebook::to_bytes`]; returns the codebook and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = ByteReader::new(bytes);
        let size = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let prototypes = Tensor::new(vec![size, dim], r.f64s(size * dim)?)?;
        let ema_sum = Tensor::new(vec![size, dim], r.f64s(size * dim)?)?;
        let ema_count = r.f64s(size)?;
        let stale_batches = (0..size).map(|_| r.u32()).collect::<Result<_>>()?;
        Ok((
            Self {
                prototypes,
                ema_count,
                ema_sum,
                stale_batches,
            },
            r.pos,
        ))
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointCorrupt(format!(
                "unexpected end of data at byte {} (need {} more)",
                self.pos, n
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::CheckpointCorrupt("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

/// Nearest-prototype assignment of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelAssignment {
    pub indices: Vec<usize>,
    /// `[patches, dim]`; row `k` equals prototype `indices[k]` bitwise.
    pub quantized: Tensor,
}

fn quantize_rows(rows: &Tensor, codebook: &Codebook) -> Result<LevelAssignment> {
    if rows.rank() != 2 || rows.dim(1) != codebook.dim() {
        return Err(Error::shape(
            "quantize",
            format!("patch rows {:?} against prototypes of dim {}", rows.shape(), codebook.dim()),
        ));
    }
    let n = rows.dim(0);
    let mut indices = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(rows.len());
    for k in 0..n {
        let (j, _) = codebook.nearest(rows.row(k));
        indices.push(j);
        data.extend_from_slice(codebook.prototype(j));
    }
    Ok(LevelAssignment {
        indices,
        quantized: Tensor::new(rows.shape().to_vec(), data)?,
    })
}

/// Snaps raw patches `[patches, dim]` to subaction prototypes.
pub fn quantize_level1(patches: &Tensor, codebook: &Codebook) -> Result<LevelAssignment> {
    quantize_rows(patches, codebook)
}

/// Snaps the previous level's quantized rows to action prototypes.
pub fn quantize_level2(previous: &LevelAssignment, codebook: &Codebook) -> Result<LevelAssignment> {
    quantize_rows(&previous.quantized, codebook)
}

/// One quantization per level, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyAssignment {
    pub levels: Vec<LevelAssignment>,
}

impl HierarchyAssignment {
    /// Subaction-level quantized rows.
    pub fn q_z(&self) -> &Tensor {
        &self.levels[0].quantized
    }

    /// Action-level quantized rows; equal to `q_z` for a flat hierarchy.
    pub fn q_a(&self) -> &Tensor {
        &self.levels[self.levels.len() - 1].quantized
    }

    pub fn action_indices(&self) -> &[usize] {
        &self.levels[self.levels.len() - 1].indices
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    pub codebooks: Vec<Codebook>,
}

impl Hierarchy {
    pub fn levels(&self) -> usize {
        self.codebooks.len()
    }

    /// Seeds every level from one batch of raw patch rows.
    pub fn from_batch(cfg: &HvqConfig, k: usize, rows: &[&[f64]], dim: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let codebooks = cfg
            .level_sizes(k)
            .into_iter()
            .map(|size| Codebook::from_batch(size, rows, dim, rng))
            .collect::<Result<_>>()?;
        Ok(Self { codebooks })
    }

    pub fn quantize(&self, patches: &Tensor) -> Result<HierarchyAssignment> {
        quantize_hierarchy(patches, &self.codebooks)
    }
}

/// Runs the whole chain of levels on `[patches, dim]` rows.
pub fn quantize_hierarchy(patches: &Tensor, codebooks: &[Codebook]) -> Result<HierarchyAssignment> {
    if !(1..=3).contains(&codebooks.len()) {
        return Err(Error::Config(format!("invalid hierarchy level count {}", codebooks.len())));
    }
    let mut levels: Vec<LevelAssignment> = Vec::with_capacity(codebooks.len());
    for cb in codebooks {
        let next = match levels.last() {
            None => quantize_level1(patches, cb)?,
            Some(prev) => quantize_level2(prev, cb)?,
        };
        levels.push(next);
    }
    Ok(HierarchyAssignment { levels })
}
