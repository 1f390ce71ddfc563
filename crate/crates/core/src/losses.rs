//! Commitment, spatial reconstruction and temporal reconstruction losses.
//!
//! The plain functions evaluate a loss on values; the `*_node` builders record
//! the same quantity on a [`Graph`] for training. Commitment terms are sums
//! over patches and therefore scale with batch size.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_commit: f64,
    pub lambda_spat: f64,
    pub lambda_temp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_commit: 1.0,
            lambda_spat: 0.001,
            lambda_temp: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_commit", self.lambda_commit),
            ("lambda_spat", self.lambda_spat),
            ("lambda_temp", self.lambda_temp),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss.{} must be finite and >= 0", name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub commit_z: f64,
    pub commit_a: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_parts(commit_z: f64, commit_a: f64, spatial: f64, temporal: f64, w: &LossWeights) -> Self {
        Self {
            commit_z,
            commit_a,
            spatial,
            temporal,
            total: total(commit_z, commit_a, spatial, temporal, w),
        }
    }

    pub fn csv_header() -> &'static str {
        "step,commit_z,commit_a,spatial,temporal,total"
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            step, self.commit_z, self.commit_a, self.spatial, self.temporal, self.total
        )
    }

    pub(crate) fn accumulate(&mut self, other: &LossReport) {
        self.commit_z += other.commit_z;
        self.commit_a += other.commit_a;
        self.spatial += other.spatial;
        self.temporal += other.temporal;
        self.total += other.total;
    }
}

pub fn total(commit_z: f64, commit_a: f64, spatial: f64, temporal: f64, w: &LossWeights) -> f64 {
    w.lambda_commit * (commit_z + commit_a) + w.lambda_spat * spatial + w.lambda_temp * temporal
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `sum_k |input_k - quantized_k|^2` over patch rows `[patches, dim]`.
///
/// `valid`, when given, has one flag per element and excludes padded frames.
pub fn commitment(inputs: &Tensor, quantized: &Tensor, valid: Option<&[bool]>) -> Result<f64> {
    check_same("commitment", inputs, quantized)?;
    let mut s = 0.0;
    for (i, (x, q)) in inputs.data().iter().zip(quantized.data()).enumerate() {
        if valid.is_none_or(|m| m[i]) {
            s += (x - q) * (x - q);
        }
    }
    Ok(s)
}

/// Inter-joint squared-distance MSE on `[N, C, T, V]` skeletons over ordered
/// joint pairs. `lengths[n]`, when given, drops frames past the real length
/// of sequence `n` from both the sum and the normalizer.
pub fn spatial_recon(target: &Tensor, pred: &Tensor, lengths: Option<&[usize]>) -> Result<f64> {
    check_same("spatial_recon", target, pred)?;
    if target.rank() != 4 {
        return Err(Error::shape("spatial_recon", format!("expected [N, C, T, V], got {:?}", target.shape())));
    }
    let (n, c, t, v) = (target.dim(0), target.dim(1), target.dim(2), target.dim(3));
    let at = |x: &Tensor, i: usize, ch: usize, f: usize, j: usize| x.data()[((i * c + ch) * t + f) * v + j];
    let mut sum = 0.0;
    let mut frames = 0usize;
    for i in 0..n {
        let len = lengths.map_or(t, |l| l[i].min(t));
        frames += len;
        for f in 0..len {
            for a in 0..v {
                for b in 0..v {
                    let (mut ds, mut dp) = (0.0, 0.0);
                    for ch in 0..c {
                        let es = at(target, i, ch, f, a) - at(target, i, ch, f, b);
                        let ep = at(pred, i, ch, f, a) - at(pred, i, ch, f, b);
                        ds += es * es;
                        dp += ep * ep;
                    }
                    sum += (ds - dp) * (ds - dp);
                }
            }
        }
    }
    if frames == 0 {
        return Ok(0.0);
    }
    Ok(sum / (frames * v * v) as f64)
}

/// MSE between target and predicted timestamps, `[N, M]`.
pub fn temporal_recon(target: &Tensor, pred: &Tensor) -> Result<f64> {
    check_same("temporal_recon", target, pred)?;
    if target.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = target.data().iter().zip(pred.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / target.len() as f64)
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// `sum |input - sg[target]|^2`, masked elementwise by `valid` (1.0 / 0.0).
pub fn commitment_node(g: &mut Graph, input: Var, target: &Tensor, valid: Option<&Tensor>) -> Result<Var> {
    let t = g.constant(target.clone());
    let d = g.sub(input, t)?;
    let mut sq = g.mul(d, d)?;
    if let Some(mask) = valid {
        let m = g.constant(mask.clone());
        sq = g.mul(sq, m)?;
    }
    g.sum(sq)
}

/// Spatial term for one sequence of `[V, C, T]` streams, divided by
/// `V^2 * frames_in_batch`.
pub fn spatial_node(g: &mut Graph, pred: Var, target: &Tensor, frames_in_batch: usize) -> Result<Var> {
    let v = target.dim(0);
    g.pairwise_distance_loss(pred, target.clone(), 1.0 / (v * v * frames_in_batch.max(1)) as f64)
}

/// Temporal term for one sequence, `[M, 1]` predictions against targets,
/// divided by the number of patches in the batch.
pub fn temporal_node(g: &mut Graph, pred: Var, target: &[f64], patches_in_batch: usize) -> Result<Var> {
    let t = g.constant(Tensor::new(g.value(pred).shape().to_vec(), target.to_vec())?);
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / patches_in_batch.max(1) as f64)
}
