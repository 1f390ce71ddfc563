//! Training loop: forward through encoder, quantizer and both decoders,
//! backward, Adam on network weights, then moving-average codebook updates and
//! dead-code replacement. Variable-length sequences in a batch are run one at a
//! time and their gradients summed before the optimizer step.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataset::{make_timestamps, patch_count, SkeletonSequence};
use crate::error::{Error, Result};
use crate::hvq::{Hierarchy, HierarchyAssignment, HvqConfig};
use crate::losses::{commitment_node, spatial_node, temporal_node, LossReport, LossWeights};
use crate::metrics::labels_from_patch_indices;
use crate::model::{ctv_to_vct, patches_to_vdt, permute, vdt_to_patches, EncoderConfig, Model, ModelDims, TemporalDecoderConfig};
use crate::tensor::Tensor;

/// Which quantized patches feed a decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderInput {
    #[serde(rename = "QZ")]
    Subaction,
    #[serde(rename = "QA")]
    Action,
    /// Elementwise mean of the subaction and action patches.
    #[serde(rename = "both")]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub hvq: HvqConfig,
    pub encoder: EncoderConfig,
    pub temporal_decoder: TemporalDecoderConfig,
    pub spatial_input: DecoderInput,
    pub temporal_input: DecoderInput,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            batch_size: 4,
            patch_size: 10,
            seed: 0,
            loss: LossWeights::default(),
            hvq: HvqConfig::default(),
            encoder: EncoderConfig::default(),
            temporal_decoder: TemporalDecoderConfig::default(),
            spatial_input: DecoderInput::Action,
            temporal_input: DecoderInput::Subaction,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must be in [0, 1) and adam_eps > 0".into()));
        }
        if self.patch_size < 1 {
            return Err(Error::Config("patch_size must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.loss.validate()?;
        self.hvq.validate()?;
        self.encoder.validate()
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// Bias-corrected Adam step applied in place.
pub fn adam_update(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            *pj -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Forward pass of one sequence
// ---------------------------------------------------------------------------

/// Where the quantized patch values come from.
pub enum Quantizer<'a> {
    Hierarchy(&'a Hierarchy),
    /// Fixed per-level targets with straight-through outputs expressed as
    /// `patches + (target - base_patches)`. The loss is then a smooth function
    /// of the weights whose derivative is exactly the straight-through
    /// gradient at the base point, which makes it usable for finite
    /// differences.
    Frozen {
        base_patches: &'a Tensor,
        targets: &'a [Tensor],
    },
}

/// Frame and patch totals of a batch, used as loss normalizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchTotals {
    pub frames: usize,
    pub patches: usize,
}

impl BatchTotals {
    pub fn of(batch: &[SkeletonSequence], patch: usize) -> Self {
        Self {
            frames: batch.iter().map(SkeletonSequence::frames).sum(),
            patches: batch.iter().map(|s| patch_count(s.frames(), patch)).sum(),
        }
    }
}

pub struct SequencePass {
    pub loss: Var,
    pub report: LossReport,
    /// Raw patch rows `[M, P*V*D]`.
    pub patches: Tensor,
    pub assignment: Option<HierarchyAssignment>,
}

/// Records the full training loss for one sequence on `g`.
#[allow(clippy::too_many_arguments)]
pub fn forward_sequence(
    g: &mut Graph,
    params: &[Var],
    model: &Model,
    cfg: &TrainConfig,
    seq: &SkeletonSequence,
    totals: BatchTotals,
    quantizer: Quantizer<'_>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<SequencePass> {
    let ModelDims { channels: c, joints: v, patch } = model.dims;
    if seq.channels() != c || seq.joint_count() != v {
        return Err(Error::invalid(
            "sequence",
            format!("{} has C={} V={}, model expects C={} V={}", seq.id, seq.channels(), seq.joint_count(), c, v),
        ));
    }
    let (t, d) = (seq.frames(), model.latent());
    let m = patch_count(t, patch);
    let features = model.patch_features();
    let target_streams = Tensor::new(vec![v, c, t], permute(seq.joints.data(), &ctv_to_vct(c, t, v)))?;
    let x = g.constant(target_streams.clone());

    let drop = cfg.encoder.dropout;
    let enc = model.encode_streams(g, params, x, dropout_rng.as_deref_mut().map(|r| (drop, r as &mut dyn rand::RngCore)))?;
    let p = g.gather(enc, vdt_to_patches(v, d, t, patch), &[m, features])?;
    let patches = g.value(p).clone();

    let (targets, assignment): (Vec<Tensor>, Option<HierarchyAssignment>) = match &quantizer {
        Quantizer::Hierarchy(h) => {
            let a = h.quantize(&patches)?;
            (a.levels.iter().map(|l| l.quantized.clone()).collect(), Some(a))
        }
        Quantizer::Frozen { targets, .. } => (targets.to_vec(), None),
    };
    let mut st = Vec::with_capacity(targets.len());
    for target in &targets {
        let node = match &quantizer {
            Quantizer::Hierarchy(_) => {
                let q = g.constant(target.clone());
                g.straight_through(p, q)?
            }
            Quantizer::Frozen { base_patches, .. } => {
                let offset = Tensor::new(
                    target.shape().to_vec(),
                    target.data().iter().zip(base_patches.data()).map(|(q, b)| q - b).collect(),
                )?;
                let o = g.constant(offset);
                g.add(p, o)?
            }
        };
        st.push(node);
    }

    let valid = (t % patch != 0).then(|| {
        let per_frame = v * d;
        Tensor::from_fn(&[m, features], |i| if i / per_frame < t { 1.0 } else { 0.0 })
    });
    let commit_z = commitment_node(g, p, &targets[0], valid.as_ref())?;
    let mut commit_a = None;
    for l in 1..targets.len() {
        let term = commitment_node(g, st[l - 1], &targets[l], valid.as_ref())?;
        commit_a = Some(match commit_a {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }

    let route = |g: &mut Graph, which: DecoderInput| -> Result<Var> {
        let (qz, qa) = (st[0], st[st.len() - 1]);
        match which {
            DecoderInput::Subaction => Ok(qz),
            DecoderInput::Action => Ok(qa),
            DecoderInput::Both => {
                let s = g.add(qz, qa)?;
                g.scale(s, 0.5)
            }
        }
    };
    let spatial_in = route(g, cfg.spatial_input)?;
    let dec_in = g.gather(spatial_in, patches_to_vdt(v, d, t), &[v, d, t])?;
    let recon = model.decode_spatial_streams(g, params, dec_in, dropout_rng.as_deref_mut().map(|r| (drop, r as &mut dyn rand::RngCore)))?;
    let spatial = spatial_node(g, recon, &target_streams, totals.frames)?;

    let temporal_in = route(g, cfg.temporal_input)?;
    let ts = model.decode_temporal_patches(g, params, temporal_in)?;
    let temporal = temporal_node(g, ts, &make_timestamps(t, patch).values, totals.patches)?;

    let w = &cfg.loss;
    let mut terms = Vec::new();
    if w.lambda_commit > 0.0 {
        let c = match commit_a {
            Some(a) => g.add(commit_z, a)?,
            None => commit_z,
        };
        terms.push(g.scale(c, w.lambda_commit)?);
    }
    if w.lambda_spat > 0.0 {
        terms.push(g.scale(spatial, w.lambda_spat)?);
    }
    if w.lambda_temp > 0.0 {
        terms.push(g.scale(temporal, w.lambda_temp)?);
    }
    let loss = match terms.split_first() {
        None => g.constant(Tensor::scalar(0.0)),
        Some((&first, rest)) => {
            let mut acc = first;
            for &r in rest {
                acc = g.add(acc, r)?;
            }
            acc
        }
    };

    let report = LossReport::from_parts(
        g.value(commit_z).item(),
        commit_a.map_or(0.0, |a| g.value(a).item()),
        g.value(spatial).item(),
        g.value(temporal).item(),
        w,
    );
    Ok(SequencePass {
        loss,
        report,
        patches,
        assignment,
    })
}

// ---------------------------------------------------------------------------
// Model state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: TrainConfig,
    /// Number of action clusters.
    pub k: usize,
    pub model: Model,
    /// `None` until the first batch seeds the codebooks.
    pub hierarchy: Option<Hierarchy>,
    pub adam: AdamState,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl ModelState {
    pub fn new(config: TrainConfig, k_default: usize, channels: usize, joints: usize) -> Result<Self> {
        config.validate()?;
        let k = config.hvq.k.unwrap_or(k_default);
        if k < 1 {
            return Err(Error::Config("number of actions must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dims = ModelDims {
            channels,
            joints,
            patch: config.patch_size,
        };
        let model = Model::new(dims, &config.encoder, &config.temporal_decoder, &mut rng)?;
        let adam = AdamState::zeros_like(&model.params.tensors);
        Ok(Self {
            config,
            k,
            model,
            hierarchy: None,
            adam,
            step: 0,
            rng,
        })
    }

    /// Raw patch rows of `seq` under the current encoder.
    pub fn encode_patches(&self, seq: &SkeletonSequence) -> Result<Tensor> {
        let ModelDims { channels: c, joints: v, patch } = self.model.dims;
        if seq.channels() != c || seq.joint_count() != v {
            return Err(Error::invalid(
                "sequence",
                format!("{} has C={} V={}, checkpoint expects C={} V={}", seq.id, seq.channels(), seq.joint_count(), c, v),
            ));
        }
        let (t, d) = (seq.frames(), self.model.latent());
        let mut g = Graph::new();
        let params = self.model.params.register(&mut g);
        let x = g.constant(Tensor::new(vec![v, c, t], permute(seq.joints.data(), &ctv_to_vct(c, t, v)))?);
        let enc = self.model.encode_streams(&mut g, &params, x, None)?;
        let p = g.gather(enc, vdt_to_patches(v, d, t, patch), &[patch_count(t, patch), self.model.patch_features()])?;
        Ok(g.value(p).clone())
    }

    fn init_codebooks(&mut self, batch: &[SkeletonSequence]) -> Result<()> {
        let patches: Vec<Tensor> = batch.iter().map(|s| self.encode_patches(s)).collect::<Result<_>>()?;
        let dim = self.model.patch_features();
        let rows: Vec<&[f64]> = patches.iter().flat_map(|p| (0..p.dim(0)).map(move |i| p.row(i))).collect();
        self.hierarchy = Some(Hierarchy::from_batch(&self.config.hvq, self.k, &rows, dim, &mut self.rng)?);
        Ok(())
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[SkeletonSequence]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::invalid("batch", "training batch is empty"));
        }
        if self.hierarchy.is_none() {
            self.init_codebooks(batch)?;
        }
        let (report, grads, passes) = self.batch_gradients(batch)?;
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: commit_z={} commit_a={} spatial={} temporal={}",
                self.step, report.commit_z, report.commit_a, report.spatial, report.temporal
            )));
        }
        let adam_cfg = AdamConfig::from(&self.config);
        adam_update(&mut self.model.params.tensors, &grads, &mut self.adam, &adam_cfg);
        self.update_codebooks(&passes)?;
        self.step += 1;
        Ok(report)
    }

    /// Loss report, summed parameter gradients and per-sequence passes for
    /// `batch` without changing any state other than the dropout stream.
    pub fn batch_gradients(&mut self, batch: &[SkeletonSequence]) -> Result<(LossReport, Vec<Tensor>, Vec<(Tensor, HierarchyAssignment)>)> {
        let hierarchy = self
            .hierarchy
            .as_ref()
            .ok_or_else(|| Error::invalid("codebooks", "not initialized"))?;
        let totals = BatchTotals::of(batch, self.config.patch_size);
        let mut grads: Vec<Tensor> = self.model.params.tensors.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut report = LossReport::default();
        let mut passes = Vec::with_capacity(batch.len());
        let use_dropout = self.config.encoder.dropout > 0.0;
        for seq in batch {
            let mut g = Graph::new();
            let params = self.model.params.register(&mut g);
            let pass = forward_sequence(
                &mut g,
                &params,
                &self.model,
                &self.config,
                seq,
                totals,
                Quantizer::Hierarchy(hierarchy),
                use_dropout.then_some(&mut self.rng),
            )?;
            let mut sg = g.backward(pass.loss)?;
            for (acc, var) in grads.iter_mut().zip(&params) {
                if let Some(gr) = sg.take(*var) {
                    acc.add_assign(&gr);
                }
            }
            report.accumulate(&pass.report);
            passes.push((pass.patches, pass.assignment.expect("hierarchy quantizer assigns")));
        }
        Ok((report, grads, passes))
    }

    fn update_codebooks(&mut self, passes: &[(Tensor, HierarchyAssignment)]) -> Result<()> {
        let hvq = self.config.hvq.clone();
        let hierarchy = self.hierarchy.as_mut().expect("initialized before update");
        for level in 0..hierarchy.levels() {
            let mut inputs: Vec<&[f64]> = Vec::new();
            let mut indices: Vec<usize> = Vec::new();
            for (patches, a) in passes {
                let src = if level == 0 { patches } else { &a.levels[level - 1].quantized };
                inputs.extend((0..src.dim(0)).map(|i| src.row(i)));
                indices.extend_from_slice(&a.levels[level].indices);
            }
            let cb = &mut hierarchy.codebooks[level];
            cb.ema_update(&inputs, &indices, hvq.beta, hvq.ema)?;
            cb.replace_dead(&inputs, hvq.threshold(level), hvq.stale_patience, &mut self.rng)?;
        }
        Ok(())
    }

    /// Runs `epochs` passes over `data` in shuffled batches, appending one
    /// CSV row per step to `log`. Returns the last report.
    pub fn fit(&mut self, data: &[SkeletonSequence], epochs: usize, log: &mut dyn Write) -> Result<Option<LossReport>> {
        let mut last = None;
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<SkeletonSequence> = chunk.iter().map(|&i| data[i].clone()).collect();
                let report = self.train_step(&batch)?;
                writeln!(log, "{}", report.csv_row(self.step)).map_err(|e| Error::io("writing training log", e))?;
                last = Some(report);
            }
        }
        Ok(last)
    }

    /// Action-level cluster id per frame.
    pub fn predict_labels(&self, seq: &SkeletonSequence) -> Result<Vec<usize>> {
        let hierarchy = self
            .hierarchy
            .as_ref()
            .ok_or_else(|| Error::invalid("checkpoint", "codebooks were never initialized"))?;
        let patches = self.encode_patches(seq)?;
        let a = hierarchy.quantize(&patches)?;
        Ok(labels_from_patch_indices(a.action_indices(), seq.frames(), self.config.patch_size))
    }
}
