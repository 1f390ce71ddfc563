#![allow(dead_code)]

pub mod oracles;

use hstvq::autodiff::{Graph, Var};
use hstvq::dataset::SkeletonSequence;
use hstvq::hvq::Hierarchy;
use hstvq::model::{EncoderConfig, TemporalDecoderConfig};
use hstvq::tensor::Tensor;
use hstvq::trainer::{forward_sequence, BatchTotals, ModelState, Quantizer, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Largest violation of `|analytic - numeric| <= rtol * max(1, |numeric|)`
/// over every entry of every input, as a ratio to the allowed error; a value
/// `<= 1` passes.
pub fn fd_check(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let err = (analytic.data()[i] - numeric).abs() / (FD_RTOL * numeric.abs().max(1.0));
            worst = worst.max(err);
        }
    }
    worst
}

pub fn toy_config() -> TrainConfig {
    TrainConfig {
        patch_size: 3,
        encoder: EncoderConfig {
            stages: 2,
            layers_per_stage: 2,
            hidden: 5,
            latent: 4,
            kernel: 3,
            dropout: 0.0,
        },
        temporal_decoder: TemporalDecoderConfig { hidden: vec![6, 4] },
        ..TrainConfig::default()
    }
}

pub fn toy_sequence(c: usize, t: usize, v: usize, seed: u64) -> SkeletonSequence {
    let mut r = rng(seed);
    SkeletonSequence::new(format!("toy{}", seed), random_tensor(&[c, t, v], &mut r), 30).unwrap()
}

/// Worst finite-difference ratio of the full training loss of `seq` with
/// respect to every network weight, quantizing with a codebook seeded from
/// the sequence's own patches and then held fixed.
pub fn composite_fd(cfg: &TrainConfig, seq: &SkeletonSequence, k: usize) -> f64 {
    let state = ModelState::new(cfg.clone(), k, seq.channels(), seq.joint_count()).unwrap();
    let base = state.encode_patches(seq).unwrap();
    let rows: Vec<&[f64]> = (0..base.dim(0)).map(|i| base.row(i)).collect();
    let hierarchy = Hierarchy::from_batch(&cfg.hvq, k, &rows, base.dim(1), &mut rng(7)).unwrap();
    let targets: Vec<Tensor> = hierarchy
        .quantize(&base)
        .unwrap()
        .levels
        .into_iter()
        .map(|l| l.quantized)
        .collect();
    let totals = BatchTotals::of(std::slice::from_ref(seq), cfg.patch_size);
    let model = &state.model;
    fd_check(&model.params.tensors, &|g, vars| {
        forward_sequence(
            g,
            vars,
            model,
            cfg,
            seq,
            totals,
            Quantizer::Frozen {
                base_patches: &base,
                targets: &targets,
            },
            None,
        )
        .unwrap()
        .loss
    })
}
