mod common;

use common::{toy_config, toy_sequence};
use hstvq::autodiff::Graph;
use hstvq::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, CHECKPOINT_VERSION};
use hstvq::dataset::SkeletonSequence;
use hstvq::losses::LossWeights;
use hstvq::tensor::Tensor;
use hstvq::trainer::{adam_update, forward_sequence, AdamConfig, AdamState, BatchTotals, ModelState, Quantizer, TrainConfig};
use hstvq::Error;

fn batch() -> Vec<SkeletonSequence> {
    vec![toy_sequence(3, 12, 3, 1), toy_sequence(3, 7, 3, 2), toy_sequence(3, 9, 3, 3)]
}

fn primed(cfg: TrainConfig) -> (ModelState, Vec<SkeletonSequence>) {
    let data = batch();
    let mut state = ModelState::new(cfg, 2, 3, 3).unwrap();
    state.train_step(&data).unwrap();
    (state, data)
}

fn max_abs(ts: &[Tensor]) -> f64 {
    ts.iter().flat_map(|t| t.data().iter()).fold(0.0f64, |m, v| m.max(v.abs()))
}

fn grads_with(state: &ModelState, data: &[SkeletonSequence], w: LossWeights) -> Vec<Tensor> {
    let mut s = state.clone();
    s.config.loss = w;
    s.batch_gradients(data).unwrap().1
}

#[test]
fn adam_examples() {
    let cfg = AdamConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut p = vec![Tensor::new(vec![1], vec![0.0]).unwrap()];
    let mut st = AdamState::zeros_like(&p);
    adam_update(&mut p, &[Tensor::new(vec![1], vec![1.0]).unwrap()], &mut st, &cfg);
    assert!((p[0].data()[0] + 0.1).abs() < 1e-8);

    let g = 3.0;
    let mut p = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
    let mut st = AdamState::zeros_like(&p);
    adam_update(&mut p, &[Tensor::new(vec![1], vec![g]).unwrap()], &mut st, &cfg);
    assert!((st.m[0].data()[0] - 0.1 * g).abs() < 1e-15);
    assert!((st.v[0].data()[0] - 0.001 * g * g).abs() < 1e-15);
    assert_eq!(st.t, 1);

    let mut p = vec![Tensor::new(vec![2], vec![1.5, -2.0]).unwrap()];
    let before = p[0].clone();
    let mut st = AdamState::zeros_like(&p);
    adam_update(&mut p, &[Tensor::zeros(&[2])], &mut st, &cfg);
    assert_eq!(p[0], before);
}

#[test]
fn overfits_a_tiny_batch() {
    let data = batch();
    let mut state = ModelState::new(toy_config(), 2, 3, 3).unwrap();
    let reports: Vec<f64> = (0..50).map(|_| state.train_step(&data).unwrap().total).collect();
    eprintln!("step 1 total {:.6}, step 50 total {:.6}", reports[0], reports[49]);
    assert!(reports[49] < reports[0], "{:?}", reports);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let data = batch();
        let mut state = ModelState::new(toy_config(), 2, 3, 3).unwrap();
        let mut log = Vec::new();
        state.fit(&data, 4, &mut log).unwrap();
        (log, to_bytes(&state).unwrap())
    };
    let (a, b) = (run(), run());
    assert!(!a.0.is_empty());
    assert_eq!(a, b);
}

#[test]
fn dropout_stream_is_deterministic() {
    let mut cfg = toy_config();
    cfg.encoder.dropout = 0.3;
    let run = || {
        let data = batch();
        let mut state = ModelState::new(cfg.clone(), 2, 3, 3).unwrap();
        (0..3).map(|_| state.train_step(&data).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_weights_freeze_the_network() {
    let mut cfg = toy_config();
    cfg.loss = LossWeights {
        lambda_commit: 0.0,
        lambda_spat: 0.0,
        lambda_temp: 0.0,
    };
    let (mut state, data) = primed(cfg);
    let params = state.model.params.tensors.clone();
    let codebooks = state.hierarchy.clone();
    for _ in 0..3 {
        state.train_step(&data).unwrap();
    }
    assert_eq!(state.model.params.tensors, params);
    // Codebooks still move under their moving-average rule.
    assert_ne!(state.hierarchy, codebooks);
}

#[test]
fn zeroing_a_weight_removes_its_gradient() {
    let (state, data) = primed(toy_config());
    let full = LossWeights {
        lambda_commit: 0.7,
        lambda_spat: 0.4,
        lambda_temp: 1.3,
    };
    let only = |c, s, t| LossWeights {
        lambda_commit: c,
        lambda_spat: s,
        lambda_temp: t,
    };
    let g_full = grads_with(&state, &data, full);
    let parts = [
        grads_with(&state, &data, only(0.7, 0.0, 0.0)),
        grads_with(&state, &data, only(0.0, 0.4, 0.0)),
        grads_with(&state, &data, only(0.0, 0.0, 1.3)),
    ];
    assert!(max_abs(&parts[1]) > 0.0 && max_abs(&parts[2]) > 0.0);
    let scale = max_abs(&g_full).max(1.0);
    for i in 0..g_full.len() {
        for j in 0..g_full[i].len() {
            let sum: f64 = parts.iter().map(|p| p[i].data()[j]).sum();
            assert!((g_full[i].data()[j] - sum).abs() <= 1e-9 * scale);
        }
    }
    let names = &state.model.params.names;
    // Each decoder sees only its own reconstruction term.
    let no_spat = grads_with(&state, &data, only(0.7, 0.0, 1.3));
    let no_temp = grads_with(&state, &data, only(0.7, 0.4, 0.0));
    for (i, name) in names.iter().enumerate() {
        if name.starts_with("dec.") {
            assert!(no_spat[i].data().iter().all(|&v| v == 0.0), "{}", name);
        }
        if name.starts_with("tdec.") {
            assert!(no_temp[i].data().iter().all(|&v| v == 0.0), "{}", name);
        }
    }
    // Removing a term leaves exactly the remaining terms.
    for i in 0..no_spat.len() {
        for j in 0..no_spat[i].len() {
            let rest = parts[0][i].data()[j] + parts[2][i].data()[j];
            assert!((no_spat[i].data()[j] - rest).abs() <= 1e-9 * scale);
        }
    }
}

#[test]
fn ragged_batch_gradient_is_sum_of_sequences() {
    let (mut state, data) = primed(toy_config());
    let (report, grads, _) = state.batch_gradients(&data).unwrap();
    let totals = BatchTotals::of(&data, state.config.patch_size);
    assert_eq!(totals.frames, 28);
    assert_eq!(totals.patches, 4 + 3 + 3);
    let hierarchy = state.hierarchy.clone().unwrap();
    let mut sum: Vec<Tensor> = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
    let mut loss_sum = 0.0;
    for seq in &data {
        let mut g = Graph::new();
        let vars = state.model.params.register(&mut g);
        let pass = forward_sequence(&mut g, &vars, &state.model, &state.config, seq, totals, Quantizer::Hierarchy(&hierarchy), None).unwrap();
        loss_sum += g.value(pass.loss).item();
        let sg = g.backward(pass.loss).unwrap();
        for (acc, v) in sum.iter_mut().zip(&vars) {
            if let Some(t) = sg.get(*v) {
                for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
        }
    }
    assert!((report.total - loss_sum).abs() < 1e-12 * loss_sum.abs().max(1.0));
    for (a, b) in grads.iter().zip(&sum) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_round_trip_resumes_identically() {
    let (mut state, data) = primed(toy_config());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let mut loaded = load_checkpoint(&path).unwrap();
    assert_eq!(to_bytes(&loaded).unwrap(), to_bytes(&state).unwrap());
    let a = state.train_step(&data).unwrap();
    let b = loaded.train_step(&data).unwrap();
    assert_eq!(a, b);
    assert_eq!(to_bytes(&loaded).unwrap(), to_bytes(&state).unwrap());

    // Shuffling during fit draws from the restored stream too.
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    state.fit(&data, 2, &mut la).unwrap();
    loaded.fit(&data, 2, &mut lb).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn fresh_state_round_trips() {
    let state = ModelState::new(toy_config(), 2, 3, 3).unwrap();
    let back = from_bytes(&to_bytes(&state).unwrap()).unwrap();
    assert!(back.hierarchy.is_none());
    assert_eq!(to_bytes(&back).unwrap(), to_bytes(&state).unwrap());
}

#[test]
fn truncated_checkpoint_fails_checksum() {
    let (state, _) = primed(toy_config());
    let bytes = to_bytes(&state).unwrap();
    for cut in [bytes.len() - 1, bytes.len() / 2, 20] {
        match from_bytes(&bytes[..cut]) {
            Err(Error::CheckpointCorrupt(msg)) => assert!(msg.contains("checksum") || msg.contains("truncated"), "{}", msg),
            other => panic!("expected corrupt checkpoint, got {:?}", other.map(|_| ())),
        }
    }
    let mut flipped = bytes.clone();
    let last = flipped.len() - 10;
    flipped[last] ^= 0x40;
    assert!(matches!(from_bytes(&flipped), Err(Error::CheckpointCorrupt(_))));
}

#[test]
fn version_mismatch_is_explicit() {
    let (state, _) = primed(toy_config());
    let mut bytes = to_bytes(&state).unwrap();
    bytes[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    match from_bytes(&bytes) {
        Err(Error::CheckpointVersion { found, expected }) => assert_eq!((found, expected), (CHECKPOINT_VERSION + 1, CHECKPOINT_VERSION)),
        other => panic!("expected version error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let err = TrainConfig::from_json(r#"{"lr": 0.001, "learning_rate": 3}"#).unwrap_err();
    assert!(err.to_string().contains("learning_rate"), "{}", err);
    let err = TrainConfig::from_json(r#"{"hvq": {"levelz": 2}}"#).unwrap_err();
    assert!(err.to_string().contains("levelz"), "{}", err);
    assert!(TrainConfig::from_json(r#"{"lr": 0}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"patch_size": 0}"#).is_err());
    assert_eq!(TrainConfig::from_json("{}").unwrap(), TrainConfig::default());
}

#[test]
fn empty_batch_is_rejected() {
    let mut state = ModelState::new(toy_config(), 2, 3, 3).unwrap();
    assert!(state.train_step(&[]).is_err());
}

#[test]
fn non_finite_input_aborts_with_numeric_error() {
    let mut seq = toy_sequence(3, 6, 3, 4);
    seq.joints.data_mut()[5] = f64::NAN;
    let mut state = ModelState::new(toy_config(), 2, 3, 3).unwrap();
    let err = state.train_step(&[seq]).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{}", err);
}

#[test]
fn predictions_are_bounded_by_k() {
    let (state, data) = primed(toy_config());
    for seq in &data {
        let labels = state.predict_labels(seq).unwrap();
        assert_eq!(labels.len(), seq.frames());
        assert!(labels.iter().all(|&l| l < state.k));
    }
    let wrong = toy_sequence(3, 6, 4, 5);
    assert!(state.predict_labels(&wrong).is_err());
}
