mod common;

use common::{composite_fd, fd_check, random_tensor, rng, toy_config, toy_sequence};
use hstvq::autodiff::Graph;
use hstvq::losses::{commitment_node, spatial_node, temporal_node, LossWeights};
use hstvq::tensor::Tensor;
use hstvq::trainer::DecoderInput;

fn assert_fd(name: &str, worst: f64) {
    assert!(worst <= 1.0, "{}: finite-difference mismatch ratio {}", name, worst);
}

#[test]
fn conv1d_dilated_matches_fd() {
    let mut r = rng(1);
    let x = random_tensor(&[2, 7], &mut r);
    let w = random_tensor(&[2, 2, 3], &mut r);
    let b = random_tensor(&[2], &mut r);
    assert_fd(
        "conv1d sum",
        fd_check(&[x.clone(), w.clone()], &|g, v| {
            let y = g.conv1d_dilated(v[0], v[1], None, 2).unwrap();
            g.sum(y).unwrap()
        }),
    );
    let target = random_tensor(&[3, 2, 9], &mut r);
    let xs = random_tensor(&[3, 2, 9], &mut r);
    for dilation in [1, 2, 4] {
        assert_fd(
            "batched conv1d mse",
            fd_check(&[xs.clone(), w.clone(), b.clone()], &|g, v| {
                let y = g.conv1d_dilated(v[0], v[1], Some(v[2]), dilation).unwrap();
                let t = g.constant(target.clone());
                g.mse(y, t).unwrap()
            }),
        );
    }
}

#[test]
fn conv1d_impulse_and_zero_kernel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
    let w = g.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap());
    let y = g.conv1d_dilated(x, w, None, 1).unwrap();
    // out[t] = sum_k w[k] x[t + k - 1]; the first tap reads one step back.
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0, 1.0, 0.0]);
    let z = g.constant(Tensor::zeros(&[1, 1, 3]));
    let y = g.conv1d_dilated(x, z, None, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn pointwise_conv_examples_and_fd() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
    let w = g.constant(Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 3.0]).unwrap());
    let b = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let y = g.pointwise_conv(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 7.0]);

    let mut r = rng(2);
    let xi = random_tensor(&[3, 6], &mut r);
    let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(xi.clone()), g.constant(eye), g.constant(Tensor::zeros(&[3])));
    let y = g.pointwise_conv(xv, wv, bv).unwrap();
    assert_eq!(g.value(y).data(), xi.data());

    let w = random_tensor(&[4, 3], &mut r);
    let b = random_tensor(&[4], &mut r);
    let target = random_tensor(&[4, 6], &mut r);
    assert_fd(
        "pointwise",
        fd_check(&[xi, w, b], &|g, v| {
            let y = g.pointwise_conv(v[0], v[1], v[2]).unwrap();
            let t = g.constant(target.clone());
            g.mse(y, t).unwrap()
        }),
    );
}

#[test]
fn affine_relu_elementwise_fd() {
    let mut r = rng(3);
    let x = random_tensor(&[5, 4], &mut r);
    let w = random_tensor(&[3, 4], &mut r);
    let b = random_tensor(&[3], &mut r);
    let y2 = random_tensor(&[5, 3], &mut r);
    assert_fd(
        "affine relu composite",
        fd_check(&[x, w, b, y2], &|g, v| {
            let h = g.affine(v[0], v[1], v[2]).unwrap();
            let a = g.relu(h).unwrap();
            let s = g.sub(a, v[3]).unwrap();
            let m = g.mul(s, h).unwrap();
            let p = g.add(m, v[3]).unwrap();
            let q = g.scale(p, -0.7).unwrap();
            g.sum(q).unwrap()
        }),
    );
}

#[test]
fn gather_fd_and_shared_consumers() {
    let mut r = rng(4);
    let x = random_tensor(&[2, 3], &mut r);
    let index = vec![5, 0, 0, 3, 2, 2, 2, 1];
    assert_fd(
        "gather",
        fd_check(&[x.clone()], &|g, v| {
            let y = g.gather(v[0], index.clone(), &[2, 4]).unwrap();
            let sq = g.mul(y, y).unwrap();
            g.sum(sq).unwrap()
        }),
    );

    // Two consumers of one leaf: gradients add.
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let p = g.param(x.clone());
        let a = g.scale(p, 2.0).unwrap();
        let b = g.mul(p, p).unwrap();
        let out = match which {
            0 => g.add(a, b).unwrap(),
            1 => a,
            _ => b,
        };
        let s = g.sum(out).unwrap();
        g.backward(s).unwrap().get(p).unwrap().clone()
    };
    let (both, first, second) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..x.len() {
        assert!((both.data()[i] - first.data()[i] - second.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn scalar_backward_examples() {
    let mut g = Graph::new();
    let p = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let s = g.sum(p).unwrap();
    assert_eq!(g.backward(s).unwrap().get(p).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let w = g.param(Tensor::new(vec![1], vec![2.0]).unwrap());
    let x = g.constant(Tensor::new(vec![1], vec![3.0]).unwrap());
    let y = g.constant(Tensor::new(vec![1], vec![5.0]).unwrap());
    let wx = g.mul(w, x).unwrap();
    let l = g.mse(wx, y).unwrap();
    assert_eq!(g.backward(l).unwrap().get(w).unwrap().data(), &[6.0]);

    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let m = g.mse(a, b).unwrap();
    assert_eq!(g.value(m).item(), 0.5);
    let z = g.mse(a, a).unwrap();
    assert_eq!(g.value(z).item(), 0.0);

    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let p = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(p).is_err());
}

#[test]
fn stop_gradient_convention() {
    let x = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
    let mut g = Graph::new();
    let p = g.param(x.clone());
    let s = g.stop_gradient(p).unwrap();
    assert_eq!(g.value(s).data(), x.data());
    let total = g.sum(s).unwrap();
    let grads = g.backward(total).unwrap();
    assert!(grads.get(p).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));

    let mut g = Graph::new();
    let p = g.param(x.clone());
    let s = g.stop_gradient(p).unwrap();
    let m = g.mul(p, s).unwrap();
    let total = g.sum(m).unwrap();
    assert_eq!(g.backward(total).unwrap().get(p).unwrap().data(), x.data());
}

#[test]
fn straight_through_convention() {
    let pre = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let quant = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let mut g = Graph::new();
    let p = g.param(pre);
    let q = g.param(quant.clone());
    let st = g.straight_through(p, q).unwrap();
    assert_eq!(g.value(st).data(), quant.data());
    let s = g.sum(st).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[1.0; 4]);
    assert!(grads.get(q).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn loss_nodes_match_fd() {
    let mut r = rng(5);
    let input = random_tensor(&[3, 4], &mut r);
    let target = random_tensor(&[3, 4], &mut r);
    let mask = Tensor::from_fn(&[3, 4], |i| if i < 10 { 1.0 } else { 0.0 });
    assert_fd(
        "commitment",
        fd_check(&[input.clone()], &|g, v| commitment_node(g, v[0], &target, Some(&mask)).unwrap()),
    );

    let pred = random_tensor(&[3, 3, 2], &mut r);
    let streams = random_tensor(&[3, 3, 2], &mut r);
    assert_fd(
        "spatial",
        fd_check(&[pred], &|g, v| spatial_node(g, v[0], &streams, 2).unwrap()),
    );

    let ts = random_tensor(&[4, 1], &mut r);
    let tt = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    assert_fd("temporal", fd_check(&[ts], &|g, v| temporal_node(g, v[0], &tt, 4).unwrap()));
}

#[test]
fn commitment_gradient_skips_quantized_side() {
    let mut g = Graph::new();
    let p = g.param(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let q = Tensor::zeros(&[1, 2]);
    let l = commitment_node(&mut g, p, &q, None).unwrap();
    assert_eq!(g.value(l).item(), 1.0);
    assert_eq!(g.backward(l).unwrap().get(p).unwrap().data(), &[2.0, 0.0]);
}

#[test]
fn full_loss_matches_fd_on_toy_model() {
    let cfg = toy_config();
    let seq = toy_sequence(3, 6, 3, 11);
    assert_fd("composite", composite_fd(&cfg, &seq, 2));
}

#[test]
fn full_loss_matches_fd_with_padding_and_routing() {
    let mut cfg = toy_config();
    cfg.spatial_input = DecoderInput::Both;
    cfg.temporal_input = DecoderInput::Action;
    cfg.hvq.levels = 3;
    cfg.loss = LossWeights {
        lambda_commit: 0.3,
        lambda_spat: 0.5,
        lambda_temp: 2.0,
    };
    let seq = toy_sequence(3, 7, 3, 12);
    assert_fd("composite padded", composite_fd(&cfg, &seq, 1));
}
