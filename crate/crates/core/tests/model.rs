mod common;

use common::{fd_check, random_tensor, rng};
use hstvq::autodiff::Graph;
use hstvq::losses::spatial_node;
use hstvq::model::{depatchify, patchify, EncoderConfig, Model, ModelDims, TemporalDecoderConfig};
use hstvq::tensor::Tensor;
use proptest::prelude::*;

fn model(c: usize, v: usize, d: usize, p: usize) -> Model {
    let enc = EncoderConfig {
        stages: 2,
        layers_per_stage: 3,
        hidden: 6,
        latent: d,
        kernel: 3,
        dropout: 0.0,
    };
    let dims = ModelDims { channels: c, joints: v, patch: p };
    Model::new(dims, &enc, &TemporalDecoderConfig { hidden: vec![8, 4] }, &mut rng(17)).unwrap()
}

fn at4(x: &Tensor, i: [usize; 4]) -> f64 {
    let s = x.shape();
    x.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]]
}

#[test]
fn encode_and_decode_shapes() {
    let m = model(3, 4, 8, 5);
    let x = random_tensor(&[2, 3, 10, 4], &mut rng(1));
    let z = m.encode(&x).unwrap();
    assert_eq!(z.shape(), &[2, 10, 4, 8]);
    assert_eq!(m.decode_spatial(&z).unwrap().shape(), &[2, 3, 10, 4]);
    let grid = patchify(&z, 5).unwrap();
    assert_eq!(grid.patches.shape(), &[2, 2, 5, 4, 8]);
    assert_eq!(m.decode_temporal(&grid.patches).unwrap().shape(), &[2, 2]);
    assert!(m.encode(&random_tensor(&[2, 2, 10, 4], &mut rng(1))).is_err());
}

#[test]
fn encoding_is_deterministic_and_per_sequence() {
    let m = model(3, 4, 8, 5);
    let a = random_tensor(&[1, 3, 9, 4], &mut rng(2));
    let b = random_tensor(&[1, 3, 9, 4], &mut rng(3));
    let mut both = a.data().to_vec();
    both.extend_from_slice(b.data());
    let ab = Tensor::new(vec![2, 3, 9, 4], both).unwrap();
    let mut swapped = b.data().to_vec();
    swapped.extend_from_slice(a.data());
    let ba = Tensor::new(vec![2, 3, 9, 4], swapped).unwrap();
    let (zab, zba) = (m.encode(&ab).unwrap(), m.encode(&ba).unwrap());
    let half = zab.len() / 2;
    assert_eq!(&zab.data()[..half], &zba.data()[half..]);
    assert_eq!(&zab.data()[half..], &zba.data()[..half]);
    assert_eq!(m.encode(&ab).unwrap(), zab);
}

#[test]
fn identical_patches_give_identical_timestamps() {
    let m = model(3, 2, 4, 3);
    let one = random_tensor(&[1, 1, 3, 2, 4], &mut rng(4));
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let out = m.decode_temporal(&Tensor::new(vec![1, 2, 3, 2, 4], data).unwrap()).unwrap();
    assert_eq!(out.data()[0], out.data()[1]);
}

#[test]
fn patchify_examples() {
    let x = random_tensor(&[1, 6, 2, 3], &mut rng(5));
    let g = patchify(&x, 3).unwrap();
    assert_eq!(g.patch_count(), 2);
    assert!(g.pad_mask.iter().all(|&p| !p));

    let x = random_tensor(&[1, 7, 2, 3], &mut rng(6));
    let g = patchify(&x, 3).unwrap();
    assert_eq!(g.patch_count(), 3);
    assert_eq!(g.pad_mask, vec![false, false, false, false, false, false, false, true, true]);
    // Padded frames replicate the last real frame.
    let frame = 6;
    let last = &x.data()[6 * frame..7 * frame];
    for f in 7..9 {
        assert_eq!(&g.patches.data()[f * frame..(f + 1) * frame], last);
    }
    assert_eq!(depatchify(&g).unwrap(), x);
}

#[test]
fn decoders_match_fd() {
    let (c, v, d, t) = (3, 2, 3, 5);
    let m = model(c, v, d, 3);
    let latent = random_tensor(&[v, d, t], &mut rng(8));
    let target = random_tensor(&[v, c, t], &mut rng(9));
    let worst = fd_check(&m.params.tensors, &|g: &mut Graph, vars| {
        let x = g.constant(latent.clone());
        let y = m.decode_spatial_streams(g, vars, x, None).unwrap();
        spatial_node(g, y, &target, t).unwrap()
    });
    assert!(worst <= 1.0, "spatial decoder {}", worst);

    let patches = random_tensor(&[4, m.patch_features()], &mut rng(10));
    let times = random_tensor(&[4, 1], &mut rng(11));
    let worst = fd_check(&m.params.tensors, &|g: &mut Graph, vars| {
        let x = g.constant(patches.clone());
        let y = m.decode_temporal_patches(g, vars, x).unwrap();
        let tt = g.constant(times.clone());
        g.mse(y, tt).unwrap()
    });
    assert!(worst <= 1.0, "temporal decoder {}", worst);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn joint_permutation_equivariance(seed in 0u64..1000, t in 1usize..12) {
        let (c, v, d) = (3, 4, 5);
        let m = model(c, v, d, 4);
        let x = random_tensor(&[1, c, t, v], &mut rng(seed));
        let perm = [2usize, 0, 3, 1];
        let px = Tensor::from_fn(&[1, c, t, v], |i| {
            let (ch, f, j) = (i / (t * v), (i / v) % t, i % v);
            at4(&x, [0, ch, f, perm[j]])
        });
        let (z, pz) = (m.encode(&x).unwrap(), m.encode(&px).unwrap());
        for f in 0..t {
            for j in 0..v {
                for k in 0..d {
                    prop_assert_eq!(at4(&pz, [0, f, j, k]), at4(&z, [0, f, perm[j], k]));
                }
            }
        }
        let (s, ps) = (m.decode_spatial(&z).unwrap(), m.decode_spatial(&pz).unwrap());
        for ch in 0..c {
            for f in 0..t {
                for j in 0..v {
                    prop_assert_eq!(at4(&ps, [0, ch, f, j]), at4(&s, [0, ch, f, perm[j]]));
                }
            }
        }
    }

    #[test]
    fn patchify_round_trip(n in 1usize..3, t in 1usize..20, p in 1usize..8, seed in 0u64..1000) {
        let x = random_tensor(&[n, t, 2, 3], &mut rng(seed));
        let g = patchify(&x, p).unwrap();
        prop_assert_eq!(g.patch_count(), t.div_ceil(p));
        prop_assert_eq!(g.pad_mask.iter().filter(|&&m| m).count(), n * (g.patch_count() * p - t));
        prop_assert_eq!(depatchify(&g).unwrap(), x);
    }
}
