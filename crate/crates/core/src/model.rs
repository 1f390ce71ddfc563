//! Per-joint multi-stage TCN encoder, temporal patchification, and the two
//! decoders (a mirrored TCN for skeletons, an MLP for patch timestamps).
//!
//! Every joint trajectory is an independent stream through a single shared
//! weight set, so inside the encoder and spatial decoder a sequence is laid
//! out as `[V, channels, T]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub stages: usize,
    pub layers_per_stage: usize,
    pub hidden: usize,
    pub latent: usize,
    pub kernel: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stages: 2,
            layers_per_stage: 3,
            hidden: 64,
            latent: 32,
            kernel: 3,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 {
            return Err(Error::Config("encoder.stages must be >= 1".into()));
        }
        if self.layers_per_stage < 1 {
            return Err(Error::Config("encoder.layers_per_stage must be >= 1".into()));
        }
        if self.hidden < 1 || self.latent < 1 {
            return Err(Error::Config("encoder.hidden and encoder.latent must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("encoder.kernel must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("encoder.dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalDecoderConfig {
    pub hidden: Vec<usize>,
}

impl Default for TemporalDecoderConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 64] }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Flat, ordered storage for every trainable tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Uniform in `±sqrt(1 / fan_in)`.
    fn init(&mut self, name: String, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> usize {
        let bound = (1.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a graph leaf, in storage order.
    pub fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResidualLayer {
    dilation: usize,
    w_dilated: usize,
    b_dilated: usize,
    w_mix: usize,
    b_mix: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stage {
    w_in: usize,
    b_in: usize,
    layers: Vec<ResidualLayer>,
    w_out: usize,
    b_out: usize,
}

/// Multi-stage dilated residual TCN. Each stage projects its input to the
/// hidden width, refines it with residual layers and projects to the stage's
/// output width; the next stage consumes that output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tcn {
    stages: Vec<Stage>,
}

impl Tcn {
    /// `widths[s]` is the (input, output) channel pair of stage `s`;
    /// `dilations` is applied in order within every stage.
    fn build(
        prefix: &str,
        widths: &[(usize, usize)],
        hidden: usize,
        kernel: usize,
        dilations: &[usize],
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let stages = widths
            .iter()
            .enumerate()
            .map(|(s, &(cin, cout))| {
                let w_in = store.init(format!("{prefix}.s{s}.in.w"), &[hidden, cin], cin, rng);
                let b_in = store.init(format!("{prefix}.s{s}.in.b"), &[hidden], cin, rng);
                let layers = dilations
                    .iter()
                    .enumerate()
                    .map(|(l, &dilation)| {
                        let fan = hidden * kernel;
                        ResidualLayer {
                            dilation,
                            w_dilated: store.init(format!("{prefix}.s{s}.l{l}.dil.w"), &[hidden, hidden, kernel], fan, rng),
                            b_dilated: store.init(format!("{prefix}.s{s}.l{l}.dil.b"), &[hidden], fan, rng),
                            w_mix: store.init(format!("{prefix}.s{s}.l{l}.mix.w"), &[hidden, hidden], hidden, rng),
                            b_mix: store.init(format!("{prefix}.s{s}.l{l}.mix.b"), &[hidden], hidden, rng),
                        }
                    })
                    .collect();
                let w_out = store.init(format!("{prefix}.s{s}.out.w"), &[cout, hidden], hidden, rng);
                let b_out = store.init(format!("{prefix}.s{s}.out.b"), &[cout], hidden, rng);
                Stage {
                    w_in,
                    b_in,
                    layers,
                    w_out,
                    b_out,
                }
            })
            .collect();
        Self { stages }
    }

    /// `x: [S, Cin, T]` -> `[S, Cout, T]`.
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var, dropout: Option<(f64, &mut dyn rand::RngCore)>) -> Result<Var> {
        let mut dropout = dropout;
        let mut x = x;
        for stage in &self.stages {
            let mut h = g.pointwise_conv(x, params[stage.w_in], params[stage.b_in])?;
            for layer in &stage.layers {
                let r = g.conv1d_dilated(h, params[layer.w_dilated], Some(params[layer.b_dilated]), layer.dilation)?;
                let mut r = g.relu(r)?;
                if let Some((p, rng)) = dropout.as_mut() {
                    if *p > 0.0 {
                        let keep = 1.0 - *p;
                        let mask = Tensor::from_fn(g.value(r).shape(), |_| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        });
                        let m = g.constant(mask);
                        r = g.mul(r, m)?;
                    }
                }
                let r = g.pointwise_conv(r, params[layer.w_mix], params[layer.b_mix])?;
                h = g.add(h, r)?;
            }
            x = g.pointwise_conv(h, params[stage.w_out], params[stage.b_out])?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<(usize, usize)>,
}

impl Mlp {
    fn build(prefix: &str, input: usize, hidden: &[usize], output: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    store.init(format!("{prefix}.l{i}.w"), &[w[1], w[0]], w[0], rng),
                    store.init(format!("{prefix}.l{i}.b"), &[w[1]], w[0], rng),
                )
            })
            .collect();
        Self { layers }
    }

    /// `x: [B, In]` -> `[B, Out]`, relu between layers.
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let mut x = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            x = g.affine(x, params[w], params[b])?;
            if i + 1 < self.layers.len() {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }
}

/// Shapes a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub channels: usize,
    pub joints: usize,
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub dims: ModelDims,
    pub encoder_cfg: EncoderConfig,
    pub encoder: Tcn,
    pub spatial_decoder: Tcn,
    pub temporal_decoder: Mlp,
    pub params: ParamStore,
}

impl Model {
    pub fn new(dims: ModelDims, enc: &EncoderConfig, temporal: &TemporalDecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        enc.validate()?;
        if dims.patch < 1 {
            return Err(Error::Config("patch_size must be >= 1".into()));
        }
        let mut store = ParamStore::new();
        let (c, h, d) = (dims.channels, enc.hidden, enc.latent);
        let dilations: Vec<usize> = (0..enc.layers_per_stage).map(|l| 1usize << l).collect();
        let mut enc_widths = vec![(c, d)];
        enc_widths.extend(std::iter::repeat_n((d, d), enc.stages - 1));
        let encoder = Tcn::build("enc", &enc_widths, h, enc.kernel, &dilations, &mut store, rng);

        // Mirror: stages in reverse order, dilations descending, last stage emits C.
        let mut dec_widths = vec![(d, d); enc.stages - 1];
        dec_widths.push((d, c));
        let rev_dilations: Vec<usize> = dilations.iter().rev().copied().collect();
        let spatial_decoder = Tcn::build("dec", &dec_widths, h, enc.kernel, &rev_dilations, &mut store, rng);

        let patch_features = dims.patch * dims.joints * d;
        let temporal_decoder = Mlp::build("tdec", patch_features, &temporal.hidden, 1, &mut store, rng);
        Ok(Self {
            dims,
            encoder_cfg: enc.clone(),
            encoder,
            spatial_decoder,
            temporal_decoder,
            params: store,
        })
    }

    pub fn latent(&self) -> usize {
        self.encoder_cfg.latent
    }

    pub fn patch_features(&self) -> usize {
        self.dims.patch * self.dims.joints * self.latent()
    }

    /// Encodes `[V, C, T]` joint streams to `[V, D, T]`.
    pub fn encode_streams(&self, g: &mut Graph, params: &[Var], streams: Var, dropout: Option<(f64, &mut dyn rand::RngCore)>) -> Result<Var> {
        self.encoder.forward(g, params, streams, dropout)
    }

    /// Decodes `[V, D, T]` quantized streams to `[V, C, T]`.
    pub fn decode_spatial_streams(&self, g: &mut Graph, params: &[Var], streams: Var, dropout: Option<(f64, &mut dyn rand::RngCore)>) -> Result<Var> {
        self.spatial_decoder.forward(g, params, streams, dropout)
    }

    /// `[M, P*V*D]` patches to `[M, 1]` timestamps.
    pub fn decode_temporal_patches(&self, g: &mut Graph, params: &[Var], patches: Var) -> Result<Var> {
        self.temporal_decoder.forward(g, params, patches)
    }

    fn check_batch(&self, op: &'static str, shape: &[usize], channel_axis: usize, channels: usize) -> Result<()> {
        if shape.len() != 4 || shape[channel_axis] != channels || shape.contains(&0) {
            return Err(Error::shape(op, format!("unexpected batch shape {:?}", shape)));
        }
        Ok(())
    }

    /// `[N, C, T, V]` -> `[N, T, V, D]`.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch("encode", batch.shape(), 1, self.dims.channels)?;
        let (n, c, t, v) = (batch.dim(0), batch.dim(1), batch.dim(2), batch.dim(3));
        let d = self.latent();
        let mut out = Vec::with_capacity(n * t * v * d);
        for i in 0..n {
            let item = &batch.data()[i * c * t * v..(i + 1) * c * t * v];
            let mut g = Graph::new();
            let params = self.params.register(&mut g);
            let x = g.constant(Tensor::new(vec![v, c, t], permute(item, &ctv_to_vct(c, t, v)))?);
            let z = self.encode_streams(&mut g, &params, x, None)?;
            out.extend(permute(g.value(z).data(), &vdt_to_tvd(v, d, t)));
        }
        Tensor::new(vec![n, t, v, d], out)
    }

    /// `[N, T, V, D]` -> `[N, C, T, V]`.
    pub fn decode_spatial(&self, quantized: &Tensor) -> Result<Tensor> {
        self.check_batch("decode_spatial", quantized.shape(), 3, self.latent())?;
        let (n, t, v, d) = (quantized.dim(0), quantized.dim(1), quantized.dim(2), quantized.dim(3));
        let c = self.dims.channels;
        let mut out = Vec::with_capacity(n * c * t * v);
        for i in 0..n {
            let item = &quantized.data()[i * t * v * d..(i + 1) * t * v * d];
            let mut g = Graph::new();
            let params = self.params.register(&mut g);
            let x = g.constant(Tensor::new(vec![v, d, t], permute(item, &tvd_to_vdt(t, v, d)))?);
            let s = self.decode_spatial_streams(&mut g, &params, x, None)?;
            out.extend(permute(g.value(s).data(), &vct_to_ctv(v, c, t)));
        }
        Tensor::new(vec![n, c, t, v], out)
    }

    /// `[N, M, P, V, D]` -> `[N, M]`.
    pub fn decode_temporal(&self, patches: &Tensor) -> Result<Tensor> {
        let s = patches.shape();
        if s.len() != 5 || s[2] * s[3] * s[4] != self.patch_features() {
            return Err(Error::shape("decode_temporal", format!("unexpected patch shape {:?}", s)));
        }
        let (n, m) = (s[0], s[1]);
        let mut g = Graph::new();
        let params = self.params.register(&mut g);
        let x = g.constant(patches.clone().reshape(&[n * m, self.patch_features()])?);
        let y = self.decode_temporal_patches(&mut g, &params, x)?;
        Tensor::new(vec![n, m], g.value(y).data().to_vec())
    }
}

// ---------------------------------------------------------------------------
// Layout maps. Each returns `src` indices such that `out[i] = in[src[i]]`.
// ---------------------------------------------------------------------------

pub fn permute(data: &[f64], index: &[usize]) -> Vec<f64> {
    index.iter().map(|&i| data[i]).collect()
}

/// `[C, T, V]` -> `[V, C, T]`.
pub fn ctv_to_vct(c: usize, t: usize, v: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(c * t * v);
    for j in 0..v {
        for ch in 0..c {
            for f in 0..t {
                idx.push((ch * t + f) * v + j);
            }
        }
    }
    idx
}

/// `[V, C, T]` -> `[C, T, V]`.
pub fn vct_to_ctv(v: usize, c: usize, t: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(c * t * v);
    for ch in 0..c {
        for f in 0..t {
            for j in 0..v {
                idx.push((j * c + ch) * t + f);
            }
        }
    }
    idx
}

/// `[V, D, T]` -> `[T, V, D]`.
pub fn vdt_to_tvd(v: usize, d: usize, t: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(v * d * t);
    for f in 0..t {
        for j in 0..v {
            for k in 0..d {
                idx.push((j * d + k) * t + f);
            }
        }
    }
    idx
}

/// `[T, V, D]` -> `[V, D, T]`.
pub fn tvd_to_vdt(t: usize, v: usize, d: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(v * d * t);
    for j in 0..v {
        for k in 0..d {
            for f in 0..t {
                idx.push((f * v + j) * d + k);
            }
        }
    }
    idx
}

/// `[V, D, T]` streams straight to `[M, P*V*D]` patch rows, replicating the
/// last frame into a partial trailing patch.
pub fn vdt_to_patches(v: usize, d: usize, t: usize, patch: usize) -> Vec<usize> {
    let m = crate::dataset::patch_count(t, patch);
    let mut idx = Vec::with_capacity(m * patch * v * d);
    for f in 0..m * patch {
        let src_f = f.min(t - 1);
        for j in 0..v {
            for k in 0..d {
                idx.push((j * d + k) * t + src_f);
            }
        }
    }
    idx
}

/// `[M, P*V*D]` patch rows back to `[V, D, T]`, dropping padded frames.
pub fn patches_to_vdt(v: usize, d: usize, t: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(v * d * t);
    for j in 0..v {
        for k in 0..d {
            for f in 0..t {
                idx.push((f * v + j) * d + k);
            }
        }
    }
    idx
}

// ---------------------------------------------------------------------------
// Patch grids
// ---------------------------------------------------------------------------

/// Patchified latent batch: `[N, M, P, V, D]` with padding bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patches: Tensor,
    pub lengths: Vec<usize>,
    /// `[N, M, P]`, `true` on replicated frames.
    pub pad_mask: Vec<bool>,
    pub patch: usize,
}

impl PatchGrid {
    pub fn patch_count(&self) -> usize {
        self.patches.dim(1)
    }
}

/// Splits `[N, T, V, D]` into non-overlapping patches of `patch` frames.
pub fn patchify(x: &Tensor, patch: usize) -> Result<PatchGrid> {
    if x.rank() != 4 {
        return Err(Error::shape("patchify", format!("expected [N, T, V, D], got {:?}", x.shape())));
    }
    let patch = patch.max(1);
    let (n, t, v, d) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let m = crate::dataset::patch_count(t, patch);
    let frame = v * d;
    let mut data = Vec::with_capacity(n * m * patch * frame);
    let mut pad_mask = Vec::with_capacity(n * m * patch);
    for i in 0..n {
        let item = &x.data()[i * t * frame..(i + 1) * t * frame];
        for f in 0..m * patch {
            let src = f.min(t - 1);
            data.extend_from_slice(&item[src * frame..(src + 1) * frame]);
            pad_mask.push(f >= t);
        }
    }
    Ok(PatchGrid {
        patches: Tensor::new(vec![n, m, patch, v, d], data)?,
        lengths: vec![t; n],
        pad_mask,
        patch,
    })
}

pub fn depatchify(grid: &PatchGrid) -> Result<Tensor> {
    let s = grid.patches.shape();
    let (n, m, p, v, d) = (s[0], s[1], s[2], s[3], s[4]);
    let t = grid.lengths.first().copied().unwrap_or(0);
    if grid.lengths.iter().any(|&l| l != t) {
        return Err(Error::shape("depatchify", "ragged lengths in one grid"));
    }
    let frame = v * d;
    let mut out = Vec::with_capacity(n * t * frame);
    for i in 0..n {
        let item = &grid.patches.data()[i * m * p * frame..(i + 1) * m * p * frame];
        out.extend_from_slice(&item[..t * frame]);
    }
    Tensor::new(vec![n, t, v, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(c: usize, v: usize, d: usize, p: usize) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = EncoderConfig {
            hidden: 6,
            latent: d,
            ..Default::default()
        };
        let tdec = TemporalDecoderConfig { hidden: vec![8, 4] };
        Model::new(ModelDims { channels: c, joints: v, patch: p }, &enc, &tdec, &mut rng).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn encode_shape() {
        let m = small_model(3, 4, 8, 2);
        let out = m.encode(&random(&[2, 3, 10, 4], 1)).unwrap();
        assert_eq!(out.shape(), &[2, 10, 4, 8]);
    }

    #[test]
    fn decoder_shapes() {
        let m = small_model(3, 4, 8, 2);
        let q = random(&[2, 10, 4, 8], 2);
        assert_eq!(m.decode_spatial(&q).unwrap().shape(), &[2, 3, 10, 4]);
        let grid = patchify(&q, 2).unwrap();
        assert_eq!(m.decode_temporal(&grid.patches).unwrap().shape(), &[2, 5]);
    }

    #[test]
    fn identical_patches_identical_timestamps() {
        let m = small_model(3, 2, 3, 2);
        let one = random(&[1, 1, 2, 2, 3], 5);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let two = Tensor::new(vec![1, 2, 2, 2, 3], data).unwrap();
        let ts = m.decode_temporal(&two).unwrap();
        assert_eq!(ts.data()[0], ts.data()[1]);
    }

    #[test]
    fn batch_permutation_is_equivariant() {
        let m = small_model(3, 3, 4, 2);
        let a = random(&[1, 3, 7, 3], 7);
        let b = random(&[1, 3, 7, 3], 8);
        let ab = Tensor::new(vec![2, 3, 7, 3], [a.data(), b.data()].concat()).unwrap();
        let ba = Tensor::new(vec![2, 3, 7, 3], [b.data(), a.data()].concat()).unwrap();
        let (oab, oba) = (m.encode(&ab).unwrap(), m.encode(&ba).unwrap());
        let half = oab.len() / 2;
        assert_eq!(&oab.data()[..half], &oba.data()[half..]);
        assert_eq!(&oab.data()[half..], &oba.data()[..half]);
    }

    #[test]
    fn patchify_divisible_and_padded() {
        let x = random(&[1, 6, 2, 2], 9);
        let g = patchify(&x, 3).unwrap();
        assert_eq!(g.patch_count(), 2);
        assert!(g.pad_mask.iter().all(|&p| !p));

        let x = random(&[1, 7, 2, 2], 10);
        let g = patchify(&x, 3).unwrap();
        assert_eq!(g.patch_count(), 3);
        assert_eq!(g.pad_mask, vec![false, false, false, false, false, false, false, true, true]);
        // Replicated frames equal the last real frame.
        let frame = 4;
        let last = &x.data()[6 * frame..7 * frame];
        let pd = g.patches.data();
        assert_eq!(&pd[7 * frame..8 * frame], last);
        assert_eq!(&pd[8 * frame..9 * frame], last);
        assert_eq!(depatchify(&g).unwrap(), x);
    }

    #[test]
    fn stream_patch_maps_agree_with_patchify() {
        let (t, v, d, p) = (7, 2, 3, 3);
        let x = random(&[1, t, v, d], 11);
        let streams = permute(x.data(), &tvd_to_vdt(t, v, d));
        let rows = permute(&streams, &vdt_to_patches(v, d, t, p));
        assert_eq!(rows, patchify(&x, p).unwrap().patches.data());
        let back = permute(&rows, &patches_to_vdt(v, d, t));
        assert_eq!(back, streams);
    }
}
