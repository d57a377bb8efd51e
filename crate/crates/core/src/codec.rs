//! Spectral autoencoder: per-source encoders and a shared decoder.
//!
//! Encoder: `[B, C, F, T]` → ReLU frequency projection `F → hidden → proj`
//! per channel and frame → temporal convolution over the `C·proj` features →
//! residual blocks → flatten → dense map to `Z`.
//!
//! Decoder: `ReLU(W ẑ)` reshaped to `proj × T` → residual blocks → dense
//! frequency projection `proj → out_ch·F` per frame → 3×3 conv to the two
//! output channels `[B, 2, F, T]`.
//!
//! Temporal convolutions are `conv2d` with height 1. A residual block computes
//! `h + R(h)` with `R = ReLU ∘ LN ∘ Conv ∘ ReLU ∘ LN ∘ Conv`, layer norm taken
//! over channels at each frame.

use ndarray::{Array2, Array4, Ix2, Ix4};
use ndpca_autograd::{he_normal, Adam, Bound, Conv2dSpec, Graph, NodeId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub freq_bins: usize,
    pub frames: usize,
    /// Encoder input channels: 2 per source it sees.
    pub in_channels: usize,
    pub freq_proj_hidden: usize,
    pub freq_proj_out: usize,
    pub n_res_blocks: usize,
    /// Encoder output width; also the decoder input width for a standalone codec.
    pub latent_dim: usize,
    pub conv_channels: usize,
    /// Temporal kernel length, odd.
    pub kernel: usize,
    /// Channels between the decoder frequency projection and its output conv.
    pub decoder_channels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ArchConfig {
    pub fn desk() -> Self {
        Self {
            freq_bins: 129,
            frames: 16,
            in_channels: 2,
            freq_proj_hidden: 256,
            freq_proj_out: 128,
            n_res_blocks: 2,
            latent_dim: 64,
            conv_channels: 32,
            kernel: 3,
            decoder_channels: 4,
        }
    }

    /// Full-resolution preset: 2048-point STFT over 600 frames.
    pub fn full_scale() -> Self {
        Self { freq_bins: 1025, frames: 600, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.freq_bins,
            self.frames,
            self.in_channels,
            self.freq_proj_hidden,
            self.freq_proj_out,
            self.latent_dim,
            self.conv_channels,
            self.kernel,
            self.decoder_channels,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("architecture sizes must be positive: {self:?}")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    /// Same network with a different encoder input and latent width.
    pub fn with_io(&self, in_channels: usize, latent_dim: usize) -> Self {
        Self { in_channels, latent_dim, ..self.clone() }
    }

    fn temporal(&self) -> Conv2dSpec {
        Conv2dSpec { padding: (0, self.kernel / 2), ..Conv2dSpec::default() }
    }

    fn res_block_params(&self, ch: usize) -> usize {
        2 * (ch * ch * self.kernel + ch) + 4 * ch
    }

    pub fn encoder_param_count(&self) -> usize {
        let (f, h, p, c) = (self.freq_bins, self.freq_proj_hidden, self.freq_proj_out, self.conv_channels);
        f * h + h + h * p + p
            + c * self.in_channels * p * self.kernel + c
            + self.n_res_blocks * self.res_block_params(c)
            + c * self.frames * self.latent_dim + self.latent_dim
    }

    pub fn decoder_param_count(&self) -> usize {
        let (p, t, co) = (self.freq_proj_out, self.frames, self.decoder_channels);
        self.latent_dim * p * t + p * t
            + self.n_res_blocks * self.res_block_params(p)
            + p * co * self.freq_bins + co * self.freq_bins
            + 2 * co * 9 + 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams(pub ParamStore);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams(pub ParamStore);

fn add_res_blocks(store: &mut ParamStore, rng: &mut ChaCha8Rng, n: usize, ch: usize, k: usize) {
    for i in 0..n {
        for j in 1..=2 {
            store.insert(format!("res{i}.conv{j}.w"), he_normal(rng, &[ch, ch, 1, k], ch * k, RELU_GAIN));
            store.insert(format!("res{i}.conv{j}.b"), Tensor::zeros(vec![ch]));
            store.insert(format!("res{i}.ln{j}.g"), Tensor::ones(vec![ch, 1, 1]));
            store.insert(format!("res{i}.ln{j}.b"), Tensor::zeros(vec![ch, 1, 1]));
        }
    }
}

impl EncoderParams {
    pub fn init(cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let (f, h, p, c, k) = (cfg.freq_bins, cfg.freq_proj_hidden, cfg.freq_proj_out, cfg.conv_channels, cfg.kernel);
        let mut s = ParamStore::new();
        s.insert("fp1.w", he_normal(rng, &[f, h], f, RELU_GAIN));
        s.insert("fp1.b", Tensor::zeros(vec![h]));
        s.insert("fp2.w", he_normal(rng, &[h, p], h, RELU_GAIN));
        s.insert("fp2.b", Tensor::zeros(vec![p]));
        let cin = cfg.in_channels * p;
        s.insert("conv_in.w", he_normal(rng, &[c, cin, 1, k], cin * k, RELU_GAIN));
        s.insert("conv_in.b", Tensor::zeros(vec![c]));
        add_res_blocks(&mut s, rng, cfg.n_res_blocks, c, k);
        s.insert("out.w", he_normal(rng, &[c * cfg.frames, cfg.latent_dim], c * cfg.frames, 1.0));
        s.insert("out.b", Tensor::zeros(vec![cfg.latent_dim]));
        Self(s)
    }
}

impl DecoderParams {
    pub fn init(cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let (p, t, co, f) = (cfg.freq_proj_out, cfg.frames, cfg.decoder_channels, cfg.freq_bins);
        let mut s = ParamStore::new();
        s.insert("lat.w", he_normal(rng, &[cfg.latent_dim, p * t], cfg.latent_dim, RELU_GAIN));
        s.insert("lat.b", Tensor::zeros(vec![p * t]));
        add_res_blocks(&mut s, rng, cfg.n_res_blocks, p, cfg.kernel);
        s.insert("freq.w", he_normal(rng, &[p, co * f], p, 1.0));
        s.insert("freq.b", Tensor::zeros(vec![co * f]));
        s.insert("out.w", he_normal(rng, &[2, co, 3, 3], co * 9, 1.0));
        s.insert("out.b", Tensor::zeros(vec![2]));
        Self(s)
    }
}

/// Reproducible initialization of one encoder and one decoder from `seed`.
pub fn init_params(cfg: &ArchConfig, seed: u64) -> Result<(EncoderParams, DecoderParams)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = EncoderParams::init(cfg, &mut rng);
    let dec = DecoderParams::init(cfg, &mut rng);
    Ok((enc, dec))
}

/// Parameter lookup with a name prefix, so several networks share one store.
#[derive(Clone, Copy)]
pub struct Scope<'a> {
    pub bound: &'a Bound,
    pub prefix: &'a str,
}

impl Scope<'_> {
    pub fn id(&self, name: &str) -> NodeId {
        self.bound.id(&format!("{}{}", self.prefix, name))
    }
}

/// Layer norm over axis 1 of `[B, C, H, W]` with per-channel affine `[C, 1, 1]`.
pub fn layer_norm(g: &mut Graph, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
    let mu = g.mean_axis(x, 1);
    let xc = g.sub(x, mu);
    let sq = g.square(xc);
    let var = g.mean_axis(sq, 1);
    let var = g.add_scalar(var, LN_EPS);
    let sd = g.sqrt(var);
    let xn = g.div(xc, sd);
    let y = g.mul(xn, gain);
    g.add(y, bias)
}

fn res_blocks(g: &mut Graph, mut h: NodeId, p: Scope, n: usize, spec: Conv2dSpec) -> NodeId {
    for i in 0..n {
        let mut r = h;
        for j in 1..=2 {
            let w = p.id(&format!("res{i}.conv{j}.w"));
            let b = p.id(&format!("res{i}.conv{j}.b"));
            r = g.conv2d(r, w, Some(b), spec);
            let (lg, lb) = (p.id(&format!("res{i}.ln{j}.g")), p.id(&format!("res{i}.ln{j}.b")));
            r = layer_norm(g, r, lg, lb);
            r = g.relu(r);
        }
        h = g.add(h, r);
    }
    h
}

/// Encoder forward pass on a `[B, in_channels, F, T]` node; returns `[B, Z]`.
pub fn encode_graph(g: &mut Graph, x: NodeId, p: Scope, cfg: &ArchConfig) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let want = [cfg.in_channels, cfg.freq_bins, cfg.frames];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::Shape(format!("encoder input {s:?}, expected [B, {}, {}, {}]", want[0], want[1], want[2])));
    }
    let b = s[0];
    let xt = g.permute(x, &[0, 1, 3, 2]);
    let h1 = g.linear(xt, p.id("fp1.w"), Some(p.id("fp1.b")));
    let h1 = g.relu(h1);
    let h2 = g.linear(h1, p.id("fp2.w"), Some(p.id("fp2.b")));
    let h2 = g.relu(h2);
    let h2 = g.permute(h2, &[0, 1, 3, 2]);
    let feats = g.reshape(h2, &[b, cfg.in_channels * cfg.freq_proj_out, 1, cfg.frames]);
    let h = g.conv2d(feats, p.id("conv_in.w"), Some(p.id("conv_in.b")), cfg.temporal());
    let h = g.relu(h);
    let h = res_blocks(g, h, p, cfg.n_res_blocks, cfg.temporal());
    let flat = g.reshape(h, &[b, cfg.conv_channels * cfg.frames]);
    Ok(g.linear(flat, p.id("out.w"), Some(p.id("out.b"))))
}

/// Decoder forward pass on a `[B, latent_dim]` node; returns `[B, 2, F, T]`.
pub fn decode_graph(g: &mut Graph, z: NodeId, p: Scope, cfg: &ArchConfig) -> Result<NodeId> {
    let s = g.shape(z).to_vec();
    if s.len() != 2 || s[1] != cfg.latent_dim {
        return Err(Error::Shape(format!("decoder input {s:?}, expected [B, {}]", cfg.latent_dim)));
    }
    let b = s[0];
    let (pch, t, co, f) = (cfg.freq_proj_out, cfg.frames, cfg.decoder_channels, cfg.freq_bins);
    let x0 = g.linear(z, p.id("lat.w"), Some(p.id("lat.b")));
    let x0 = g.relu(x0);
    let x0 = g.reshape(x0, &[b, pch, 1, t]);
    let h = res_blocks(g, x0, p, cfg.n_res_blocks, cfg.temporal());
    let h = g.reshape(h, &[b, pch, t]);
    let h = g.permute(h, &[0, 2, 1]);
    let spec = g.linear(h, p.id("freq.w"), Some(p.id("freq.b")));
    let spec = g.reshape(spec, &[b, t, co, f]);
    let spec = g.permute(spec, &[0, 2, 3, 1]);
    let same = Conv2dSpec { padding: (1, 1), ..Conv2dSpec::default() };
    Ok(g.conv2d(spec, p.id("out.w"), Some(p.id("out.b")), same))
}

/// Latents `[B, Z]` of a `[B, in_channels, F, T]` input.
pub fn encode(x: &Array4<f64>, p: &EncoderParams, cfg: &ArchConfig) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let bound = p.0.bind(&mut g, false);
    let xi = g.constant(x.clone().into_dyn());
    let z = encode_graph(&mut g, xi, Scope { bound: &bound, prefix: "" }, cfg)?;
    Ok(g.value(z).clone().into_dimensionality::<Ix2>().expect("encoder output is 2-D"))
}

/// Two-channel spectrogram `[B, 2, F, T]` from latents `[B, Z]`.
pub fn decode(zhat: &Array2<f64>, p: &DecoderParams, cfg: &ArchConfig) -> Result<Array4<f64>> {
    let mut g = Graph::new();
    let bound = p.0.bind(&mut g, false);
    let zi = g.constant(zhat.clone().into_dyn());
    let y = decode_graph(&mut g, zi, Scope { bound: &bound, prefix: "" }, cfg)?;
    Ok(g.value(y).clone().into_dimensionality::<Ix4>().expect("decoder output is 4-D"))
}

/// One optimizer step on the scalar built by `loss_fn` from the bound parameters.
///
/// Returns the loss before the update. A non-finite loss or gradient leaves
/// `params` untouched and reports the offending step.
pub fn grad_step<F>(params: &mut ParamStore, opt: &mut Adam, loss_fn: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &Bound) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = loss_fn(&mut g, &bound)?;
    let value = g.item(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step: opt.step, detail: format!("loss = {value}") });
    }
    let grads = bound.grads(&g, &g.backward(loss));
    if !grads.all_finite() {
        let bad: Vec<_> = grads.iter().filter(|(_, t)| t.iter().any(|v| !v.is_finite())).map(|(k, _)| k.clone()).collect();
        return Err(Error::NonFiniteLoss { step: opt.step, detail: format!("non-finite gradient in {bad:?}") });
    }
    opt.update(params, &grads);
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::Rng;

    fn tiny() -> ArchConfig {
        ArchConfig {
            freq_bins: 5,
            frames: 4,
            in_channels: 2,
            freq_proj_hidden: 6,
            freq_proj_out: 3,
            n_res_blocks: 1,
            latent_dim: 3,
            conv_channels: 2,
            kernel: 3,
            decoder_channels: 2,
        }
    }

    #[test]
    fn param_counts_match_closed_form() {
        for cfg in [tiny(), ArchConfig::desk(), ArchConfig::desk().with_io(8, 16)] {
            let (e, d) = init_params(&cfg, 0).unwrap();
            assert_eq!(e.0.numel(), cfg.encoder_param_count());
            assert_eq!(d.0.numel(), cfg.decoder_param_count());
        }
    }

    #[test]
    fn seeds_control_init() {
        let cfg = tiny();
        assert_eq!(init_params(&cfg, 3).unwrap(), init_params(&cfg, 3).unwrap());
        assert_ne!(init_params(&cfg, 3).unwrap().0, init_params(&cfg, 4).unwrap().0);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_latent() {
        let cfg = tiny();
        let (e, _) = init_params(&cfg, 1).unwrap();
        let z = encode(&Array4::zeros((2, 2, 5, 4)), &e, &cfg).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert_eq!(z.dim(), (2, 3));
    }

    #[test]
    fn zero_latent_zero_bias_gives_zero_output() {
        let cfg = tiny();
        let (_, d) = init_params(&cfg, 1).unwrap();
        let y = decode(&Array2::zeros((2, 3)), &d, &cfg).unwrap();
        assert_eq!(y.dim(), (2, 2, 5, 4));
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_checks_shapes() {
        let cfg = tiny();
        let (e, d) = init_params(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array4::from_shape_simple_fn((2, 2, 5, 4), || rng.random::<f64>());
        let z1 = encode(&x, &e, &cfg).unwrap();
        assert_eq!(z1, encode(&x, &e, &cfg).unwrap());
        assert_eq!(decode(&z1, &d, &cfg).unwrap(), decode(&z1, &d, &cfg).unwrap());
        assert!(encode(&Array4::zeros((1, 2, 5, 3)), &e, &cfg).is_err());
        assert!(decode(&Array2::zeros((1, 4)), &d, &cfg).is_err());
    }

    #[test]
    fn zero_lr_leaves_params() {
        let cfg = tiny();
        let (e, _) = init_params(&cfg, 0).unwrap();
        let mut p = e.0.clone();
        let mut opt = Adam::new(0.0);
        let x = Array4::from_elem((1, 2, 5, 4), 0.5);
        grad_step(&mut p, &mut opt, |g, b| {
            let xi = g.constant(x.clone().into_dyn());
            let z = encode_graph(g, xi, Scope { bound: b, prefix: "" }, &cfg)?;
            let sq = g.square(z);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(p, e.0);
    }

    #[test]
    fn quadratic_step_matches_adam_first_move() {
        // loss = Σ (w − c)², gradient 2(w − c); Adam's first step moves each entry by lr·sign.
        let mut p = ParamStore::new();
        p.insert("w", ArrayD::from_shape_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let c = ArrayD::from_shape_vec(vec![3], vec![0.0, 0.0, 1.0]).unwrap();
        let mut opt = Adam::new(0.1);
        let loss = grad_step(&mut p, &mut opt, |g, b| {
            let ci = g.constant(c.clone());
            let d = g.sub(b.id("w"), ci);
            let sq = g.square(d);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!((loss - (1.0 + 4.0 + 0.25)).abs() < 1e-12);
        let w = p.get("w").unwrap();
        for (got, want) in w.iter().zip([0.9, -1.9, 0.6]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn nan_loss_aborts_without_update() {
        let mut p = ParamStore::new();
        p.insert("w", ArrayD::from_elem(vec![2], -1.0));
        let before = p.clone();
        let mut opt = Adam::new(0.1);
        let r = grad_step(&mut p, &mut opt, |g, b| {
            let l = g.ln(b.id("w"));
            Ok(g.sum(l))
        });
        assert!(matches!(r, Err(Error::NonFiniteLoss { .. })));
        assert_eq!(p, before);
    }

    #[test]
    fn overfit_single_sample() {
        let cfg = tiny();
        let (e, d) = init_params(&cfg, 0).unwrap();
        let mut p = ParamStore::new();
        p.extend_prefixed("enc.", &e.0);
        p.extend_prefixed("dec.", &d.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array4::from_shape_simple_fn((1, 2, 5, 4), || rng.random::<f64>());
        let mut opt = Adam::new(1e-2);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let l = grad_step(&mut p, &mut opt, |g, b| {
                let xi = g.constant(x.clone().into_dyn());
                let z = encode_graph(g, xi, Scope { bound: b, prefix: "enc." }, &cfg)?;
                let y = decode_graph(g, z, Scope { bound: b, prefix: "dec." }, &cfg)?;
                Ok(crate::losses::graph::mse(g, xi, y))
            })
            .unwrap();
            losses.push(l);
        }
        assert!(losses[49] < 0.5 * losses[0], "{} → {}", losses[0], losses[49]);
    }
}
