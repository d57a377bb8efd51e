//! Multi-scale STFT discriminator and the losses built on it.
//!
//! Each scale frames the waveform without padding, applies a Hann-windowed DFT
//! as two real channels `[B, 2, F, frames]`, and runs a conv stack with leaky
//! ReLU. Layer 0 keeps the resolution; later layers stride over frequency and
//! dilate over time by `2^{l−1}`. A final conv to one channel is averaged to
//! a scalar logit per batch row.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use ndpca_autograd::{he_normal, Adam, Conv2dSpec, Graph, NodeId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Scope;
use crate::dsp::StftConfig;
use crate::error::{Error, Result};

const LEAK: f64 = 0.2;
const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftScale {
    pub fft_size: usize,
    pub hop: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleConfig {
    pub scales: Vec<StftScale>,
    pub channels: usize,
    pub n_layers: usize,
    /// (frequency, time) kernel extent.
    pub kernel: (usize, usize),
    pub freq_stride: usize,
    /// Weight of the L1 feature-matching term in the perceptual loss.
    pub feature_weight: f64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        let scales = [512, 1024, 2048].map(|n| StftScale { fft_size: n, hop: n / 4 }).to_vec();
        Self { scales, channels: 32, n_layers: 3, kernel: (3, 3), freq_stride: 2, feature_weight: 1.0 }
    }
}

impl ScaleConfig {
    /// Scales short enough for one-second-or-less desk clips.
    pub fn desk() -> Self {
        let scales = [64, 128, 256].map(|n| StftScale { fft_size: n, hop: n / 4 }).to_vec();
        Self { scales, channels: 8, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ffts: Vec<usize> = self.scales.iter().map(|s| s.fft_size).collect();
        ffts.sort_unstable();
        ffts.dedup();
        if ffts.len() < 2 || ffts.len() != self.scales.len() {
            return Err(Error::Config("the discriminator needs at least 2 distinct scales".into()));
        }
        let positive = self.scales.iter().all(|s| s.fft_size > 1 && s.hop > 0)
            && self.channels > 0
            && self.n_layers > 0
            && self.kernel.0 % 2 == 1
            && self.kernel.1 % 2 == 1
            && self.freq_stride > 0;
        if !positive || !(self.feature_weight >= 0.0) {
            return Err(Error::Config(format!("invalid discriminator config {self:?}")));
        }
        Ok(())
    }

    pub fn max_fft(&self) -> usize {
        self.scales.iter().map(|s| s.fft_size).max().unwrap_or(0)
    }

    /// Geometry of layer `l`.
    pub fn layer_spec(&self, l: usize) -> Conv2dSpec {
        let (kh, kw) = self.kernel;
        if l == 0 {
            return Conv2dSpec { padding: (kh / 2, kw / 2), ..Conv2dSpec::default() };
        }
        let d = 1 << (l - 1);
        Conv2dSpec { stride: (self.freq_stride, 1), dilation: (1, d), padding: (kh / 2, d * (kw / 2)) }
    }

    fn final_spec(&self) -> Conv2dSpec {
        Conv2dSpec { padding: (1, 1), ..Conv2dSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams(pub ParamStore);

impl DiscriminatorParams {
    pub fn init(cfg: &ScaleConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (kh, kw) = cfg.kernel;
        let c = cfg.channels;
        let mut s = ParamStore::new();
        for i in 0..cfg.scales.len() {
            for l in 0..cfg.n_layers {
                let cin = if l == 0 { 2 } else { c };
                s.insert(format!("s{i}.conv{l}.w"), he_normal(&mut rng, &[c, cin, kh, kw], cin * kh * kw, 1.0));
                s.insert(format!("s{i}.conv{l}.b"), Tensor::zeros(vec![c]));
            }
            s.insert(format!("s{i}.out.w"), he_normal(&mut rng, &[1, c, 3, 3], c * 9, 1.0));
            s.insert(format!("s{i}.out.b"), Tensor::zeros(vec![1]));
        }
        Ok(Self(s))
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Windowed real-DFT matrices `[N, N/2+1]` for the real and imaginary parts.
fn dft_mats(n: usize) -> (Tensor, Tensor) {
    let w = hann(n);
    let bins = n / 2 + 1;
    let re = ArrayD::from_shape_fn(IxDyn(&[n, bins]), |ix| w[ix[0]] * (2.0 * PI * (ix[0] * ix[1]) as f64 / n as f64).cos());
    let im = ArrayD::from_shape_fn(IxDyn(&[n, bins]), |ix| -w[ix[0]] * (2.0 * PI * (ix[0] * ix[1]) as f64 / n as f64).sin());
    (re, im)
}

/// Complex STFT of `wav[B, L]` as `[B, 2, N/2+1, frames]`, no padding.
pub fn stft_channels(g: &mut Graph, wav: NodeId, scale: StftScale) -> Result<NodeId> {
    let s = g.shape(wav).to_vec();
    if s.len() != 2 {
        return Err(Error::Shape(format!("discriminator input must be [B, L], got {s:?}")));
    }
    if s[1] < scale.fft_size {
        return Err(Error::SignalTooShort { len: s[1], need: scale.fft_size });
    }
    let (b, bins) = (s[0], scale.fft_size / 2 + 1);
    let frames = g.frame(wav, scale.fft_size, scale.hop);
    let n = g.shape(frames)[1];
    let (re_m, im_m) = dft_mats(scale.fft_size);
    let (re_m, im_m) = (g.constant(re_m), g.constant(im_m));
    let re = g.linear(frames, re_m, None);
    let im = g.linear(frames, im_m, None);
    let re = g.reshape(re, &[b, 1, n, bins]);
    let im = g.reshape(im, &[b, 1, n, bins]);
    let both = g.concat(&[re, im], 1);
    Ok(g.permute(both, &[0, 1, 3, 2]))
}

/// Per-scale logit `[B]` and post-activation feature maps.
pub struct ScaleOutput {
    pub logit: NodeId,
    pub features: Vec<NodeId>,
}

pub fn msstft_graph(g: &mut Graph, wav: NodeId, p: Scope, cfg: &ScaleConfig) -> Result<Vec<ScaleOutput>> {
    cfg.scales
        .iter()
        .enumerate()
        .map(|(i, &scale)| {
            let mut h = stft_channels(g, wav, scale)?;
            let mut features = Vec::with_capacity(cfg.n_layers);
            for l in 0..cfg.n_layers {
                let (w, b) = (p.id(&format!("s{i}.conv{l}.w")), p.id(&format!("s{i}.conv{l}.b")));
                h = g.conv2d(h, w, Some(b), cfg.layer_spec(l));
                h = g.leaky_relu(h, LEAK);
                features.push(h);
            }
            let out = g.conv2d(h, p.id(&format!("s{i}.out.w")), Some(p.id(&format!("s{i}.out.b"))), cfg.final_spec());
            let bsz = g.shape(out)[0];
            let flat = g.reshape(out, &[bsz, g.shape(out)[2..].iter().product()]);
            let logit = g.mean_axis(flat, 1);
            let logit = g.reshape(logit, &[bsz]);
            Ok(ScaleOutput { logit, features })
        })
        .collect()
}

/// Values of [`msstft_graph`] for a `[B, L]` waveform batch.
pub struct ScaleValues {
    pub logit: Array1<f64>,
    pub features: Vec<ArrayD<f64>>,
}

pub fn msstft_forward(wav: &Array2<f64>, p: &DiscriminatorParams, cfg: &ScaleConfig) -> Result<Vec<ScaleValues>> {
    let mut g = Graph::new();
    let bound = p.0.bind(&mut g, false);
    let w = g.constant(wav.clone().into_dyn());
    let outs = msstft_graph(&mut g, w, Scope { bound: &bound, prefix: "" }, cfg)?;
    Ok(outs
        .iter()
        .map(|o| ScaleValues {
            logit: g.value(o.logit).clone().into_dimensionality().expect("1-D logit"),
            features: o.features.iter().map(|&f| g.value(f).clone()).collect(),
        })
        .collect())
}

/// Squared logit difference averaged over scales, plus weighted L1 feature matching.
///
/// The logit term is `(1/M) Σ_i mean_b (L_i(gt) − L_i(rec))²`; the feature
/// term is `(1/M) Σ_i (1/N) Σ_l mean |F_l(gt) − F_l(rec)|`.
pub fn perceptual_loss_graph(g: &mut Graph, gt: NodeId, rec: NodeId, p: Scope, cfg: &ScaleConfig) -> Result<NodeId> {
    let a = msstft_graph(g, gt, p, cfg)?;
    let b = msstft_graph(g, rec, p, cfg)?;
    let m = cfg.scales.len() as f64;
    let mut terms = Vec::new();
    for (sa, sb) in a.iter().zip(&b) {
        let d = g.sub(sa.logit, sb.logit);
        let sq = g.square(d);
        let l = g.mean(sq);
        terms.push(g.scale(l, 1.0 / m));
        if cfg.feature_weight > 0.0 {
            for (&fa, &fb) in sa.features.iter().zip(&sb.features) {
                let d = g.sub(fa, fb);
                let ad = g.abs(d);
                let l = g.mean(ad);
                terms.push(g.scale(l, cfg.feature_weight / (m * sa.features.len() as f64)));
            }
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok(total)
}

fn pad_to(x: &Array2<f64>, len: usize) -> Array2<f64> {
    Array2::from_shape_fn((x.nrows(), len), |(b, i)| if i < x.ncols() { x[[b, i]] } else { 0.0 })
}

/// Perceptual loss between two waveform batches; the shorter one is zero-padded.
pub fn perceptual_loss(gt: &Array2<f64>, rec: &Array2<f64>, p: &DiscriminatorParams, cfg: &ScaleConfig) -> Result<f64> {
    if gt.nrows() != rec.nrows() {
        return Err(Error::Shape(format!("perceptual loss batches {} vs {}", gt.nrows(), rec.nrows())));
    }
    let len = gt.ncols().max(rec.ncols());
    let mut g = Graph::new();
    let bound = p.0.bind(&mut g, false);
    let a = g.constant(pad_to(gt, len).into_dyn());
    let b = g.constant(pad_to(rec, len).into_dyn());
    let l = perceptual_loss_graph(&mut g, a, b, Scope { bound: &bound, prefix: "" }, cfg)?;
    Ok(g.item(l))
}

fn bce_terms(g: &mut Graph, logit: NodeId, real: bool) -> NodeId {
    let p = g.sigmoid(logit);
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let q = if real {
        p
    } else {
        let n = g.neg(p);
        g.add_scalar(n, 1.0)
    };
    let l = g.ln(q);
    let m = g.mean(l);
    g.neg(m)
}

/// `−E log D(real) − E log(1 − D(fake))` per scale, averaged over scales.
pub fn discriminator_loss_graph(g: &mut Graph, real: NodeId, fake: NodeId, p: Scope, cfg: &ScaleConfig) -> Result<NodeId> {
    let r = msstft_graph(g, real, p, cfg)?;
    let f = msstft_graph(g, fake, p, cfg)?;
    let m = cfg.scales.len() as f64;
    let mut total = None;
    for (sr, sf) in r.iter().zip(&f) {
        let lr = bce_terms(g, sr.logit, true);
        let lf = bce_terms(g, sf.logit, false);
        let s = g.add(lr, lf);
        let s = g.scale(s, 1.0 / m);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s),
        });
    }
    Ok(total.expect("at least one scale"))
}

pub fn discriminator_loss(real: &Array2<f64>, fake: &Array2<f64>, p: &DiscriminatorParams, cfg: &ScaleConfig) -> Result<f64> {
    let mut g = Graph::new();
    let bound = p.0.bind(&mut g, false);
    let r = g.constant(real.clone().into_dyn());
    let f = g.constant(fake.clone().into_dyn());
    let l = discriminator_loss_graph(&mut g, r, f, Scope { bound: &bound, prefix: "" }, cfg)?;
    let v = g.item(l);
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0, detail: "discriminator loss".into() });
    }
    Ok(v)
}

/// One optimizer step of the discriminator on a real/fake pair; returns the loss before it.
pub fn disc_update(
    params: &mut DiscriminatorParams,
    opt: &mut Adam,
    real: &Array2<f64>,
    fake: &Array2<f64>,
    cfg: &ScaleConfig,
) -> Result<f64> {
    crate::codec::grad_step(&mut params.0, opt, |g, bound| {
        let r = g.constant(real.clone().into_dyn());
        let f = g.constant(fake.clone().into_dyn());
        discriminator_loss_graph(g, r, f, Scope { bound, prefix: "" }, cfg)
    })
}

/// Differentiable inverse STFT of a `[B, 2, F, T]` magnitude/phase node.
///
/// Mirrors [`crate::dsp::istft`] after clamping magnitudes at zero; returns `[B, length]`.
pub fn istft_graph(g: &mut Graph, magphase: NodeId, cfg: &StftConfig, length: usize) -> Result<NodeId> {
    cfg.validate()?;
    let s = g.shape(magphase).to_vec();
    if s.len() != 4 || s[1] != 2 || s[2] != cfg.freq_bins() {
        return Err(Error::Shape(format!("istft input {s:?} for {} bins", cfg.freq_bins())));
    }
    let (b, bins, t) = (s[0], s[2], s[3]);
    let n = cfg.fft_size;
    let pad = n / 2;
    let total = (t - 1) * cfg.hop + n;
    if length + pad > total {
        return Err(Error::Value(format!("{length} samples requested from {t} frames")));
    }
    let mag = g.narrow(magphase, 1, 0, 1);
    let mag = g.relu(mag);
    let ph = g.narrow(magphase, 1, 1, 1);
    let cos = g.cos(ph);
    let sin = g.sin(ph);
    let re = g.mul(mag, cos);
    let im = g.mul(mag, sin);
    let re = g.reshape(re, &[b, bins, t]);
    let im = g.reshape(im, &[b, bins, t]);
    let re = g.permute(re, &[0, 2, 1]);
    let im = g.permute(im, &[0, 2, 1]);
    let w = cfg.analysis_window();
    let weight = |k: usize| if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
    let cm = ArrayD::from_shape_fn(IxDyn(&[bins, n]), |ix| {
        weight(ix[0]) * (2.0 * PI * (ix[0] * ix[1]) as f64 / n as f64).cos() * w[ix[1]] / n as f64
    });
    let sm = ArrayD::from_shape_fn(IxDyn(&[bins, n]), |ix| {
        -weight(ix[0]) * (2.0 * PI * (ix[0] * ix[1]) as f64 / n as f64).sin() * w[ix[1]] / n as f64
    });
    let (cm, sm) = (g.constant(cm), g.constant(sm));
    let fr = g.linear(re, cm, None);
    let fi = g.linear(im, sm, None);
    let frames = g.add(fr, fi);
    let ola = g.overlap_add(frames, cfg.hop, total);
    let mut env = vec![0.0; total];
    for f in 0..t {
        for k in 0..n {
            env[f * cfg.hop + k] += w[k] * w[k];
        }
    }
    let inv = ArrayD::from_shape_fn(IxDyn(&[1, total]), |ix| {
        let e = env[ix[1]];
        if e > 1e-11 { 1.0 / e } else { 0.0 }
    });
    let inv = g.constant(inv);
    let y = g.mul(ola, inv);
    Ok(g.narrow(y, 1, pad, length))
}
