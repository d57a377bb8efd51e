//! Gradient-check instances shared by the gradient tests and the acceptance run.
#![allow(dead_code)]

use ndarray::{Array2, ArrayD, Axis, Ix2, Ix4, IxDyn};
use ndpca_autograd::check::{check_gradients, check_graph, CheckConfig};
use ndpca_autograd::{Bound, Graph, NodeId, ParamStore, Tensor};
use ndpca_core::codec::{decode_graph, encode_graph, ArchConfig, DecoderParams, EncoderParams, Scope};
use ndpca_core::dsp::{magphase_to_waveforms, MagPhaseTensor, StftConfig};
use ndpca_core::enhance::{dsm_loss, score_graph, DsmDraw, DsmWeighting, NetScore, ScoreNetConfig, ScoreNetParams, SdeParams};
use ndpca_core::losses::{self, graph as lg};
use ndpca_core::percept::{
    discriminator_loss, discriminator_loss_graph, istft_graph, perceptual_loss, perceptual_loss_graph, DiscriminatorParams,
    ScaleConfig, StftScale,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const INSTANCES: u64 = 5;
pub const TOL: f64 = 1e-4;
pub const DISC_TOL: f64 = 1e-3;

/// Worst relative gradient error of one family over its instances.
#[derive(Debug, Clone)]
pub struct GradFamily {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradFamily {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES as usize && self.max_rel_err < self.tol
    }
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.sample(StandardNormal))
}

fn cfg(seed: u64, max_coords: usize) -> CheckConfig {
    CheckConfig { eps: 1e-6, max_coords, seed }
}

/// Scalar `Σ w ⊙ x` with fixed random `w`, so vector outputs get a generic cotangent.
fn project(g: &mut Graph, x: NodeId, w: &Tensor) -> NodeId {
    let c = g.constant(w.clone());
    let p = g.mul(x, c);
    g.sum(p)
}

fn bound_from(names: &[String], ids: &[NodeId]) -> Bound {
    names.iter().cloned().zip(ids.iter().copied()).collect()
}

/// Parameters as check inputs, jittered so no activation sits exactly on a
/// ReLU kink (zero-initialized biases put dead units at exactly zero).
fn store_inputs(store: &ParamStore, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<Tensor>) {
    store.iter().map(|(k, v)| (k.clone(), v + &(randn(rng, v.shape()) * 0.1))).unzip()
}

fn store_from(names: &[String], ts: &[Tensor]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in names.iter().zip(ts) {
        s.insert(n.clone(), t.clone());
    }
    s
}

fn family(name: &'static str, tol: f64, errs: impl Iterator<Item = f64>) -> GradFamily {
    let errs: Vec<f64> = errs.collect();
    GradFamily { name, instances: errs.len(), max_rel_err: errs.iter().copied().fold(0.0, f64::max), tol }
}

pub fn tiny_arch(in_channels: usize, latent_dim: usize) -> ArchConfig {
    ArchConfig {
        freq_bins: 5,
        frames: 4,
        in_channels,
        freq_proj_hidden: 6,
        freq_proj_out: 3,
        n_res_blocks: 1,
        latent_dim,
        conv_channels: 3,
        kernel: 3,
        decoder_channels: 2,
    }
}

pub fn tiny_disc() -> ScaleConfig {
    ScaleConfig {
        scales: vec![StftScale { fft_size: 8, hop: 2 }, StftScale { fft_size: 16, hop: 4 }],
        channels: 2,
        n_layers: 2,
        ..ScaleConfig::default()
    }
}

pub fn mse_family() -> GradFamily {
    family(
        "mse",
        TOL,
        (0..INSTANCES).map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let xs = [randn(&mut rng, &[2, 2, 3, 4]), randn(&mut rng, &[2, 2, 3, 4])];
            check_gradients(&xs, |g, ids| lg::mse(g, ids[0], ids[1]), |xs| losses::mse_loss_view(xs[0].view(), xs[1].view()).unwrap(), cfg(s, 0))
                .max_rel_error()
        }),
    )
}

pub fn cosine_family() -> GradFamily {
    family(
        "cosine",
        TOL,
        (0..INSTANCES).map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + s);
            let n_src = 2 + s as usize % 3;
            let xs: Vec<Tensor> = (0..n_src).map(|_| randn(&mut rng, &[3, 4])).collect();
            check_gradients(
                &xs,
                |g, ids| lg::cosine(g, ids),
                |xs| {
                    let views: Vec<_> = xs.iter().map(|x| x.view().into_dimensionality::<Ix2>().unwrap()).collect();
                    losses::cosine_correlation_loss(&views).unwrap()
                },
                cfg(s, 0),
            )
            .max_rel_error()
        }),
    )
}

pub fn snr_family() -> GradFamily {
    family(
        "spectral_snr",
        TOL,
        (0..INSTANCES).map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(20 + s);
            let xs = [randn(&mut rng, &[2, 2, 3, 3]), randn(&mut rng, &[2, 2, 3, 3])];
            check_gradients(
                &xs,
                |g, ids| lg::spectral_snr(g, ids[0], ids[1]),
                |xs| losses::spectral_snr_view(xs[0].view(), xs[1].view()).unwrap(),
                cfg(s, 0),
            )
            .max_rel_error()
        }),
    )
}

pub fn psnr_family() -> GradFamily {
    family(
        "psnr",
        TOL,
        (0..INSTANCES).map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(30 + s);
            let xs = [randn(&mut rng, &[2, 2, 3, 3]), randn(&mut rng, &[2, 2, 3, 3])];
            let peak = 1.0 + s as f64;
            check_gradients(
                &xs,
                |g, ids| lg::psnr_loss(g, ids[0], ids[1], peak),
                |xs| {
                    let a = MagPhaseTensor { data: xs[0].clone().into_dimensionality::<Ix4>().unwrap() };
                    let b = MagPhaseTensor { data: xs[1].clone().into_dimensionality::<Ix4>().unwrap() };
                    losses::psnr_loss(&a, &b, peak).unwrap()
                },
                cfg(s, 0),
            )
            .max_rel_error()
        }),
    )
}

pub fn nuclear_family() -> GradFamily {
    family(
        "nuclear",
        TOL,
        (0..INSTANCES).map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + s);
            let shape = [[5, 3], [3, 5], [4, 4], [6, 2], [2, 6]][s as usize];
            let xs = [randn(&mut rng, &shape)];
            check_gradients(
                &xs,
                |g, ids| lg::nuclear(g, ids[0]),
                |xs| losses::nuclear_norm_penalty(xs[0].view().into_dimensionality::<Ix2>().unwrap()),
                cfg(s, 0),
            )
            .max_rel_error()
        }),
    )
}

pub fn encoder_family() -> GradFamily {
    family(
        "encoder",
        TOL,
        (0..INSTANCES).map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + s);
            let arch = tiny_arch(2 + 2 * (s as usize % 2), 4);
            let params = EncoderParams::init(&arch, &mut rng);
            let (names, ts) = store_inputs(&params.0, &mut rng);
            let x = randn(&mut rng, &[2, arch.in_channels, arch.freq_bins, arch.frames]);
            let w = randn(&mut rng, &[2, arch.latent_dim]);
            let mut inputs = vec![x];
            inputs.extend(ts);
            check_graph(
                &inputs,
                |g, ids| {
                    let bound = bound_from(&names, &ids[1..]);
                    let z = encode_graph(g, ids[0], Scope { bound: &bound, prefix: "" }, &arch).unwrap();
                    project(g, z, &w)
                },
                cfg(s, 6),
            )
            .max_rel_error()
        }),
    )
}

pub fn decoder_family() -> GradFamily {
    family(
        "decoder",
        TOL,
        (0..INSTANCES).map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(60 + s);
            let arch = tiny_arch(2, 3 + s as usize % 3);
            let params = DecoderParams::init(&arch, &mut rng);
            let (names, ts) = store_inputs(&params.0, &mut rng);
            let z = randn(&mut rng, &[2, arch.latent_dim]);
            let w = randn(&mut rng, &[2, 2, arch.freq_bins, arch.frames]);
            let mut inputs = vec![z];
            inputs.extend(ts);
            check_graph(
                &inputs,
                |g, ids| {
                    let bound = bound_from(&names, &ids[1..]);
                    let y = decode_graph(g, ids[0], Scope { bound: &bound, prefix: "" }, &arch).unwrap();
                    project(g, y, &w)
                },
                cfg(s, 6),
            )
            .max_rel_error()
        }),
    )
}

/// Discriminator loss against its parameters and both waveform batches.
pub fn discriminator_family() -> GradFamily {
    let dcfg = tiny_disc();
    family(
        "discriminator",
        DISC_TOL,
        (0..INSTANCES).map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(70 + s);
            let params = DiscriminatorParams::init(&dcfg, 70 + s).unwrap();
            let (names, ts) = store_inputs(&params.0, &mut rng);
            let mut inputs = vec![randn(&mut rng, &[2, 32]), randn(&mut rng, &[2, 32])];
            inputs.extend(ts);
            check_gradients(
                &inputs,
                |g, ids| {
                    let bound = bound_from(&names, &ids[2..]);
                    discriminator_loss_graph(g, ids[0], ids[1], Scope { bound: &bound, prefix: "" }, &dcfg).unwrap()
                },
                |xs| {
                    let p = DiscriminatorParams(store_from(&names, &xs[2..]));
                    let a: Array2<f64> = xs[0].clone().into_dimensionality().unwrap();
                    let b: Array2<f64> = xs[1].clone().into_dimensionality().unwrap();
                    discriminator_loss(&a, &b, &p, &dcfg).unwrap()
                },
                cfg(s, 8),
            )
            .max_rel_error()
        }),
    )
}

/// Perceptual loss against the reconstruction and the discriminator weights.
pub fn perceptual_family() -> GradFamily {
    let dcfg = tiny_disc();
    family(
        "perceptual",
        DISC_TOL,
        (0..INSTANCES).map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(80 + s);
            let params = DiscriminatorParams::init(&dcfg, 80 + s).unwrap();
            let (names, ts) = store_inputs(&params.0, &mut rng);
            let mut inputs = vec![randn(&mut rng, &[2, 32]), randn(&mut rng, &[2, 32])];
            inputs.extend(ts);
            check_gradients(
                &inputs,
                |g, ids| {
                    let bound = bound_from(&names, &ids[2..]);
                    perceptual_loss_graph(g, ids[0], ids[1], Scope { bound: &bound, prefix: "" }, &dcfg).unwrap()
                },
                |xs| {
                    let p = DiscriminatorParams(store_from(&names, &xs[2..]));
                    let a: Array2<f64> = xs[0].clone().into_dimensionality().unwrap();
                    let b: Array2<f64> = xs[1].clone().into_dimensionality().unwrap();
                    perceptual_loss(&a, &b, &p, &dcfg).unwrap()
                },
                cfg(s, 8),
            )
            .max_rel_error()
        }),
    )
}

/// Score-matching loss against clean input, conditioning and score-net weights.
pub fn dsm_family() -> GradFamily {
    let sde = SdeParams::default();
    let scfg = ScoreNetConfig { hidden: 3, embed_dim: 4 };
    family(
        "score_matching",
        TOL,
        (0..INSTANCES).map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(90 + s);
            let params = ScoreNetParams::init(&scfg, &mut rng);
            let (names, ts) = store_inputs(&params.0, &mut rng);
            let shape = [2, 2, 3, 4];
            let draw = DsmDraw::sample(&mut rng, &shape, &sde);
            let weighting = if s % 2 == 0 { DsmWeighting::VarianceWeighted } else { DsmWeighting::Unweighted };
            let mut inputs = vec![randn(&mut rng, &shape), randn(&mut rng, &shape)];
            inputs.extend(ts);
            check_gradients(
                &inputs,
                |g, ids| {
                    let bound = bound_from(&names, &ids[2..]);
                    let p = Scope { bound: &bound, prefix: "" };
                    ndpca_core::enhance::dsm_loss_graph(g, ids[0], ids[1], &draw, &sde, weighting, |g, xt, y, ts| {
                        score_graph(g, xt, y, ts, p, &scfg, &sde)
                    })
                    .unwrap()
                },
                |xs| {
                    let p = ScoreNetParams(store_from(&names, &xs[2..]));
                    let model = NetScore { params: &p, cfg: scfg, sde };
                    dsm_loss(&xs[0], &xs[1], &model, &draw, &sde, weighting).unwrap()
                },
                cfg(s, 8),
            )
            .max_rel_error()
        }),
    )
}

/// Differentiable inverse STFT against the value-path inverse STFT.
pub fn istft_family() -> GradFamily {
    let stft = StftConfig { fft_size: 8, hop: 2, window: 8, sample_rate: 16_000 };
    family(
        "istft",
        TOL,
        (0..INSTANCES).map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
            let frames = 5;
            let len = stft.samples_for(frames);
            let mut x = randn(&mut rng, &[2, 2, stft.freq_bins(), frames]);
            x.index_axis_mut(Axis(1), 0).mapv_inplace(|v| 0.5 + v.abs());
            let w = randn(&mut rng, &[2, len]);
            check_gradients(
                &[x],
                |g, ids| {
                    let y = istft_graph(g, ids[0], &stft, len).unwrap();
                    project(g, y, &w)
                },
                |xs| {
                    let t = MagPhaseTensor { data: xs[0].clone().into_dimensionality().unwrap() };
                    let wavs = magphase_to_waveforms(&t, &stft, Some(len)).unwrap();
                    wavs.iter().enumerate().map(|(b, wv)| wv.samples.iter().zip(w.index_axis(Axis(0), b)).map(|(a, c)| a * c).sum::<f64>()).sum()
                },
                cfg(s, 0),
            )
            .max_rel_error()
        }),
    )
}

pub fn all_families() -> Vec<GradFamily> {
    vec![
        mse_family(),
        cosine_family(),
        snr_family(),
        psnr_family(),
        nuclear_family(),
        encoder_family(),
        decoder_family(),
        discriminator_family(),
        perceptual_family(),
        dsm_family(),
        istft_family(),
    ]
}
