//! Score-based enhancement of decoded spectrograms.
//!
//! Forward process, drifting the clean spectrogram `x` toward the decoded one `y`:
//! `dx = θ(y − x)dt + σ(t)dw` with `σ(t) = σ_min·r^t·√(2 ln r)`, `r = σ_max/σ_min`.
//! Its kernel is Gaussian with mean `e^{−θt}x₀ + (1 − e^{−θt})y` and variance
//! `σ_min²·ln r·(r^{2t} − e^{−2θt})/(θ + ln r)`.
//!
//! The score network approximates `∇ₓ log p(x_t | x₀, y)` and is trained by
//! denoising score matching against `−z/std`.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use ndpca_autograd::{he_normal, Conv2dSpec, Graph, NodeId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::Scope;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdeParams {
    pub theta: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub n_steps: usize,
    /// Smallest diffusion time used by training and sampling.
    pub t_eps: f64,
}

impl Default for SdeParams {
    fn default() -> Self {
        Self { theta: 1.5, sigma_min: 0.05, sigma_max: 0.5, n_steps: 30, t_eps: 1e-3 }
    }
}

impl SdeParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.theta > 0.0
            && self.sigma_min > 0.0
            && self.sigma_min < self.sigma_max
            && self.sigma_max.is_finite()
            && self.n_steps >= 1
            && self.t_eps > 0.0
            && self.t_eps < 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid SDE parameters {self:?}")));
        }
        Ok(())
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    /// Weight of `x₀` in the kernel mean.
    pub fn mean_coeff(&self, t: f64) -> f64 {
        (-self.theta * t).exp()
    }

    /// Closed-form kernel variance at time `t ≥ 0`.
    pub fn variance(&self, t: f64) -> f64 {
        let lr = self.log_ratio();
        let growth = (2.0 * lr * t).exp();
        let decay = (-2.0 * self.theta * t).exp();
        self.sigma_min.powi(2) * lr * (growth - decay) / (self.theta + lr)
    }

    pub fn std(&self, t: f64) -> f64 {
        self.variance(t).sqrt()
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Value(format!("diffusion time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Diffusion coefficient `σ(t)`.
pub fn noise_schedule(t: f64, p: &SdeParams) -> Result<f64> {
    check_time(t)?;
    let lr = p.log_ratio();
    Ok(p.sigma_min * (lr * t).exp() * (2.0 * lr).sqrt())
}

/// Mean and standard deviation of `x_t` given `x₀` and `y`.
pub fn perturbation_kernel(x0: &ArrayD<f64>, y: &ArrayD<f64>, t: f64, p: &SdeParams) -> Result<(ArrayD<f64>, f64)> {
    if x0.shape() != y.shape() {
        return Err(Error::Shape(format!("kernel operands differ: {:?} vs {:?}", x0.shape(), y.shape())));
    }
    if t < 0.0 || !t.is_finite() {
        return Err(Error::Value(format!("diffusion time {t} must be finite and nonnegative")));
    }
    let a = p.mean_coeff(t);
    Ok((x0 * a + y * (1.0 - a), p.std(t)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreNetConfig {
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        Self { hidden: 16, embed_dim: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetParams(pub ParamStore);

impl ScoreNetParams {
    /// Conv stack over `[x_t, y]` (4 channels) with an additive time embedding.
    pub fn init(cfg: &ScoreNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden;
        let mut s = ParamStore::new();
        let g = std::f64::consts::SQRT_2;
        s.insert("in.w", he_normal(rng, &[h, 4, 3, 3], 36, g));
        s.insert("in.b", Tensor::zeros(vec![h]));
        s.insert("temb.w", he_normal(rng, &[cfg.embed_dim, h], cfg.embed_dim, 1.0));
        s.insert("temb.b", Tensor::zeros(vec![h]));
        s.insert("mid.w", he_normal(rng, &[h, h, 3, 3], h * 9, g));
        s.insert("mid.b", Tensor::zeros(vec![h]));
        s.insert("out.w", he_normal(rng, &[2, h, 3, 3], h * 9, 0.1));
        s.insert("out.b", Tensor::zeros(vec![2]));
        Self(s)
    }
}

/// Sinusoidal features of `t`, one row per entry: `[sin(1000 t ω_i), cos(1000 t ω_i)]`.
pub fn time_embedding(ts: &[f64], dim: usize) -> Array2<f64> {
    let half = (dim / 2).max(1);
    Array2::from_shape_fn((ts.len(), dim), |(b, j)| {
        let i = j % half;
        let w = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let a = 1000.0 * ts[b] * w;
        if j < half { a.sin() } else { a.cos() }
    })
}

/// Score estimate for `x_t` and `y` of shape `[B, 2, F, T]`, one time per batch row.
///
/// The network output is divided by the kernel std, so a unit-scale output
/// corresponds to the `−z/std` target.
pub fn score_graph(
    g: &mut Graph,
    xt: NodeId,
    y: NodeId,
    ts: &[f64],
    p: Scope,
    cfg: &ScoreNetConfig,
    sde: &SdeParams,
) -> Result<NodeId> {
    let s = g.shape(xt).to_vec();
    if s.len() != 4 || s[1] != 2 || g.shape(y) != s.as_slice() || ts.len() != s[0] {
        return Err(Error::Shape(format!("score net input {s:?} with y {:?} and {} times", g.shape(y), ts.len())));
    }
    let b = s[0];
    let same = Conv2dSpec { padding: (1, 1), ..Conv2dSpec::default() };
    let inp = g.concat(&[xt, y], 1);
    let h = g.conv2d(inp, p.id("in.w"), Some(p.id("in.b")), same);
    let emb = g.constant(time_embedding(ts, cfg.embed_dim).into_dyn());
    let temb = g.linear(emb, p.id("temb.w"), Some(p.id("temb.b")));
    let temb = g.reshape(temb, &[b, cfg.hidden, 1, 1]);
    let h = g.add(h, temb);
    let h = g.relu(h);
    let h = g.conv2d(h, p.id("mid.w"), Some(p.id("mid.b")), same);
    let h = g.relu(h);
    let out = g.conv2d(h, p.id("out.w"), Some(p.id("out.b")), same);
    let stds = ArrayD::from_shape_fn(IxDyn(&[b, 1, 1, 1]), |ix| sde.std(ts[ix[0]]));
    let stds = g.constant(stds);
    Ok(g.div(out, stds))
}

/// Anything that can evaluate a score field at a single diffusion time.
pub trait ScoreModel {
    fn score(&self, x: &ArrayD<f64>, y: &ArrayD<f64>, t: f64) -> Result<ArrayD<f64>>;
}

/// A trained score network.
pub struct NetScore<'a> {
    pub params: &'a ScoreNetParams,
    pub cfg: ScoreNetConfig,
    pub sde: SdeParams,
}

impl ScoreModel for NetScore<'_> {
    fn score(&self, x: &ArrayD<f64>, y: &ArrayD<f64>, t: f64) -> Result<ArrayD<f64>> {
        let mut g = Graph::new();
        let bound = self.params.0.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let yi = g.constant(y.clone());
        let ts = vec![t; x.shape()[0]];
        let s = score_graph(&mut g, xi, yi, &ts, Scope { bound: &bound, prefix: "" }, &self.cfg, &self.sde)?;
        Ok(g.value(s).clone())
    }
}

/// Exact score of the kernel around a known `x₀`: `−(x − mean)/var`.
pub struct KernelScore {
    pub x0: ArrayD<f64>,
    pub sde: SdeParams,
}

impl ScoreModel for KernelScore {
    fn score(&self, x: &ArrayD<f64>, y: &ArrayD<f64>, t: f64) -> Result<ArrayD<f64>> {
        let (mean, std) = perturbation_kernel(&self.x0, y, t, &self.sde)?;
        Ok((&mean - x) / (std * std))
    }
}

/// Weighting of the score-matching residual across diffusion times.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DsmWeighting {
    /// `(s + z/std)²`.
    Unweighted,
    /// `std²·(s + z/std)² = (std·s + z)²`, bounded at small `t`.
    #[default]
    VarianceWeighted,
}

/// One draw of diffusion times and Gaussian noise for a batch.
#[derive(Clone, Debug)]
pub struct DsmDraw {
    pub ts: Vec<f64>,
    pub z: ArrayD<f64>,
}

impl DsmDraw {
    /// `t ~ U(t_eps, 1)` per batch row and `z ~ N(0, I)` shaped like `shape`.
    pub fn sample<R: Rng>(rng: &mut R, shape: &[usize], sde: &SdeParams) -> Self {
        let ts = (0..shape[0]).map(|_| rng.random_range(sde.t_eps..1.0)).collect();
        let z = ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.sample(StandardNormal));
        Self { ts, z }
    }
}

/// Score-matching loss in the graph; `score` maps `(x_t, y, times)` to a score node.
///
/// `y` may carry gradient back into whatever produced it. The loss is the
/// mean over elements of the weighted residual.
pub fn dsm_loss_graph<F>(
    g: &mut Graph,
    x0: NodeId,
    y: NodeId,
    draw: &DsmDraw,
    sde: &SdeParams,
    weighting: DsmWeighting,
    score: F,
) -> Result<NodeId>
where
    F: FnOnce(&mut Graph, NodeId, NodeId, &[f64]) -> Result<NodeId>,
{
    let shape = g.shape(x0).to_vec();
    if g.shape(y) != shape.as_slice() || draw.z.shape() != shape.as_slice() || draw.ts.len() != shape[0] {
        return Err(Error::Shape(format!("score matching on {shape:?} with y {:?} and noise {:?}", g.shape(y), draw.z.shape())));
    }
    let per_row = |f: &dyn Fn(f64) -> f64| {
        let mut s = vec![1; shape.len()];
        s[0] = shape[0];
        ArrayD::from_shape_fn(IxDyn(&s), |ix| f(draw.ts[ix[0]]))
    };
    let a = g.constant(per_row(&|t| sde.mean_coeff(t)));
    let one_minus_a = g.constant(per_row(&|t| 1.0 - sde.mean_coeff(t)));
    let std = per_row(&|t| sde.std(t));
    let noise = g.constant(&draw.z * &std);
    let m0 = g.mul(x0, a);
    let m1 = g.mul(y, one_minus_a);
    let mean = g.add(m0, m1);
    let xt = g.add(mean, noise);
    let s = score(g, xt, y, &draw.ts)?;
    let resid = match weighting {
        DsmWeighting::Unweighted => {
            let target = g.constant(&draw.z / &std);
            g.add(s, target)
        }
        DsmWeighting::VarianceWeighted => {
            let sd = g.constant(std);
            let scaled = g.mul(s, sd);
            let z = g.constant(draw.z.clone());
            g.add(scaled, z)
        }
    };
    let sq = g.square(resid);
    Ok(g.mean(sq))
}

/// Value of the score-matching loss for a given score model and draw.
pub fn dsm_loss(
    x0: &ArrayD<f64>,
    y: &ArrayD<f64>,
    model: &dyn ScoreModel,
    draw: &DsmDraw,
    sde: &SdeParams,
    weighting: DsmWeighting,
) -> Result<f64> {
    if x0.shape() != y.shape() || draw.z.shape() != x0.shape() || draw.ts.len() != x0.shape()[0] {
        return Err(Error::Shape("score matching operands disagree".into()));
    }
    let mut total = 0.0;
    for (b, &t) in draw.ts.iter().enumerate() {
        let x0b = x0.index_axis(Axis(0), b).insert_axis(Axis(0)).to_owned();
        let yb = y.index_axis(Axis(0), b).insert_axis(Axis(0)).to_owned();
        let zb = draw.z.index_axis(Axis(0), b).insert_axis(Axis(0)).to_owned();
        let (mean, std) = perturbation_kernel(&x0b, &yb, t, sde)?;
        let xt = &mean + &(&zb * std);
        let s = model.score(&xt, &yb, t)?;
        let r = match weighting {
            DsmWeighting::Unweighted => &s + &(&zb / std),
            DsmWeighting::VarianceWeighted => &s * std + &zb,
        };
        total += r.iter().map(|v| v * v).sum::<f64>();
    }
    let value = total / x0.len().max(1) as f64;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0, detail: "score-matching loss".into() });
    }
    Ok(value)
}

/// Reverse-time Euler–Maruyama from `t = 1` to `t_eps`, started at `y + std(1)·z`.
///
/// Batch row `b` draws its noise from stream `b` of a generator seeded with
/// `seed`. The last step returns the drift-only mean.
pub fn reverse_sample(y: &ArrayD<f64>, model: &dyn ScoreModel, p: &SdeParams, seed: u64) -> Result<ArrayD<f64>> {
    p.validate()?;
    if y.ndim() == 0 || y.shape()[0] == 0 {
        return Err(Error::Shape("empty batch for sampling".into()));
    }
    let batch = y.shape()[0];
    let mut rngs: Vec<ChaCha8Rng> = (0..batch)
        .map(|b| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(b as u64);
            r
        })
        .collect();
    let mut noise = |shape: &[usize]| -> ArrayD<f64> {
        let mut z = ArrayD::zeros(IxDyn(shape));
        for (b, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|_| rngs[b].sample(StandardNormal));
        }
        z
    };
    let mut x = y + &(noise(y.shape()) * p.std(1.0));
    let dt = (1.0 - p.t_eps) / p.n_steps as f64;
    for i in 0..p.n_steps {
        let t = 1.0 - i as f64 * dt;
        let gt = noise_schedule(t, p)?;
        let s = model.score(&x, y, t)?;
        let drift = (y - &x) * p.theta - &s * (gt * gt);
        x = &x - &(drift * dt);
        if i + 1 < p.n_steps {
            x = &x + &(noise(y.shape()) * (gt * dt.sqrt()));
        }
    }
    Ok(x)
}
