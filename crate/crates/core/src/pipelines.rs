//! End-to-end pipelines: source groups → encoders → compression → shared decoder.
//!
//! Three groupings of the four microphones are supported. A joint encoder sees
//! every source and is compressed with one PCA; split encoders are compressed
//! either with the distributed selector or with an equal per-group budget.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, Array4, ArrayD, ArrayView1, ArrayView2, Axis, Ix2, Ix4};
use ndpca_autograd::{Bound, Graph, NodeId, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{source_bitrate, ChannelParams};
use crate::codec::{decode_graph, encode_graph, ArchConfig, DecoderParams, EncoderParams, Scope};
use crate::data::{Batch, SpectralCorpus};
use crate::dsp::{MagPhaseTensor, StftConfig};
use crate::enhance::{dsm_loss_graph, score_graph, DsmDraw, DsmWeighting, ScoreNetConfig, ScoreNetParams, SdeParams};
use crate::error::{Error, Result};
use crate::losses::{self, composite_loss, LossBreakdown, LossTerms, LossWeights};
use crate::ndpca::{BandwidthAllocation, CompressedBlock, DistributedPca, PcaBasis};
use crate::percept::{istft_graph, perceptual_loss_graph, DiscriminatorParams, ScaleConfig};

pub const N_SOURCES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Grouping {
    E1D1,
    E2D1,
    E4D1,
}

impl Grouping {
    pub const ALL: [Grouping; 3] = [Grouping::E1D1, Grouping::E2D1, Grouping::E4D1];

    pub fn default_groups(self) -> Vec<Vec<usize>> {
        match self {
            Grouping::E1D1 => vec![vec![0, 1, 2, 3]],
            Grouping::E2D1 => vec![vec![0, 1], vec![2, 3]],
            Grouping::E4D1 => vec![vec![0], vec![1], vec![2], vec![3]],
        }
    }

    pub fn n_groups(self) -> usize {
        match self {
            Grouping::E1D1 => 1,
            Grouping::E2D1 => 2,
            Grouping::E4D1 => 4,
        }
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grouping::E1D1 => "E1D1",
            Grouping::E2D1 => "E2D1",
            Grouping::E4D1 => "E4D1",
        })
    }
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "E1D1" => Ok(Grouping::E1D1),
            "E2D1" => Ok(Grouping::E2D1),
            "E4D1" => Ok(Grouping::E4D1),
            _ => Err(Error::Config(format!("unknown grouping {s:?}, expected E1D1, E2D1 or E4D1"))),
        }
    }
}

/// How the latent budget is spent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Compression {
    /// One PCA over the single joint latent.
    Joint,
    /// Global top-B singular values across per-group bases.
    Distributed,
    /// `⌊B/G⌋` leading components per group, remainder to the lowest ids.
    EqualSplit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PipelineVariant {
    pub grouping: Grouping,
    /// Ignored for a joint encoder.
    pub use_ndpca: bool,
}

impl PipelineVariant {
    pub fn new(grouping: Grouping, use_ndpca: bool) -> Self {
        Self { grouping, use_ndpca }
    }

    pub fn compression(&self) -> Compression {
        match (self.grouping, self.use_ndpca) {
            (Grouping::E1D1, _) => Compression::Joint,
            (_, true) => Compression::Distributed,
            (_, false) => Compression::EqualSplit,
        }
    }

    /// Short label such as `E4D1-ndpca`, usable in file names.
    pub fn label(&self) -> String {
        match self.compression() {
            Compression::Joint => "E1D1-joint".to_string(),
            Compression::Distributed => format!("{}-ndpca", self.grouping),
            Compression::EqualSplit => format!("{}-naive", self.grouping),
        }
    }
}

/// Pipeline section of an experiment file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub variant: Grouping,
    pub use_ndpca: bool,
    /// Overrides the grouping's default source partition.
    pub groups: Option<Vec<Vec<usize>>>,
    /// `latent_dim` here is the total width shared by all encoders.
    pub arch: ArchConfig,
    pub channel: ChannelParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variant: Grouping::E4D1,
            use_ndpca: true,
            groups: None,
            arch: ArchConfig::desk(),
            channel: ChannelParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn pipeline_variant(&self) -> PipelineVariant {
        PipelineVariant::new(self.variant, self.use_ndpca)
    }

    /// The source partition, checked to cover each of the four sources once.
    pub fn resolved_groups(&self) -> Result<Vec<Vec<usize>>> {
        let groups = self.groups.clone().unwrap_or_else(|| self.variant.default_groups());
        if groups.len() != self.variant.n_groups() {
            return Err(Error::Config(format!("{} needs {} groups, got {}", self.variant, self.variant.n_groups(), groups.len())));
        }
        let mut seen = [false; N_SOURCES];
        for &s in groups.iter().flatten() {
            if s >= N_SOURCES || std::mem::replace(&mut seen[s], true) {
                return Err(Error::Config(format!("groups {groups:?} do not partition sources 0..{N_SOURCES}")));
            }
        }
        if seen.iter().any(|s| !s) || groups.iter().any(Vec::is_empty) {
            return Err(Error::Config(format!("groups {groups:?} do not partition sources 0..{N_SOURCES}")));
        }
        Ok(groups)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.channel.validate()?;
        let g = self.resolved_groups()?.len();
        if self.arch.latent_dim % g != 0 {
            return Err(Error::Config(format!("latent width {} not divisible among {g} encoders", self.arch.latent_dim)));
        }
        Ok(())
    }
}

/// `⌊B/G⌋` components per group with the remainder on the lowest ids.
///
/// A group narrower than its share passes the excess to the next group with room.
pub fn equal_split(widths: &[usize], budget: usize) -> Result<BandwidthAllocation> {
    let total: usize = widths.iter().sum();
    if budget > total {
        return Err(Error::BudgetOutOfRange { budget, max: total });
    }
    let g = widths.len().max(1);
    let mut per: Vec<usize> = (0..widths.len()).map(|i| budget / g + usize::from(i < budget % g)).collect();
    let mut spill = 0;
    for (k, &w) in per.iter_mut().zip(widths) {
        if *k > w {
            spill += *k - w;
            *k = w;
        }
    }
    for (k, &w) in per.iter_mut().zip(widths) {
        let take = (w - *k).min(spill);
        *k += take;
        spill -= take;
    }
    Ok(BandwidthAllocation::new(per))
}

/// Equal-budget local truncation of per-group `N × v_g` latents; returns `N × Σv_g`.
pub fn naive_split_compress(latents: &[ArrayView2<f64>], bases: &[PcaBasis], budget: usize) -> Result<Array2<f64>> {
    let widths: Vec<usize> = bases.iter().map(PcaBasis::dim).collect();
    let alloc = equal_split(&widths, budget)?;
    DistributedPca { bases: bases.to_vec() }.round_trip(latents, &alloc)
}

/// Enhancer and discriminator bound into a graph, for the task-aware terms.
pub struct TaskGraph<'a> {
    pub score: Scope<'a>,
    pub score_cfg: &'a ScoreNetConfig,
    pub sde: &'a SdeParams,
    pub weighting: DsmWeighting,
    pub draw: &'a DsmDraw,
    pub disc: Scope<'a>,
    pub disc_cfg: &'a ScaleConfig,
    pub stft: &'a StftConfig,
}

/// Nodes of one objective evaluation.
pub struct LossGraph {
    pub total: NodeId,
    /// In `TERM_NAMES` order; `None` when a term was not built.
    pub terms: [Option<NodeId>; 7],
    pub latents: Vec<NodeId>,
    pub recon: NodeId,
}

impl LossGraph {
    pub fn breakdown(&self, g: &Graph, w: &LossWeights) -> Result<LossBreakdown> {
        let v = self.terms.map(|t| t.map_or(0.0, |id| g.item(id)));
        let terms = LossTerms { mse: v[0], cos: v[1], snr: v[2], psnr: v[3], nuclear: v[4], task: v[5], perceptual: v[6] };
        composite_loss(terms, w)
    }
}

/// Trained enhancer and discriminator for evaluation outside a training graph.
pub struct TaskModules<'a> {
    pub score: &'a ScoreNetParams,
    pub score_cfg: ScoreNetConfig,
    pub sde: SdeParams,
    pub weighting: DsmWeighting,
    pub disc: &'a DiscriminatorParams,
    pub disc_cfg: ScaleConfig,
    pub stft: StftConfig,
    /// Seeds the score-matching draw, so every budget sees the same noise.
    pub seed: u64,
}

/// Evaluation settings for [`run_pipeline`].
#[derive(Default)]
pub struct EvalContext<'a> {
    pub weights: LossWeights,
    pub task: Option<TaskModules<'a>>,
}

/// Dataset-level accumulators alongside the per-batch PSNR.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub psnr_db: f64,
    /// Σ (gt − rec)² over every element of the batch.
    pub sq_err_sum: f64,
    pub n_elems: usize,
    /// Largest clean magnitude in the batch.
    pub peak: f64,
    pub allocation: BandwidthAllocation,
    /// Bits/s needed for the transmitted coefficients.
    pub bitrate_bps: f64,
}

pub struct RunOutput {
    pub recon: MagPhaseTensor,
    pub breakdown: LossBreakdown,
    pub metrics: RunMetrics,
}

/// Encoders, shared decoder and the fitted compression stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub variant: PipelineVariant,
    pub groups: Vec<Vec<usize>>,
    pub encoders: Vec<ArchConfig>,
    pub decoder: ArchConfig,
    pub channel: ChannelParams,
    /// Encoder `g` under `enc{g}.`, the decoder under `dec.`.
    pub params: ParamStore,
    /// Fitted per-group bases; `None` until [`Pipeline::fit_pca`].
    pub pca: Option<DistributedPca>,
}

/// Pipeline for a variant with its default groups.
pub fn build_pipeline(v: PipelineVariant, arch: &ArchConfig, ch: ChannelParams, seed: u64) -> Result<Pipeline> {
    let cfg = PipelineConfig { variant: v.grouping, use_ndpca: v.use_ndpca, groups: None, arch: arch.clone(), channel: ch };
    Pipeline::from_config(&cfg, seed)
}

/// Encode, compress to exactly `budget` coefficients, decode and score.
pub fn run_pipeline(p: &Pipeline, batch: &Batch, budget: usize, ctx: &EvalContext) -> Result<RunOutput> {
    p.run(batch, budget, ctx)
}

pub fn encoder_prefix(g: usize) -> String {
    format!("enc{g}.")
}

pub const DECODER_PREFIX: &str = "dec.";

impl Pipeline {
    pub fn from_config(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let groups = cfg.resolved_groups()?;
        let width = cfg.arch.latent_dim / groups.len();
        let encoders: Vec<ArchConfig> = groups.iter().map(|g| cfg.arch.with_io(2 * g.len(), width)).collect();
        let decoder = cfg.arch.with_io(2, cfg.arch.latent_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (g, e) in encoders.iter().enumerate() {
            params.extend_prefixed(&encoder_prefix(g), &EncoderParams::init(e, &mut rng).0);
        }
        params.extend_prefixed(DECODER_PREFIX, &DecoderParams::init(&decoder, &mut rng).0);
        Ok(Self { variant: cfg.pipeline_variant(), groups, encoders, decoder, channel: cfg.channel, params, pca: None })
    }

    pub fn latent_widths(&self) -> Vec<usize> {
        self.encoders.iter().map(|e| e.latent_dim).collect()
    }

    pub fn total_width(&self) -> usize {
        self.decoder.latent_dim
    }

    /// `[B, 2·|group|, F, T]` input of encoder `g`, sources in group order.
    pub fn encoder_input(&self, batch: &Batch, g: usize) -> Result<Array4<f64>> {
        if batch.sources.len() != N_SOURCES {
            return Err(Error::Shape(format!("batch has {} sources, pipelines take {N_SOURCES}", batch.sources.len())));
        }
        let views: Vec<_> = self.groups[g].iter().map(|&s| batch.sources[s].data.view()).collect();
        concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))
    }

    /// Per-group latent nodes `[B, v_g]`.
    pub fn encode_graph(&self, g: &mut Graph, bound: &Bound, batch: &Batch) -> Result<Vec<NodeId>> {
        (0..self.groups.len())
            .map(|i| {
                let x = g.constant(self.encoder_input(batch, i)?.into_dyn());
                let prefix = encoder_prefix(i);
                encode_graph(g, x, Scope { bound, prefix: &prefix }, &self.encoders[i])
            })
            .collect()
    }

    pub fn decode_graph(&self, g: &mut Graph, bound: &Bound, zhat: NodeId) -> Result<NodeId> {
        decode_graph(g, zhat, Scope { bound, prefix: DECODER_PREFIX }, &self.decoder)
    }

    /// Per-group latents `[B, v_g]` as values.
    pub fn encode(&self, batch: &Batch) -> Result<Vec<Array2<f64>>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let ids = self.encode_graph(&mut g, &bound, batch)?;
        Ok(ids.iter().map(|&id| as_2d(g.value(id).clone())).collect())
    }

    pub fn decode(&self, zhat: &Array2<f64>) -> Result<Array4<f64>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let z = g.constant(zhat.clone().into_dyn());
        let y = self.decode_graph(&mut g, &bound, z)?;
        Ok(g.value(y).clone().into_dimensionality::<Ix4>().expect("decoder output is 4-D"))
    }

    /// Refits the per-group bases on every item of `corpus`.
    pub fn fit_pca(&mut self, corpus: &SpectralCorpus, batch_size: usize) -> Result<()> {
        let mut per_group: Vec<Vec<Array2<f64>>> = vec![Vec::new(); self.groups.len()];
        for batch in corpus.ordered_batches(batch_size) {
            for (acc, z) in per_group.iter_mut().zip(self.encode(&batch)?) {
                acc.push(z);
            }
        }
        let stacked = per_group
            .iter()
            .map(|parts| {
                let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
                concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = stacked.iter().map(|z| z.view()).collect();
        self.pca = Some(DistributedPca::fit(&views)?);
        Ok(())
    }

    fn fitted(&self) -> Result<&DistributedPca> {
        self.pca.as_ref().ok_or_else(|| Error::Value("compression bases not fitted".into()))
    }

    /// Per-group component counts for `budget` under this variant's rule.
    pub fn allocation(&self, budget: usize) -> Result<BandwidthAllocation> {
        let pca = self.fitted()?;
        match self.variant.compression() {
            Compression::Joint | Compression::Distributed => pca.allocate(budget),
            Compression::EqualSplit => equal_split(&pca.widths(), budget),
        }
    }

    /// Concatenated reconstruction `[B, Z]` of per-group latents after truncation.
    pub fn compress(&self, latents: &[Array2<f64>], alloc: &BandwidthAllocation) -> Result<Array2<f64>> {
        let views: Vec<_> = latents.iter().map(|z| z.view()).collect();
        self.fitted()?.round_trip(&views, alloc)
    }

    /// What goes on the air for batch row `row`.
    pub fn transmit(&self, latents: &[Array2<f64>], row: usize, alloc: &BandwidthAllocation) -> Result<CompressedBlock> {
        let views: Vec<ArrayView1<f64>> = latents.iter().map(|z| z.row(row)).collect();
        crate::ndpca::compress(&views, &self.fitted()?.bases, alloc)
    }

    /// Truncation as `mean + (z − mean)·U_kU_kᵀ` per group, differentiable in `z`.
    ///
    /// A group keeping its full width passes through untouched.
    pub fn project_graph(&self, g: &mut Graph, latents: &[NodeId], alloc: &BandwidthAllocation) -> Result<NodeId> {
        let pca = self.fitted()?;
        alloc.validate(&pca.bases)?;
        let mut parts = Vec::with_capacity(latents.len());
        for ((&z, basis), &k) in latents.iter().zip(&pca.bases).zip(&alloc.per_source) {
            if k == basis.dim() {
                parts.push(z);
                continue;
            }
            let mean = g.constant(basis.mean.clone().insert_axis(Axis(0)).into_dyn());
            let proj = g.constant(basis.projector(k)?.into_dyn());
            let c = g.sub(z, mean);
            let c = g.matmul(c, proj);
            parts.push(g.add(c, mean));
        }
        Ok(if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1) })
    }

    /// Decodes `zhat` and assembles every weighted term against the clean target.
    ///
    /// `latents` are the pre-compression encoder outputs used by the latent
    /// regularizers. Task terms are built only when `task` is given and their
    /// weight is nonzero, unless `all_terms` asks for them regardless.
    #[allow(clippy::too_many_arguments)]
    pub fn objective_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &Batch,
        latents: Vec<NodeId>,
        zhat: NodeId,
        weights: &LossWeights,
        task: Option<&TaskGraph>,
        all_terms: bool,
    ) -> Result<LossGraph> {
        let recon = self.decode_graph(g, bound, zhat)?;
        let clean = g.constant(batch.clean.data.clone().into_dyn());
        let peak = losses::peak_magnitude(&batch.clean);
        let mut terms: [Option<NodeId>; 7] = [None; 7];
        terms[0] = Some(losses::graph::mse(g, clean, recon));
        if latents.len() >= 2 {
            terms[1] = Some(losses::graph::cosine(g, &latents));
        }
        terms[2] = Some(losses::graph::spectral_snr(g, clean, recon));
        if peak > 0.0 {
            terms[3] = Some(losses::graph::psnr_loss(g, clean, recon, peak));
        }
        let zcat = if latents.len() == 1 { latents[0] } else { g.concat(&latents, 1) };
        terms[4] = Some(losses::graph::nuclear(g, zcat));
        if let Some(t) = task {
            if all_terms || weights.task > 0.0 {
                let sc = t.score;
                let (cfg, sde) = (t.score_cfg, t.sde);
                terms[5] = Some(dsm_loss_graph(g, clean, recon, t.draw, sde, t.weighting, |g, xt, y, ts| {
                    score_graph(g, xt, y, ts, sc, cfg, sde)
                })?);
            }
            if all_terms || weights.perceptual > 0.0 {
                let len = t.stft.samples_for(self.decoder.frames);
                let gt = istft_graph(g, clean, t.stft, len)?;
                let rec = istft_graph(g, recon, t.stft, len)?;
                terms[6] = Some(perceptual_loss_graph(g, gt, rec, t.disc, t.disc_cfg)?);
            }
        }
        let mut total: Option<NodeId> = None;
        for (term, w) in terms.iter().zip(weights.as_array()) {
            if let (Some(id), true) = (term, w != 0.0) {
                let wt = g.scale(*id, w);
                total = Some(match total {
                    Some(acc) => g.add(acc, wt),
                    None => wt,
                });
            }
        }
        let total = match total {
            Some(t) => t,
            None => g.scalar(0.0),
        };
        Ok(LossGraph { total, terms, latents, recon })
    }

    /// Training objective on one batch, optionally truncated to `alloc`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &Batch,
        alloc: Option<&BandwidthAllocation>,
        weights: &LossWeights,
        task: Option<&TaskGraph>,
    ) -> Result<LossGraph> {
        let latents = self.encode_graph(g, bound, batch)?;
        let zhat = match alloc {
            Some(a) => self.project_graph(g, &latents, a)?,
            None if latents.len() == 1 => latents[0],
            None => g.concat(&latents, 1),
        };
        self.objective_graph(g, bound, batch, latents, zhat, weights, task, false)
    }

    pub fn run(&self, batch: &Batch, budget: usize, ctx: &EvalContext) -> Result<RunOutput> {
        let alloc = self.allocation(budget)?;
        let z = self.encode(batch)?;
        let zhat = self.compress(&z, &alloc)?;

        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let latents: Vec<NodeId> = z.iter().map(|zi| g.constant(zi.clone().into_dyn())).collect();
        let zc = g.constant(zhat.into_dyn());

        let task_bound = ctx.task.as_ref().map(|t| (t.score.0.bind(&mut g, false), t.disc.0.bind(&mut g, false)));
        let draw = ctx.task.as_ref().map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
            rng.set_stream(batch.indices.first().copied().unwrap_or(0) as u64);
            DsmDraw::sample(&mut rng, batch.clean.data.shape(), &t.sde)
        });
        let tg = match (&ctx.task, &task_bound, &draw) {
            (Some(t), Some((sb, db)), Some(d)) => Some(TaskGraph {
                score: Scope { bound: sb, prefix: "" },
                score_cfg: &t.score_cfg,
                sde: &t.sde,
                weighting: t.weighting,
                draw: d,
                disc: Scope { bound: db, prefix: "" },
                disc_cfg: &t.disc_cfg,
                stft: &t.stft,
            }),
            _ => None,
        };
        let lg = self.objective_graph(&mut g, &bound, batch, latents, zc, &ctx.weights, tg.as_ref(), true)?;
        let breakdown = lg.breakdown(&g, &ctx.weights)?;
        let recon = g.value(lg.recon).clone().into_dimensionality::<Ix4>().expect("decoder output is 4-D");

        let sq_err_sum = (&batch.clean.data - &recon).iter().map(|d| d * d).sum::<f64>();
        let n_elems = recon.len();
        let peak = losses::peak_magnitude(&batch.clean);
        let psnr_db = losses::psnr_from_mse(sq_err_sum / n_elems.max(1) as f64, peak);
        let bitrate_bps = if alloc.budget == 0 { 0.0 } else { source_bitrate(alloc.budget, &self.channel)? };
        Ok(RunOutput {
            recon: MagPhaseTensor { data: recon },
            breakdown,
            metrics: RunMetrics { psnr_db, sq_err_sum, n_elems, peak, allocation: alloc, bitrate_bps },
        })
    }
}

fn as_2d(t: ArrayD<f64>) -> Array2<f64> {
    t.into_dimensionality::<Ix2>().expect("latent is 2-D")
}

/// Waveforms `[B, len]` of a magnitude/phase batch through the differentiable inverse.
pub fn magphase_waveforms(x: &Array4<f64>, stft: &StftConfig, len: usize) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let xi = g.constant(x.clone().into_dyn());
    let w = istft_graph(&mut g, xi, stft, len)?;
    Ok(as_2d(g.value(w).clone()))
}
