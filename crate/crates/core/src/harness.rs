//! Experiments: training, bandwidth sweeps, rate-distortion-perception sweeps, plots.

mod plot;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Axis;
use ndpca_autograd::{Adam, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use plot::{emit_plots, LinePlot, Series};

use crate::channel::ChannelTrace;
use crate::codec::{grad_step, Scope};
use crate::data::{
    holdout_split, load_segmented_corpus, synth_corpus, Batch, ItemMeta, MultiSourceDataset, MultiSourceItem, SpectralCorpus, SynthConfig,
};
use crate::dsp::{StftConfig, Waveform};
use crate::enhance::{DsmDraw, DsmWeighting, ScoreNetConfig, ScoreNetParams, SdeParams};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossTerms, LossWeights, CSV_HEADER, CsvRow};
use crate::percept::{disc_update, DiscriminatorParams, ScaleConfig};
use crate::pipelines::{magphase_waveforms, EvalContext, Pipeline, PipelineConfig, TaskGraph, TaskModules};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_LOG_FILE: &str = "losses.csv";
pub const SWEEP_HEADER: &str = "variant,ndpca,budget,psnr_db,mse,cos,snr,task,perc,weight";

const SCORE_PREFIX: &str = "score.";
/// Offsets separating the seeds of independently initialized parts.
const SCORE_SEED: u64 = 1;
const DISC_SEED: u64 = 2;
const EVAL_SEED: u64 = 0xE7A1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub synth: SynthConfig,
    /// Segment list for a recorded corpus; the synthetic corpus is used when absent.
    pub annotations: Option<PathBuf>,
    pub wav_dir: Option<PathBuf>,
    pub stft: StftConfig,
    /// Frames per clip after crop or pad.
    pub frames: usize,
    pub held_out_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            annotations: None,
            wav_dir: None,
            stft: StftConfig::desk(),
            frames: 16,
            held_out_frac: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub pipeline: PipelineConfig,
    pub weights: LossWeights,
    pub sde: SdeParams,
    pub weighting: DsmWeighting,
    pub score: ScoreNetConfig,
    pub disc: ScaleConfig,
    pub data: DataConfig,
    /// Ascending.
    pub budgets: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// After the first epoch, truncate latents to a random budget in each step.
    pub train_truncation: bool,
    /// Checkpoint every this many epochs; the last epoch is always saved.
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Small synthetic setup that trains in minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            weights: LossWeights::task_agnostic(),
            sde: SdeParams::default(),
            weighting: DsmWeighting::default(),
            score: ScoreNetConfig::default(),
            disc: ScaleConfig::desk(),
            data: DataConfig::default(),
            budgets: vec![8, 16, 32, 64],
            epochs: 30,
            // 51 training clips; larger batches or steps collapse the encoders to constant latents.
            batch_size: 4,
            lr: 5e-4,
            disc_lr: 2e-4,
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            train_truncation: true,
            checkpoint_every: 10,
        }
    }

    /// Full-size settings: 1025 bins, 600 frames, 100 epochs at 2e-4.
    pub fn full_scale() -> Self {
        let mut c = Self::desk();
        c.pipeline.arch = crate::codec::ArchConfig::full_scale();
        c.disc = ScaleConfig::default();
        c.data.stft = StftConfig { fft_size: 2048, hop: 512, window: 2048, sample_rate: 16_000 };
        c.data.frames = 600;
        c.budgets = vec![8, 16, 32, 64, 128, 256];
        c.epochs = 100;
        c.batch_size = 16;
        c.lr = 2e-4;
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.weights.validate()?;
        self.sde.validate()?;
        self.data.stft.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !self.budgets.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!("budgets must be strictly ascending: {:?}", self.budgets)));
        }
        if !(self.lr > 0.0 && self.disc_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.held_out_frac) {
            return Err(Error::Config(format!("held_out_frac {} outside [0, 1)", self.data.held_out_frac)));
        }
        let arch = &self.pipeline.arch;
        if arch.freq_bins != self.data.stft.freq_bins() || arch.frames != self.data.frames {
            return Err(Error::Config(format!(
                "codec expects {}×{} but the data gives {}×{}",
                arch.freq_bins,
                arch.frames,
                self.data.stft.freq_bins(),
                self.data.frames
            )));
        }
        if self.weights.is_task_aware() {
            self.disc.validate()?;
            let len = self.data.stft.samples_for(self.data.frames);
            if self.disc.max_fft() > len {
                return Err(Error::Config(format!("discriminator FFT {} longer than the {len}-sample clips", self.disc.max_fft())));
            }
        }
        Ok(())
    }

    pub fn wave_len(&self) -> usize {
        self.data.stft.samples_for(self.data.frames)
    }
}

/// Training and held-out spectrograms.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: SpectralCorpus,
    pub test: SpectralCorpus,
}

/// Builds the corpus and splits it by clip with `seed`.
pub fn prepare_data(data: &DataConfig, seed: u64) -> Result<Splits> {
    let ds = match (&data.annotations, &data.wav_dir) {
        (Some(a), Some(w)) => load_segmented_corpus(a, w)?,
        (None, None) => synth_corpus(&data.synth)?,
        _ => return Err(Error::Config("annotations and wav_dir must be given together".into())),
    };
    let (train, test) = holdout_split(ds.len(), data.held_out_frac, seed);
    if train.len() < 2 || test.is_empty() {
        return Err(Error::Config(format!("{} clips do not leave a usable split", ds.len())));
    }
    Ok(Splits {
        train: SpectralCorpus::prepare(&ds.subset(&train), &data.stft, data.frames)?,
        test: SpectralCorpus::prepare(&ds.subset(&test), &data.stft, data.frames)?,
    })
}

/// Everything needed to continue or evaluate a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub pipeline: Pipeline,
    /// Enhancer and discriminator, present for task-aware runs.
    pub score: Option<ScoreNetParams>,
    pub disc: Option<DiscriminatorParams>,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub epochs_done: usize,
    pub step: u64,
}

impl Checkpoint {
    /// Untrained state for `cfg`.
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let pipeline = Pipeline::from_config(&cfg.pipeline, cfg.seed)?;
        let aware = cfg.weights.is_task_aware();
        let score = aware.then(|| ScoreNetParams::init(&cfg.score, &mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SCORE_SEED))));
        let disc = if aware { Some(DiscriminatorParams::init(&cfg.disc, cfg.seed.wrapping_add(DISC_SEED))?) } else { None };
        Ok(Self {
            config: cfg.clone(),
            pipeline,
            score,
            disc,
            gen_opt: Adam::new(cfg.lr),
            disc_opt: Adam::new(cfg.disc_lr),
            epochs_done: 0,
            step: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("json.tmp");
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }

    fn generator_store(&self) -> ParamStore {
        let mut s = self.pipeline.params.clone();
        if let Some(sc) = &self.score {
            s.extend_prefixed(SCORE_PREFIX, &sc.0);
        }
        s
    }

    fn absorb_generator(&mut self, store: ParamStore) {
        let mut codec = ParamStore::new();
        let mut score = ParamStore::new();
        for (k, v) in store.iter() {
            match k.strip_prefix(SCORE_PREFIX) {
                Some(rest) => score.insert(rest, v.clone()),
                None => codec.insert(k.clone(), v.clone()),
            }
        }
        self.pipeline.params = codec;
        if let Some(sc) = &mut self.score {
            sc.0 = score;
        }
    }

    /// Enhancer and discriminator for evaluation, if this run trained them.
    pub fn task_modules(&self) -> Option<TaskModules<'_>> {
        let c = &self.config;
        Some(TaskModules {
            score: self.score.as_ref()?,
            score_cfg: c.score,
            sde: c.sde,
            weighting: c.weighting,
            disc: self.disc.as_ref()?,
            disc_cfg: c.disc.clone(),
            stft: c.data.stft,
            seed: c.seed.wrapping_add(EVAL_SEED),
        })
    }
}

/// Generator for step `step`: seeded by the run seed, one stream per step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step);
    r
}

/// Per-epoch summary of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_total: f64,
}

/// One generator step, then one discriminator step when a discriminator exists.
pub fn train_step(state: &mut Checkpoint, batch: &Batch) -> Result<LossBreakdown> {
    let cfg = state.config.clone();
    let mut rng = step_rng(cfg.seed, state.step);
    let alloc = match (&state.pipeline.pca, cfg.train_truncation && state.epochs_done >= 1) {
        (Some(_), true) => {
            let full = state.pipeline.total_width();
            let mut choices: Vec<usize> = cfg.budgets.iter().copied().filter(|&b| b < full).collect();
            choices.push(full);
            Some(state.pipeline.allocation(choices[rng.random_range(0..choices.len())])?)
        }
        _ => None,
    };
    let draw = state.score.as_ref().map(|_| DsmDraw::sample(&mut rng, batch.clean.data.shape(), &cfg.sde));

    let mut store = state.generator_store();
    let mut breakdown = None;
    let mut recon = None;
    {
        let pipeline = &state.pipeline;
        let disc = &state.disc;
        let step = state.step;
        let res = grad_step(&mut store, &mut state.gen_opt, |g, bound| {
            let disc_bound = disc.as_ref().map(|d| d.0.bind(g, false));
            let tg = match (&disc_bound, &draw) {
                (Some(db), Some(d)) => Some(TaskGraph {
                    score: Scope { bound, prefix: SCORE_PREFIX },
                    score_cfg: &cfg.score,
                    sde: &cfg.sde,
                    weighting: cfg.weighting,
                    draw: d,
                    disc: Scope { bound: db, prefix: "" },
                    disc_cfg: &cfg.disc,
                    stft: &cfg.data.stft,
                }),
                _ => None,
            };
            let lg = pipeline.loss_graph(g, bound, batch, alloc.as_ref(), &cfg.weights, tg.as_ref())?;
            breakdown = Some(lg.breakdown(g, &cfg.weights).map_err(|e| Error::NonFiniteLoss { step, detail: e.to_string() })?);
            recon = Some(g.value(lg.recon).clone());
            Ok(lg.total)
        });
        if let Err(Error::NonFiniteLoss { detail, .. }) = res {
            return Err(Error::NonFiniteLoss { step, detail });
        }
        res?;
    }
    state.absorb_generator(store);

    if let Some(disc) = &mut state.disc {
        let len = cfg.wave_len();
        let fake = recon.expect("generator output").into_dimensionality().expect("4-D reconstruction");
        let real = magphase_waveforms(&batch.clean.data, &cfg.data.stft, len)?;
        let fake = magphase_waveforms(&fake, &cfg.data.stft, len)?;
        disc_update(disc, &mut state.disc_opt, &real, &fake, &cfg.disc)
            .map_err(|e| Error::NonFiniteLoss { step: state.step, detail: format!("discriminator: {e}") })?;
    }
    state.step += 1;
    Ok(breakdown.expect("loss breakdown"))
}

/// Trains until `state.config.epochs`, logging to `out_dir`.
///
/// The loss log is appended to, so a resumed run continues the same file. On a
/// non-finite loss the untouched state is saved before the error is returned.
pub fn run_training(state: &mut Checkpoint, train: &SpectralCorpus) -> Result<Vec<EpochSummary>> {
    let cfg = state.config.clone();
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let log_path = cfg.out_dir.join(LOSS_LOG_FILE);
    let fresh = !log_path.exists() || state.step == 0;
    let mut log = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?,
    );
    if fresh {
        writeln!(log, "{CSV_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    }
    let ckpt_path = cfg.out_dir.join(CHECKPOINT_FILE);
    let mut summaries = Vec::new();
    while state.epochs_done < cfg.epochs {
        let epoch = state.epochs_done;
        let mut total = 0.0;
        let mut n = 0usize;
        for batch in train.batches(cfg.batch_size, cfg.seed.wrapping_add(epoch as u64)) {
            let step = state.step;
            let b = match train_step(state, &batch) {
                Ok(b) => b,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    log.flush().map_err(|e| Error::io(&log_path, e))?;
                    state.save(&ckpt_path)?;
                    log::error!("aborting at step {step}: {e}; last good state in {}", ckpt_path.display());
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            writeln!(log, "{}", CsvRow(step, &b)).map_err(|e| Error::io(&log_path, e))?;
            total += b.total * batch.indices.len() as f64;
            n += batch.indices.len();
        }
        state.pipeline.fit_pca(train, cfg.batch_size)?;
        state.epochs_done += 1;
        let mean_total = total / n.max(1) as f64;
        log::info!("{} epoch {}/{}: mean loss {mean_total:.6}", cfg.pipeline.pipeline_variant().label(), state.epochs_done, cfg.epochs);
        summaries.push(EpochSummary { epoch, mean_total });
        let every = cfg.checkpoint_every.max(1);
        if state.epochs_done % every == 0 || state.epochs_done == cfg.epochs {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            state.save(&ckpt_path)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(summaries)
}

/// Fresh training run on prepared data.
pub fn train_on(cfg: &ExperimentConfig, data: &Splits) -> Result<Checkpoint> {
    let mut state = Checkpoint::init(cfg)?;
    run_training(&mut state, &data.train)?;
    Ok(state)
}

/// Fresh training run, data built from the config.
pub fn train(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let data = prepare_data(&cfg.data, cfg.seed)?;
    train_on(cfg, &data)
}

/// Continues a saved run up to `epochs` total epochs.
pub fn resume(path: &Path, epochs: usize, data: &Splits) -> Result<Checkpoint> {
    let mut state = Checkpoint::load(path)?;
    state.config.epochs = epochs;
    run_training(&mut state, &data.train)?;
    Ok(state)
}

/// One row of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub ndpca: bool,
    pub budget: usize,
    pub psnr_db: f64,
    /// Per-element mean squared error over the held-out set.
    pub mse: f64,
    pub cos: f64,
    pub snr: f64,
    pub task: f64,
    pub perc: f64,
    /// Perceptual weight of a task-aware run; empty for task-agnostic runs.
    pub weight: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        if self.rows.is_empty() {
            w.write_record(SWEEP_HEADER.split(','))?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.join(",") != SWEEP_HEADER {
            return Err(Error::Value(format!("{}: expected header {SWEEP_HEADER}", path.display())));
        }
        Ok(Self { rows: rdr.deserialize().collect::<std::result::Result<_, _>>()? })
    }

    pub fn find(&self, variant: &str, ndpca: bool, budget: usize, weight: Option<f64>) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.variant == variant && r.ndpca == ndpca && r.budget == budget && r.weight == weight)
    }

    pub fn extend(&mut self, other: SweepResult) {
        self.rows.extend(other.rows);
    }
}

/// Held-out metrics of one checkpoint at one budget.
pub fn evaluate(ckpt: &Checkpoint, test: &SpectralCorpus, budget: usize) -> Result<SweepRow> {
    let cfg = &ckpt.config;
    let ctx = EvalContext { weights: cfg.weights, task: ckpt.task_modules() };
    let (mut sse, mut n, mut peak, mut items) = (0.0, 0usize, 0.0f64, 0usize);
    let mut terms = LossTerms::default();
    for batch in test.ordered_batches(cfg.batch_size) {
        let out = ckpt.pipeline.run(&batch, budget, &ctx)?;
        let w = batch.indices.len() as f64;
        sse += out.metrics.sq_err_sum;
        n += out.metrics.n_elems;
        peak = peak.max(out.metrics.peak);
        items += batch.indices.len();
        let t = out.breakdown.terms;
        terms.cos += w * t.cos;
        terms.snr += w * t.snr;
        terms.task += w * t.task;
        terms.perceptual += w * t.perceptual;
    }
    let items = items.max(1) as f64;
    let mse = sse / n.max(1) as f64;
    let v = ckpt.pipeline.variant;
    Ok(SweepRow {
        variant: v.grouping.to_string(),
        ndpca: v.use_ndpca,
        budget,
        psnr_db: crate::losses::psnr_from_mse(mse, peak),
        mse,
        cos: terms.cos / items,
        snr: terms.snr / items,
        task: terms.task / items,
        perc: terms.perceptual / items,
        weight: cfg.weights.is_task_aware().then_some(cfg.weights.perceptual),
    })
}

/// PSNR and loss terms per (checkpoint, budget) on held-out data.
///
/// Each checkpoint carries the bases fitted at the end of its training, so no
/// refit happens here. Budgets wider than a pipeline's latent are skipped.
pub fn eval_bandwidth_sweep(ckpts: &[Checkpoint], budgets: &[usize], test: &SpectralCorpus) -> Result<SweepResult> {
    let mut rows = Vec::new();
    for ck in ckpts {
        let width = ck.pipeline.total_width();
        for &b in budgets {
            if b > width {
                log::warn!("skipping budget {b} for {}: latent width is {width}", ck.pipeline.variant.label());
                continue;
            }
            rows.push(evaluate(ck, test, b)?);
        }
    }
    Ok(SweepResult { rows })
}

/// Distortion per (perceptual weight, budget) from one checkpoint per weight.
pub fn rdp_sweep(ckpts: &[(f64, PathBuf)], budgets: &[usize], test: &SpectralCorpus) -> Result<SweepResult> {
    let mut out = SweepResult::default();
    for (w, path) in ckpts {
        let ck = Checkpoint::load(path)?;
        if ck.score.is_none() {
            return Err(Error::Config(format!("{} was trained without the enhancer", path.display())));
        }
        if (ck.config.weights.perceptual - w).abs() > 1e-12 {
            log::warn!("{} was trained at perceptual weight {}, listed as {w}", path.display(), ck.config.weights.perceptual);
        }
        out.extend(eval_bandwidth_sweep(std::slice::from_ref(&ck), budgets, test)?);
    }
    Ok(out)
}

/// Enhanced waveforms for every item of `corpus` at `budget`.
///
/// Each clip is compressed, decoded and, when the checkpoint has an enhancer,
/// passed through the reverse diffusion sampler.
pub fn enhance_corpus(ckpt: &Checkpoint, corpus: &SpectralCorpus, budget: usize) -> Result<Vec<Vec<f64>>> {
    let cfg = &ckpt.config;
    let len = cfg.wave_len();
    let mut out = Vec::new();
    for batch in corpus.ordered_batches(cfg.batch_size) {
        let run = ckpt.pipeline.run(&batch, budget, &EvalContext { weights: cfg.weights, task: None })?;
        let spec = match &ckpt.score {
            Some(p) => {
                let model = crate::enhance::NetScore { params: p, cfg: cfg.score, sde: cfg.sde };
                let seed = cfg.seed.wrapping_add(EVAL_SEED).wrapping_add(batch.indices[0] as u64);
                crate::enhance::reverse_sample(&run.recon.data.clone().into_dyn(), &model, &cfg.sde, seed)?
                    .into_dimensionality()
                    .map_err(|e| Error::Shape(e.to_string()))?
            }
            None => run.recon.data,
        };
        let wav = magphase_waveforms(&spec, &cfg.data.stft, len)?;
        out.extend(wav.axis_iter(Axis(0)).map(|r| r.to_vec()));
    }
    Ok(out)
}

/// Compresses and enhances full mic recordings clip by clip.
///
/// The recordings are zero-padded to a whole number of clips; the output is
/// cut back to the longest input. Mic 0 stands in for the unused clean reference.
pub fn enhance_recordings(ckpt: &Checkpoint, mics: &[Waveform], budget: usize) -> Result<Waveform> {
    let cfg = &ckpt.config;
    if mics.len() != crate::pipelines::N_SOURCES {
        return Err(Error::Value(format!("{} recordings given, the pipeline takes {}", mics.len(), crate::pipelines::N_SOURCES)));
    }
    let rate = mics[0].sample_rate;
    if mics.iter().any(|m| m.sample_rate != rate) || rate != cfg.data.stft.sample_rate {
        return Err(Error::Value(format!("recordings must all be at {} Hz", cfg.data.stft.sample_rate)));
    }
    let clip = cfg.wave_len();
    let len = mics.iter().map(Waveform::len).max().unwrap_or(0);
    let n_clips = len.div_ceil(clip).max(1);
    let cut = |w: &Waveform, c: usize| {
        let samples = (c * clip..(c + 1) * clip).map(|i| w.samples.get(i).copied().unwrap_or(0.0)).collect();
        Waveform { samples, sample_rate: rate }
    };
    let items = (0..n_clips)
        .map(|c| MultiSourceItem {
            clean: cut(&mics[0], c),
            mics: mics.iter().map(|m| cut(m, c)).collect(),
            meta: ItemMeta { start_sample: c * clip, ..ItemMeta::default() },
        })
        .collect();
    let ds = MultiSourceDataset { items, n_sources: mics.len(), sample_rate: rate };
    let corpus = SpectralCorpus::prepare(&ds, &cfg.data.stft, cfg.data.frames)?;
    let mut samples: Vec<f64> = enhance_corpus(ckpt, &corpus, budget)?.concat();
    samples.truncate(len);
    Ok(Waveform { samples, sample_rate: rate })
}

/// A smooth synthetic capacity trace for the bandwidth-retention figure.
pub fn demo_capacity_trace(p: &crate::channel::ChannelParams) -> Result<ChannelTrace> {
    let per_dim = crate::channel::source_bitrate(1, p)?;
    let samples = (0..60)
        .map(|i| {
            let t = i as f64 * 0.5;
            let c = per_dim * (36.0 + 24.0 * (t / 4.0).sin() + 6.0 * (t / 1.3).cos());
            crate::channel::CapacitySample { time_s: t, capacity_bps: c }
        })
        .collect();
    ChannelTrace::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ArchConfig;
    use crate::pipelines::Grouping;

    pub(crate) fn tiny_config(dir: &Path) -> ExperimentConfig {
        let stft = StftConfig { fft_size: 16, hop: 4, window: 16, sample_rate: 16_000 };
        let mut c = ExperimentConfig::desk();
        c.data = DataConfig { synth: SynthConfig { n_clips: 10, ..SynthConfig::default() }, stft, frames: 4, ..DataConfig::default() };
        c.pipeline.variant = Grouping::E2D1;
        c.pipeline.arch = ArchConfig {
            freq_bins: 9,
            frames: 4,
            freq_proj_hidden: 8,
            freq_proj_out: 4,
            n_res_blocks: 1,
            latent_dim: 8,
            conv_channels: 4,
            decoder_channels: 2,
            ..ArchConfig::desk()
        };
        c.score = ScoreNetConfig { hidden: 4, embed_dim: 4 };
        c.disc = ScaleConfig { scales: [4, 8].map(|n| crate::percept::StftScale { fft_size: n, hop: n / 4 }).to_vec(), channels: 2, n_layers: 2, ..ScaleConfig::desk() };
        c.budgets = vec![2, 4, 8];
        c.epochs = 2;
        c.batch_size = 4;
        c.out_dir = dir.to_path_buf();
        c.checkpoint_every = 1;
        c
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = ExperimentConfig::desk();
        let s = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&s).unwrap(), c);
        let partial = ExperimentConfig::from_toml_str("epochs = 3\n[pipeline]\nvariant = \"E2D1\"\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.pipeline.variant, Grouping::E2D1);
        assert!(ExperimentConfig::from_toml_str("budgets = [16, 8]").is_err());
        assert!(ExperimentConfig::from_toml_str("epochs = 0").is_err());
    }

    #[test]
    fn task_agnostic_training_leaves_task_modules_absent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let ck = train(&cfg).unwrap();
        assert!(ck.score.is_none() && ck.disc.is_none());
        assert_eq!(ck.epochs_done, 2);
        assert!(ck.pipeline.pca.is_some());
        assert!(dir.path().join(CHECKPOINT_FILE).exists());
        let log = fs::read_to_string(dir.path().join(LOSS_LOG_FILE)).unwrap();
        assert_eq!(log.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(log.lines().count(), 1 + 2 * 2);
    }

    #[test]
    fn task_aware_step_updates_every_module() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.weights = LossWeights::default();
        let data = prepare_data(&cfg.data, cfg.seed).unwrap();
        let mut st = Checkpoint::init(&cfg).unwrap();
        let before = st.clone();
        let b = train_step(&mut st, &data.train.gather(&[0, 1, 2])).unwrap();
        assert!(b.terms.task > 0.0 && b.terms.perceptual >= 0.0);
        assert_ne!(st.pipeline.params, before.pipeline.params);
        assert_ne!(st.score, before.score);
        assert_ne!(st.disc, before.disc);
    }

    #[test]
    fn sweep_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let res = SweepResult {
            rows: vec![
                SweepRow { variant: "E4D1".into(), ndpca: true, budget: 8, psnr_db: 12.5, mse: 0.1, cos: 0.2, snr: -3.0, task: 0.0, perc: 0.0, weight: None },
                SweepRow { variant: "E1D1".into(), ndpca: false, budget: 16, psnr_db: 0.1 + 0.2, mse: 1e-300, cos: 0.0, snr: 1.0, task: 2.0, perc: 0.5, weight: Some(0.1) },
            ],
        };
        let p = dir.path().join("s.csv");
        res.write_csv(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), SWEEP_HEADER);
        assert_eq!(SweepResult::read_csv(&p).unwrap(), res);
    }

    #[test]
    fn enhancing_recordings_keeps_their_length() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.weights = LossWeights::default();
        cfg.epochs = 1;
        cfg.sde.n_steps = 3;
        let ck = train(&cfg).unwrap();
        let ds = synth_corpus(&SynthConfig { n_clips: 1, ..SynthConfig::default() }).unwrap();
        let mics: Vec<Waveform> = ds.items[0].mics.iter().map(|m| Waveform { samples: m.samples[..37].to_vec(), sample_rate: m.sample_rate }).collect();
        let out = enhance_recordings(&ck, &mics, 4).unwrap();
        assert_eq!(out.len(), 37);
        assert!(out.samples.iter().all(|v| v.is_finite()));
        assert!(enhance_recordings(&ck, &mics[..3], 4).is_err());
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let data = prepare_data(&cfg.data, 0).unwrap();
        let err = rdp_sweep(&[(0.0, dir.path().join("nope.json"))], &[2], &data.test).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }
}
