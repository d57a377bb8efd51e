//! Multi-microphone corpora: a seeded synthetic generator, a loader for
//! segment annotations over WAV recordings, and spectral batching.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{pack, stft, MagPhaseTensor, StftConfig, Waveform};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_sources: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    /// Inclusive range of integer mic delays, in samples.
    pub delay_range: (usize, usize),
    pub gain_range: (f64, f64),
    /// Per-mic SNR range in dB; `+∞` disables the noise.
    pub snr_range_db: (f64, f64),
    /// SNR drop per mic index, so mic `i` draws from `snr_range_db - i·step`.
    pub snr_step_db: f64,
    pub n_clips: usize,
    /// RMS level of the clean signal.
    pub level: f64,
    /// Speakers clips are drawn from, each with a fixed pitch and harmonic
    /// phases; 0 draws a fresh voice per clip.
    pub n_speakers: usize,
    /// Relative pitch jitter of a speaker from clip to clip.
    pub f0_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_sources: 4,
            clip_seconds: 0.0625,
            sample_rate: 16_000,
            delay_range: (0, 4),
            gain_range: (0.6, 1.0),
            snr_range_db: (10.0, 20.0),
            snr_step_db: 0.0,
            n_clips: 64,
            level: 0.2,
            n_speakers: 4,
            f0_jitter: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_sources >= 1
            && self.n_clips >= 1
            && self.clip_seconds > 0.0
            && self.sample_rate > 0
            && self.delay_range.0 <= self.delay_range.1
            && self.gain_range.0 > 0.0
            && self.gain_range.0 <= self.gain_range.1
            && !self.snr_range_db.0.is_nan()
            && !self.snr_range_db.1.is_nan()
            && self.snr_range_db.0 <= self.snr_range_db.1
            && self.level > 0.0
            && (0.0..1.0).contains(&self.f0_jitter)
            && self.snr_step_db.is_finite()
            && self.snr_step_db >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid synthetic corpus config {self:?}")));
        }
        Ok(())
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub session: String,
    pub speaker: String,
    pub start_s: f64,
    pub end_s: f64,
    pub clean_wav: PathBuf,
    pub mic_wavs: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub session: String,
    pub speaker: String,
    pub start_sample: usize,
}

/// A clean reference and its aligned noisy mic recordings.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSourceItem {
    pub clean: Waveform,
    pub mics: Vec<Waveform>,
    pub meta: ItemMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiSourceDataset {
    pub items: Vec<MultiSourceItem>,
    pub n_sources: usize,
    pub sample_rate: u32,
}

impl MultiSourceDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { items: idx.iter().map(|&i| self.items[i].clone()).collect(), ..*self }
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi { lo } else { rng.random_range(lo..hi) }
}

const F0_RANGE: (f64, f64) = (100.0, 250.0);
const N_HARMONICS: usize = 5;

/// Pitch and per-harmonic phases.
#[derive(Clone, Debug)]
struct Voice {
    f0: f64,
    phases: Vec<f64>,
}

impl Voice {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        let f0 = uniform(rng, F0_RANGE);
        Self { f0, phases: (0..N_HARMONICS).map(|_| rng.random_range(0.0..2.0 * PI)).collect() }
    }
}

/// Harmonic tone under a slow amplitude envelope, scaled to RMS `level`.
fn speech_like<R: Rng>(rng: &mut R, voice: &Voice, len: usize, fs: f64, level: f64) -> Vec<f64> {
    let (f0, phases, n_harm) = (voice.f0, &voice.phases, N_HARMONICS);
    let am_rate = rng.random_range(3.0..8.0);
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let mut x: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / fs;
            let env = 1.0 + 0.5 * (2.0 * PI * am_rate * t + am_phase).sin();
            let tone: f64 = (1..=n_harm).map(|h| (2.0 * PI * f0 * h as f64 * t + phases[h - 1]).sin() / h as f64).sum();
            env * tone
        })
        .collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= level / rms);
    }
    x
}

/// Seeded synthetic corpus: `mic_i = gain_i · clean(n − delay_i) + noise_i` at SNR_i.
///
/// The noise is white Gaussian rescaled so each mic's SNR, measured against
/// its own delayed and scaled clean component, equals the drawn value.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<MultiSourceDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let len = cfg.clip_samples();
    let fs = cfg.sample_rate as f64;
    let max_delay = cfg.delay_range.1;
    let voices: Vec<Voice> = (0..cfg.n_speakers).map(|_| Voice::draw(&mut rng)).collect();
    let mut items = Vec::with_capacity(cfg.n_clips);
    for clip in 0..cfg.n_clips {
        let (speaker, voice) = if voices.is_empty() {
            (format!("clip{clip}"), Voice::draw(&mut rng))
        } else {
            let s = rng.random_range(0..voices.len());
            let mut v = voices[s].clone();
            v.f0 *= 1.0 + uniform(&mut rng, (-cfg.f0_jitter, cfg.f0_jitter));
            (format!("spk{s}"), v)
        };
        let base = speech_like(&mut rng, &voice, len + max_delay, fs, cfg.level);
        let clean: Vec<f64> = base[max_delay..].to_vec();
        let mut mics = Vec::with_capacity(cfg.n_sources);
        for m in 0..cfg.n_sources {
            let delay = rng.random_range(cfg.delay_range.0..=cfg.delay_range.1);
            let gain = uniform(&mut rng, cfg.gain_range);
            let snr = uniform(&mut rng, cfg.snr_range_db) - m as f64 * cfg.snr_step_db;
            let signal: Vec<f64> = (0..len).map(|n| gain * base[max_delay + n - delay]).collect();
            let noise: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
            let es: f64 = signal.iter().map(|v| v * v).sum();
            let en: f64 = noise.iter().map(|v| v * v).sum();
            let scale = if snr.is_infinite() || en == 0.0 { 0.0 } else { (es / en / 10f64.powf(snr / 10.0)).sqrt() };
            let mic = signal.iter().zip(&noise).map(|(s, n)| s + scale * n).collect();
            mics.push(Waveform::new(mic, cfg.sample_rate)?);
        }
        items.push(MultiSourceItem {
            clean: Waveform::new(clean, cfg.sample_rate)?,
            mics,
            meta: ItemMeta { session: "synthetic".into(), speaker, start_sample: 0 },
        });
    }
    Ok(MultiSourceDataset { items, n_sources: cfg.n_sources, sample_rate: cfg.sample_rate })
}

/// Sample index of a time stamp: `round(time · fs)`.
pub fn time_to_sample(time_s: f64, fs: u32) -> usize {
    (time_s * fs as f64).round().max(0.0) as usize
}

/// Loads annotated segments; WAV paths are relative to `wav_dir`.
///
/// Segments with non-finite, negative or non-increasing times are skipped
/// with a warning; a missing file or a segment past the end of its file is an
/// error naming the segment. Clips of one item are zero-padded to equal length.
pub fn load_segmented_corpus(annotations: &Path, wav_dir: &Path) -> Result<MultiSourceDataset> {
    let text = std::fs::read_to_string(annotations).map_err(|e| Error::io(annotations, e))?;
    let segs: Vec<SegmentAnnotation> = serde_json::from_str(&text)?;
    let mut cache: HashMap<PathBuf, Waveform> = HashMap::new();
    let mut items = Vec::new();
    let mut n_sources = None;
    let mut sample_rate = None;
    for (i, seg) in segs.iter().enumerate() {
        let name = format!("#{i} ({} / {} @ {}s)", seg.session, seg.speaker, seg.start_s);
        if !(seg.start_s.is_finite() && seg.end_s.is_finite() && seg.start_s >= 0.0 && seg.end_s > seg.start_s) {
            log::warn!("skipping segment {name}: malformed times [{}, {}]", seg.start_s, seg.end_s);
            continue;
        }
        if *n_sources.get_or_insert(seg.mic_wavs.len()) != seg.mic_wavs.len() {
            return Err(Error::Segment { segment: name, reason: format!("{} mics, expected {}", seg.mic_wavs.len(), n_sources.unwrap()) });
        }
        let mut clip = |rel: &Path| -> Result<Waveform> {
            let path = wav_dir.join(rel);
            if !cache.contains_key(&path) {
                let w = crate::dsp::read_wav(&path)
                    .map_err(|e| Error::Segment { segment: name.clone(), reason: format!("{}: {e}", path.display()) })?;
                cache.insert(path.clone(), w);
            }
            let w = &cache[&path];
            if *sample_rate.get_or_insert(w.sample_rate) != w.sample_rate {
                return Err(Error::Segment { segment: name.clone(), reason: format!("{} has a different sample rate", path.display()) });
            }
            let (a, b) = (time_to_sample(seg.start_s, w.sample_rate), time_to_sample(seg.end_s, w.sample_rate));
            if b > w.len() {
                return Err(Error::Segment {
                    segment: name.clone(),
                    reason: format!("ends at sample {b}, past the {} samples of {}", w.len(), path.display()),
                });
            }
            Waveform::new(w.samples[a..b].to_vec(), w.sample_rate)
        };
        let clean = clip(&seg.clean_wav)?;
        let mics = seg.mic_wavs.iter().map(|m| clip(m)).collect::<Result<Vec<_>>>()?;
        let len = mics.iter().map(Waveform::len).chain([clean.len()]).max().unwrap_or(0);
        let pad = |mut w: Waveform| {
            w.samples.resize(len, 0.0);
            w
        };
        let start_sample = time_to_sample(seg.start_s, clean.sample_rate);
        items.push(MultiSourceItem {
            clean: pad(clean),
            mics: mics.into_iter().map(pad).collect(),
            meta: ItemMeta { session: seg.session.clone(), speaker: seg.speaker.clone(), start_sample },
        });
    }
    Ok(MultiSourceDataset { items, n_sources: n_sources.unwrap_or(0), sample_rate: sample_rate.unwrap_or(16_000) })
}

/// Seeded split of `n` item indices into `(train, held_out)`; `held_out_frac` of them held out.
pub fn holdout_split(n: usize, held_out_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * held_out_frac).round() as usize;
    let n_test = n_test.min(n.saturating_sub(1));
    let mut test = idx.split_off(n - n_test);
    idx.sort_unstable();
    test.sort_unstable();
    (idx, test)
}

/// Per-item spectrograms cropped or zero-padded to a fixed frame count.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCorpus {
    /// `[2, F, T]` per item.
    pub clean: Vec<Array3<f64>>,
    /// `[n_sources][2, F, T]` per item.
    pub sources: Vec<Vec<Array3<f64>>>,
    pub stft: StftConfig,
}

/// One batch: the clean target and one tensor per source.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub clean: MagPhaseTensor,
    pub sources: Vec<MagPhaseTensor>,
    pub indices: Vec<usize>,
}

fn spectral_clip(w: &Waveform, cfg: &StftConfig, frames: usize) -> Result<Array3<f64>> {
    let need = cfg.window.max(cfg.fft_size / 2 + 1).max(cfg.samples_for(frames));
    let mut samples = w.samples.clone();
    if samples.len() < need {
        samples.resize(need, 0.0);
    }
    let spec = stft(&Waveform { samples, sample_rate: w.sample_rate }, cfg)?;
    let packed = pack(&[spec])?.data.index_axis_move(Axis(0), 0);
    let mut out = Array3::zeros((2, cfg.freq_bins(), frames));
    let keep = frames.min(packed.shape()[2]);
    out.slice_mut(s![.., .., ..keep]).assign(&packed.slice(s![.., .., ..keep]));
    Ok(out)
}

impl SpectralCorpus {
    pub fn prepare(ds: &MultiSourceDataset, cfg: &StftConfig, frames: usize) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Value("empty dataset".into()));
        }
        let clean = ds.items.iter().map(|it| spectral_clip(&it.clean, cfg, frames)).collect::<Result<_>>()?;
        let sources = ds
            .items
            .iter()
            .map(|it| it.mics.iter().map(|m| spectral_clip(m, cfg, frames)).collect::<Result<_>>())
            .collect::<Result<_>>()?;
        Ok(Self { clean, sources, stft: *cfg })
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn n_sources(&self) -> usize {
        self.sources.first().map_or(0, Vec::len)
    }

    /// `(F, T)` of every tensor.
    pub fn dims(&self) -> (usize, usize) {
        let s = self.clean[0].shape();
        (s[1], s[2])
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            clean: idx.iter().map(|&i| self.clean[i].clone()).collect(),
            sources: idx.iter().map(|&i| self.sources[i].clone()).collect(),
            stft: self.stft,
        }
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let (f, t) = self.dims();
        let stack = |items: Vec<&Array3<f64>>| {
            let mut a = Array4::zeros((items.len(), 2, f, t));
            for (b, x) in items.into_iter().enumerate() {
                a.index_axis_mut(Axis(0), b).assign(x);
            }
            MagPhaseTensor { data: a }
        };
        Batch {
            clean: stack(idx.iter().map(|&i| &self.clean[i]).collect()),
            sources: (0..self.n_sources()).map(|s| stack(idx.iter().map(|&i| &self.sources[i][s]).collect())).collect(),
            indices: idx.to_vec(),
        }
    }

    /// Shuffled batches covering every item once; the last one may be short.
    pub fn batches(&self, batch_size: usize, seed: u64) -> impl Iterator<Item = Batch> + '_ {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.gather(&c))
    }

    /// Every item in order, in batches of `batch_size`.
    pub fn ordered_batches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let order: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.gather(&c))
    }

    /// Writes the `NDPC1` archive: magic, `u32` item count, source count, `F`,
    /// `T`, then per item the clean and source tensors as `f64`, all little-endian.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let (f, t) = self.dims();
        let mut buf = Vec::with_capacity(5 + 16 + self.len() * (1 + self.n_sources()) * 2 * f * t * 8);
        buf.extend_from_slice(CACHE_MAGIC);
        for v in [self.len(), self.n_sources(), f, t] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (c, srcs) in self.clean.iter().zip(&self.sources) {
            for a in std::iter::once(c).chain(srcs) {
                for v in a.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path, stft: StftConfig) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::Value(format!("{}: {why}", path.display()));
        if bytes.len() < 21 || &bytes[..5] != CACHE_MAGIC {
            return Err(bad("not an NDPC1 archive"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
        let (n, s, f, t) = (word(0), word(1), word(2), word(3));
        let per = 2 * f * t;
        if bytes.len() != 21 + n * (1 + s) * per * 8 {
            return Err(bad("archive size does not match its header"));
        }
        let mut pos = 21;
        let mut next = || {
            let v: Vec<f64> = bytes[pos..pos + per * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            pos += per * 8;
            Array3::from_shape_vec((2, f, t), v).expect("sized by header")
        };
        let mut clean = Vec::with_capacity(n);
        let mut sources = Vec::with_capacity(n);
        for _ in 0..n {
            clean.push(next());
            sources.push((0..s).map(|_| next()).collect());
        }
        Ok(Self { clean, sources, stft })
    }
}

pub const CACHE_MAGIC: &[u8; 5] = b"NDPC1";

/// Shuffled fixed-shape spectral batches of a waveform dataset.
pub fn batch_iter(
    ds: &MultiSourceDataset,
    batch_size: usize,
    seed: u64,
    cfg: &StftConfig,
    frames: usize,
) -> Result<std::vec::IntoIter<Batch>> {
    let corpus = SpectralCorpus::prepare(ds, cfg, frames)?;
    Ok(corpus.batches(batch_size, seed).collect::<Vec<_>>().into_iter())
}

/// Pearson correlation of two equal-length signals.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt().max(f64::MIN_POSITIVE)
}
