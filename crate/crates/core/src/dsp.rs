//! Waveform ↔ time-frequency conversion and magnitude/phase packing.
//!
//! The STFT uses a periodic Hann window, center padding by reflection of
//! `fft_size / 2` samples on each side, and no normalization:
//! `X[k, τ] = Σ_n x[n + τ·hop] · w[n] · e^{-2πi kn/N}`. The inverse divides the
//! overlap-added frames by the squared-window envelope, which makes
//! `istft(stft(x))` exact wherever that envelope is nonzero.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array2, Array4, ArrayView2};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { fft_size: 2048, hop: 512, window: 2048, sample_rate: 16_000 }
    }
}

impl StftConfig {
    /// 256-point transform used for desk-scale runs (129 bins).
    pub fn desk() -> Self {
        Self { fft_size: 256, hop: 64, window: 256, sample_rate: 16_000 }
    }

    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.hop == 0 || self.window == 0 || self.sample_rate == 0 {
            return Err(Error::Config(format!("STFT sizes must be positive: {self:?}")));
        }
        if !(self.hop <= self.window && self.window <= self.fft_size) {
            return Err(Error::Config(format!("need hop ≤ window ≤ fft_size: {self:?}")));
        }
        Ok(())
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Signal length recovered from `frames` frames when no explicit length is given.
    pub fn samples_for(&self, frames: usize) -> usize {
        frames.saturating_sub(1) * self.hop
    }

    /// Periodic Hann window of `window` samples, zero-padded and centered in `fft_size`.
    pub fn analysis_window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.fft_size];
        let off = (self.fft_size - self.window) / 2;
        for n in 0..self.window {
            w[off + n] = 0.5 - 0.5 * (2.0 * PI * n as f64 / self.window as f64).cos();
        }
        w
    }

    /// Factor relating spectrogram energy to signal energy:
    /// `Σ_{k,τ} c_k |X[k,τ]|² ≈ energy_normalization() · Σ_n x[n]²`, with `c_k`
    /// counting each non-edge one-sided bin twice.
    pub fn energy_normalization(&self) -> f64 {
        let w2: f64 = self.analysis_window().iter().map(|v| v * v).sum();
        self.fft_size as f64 * w2 / self.hop as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Value("empty waveform".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }
}

/// Complex STFT, `F × T` (frequency bins by frames).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub bins: Array2<Complex64>,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn freq_bins(&self) -> usize {
        self.bins.nrows()
    }

    pub fn frames(&self) -> usize {
        self.bins.ncols()
    }
}

/// Batched `B × 2 × F × T` tensor: channel 0 is magnitude, channel 1 phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagPhaseTensor {
    pub data: Array4<f64>,
}

impl MagPhaseTensor {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.shape()[1] != 2 {
            return Err(Error::Shape(format!("expected 2 channels, got shape {:?}", data.shape())));
        }
        Ok(Self { data })
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn freq_bins(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn magnitude(&self) -> ndarray::ArrayView3<'_, f64> {
        self.data.slice(s![.., 0, .., ..])
    }
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(x[i]);
    }
    out.extend_from_slice(x);
    for i in 0..pad {
        out.push(x[n - 2 - i]);
    }
    out
}

/// Short-time Fourier transform of `w`.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let len = w.samples.len();
    let pad = cfg.fft_size / 2;
    // Reflection needs more than `pad` samples.
    let need = cfg.window.max(pad + 1);
    if len < need {
        return Err(Error::SignalTooShort { len, need });
    }
    let padded = reflect_pad(&w.samples, pad);
    let window = cfg.analysis_window();
    let n_frames = cfg.frames_for(len);
    let n_bins = cfg.freq_bins();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut bins = Array2::zeros((n_bins, n_frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for (n, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            bins[[k, t]] = buf[k];
        }
    }
    Ok(Spectrogram { bins, config: *cfg })
}

/// Inverse STFT by weighted overlap-add.
///
/// With `length = None` the output holds `(T − 1)·hop` samples.
pub fn istft(spec: &Spectrogram, cfg: &StftConfig, length: Option<usize>) -> Result<Waveform> {
    cfg.validate()?;
    if spec.freq_bins() != cfg.freq_bins() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, config expects {}",
            spec.freq_bins(),
            cfg.freq_bins()
        )));
    }
    let n = cfg.fft_size;
    let n_frames = spec.frames();
    let pad = n / 2;
    let out_len = length.unwrap_or_else(|| cfg.samples_for(n_frames));
    let total = (n_frames.saturating_sub(1)) * cfg.hop + n;
    let window = cfg.analysis_window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut acc = vec![0.0; total.max(out_len + pad)];
    let mut env = vec![0.0; acc.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..n_frames {
        for k in 0..n {
            buf[k] = if k < spec.freq_bins() { spec.bins[[k, t]] } else { spec.bins[[n - k, t]].conj() };
        }
        // The imaginary parts of DC and Nyquist do not survive a real signal.
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for k in 0..n {
            acc[start + k] += buf[k].re / n as f64 * window[k];
            env[start + k] += window[k] * window[k];
        }
    }
    let samples = (0..out_len)
        .map(|i| {
            let e = env[i + pad];
            if e > 1e-11 {
                acc[i + pad] / e
            } else {
                0.0
            }
        })
        .collect();
    Ok(Waveform { samples, sample_rate: cfg.sample_rate })
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_phase(p: f64) -> f64 {
    let mut q = p.rem_euclid(2.0 * PI);
    if q > PI {
        q -= 2.0 * PI;
    }
    if q <= -PI {
        q += 2.0 * PI;
    }
    q
}

fn angle(c: Complex64) -> f64 {
    let a = c.im.atan2(c.re);
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// Stacks spectrograms into a `B × 2 × F × T` magnitude/phase tensor.
pub fn pack(specs: &[Spectrogram]) -> Result<MagPhaseTensor> {
    let first = specs.first().ok_or_else(|| Error::Shape("pack() of an empty batch".into()))?;
    let (f, t) = (first.freq_bins(), first.frames());
    let mut data = Array4::zeros((specs.len(), 2, f, t));
    for (b, s) in specs.iter().enumerate() {
        if s.bins.dim() != (f, t) {
            return Err(Error::Shape(format!("ragged batch: item {b} is {:?}, expected {:?}", s.bins.dim(), (f, t))));
        }
        for ((k, tau), c) in s.bins.indexed_iter() {
            data[[b, 0, k, tau]] = c.norm();
            data[[b, 1, k, tau]] = angle(*c);
        }
    }
    Ok(MagPhaseTensor { data })
}

/// Inverse of [`pack`].
pub fn unpack(t: &MagPhaseTensor, cfg: &StftConfig) -> Result<Vec<Spectrogram>> {
    if let Some(v) = t.magnitude().iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::Value(format!("invalid magnitude {v}")));
    }
    Ok((0..t.batch())
        .map(|b| {
            let mag = t.data.slice(s![b, 0, .., ..]);
            let ph = t.data.slice(s![b, 1, .., ..]);
            Spectrogram { bins: polar(mag, ph), config: *cfg }
        })
        .collect())
}

fn polar(mag: ArrayView2<f64>, ph: ArrayView2<f64>) -> Array2<Complex64> {
    let mut out = Array2::zeros(mag.dim());
    ndarray::Zip::from(&mut out).and(mag).and(ph).for_each(|o, &m, &p| *o = Complex64::from_polar(m, p));
    out
}

/// Magnitude/phase tensor back to waveforms, clamping negative magnitudes to zero.
///
/// Decoder outputs are unconstrained reals; this is the lenient conversion
/// used when rendering them to audio.
pub fn magphase_to_waveforms(t: &MagPhaseTensor, cfg: &StftConfig, length: Option<usize>) -> Result<Vec<Waveform>> {
    let mut clamped = t.clone();
    clamped.data.slice_mut(s![.., 0, .., ..]).mapv_inplace(|v| v.max(0.0));
    unpack(&clamped, cfg)?.iter().map(|s| istft(s, cfg, length)).collect()
}

/// Reads a mono 16-bit PCM or 32-bit float WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Value(format!("{}: expected mono audio, found {} channels", path.display(), spec.channels)));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::Value(format!("{}: unsupported sample format {fmt:?}/{bits}", path.display())));
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono 32-bit float WAV file.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        writer.write_sample(s as f32).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Writes a mono 16-bit PCM WAV file.
pub fn write_wav_pcm16(path: &Path, w: &Waveform) -> Result<()> {
    let spec =
        hound::WavSpec { channels: 1, sample_rate: w.sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}
