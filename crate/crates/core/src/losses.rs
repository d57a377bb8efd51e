//! Reconstruction losses, the latent regularizers and the weighted objective.
//!
//! Each term has a plain value function over arrays, used for metrics, and a
//! graph builder with the same definition, used for training.

use std::fmt;

use ndarray::{ArrayView2, ArrayViewD};
use ndpca_autograd::{Graph, NodeId, SVD_MAX_ITER};
use serde::{Deserialize, Serialize};

use crate::dsp::MagPhaseTensor;
use crate::error::{Error, Result};

/// MSE is floored here before entering a logarithm.
pub const MSE_FLOOR: f64 = 1e-12;
/// Spectral SNR never reports below this many dB.
pub const SNR_FLOOR_DB: f64 = -120.0;
/// Norm products below this make a cosine pair contribute zero.
pub const COS_NORM_EPS: f64 = 1e-12;

const DB_PER_LN: f64 = 10.0 / std::f64::consts::LN_10;

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("loss operands differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `½·(1/B)·Σ (gt − dec)²`, summed over channels, bins and frames.
pub fn mse_loss(gt: &MagPhaseTensor, dec: &MagPhaseTensor) -> Result<f64> {
    mse_loss_view(gt.data.view().into_dyn(), dec.data.view().into_dyn())
}

/// [`mse_loss`] over any tensor whose first axis is the batch.
pub fn mse_loss_view(gt: ArrayViewD<f64>, dec: ArrayViewD<f64>) -> Result<f64> {
    same_shape(gt.shape(), dec.shape())?;
    let b = gt.shape().first().copied().unwrap_or(1).max(1);
    let sq: f64 = gt.iter().zip(dec.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(0.5 * sq / b as f64)
}

/// Per-element mean squared error.
pub fn mean_squared_error(gt: ArrayViewD<f64>, dec: ArrayViewD<f64>) -> Result<f64> {
    same_shape(gt.shape(), dec.shape())?;
    let sq: f64 = gt.iter().zip(dec.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sq / gt.len().max(1) as f64)
}

/// Mean over unordered source pairs and batch rows of `|cos(z_i, z_j)|`.
///
/// `latents[i]` is the `B × v` latent of source `i`; all widths must agree.
/// A pair whose norm product is below [`COS_NORM_EPS`] contributes zero.
pub fn cosine_correlation_loss(latents: &[ArrayView2<f64>]) -> Result<f64> {
    if latents.len() < 2 {
        return Err(Error::Value(format!("cosine loss needs at least 2 sources, got {}", latents.len())));
    }
    let shape = latents[0].dim();
    for z in latents {
        if z.dim() != shape {
            return Err(Error::Shape(format!("cosine loss latents differ: {:?} vs {:?}", z.dim(), shape)));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut degenerate = 0usize;
    for i in 0..latents.len() {
        for j in i + 1..latents.len() {
            for (a, b) in latents[i].rows().into_iter().zip(latents[j].rows()) {
                let prod = a.dot(&a).sqrt() * b.dot(&b).sqrt();
                if prod < COS_NORM_EPS {
                    degenerate += 1;
                } else {
                    total += (a.dot(&b) / prod).abs();
                }
                count += 1;
            }
        }
    }
    if degenerate > 0 {
        log::warn!("cosine loss: {degenerate} zero-norm latent pairs counted as 0");
    }
    Ok(total / count.max(1) as f64)
}

/// Error-to-signal energy ratio in dB, floored at [`SNR_FLOOR_DB`].
pub fn spectral_snr_loss(gt: &MagPhaseTensor, dec: &MagPhaseTensor) -> Result<f64> {
    spectral_snr_view(gt.data.view().into_dyn(), dec.data.view().into_dyn())
}

pub fn spectral_snr_view(gt: ArrayViewD<f64>, dec: ArrayViewD<f64>) -> Result<f64> {
    same_shape(gt.shape(), dec.shape())?;
    let sig: f64 = gt.iter().map(|x| x * x).sum();
    if sig == 0.0 {
        return Err(Error::Value("spectral SNR of an all-zero reference".into()));
    }
    let err: f64 = gt.iter().zip(dec.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    if err == 0.0 {
        return Ok(SNR_FLOOR_DB);
    }
    Ok((10.0 * (err / sig).log10()).max(SNR_FLOOR_DB))
}

/// PSNR in dB for a per-element MSE and a peak value.
pub fn psnr_from_mse(mse: f64, x_max: f64) -> f64 {
    10.0 * (x_max * x_max / mse.max(MSE_FLOOR)).log10()
}

/// Largest ground-truth magnitude, the PSNR peak.
pub fn peak_magnitude(gt: &MagPhaseTensor) -> f64 {
    gt.magnitude().iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `−PSNR`, so that lower is better like every other term.
pub fn psnr_loss(gt: &MagPhaseTensor, dec: &MagPhaseTensor, x_max: f64) -> Result<f64> {
    Ok(-psnr_metric_with_peak(gt, dec, x_max)?)
}

/// PSNR with the peak taken from the ground-truth magnitude channel.
pub fn psnr_metric(gt: &MagPhaseTensor, dec: &MagPhaseTensor) -> Result<f64> {
    psnr_metric_with_peak(gt, dec, peak_magnitude(gt))
}

pub fn psnr_metric_with_peak(gt: &MagPhaseTensor, dec: &MagPhaseTensor, x_max: f64) -> Result<f64> {
    let mse = mean_squared_error(gt.data.view().into_dyn(), dec.data.view().into_dyn())?;
    Ok(psnr_from_mse(mse, x_max))
}

/// Sum of singular values of a 2-D latent matrix; NaN for non-finite input.
pub fn nuclear_norm_penalty(z: ArrayView2<f64>) -> f64 {
    let (r, c) = z.dim();
    if r == 0 || c == 0 {
        return 0.0;
    }
    if z.iter().any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    let m = nalgebra::DMatrix::from_fn(r, c, |i, j| z[[i, j]]);
    m.try_svd(false, false, f64::EPSILON, SVD_MAX_ITER).map_or(f64::NAN, |s| s.singular_values.iter().sum())
}

/// Graph builders mirroring the value functions above.
pub mod graph {
    use super::*;

    pub fn mse(g: &mut Graph, gt: NodeId, dec: NodeId) -> NodeId {
        let b = g.shape(gt).first().copied().unwrap_or(1).max(1);
        let d = g.sub(gt, dec);
        let sq = g.square(d);
        let s = g.sum(sq);
        g.scale(s, 0.5 / b as f64)
    }

    /// `latents[i]` are `[B, v]` nodes of equal shape.
    pub fn cosine(g: &mut Graph, latents: &[NodeId]) -> NodeId {
        assert!(latents.len() >= 2, "cosine loss needs at least 2 sources");
        let norms: Vec<NodeId> = latents
            .iter()
            .map(|&z| {
                let sq = g.square(z);
                let s = g.sum_axis(sq, 1);
                g.sqrt_eps(s)
            })
            .collect();
        let mut terms = Vec::new();
        for i in 0..latents.len() {
            for j in i + 1..latents.len() {
                let p = g.mul(latents[i], latents[j]);
                let dot = g.sum_axis(p, 1);
                let prod = g.mul(norms[i], norms[j]);
                let mask = g.value(prod).mapv(|v| if v < COS_NORM_EPS { 0.0 } else { 1.0 });
                let denom = g.clamp(prod, COS_NORM_EPS, f64::INFINITY);
                let c = g.div(dot, denom);
                let a = g.abs(c);
                let m = g.constant(mask);
                terms.push(g.mul(a, m));
            }
        }
        let all = g.concat(&terms, 1);
        g.mean(all)
    }

    pub fn spectral_snr(g: &mut Graph, gt: NodeId, dec: NodeId) -> NodeId {
        let sig: f64 = g.value(gt).iter().map(|x| x * x).sum();
        let d = g.sub(gt, dec);
        let sq = g.square(d);
        let err = g.sum(sq);
        let floor = sig.max(f64::MIN_POSITIVE) * 10f64.powf(SNR_FLOOR_DB / 10.0);
        let err = g.clamp(err, floor, f64::INFINITY);
        let gsq = g.square(gt);
        let energy = g.sum(gsq);
        let energy = g.clamp(energy, f64::MIN_POSITIVE, f64::INFINITY);
        let ratio = g.div(err, energy);
        let l = g.ln(ratio);
        g.scale(l, DB_PER_LN)
    }

    /// `−PSNR` with a fixed peak.
    pub fn psnr_loss(g: &mut Graph, gt: NodeId, dec: NodeId, x_max: f64) -> NodeId {
        let d = g.sub(gt, dec);
        let sq = g.square(d);
        let mse = g.mean(sq);
        let mse = g.clamp(mse, MSE_FLOOR, f64::INFINITY);
        let l = g.ln(mse);
        let db = g.scale(l, DB_PER_LN);
        g.add_scalar(db, -20.0 * x_max.log10())
    }

    pub fn nuclear(g: &mut Graph, z: NodeId) -> NodeId {
        g.nuclear_norm(z)
    }
}

trait SqrtEps {
    fn sqrt_eps(&mut self, x: NodeId) -> NodeId;
}

impl SqrtEps for Graph {
    /// `√x` whose derivative stays finite at zero.
    fn sqrt_eps(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }
}

/// Weights of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mse: f64,
    pub cos: f64,
    pub snr: f64,
    pub psnr: f64,
    pub nuclear: f64,
    pub task: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mse: 1.0, cos: 0.1, snr: 0.01, psnr: 0.0, nuclear: 0.001, task: 1.0, perceptual: 0.1 }
    }
}

impl LossWeights {
    /// Reconstruction terms only.
    pub fn task_agnostic() -> Self {
        Self { task: 0.0, perceptual: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 7] {
        [self.mse, self.cos, self.snr, self.psnr, self.nuclear, self.task, self.perceptual]
    }

    pub fn is_task_aware(&self) -> bool {
        self.task > 0.0 || self.perceptual > 0.0
    }
}

/// Unweighted term values. Absent terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub mse: f64,
    pub cos: f64,
    pub snr: f64,
    pub psnr: f64,
    pub nuclear: f64,
    pub task: f64,
    pub perceptual: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 7] {
        [self.mse, self.cos, self.snr, self.psnr, self.nuclear, self.task, self.perceptual]
    }
}

pub const TERM_NAMES: [&str; 7] = ["mse", "cos", "snr", "psnr", "nuclear", "task", "perceptual"];

/// Term values with their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    pub total: f64,
}

/// `Σ w·term`; a non-finite term is an error.
pub fn composite_loss(terms: LossTerms, w: &LossWeights) -> Result<LossBreakdown> {
    let vals = terms.as_array();
    if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::Value(format!("loss term {} is {}", TERM_NAMES[i], vals[i])));
    }
    let total = vals.iter().zip(w.as_array()).filter(|(_, w)| *w != 0.0).map(|(v, w)| v * w).sum();
    Ok(LossBreakdown { terms, total })
}

/// Header of the per-step loss log.
pub const CSV_HEADER: &str = "step,mse,cos,snr,psnr,nuclear,task,perceptual,total";

/// One row of the loss log, floats printed with round-trip precision.
pub struct CsvRow<'a>(pub u64, pub &'a LossBreakdown);

impl fmt::Display for CsvRow<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)?;
        for v in self.1.terms.as_array() {
            write!(f, ",{v:?}")?;
        }
        write!(f, ",{:?}", self.1.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4, Axis};

    fn mp(data: Array4<f64>) -> MagPhaseTensor {
        MagPhaseTensor { data }
    }

    #[test]
    fn mse_examples() {
        let gt = mp(Array4::ones((1, 1, 2, 2)));
        let dec = mp(Array4::zeros((1, 1, 2, 2)));
        assert_eq!(mse_loss(&gt, &dec).unwrap(), 2.0);
        assert_eq!(mse_loss(&gt, &gt).unwrap(), 0.0);
        let dec2 = mp(Array4::from_elem((1, 1, 2, 2), -1.0));
        assert_eq!(mse_loss(&gt, &dec2).unwrap(), 8.0);
        assert!(mse_loss(&gt, &mp(Array4::zeros((1, 1, 2, 3)))).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = array![[1.0, 0.0]];
        let b = array![[0.0, 1.0]];
        let c = array![[1.0, 1.0]] / 2f64.sqrt();
        assert!((cosine_correlation_loss(&[a.view(), a.view()]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_correlation_loss(&[a.view(), b.view()]).unwrap(), 0.0);
        assert!((cosine_correlation_loss(&[a.view(), c.view()]).unwrap() - 0.70711).abs() < 1e-5);
        let z = array![[0.0, 0.0]];
        assert_eq!(cosine_correlation_loss(&[a.view(), z.view()]).unwrap(), 0.0);
        assert!(cosine_correlation_loss(&[a.view()]).is_err());
    }

    #[test]
    fn snr_examples() {
        let gt = mp(Array4::from_elem((1, 2, 2, 2), 1.0));
        assert_eq!(spectral_snr_loss(&gt, &gt).unwrap(), SNR_FLOOR_DB);
        let zero = mp(Array4::zeros((1, 2, 2, 2)));
        assert!(spectral_snr_loss(&gt, &zero).unwrap().abs() < 1e-12);
        let close = mp(Array4::from_elem((1, 2, 2, 2), 0.9));
        assert!((spectral_snr_loss(&gt, &close).unwrap() + 20.0).abs() < 1e-9);
        assert!(spectral_snr_loss(&zero, &gt).is_err());
    }

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0, 1.0), 0.0);
        assert!((psnr_from_mse(0.0, 1.0) - 120.0).abs() < 1e-9);
        let gt = mp(Array4::from_elem((1, 2, 1, 1), 1.0));
        let dec = mp(array![[[[0.9]], [[1.1]]]]);
        assert!((psnr_metric(&gt, &dec).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr_loss(&gt, &dec, 1.0).unwrap(), -psnr_metric(&gt, &dec).unwrap());
    }

    #[test]
    fn nuclear_examples() {
        assert_eq!(nuclear_norm_penalty(ndarray::Array2::zeros((3, 2)).view()), 0.0);
        assert!((nuclear_norm_penalty(ndarray::Array2::eye(4).view()) - 4.0).abs() < 1e-12);
        let u = array![1.0, 2.0, 2.0];
        let v = array![3.0, 4.0];
        let outer = u.view().insert_axis(Axis(1)).dot(&v.view().insert_axis(Axis(0)));
        assert!((nuclear_norm_penalty(outer.view()) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn composite_examples() {
        let terms = LossTerms { mse: 2.0, cos: 0.5, snr: -10.0, psnr: -20.0, nuclear: 3.0, task: 1.5, perceptual: 0.25 };
        let zero = LossWeights { mse: 0.0, cos: 0.0, snr: 0.0, psnr: 0.0, nuclear: 0.0, task: 0.0, perceptual: 0.0 };
        assert_eq!(composite_loss(terms, &zero).unwrap().total, 0.0);
        let only = LossWeights { snr: 3.0, ..zero };
        assert_eq!(composite_loss(terms, &only).unwrap().total, -30.0);
        let bad = LossTerms { task: f64::NAN, ..terms };
        assert!(composite_loss(bad, &zero).is_err());
        let row = CsvRow(7, &composite_loss(terms, &only).unwrap()).to_string();
        assert_eq!(row, "7,2.0,0.5,-10.0,-20.0,3.0,1.5,0.25,-30.0");
        assert_eq!(CSV_HEADER.split(',').count(), row.split(',').count());
    }

    #[test]
    fn graph_builders_match_values() {
        let gt = Array4::from_shape_fn((2, 2, 3, 2), |(a, b, c, d)| 1.0 + (a + 2 * b + 3 * c + d) as f64 * 0.1);
        let dec = gt.mapv(|v| v * 0.8 + 0.05);
        let (gtm, decm) = (mp(gt.clone()), mp(dec.clone()));
        let mut g = Graph::new();
        let a = g.constant(gt.clone().into_dyn());
        let b = g.constant(dec.clone().into_dyn());
        let m = graph::mse(&mut g, a, b);
        assert!((g.item(m) - mse_loss(&gtm, &decm).unwrap()).abs() < 1e-12);
        let s = graph::spectral_snr(&mut g, a, b);
        assert!((g.item(s) - spectral_snr_loss(&gtm, &decm).unwrap()).abs() < 1e-9);
        let p = graph::psnr_loss(&mut g, a, b, 2.5);
        assert!((g.item(p) - psnr_loss(&gtm, &decm, 2.5).unwrap()).abs() < 1e-9);
        let z1 = array![[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]];
        let z2 = array![[-1.0, 0.5, 2.0], [1.0, 1.0, 1.0]];
        let n1 = g.constant(z1.clone().into_dyn());
        let n2 = g.constant(z2.clone().into_dyn());
        let c = graph::cosine(&mut g, &[n1, n2]);
        assert!((g.item(c) - cosine_correlation_loss(&[z1.view(), z2.view()]).unwrap()).abs() < 1e-12);
    }
}
