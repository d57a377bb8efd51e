//! Neural distributed PCA over per-source encoder latents.
//!
//! Each source fits a PCA basis on its own latents. Given a total budget `B`,
//! the `B` largest singular values across all sources are selected; the
//! number taken from source `i` is its allocation `k_i`. Source `i` then sends
//! the coefficients of its latent on its first `k_i` principal directions, and
//! the receiver rebuilds `ẑ_i = mean_i + U_i[:, :k_i]·coeffs_i` and
//! concatenates the sources. Bases are fit once; any budget is served by
//! truncation.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use ndpca_autograd::SVD_MAX_ITER;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Principal directions of one source's latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Array1<f64>,
    /// `v × v`, orthonormal columns ordered by decreasing singular value.
    pub directions: Array2<f64>,
    /// Singular values of the centered sample matrix, nonincreasing, length `v`.
    pub singular_values: Array1<f64>,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Coefficients of `z − mean` on the first `k` directions.
    pub fn project(&self, z: ArrayView1<f64>, k: usize) -> Result<Array1<f64>> {
        self.check_k(k)?;
        if z.len() != self.dim() {
            return Err(Error::Shape(format!("latent of width {} for a basis of width {}", z.len(), self.dim())));
        }
        let centered = &z - &self.mean;
        Ok(self.directions.slice(s![.., ..k]).t().dot(&centered))
    }

    /// `mean + U[:, :k]·coeffs`.
    pub fn reconstruct(&self, coeffs: ArrayView1<f64>) -> Result<Array1<f64>> {
        let k = coeffs.len();
        self.check_k(k)?;
        Ok(&self.mean + &self.directions.slice(s![.., ..k]).dot(&coeffs))
    }

    /// Row-wise projection of an `N × v` matrix onto the first `k` directions.
    pub fn project_rows(&self, z: ArrayView2<f64>, k: usize) -> Result<Array2<f64>> {
        self.check_k(k)?;
        if z.ncols() != self.dim() {
            return Err(Error::Shape(format!("latents of width {} for a basis of width {}", z.ncols(), self.dim())));
        }
        let centered = &z - &self.mean.view().insert_axis(Axis(0));
        Ok(centered.dot(&self.directions.slice(s![.., ..k])))
    }

    pub fn reconstruct_rows(&self, coeffs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let k = coeffs.ncols();
        self.check_k(k)?;
        Ok(coeffs.dot(&self.directions.slice(s![.., ..k]).t()) + &self.mean.view().insert_axis(Axis(0)))
    }

    /// `U_k U_kᵀ`, the rank-`k` orthogonal projector in latent space.
    pub fn projector(&self, k: usize) -> Result<Array2<f64>> {
        self.check_k(k)?;
        let u = self.directions.slice(s![.., ..k]);
        Ok(u.dot(&u.t()))
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k > self.dim() {
            return Err(Error::Value(format!("{k} components requested from a basis of width {}", self.dim())));
        }
        Ok(())
    }
}

/// Fits a PCA basis to the rows of `samples` (`N × v`, `N ≥ 2`).
///
/// Rank-deficient data is fine: trailing singular values are zero and the
/// directions are still completed to an orthonormal basis. Each direction is
/// signed so that its first nonzero entry is positive.
pub fn fit_local_pca(samples: ArrayView2<f64>) -> Result<PcaBasis> {
    let (n, v) = samples.dim();
    if n < 2 {
        return Err(Error::Value(format!("PCA needs at least 2 samples, got {n}")));
    }
    if v == 0 {
        return Err(Error::Value("PCA on zero-width latents".into()));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::Value("non-finite latent sample".into()));
    }
    let mean = samples.mean_axis(Axis(0)).expect("n ≥ 2");
    // Zero rows leave XᵀX unchanged and guarantee a full v × v right basis.
    let rows = n.max(v);
    let mut centered = nalgebra::DMatrix::<f64>::zeros(rows, v);
    for i in 0..n {
        for j in 0..v {
            centered[(i, j)] = samples[[i, j]] - mean[j];
        }
    }
    let svd = centered
        .try_svd(false, true, f64::EPSILON, SVD_MAX_ITER)
        .ok_or_else(|| Error::Value("PCA decomposition did not converge".into()))?;
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let mut directions = Array2::zeros((v, v));
    let mut singular_values = Array1::zeros(v);
    for (col, &src) in order.iter().enumerate() {
        singular_values[col] = svd.singular_values[src].max(0.0);
        let row = v_t.row(src);
        let sign = row.iter().find(|x| x.abs() > 1e-12).map_or(1.0, |x| x.signum());
        for j in 0..v {
            directions[[j, col]] = sign * row[j];
        }
    }
    Ok(PcaBasis { mean, directions, singular_values })
}

/// Per-source component counts `k_i` with `Σ k_i = budget`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandwidthAllocation {
    /// Indexed by source id.
    pub per_source: Vec<usize>,
    pub budget: usize,
}

impl BandwidthAllocation {
    pub fn new(per_source: Vec<usize>) -> Self {
        let budget = per_source.iter().sum();
        Self { per_source, budget }
    }

    pub fn validate(&self, bases: &[PcaBasis]) -> Result<()> {
        if self.per_source.len() != bases.len() {
            return Err(Error::Shape(format!("allocation for {} sources, {} bases", self.per_source.len(), bases.len())));
        }
        if self.per_source.iter().sum::<usize>() != self.budget {
            return Err(Error::Value("allocation counts do not sum to the budget".into()));
        }
        for (i, (&k, b)) in self.per_source.iter().zip(bases).enumerate() {
            if k > b.dim() {
                return Err(Error::Value(format!("source {i}: {k} components exceed width {}", b.dim())));
            }
        }
        Ok(())
    }
}

/// Selects the `budget` globally largest singular values across sources.
///
/// Ties go to the lower source id, then the lower component index. Because
/// each source's singular values are sorted, the selected components of a
/// source are always its leading ones.
pub fn allocate_components(bases: &[PcaBasis], budget: usize) -> Result<BandwidthAllocation> {
    let total: usize = bases.iter().map(PcaBasis::dim).sum();
    if budget > total {
        return Err(Error::BudgetOutOfRange { budget, max: total });
    }
    let mut candidates: Vec<(f64, usize, usize)> = bases
        .iter()
        .enumerate()
        .flat_map(|(src, b)| b.singular_values.iter().enumerate().map(move |(c, &sv)| (sv, src, c)))
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut per_source = vec![0; bases.len()];
    for &(_, src, _) in candidates.iter().take(budget) {
        per_source[src] += 1;
    }
    Ok(BandwidthAllocation { per_source, budget })
}

/// What each source puts on the air for one latent sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressedBlock {
    pub coeffs: Vec<Array1<f64>>,
    pub allocation: BandwidthAllocation,
}

impl CompressedBlock {
    /// Little-endian wire format: `u16` source count, then `(source_id: u16,
    /// k: u16)` per source, then all coefficients as `f32` in source order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.coeffs.len() as u16).to_le_bytes());
        for (id, c) in self.coeffs.iter().enumerate() {
            out.extend_from_slice(&(id as u16).to_le_bytes());
            out.extend_from_slice(&(c.len() as u16).to_le_bytes());
        }
        for c in &self.coeffs {
            for &v in c {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Value("truncated compressed block".into());
        let u16_at = |i: usize| -> Result<u16> {
            bytes.get(i..i + 2).map(|b| u16::from_le_bytes([b[0], b[1]])).ok_or_else(short)
        };
        let n = u16_at(0)? as usize;
        let mut ks = vec![0usize; n];
        for i in 0..n {
            let id = u16_at(2 + 4 * i)? as usize;
            let k = u16_at(4 + 4 * i)? as usize;
            if id >= n {
                return Err(Error::Value(format!("source id {id} out of range for {n} sources")));
            }
            ks[id] = k;
        }
        let mut pos = 2 + 4 * n;
        let mut coeffs = Vec::with_capacity(n);
        for &k in &ks {
            let mut c = Array1::zeros(k);
            for v in c.iter_mut() {
                let b = bytes.get(pos..pos + 4).ok_or_else(short)?;
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
                pos += 4;
            }
            coeffs.push(c);
        }
        if pos != bytes.len() {
            return Err(Error::Value(format!("{} trailing bytes in compressed block", bytes.len() - pos)));
        }
        Ok(Self { coeffs, allocation: BandwidthAllocation::new(ks) })
    }
}

/// Projects each source's latent `z_i` onto its allocated directions.
pub fn compress(latents: &[ArrayView1<f64>], bases: &[PcaBasis], alloc: &BandwidthAllocation) -> Result<CompressedBlock> {
    alloc.validate(bases)?;
    if latents.len() != bases.len() {
        return Err(Error::Shape(format!("{} latents for {} bases", latents.len(), bases.len())));
    }
    let coeffs = latents
        .iter()
        .zip(bases)
        .zip(&alloc.per_source)
        .map(|((z, b), &k)| b.project(*z, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressedBlock { coeffs, allocation: alloc.clone() })
}

/// Receiver side: rebuilds and concatenates every source's latent.
pub fn reassemble(block: &CompressedBlock, bases: &[PcaBasis]) -> Result<Array1<f64>> {
    block.allocation.validate(bases)?;
    let mut out = Vec::new();
    for ((c, b), &k) in block.coeffs.iter().zip(bases).zip(&block.allocation.per_source) {
        if c.len() != k {
            return Err(Error::Shape(format!("{} coefficients for an allocation of {k}", c.len())));
        }
        out.extend(b.reconstruct(c.view())?);
    }
    Ok(Array1::from(out))
}

/// Frozen per-source bases serving any budget by truncation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributedPca {
    pub bases: Vec<PcaBasis>,
}

impl DistributedPca {
    /// Fits one basis per source from `N × v_i` latent matrices.
    pub fn fit(latents: &[ArrayView2<f64>]) -> Result<Self> {
        Ok(Self { bases: latents.iter().map(|z| fit_local_pca(*z)).collect::<Result<_>>()? })
    }

    pub fn widths(&self) -> Vec<usize> {
        self.bases.iter().map(PcaBasis::dim).collect()
    }

    pub fn total_width(&self) -> usize {
        self.widths().iter().sum()
    }

    pub fn allocate(&self, budget: usize) -> Result<BandwidthAllocation> {
        allocate_components(&self.bases, budget)
    }

    /// Compress-and-reassemble for a batch: per-source `N × v_i` in, `N × Σv_i` out.
    pub fn round_trip(&self, latents: &[ArrayView2<f64>], alloc: &BandwidthAllocation) -> Result<Array2<f64>> {
        alloc.validate(&self.bases)?;
        if latents.len() != self.bases.len() {
            return Err(Error::Shape(format!("{} latent groups for {} bases", latents.len(), self.bases.len())));
        }
        let parts = latents
            .iter()
            .zip(&self.bases)
            .zip(&alloc.per_source)
            .map(|((z, b), &k)| b.reconstruct_rows(b.project_rows(*z, k)?.view()))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))
    }
}

/// Joint PCA over concatenated latents, keeping the top `budget` components.
pub fn joint_pca_truncate(samples: ArrayView2<f64>, budget: usize) -> Result<(PcaBasis, Array2<f64>)> {
    let basis = fit_local_pca(samples)?;
    if budget > basis.dim() {
        return Err(Error::BudgetOutOfRange { budget, max: basis.dim() });
    }
    let coeffs = basis.project_rows(samples, budget)?;
    let rec = basis.reconstruct_rows(coeffs.view())?;
    Ok((basis, rec))
}

/// Mean squared reconstruction error per sample, `E‖ẑ − z‖²`.
pub fn mean_sq_error(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let d = &a - &b;
    d.iter().map(|x| x * x).sum::<f64>() / a.nrows().max(1) as f64
}
