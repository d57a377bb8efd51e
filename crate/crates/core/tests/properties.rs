use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};
use ndpca_core::channel::{dimension_budget, source_bitrate, ChannelParams};
use ndpca_core::dsp::{istft, pack, stft, unpack, wrap_phase, StftConfig, Waveform};
use ndpca_core::losses::{cosine_correlation_loss, mean_squared_error, nuclear_norm_penalty, psnr_from_mse};
use ndpca_core::ndpca::{allocate_components, compress, reassemble, CompressedBlock, DistributedPca, PcaBasis};
use ndpca_core::pipelines::equal_split;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn channel() -> impl Strategy<Value = ChannelParams> {
    (0.1f64..8.0, 0.01f64..10.0, 1.01f64..1e6, 0.01f64..10.0).prop_map(|(eta, period_t, ratio, d)| ChannelParams {
        eta,
        period_t,
        source_var: ratio * d,
        quant_dist: d,
    })
}

fn gaussian(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn basis(svals: &[f64]) -> PcaBasis {
    let mut s = svals.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let v = s.len();
    PcaBasis { mean: Array1::zeros(v), directions: Array2::eye(v), singular_values: Array1::from(s) }
}

fn bases() -> impl Strategy<Value = Vec<PcaBasis>> {
    prop::collection::vec(prop::collection::vec(0.0f64..10.0, 1..8), 1..5).prop_map(|vs| vs.iter().map(|v| basis(v)).collect())
}

proptest! {
    #[test]
    fn budget_fits_capacity_and_is_maximal(p in channel(), cap in 0.0f64..1e5) {
        let b = dimension_budget(cap, &p).unwrap();
        let rate = source_bitrate(1, &p).unwrap();
        prop_assert!(b as f64 * rate <= cap * (1.0 + 1e-12));
        prop_assert!((b + 1) as f64 * rate > cap * (1.0 - 1e-12));
    }

    #[test]
    fn budget_is_monotone_in_capacity(p in channel(), a in 0.0f64..1e5, extra in 0.0f64..1e5) {
        prop_assert!(dimension_budget(a, &p).unwrap() <= dimension_budget(a + extra, &p).unwrap());
    }

    #[test]
    fn bitrate_is_linear_in_dimension(p in channel(), d in 0usize..512) {
        let one = source_bitrate(1, &p).unwrap();
        let many = source_bitrate(d, &p).unwrap();
        prop_assert!((many - d as f64 * one).abs() <= 1e-9 * many.abs().max(1.0));
    }

    #[test]
    fn allocation_takes_the_largest_values(bs in bases(), frac in 0.0f64..=1.0) {
        let total: usize = bs.iter().map(PcaBasis::dim).sum();
        let budget = (frac * total as f64).round() as usize;
        let a = allocate_components(&bs, budget).unwrap();
        prop_assert_eq!(a.per_source.iter().sum::<usize>(), budget);
        for (k, b) in a.per_source.iter().zip(&bs) {
            prop_assert!(*k <= b.dim());
        }
        let kept: Vec<f64> = a.per_source.iter().zip(&bs).flat_map(|(&k, b)| b.singular_values.iter().take(k).copied()).collect();
        let dropped: Vec<f64> = a.per_source.iter().zip(&bs).flat_map(|(&k, b)| b.singular_values.iter().skip(k).copied()).collect();
        let min_kept = kept.iter().copied().fold(f64::INFINITY, f64::min);
        let max_dropped = dropped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(kept.is_empty() || dropped.is_empty() || min_kept >= max_dropped);
    }

    #[test]
    fn allocation_grows_with_budget(bs in bases()) {
        let total: usize = bs.iter().map(PcaBasis::dim).sum();
        let mut prev = allocate_components(&bs, 0).unwrap();
        for b in 1..=total {
            let cur = allocate_components(&bs, b).unwrap();
            prop_assert!(cur.per_source.iter().zip(&prev.per_source).all(|(c, p)| c >= p));
            prev = cur;
        }
        prop_assert!(allocate_components(&bs, total + 1).is_err());
    }

    #[test]
    fn equal_split_keeps_shares_within_widths(widths in prop::collection::vec(0usize..10, 1..6), frac in 0.0f64..=1.0) {
        let total: usize = widths.iter().sum();
        let budget = (frac * total as f64).round() as usize;
        let a = equal_split(&widths, budget).unwrap();
        prop_assert_eq!(a.per_source.iter().sum::<usize>(), budget);
        for (&k, &w) in a.per_source.iter().zip(&widths) {
            prop_assert!(k <= w);
        }
        let g = widths.len();
        let share = |i: usize| budget / g + usize::from(i < budget % g);
        if widths.iter().enumerate().all(|(i, &w)| w >= share(i)) {
            prop_assert!(a.per_source.iter().enumerate().all(|(i, &k)| k == share(i)));
        }
    }

    #[test]
    fn full_budget_round_trip_is_exact(seed in 0u64..1000, widths in prop::collection::vec(1usize..6, 1..4)) {
        let n = 20;
        let groups: Vec<Array2<f64>> = widths.iter().enumerate().map(|(i, &w)| gaussian(seed * 10 + i as u64, n, w)).collect();
        let views: Vec<_> = groups.iter().map(|g| g.view()).collect();
        let pca = DistributedPca::fit(&views).unwrap();
        let alloc = pca.allocate(pca.total_width()).unwrap();
        let rec = pca.round_trip(&views, &alloc).unwrap();
        let orig = ndarray::concatenate(Axis(1), &views).unwrap();
        prop_assert!((&rec - &orig).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn retained_energy_grows_with_budget(seed in 0u64..1000) {
        let views_owned: Vec<Array2<f64>> = (0..3).map(|i| gaussian(seed * 3 + i, 40, 4)).collect();
        let views: Vec<_> = views_owned.iter().map(|g| g.view()).collect();
        let orig = ndarray::concatenate(Axis(1), &views).unwrap();
        let pca = DistributedPca::fit(&views).unwrap();
        let mut last = f64::INFINITY;
        for b in 0..=pca.total_width() {
            let rec = pca.round_trip(&views, &pca.allocate(b).unwrap()).unwrap();
            let err = mean_squared_error(orig.view().into_dyn(), rec.view().into_dyn()).unwrap();
            prop_assert!(err <= last + 1e-12);
            last = err;
        }
    }

    #[test]
    fn block_bytes_round_trip(seed in 0u64..1000, widths in prop::collection::vec(1usize..6, 1..4), frac in 0.0f64..=1.0) {
        let groups: Vec<Array2<f64>> = widths.iter().enumerate().map(|(i, &w)| gaussian(seed * 7 + i as u64, 12, w)).collect();
        let views: Vec<_> = groups.iter().map(|g| g.view()).collect();
        let pca = DistributedPca::fit(&views).unwrap();
        let budget = (frac * pca.total_width() as f64).round() as usize;
        let alloc = pca.allocate(budget).unwrap();
        let row: Vec<_> = groups.iter().map(|g| g.row(0)).collect();
        let block = compress(&row, &pca.bases, &alloc).unwrap();
        let bytes = block.to_bytes();
        let back = CompressedBlock::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.allocation, &block.allocation);
        for (a, b) in back.coeffs.iter().zip(&block.coeffs) {
            prop_assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6 * y.abs().max(1.0)));
        }
        prop_assert!(reassemble(&back, &pca.bases).is_ok());
        prop_assert!(CompressedBlock::from_bytes(&bytes[..bytes.len() - 1]).is_err() || bytes.len() <= 2);
    }

    #[test]
    fn wrapped_phase_is_in_range_and_equivalent(p in -100.0f64..100.0) {
        let q = wrap_phase(p);
        prop_assert!(q > -PI && q <= PI);
        let k = (p - q) / (2.0 * PI);
        prop_assert!((k - k.round()).abs() < 1e-9);
    }

    #[test]
    fn pack_unpack_and_stft_round_trip(seed in 0u64..1000, batch in 1usize..4) {
        let cfg = StftConfig { fft_size: 32, hop: 8, window: 32, sample_rate: 16_000 };
        let len = cfg.samples_for(12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<Waveform> = (0..batch)
            .map(|_| Waveform::new((0..len).map(|_| rng.sample(StandardNormal)).collect(), 16_000).unwrap())
            .collect();
        let specs: Vec<_> = waves.iter().map(|w| stft(w, &cfg).unwrap()).collect();
        let packed = pack(&specs).unwrap();
        prop_assert!(packed.magnitude().iter().all(|m| *m >= 0.0));
        let back = unpack(&packed, &cfg).unwrap();
        for (a, b) in back.iter().zip(&specs) {
            prop_assert!(a.bins.iter().zip(b.bins.iter()).all(|(x, y)| (x - y).norm() < 1e-9 * y.norm().max(1.0)));
        }
        for (s, w) in back.iter().zip(&waves) {
            let rec = istft(s, &cfg, Some(len)).unwrap();
            let err: f64 = rec.samples.iter().zip(&w.samples).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err < 1e-9 * w.energy().sqrt().max(1.0));
        }
    }

    #[test]
    fn mse_is_nonnegative_and_zero_on_equal(seed in 0u64..1000) {
        let a = gaussian(seed, 4, 5).into_dyn();
        let b = gaussian(seed + 1, 4, 5).into_dyn();
        prop_assert!(mean_squared_error(a.view(), b.view()).unwrap() > 0.0);
        prop_assert_eq!(mean_squared_error(a.view(), a.view()).unwrap(), 0.0);
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(seed in 0u64..1000, n_src in 2usize..5, scale in 0.01f64..100.0) {
        let zs: Vec<Array2<f64>> = (0..n_src).map(|i| gaussian(seed * 5 + i as u64, 3, 4)).collect();
        let views: Vec<_> = zs.iter().map(|z| z.view()).collect();
        let c = cosine_correlation_loss(&views).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
        let scaled: Vec<Array2<f64>> = zs.iter().map(|z| z * scale).collect();
        let sviews: Vec<_> = scaled.iter().map(|z| z.view()).collect();
        prop_assert!((cosine_correlation_loss(&sviews).unwrap() - c).abs() < 1e-12);
        let same = vec![zs[0].view(), zs[0].view()];
        prop_assert!((cosine_correlation_loss(&same).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_falls_as_error_grows(mse in 1e-6f64..1e3, factor in 1.001f64..100.0, peak in 0.1f64..100.0) {
        prop_assert!(psnr_from_mse(mse * factor, peak) < psnr_from_mse(mse, peak));
        prop_assert!((psnr_from_mse(mse, peak) - psnr_from_mse(mse * 10.0, peak) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn nuclear_norm_bounds(seed in 0u64..1000, r in 1usize..6, c in 1usize..6) {
        let z = gaussian(seed, r, c);
        let nuc = nuclear_norm_penalty(z.view());
        let fro = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(nuc >= fro - 1e-9);
        prop_assert!(nuc <= (r.min(c) as f64).sqrt() * fro + 1e-9);
        prop_assert!((nuclear_norm_penalty((&z * -2.0).view()) - 2.0 * nuc).abs() < 1e-9 * nuc.max(1.0));
    }
}
