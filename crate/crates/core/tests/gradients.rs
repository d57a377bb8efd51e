mod common;

use common::GradFamily;

fn assert_family(f: GradFamily) {
    assert!(f.passed(), "{}: max rel err {:.3e} over {} instances (tol {:.0e})", f.name, f.max_rel_err, f.instances, f.tol);
}

#[test]
fn mse_gradient() {
    assert_family(common::mse_family());
}

#[test]
fn cosine_gradient() {
    assert_family(common::cosine_family());
}

#[test]
fn spectral_snr_gradient() {
    assert_family(common::snr_family());
}

#[test]
fn psnr_gradient() {
    assert_family(common::psnr_family());
}

#[test]
fn nuclear_norm_gradient() {
    assert_family(common::nuclear_family());
}

#[test]
fn encoder_gradient() {
    assert_family(common::encoder_family());
}

#[test]
fn decoder_gradient() {
    assert_family(common::decoder_family());
}

#[test]
fn discriminator_gradient() {
    assert_family(common::discriminator_family());
}

#[test]
fn perceptual_gradient() {
    assert_family(common::perceptual_family());
}

#[test]
fn score_matching_gradient() {
    assert_family(common::dsm_family());
}

#[test]
fn inverse_stft_gradient() {
    assert_family(common::istft_family());
}
