use std::fs;
use std::path::Path;

use ndpca_core::codec::ArchConfig;
use ndpca_core::data::SynthConfig;
use ndpca_core::dsp::StftConfig;
use ndpca_core::enhance::ScoreNetConfig;
use ndpca_core::harness::{self, Checkpoint, DataConfig, ExperimentConfig, CHECKPOINT_FILE, LOSS_LOG_FILE};
use ndpca_core::losses::LossWeights;
use ndpca_core::percept::{ScaleConfig, StftScale};
use ndpca_core::pipelines::Grouping;
use ndpca_core::Error;

fn small_config(dir: &Path, task_aware: bool) -> ExperimentConfig {
    let stft = StftConfig { fft_size: 16, hop: 4, window: 16, sample_rate: 16_000 };
    let mut c = ExperimentConfig::desk();
    c.data = DataConfig { synth: SynthConfig { n_clips: 12, ..SynthConfig::default() }, stft, frames: 4, ..DataConfig::default() };
    c.pipeline.variant = Grouping::E4D1;
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
    c.disc = ScaleConfig {
        scales: [4, 8].map(|n| StftScale { fft_size: n, hop: n / 4 }).to_vec(),
        channels: 2,
        n_layers: 2,
        ..ScaleConfig::desk()
    };
    if task_aware {
        c.weights = LossWeights::default();
    }
    c.budgets = vec![2, 4, 8];
    c.epochs = 2;
    c.batch_size = 4;
    c.out_dir = dir.to_path_buf();
    c.checkpoint_every = 1;
    c
}

fn trained_state(c: &Checkpoint) -> impl PartialEq + std::fmt::Debug + '_ {
    (&c.pipeline, &c.score, &c.disc, &c.gen_opt, &c.disc_opt, c.step, c.epochs_done)
}

#[test]
fn two_epoch_smoke_run_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), true);
    cfg.lr = 2e-3;
    let data = harness::prepare_data(&cfg.data, cfg.seed).unwrap();
    let mut state = Checkpoint::init(&cfg).unwrap();
    let summaries = harness::run_training(&mut state, &data.train).unwrap();
    assert_eq!(summaries.len(), 2);
    assert!(summaries[1].mean_total < summaries[0].mean_total, "{summaries:?}");
    assert!(dir.path().join(CHECKPOINT_FILE).exists());
    let log = fs::read_to_string(dir.path().join(LOSS_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count() as u64, 1 + state.step);
    assert!(state.pipeline.pca.is_some());
}

#[test]
fn resume_matches_uninterrupted_run_bitwise() {
    let straight = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let cfg = small_config(straight.path(), true);
    let data = harness::prepare_data(&cfg.data, cfg.seed).unwrap();
    let full = harness::train_on(&cfg, &data).unwrap();

    let mut first = small_config(split.path(), true);
    first.epochs = 1;
    harness::train_on(&first, &data).unwrap();
    let resumed = harness::resume(&split.path().join(CHECKPOINT_FILE), 2, &data).unwrap();

    assert_eq!(trained_state(&resumed), trained_state(&full));
    let a = fs::read_to_string(straight.path().join(LOSS_LOG_FILE)).unwrap();
    let b = fs::read_to_string(split.path().join(LOSS_LOG_FILE)).unwrap();
    assert_eq!(a, b, "loss logs differ after resuming");
    let reloaded = Checkpoint::load(&split.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(trained_state(&reloaded), trained_state(&resumed));
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), false);
    cfg.epochs = 1;
    let data = harness::prepare_data(&cfg.data, cfg.seed).unwrap();
    let mut state = harness::train_on(&cfg, &data).unwrap();
    let steps_before = state.step;

    state.config.epochs = 3;
    state.gen_opt.lr = 1e300;
    let err = harness::run_training(&mut state, &data.train).unwrap_err();
    let Error::NonFiniteLoss { step, .. } = err else { panic!("expected a non-finite loss, got {err}") };
    assert!(step > steps_before);

    let saved = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(saved.step, step, "saved state should be the one that produced the bad step");
    assert!(saved.pipeline.params.all_finite());
    let log = fs::read_to_string(dir.path().join(LOSS_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count() as u64, 1 + step);
}

#[test]
fn identical_config_and_seed_reproduce_sweep_bitwise() {
    let sweep = |dir: &Path| {
        let cfg = small_config(dir, true);
        let data = harness::prepare_data(&cfg.data, cfg.seed).unwrap();
        let ck = harness::train_on(&cfg, &data).unwrap();
        harness::eval_bandwidth_sweep(&[ck], &cfg.budgets, &data.test).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (sweep(a.path()), sweep(b.path()));
    assert_eq!(ra.rows.len(), 3);
    for (x, y) in ra.rows.iter().zip(&rb.rows) {
        assert_eq!(x.psnr_db.to_bits(), y.psnr_db.to_bits());
        assert_eq!(x.task.to_bits(), y.task.to_bits());
        assert_eq!(x.perc.to_bits(), y.perc.to_bits());
    }
    assert_eq!(ra, rb);
}
