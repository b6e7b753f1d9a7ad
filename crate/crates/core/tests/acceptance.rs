//! Acceptance suite: one test per criterion, each printing its own
//! pass/fail line through the harness. The reference model is trained once
//! (deterministically) and shared across criteria; benchmark runs are
//! cached so later criteria can reuse earlier arms.

mod common;

use std::sync::OnceLock;

use common::{fd_at, rel_err, spread_coords, FD_H};
use inpaint_core::bench::{self, Arm};
use inpaint_core::codec::{downsample_mask, encode};
use inpaint_core::denoiser::{DenoiserConfig, DenoiserModel, Params};
use inpaint_core::guidance::{
    guided_eps, guided_eps_with_heads, run_guided, GuidanceHead, GuidanceSpec, GuideCtx,
};
use inpaint_core::metrics::benchmark_suite;
use inpaint_core::noise_opt::{
    self, aggregate_cross, aggregate_self, attention_mask_loss, lambda3, loss_kl, optimize_noise,
    NoiseDistribution, PrinoConfig, PrinoExit,
};
use inpaint_core::rewards::{reward_align, reward_coherence, reward_preference, x0_estimate};
use inpaint_core::rng::stream;
use inpaint_core::scene::{training_corpus, Scene};
use inpaint_core::schedule::{denoise_step, modulate, Modulator, NoiseSchedule};
use inpaint_core::tape::Tape;
use inpaint_core::tensor::Tensor;
use inpaint_core::train::{train, TrainConfig, TrainReport};

// ── pinned reference values (regression baselines from the reference run) ──

/// Training loss of the reference run, pinned after the first execution.
const PIN_TRAIN_INITIAL_LOSS: f64 = 0.0; // filled by the reference run
const PIN_TRAIN_FINAL_LOSS: f64 = 0.0;
/// Alignment accuracies of the four arms on the pinned suite.
const PIN_ALIGN_BASE: f64 = 0.0;
const PIN_ALIGN_PRINO: f64 = 0.0;
const PIN_ALIGN_DEGU: f64 = 0.0;
const PIN_ALIGN_FULL: f64 = 0.0;

struct Setup {
    model: DenoiserModel,
    sched: NoiseSchedule,
    suite: Vec<Scene>,
    report: TrainReport,
}

fn setup() -> &'static Setup {
    static CELL: OnceLock<Setup> = OnceLock::new();
    CELL.get_or_init(|| {
        let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let corpus = training_corpus(4096);
        let mut model = DenoiserModel::init(DenoiserConfig::default(), 0);
        let cfg = TrainConfig::default();
        let report = train(&mut model, &corpus, &sched, &cfg, 0).expect("reference training");
        Setup {
            model,
            sched,
            suite: benchmark_suite(),
            report,
        }
    })
}

fn arm_results() -> &'static Vec<bench::SuiteResult> {
    static CELL: OnceLock<Vec<bench::SuiteResult>> = OnceLock::new();
    CELL.get_or_init(|| {
        let s = setup();
        bench::run_arms(
            &s.model,
            &s.suite,
            &Arm::ALL,
            &PrinoConfig::default(),
            &GuidanceSpec::default(),
            &s.sched,
            0,
        )
        .expect("benchmark arms")
    })
}

// placeholder for the criteria implemented below
#[test]
fn acceptance_scaffold_builds() {
    let _ = (PIN_TRAIN_INITIAL_LOSS, PIN_TRAIN_FINAL_LOSS);
    let _ = (PIN_ALIGN_BASE, PIN_ALIGN_PRINO, PIN_ALIGN_DEGU, PIN_ALIGN_FULL);
}
