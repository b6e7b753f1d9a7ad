//! Benchmark orchestration: the four ablation arms, the modulator ablation,
//! and CSV rendering. Scenes run in parallel; every scene derives its own
//! seed from the run seed so arms are paired draw-for-draw.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{downsample_mask, encode};
use crate::denoiser::DenoiserModel;
use crate::guidance::{run_guided, GuidanceError, GuidanceSpec, GuidedRun};
use crate::metrics::{evaluate, MetricReport, SceneMetrics};
use crate::noise_opt::{optimize_noise, PrinoConfig, PrinoResult};
use crate::rewards::{reward_align_value, reward_coherence_value, reward_preference_value};
use crate::rng::stream;
use crate::scene::Scene;
use crate::schedule::{Modulator, NoiseSchedule};
use crate::tensor::Tensor;

/// The four ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Raw noise, no guidance.
    Base,
    /// Optimized initial noise only.
    Prino,
    /// Reward guidance only.
    Degu,
    /// Optimized noise plus reward guidance.
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Base, Arm::Prino, Arm::Degu, Arm::Full];

    pub fn label(&self) -> &'static str {
        match self {
            Arm::Base => "base",
            Arm::Prino => "prino",
            Arm::Degu => "degu",
            Arm::Full => "full",
        }
    }

    pub fn from_label(s: &str) -> Option<Arm> {
        Self::ALL.iter().copied().find(|a| a.label() == s)
    }

    pub fn uses_noise_opt(&self) -> bool {
        matches!(self, Arm::Prino | Arm::Full)
    }

    pub fn uses_guidance(&self) -> bool {
        matches!(self, Arm::Degu | Arm::Full)
    }
}

/// Per-scene seed, derived so all arms of one scene share randomness while
/// scenes stay independent.
pub fn scene_run_seed(run_seed: u64, scene_seed: u64) -> u64 {
    run_seed ^ scene_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub struct SceneRun {
    pub scene_seed: u64,
    pub run: GuidedRun,
    pub noise_opt: Option<PrinoResult>,
}

/// Runs one arm on one scene. The initial noise is the seed's round-0 draw
/// for non-optimized arms and the optimizer's output otherwise, so the
/// base/prino pair starts from the same sample.
pub fn run_scene_arm(
    model: &DenoiserModel,
    scene: &Scene,
    arm: Arm,
    prino_cfg: &PrinoConfig,
    spec: &GuidanceSpec,
    sched: &NoiseSchedule,
    run_seed: u64,
) -> Result<SceneRun, GuidanceError> {
    let seed = scene_run_seed(run_seed, scene.seed);
    let n = model.config.latent_size;
    let z_m = encode(&scene.masked_image());
    let m_prime = downsample_mask(&scene.mask, model.config.patch);

    let (z_init, noise_opt) = if arm.uses_noise_opt() {
        let r = optimize_noise(model, &scene.prompt, &z_m, &m_prime, prino_cfg, sched, seed);
        (r.latent.clone(), Some(r))
    } else {
        let mut rng = stream(seed, "init-noise", 0);
        (Tensor::randn(&[n, n, 3], &mut rng), None)
    };

    let arm_spec = if arm.uses_guidance() {
        spec.clone()
    } else {
        spec.clone().with_gammas(0.0, 0.0, 0.0)
    };
    let run = run_guided(
        model,
        &scene.image,
        &scene.mask,
        &scene.prompt,
        &z_init,
        &arm_spec,
        sched,
        seed,
    )?;
    Ok(SceneRun {
        scene_seed: scene.seed,
        run,
        noise_opt,
    })
}

/// Reward composite used for ablation comparisons, evaluated on the final
/// output with the spec's own weights.
pub fn composite_reward(
    model: &DenoiserModel,
    spec: &GuidanceSpec,
    scene: &Scene,
    output: &Tensor,
) -> f64 {
    let latent = encode(output);
    let z_m = encode(&scene.masked_image());
    let m_prime = downsample_mask(&scene.mask, model.config.patch);
    spec.gamma_c * reward_align_value(model, &latent, &scene.prompt, &m_prime)
        + spec.gamma_m * reward_coherence_value(&latent, &z_m, &scene.mask)
        + spec.gamma_q * reward_preference_value(&latent)
}

/// Results of one labelled configuration over the whole suite.
pub struct SuiteResult {
    pub label: String,
    pub runs: Vec<SceneRun>,
    pub report: MetricReport,
    pub rows: Vec<SceneMetrics>,
    pub mean_composite: f64,
}

fn run_labelled(
    model: &DenoiserModel,
    suite: &[Scene],
    label: String,
    arm: Arm,
    prino_cfg: &PrinoConfig,
    spec: &GuidanceSpec,
    sched: &NoiseSchedule,
    run_seed: u64,
) -> Result<SuiteResult, GuidanceError> {
    let runs: Vec<SceneRun> = suite
        .par_iter()
        .map(|scene| run_scene_arm(model, scene, arm, prino_cfg, spec, sched, run_seed))
        .collect::<Result<_, _>>()?;
    let outputs: Vec<Tensor> = runs.iter().map(|r| r.run.image.clone()).collect();
    let (report, rows) = evaluate(&outputs, suite);
    let mean_composite = suite
        .iter()
        .zip(outputs.iter())
        .map(|(s, o)| composite_reward(model, spec, s, o))
        .sum::<f64>()
        / suite.len() as f64;
    Ok(SuiteResult {
        label,
        runs,
        report,
        rows,
        mean_composite,
    })
}

/// Runs the requested arms over the suite with paired seeds.
pub fn run_arms(
    model: &DenoiserModel,
    suite: &[Scene],
    arms: &[Arm],
    prino_cfg: &PrinoConfig,
    spec: &GuidanceSpec,
    sched: &NoiseSchedule,
    run_seed: u64,
) -> Result<Vec<SuiteResult>, GuidanceError> {
    arms.iter()
        .map(|&arm| {
            run_labelled(
                model,
                suite,
                arm.label().to_string(),
                arm,
                prino_cfg,
                spec,
                sched,
                run_seed,
            )
        })
        .collect()
}

/// Modulator ablation: the guided (full) arm re-run with each modulator,
/// same seeds everywhere.
pub fn ablate_modulator(
    model: &DenoiserModel,
    suite: &[Scene],
    modulators: &[Modulator],
    prino_cfg: &PrinoConfig,
    spec: &GuidanceSpec,
    sched: &NoiseSchedule,
    run_seed: u64,
) -> Result<Vec<SuiteResult>, GuidanceError> {
    modulators
        .iter()
        .map(|&m| {
            let mut s = spec.clone();
            s.modulator = m;
            run_labelled(
                model,
                suite,
                format!("mod_{}", m.label()),
                Arm::Full,
                prino_cfg,
                &s,
                sched,
                run_seed,
            )
        })
        .collect()
}

/// The standard modulator ablation set.
pub fn ablation_modulators() -> Vec<Modulator> {
    vec![
        Modulator::Constant { value: 0.5 },
        Modulator::SqrtOneMinusAlphaBar,
        Modulator::SqrtAlphaBar,
    ]
}

// ── CSV rendering ───────────────────────────────────────────────────────

/// One row per (method, scene), sorted by method then scene id.
pub fn metrics_csv(results: &[SuiteResult]) -> String {
    let mut out = String::from("method,scene_seed,aligned,boundary_energy,preference,l2_to_truth\n");
    for res in results {
        for row in &res.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                res.label,
                row.scene_seed,
                row.aligned as u8,
                row.boundary_energy,
                row.preference,
                row.l2_to_truth
            ));
        }
    }
    out
}

/// One row per method with suite aggregates.
pub fn summary_csv(results: &[SuiteResult]) -> String {
    let mut out = String::from(
        "method,alignment_accuracy,boundary_energy,preference_score,l2_to_truth,mean_composite\n",
    );
    for res in results {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            res.label,
            res.report.alignment_accuracy,
            res.report.boundary_energy,
            res.report.preference_score,
            res.report.l2_to_truth,
            res.mean_composite
        ));
    }
    out
}
