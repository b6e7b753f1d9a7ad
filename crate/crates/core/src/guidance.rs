//! Reward-guided denoising with decomposed objectives.
//!
//! At guided steps the predicted noise is refined by the gradients of the
//! three reward models, each scaled by its strength and by a
//! timestep-dependent modulator:
//!
//! `eps_hat = eps - mod(t) * (g_c * grad r_c + g_m * grad r_m + g_q * grad r_q)`
//!
//! Gradients are taken with respect to the current latent through the full
//! chain: frozen denoiser forward, CFG combination, clean-latent estimate,
//! reward. After the loop the result is composited with the known content
//! so unmasked pixels equal the input exactly.

use serde::{Deserialize, Serialize};

use crate::codec::{decode, downsample_mask, encode};
use crate::denoiser::{DenoiserModel, ModelVars};
use crate::rewards::{reward_align, reward_coherence, reward_preference, x0_estimate};
use crate::rng::stream;
use crate::scene::apply_inverse_mask;
use crate::schedule::{denoise_step, modulate, Modulator, NoiseSchedule};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSpec {
    pub gamma_c: f64,
    pub gamma_m: f64,
    pub gamma_q: f64,
    pub modulator: Modulator,
    /// Apply guidance once every `s_guide` denoising steps (1 = every step).
    pub s_guide: usize,
    pub cfg_scale: f64,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        // strengths keep the 4 : 1 : 0.1 ratio, rescaled for this model
        Self {
            gamma_c: 25.0 * 4.0,
            gamma_m: 25.0 * 1.0,
            gamma_q: 25.0 * 0.1,
            modulator: Modulator::SqrtAlphaBar,
            s_guide: 1,
            cfg_scale: 7.5,
        }
    }
}

impl GuidanceSpec {
    pub fn disabled(&self) -> bool {
        self.gamma_c == 0.0 && self.gamma_m == 0.0 && self.gamma_q == 0.0
    }

    pub fn with_gammas(mut self, c: f64, m: f64, q: f64) -> Self {
        self.gamma_c = c;
        self.gamma_m = m;
        self.gamma_q = q;
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GuidanceError {
    #[error("reward '{reward}' produced a non-finite {what} at t = {t}")]
    RewardNotFinite {
        reward: &'static str,
        what: &'static str,
        t: usize,
    },
}

/// Everything a guided step needs besides the evolving latent.
pub struct GuideCtx<'a> {
    pub model: &'a DenoiserModel,
    pub prompt: &'a [usize],
    pub z_m: &'a Tensor,
    /// Full-resolution mask.
    pub mask: &'a Tensor,
    /// Mask on the patch grid.
    pub m_prime: &'a Tensor,
    pub sched: &'a NoiseSchedule,
}

#[derive(Clone, Debug)]
pub struct RewardDiag {
    pub name: &'static str,
    pub value: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct StepDiag {
    pub t: usize,
    pub modulator: f64,
    pub rewards: Vec<RewardDiag>,
}

/// One weighted reward head: builds a scalar reward var from the clean
/// estimate on the step's tape.
pub struct GuidanceHead<'h> {
    pub name: &'static str,
    pub weight: f64,
    #[allow(clippy::type_complexity)]
    pub build: &'h dyn Fn(&mut Tape, &ModelVars, Var) -> Var,
}

/// Applies the noise correction for arbitrary reward heads. The heads all
/// see the same clean-estimate var, built from one differentiable forward
/// at `z_t`; each weighted head contributes `weight * grad_{z_t} reward`.
pub fn guided_eps_with_heads(
    eps_pred: &Tensor,
    z_t: &Tensor,
    t: usize,
    ctx: &GuideCtx,
    modulator: Modulator,
    cfg_scale: f64,
    heads: &[GuidanceHead],
) -> Result<(Tensor, StepDiag), GuidanceError> {
    let mod_t = modulate(modulator, t, ctx.sched);
    if heads.iter().all(|h| h.weight == 0.0) {
        return Ok((
            eps_pred.clone(),
            StepDiag {
                t,
                modulator: mod_t,
                rewards: vec![],
            },
        ));
    }

    let mut tape = Tape::new();
    let zt = tape.leaf(z_t.clone());
    let vars = ctx.model.place(&mut tape, false);
    let zm = tape.constant(ctx.z_m.clone());
    let mp = tape.constant(ctx.m_prime.clone());
    let eps_chain =
        ctx.model
            .cfg_predict_on_tape(&mut tape, &vars, zt, t, ctx.prompt, zm, mp, cfg_scale);
    let x0 = x0_estimate(&mut tape, zt, t, eps_chain, ctx.sched);

    let mut correction = Tensor::zeros(z_t.shape());
    let mut diags = Vec::with_capacity(heads.len());
    for head in heads {
        let r = (head.build)(&mut tape, &vars, x0);
        let value = tape.scalar_value(r);
        if !value.is_finite() {
            return Err(GuidanceError::RewardNotFinite {
                reward: head.name,
                what: "value",
                t,
            });
        }
        let mut grad_norm = 0.0;
        if head.weight != 0.0 {
            tape.backward(r);
            let g = tape.grad_or_zeros(zt);
            if !g.all_finite() {
                return Err(GuidanceError::RewardNotFinite {
                    reward: head.name,
                    what: "gradient",
                    t,
                });
            }
            grad_norm = g.norm();
            correction = correction.axpy(head.weight, &g);
            tape.reset_grads();
        }
        diags.push(RewardDiag {
            name: head.name,
            value,
            grad_norm,
        });
    }

    let eps_hat = eps_pred.axpy(-mod_t, &correction);
    Ok((
        eps_hat,
        StepDiag {
            t,
            modulator: mod_t,
            rewards: diags,
        },
    ))
}

/// The production correction with the three standard rewards. With all
/// strengths zero the prediction is returned unchanged, bit for bit.
pub fn guided_eps(
    eps_pred: &Tensor,
    z_t: &Tensor,
    t: usize,
    ctx: &GuideCtx,
    spec: &GuidanceSpec,
) -> Result<(Tensor, StepDiag), GuidanceError> {
    let align = |tape: &mut Tape, vars: &ModelVars, x0: Var| {
        reward_align(tape, ctx.model, vars, x0, ctx.prompt, ctx.m_prime)
    };
    let coherence =
        |tape: &mut Tape, _vars: &ModelVars, x0: Var| reward_coherence(tape, x0, ctx.z_m, ctx.mask);
    let preference = |tape: &mut Tape, _vars: &ModelVars, x0: Var| reward_preference(tape, x0);
    let heads = [
        GuidanceHead {
            name: "align",
            weight: spec.gamma_c,
            build: &align,
        },
        GuidanceHead {
            name: "coherence",
            weight: spec.gamma_m,
            build: &coherence,
        },
        GuidanceHead {
            name: "preference",
            weight: spec.gamma_q,
            build: &preference,
        },
    ];
    guided_eps_with_heads(eps_pred, z_t, t, ctx, spec.modulator, spec.cfg_scale, &heads)
}

/// Whether step `t` (counting down from `t_total`) is a guided step under
/// frequency `s_guide`. Guidance always fires at `t = t_total` and then
/// every `s_guide` steps, giving `ceil(t_total / s_guide)` guided steps.
pub fn is_guided_step(t: usize, t_total: usize, s_guide: usize) -> bool {
    assert!(s_guide >= 1, "s_guide must be >= 1");
    (t_total - t) % s_guide == 0
}

/// Final composite: generated content inside the mask, original image
/// outside: `D(z0) * M + D(E(I * (1-M))) * (1-M)`.
pub fn blend(z0: &Tensor, image: &Tensor, mask: &Tensor) -> Tensor {
    let generated = decode(z0);
    let known = decode(&encode(&apply_inverse_mask(image, mask)));
    assert_eq!(generated.shape(), known.shape());
    Tensor::from_fn(generated.shape(), |i| {
        let m = mask.data()[i / 3];
        generated.data()[i] * m + known.data()[i] * (1.0 - m)
    })
}

#[derive(Clone, Debug)]
pub struct GuidedRun {
    /// Blended output image.
    pub image: Tensor,
    /// Final latent before blending.
    pub z0: Tensor,
    /// One entry per guided step, in sampling order (t descending).
    pub steps: Vec<StepDiag>,
}

impl GuidedRun {
    pub fn trace_csv(&self) -> String {
        let names: Vec<&str> = self
            .steps
            .first()
            .map(|s| s.rewards.iter().map(|r| r.name).collect())
            .unwrap_or_default();
        let mut out = String::from("t,modulator");
        for n in &names {
            out.push_str(&format!(",r_{n}"));
        }
        for n in &names {
            out.push_str(&format!(",grad_norm_{n}"));
        }
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!("{},{}", s.t, s.modulator));
            for r in &s.rewards {
                out.push_str(&format!(",{}", r.value));
            }
            for r in &s.rewards {
                out.push_str(&format!(",{}", r.grad_norm));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the full guided denoising loop from `z_T` and blends the result
/// with the input image. Per-step noise comes from the seed's `step-noise`
/// stream keyed by `t`, so paired runs with different guidance settings
/// consume identical randomness.
pub fn run_guided(
    model: &DenoiserModel,
    image: &Tensor,
    mask: &Tensor,
    prompt: &[usize],
    z_init: &Tensor,
    spec: &GuidanceSpec,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<GuidedRun, GuidanceError> {
    let z_m = encode(&apply_inverse_mask(image, mask));
    let m_prime = downsample_mask(mask, model.config.patch);
    let ctx = GuideCtx {
        model,
        prompt,
        z_m: &z_m,
        mask,
        m_prime: &m_prime,
        sched,
    };
    let t_total = sched.t_total();
    let mut z = z_init.clone();
    let mut steps = Vec::new();
    for t in (1..=t_total).rev() {
        let mut eps = model.cfg_predict(&z, t, prompt, &z_m, &m_prime, spec.cfg_scale);
        if !spec.disabled() && is_guided_step(t, t_total, spec.s_guide) {
            let (refined, diag) = guided_eps(&eps, &z, t, &ctx, spec)?;
            eps = refined;
            steps.push(diag);
        }
        let noise = (t > 1).then(|| {
            let mut rng = stream(seed, "step-noise", t as u64);
            Tensor::randn(z.shape(), &mut rng)
        });
        z = denoise_step(&z, t, &eps, sched, noise.as_ref());
    }
    let image_out = blend(&z, image, mask);
    Ok(GuidedRun {
        image: image_out,
        z0: z,
        steps,
    })
}

/// Plain ancestral sampling with CFG and no guidance machinery at all;
/// consumes the same noise streams as [`run_guided`].
pub fn sample_unguided(
    model: &DenoiserModel,
    image: &Tensor,
    mask: &Tensor,
    prompt: &[usize],
    z_init: &Tensor,
    cfg_scale: f64,
    sched: &NoiseSchedule,
    seed: u64,
) -> GuidedRun {
    let z_m = encode(&apply_inverse_mask(image, mask));
    let m_prime = downsample_mask(mask, model.config.patch);
    let mut z = z_init.clone();
    for t in (1..=sched.t_total()).rev() {
        let eps = model.cfg_predict(&z, t, prompt, &z_m, &m_prime, cfg_scale);
        let noise = (t > 1).then(|| {
            let mut rng = stream(seed, "step-noise", t as u64);
            Tensor::randn(z.shape(), &mut rng)
        });
        z = denoise_step(&z, t, &eps, sched, noise.as_ref());
    }
    GuidedRun {
        image: blend(&z, image, mask),
        z0: z,
        steps: vec![],
    }
}
