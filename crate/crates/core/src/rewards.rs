//! Differentiable toy reward models for guided denoising.
//!
//! Three scalar rewards, higher is better, all evaluated on the one-step
//! clean estimate of the latent so they score image-like content rather
//! than raw noise:
//!
//! * alignment: cosine similarity between the masked region's mean patch
//!   feature (through the frozen denoiser embedding) and the mean active
//!   prompt-token embedding,
//! * coherence: negative mean squared intensity jump across the mask
//!   boundary against the known outside content,
//! * preference: negative total squared variation plus an out-of-gamut
//!   penalty, normalized per element.

use std::sync::Arc;

use crate::denoiser::{DenoiserModel, ModelVars};
use crate::noise_opt::active_tokens;
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Tweedie estimate of the clean latent:
/// `(z_t - sqrt(1 - ab_t) * eps_pred) / sqrt(ab_t)`.
///
/// Panics when `alpha_bar(t) = 0`.
pub fn x0_estimate(tape: &mut Tape, z_t: Var, t: usize, eps_pred: Var, sched: &NoiseSchedule) -> Var {
    let ab = sched.alpha_bar(t);
    assert!(ab > 0.0, "x0 estimate undefined at alpha_bar = 0 (t = {t})");
    let noise_part = tape.scale(eps_pred, (1.0 - ab).sqrt());
    let centered = tape.sub(z_t, noise_part);
    tape.scale(centered, 1.0 / ab.sqrt())
}

pub fn x0_estimate_value(z_t: &Tensor, t: usize, eps_pred: &Tensor, sched: &NoiseSchedule) -> Tensor {
    let ab = sched.alpha_bar(t);
    assert!(ab > 0.0, "x0 estimate undefined at alpha_bar = 0 (t = {t})");
    z_t.axpy(-(1.0 - ab).sqrt(), eps_pred).scale(1.0 / ab.sqrt())
}

// ── r_c: prompt alignment ───────────────────────────────────────────────

/// Cosine similarity in `[-1, 1]` between the mean patch feature of the
/// masked region and the mean embedding of the active prompt tokens, both
/// through the (frozen) denoiser tables.
///
/// Panics when the downsampled mask selects no patch or the prompt has no
/// active tokens.
pub fn reward_align(
    tape: &mut Tape,
    model: &DenoiserModel,
    vars: &ModelVars,
    x0: Var,
    prompt: &[usize],
    m_prime: &Tensor,
) -> Var {
    let p = model.config.num_patches();
    assert_eq!(m_prime.numel(), p, "mask patches must match P");
    let masked: Vec<usize> = m_prime
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.5)
        .map(|(i, _)| i)
        .collect();
    assert!(!masked.is_empty(), "empty mask");
    let active: Vec<usize> = prompt
        .iter()
        .copied()
        .zip(active_tokens(prompt))
        .filter(|(_, a)| *a)
        .map(|(t, _)| t)
        .collect();
    assert!(!active.is_empty(), "no active tokens");

    let feats = model.embed_patches(tape, vars, x0);
    let mut sel = vec![0.0; p];
    for &i in &masked {
        sel[i] = 1.0 / masked.len() as f64;
    }
    let sel = tape.constant(Tensor::from_vec(&[1, p], sel));
    let region = tape.matmul(sel, feats); // [1, d]

    let toks = model.embed_tokens(tape, vars, &active); // [k, d]
    let target = tape.mean(toks, Some(0)); // [1, d]

    cosine(tape, region, target)
}

/// `dot(a, b) / (|a| |b|)` with an epsilon inside the square roots so the
/// zero vector maps to 0 instead of NaN.
fn cosine(tape: &mut Tape, a: Var, b: Var) -> Var {
    let dot = tape.dot(a, b);
    let aa = tape.dot(a, a);
    let bb = tape.dot(b, b);
    let aa = tape.add_scalar(aa, 1e-24);
    let bb = tape.add_scalar(bb, 1e-24);
    let na = tape.sqrt(aa);
    let nb = tape.sqrt(bb);
    let denom = tape.mul(na, nb);
    tape.div(dot, denom)
}

// ── r_m: boundary coherence ─────────────────────────────────────────────

/// Ordered boundary pairs `(inside, outside)` of 4-neighbouring pixels
/// straddling the mask edge.
fn boundary_pairs(mask: &Tensor) -> Vec<(usize, usize)> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let at = |y: usize, x: usize| mask.data()[y * w + x] > 0.5;
    let mut pairs = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !at(y, x) {
                continue;
            }
            let mut push = |ny: usize, nx: usize| {
                if !at(ny, nx) {
                    pairs.push((y * w + x, ny * w + nx));
                }
            };
            if x + 1 < w {
                push(y, x + 1);
            }
            if x > 0 {
                push(y, x - 1);
            }
            if y + 1 < h {
                push(y + 1, x);
            }
            if y > 0 {
                push(y - 1, x);
            }
        }
    }
    pairs
}

/// Negative mean squared jump across the mask boundary between the
/// estimated content inside and the known image outside; a seamless fill
/// scores 0. A mask without a boundary scores 0 by definition.
pub fn reward_coherence(
    tape: &mut Tape,
    x0: Var,
    z_m: &Tensor,
    mask: &Tensor,
) -> Var {
    let shape = tape.value(x0).shape().to_vec();
    assert_eq!(shape, z_m.shape(), "x0 and z_m must share the latent shape");
    let pairs = boundary_pairs(mask);
    if pairs.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let mut inside_idx = Vec::with_capacity(pairs.len() * 3);
    let mut outside = Vec::with_capacity(pairs.len() * 3);
    for (pi, po) in &pairs {
        for c in 0..3 {
            inside_idx.push(pi * 3 + c);
            outside.push(z_m.data()[po * 3 + c]);
        }
    }
    let count = inside_idx.len();
    let inside = tape.gather(x0, Arc::new(inside_idx));
    let reference = tape.constant(Tensor::from_vec(&[count], outside));
    let diff = tape.sub(inside, reference);
    let sq = tape.square(diff);
    let total = tape.sum(sq, None);
    tape.scale(total, -1.0 / count as f64)
}

// ── r_q: smoothness / gamut preference ──────────────────────────────────

/// `-(sum of squared neighbour differences + sum of squared out-of-[0,1]
/// excursions) / numel`; a constant in-range image scores 0.
pub fn reward_preference(tape: &mut Tape, x0: Var) -> Var {
    let shape = tape.value(x0).shape().to_vec();
    assert_eq!(shape.len(), 3, "expected [h, w, c] latent");
    let (h, w, ch) = (shape[0], shape[1], shape[2]);
    let numel = h * w * ch;

    let mut from = Vec::new();
    let mut to = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let i = (y * w + x) * ch + c;
                if x + 1 < w {
                    from.push(i);
                    to.push((y * w + x + 1) * ch + c);
                }
                if y + 1 < h {
                    from.push(i);
                    to.push(((y + 1) * w + x) * ch + c);
                }
            }
        }
    }
    let a = tape.gather(x0, Arc::new(from));
    let b = tape.gather(x0, Arc::new(to));
    let d = tape.sub(a, b);
    let d2 = tape.square(d);
    let tv = tape.sum(d2, None);

    let over = tape.add_scalar(x0, -1.0);
    let over = tape.relu(over);
    let over = tape.square(over);
    let over = tape.sum(over, None);
    let under = tape.neg(x0);
    let under = tape.relu(under);
    let under = tape.square(under);
    let under = tape.sum(under, None);

    let penalty = tape.add(over, under);
    let total = tape.add(tv, penalty);
    tape.scale(total, -1.0 / numel as f64)
}

// ── value-level wrappers ────────────────────────────────────────────────

pub fn reward_align_value(
    model: &DenoiserModel,
    x0: &Tensor,
    prompt: &[usize],
    m_prime: &Tensor,
) -> f64 {
    let mut tape = Tape::new();
    let vars = model.place(&mut tape, false);
    let x = tape.constant(x0.clone());
    let r = reward_align(&mut tape, model, &vars, x, prompt, m_prime);
    tape.scalar_value(r)
}

pub fn reward_coherence_value(x0: &Tensor, z_m: &Tensor, mask: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone());
    let r = reward_coherence(&mut tape, x, z_m, mask);
    tape.scalar_value(r)
}

pub fn reward_preference_value(x0: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone());
    let r = reward_preference(&mut tape, x);
    tape.scalar_value(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::forward_diffuse;

    #[test]
    fn x0_recovers_clean_latent_from_true_noise() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut rng = crate::rng::stream(0, "t", 0);
        let z0 = Tensor::randn(&[4, 4, 3], &mut rng);
        let eps = Tensor::randn(&[4, 4, 3], &mut rng);
        let z_t = forward_diffuse(&z0, 30, &eps, &sched);
        let rec = x0_estimate_value(&z_t, 30, &eps, &sched);
        assert!(rec.max_abs_diff(&z0) < 1e-12);
    }

    #[test]
    fn x0_at_t_zero_is_identity() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let z = Tensor::from_vec(&[1, 1, 3], vec![0.1, 0.2, 0.3]);
        let eps = Tensor::from_vec(&[1, 1, 3], vec![9.0, 9.0, 9.0]);
        let x0 = x0_estimate_value(&z, 0, &eps, &sched);
        assert_eq!(x0, z);
    }

    #[test]
    fn coherence_constant_fill_is_zero_and_unit_step_is_minus_one() {
        // constant scene: image all 0.5, mask interior block
        let img = Tensor::full(&[8, 8, 3], 0.5);
        let mask = Tensor::from_fn(&[8, 8], |i| {
            let (y, x) = (i / 8, i % 8);
            if (2..6).contains(&y) && (2..6).contains(&x) {
                1.0
            } else {
                0.0
            }
        });
        let z_m = crate::scene::apply_inverse_mask(&img, &mask);
        assert_eq!(reward_coherence_value(&img, &z_m, &mask), 0.0);

        // unit fill on zero background: every boundary jump is 1
        let fill = Tensor::from_fn(&[8, 8, 3], |i| {
            let pix = i / 3;
            if mask.data()[pix] > 0.5 {
                1.0
            } else {
                0.0
            }
        });
        let zeros = Tensor::zeros(&[8, 8, 3]);
        let z_m0 = crate::scene::apply_inverse_mask(&zeros, &mask);
        assert!((reward_coherence_value(&fill, &z_m0, &mask) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn coherence_degenerate_masks_score_zero() {
        let img = Tensor::full(&[4, 4, 3], 0.3);
        let all = Tensor::ones(&[4, 4]);
        let none = Tensor::zeros(&[4, 4]);
        assert_eq!(reward_coherence_value(&img, &img, &all), 0.0);
        assert_eq!(reward_coherence_value(&img, &img, &none), 0.0);
    }

    #[test]
    fn preference_constant_in_range_is_zero() {
        let img = Tensor::full(&[6, 6, 3], 0.4);
        assert_eq!(reward_preference_value(&img), 0.0);
    }

    #[test]
    fn preference_out_of_gamut_penalty() {
        // all pixels at 1.5: penalty 0.25 per element, no variation
        let img = Tensor::full(&[6, 6, 3], 1.5);
        let r = reward_preference_value(&img);
        assert!((r + 0.25).abs() < 1e-12);
    }

    #[test]
    fn rewards_are_pure() {
        let mut rng = crate::rng::stream(5, "t", 1);
        let x = Tensor::randn(&[8, 8, 3], &mut rng).map(|v| 0.5 + 0.2 * v);
        let a = reward_preference_value(&x);
        let b = reward_preference_value(&x);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
