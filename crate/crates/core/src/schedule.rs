//! Noise schedules, the forward diffusion map, the ancestral reverse step,
//! the score/noise identity, and the guidance modulator family.
//!
//! Timesteps are 1-based: `beta(t)` is defined for `t in 1..=T` and
//! `alpha_bar(t)` for `t in 0..=T` with `alpha_bar(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("invalid schedule: T={t}, beta range [{beta_start}, {beta_end}] (need T >= 1 and 0 < beta_start <= beta_end < 1)")]
    InvalidRange { t: usize, beta_start: f64, beta_end: f64 },
}

/// Linear-beta DDPM schedule with cached cumulative products.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    beta: Vec<f64>,      // beta[t-1] = beta_t, t in 1..=T
    alpha_bar: Vec<f64>, // alpha_bar[t], t in 0..=T
}

impl NoiseSchedule {
    /// Linear interpolation of beta from `beta_start` to `beta_end` over
    /// `t_total` steps; `alpha_bar` by cumulative product of `(1 - beta)`.
    pub fn linear(t_total: usize, beta_start: f64, beta_end: f64) -> Result<Self, ScheduleError> {
        if t_total < 1 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ScheduleError::InvalidRange {
                t: t_total,
                beta_start,
                beta_end,
            });
        }
        let beta: Vec<f64> = (0..t_total)
            .map(|i| {
                if t_total == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_total - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_total + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for &b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn t_total(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_total(), "timestep {t} out of 1..={}", self.t_total());
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_total(), "timestep {t} out of 0..={}", self.t_total());
        self.alpha_bar[t]
    }

    /// Posterior standard deviation of the ancestral step,
    /// `sqrt(beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t))`.
    pub fn posterior_sigma(&self, t: usize) -> f64 {
        let b = self.beta(t);
        (b * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))).sqrt()
    }
}

/// One forward-diffusion jump: `sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps`.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Tensor {
    assert!(t >= 1 && t <= sched.t_total(), "timestep {t} out of range");
    assert_eq!(z0.shape(), eps.shape(), "noise shape must match z0");
    let ab = sched.alpha_bar(t);
    z0.scale(ab.sqrt()).axpy((1.0 - ab).sqrt(), eps)
}

/// The score/noise identity: `score = -eps / sqrt(1 - ab_t)`.
///
/// Panics when `alpha_bar(t) == 1` (t = 0), where the identity degenerates.
pub fn noise_to_score(eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Tensor {
    let ab = sched.alpha_bar(t);
    assert!(ab < 1.0, "score undefined at alpha_bar = 1 (t = {t})");
    eps.scale(-1.0 / (1.0 - ab).sqrt())
}

/// Inverse of [`noise_to_score`].
pub fn score_to_noise(score: &Tensor, t: usize, sched: &NoiseSchedule) -> Tensor {
    let ab = sched.alpha_bar(t);
    assert!(ab < 1.0, "score undefined at alpha_bar = 1 (t = {t})");
    score.scale(-(1.0 - ab).sqrt())
}

/// Ancestral DDPM update from `z_t` to `z_{t-1}`:
/// `(z_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(1 - beta_t)`, plus
/// posterior noise for `t > 1`. At `t = 1` the step is deterministic and
/// `rng_noise` is ignored.
pub fn denoise_step(
    z_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    rng_noise: Option<&Tensor>,
) -> Tensor {
    assert!(t >= 1 && t <= sched.t_total(), "timestep {t} out of range");
    assert_eq!(z_t.shape(), eps_hat.shape(), "eps_hat shape must match z_t");
    let b = sched.beta(t);
    let ab = sched.alpha_bar(t);
    let mean = z_t
        .axpy(-b / (1.0 - ab).sqrt(), eps_hat)
        .scale(1.0 / (1.0 - b).sqrt());
    if t == 1 {
        return mean;
    }
    let noise = rng_noise.expect("denoise_step needs rng_noise for t > 1");
    assert_eq!(noise.shape(), z_t.shape());
    mean.axpy(sched.posterior_sigma(t), noise)
}

/// Timestep-dependent scaling of reward gradients in guided denoising.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Modulator {
    /// `sqrt(alpha_bar_t)`: grows toward 1 as denoising approaches t = 0,
    /// down-weighting corrections from the noisiest steps.
    SqrtAlphaBar,
    /// `sqrt(1 - alpha_bar_t)`: the classifier-guidance convention.
    SqrtOneMinusAlphaBar,
    /// Fixed value at every step.
    Constant { value: f64 },
}

impl Modulator {
    pub fn label(&self) -> String {
        match self {
            Modulator::SqrtAlphaBar => "sqrt_alpha_bar".into(),
            Modulator::SqrtOneMinusAlphaBar => "sqrt_one_minus_alpha_bar".into(),
            Modulator::Constant { value } => format!("constant_{value}"),
        }
    }
}

/// Evaluates a modulator at timestep `t` (valid for `0 <= t <= T`).
pub fn modulate(modulator: Modulator, t: usize, sched: &NoiseSchedule) -> f64 {
    match modulator {
        Modulator::SqrtAlphaBar => sched.alpha_bar(t).sqrt(),
        Modulator::SqrtOneMinusAlphaBar => (1.0 - sched.alpha_bar(t)).sqrt(),
        Modulator::Constant { value } => value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> NoiseSchedule {
        NoiseSchedule::linear(10, 0.1, 0.3).unwrap()
    }

    #[test]
    fn alpha_bar_starts_at_one() {
        assert_eq!(toy().alpha_bar(0), 1.0);
    }

    #[test]
    fn two_step_half_beta() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert!((s.alpha_bar(2) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sd_like_schedule_first_step() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-12);
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = toy();
        for t in 1..=s.t_total() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_with_zero_noise() {
        let s = toy();
        let z0 = Tensor::from_vec(&[2], vec![1.0, -2.0]);
        let eps = Tensor::zeros(&[2]);
        let z3 = forward_diffuse(&z0, 3, &eps, &s);
        let c = s.alpha_bar(3).sqrt();
        assert_eq!(z3.data(), &[c, -2.0 * c]);
    }

    #[test]
    fn score_round_trip_is_identity() {
        let s = toy();
        let eps = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]);
        let score = noise_to_score(&eps, 4, &s);
        let back = score_to_noise(&score, 4, &s);
        assert!(eps.max_abs_diff(&back) < 1e-12);
    }

    #[test]
    fn score_value_at_quarter_variance() {
        // alpha_bar = 0.75 -> score of eps=1 is -1/sqrt(0.25) = -2
        let s = NoiseSchedule::linear(1, 0.25, 0.25).unwrap();
        let score = noise_to_score(&Tensor::scalar(1.0), 1, &s);
        assert!((score.item() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_eps_at_t1_recovers_z0() {
        let s = toy();
        let z0 = Tensor::from_vec(&[4], vec![0.3, -0.7, 1.1, 0.0]);
        let eps = Tensor::from_vec(&[4], vec![1.0, -0.5, 0.25, 2.0]);
        let z1 = forward_diffuse(&z0, 1, &eps, &s);
        let rec = denoise_step(&z1, 1, &eps, &s, None);
        assert!(rec.max_abs_diff(&z0) < 1e-10);
    }

    #[test]
    fn modulator_values() {
        let s = toy();
        assert_eq!(modulate(Modulator::SqrtAlphaBar, 0, &s), 1.0);
        assert_eq!(modulate(Modulator::Constant { value: 0.5 }, 7, &s), 0.5);
        // strictly increasing as t goes T -> 0
        let mut prev = modulate(Modulator::SqrtAlphaBar, s.t_total(), &s);
        for t in (0..s.t_total()).rev() {
            let m = modulate(Modulator::SqrtAlphaBar, t, &s);
            assert!(m > prev);
            prev = m;
        }
    }
}
