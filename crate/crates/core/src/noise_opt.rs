//! Attention-steered optimization of the initial-noise distribution.
//!
//! Before sampling, the attention maps of the first denoising step are
//! pushed toward the masked region by gradient descent on the mean and
//! standard deviation of the initial-noise distribution `z ~ N(mu, sigma^2)`,
//! under a KL leash to the standard normal. The loop runs in rounds with
//! early stopping on the attention losses, a per-round break when the KL
//! budget is exceeded, and a pool of candidate noises as the fallback.

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserModel;
use crate::rng::stream;
use crate::scene::NULL_TOKEN;
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The optimizable initial-noise distribution.
#[derive(Clone, Debug)]
pub struct NoiseDistribution {
    pub mu: Tensor,
    /// Elementwise standard deviation, strictly positive.
    pub sigma: Tensor,
}

impl NoiseDistribution {
    /// The standard-normal start: `mu = 0`, `sigma = 1`.
    pub fn standard(shape: &[usize]) -> Self {
        Self {
            mu: Tensor::zeros(shape),
            sigma: Tensor::ones(shape),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrinoConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau_c: f64,
    pub tau_s: f64,
    pub tau_kl: f64,
    pub tau_iter: usize,
    pub tau_round: usize,
    pub lr: f64,
}

impl Default for PrinoConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 5.0,
            tau_c: 0.1,
            tau_s: 0.1,
            tau_kl: 0.003,
            tau_iter: 40,
            tau_round: 5,
            lr: 0.1,
        }
    }
}

/// KL weight schedule, re-evaluated every iteration from the current KL
/// value and applied as a constant coefficient.
pub fn lambda3(l_kl: f64) -> f64 {
    500.0 + l_kl * 1e6
}

/// `lambda1 * lc + lambda2 * ls + lambda3(lkl) * lkl`.
pub fn loss_joint(lc: f64, ls: f64, lkl: f64, cfg: &PrinoConfig) -> f64 {
    cfg.lambda1 * lc + cfg.lambda2 * ls + lambda3(lkl) * lkl
}

/// Tokens that carry prompt semantics (everything but null padding).
pub fn active_tokens(prompt: &[usize]) -> Vec<bool> {
    prompt.iter().map(|&t| t != NULL_TOKEN).collect()
}

// ── attention aggregation ───────────────────────────────────────────────

/// Aggregates a cross-attention matrix `[P, L]` into one spatial map
/// `[h', w']`: each active token's column is normalized to a spatial
/// distribution over patches, and the distributions are averaged. The
/// result sums to 1 over space.
///
/// Panics when no token is active.
pub fn aggregate_cross(
    tape: &mut Tape,
    a_cross: Var,
    active: &[bool],
    resolution: (usize, usize),
) -> Var {
    let shape = tape.value(a_cross).shape().to_vec();
    assert_eq!(shape.len(), 2, "cross-attention must be [P, L]");
    let (p, l) = (shape[0], shape[1]);
    assert_eq!(l, active.len());
    assert_eq!(p, resolution.0 * resolution.1);
    let chosen: Vec<usize> = (0..l).filter(|&k| active[k]).collect();
    assert!(!chosen.is_empty(), "no active tokens to aggregate");

    let mut acc: Option<Var> = None;
    for k in chosen.iter().copied() {
        let idx: Vec<usize> = (0..p).map(|i| i * l + k).collect();
        let col = tape.gather(a_cross, idx.into());
        let total = tape.sum(col, None);
        let normed = tape.div(col, total);
        acc = Some(match acc {
            None => normed,
            Some(a) => tape.add(a, normed),
        });
    }
    let summed = acc.expect("at least one active token");
    let avg = tape.scale(summed, 1.0 / chosen.len() as f64);
    tape.reshape(avg, &[resolution.0, resolution.1])
}

/// Aggregates a self-attention matrix `[P, P]` into one spatial map
/// `[h', w']` by averaging the rows of the masked query patches. Rows are
/// already distributions, so the result sums to 1 over space.
///
/// Panics when the mask selects no patch.
pub fn aggregate_self(tape: &mut Tape, a_self: Var, m_prime: Var) -> Var {
    let shape = tape.value(a_self).shape().to_vec();
    assert_eq!(shape.len(), 2, "self-attention must be [P, P]");
    let p = shape[0];
    assert_eq!(shape[1], p);
    let mres = tape.value(m_prime).shape().to_vec();
    assert_eq!(mres.iter().product::<usize>(), p, "mask patches must match P");
    let masked: Vec<usize> = tape
        .value(m_prime)
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.5)
        .map(|(i, _)| i)
        .collect();
    assert!(!masked.is_empty(), "mask selects no patch");

    let weight = 1.0 / masked.len() as f64;
    let mut selector = vec![0.0; p];
    for &i in &masked {
        selector[i] = weight;
    }
    let sel = tape.constant(Tensor::from_vec(&[1, p], selector));
    let avg = tape.matmul(sel, a_self);
    tape.reshape(avg, &[mres[0], mres[1]])
}

// ── losses ──────────────────────────────────────────────────────────────

/// `sum((1 - M) * A - M * A)` over the spatial grid; with a unit-sum map
/// this lies in `[-1, 1]` and equals `1 - 2 * (mass inside the mask)`.
/// Shared by the cross- and self-attention losses, which are the same
/// formula on different aggregates.
pub fn attention_mask_loss(tape: &mut Tape, a_agg: Var, m_prime: Var) -> Var {
    assert_eq!(
        tape.value(a_agg).shape(),
        tape.value(m_prime).shape(),
        "aggregate/mask shape mismatch"
    );
    let neg2m = tape.scale(m_prime, -2.0);
    let weights = tape.add_scalar(neg2m, 1.0);
    let weighted = tape.mul(weights, a_agg);
    tape.sum(weighted, None)
}

/// Closed-form KL(N(mu, sigma^2) || N(0, 1)), averaged over elements:
/// `mean(0.5 * (mu^2 + sigma^2 - ln sigma^2 - 1))`.
pub fn loss_kl(tape: &mut Tape, mu: Var, sigma: Var) -> Var {
    let mu2 = tape.square(mu);
    let s2 = tape.square(sigma);
    let ls2 = tape.log(s2);
    let a = tape.add(mu2, s2);
    let b = tape.sub(a, ls2);
    let c = tape.add_scalar(b, -1.0);
    let m = tape.mean(c, None);
    tape.scale(m, 0.5)
}

// ── value-level wrappers (used by tests and metrics) ────────────────────

pub fn aggregate_cross_value(a_cross: &Tensor, active: &[bool], resolution: (usize, usize)) -> Tensor {
    let mut tape = Tape::new();
    let a = tape.constant(a_cross.clone());
    let r = aggregate_cross(&mut tape, a, active, resolution);
    tape.value(r).clone()
}

pub fn aggregate_self_value(a_self: &Tensor, m_prime: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let a = tape.constant(a_self.clone());
    let m = tape.constant(m_prime.clone());
    let r = aggregate_self(&mut tape, a, m);
    tape.value(r).clone()
}

pub fn attention_mask_loss_value(a_agg: &Tensor, m_prime: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(a_agg.clone());
    let m = tape.constant(m_prime.clone());
    let l = attention_mask_loss(&mut tape, a, m);
    tape.scalar_value(l)
}

pub fn loss_kl_value(dist: &NoiseDistribution) -> f64 {
    assert!(dist.sigma.data().iter().all(|&s| s > 0.0), "sigma must be positive");
    let mut tape = Tape::new();
    let mu = tape.constant(dist.mu.clone());
    let sigma = tape.constant(dist.sigma.clone());
    let l = loss_kl(&mut tape, mu, sigma);
    tape.scalar_value(l)
}

// ── the optimization loop ───────────────────────────────────────────────

/// How a run produced its latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrinoExit {
    /// Both attention losses fell below their thresholds.
    EarlyStop { round: usize, iter: usize },
    /// All rounds ran; the pooled candidate with the lowest joint loss won.
    PoolArgmin { round: usize },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PrinoIterRow {
    pub round: usize,
    pub iter: usize,
    pub l_c: f64,
    pub l_s: f64,
    pub l_kl: f64,
    pub lambda3: f64,
    pub l_joint: f64,
    /// Set when this iteration broke the round on the KL budget.
    pub kl_break: bool,
}

#[derive(Clone, Debug)]
pub struct PrinoResult {
    pub latent: Tensor,
    pub exit: PrinoExit,
    /// Denoiser forward passes spent; never exceeds `tau_round * tau_iter`.
    pub forwards: usize,
    pub rows: Vec<PrinoIterRow>,
}

impl PrinoResult {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("round,iter,l_c,l_s,l_kl,lambda3,l_joint,kl_break\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.round, r.iter, r.l_c, r.l_s, r.l_kl, r.lambda3, r.l_joint, r.kl_break
            ));
        }
        out
    }
}

/// Optimizes the initial noise for one scene.
///
/// Per round: draw `z ~ N(0,1)`, reset `(mu, sigma)` to `(0, 1)`, then up
/// to `tau_iter` SGD steps on the joint loss evaluated through one denoiser
/// forward at the first denoising step `t = T`. Returns early with
/// `mu + sigma * z` when both attention losses clear their thresholds;
/// breaks the round when the KL passes its budget; pools the candidate
/// otherwise and falls back to the pool argmin (earliest round wins ties).
///
/// Sigma is optimized in log-space so it stays positive.
pub fn optimize_noise(
    model: &DenoiserModel,
    prompt: &[usize],
    z_m: &Tensor,
    m_prime: &Tensor,
    cfg: &PrinoConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> PrinoResult {
    let n = model.config.latent_size;
    let shape = [n, n, 3];
    let t_ini = sched.t_total();
    let active = active_tokens(prompt);
    let resolution = (model.config.patches_per_side(), model.config.patches_per_side());

    let mut pool: Vec<(Tensor, Option<f64>)> = Vec::new();
    let mut rows = Vec::new();
    let mut forwards = 0usize;

    for round in 0..cfg.tau_round {
        let mut rng = stream(seed, "init-noise", round as u64);
        let z = Tensor::randn(&shape, &mut rng);
        let mut mu = Tensor::zeros(&shape);
        let mut log_sigma = Tensor::zeros(&shape);
        let mut last_joint: Option<f64> = None;

        for iter in 0..cfg.tau_iter {
            let mut tape = Tape::new();
            let mu_v = tape.leaf(mu.clone());
            let ls_v = tape.leaf(log_sigma.clone());
            let sigma_v = tape.exp(ls_v);
            let z_c = tape.constant(z.clone());
            let scaled = tape.mul(sigma_v, z_c);
            let z_t = tape.add(mu_v, scaled);

            let vars = model.place(&mut tape, false);
            let zm_c = tape.constant(z_m.clone());
            let mp_c = tape.constant(m_prime.clone());
            let out = model.forward(&mut tape, &vars, z_t, t_ini, prompt, zm_c, mp_c);
            forwards += 1;

            let agg_c = aggregate_cross(&mut tape, out.tap.a_cross, &active, resolution);
            let agg_s = aggregate_self(&mut tape, out.tap.a_self, mp_c);
            let lc_v = attention_mask_loss(&mut tape, agg_c, mp_c);
            let ls_loss_v = attention_mask_loss(&mut tape, agg_s, mp_c);
            let kl_v = loss_kl(&mut tape, mu_v, sigma_v);

            let lc = tape.scalar_value(lc_v);
            let ls = tape.scalar_value(ls_loss_v);
            let lkl = tape.scalar_value(kl_v);
            let l3 = lambda3(lkl);
            let t1 = tape.scale(lc_v, cfg.lambda1);
            let t2 = tape.scale(ls_loss_v, cfg.lambda2);
            let t3 = tape.scale(kl_v, l3);
            let partial = tape.add(t1, t2);
            let joint_v = tape.add(partial, t3);
            let joint = tape.scalar_value(joint_v);
            last_joint = Some(joint);

            let kl_break = lkl > cfg.tau_kl;
            rows.push(PrinoIterRow {
                round,
                iter,
                l_c: lc,
                l_s: ls,
                l_kl: lkl,
                lambda3: l3,
                l_joint: joint,
                kl_break,
            });

            if lc < cfg.tau_c && ls < cfg.tau_s {
                return PrinoResult {
                    latent: tape.value(z_t).clone(),
                    exit: PrinoExit::EarlyStop { round, iter },
                    forwards,
                    rows,
                };
            }
            if kl_break {
                break;
            }

            tape.backward(joint_v);
            let g_mu = tape.grad_or_zeros(mu_v);
            let g_ls = tape.grad_or_zeros(ls_v);
            mu = mu.axpy(-cfg.lr, &g_mu);
            log_sigma = log_sigma.axpy(-cfg.lr, &g_ls);
        }

        let sigma = log_sigma.map(f64::exp);
        let candidate = mu.add(&sigma.mul(&z));
        pool.push((candidate, last_joint));
    }

    // pool argmin on the recorded joint loss; rounds that never evaluated
    // (tau_iter = 0) rank last, and ties keep the earliest round
    let mut best = 0usize;
    for i in 1..pool.len() {
        let bi = pool[i].1.unwrap_or(f64::INFINITY);
        let bb = pool[best].1.unwrap_or(f64::INFINITY);
        if bi < bb {
            best = i;
        }
    }
    PrinoResult {
        latent: pool[best].0.clone(),
        exit: PrinoExit::PoolArgmin { round: best },
        forwards,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda3_matches_schedule() {
        assert_eq!(lambda3(0.001), 1500.0);
        assert_eq!(lambda3(0.0), 500.0);
    }

    #[test]
    fn joint_loss_hand_values() {
        let cfg = PrinoConfig::default();
        assert_eq!(loss_joint(0.0, 0.0, 0.0, &cfg), 0.0);
        assert_eq!(loss_joint(-1.0, -1.0, 0.0, &cfg), -6.0);
    }

    #[test]
    fn kl_hand_values() {
        let d = NoiseDistribution::standard(&[2, 2]);
        assert_eq!(loss_kl_value(&d), 0.0);

        let d = NoiseDistribution {
            mu: Tensor::ones(&[4]),
            sigma: Tensor::ones(&[4]),
        };
        assert!((loss_kl_value(&d) - 0.5).abs() < 1e-15);

        let d = NoiseDistribution {
            mu: Tensor::zeros(&[4]),
            sigma: Tensor::full(&[4], 2.0),
        };
        let expect = 0.5 * (4.0 - 4.0f64.ln() - 1.0);
        assert!((loss_kl_value(&d) - expect).abs() < 1e-12);
        assert!((expect - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn cross_aggregation_single_token_one_hot() {
        // one active token with all its mass on patch 3 aggregates to a
        // one-hot grid
        let mut a = vec![0.0; 4 * 2];
        for p in 0..4 {
            a[p * 2 + 1] = 0.25; // inactive token column
        }
        a[3 * 2] = 0.9; // active token mass on patch 3
        let a = Tensor::from_vec(&[4, 2], a);
        let agg = aggregate_cross_value(&a, &[true, false], (2, 2));
        assert_eq!(agg.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_aggregation_identical_tokens_idempotent() {
        let col = [0.1, 0.2, 0.3, 0.4];
        let mut a = vec![0.0; 4 * 2];
        for p in 0..4 {
            a[p * 2] = col[p];
            a[p * 2 + 1] = col[p];
        }
        let a = Tensor::from_vec(&[4, 2], a);
        let both = aggregate_cross_value(&a, &[true, true], (2, 2));
        let one = aggregate_cross_value(&a, &[true, false], (2, 2));
        assert!(both.max_abs_diff(&one) < 1e-15);
    }

    #[test]
    fn self_aggregation_single_masked_patch_is_its_row() {
        let a = Tensor::from_vec(
            &[4, 4],
            vec![
                0.7, 0.1, 0.1, 0.1, //
                0.25, 0.25, 0.25, 0.25, //
                0.1, 0.2, 0.3, 0.4, //
                0.4, 0.3, 0.2, 0.1,
            ],
        );
        let m = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]);
        let agg = aggregate_self_value(&a, &m);
        assert_eq!(agg.data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn identity_attention_gives_loss_minus_one() {
        // with A = I, every masked row keeps all mass on itself, so the
        // aggregate's mass inside the mask is 1 and the loss is -1
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let agg = aggregate_self_value(&eye, &m);
        let l = attention_mask_loss_value(&agg, &m);
        assert!((l + 1.0).abs() < 1e-15);
    }

    #[test]
    fn mask_loss_uniform_map_values() {
        // uniform map: loss = 1 - 2f for mask fraction f
        let uni = Tensor::full(&[4, 4], 1.0 / 16.0);
        let m25 = Tensor::from_fn(&[4, 4], |i| if i < 4 { 1.0 } else { 0.0 });
        assert!((attention_mask_loss_value(&uni, &m25) - 0.5).abs() < 1e-12);
        let m50 = Tensor::from_fn(&[4, 4], |i| if i < 8 { 1.0 } else { 0.0 });
        assert!(attention_mask_loss_value(&uni, &m50).abs() < 1e-12);
    }

    #[test]
    fn loss_cross_and_loss_self_share_the_formula() {
        let map = Tensor::from_fn(&[4, 4], |i| (i as f64 + 1.0) / 136.0);
        let m = Tensor::from_fn(&[4, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let a = attention_mask_loss_value(&map, &m);
        let b = attention_mask_loss_value(&map, &m);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn zero_iterations_return_the_raw_draw() {
        use crate::denoiser::{DenoiserConfig, DenoiserModel};
        use crate::rng::stream;
        let model = DenoiserModel::init(
            DenoiserConfig {
                latent_size: 8,
                patch: 4,
                dim: 8,
                t_total: 10,
                ..Default::default()
            },
            0,
        );
        let sched = crate::schedule::NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let z_m = Tensor::zeros(&[8, 8, 3]);
        let m_prime = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let cfg = PrinoConfig {
            tau_iter: 0,
            tau_round: 1,
            ..Default::default()
        };
        let r = optimize_noise(&model, &[0, 48, 49, 49], &z_m, &m_prime, &cfg, &sched, 77);
        assert_eq!(r.forwards, 0);
        assert_eq!(r.exit, PrinoExit::PoolArgmin { round: 0 });
        let expect = Tensor::randn(&[8, 8, 3], &mut stream(77, "init-noise", 0));
        assert_eq!(r.latent, expect);
    }

    #[test]
    fn permissive_thresholds_early_stop_immediately() {
        use crate::denoiser::{DenoiserConfig, DenoiserModel};
        use crate::rng::stream;
        let model = DenoiserModel::init(
            DenoiserConfig {
                latent_size: 8,
                patch: 4,
                dim: 8,
                t_total: 10,
                ..Default::default()
            },
            1,
        );
        let sched = crate::schedule::NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let z_m = Tensor::zeros(&[8, 8, 3]);
        let m_prime = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]);
        // losses always lie in [-1, 1], so thresholds of 2 stop at once
        let cfg = PrinoConfig {
            tau_c: 2.0,
            tau_s: 2.0,
            ..Default::default()
        };
        let r = optimize_noise(&model, &[3, 48, 49, 49], &z_m, &m_prime, &cfg, &sched, 5);
        assert_eq!(r.exit, PrinoExit::EarlyStop { round: 0, iter: 0 });
        assert_eq!(r.forwards, 1);
        // no update ran, so the returned latent is the raw draw
        let expect = Tensor::randn(&[8, 8, 3], &mut stream(5, "init-noise", 0));
        assert!(r.latent.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn all_mass_inside_and_outside_extremes() {
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let inside = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        assert!((attention_mask_loss_value(&inside, &m) + 1.0).abs() < 1e-15);
        let outside = Tensor::from_vec(&[2, 2], vec![0.0, 0.5, 0.25, 0.25]);
        assert!((attention_mask_loss_value(&outside, &m) - 1.0).abs() < 1e-15);
    }
}
