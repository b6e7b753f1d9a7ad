//! Denoiser training: stochastic gradient descent on the noise-prediction
//! objective `E ||eps - eps_theta(z_t, t, c, z_m, M')||^2`, with random
//! prompt dropout so the model also learns an unconditional prediction for
//! classifier-free guidance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{downsample_mask, encode};
use crate::denoiser::DenoiserModel;
use crate::rng::stream;
use crate::scene::{null_prompt, Scene};
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub cfg_drop_prob: f64,
    pub log_every: usize,
    pub corpus_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            lr: 0.05,
            batch: 4,
            cfg_drop_prob: 0.1,
            log_every: 50,
            corpus_size: 4096,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("training corpus is empty")]
    EmptyCorpus,
}

/// Loss curve and windowed summaries of a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, batch loss)` every `log_every` steps plus the final step.
    pub loss_curve: Vec<(usize, f64)>,
    /// Mean batch loss over the first 50 steps.
    pub initial_loss: f64,
    /// Mean batch loss over the last 50 steps.
    pub final_loss: f64,
}

impl TrainReport {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (step, loss) in &self.loss_curve {
            out.push_str(&format!("{step},{loss}\n"));
        }
        out
    }
}

/// Draws one batch item: scene index, timestep, and whether the prompt is
/// dropped to the all-null condition.
fn sample_batch_item(
    rng: &mut impl Rng,
    corpus_len: usize,
    t_total: usize,
    drop_prob: f64,
) -> (usize, usize, bool) {
    let scene_idx = rng.gen_range(0..corpus_len);
    let t = rng.gen_range(1..=t_total);
    let dropped = rng.gen::<f64>() < drop_prob;
    (scene_idx, t, dropped)
}

/// Runs SGD in place on `model`. Deterministic for a given seed: the batch
/// composition, timesteps, noise draws and prompt dropout all come from
/// per-step streams.
pub fn train(
    model: &mut DenoiserModel,
    corpus: &[Scene],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let n = model.config.latent_size;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut curve = Vec::new();

    for step in 0..cfg.steps {
        let mut rng = stream(seed, "train-step", step as u64);
        let mut tape = Tape::new();
        let vars = model.place(&mut tape, true);

        let mut batch_loss = None;
        for _ in 0..cfg.batch {
            let (scene_idx, t, dropped) =
                sample_batch_item(&mut rng, corpus.len(), sched.t_total(), cfg.cfg_drop_prob);
            let scene = &corpus[scene_idx];
            let eps = Tensor::randn(&[n, n, 3], &mut rng);
            let z0 = encode(&scene.image);
            let z_t = forward_diffuse(&z0, t, &eps, sched);
            let prompt = if dropped { null_prompt() } else { scene.prompt.clone() };
            let z_m = encode(&scene.masked_image());
            let m_prime = downsample_mask(&scene.mask, model.config.patch);

            let zt_v = tape.constant(z_t);
            let zm_v = tape.constant(z_m);
            let mp_v = tape.constant(m_prime);
            let out = model.forward(&mut tape, &vars, zt_v, t, &prompt, zm_v, mp_v);
            let target = tape.constant(eps);
            let diff = tape.sub(out.eps, target);
            let sq = tape.square(diff);
            let item_loss = tape.mean(sq, None);
            batch_loss = Some(match batch_loss {
                None => item_loss,
                Some(acc) => tape.add(acc, item_loss),
            });
        }
        let total = batch_loss.expect("batch >= 1");
        let loss = tape.scale(total, 1.0 / cfg.batch as f64);
        let loss_val = tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(TrainError::Diverged { step, loss: loss_val });
        }
        losses.push(loss_val);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push((step, loss_val));
        }

        tape.backward(loss);
        for (name, var) in vars.list() {
            if let Some(g) = tape.grad(var) {
                let updated = tape.value(var).axpy(-cfg.lr, g);
                model.params.set(name, updated);
            }
        }
    }

    let window = 50.min(losses.len());
    let initial_loss = losses[..window].iter().sum::<f64>() / window as f64;
    let final_loss = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    Ok(TrainReport {
        loss_curve: curve,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::scene::training_corpus;

    fn small_setup() -> (DenoiserModel, Vec<Scene>, NoiseSchedule) {
        let model = DenoiserModel::init(DenoiserConfig::default(), 7);
        let corpus = training_corpus(64);
        let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        (model, corpus, sched)
    }

    #[test]
    fn short_run_decreases_loss_and_is_deterministic() {
        let (mut model, corpus, sched) = small_setup();
        let cfg = TrainConfig {
            steps: 120,
            log_every: 20,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &corpus, &sched, &cfg, 3).unwrap();
        assert!(report.final_loss < report.initial_loss, "{report:?}");

        let (mut model2, corpus2, sched2) = small_setup();
        let report2 = train(&mut model2, &corpus2, &sched2, &cfg, 3).unwrap();
        assert_eq!(report.loss_curve, report2.loss_curve);
        assert_eq!(model.params.out_w, model2.params.out_w);
    }

    #[test]
    fn cfg_drop_zero_never_drops_prompts() {
        let mut rng = stream(9, "train-step", 0);
        for _ in 0..2000 {
            let (_, _, dropped) = sample_batch_item(&mut rng, 64, 200, 0.0);
            assert!(!dropped);
        }
        // and a positive probability does fire
        let mut rng = stream(9, "train-step", 1);
        let hits = (0..2000)
            .filter(|_| sample_batch_item(&mut rng, 64, 200, 0.5).2)
            .count();
        assert!(hits > 800 && hits < 1200);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let (mut model, _, sched) = small_setup();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&mut model, &[], &sched, &cfg, 0),
            Err(TrainError::EmptyCorpus)
        ));
    }
}
