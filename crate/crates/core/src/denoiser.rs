//! The toy conditional inpainting denoiser.
//!
//! A per-pixel conv path carries the channel-concatenated input
//! `[z_t | z_masked | mask]` at full resolution (1x1 convs in, mid, out),
//! while a single transformer-style block (self-attention, cross-attention,
//! MLP) runs on stride-`patch` patch tokens and injects context back into
//! the pixel stream. Conditioning also enters through a token prompt and a
//! sinusoidal timestep embedding. The block's raw attention matrices are
//! exposed on every forward pass, and the whole pass is recorded on a
//! [`Tape`], so gradients flow to the latent, to the noise-distribution
//! parameters feeding it, and to the weights during training.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::rng::stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Latent grid side; the latent is `[latent_size, latent_size, 3]`.
    pub latent_size: usize,
    /// Patch side; attention runs on `(latent_size / patch)^2` patches.
    pub patch: usize,
    /// Feature dimension of the block.
    pub dim: usize,
    pub vocab: usize,
    pub prompt_len: usize,
    /// Highest timestep the embedding table covers.
    pub t_total: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_size: 32,
            patch: 4,
            dim: 32,
            vocab: crate::scene::VOCAB_SIZE,
            prompt_len: crate::scene::PROMPT_LEN,
            t_total: 200,
        }
    }
}

impl DenoiserConfig {
    pub fn patches_per_side(&self) -> usize {
        self.latent_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

}

/// Raw attention matrices from the block, one row per query.
pub struct AttentionTap {
    /// `[P, P]` patch-to-patch attention; rows sum to 1.
    pub a_self: Var,
    /// `[P, prompt_len]` patch-to-token attention; rows sum to 1.
    pub a_cross: Var,
    /// `(h', w')` patch-grid resolution.
    pub resolution: (usize, usize),
}

/// Value-level copy of a tap, for inspection outside any tape.
#[derive(Clone, Debug)]
pub struct AttentionTapValue {
    pub a_self: Tensor,
    pub a_cross: Tensor,
    pub resolution: (usize, usize),
}

pub struct DenoiserOutput {
    pub eps: Var,
    pub tap: AttentionTap,
}

/// Trained weights plus the fixed index tables the forward pass needs.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub params: Params,
    /// For each pixel, the flat index of its patch in the `[h', w']` grid.
    pixel_patch_idx: Arc<Vec<usize>>,
    /// Gather table turning the `[N, dim]` pixel features into `[P, patch^2 * dim]` rows.
    patch_feat_idx: Arc<Vec<usize>>,
    /// Gather table broadcasting `[P, dim]` token features back to `[N, dim]` pixels.
    ctx_idx: Arc<Vec<usize>>,
    time_table: Tensor,
}

/// All trainable tensors, in the canonical checkpoint order of
/// [`Params::each`].
#[derive(Clone, Debug)]
pub struct Params {
    pub token_embed: Tensor,
    pub time_w: Tensor,
    pub time_b: Tensor,
    pub conv_in_z: Tensor,
    pub conv_in_m: Tensor,
    pub conv_in_k: Tensor,
    pub conv_in_b: Tensor,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub sa_wq: Tensor,
    pub sa_wk: Tensor,
    pub sa_wv: Tensor,
    pub sa_wo: Tensor,
    pub ca_wq: Tensor,
    pub ca_wk: Tensor,
    pub ca_wv: Tensor,
    pub ca_wo: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    pub fuse_w: Tensor,
    pub fuse_b: Tensor,
    pub conv_mid_w: Tensor,
    pub conv_mid_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

macro_rules! for_each_param {
    ($self:expr, $f:expr) => {{
        let f = &mut $f;
        f("token_embed", &$self.token_embed);
        f("time_w", &$self.time_w);
        f("time_b", &$self.time_b);
        f("conv_in_z", &$self.conv_in_z);
        f("conv_in_m", &$self.conv_in_m);
        f("conv_in_k", &$self.conv_in_k);
        f("conv_in_b", &$self.conv_in_b);
        f("patch_w", &$self.patch_w);
        f("patch_b", &$self.patch_b);
        f("sa_wq", &$self.sa_wq);
        f("sa_wk", &$self.sa_wk);
        f("sa_wv", &$self.sa_wv);
        f("sa_wo", &$self.sa_wo);
        f("ca_wq", &$self.ca_wq);
        f("ca_wk", &$self.ca_wk);
        f("ca_wv", &$self.ca_wv);
        f("ca_wo", &$self.ca_wo);
        f("mlp_w1", &$self.mlp_w1);
        f("mlp_b1", &$self.mlp_b1);
        f("mlp_w2", &$self.mlp_w2);
        f("mlp_b2", &$self.mlp_b2);
        f("fuse_w", &$self.fuse_w);
        f("fuse_b", &$self.fuse_b);
        f("conv_mid_w", &$self.conv_mid_w);
        f("conv_mid_b", &$self.conv_mid_b);
        f("out_w", &$self.out_w);
        f("out_b", &$self.out_b);
    }};
}

impl Params {
    /// Visits every parameter as `(name, tensor)` in canonical order.
    pub fn each(&self, mut f: impl FnMut(&'static str, &Tensor)) {
        for_each_param!(self, f);
    }

    pub fn named(&self) -> Vec<(&'static str, Tensor)> {
        let mut out = Vec::new();
        self.each(|n, t| out.push((n, t.clone())));
        out
    }

    /// Replaces parameters from `(name, tensor)` pairs; shapes must match.
    pub fn set(&mut self, name: &str, value: Tensor) {
        let slot = match name {
            "token_embed" => &mut self.token_embed,
            "time_w" => &mut self.time_w,
            "time_b" => &mut self.time_b,
            "conv_in_z" => &mut self.conv_in_z,
            "conv_in_m" => &mut self.conv_in_m,
            "conv_in_k" => &mut self.conv_in_k,
            "conv_in_b" => &mut self.conv_in_b,
            "patch_w" => &mut self.patch_w,
            "patch_b" => &mut self.patch_b,
            "sa_wq" => &mut self.sa_wq,
            "sa_wk" => &mut self.sa_wk,
            "sa_wv" => &mut self.sa_wv,
            "sa_wo" => &mut self.sa_wo,
            "ca_wq" => &mut self.ca_wq,
            "ca_wk" => &mut self.ca_wk,
            "ca_wv" => &mut self.ca_wv,
            "ca_wo" => &mut self.ca_wo,
            "mlp_w1" => &mut self.mlp_w1,
            "mlp_b1" => &mut self.mlp_b1,
            "mlp_w2" => &mut self.mlp_w2,
            "mlp_b2" => &mut self.mlp_b2,
            "fuse_w" => &mut self.fuse_w,
            "fuse_b" => &mut self.fuse_b,
            "conv_mid_w" => &mut self.conv_mid_w,
            "conv_mid_b" => &mut self.conv_mid_b,
            "out_w" => &mut self.out_w,
            "out_b" => &mut self.out_b,
            other => panic!("unknown parameter {other:?}"),
        };
        assert_eq!(slot.shape(), value.shape(), "parameter {name} shape mismatch");
        *slot = value;
    }
}

/// Tape handles for every parameter, mirroring [`Params`].
pub struct ModelVars {
    pub token_embed: Var,
    pub time_w: Var,
    pub time_b: Var,
    pub conv_in_z: Var,
    pub conv_in_m: Var,
    pub conv_in_k: Var,
    pub conv_in_b: Var,
    pub patch_w: Var,
    pub patch_b: Var,
    pub sa_wq: Var,
    pub sa_wk: Var,
    pub sa_wv: Var,
    pub sa_wo: Var,
    pub ca_wq: Var,
    pub ca_wk: Var,
    pub ca_wv: Var,
    pub ca_wo: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub fuse_w: Var,
    pub fuse_b: Var,
    pub conv_mid_w: Var,
    pub conv_mid_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl ModelVars {
    /// Vars in the same canonical order as [`Params::each`].
    pub fn list(&self) -> Vec<(&'static str, Var)> {
        vec![
            ("token_embed", self.token_embed),
            ("time_w", self.time_w),
            ("time_b", self.time_b),
            ("conv_in_z", self.conv_in_z),
            ("conv_in_m", self.conv_in_m),
            ("conv_in_k", self.conv_in_k),
            ("conv_in_b", self.conv_in_b),
            ("patch_w", self.patch_w),
            ("patch_b", self.patch_b),
            ("sa_wq", self.sa_wq),
            ("sa_wk", self.sa_wk),
            ("sa_wv", self.sa_wv),
            ("sa_wo", self.sa_wo),
            ("ca_wq", self.ca_wq),
            ("ca_wk", self.ca_wk),
            ("ca_wv", self.ca_wv),
            ("ca_wo", self.ca_wo),
            ("mlp_w1", self.mlp_w1),
            ("mlp_b1", self.mlp_b1),
            ("mlp_w2", self.mlp_w2),
            ("mlp_b2", self.mlp_b2),
            ("fuse_w", self.fuse_w),
            ("fuse_b", self.fuse_b),
            ("conv_mid_w", self.conv_mid_w),
            ("conv_mid_b", self.conv_mid_b),
            ("out_w", self.out_w),
            ("out_b", self.out_b),
        ]
    }
}

impl DenoiserModel {
    /// Randomly initialized model; weights scale with 1/sqrt(fan_in) and
    /// the output head starts near zero so the first predictions are small.
    pub fn init(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = stream(seed, "model-init", 0);
        let d = config.dim;
        let mut mat = |shape: &[usize], scale: f64| -> Tensor {
            Tensor::randn(shape, &mut rng).scale(scale)
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let pf = config.patch * config.patch * d;
        let params = Params {
            token_embed: mat(&[config.vocab, d], 0.5),
            time_w: mat(&[d, d], fan(d)),
            time_b: Tensor::zeros(&[d]),
            conv_in_z: mat(&[3, d], fan(3)),
            conv_in_m: mat(&[3, d], fan(3)),
            conv_in_k: mat(&[1, d], 0.5),
            conv_in_b: Tensor::zeros(&[d]),
            patch_w: mat(&[pf, d], fan(pf)),
            patch_b: Tensor::zeros(&[d]),
            sa_wq: mat(&[d, d], fan(d)),
            sa_wk: mat(&[d, d], fan(d)),
            sa_wv: mat(&[d, d], fan(d)),
            sa_wo: mat(&[d, d], fan(d)),
            ca_wq: mat(&[d, d], fan(d)),
            ca_wk: mat(&[d, d], fan(d)),
            ca_wv: mat(&[d, d], fan(d)),
            ca_wo: mat(&[d, d], fan(d)),
            mlp_w1: mat(&[d, 2 * d], fan(d)),
            mlp_b1: Tensor::zeros(&[2 * d]),
            mlp_w2: mat(&[2 * d, d], fan(2 * d)),
            mlp_b2: Tensor::zeros(&[d]),
            fuse_w: mat(&[d, d], fan(d)),
            fuse_b: Tensor::zeros(&[d]),
            conv_mid_w: mat(&[d, d], fan(d)),
            conv_mid_b: Tensor::zeros(&[d]),
            out_w: mat(&[d, 3], 0.02 * fan(d)),
            out_b: Tensor::zeros(&[3]),
        };
        Self::with_params(config, params)
    }

    pub fn with_params(config: DenoiserConfig, params: Params) -> Self {
        assert_eq!(config.latent_size % config.patch, 0, "patch must divide latent_size");
        let pixel_patch_idx = Arc::new(build_pixel_patch_idx(&config));
        let patch_feat_idx = Arc::new(build_patch_feat_idx(&config));
        let ctx_idx = Arc::new(build_ctx_idx(&config));
        let time_table = build_time_table(config.t_total, config.dim);
        Self {
            config,
            params,
            pixel_patch_idx,
            patch_feat_idx,
            ctx_idx,
            time_table,
        }
    }

    /// Places every parameter on `tape`, as leaves when `trainable`.
    pub fn place(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ModelVars {
            token_embed: put(&self.params.token_embed),
            time_w: put(&self.params.time_w),
            time_b: put(&self.params.time_b),
            conv_in_z: put(&self.params.conv_in_z),
            conv_in_m: put(&self.params.conv_in_m),
            conv_in_k: put(&self.params.conv_in_k),
            conv_in_b: put(&self.params.conv_in_b),
            patch_w: put(&self.params.patch_w),
            patch_b: put(&self.params.patch_b),
            sa_wq: put(&self.params.sa_wq),
            sa_wk: put(&self.params.sa_wk),
            sa_wv: put(&self.params.sa_wv),
            sa_wo: put(&self.params.sa_wo),
            ca_wq: put(&self.params.ca_wq),
            ca_wk: put(&self.params.ca_wk),
            ca_wv: put(&self.params.ca_wv),
            ca_wo: put(&self.params.ca_wo),
            mlp_w1: put(&self.params.mlp_w1),
            mlp_b1: put(&self.params.mlp_b1),
            mlp_w2: put(&self.params.mlp_w2),
            mlp_b2: put(&self.params.mlp_b2),
            fuse_w: put(&self.params.fuse_w),
            fuse_b: put(&self.params.fuse_b),
            conv_mid_w: put(&self.params.conv_mid_w),
            conv_mid_b: put(&self.params.conv_mid_b),
            out_w: put(&self.params.out_w),
            out_b: put(&self.params.out_b),
        }
    }

    /// Patch features of a latent alone through the trained embedding
    /// (the latent branch of conv_in followed by the patch projection),
    /// `[P, dim]`. Also serves as the frozen feature extractor for the
    /// alignment reward.
    pub fn embed_patches(&self, tape: &mut Tape, vars: &ModelVars, latent: Var) -> Var {
        let cfg = &self.config;
        let n2 = cfg.latent_size * cfg.latent_size;
        let p = cfg.num_patches();
        let pf = cfg.patch * cfg.patch * cfg.dim;
        let pix = tape.reshape(latent, &[n2, 3]);
        let feats = tape.matmul(pix, vars.conv_in_z);
        let flat = tape.reshape(feats, &[n2 * cfg.dim]);
        let grouped = tape.gather(flat, Arc::clone(&self.patch_feat_idx));
        let rows = tape.reshape(grouped, &[p, pf]);
        tape.matmul(rows, vars.patch_w)
    }

    /// Rows of the token-embedding table for `tokens`, `[len, dim]`.
    pub fn embed_tokens(&self, tape: &mut Tape, vars: &ModelVars, tokens: &[usize]) -> Var {
        let d = self.config.dim;
        let idx: Vec<usize> = tokens
            .iter()
            .flat_map(|&t| {
                assert!(t < self.config.vocab, "token id {t} out of vocabulary");
                (0..d).map(move |j| t * d + j)
            })
            .collect();
        let g = tape.gather(vars.token_embed, Arc::new(idx));
        tape.reshape(g, &[tokens.len(), d])
    }

    /// One conditional forward pass on `tape`.
    ///
    /// `z_t` and `z_m` are `[n, n, 3]` latents, `m_prime` is the mask
    /// downsampled to the patch grid `[h', w']`. Returns the predicted
    /// noise (same shape as `z_t`) and the block's attention tap.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        z_t: Var,
        t: usize,
        prompt: &[usize],
        z_m: Var,
        m_prime: Var,
    ) -> DenoiserOutput {
        let cfg = &self.config;
        assert!(t >= 1 && t <= cfg.t_total, "timestep {t} out of 1..={}", cfg.t_total);
        assert_eq!(prompt.len(), cfg.prompt_len, "prompt must have {} tokens", cfg.prompt_len);
        let n = cfg.latent_size;
        let n2 = n * n;
        let hp = cfg.patches_per_side();
        let p = cfg.num_patches();
        let pf = cfg.patch * cfg.patch * cfg.dim;
        let d = cfg.dim;
        assert_eq!(tape.value(z_t).shape(), &[n, n, 3], "z_t shape");
        assert_eq!(tape.value(z_m).shape(), &[n, n, 3], "z_m shape");
        assert_eq!(tape.value(m_prime).shape(), &[hp, hp], "m_prime shape");

        // pixel stream: 1x1 conv over the concatenated conditioning
        // channels, written as a sum of per-group projections
        let pix_zt = tape.reshape(z_t, &[n2, 3]);
        let pix_zm = tape.reshape(z_m, &[n2, 3]);
        let mask_flat = tape.reshape(m_prime, &[p]);
        let mask_up = tape.gather(mask_flat, Arc::clone(&self.pixel_patch_idx));
        let mask_col = tape.reshape(mask_up, &[n2, 1]);
        let h_z = tape.matmul(pix_zt, vars.conv_in_z);
        let h_m = tape.matmul(pix_zm, vars.conv_in_m);
        let h_k = tape.matmul(mask_col, vars.conv_in_k);
        let mut h = tape.add(h_z, h_m);
        h = tape.add(h, h_k);
        h = tape.add(h, vars.conv_in_b);

        // timestep embedding enters the pixel stream (and through it the
        // patch tokens)
        let trow = tape.constant(self.time_table_row(t));
        let temb0 = tape.matmul(trow, vars.time_w);
        let temb = tape.add(temb0, vars.time_b);
        h = tape.add(h, temb);

        // patch tokens
        let h_flat = tape.reshape(h, &[n2 * d]);
        let grouped = tape.gather(h_flat, Arc::clone(&self.patch_feat_idx));
        let rows = tape.reshape(grouped, &[p, pf]);
        let proj = tape.matmul(rows, vars.patch_w);
        let mut x = tape.add(proj, vars.patch_b);

        let scale = 1.0 / (d as f64).sqrt();

        // self-attention
        let hn = tape.rms_norm(x, 1, 1e-6);
        let q = tape.matmul(hn, vars.sa_wq);
        let k = tape.matmul(hn, vars.sa_wk);
        let v = tape.matmul(hn, vars.sa_wv);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, scale);
        let a_self = tape.softmax(scores, 1);
        let mixed = tape.matmul(a_self, v);
        let proj = tape.matmul(mixed, vars.sa_wo);
        x = tape.add(x, proj);

        // cross-attention over the prompt tokens
        let tok = self.embed_tokens(tape, vars, prompt);
        let hn = tape.rms_norm(x, 1, 1e-6);
        let q = tape.matmul(hn, vars.ca_wq);
        let k = tape.matmul(tok, vars.ca_wk);
        let v = tape.matmul(tok, vars.ca_wv);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, scale);
        let a_cross = tape.softmax(scores, 1);
        let mixed = tape.matmul(a_cross, v);
        let proj = tape.matmul(mixed, vars.ca_wo);
        x = tape.add(x, proj);

        // mlp
        let hn = tape.rms_norm(x, 1, 1e-6);
        let h1 = tape.matmul(hn, vars.mlp_w1);
        let h1 = tape.add(h1, vars.mlp_b1);
        let h1 = tape.silu(h1);
        let h2 = tape.matmul(h1, vars.mlp_w2);
        let h2 = tape.add(h2, vars.mlp_b2);
        x = tape.add(x, h2);

        // broadcast token context back into the pixel stream
        let fused = tape.matmul(x, vars.fuse_w);
        let fused = tape.add(fused, vars.fuse_b);
        let fused_flat = tape.reshape(fused, &[p * d]);
        let ctx_flat = tape.gather(fused_flat, Arc::clone(&self.ctx_idx));
        let ctx = tape.reshape(ctx_flat, &[n2, d]);
        let mut hpix = tape.add(h, ctx);

        // per-pixel mid layer and the output head
        let mid = tape.matmul(hpix, vars.conv_mid_w);
        let mid = tape.add(mid, vars.conv_mid_b);
        let mid = tape.silu(mid);
        hpix = tape.add(hpix, mid);
        let out = tape.matmul(hpix, vars.out_w);
        let out = tape.add(out, vars.out_b);
        let eps = tape.reshape(out, &[n, n, 3]);

        DenoiserOutput {
            eps,
            tap: AttentionTap {
                a_self,
                a_cross,
                resolution: (hp, hp),
            },
        }
    }

    /// Value-level forward on a scratch tape.
    pub fn forward_value(
        &self,
        z_t: &Tensor,
        t: usize,
        prompt: &[usize],
        z_m: &Tensor,
        m_prime: &Tensor,
    ) -> (Tensor, AttentionTapValue) {
        let mut tape = Tape::new();
        let vars = self.place(&mut tape, false);
        let zt = tape.constant(z_t.clone());
        let zm = tape.constant(z_m.clone());
        let mp = tape.constant(m_prime.clone());
        let out = self.forward(&mut tape, &vars, zt, t, prompt, zm, mp);
        (
            tape.value(out.eps).clone(),
            AttentionTapValue {
                a_self: tape.value(out.tap.a_self).clone(),
                a_cross: tape.value(out.tap.a_cross).clone(),
                resolution: out.tap.resolution,
            },
        )
    }

    /// Classifier-free-guided prediction:
    /// `eps_uncond + cfg_scale * (eps_cond - eps_uncond)`.
    ///
    /// `cfg_scale = 1` returns the conditional prediction exactly and
    /// `cfg_scale = 0` the unconditional one, skipping the unused pass.
    pub fn cfg_predict(
        &self,
        z_t: &Tensor,
        t: usize,
        prompt: &[usize],
        z_m: &Tensor,
        m_prime: &Tensor,
        cfg_scale: f64,
    ) -> Tensor {
        assert!(cfg_scale >= 0.0, "cfg_scale must be non-negative");
        let null = vec![crate::scene::NULL_TOKEN; self.config.prompt_len];
        if cfg_scale == 1.0 {
            return self.forward_value(z_t, t, prompt, z_m, m_prime).0;
        }
        if cfg_scale == 0.0 {
            return self.forward_value(z_t, t, &null, z_m, m_prime).0;
        }
        let cond = self.forward_value(z_t, t, prompt, z_m, m_prime).0;
        let uncond = self.forward_value(z_t, t, &null, z_m, m_prime).0;
        uncond.axpy(cfg_scale, &cond.sub(&uncond))
    }

    /// CFG-combined prediction built on an existing tape, so callers can
    /// differentiate through it. Returns the prediction var.
    pub fn cfg_predict_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        z_t: Var,
        t: usize,
        prompt: &[usize],
        z_m: Var,
        m_prime: Var,
        cfg_scale: f64,
    ) -> Var {
        assert!(cfg_scale >= 0.0, "cfg_scale must be non-negative");
        let null = vec![crate::scene::NULL_TOKEN; self.config.prompt_len];
        if cfg_scale == 1.0 {
            return self.forward(tape, vars, z_t, t, prompt, z_m, m_prime).eps;
        }
        if cfg_scale == 0.0 {
            return self.forward(tape, vars, z_t, t, &null, z_m, m_prime).eps;
        }
        let cond = self.forward(tape, vars, z_t, t, prompt, z_m, m_prime).eps;
        let uncond = self.forward(tape, vars, z_t, t, &null, z_m, m_prime).eps;
        let diff = tape.sub(cond, uncond);
        let scaled = tape.scale(diff, cfg_scale);
        tape.add(uncond, scaled)
    }

    fn time_table_row(&self, t: usize) -> Tensor {
        let d = self.config.dim;
        Tensor::from_vec(&[1, d], self.time_table.data()[t * d..(t + 1) * d].to_vec())
    }
}

/// For each pixel (row-major), the flat index of its patch.
fn build_pixel_patch_idx(cfg: &DenoiserConfig) -> Vec<usize> {
    let n = cfg.latent_size;
    let hp = cfg.patches_per_side();
    (0..n * n)
        .map(|pix| {
            let (y, x) = (pix / n, pix % n);
            (y / cfg.patch) * hp + x / cfg.patch
        })
        .collect()
}

/// Gathers the `[N, dim]` pixel-feature matrix into `[P, patch^2 * dim]`
/// rows, pixels in row-major order within each patch.
fn build_patch_feat_idx(cfg: &DenoiserConfig) -> Vec<usize> {
    let n = cfg.latent_size;
    let hp = cfg.patches_per_side();
    let d = cfg.dim;
    let mut idx = Vec::with_capacity(cfg.num_patches() * cfg.patch * cfg.patch * d);
    for py in 0..hp {
        for px in 0..hp {
            for dy in 0..cfg.patch {
                for dx in 0..cfg.patch {
                    let pix = (py * cfg.patch + dy) * n + px * cfg.patch + dx;
                    for c in 0..d {
                        idx.push(pix * d + c);
                    }
                }
            }
        }
    }
    idx
}

/// Broadcasts `[P, dim]` token features back to pixels: for each pixel and
/// channel, the flat index into the token-feature matrix.
fn build_ctx_idx(cfg: &DenoiserConfig) -> Vec<usize> {
    let d = cfg.dim;
    let per_pixel = build_pixel_patch_idx(cfg);
    let mut idx = Vec::with_capacity(per_pixel.len() * d);
    for patch in per_pixel {
        for c in 0..d {
            idx.push(patch * d + c);
        }
    }
    idx
}

fn build_time_table(t_total: usize, d: usize) -> Tensor {
    assert!(d % 2 == 0, "dim must be even for the sinusoidal table");
    let half = d / 2;
    Tensor::from_fn(&[t_total + 1, d], |i| {
        let (t, j) = (i / d, i % d);
        let freq = 1.0 / 10_000f64.powf((j % half) as f64 / half as f64);
        let angle = t as f64 * freq;
        if j < half {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
