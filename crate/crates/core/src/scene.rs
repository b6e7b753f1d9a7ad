//! Procedural synthetic scenes: one colored shape on a textured background,
//! with an object-aligned or free-form inpainting mask and a token prompt.
//!
//! Scenes are deterministic per seed, so corpora and benchmark suites can be
//! frozen as seed lists.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::stream;
use crate::tensor::Tensor;

pub const IMG_SIZE: usize = 32;
pub const NUM_COLORS: usize = 8;
pub const NUM_SHAPES: usize = 6;
pub const NUM_PAIRS: usize = NUM_COLORS * NUM_SHAPES;
/// Shape tokens sit directly above the color tokens.
pub const SHAPE_TOKEN_BASE: usize = NUM_COLORS;
/// Padding token (the last id); an all-null prompt is the unconditional
/// input.
pub const NULL_TOKEN: usize = VOCAB_SIZE - 1;
/// 49 content-capable symbols plus the null token; prompts use the color
/// and shape ranges.
pub const VOCAB_SIZE: usize = 50;
pub const PROMPT_LEN: usize = 4;

pub const COLOR_NAMES: [&str; NUM_COLORS] = [
    "red", "green", "blue", "yellow", "magenta", "cyan", "white", "orange",
];
pub const SHAPE_NAMES: [&str; NUM_SHAPES] =
    ["square", "circle", "triangle", "diamond", "cross", "ring"];

/// RGB centroids used both for rendering and for classification.
pub const COLOR_RGB: [[f64; 3]; NUM_COLORS] = [
    [0.90, 0.08, 0.08],
    [0.08, 0.85, 0.10],
    [0.10, 0.15, 0.90],
    [0.92, 0.88, 0.10],
    [0.88, 0.10, 0.88],
    [0.10, 0.86, 0.88],
    [0.95, 0.95, 0.95],
    [0.95, 0.55, 0.05],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Tight bounding region around the object.
    ObjectAligned,
    /// Thick random stroke overlapping the object.
    Freeform,
}

/// One (image, mask, prompt) triple plus its generation labels.
#[derive(Clone, Debug)]
pub struct Scene {
    pub seed: u64,
    pub mode: MaskMode,
    /// `[IMG_SIZE, IMG_SIZE, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[IMG_SIZE, IMG_SIZE]`, binary; 1 marks the region to repaint.
    pub mask: Tensor,
    /// Fixed-length token ids, null-padded.
    pub prompt: Vec<usize>,
    pub color_id: usize,
    pub shape_id: usize,
}

impl Scene {
    /// Input image with masked pixels zeroed: `I * (1 - M)` per channel.
    pub fn masked_image(&self) -> Tensor {
        apply_inverse_mask(&self.image, &self.mask)
    }

    pub fn pair_token(&self) -> usize {
        self.color_id * NUM_SHAPES + self.shape_id
    }
}

/// `I * (1 - M)` with the single-channel mask applied to every channel.
pub fn apply_inverse_mask(image: &Tensor, mask: &Tensor) -> Tensor {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    assert_eq!(image.shape(), &[h, w, 3]);
    Tensor::from_fn(image.shape(), |i| {
        let pix = i / 3;
        image.data()[i] * (1.0 - mask.data()[pix])
    })
}

/// The all-null prompt used for classifier-free guidance.
pub fn null_prompt() -> Vec<usize> {
    vec![NULL_TOKEN; PROMPT_LEN]
}

/// Membership test for shape `shape_id` of radius `r` centered at the
/// origin. Shared with the template matcher so rendered shapes and
/// classification templates agree exactly.
pub fn shape_member(shape_id: usize, dx: i64, dy: i64, r: i64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape_id {
        0 => ax <= r && ay <= r,                                  // square
        1 => dx * dx + dy * dy <= r * r,                          // circle
        2 => ay <= r && 2 * ax <= dy + r,                         // triangle (apex up)
        3 => ax + ay <= r,                                        // diamond
        4 => (3 * ax <= r && ay <= r) || (3 * ay <= r && ax <= r), // cross
        5 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && 4 * d2 >= r * r // ring
        }
        _ => unreachable!("shape id {shape_id}"),
    }
}

/// Deterministically renders the scene for `seed`. The (color, shape) pair
/// cycles with the seed so any contiguous seed range covers all pairs
/// nearly uniformly; geometry and texture come from the seed's own stream.
pub fn generate_scene(seed: u64, mode: MaskMode) -> Scene {
    let pair = (seed % NUM_PAIRS as u64) as usize;
    let color_id = pair / NUM_SHAPES;
    let shape_id = pair % NUM_SHAPES;
    let mut rng = stream(seed, "scene", 0);

    let n = IMG_SIZE;
    // background: smooth two-wave texture per channel, kept dark
    let fx: f64 = rng.gen_range(1..=2) as f64;
    let fy: f64 = rng.gen_range(1..=2) as f64;
    let phases: [f64; 3] = [
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    ];
    let base: f64 = rng.gen_range(0.12..0.22);
    let mut image = vec![0.0; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                let wave = (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / n as f64
                    + phases[c])
                    .sin();
                image[(y * n + x) * 3 + c] = base + 0.08 * wave + 0.02 * c as f64;
            }
        }
    }

    // object geometry
    let r: i64 = rng.gen_range(6..=9);
    let margin = r + 2;
    let cx: i64 = rng.gen_range(margin..(n as i64 - margin));
    let cy: i64 = rng.gen_range(margin..(n as i64 - margin));
    let rgb = COLOR_RGB[color_id];
    let mut object = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            if shape_member(shape_id, x as i64 - cx, y as i64 - cy, r) {
                object[y * n + x] = true;
                for c in 0..3 {
                    image[(y * n + x) * 3 + c] = rgb[c];
                }
            }
        }
    }

    let mask = match mode {
        MaskMode::ObjectAligned => aligned_mask(&object, n),
        MaskMode::Freeform => freeform_mask(&mut rng, cx, cy, r, n),
    };

    let prompt = {
        let mut p = null_prompt();
        p[0] = color_id;
        p[1] = SHAPE_TOKEN_BASE + shape_id;
        p
    };

    Scene {
        seed,
        mode,
        image: Tensor::from_vec(&[n, n, 3], image),
        mask: Tensor::from_vec(&[n, n], mask),
        prompt,
        color_id,
        shape_id,
    }
}

fn aligned_mask(object: &[bool], n: usize) -> Vec<f64> {
    let (mut x0, mut y0, mut x1, mut y1) = (n as i64, n as i64, -1i64, -1i64);
    for y in 0..n {
        for x in 0..n {
            if object[y * n + x] {
                x0 = x0.min(x as i64);
                y0 = y0.min(y as i64);
                x1 = x1.max(x as i64);
                y1 = y1.max(y as i64);
            }
        }
    }
    let (x0, y0) = ((x0 - 1).max(0), (y0 - 1).max(0));
    let (x1, y1) = ((x1 + 1).min(n as i64 - 1), (y1 + 1).min(n as i64 - 1));
    let mut mask = vec![0.0; n * n];
    for y in y0..=y1 {
        for x in x0..=x1 {
            mask[y as usize * n + x as usize] = 1.0;
        }
    }
    mask
}

fn freeform_mask(rng: &mut impl Rng, cx: i64, cy: i64, r_obj: i64, n: usize) -> Vec<f64> {
    let mut mask = vec![0.0; n * n];
    let mut stamp = |px: f64, py: f64, radius: f64| {
        let r = radius.ceil() as i64;
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (px.round() as i64 + dx, py.round() as i64 + dy);
                if x >= 0 && y >= 0 && (x as usize) < n && (y as usize) < n {
                    let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                    if d2 <= radius * radius {
                        mask[y as usize * n + x as usize] = 1.0;
                    }
                }
            }
        }
    };
    // the stroke always swallows the object, then wanders off it
    let thickness: f64 = rng.gen_range(3.0..5.0);
    let (mut px, mut py) = (cx as f64, cy as f64);
    let mut angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    stamp(px, py, r_obj as f64 + 1.5);
    for _ in 0..6 {
        angle += rng.gen_range(-1.0..1.0);
        let step: f64 = rng.gen_range(2.5..4.5);
        for _ in 0..step.ceil() as usize {
            px = (px + angle.cos()).clamp(2.0, n as f64 - 3.0);
            py = (py + angle.sin()).clamp(2.0, n as f64 - 3.0);
            stamp(px, py, thickness);
        }
    }
    mask
}

/// The training corpus: seeds `0..n`, roughly 40% object-aligned masks and
/// the rest free-form strokes.
pub fn training_corpus(n: usize) -> Vec<Scene> {
    (0..n as u64)
        .map(|seed| {
            let mode = if seed % 10 < 4 {
                MaskMode::ObjectAligned
            } else {
                MaskMode::Freeform
            };
            generate_scene(seed, mode)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let a = generate_scene(0, MaskMode::ObjectAligned);
        let b = generate_scene(0, MaskMode::ObjectAligned);
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.prompt, b.prompt);
    }

    #[test]
    fn aligned_mask_covers_object() {
        for seed in 0..60 {
            let s = generate_scene(seed, MaskMode::ObjectAligned);
            let rgb = COLOR_RGB[s.color_id];
            for y in 0..IMG_SIZE {
                for x in 0..IMG_SIZE {
                    let i = (y * IMG_SIZE + x) * 3;
                    let is_obj = (0..3).all(|c| s.image.data()[i + c] == rgb[c]);
                    if is_obj {
                        assert_eq!(s.mask.data()[y * IMG_SIZE + x], 1.0, "seed {seed} ({x},{y})");
                    }
                }
            }
        }
    }

    #[test]
    fn freeform_mask_overlaps_object() {
        for seed in 0..60 {
            let s = generate_scene(seed, MaskMode::Freeform);
            let rgb = COLOR_RGB[s.color_id];
            let mut overlap = 0usize;
            for p in 0..IMG_SIZE * IMG_SIZE {
                let is_obj = (0..3).all(|c| s.image.data()[p * 3 + c] == rgb[c]);
                if is_obj && s.mask.data()[p] == 1.0 {
                    overlap += 1;
                }
            }
            assert!(overlap > 0, "seed {seed} stroke misses the object");
        }
    }

    #[test]
    fn every_pair_appears_in_large_corpus() {
        let corpus = training_corpus(1000);
        let mut counts = [0usize; NUM_PAIRS];
        for s in &corpus {
            counts[s.pair_token()] += 1;
        }
        assert!(counts.iter().all(|&c| c >= 10), "counts {counts:?}");
    }

    #[test]
    fn masked_image_zeroes_masked_pixels() {
        let s = generate_scene(5, MaskMode::ObjectAligned);
        let m = s.masked_image();
        for p in 0..IMG_SIZE * IMG_SIZE {
            for c in 0..3 {
                if s.mask.data()[p] == 1.0 {
                    assert_eq!(m.data()[p * 3 + c], 0.0);
                } else {
                    assert_eq!(m.data()[p * 3 + c], s.image.data()[p * 3 + c]);
                }
            }
        }
    }

    #[test]
    fn prompts_are_padded_to_length() {
        let s = generate_scene(3, MaskMode::Freeform);
        assert_eq!(s.prompt.len(), PROMPT_LEN);
        assert_eq!(s.prompt[0], s.color_id);
        assert_eq!(s.prompt[1], SHAPE_TOKEN_BASE + s.shape_id);
        assert_eq!(s.prompt[2], NULL_TOKEN);
        assert_eq!(s.prompt[3], NULL_TOKEN);
        assert!(s.prompt.iter().all(|&t| t < VOCAB_SIZE));
    }
}
