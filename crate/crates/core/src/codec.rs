//! Image/latent codec and mask resampling.
//!
//! The codec is the identity on the pixel grid: the latent is the image
//! itself, so encode/decode round-trips are exact and final blending can be
//! verified bit-for-bit.

use crate::tensor::Tensor;

/// Identity encoder: image `[h, w, 3]` to latent `[h, w, 3]`.
pub fn encode(image: &Tensor) -> Tensor {
    assert_eq!(image.shape().len(), 3, "expected [h, w, 3] image");
    image.clone()
}

/// Identity decoder.
pub fn decode(latent: &Tensor) -> Tensor {
    assert_eq!(latent.shape().len(), 3, "expected [h, w, 3] latent");
    latent.clone()
}

/// Nearest-neighbor downsample of a binary mask by an integer factor,
/// sampling each cell's center.
pub fn downsample_mask(mask: &Tensor, factor: usize) -> Tensor {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    assert!(factor >= 1 && h % factor == 0 && w % factor == 0);
    let (oh, ow) = (h / factor, w / factor);
    let off = factor / 2;
    Tensor::from_fn(&[oh, ow], |i| {
        let (y, x) = (i / ow, i % ow);
        mask.data()[(y * factor + off) * w + (x * factor + off)]
    })
}

/// Nearest-neighbor upsample of a mask by an integer factor.
pub fn upsample_mask(mask: &Tensor, factor: usize) -> Tensor {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (oh, ow) = (h * factor, w * factor);
    Tensor::from_fn(&[oh, ow], |i| {
        let (y, x) = (i / ow, i % ow);
        mask.data()[(y / factor) * w + (x / factor)]
    })
}
