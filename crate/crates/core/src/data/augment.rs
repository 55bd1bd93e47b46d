use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;

/// Random image augmentation. Zeroed fields disable their step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Zero-pad by this many pixels, then crop back at a random offset.
    pub crop_pad: usize,
    pub flip_p: f64,
    /// Brightness factor drawn from `1 ± brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`.
    pub contrast: f64,
    pub gray_p: f64,
}

impl AugmentPolicy {
    pub const NONE: AugmentPolicy = AugmentPolicy { crop_pad: 0, flip_p: 0.0, brightness: 0.0, contrast: 0.0, gray_p: 0.0 };

    /// Crop and flip only, for supervised pre-training.
    pub const CROP_FLIP: AugmentPolicy = AugmentPolicy { crop_pad: 4, flip_p: 0.5, ..Self::NONE };

    /// The contrastive view policy.
    pub const CONTRASTIVE: AugmentPolicy =
        AugmentPolicy { crop_pad: 4, flip_p: 0.5, brightness: 0.4, contrast: 0.4, gray_p: 0.2 };
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Augments one `c×h×w` image.
pub fn augment(img: &[u8], c: usize, h: usize, w: usize, policy: &AugmentPolicy, rng: &mut impl Rng) -> Vec<u8> {
    let plane = h * w;
    let mut out = img.to_vec();

    if policy.crop_pad > 0 {
        let p = policy.crop_pad as isize;
        let oy = rng.gen_range(0..=2 * p) - p;
        let ox = rng.gen_range(0..=2 * p) - p;
        for ch in 0..c {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let (sy, sx) = (y + oy, x + ox);
                    let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        0
                    } else {
                        img[ch * plane + sy as usize * w + sx as usize]
                    };
                    out[ch * plane + y as usize * w + x as usize] = v;
                }
            }
        }
    }

    if policy.flip_p > 0.0 && rng.gen_bool(policy.flip_p.min(1.0)) {
        for row in out.chunks_mut(w) {
            row.reverse();
        }
    }

    if (policy.brightness > 0.0 || policy.contrast > 0.0) && c == 3 {
        let b = 1.0 + if policy.brightness > 0.0 { rng.gen_range(-policy.brightness..=policy.brightness) } else { 0.0 } as f32;
        let k = 1.0 + if policy.contrast > 0.0 { rng.gen_range(-policy.contrast..=policy.contrast) } else { 0.0 } as f32;
        let mut px: Vec<f32> = out.iter().map(|&v| v as f32 * b).collect();
        let mean = (0..plane).map(|p| luma(px[p], px[plane + p], px[2 * plane + p])).sum::<f32>() / plane as f32;
        for v in px.iter_mut() {
            *v = (*v - mean) * k + mean;
        }
        for (o, v) in out.iter_mut().zip(px) {
            *o = v.round().clamp(0.0, 255.0) as u8;
        }
    }

    if policy.gray_p > 0.0 && c == 3 && rng.gen_bool(policy.gray_p.min(1.0)) {
        for p in 0..plane {
            let l = (77 * out[p] as u32 + 150 * out[plane + p] as u32 + 29 * out[2 * plane + p] as u32) >> 8;
            for ch in 0..3 {
                out[ch * plane + p] = l as u8;
            }
        }
    }
    out
}

/// Two views from independent streams split off `rng`.
pub fn two_views(
    img: &[u8],
    c: usize,
    h: usize,
    w: usize,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> (Vec<u8>, Vec<u8>) {
    let (s1, s2): (u64, u64) = (rng.gen(), rng.gen());
    let a = augment(img, c, h, w, policy, &mut rng::stream(s1, "view", 0));
    let b = augment(img, c, h, w, policy, &mut rng::stream(s2, "view", 1));
    (a, b)
}
