//! Pixel transforms that move rendered images into another domain.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::Geometry;
use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Texture {
    Stripes,
    Grid,
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    /// Rotate hue by this many degrees.
    HueRotate(i32),
    /// Blend a texture in with weight `alpha ∈ [0, 1]`.
    TextureOverlay(Texture, f64),
    /// `255 − p` per channel, then additive noise of standard deviation σ.
    InvertNoise(f64),
    /// Luma threshold to black and white.
    Binarize(u8),
}

/// A named transform chain plus the geometry used for rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub transforms: Vec<Transform>,
    pub geometry: Geometry,
}

impl DomainSpec {
    pub fn identity(name: &str) -> Self {
        Self { name: name.into(), transforms: Vec::new(), geometry: Geometry::default() }
    }

    pub fn with(name: &str, transforms: Vec<Transform>) -> Self {
        Self { transforms, ..Self::identity(name) }
    }

    /// The four shifted target domains, mildest first.
    pub fn targets() -> Vec<DomainSpec> {
        ["hue", "texture", "invert", "binarize"].iter().map(|n| Self::preset(n).unwrap()).collect()
    }

    pub fn preset(name: &str) -> Option<DomainSpec> {
        Some(match name {
            "source" => Self::identity("source"),
            "hue" => Self::with("hue", vec![Transform::HueRotate(150)]),
            "texture" => Self::with("texture", vec![Transform::HueRotate(60), Transform::TextureOverlay(Texture::Stripes, 0.45)]),
            "invert" => Self::with("invert", vec![Transform::InvertNoise(28.0), Transform::TextureOverlay(Texture::Grid, 0.3)]),
            "binarize" => Self::with("binarize", vec![Transform::TextureOverlay(Texture::Noise, 0.35), Transform::Binarize(128)]),
            _ => return None,
        })
    }

    /// Applies the chain to one `3×h×w` image.
    pub fn apply(&self, img: &mut [u8], h: usize, w: usize, rng: &mut impl Rng) {
        for t in &self.transforms {
            t.apply(img, h, w, rng);
        }
    }
}

const HUE_RANGE: i32 = 1536; // six sectors of 256

fn rgb_to_hsv(r: i32, g: i32, b: i32) -> (i32, i32, i32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta == 0 {
        return (0, 0, max);
    }
    let s = delta * 255 / max;
    let h = if max == r {
        256 * (g - b) / delta
    } else if max == g {
        512 + 256 * (b - r) / delta
    } else {
        1024 + 256 * (r - g) / delta
    };
    (h.rem_euclid(HUE_RANGE), s, max)
}

fn hsv_to_rgb(h: i32, s: i32, v: i32) -> (i32, i32, i32) {
    let sector = h / 256;
    let f = h % 256;
    let p = v * (255 - s) / 255;
    let q = v * (255 * 256 - s * f) / (255 * 256);
    let t = v * (255 * 256 - s * (256 - f)) / (255 * 256);
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Approximately standard normal: Irwin–Hall sum of twelve uniforms.
fn irwin_hall(rng: &mut impl Rng) -> f64 {
    (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0
}

impl Transform {
    pub fn apply(&self, img: &mut [u8], h: usize, w: usize, rng: &mut impl Rng) {
        let plane = h * w;
        match *self {
            Transform::HueRotate(deg) => {
                let shift = deg.rem_euclid(360) * HUE_RANGE / 360;
                if shift == 0 {
                    return;
                }
                for p in 0..plane {
                    let (hh, s, v) = rgb_to_hsv(img[p] as i32, img[plane + p] as i32, img[2 * plane + p] as i32);
                    let (r, g, b) = hsv_to_rgb((hh + shift) % HUE_RANGE, s, v);
                    img[p] = r as u8;
                    img[plane + p] = g as u8;
                    img[2 * plane + p] = b as u8;
                }
            }
            Transform::TextureOverlay(kind, alpha) => {
                let a = (alpha.clamp(0.0, 1.0) * 256.0).round() as u32;
                for y in 0..h {
                    for x in 0..w {
                        let t: u32 = match kind {
                            Texture::Stripes => if (x + y) % 6 < 3 { 255 } else { 0 },
                            Texture::Grid => if x % 5 == 0 || y % 5 == 0 { 255 } else { 0 },
                            Texture::Noise => rng.gen_range(0..=255),
                        };
                        let p = y * w + x;
                        for c in 0..img.len() / plane {
                            let v = &mut img[c * plane + p];
                            *v = (((256 - a) * *v as u32 + a * t + 128) >> 8) as u8;
                        }
                    }
                }
            }
            Transform::InvertNoise(sigma) => {
                for v in img.iter_mut() {
                    let n = (sigma * irwin_hall(rng)).round() as i32;
                    *v = (255 - *v as i32 + n).clamp(0, 255) as u8;
                }
            }
            Transform::Binarize(threshold) => {
                for p in 0..plane {
                    let l = (77 * img[p] as u32 + 150 * img[plane + p] as u32 + 29 * img[2 * plane + p] as u32) >> 8;
                    let out = if l >= threshold as u32 { 255 } else { 0 };
                    for c in 0..3 {
                        img[c * plane + p] = out;
                    }
                }
            }
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::HueRotate(d) => write!(f, "hue_rotate({d})"),
            Transform::TextureOverlay(k, a) => write!(f, "texture_overlay({}, {a})", format!("{k:?}").to_lowercase()),
            Transform::InvertNoise(s) => write!(f, "invert_noise({s})"),
            Transform::Binarize(t) => write!(f, "grayscale_binarize({t})"),
        }
    }
}

impl FromStr for Transform {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::Spec(format!("cannot parse transform `{s}`"));
        let s = s.trim();
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let args: Vec<&str> = rest.strip_suffix(')').ok_or_else(bad)?.split(',').map(str::trim).collect();
        let num = |i: usize| -> Result<f64, DataError> { args.get(i).and_then(|a| a.parse().ok()).ok_or_else(bad) };
        Ok(match (name.trim(), args.len()) {
            ("hue_rotate", 1) => Transform::HueRotate(args[0].parse().map_err(|_| bad())?),
            ("texture_overlay", 2) => {
                let kind = match args[0] {
                    "stripes" => Texture::Stripes,
                    "grid" => Texture::Grid,
                    "noise" => Texture::Noise,
                    _ => return Err(bad()),
                };
                let a = num(1)?;
                if !(0.0..=1.0).contains(&a) {
                    return Err(bad());
                }
                Transform::TextureOverlay(kind, a)
            }
            ("invert_noise", 1) => Transform::InvertNoise(num(0)?.max(0.0)),
            ("grayscale_binarize", 1) => Transform::Binarize(args[0].parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        })
    }
}

/// Parses a whitespace-separated chain such as
/// `hue_rotate(60) texture_overlay(stripes, 0.45)`; `identity` is empty.
pub fn parse_chain(s: &str) -> Result<Vec<Transform>, DataError> {
    let s = s.trim();
    if s.is_empty() || s == "identity" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut rest = s;
    while !rest.is_empty() {
        let end = rest.find(')').ok_or_else(|| DataError::Spec(format!("unterminated transform in `{s}`")))?;
        out.push(rest[..=end].parse()?);
        rest = rest[end + 1..].trim_start();
    }
    Ok(out)
}

pub fn format_chain(chain: &[Transform]) -> String {
    if chain.is_empty() {
        return "identity".into();
    }
    chain.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}
