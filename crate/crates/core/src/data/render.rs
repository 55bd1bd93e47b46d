//! Procedural shape rendering in integer arithmetic.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeFamily {
    Circle,
    Square,
    Diamond,
    Triangle,
    Cross,
    Ring,
    Ellipse,
    Saltire,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stroke {
    Solid,
    Outline,
    HStripes,
    VStripes,
    Checker,
    Dots,
}

pub const FAMILIES: [ShapeFamily; 8] = [
    ShapeFamily::Circle,
    ShapeFamily::Square,
    ShapeFamily::Diamond,
    ShapeFamily::Triangle,
    ShapeFamily::Cross,
    ShapeFamily::Ring,
    ShapeFamily::Ellipse,
    ShapeFamily::Saltire,
];

pub const STROKES: [Stroke; 6] =
    [Stroke::Solid, Stroke::Outline, Stroke::HStripes, Stroke::VStripes, Stroke::Checker, Stroke::Dots];

/// Number of distinct (family, stroke) classes.
pub const COMPOSITES: usize = FAMILIES.len() * STROKES.len();

/// A class is one shape family drawn with one stroke pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Composite {
    pub family: ShapeFamily,
    pub stroke: Stroke,
}

impl Composite {
    pub fn from_id(id: usize) -> Option<Self> {
        (id < COMPOSITES).then(|| Composite { family: FAMILIES[id / STROKES.len()], stroke: STROKES[id % STROKES.len()] })
    }

    pub fn id(&self) -> usize {
        let f = FAMILIES.iter().position(|&f| f == self.family).unwrap();
        let s = STROKES.iter().position(|&s| s == self.stroke).unwrap();
        f * STROKES.len() + s
    }

    pub fn name(&self) -> String {
        format!("{:?}/{:?}", self.family, self.stroke).to_lowercase()
    }
}

/// Size and placement jitter, in percent of the image side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub min_radius_pct: u32,
    pub max_radius_pct: u32,
    pub jitter_pct: u32,
}

impl Default for Geometry {
    fn default() -> Self {
        Self { min_radius_pct: 28, max_radius_pct: 42, jitter_pct: 12 }
    }
}

/// Whether offset `(dx, dy)` from the centre lies inside `family` of radius `r`.
fn inside(family: ShapeFamily, dx: i32, dy: i32, r: i32) -> bool {
    if r <= 0 {
        return false;
    }
    let (ax, ay) = (dx.abs(), dy.abs());
    match family {
        ShapeFamily::Circle => dx * dx + dy * dy <= r * r,
        ShapeFamily::Square => 5 * ax.max(ay) <= 4 * r,
        ShapeFamily::Diamond => ax + ay <= r,
        // apex up, base at dy = r
        ShapeFamily::Triangle => dy <= r && dy >= -r && 2 * ax <= dy + r,
        ShapeFamily::Cross => (3 * ax <= r && ay <= r) || (3 * ay <= r && ax <= r),
        ShapeFamily::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && 4 * d2 >= r * r
        }
        ShapeFamily::Ellipse => dx * dx + 4 * dy * dy <= r * r,
        ShapeFamily::Saltire => 4 * (ax - ay).abs() <= r && ax.max(ay) <= r,
    }
}

fn stroke_on(stroke: Stroke, family: ShapeFamily, x: i32, y: i32, dx: i32, dy: i32, r: i32) -> bool {
    match stroke {
        Stroke::Solid => true,
        Stroke::Outline => !inside(family, dx, dy, r - 3),
        Stroke::HStripes => (y / 2) % 2 == 0,
        Stroke::VStripes => (x / 2) % 2 == 0,
        Stroke::Checker => ((x / 3) + (y / 3)) % 2 == 0,
        Stroke::Dots => x % 3 == 0 && y % 3 == 0,
    }
}

fn random_color(rng: &mut impl Rng) -> [u8; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn luma(c: [u8; 3]) -> i32 {
    (77 * c[0] as i32 + 150 * c[1] as i32 + 29 * c[2] as i32) >> 8
}

/// Renders one `3×size×size` image of `class`. Colours are random per image
/// (with a minimum brightness gap between shape and background), so only
/// shape and stroke identify the class.
pub fn render(class: Composite, geometry: &Geometry, size: usize, rng: &mut impl Rng) -> Vec<u8> {
    let s = size as i32;
    let lo = (s * geometry.min_radius_pct as i32 / 100).max(2);
    let hi = (s * geometry.max_radius_pct as i32 / 100).max(lo);
    let r = rng.gen_range(lo..=hi);
    let j = s * geometry.jitter_pct as i32 / 100;
    let cx = s / 2 + rng.gen_range(-j..=j);
    let cy = s / 2 + rng.gen_range(-j..=j);
    let bg = random_color(rng);
    let fg = loop {
        let c = random_color(rng);
        if (luma(c) - luma(bg)).abs() >= 80 {
            break c;
        }
    };
    // the stroke's "off" pixels inside the shape sit halfway between colours
    let mid = [0, 1, 2].map(|i| ((fg[i] as u16 + bg[i] as u16) / 2) as u8);

    let plane = size * size;
    let mut img = vec![0u8; 3 * plane];
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x - cx, y - cy);
            let c = if !inside(class.family, dx, dy, r) {
                bg
            } else if stroke_on(class.stroke, class.family, x, y, dx, dy, r) {
                fg
            } else {
                mid
            };
            let p = (y * s + x) as usize;
            for ch in 0..3 {
                // ±6 grain keeps flat regions from being exactly constant
                let g = rng.gen_range(-6i32..=6);
                img[ch * plane + p] = (c[ch] as i32 + g).clamp(0, 255) as u8;
            }
        }
    }
    img
}
