use serde::{Deserialize, Serialize};

use super::DomainStyle;
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
    Stripes,
    Diamond,
    Ring,
}

impl ShapeKind {
    /// Class `i` draws `ALL[i]`.
    pub const ALL: [ShapeKind; 7] = [
        ShapeKind::Square,
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Stripes,
        ShapeKind::Diamond,
        ShapeKind::Ring,
    ];

    /// Membership test in the shape's unit frame (extent roughly [-1, 1]²).
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Triangle => {
                // Apex (0, -1), base corners (±0.95, 0.8).
                v <= 0.8 && u.abs() <= 0.95 * (v + 1.0) / 1.8
            }
            ShapeKind::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            ShapeKind::Stripes => u.abs() <= 1.0 && (v.abs() <= 0.2 || (v.abs() - 0.7).abs() <= 0.2),
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Texture {
    Flat,
    Gradient,
    Stripes,
    Checker,
    Noise,
}

/// Where and how large one shape is drawn.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Placement {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
}

impl Placement {
    pub(crate) fn sample(rng: &mut Rng, kind: ShapeKind, size: usize) -> Placement {
        let s = size as f64;
        Placement {
            kind,
            cx: s / 2.0 + rng.uniform_range(-0.08, 0.08) * s,
            cy: s / 2.0 + rng.uniform_range(-0.08, 0.08) * s,
            radius: rng.uniform_range(0.28, 0.36) * s,
            angle: rng.uniform_range(-0.26, 0.26),
        }
    }

    pub(crate) fn mask(&self, size: usize) -> Vec<bool> {
        let (sin, cos) = self.angle.sin_cos();
        let mut mask = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f64 + 0.5 - self.cx) / self.radius;
                let dy = (y as f64 + 0.5 - self.cy) / self.radius;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                mask.push(self.kind.contains(u, v));
            }
        }
        mask
    }
}

const PALETTE: [[u8; 3]; 7] = [
    [220, 40, 40],
    [40, 170, 60],
    [40, 80, 220],
    [230, 200, 30],
    [200, 50, 200],
    [30, 190, 200],
    [240, 120, 20],
];

/// Foreground colour: with probability `strength` the domain's colour for
/// this class, `(class + domain) mod n_classes`, else a uniform palette pick.
pub(crate) fn shape_colour(rng: &mut Rng, class: usize, domain: usize, n_classes: usize, strength: f64) -> [u8; 3] {
    let idx = if rng.bernoulli(strength) {
        (class + domain) % n_classes
    } else {
        rng.below(n_classes)
    };
    PALETTE[idx]
}

pub(crate) fn paint(rng: &mut Rng, style: &DomainStyle, mask: &[bool], fg: [u8; 3], size: usize) -> Vec<u8> {
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(-12.0, 12.0));
    let phase = rng.below(8);
    let plane = size * size;
    let mut img = vec![0u8; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let t = match style.texture {
                Texture::Flat => 1.0,
                Texture::Gradient => 0.7 + 0.3 * (x + y) as f64 / (2 * size) as f64,
                Texture::Stripes => {
                    if ((x + y + phase) / 3).is_multiple_of(2) { 1.0 } else { 0.72 }
                }
                Texture::Checker => {
                    if ((x + phase) / 4 + (y + phase) / 4).is_multiple_of(2) { 1.0 } else { 0.8 }
                }
                Texture::Noise => 0.8 + 0.2 * rng.uniform(),
            };
            let p = y * size + x;
            for ch in 0..3 {
                let bg = (style.background[ch] as f64 + jitter[ch]) * t;
                let mut v = if mask[p] {
                    bg + style.contrast * (fg[ch] as f64 - bg)
                } else {
                    bg
                };
                if style.noise > 0.0 {
                    v += rng.uniform_range(-style.noise, style.noise) * 255.0;
                }
                img[ch * plane + p] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}
