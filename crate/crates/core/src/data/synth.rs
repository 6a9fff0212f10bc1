//! Procedural scenes: textured shapes of distinct classes over a background.
//!
//! Shape geometry is evaluated at the centers of `cell×cell` blocks, so
//! region boundaries fall on a lattice of that pitch (`cell = 1` gives
//! pixel-accurate shapes). Class `c ≥ 1` always draws the same shape kind,
//! cycling rectangle, disc, stripe, diamond.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{LabelMap, RgbImage};
use crate::error::{config_err, Result};

pub const BACKGROUND: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Disc,
    Stripe,
    Diamond,
}

impl ShapeKind {
    pub fn for_class(class: u8) -> Self {
        match (class.max(1) - 1) % 4 {
            0 => Self::Rect,
            1 => Self::Disc,
            2 => Self::Stripe,
            _ => Self::Diamond,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Class count including the background.
    pub classes: usize,
    /// Lattice pitch of shape boundaries, in pixels.
    pub cell: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Half-width of the per-scene color jitter.
    pub color_jitter: f32,
    /// Half-width of the per-pixel texture noise.
    pub texture_noise: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            classes: 5,
            cell: 8,
            min_shapes: 2,
            max_shapes: 4,
            color_jitter: 0.08,
            texture_noise: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 250 {
            return config_err(format!(
                "scene classes must be in 2..=250, got {}",
                self.classes
            ));
        }
        if self.cell == 0 || self.height < 2 * self.cell || self.width < 2 * self.cell {
            return config_err(format!(
                "canvas {}x{} too small for cell {}",
                self.height, self.width, self.cell
            ));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return config_err("shape count range must satisfy 1 <= min <= max");
        }
        Ok(())
    }
}

/// Base color of a class before per-scene jitter.
pub fn base_color(class: u8) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 5] = [
        [0.45, 0.50, 0.45],
        [0.80, 0.25, 0.20],
        [0.20, 0.35, 0.80],
        [0.85, 0.80, 0.25],
        [0.25, 0.70, 0.30],
    ];
    if let Some(c) = PALETTE.get(class as usize) {
        return *c;
    }
    let h = (class as u32).wrapping_mul(2_654_435_761);
    [
        0.15 + 0.7 * ((h & 0xff) as f32 / 255.0),
        0.15 + 0.7 * (((h >> 8) & 0xff) as f32 / 255.0),
        0.15 + 0.7 * (((h >> 16) & 0xff) as f32 / 255.0),
    ]
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    class: u8,
    kind: ShapeKind,
    /// Geometry in cell units.
    cy: f32,
    cx: f32,
    a: f32,
    b: f32,
    vertical: bool,
}

impl Shape {
    fn contains(&self, y: f32, x: f32) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match self.kind {
            ShapeKind::Rect => dy.abs() <= self.a && dx.abs() <= self.b,
            ShapeKind::Disc => dy * dy + dx * dx <= self.a * self.a,
            ShapeKind::Diamond => dy.abs() + dx.abs() <= self.a,
            ShapeKind::Stripe if self.vertical => dx.abs() <= self.a,
            ShapeKind::Stripe => dy.abs() <= self.a,
        }
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, class: u8, gh: usize, gw: usize) -> Shape {
    let kind = ShapeKind::for_class(class);
    let cy = rng.gen_range(0.0..gh as f32);
    let cx = rng.gen_range(0.0..gw as f32);
    let short = gh.min(gw) as f32;
    let (a, b) = match kind {
        ShapeKind::Rect => (
            rng.gen_range(0.12..0.35) * gh as f32,
            rng.gen_range(0.08..0.25) * gw as f32,
        ),
        ShapeKind::Disc => (rng.gen_range(0.2..0.4) * short, 0.0),
        ShapeKind::Diamond => (rng.gen_range(0.25..0.5) * short, 0.0),
        ShapeKind::Stripe => (rng.gen_range(0.05..0.12) * short, 0.0),
    };
    Shape {
        class,
        kind,
        cy,
        cx,
        a: a.max(0.5),
        b: b.max(0.5),
        vertical: rng.gen_bool(0.5),
    }
}

/// Deterministic `(image, labels)` pair for `seed`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<(RgbImage, LabelMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gh, gw) = (
        spec.height.div_ceil(spec.cell),
        spec.width.div_ceil(spec.cell),
    );
    let mut cells = vec![BACKGROUND; gh * gw];
    loop {
        cells.fill(BACKGROUND);
        let n = rng.gen_range(spec.min_shapes..=spec.max_shapes);
        for _ in 0..n {
            let class = rng.gen_range(1..spec.classes) as u8;
            let shape = sample_shape(&mut rng, class, gh, gw);
            for y in 0..gh {
                for x in 0..gw {
                    if shape.contains(y as f32 + 0.5, x as f32 + 0.5) {
                        cells[y * gw + x] = shape.class;
                    }
                }
            }
        }
        let first = cells[0];
        if cells.iter().any(|&c| c != first) {
            break;
        }
    }

    let colors: Vec<[f32; 3]> = (0..spec.classes)
        .map(|c| {
            let base = base_color(c as u8);
            let j = spec.color_jitter;
            base.map(|v| v + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 })
        })
        .collect();

    let mut labels = LabelMap::filled(spec.height, spec.width, BACKGROUND);
    let mut image = RgbImage::filled(spec.height, spec.width, [0.0; 3]);
    let t = spec.texture_noise;
    for y in 0..spec.height {
        for x in 0..spec.width {
            let class = cells[(y / spec.cell) * gw + x / spec.cell];
            labels.set(y, x, class);
            let c = colors[class as usize];
            let rgb = c.map(|v| v + if t > 0.0 { rng.gen_range(-t..=t) } else { 0.0 });
            image.set_pixel(y, x, rgb);
        }
    }
    Ok((image.quantized(), labels))
}
