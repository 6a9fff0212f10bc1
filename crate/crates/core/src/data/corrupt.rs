//! Severity-laddered image corruptions. Every corruption is a pure function
//! of `(image, kind, severity, seed)`; severity 0 is the identity and results
//! are clamped to `[0, 1]` and rounded to 8 bits.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use crate::error::{HgError, Result};

pub const MAX_SEVERITY: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    Brightness,
    Contrast,
    FogTint,
    JpegLikeBlock,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 9] = [
        Self::GaussianNoise,
        Self::ShotNoise,
        Self::ImpulseNoise,
        Self::DefocusBlur,
        Self::MotionBlur,
        Self::Brightness,
        Self::Contrast,
        Self::FogTint,
        Self::JpegLikeBlock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::ShotNoise => "shot_noise",
            Self::ImpulseNoise => "impulse_noise",
            Self::DefocusBlur => "defocus_blur",
            Self::MotionBlur => "motion_blur",
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::FogTint => "fog_tint",
            Self::JpegLikeBlock => "jpeg_like_block",
        }
    }

    pub fn is_noise(self) -> bool {
        matches!(
            self,
            Self::GaussianNoise | Self::ShotNoise | Self::ImpulseNoise
        )
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = HgError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| HgError::Config(format!("unknown corruption kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > MAX_SEVERITY {
            return Err(HgError::Config(format!(
                "severity {severity} outside 0..=5"
            )));
        }
        Ok(Self { kind, severity })
    }

    /// All kinds at severities 1..=5.
    pub fn grid() -> Vec<Self> {
        CorruptionKind::ALL
            .into_iter()
            .flat_map(|kind| (1..=MAX_SEVERITY).map(move |severity| Self { kind, severity }))
            .collect()
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.severity)
    }
}

impl FromStr for CorruptionSpec {
    type Err = HgError;

    /// Parses `kind:severity`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, sev) = s
            .split_once(':')
            .ok_or_else(|| HgError::Config(format!("expected kind:severity, got '{s}'")))?;
        let severity = sev
            .parse::<u8>()
            .map_err(|_| HgError::Config(format!("bad severity '{sev}'")))?;
        Self::new(kind.parse()?, severity)
    }
}

const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
/// Photon counts at full intensity; lower means noisier.
const SHOT_PHOTONS: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const IMPULSE_PROB: [f64; 5] = [0.03, 0.06, 0.09, 0.17, 0.27];
const DEFOCUS_RADIUS: [f64; 5] = [1.0, 1.5, 2.5, 3.5, 5.0];
const MOTION_LENGTH: [usize; 5] = [3, 5, 9, 13, 17];
const BRIGHTNESS_SHIFT: [f32; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
const CONTRAST_FACTOR: [f32; 5] = [0.6, 0.45, 0.3, 0.2, 0.1];
const FOG_ALPHA: [f32; 5] = [0.2, 0.35, 0.5, 0.65, 0.8];
const BLOCK_KEEP: [f32; 5] = [0.7, 0.5, 0.3, 0.15, 0.0];
const BLOCK_LEVELS: [f32; 5] = [32.0, 16.0, 10.0, 6.0, 4.0];
const BLOCK: usize = 8;

fn rng_for(seed: u64, spec: CorruptionSpec) -> ChaCha8Rng {
    let tag = (spec.kind as u64 + 1) * 16 + u64::from(spec.severity);
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn corrupt(image: &RgbImage, spec: CorruptionSpec, seed: u64) -> RgbImage {
    if spec.severity == 0 {
        return image.clone();
    }
    let i = usize::from(spec.severity.min(MAX_SEVERITY)) - 1;
    let mut rng = rng_for(seed, spec);
    let mut out = image.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0, GAUSSIAN_SIGMA[i]).expect("positive sigma");
            for v in &mut out.data {
                *v += n.sample(&mut rng) as f32;
            }
        }
        CorruptionKind::ShotNoise => {
            let lam = SHOT_PHOTONS[i];
            for v in &mut out.data {
                let mean = (f64::from(*v) * lam).max(1e-9);
                let k: f64 = Poisson::new(mean).expect("positive mean").sample(&mut rng);
                *v = (k / lam) as f32;
            }
        }
        CorruptionKind::ImpulseNoise => {
            let p = IMPULSE_PROB[i];
            for v in &mut out.data {
                if rng.gen_bool(p) {
                    *v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::DefocusBlur => {
            let r = DEFOCUS_RADIUS[i];
            let ri = r.ceil() as isize;
            let taps: Vec<(isize, isize)> = (-ri..=ri)
                .flat_map(|dy| (-ri..=ri).map(move |dx| (dy, dx)))
                .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= r * r)
                .collect();
            out = convolve(image, &taps);
        }
        CorruptionKind::MotionBlur => {
            let len = MOTION_LENGTH[i];
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let mut taps: Vec<(isize, isize)> = (0..len)
                .map(|t| {
                    let t = t as f64;
                    (
                        (t * angle.sin()).round() as isize,
                        (t * angle.cos()).round() as isize,
                    )
                })
                .collect();
            taps.dedup();
            out = convolve(image, &taps);
        }
        CorruptionKind::Brightness => {
            for v in &mut out.data {
                *v += BRIGHTNESS_SHIFT[i];
            }
        }
        CorruptionKind::Contrast => {
            let mean = image.data.iter().sum::<f32>() / image.data.len().max(1) as f32;
            for v in &mut out.data {
                *v = (*v - mean) * CONTRAST_FACTOR[i] + mean;
            }
        }
        CorruptionKind::FogTint => {
            let a = FOG_ALPHA[i];
            let fog = fog_field(image.height, image.width, &mut rng);
            for (p, px) in out.data.chunks_mut(3).enumerate() {
                let tint = [0.80, 0.82, 0.88].map(|t: f32| t + fog[p]);
                for (c, v) in px.iter_mut().enumerate() {
                    *v = (1.0 - a) * *v + a * tint[c];
                }
            }
        }
        CorruptionKind::JpegLikeBlock => {
            let (keep, levels) = (BLOCK_KEEP[i], BLOCK_LEVELS[i]);
            let (h, w) = (image.height, image.width);
            for by in (0..h).step_by(BLOCK) {
                for bx in (0..w).step_by(BLOCK) {
                    let (ey, ex) = ((by + BLOCK).min(h), (bx + BLOCK).min(w));
                    let n = ((ey - by) * (ex - bx)) as f32;
                    let mut mean = [0.0f32; 3];
                    for y in by..ey {
                        for x in bx..ex {
                            let p = image.pixel(y, x);
                            for c in 0..3 {
                                mean[c] += p[c] / n;
                            }
                        }
                    }
                    for y in by..ey {
                        for x in bx..ex {
                            let p = image.pixel(y, x);
                            let q = std::array::from_fn(|c| {
                                let v = mean[c] + (p[c] - mean[c]) * keep;
                                (v * levels).round() / levels
                            });
                            out.set_pixel(y, x, q);
                        }
                    }
                }
            }
        }
    }
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    out.quantized()
}

/// Box average over `taps` offsets with edge clamping.
fn convolve(image: &RgbImage, taps: &[(isize, isize)]) -> RgbImage {
    let (h, w) = (image.height as isize, image.width as isize);
    let mut out = image.clone();
    let n = taps.len() as f32;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for &(dy, dx) in taps {
                let p = image.pixel(
                    (y + dy).clamp(0, h - 1) as usize,
                    (x + dx).clamp(0, w - 1) as usize,
                );
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
            out.set_pixel(y as usize, x as usize, acc.map(|a| a / n));
        }
    }
    out
}

/// Smooth zero-mean brightness variation: bilinear interpolation of a coarse
/// random grid.
fn fog_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    const STEP: usize = 16;
    let (gh, gw) = (h / STEP + 2, w / STEP + 2);
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.gen_range(-0.08..0.08)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f32 / STEP as f32, x as f32 / STEP as f32);
            let (y0, x0) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Peak signal-to-noise ratio in dB for unit-range images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| f64::from(x - y).powi(2))
        .sum::<f64>()
        / a.data.len().max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray() -> RgbImage {
        RgbImage::filled(64, 128, [0.5; 3]).quantized()
    }

    #[test]
    fn severity_zero_is_identity() {
        let img = gray();
        for kind in CorruptionKind::ALL {
            assert_eq!(corrupt(&img, CorruptionSpec::new(kind, 0).unwrap(), 1), img);
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let img = gray();
        for spec in CorruptionSpec::grid() {
            let a = corrupt(&img, spec, 9);
            assert_eq!(a, corrupt(&img, spec, 9));
            assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn parse_and_display() {
        let s: CorruptionSpec = "motion_blur:3".parse().unwrap();
        assert_eq!(
            s,
            CorruptionSpec::new(CorruptionKind::MotionBlur, 3).unwrap()
        );
        assert_eq!(s.to_string(), "motion_blur:3");
        assert!("motion_blur:6".parse::<CorruptionSpec>().is_err());
        assert!("rain:1".parse::<CorruptionSpec>().is_err());
        assert_eq!(CorruptionSpec::grid().len(), 45);
    }

    #[test]
    fn gaussian_severity_five_psnr_on_mid_gray() {
        let p = psnr(
            &gray(),
            &corrupt(
                &gray(),
                CorruptionSpec::new(CorruptionKind::GaussianNoise, 5).unwrap(),
                0,
            ),
        );
        assert!((p - 12.0).abs() < 1.0, "PSNR {p}");
    }
}
