use crate::error::{HgError, Result};

/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(HgError::Data(format!(
                "{}x{} RGB image needs {} values, got {}",
                height,
                width,
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Values quantized to 8 bits, as stored on disk.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    /// Rounds every channel to the nearest representable 8-bit value.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| f32::from(quantize(v)) / 255.0)
            .collect();
        Self { data, ..*self }
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(HgError::Data(format!(
                "{height}x{width} label map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Majority vote over `stride × stride` blocks (ignored pixels abstain,
    /// ties go to the lowest id). Blocks at the border may be partial; an
    /// all-ignored block stays ignored.
    pub fn downsample(&self, stride: usize) -> LabelMap {
        let oh = self.height.div_ceil(stride);
        let ow = self.width.div_ceil(stride);
        let mut out = LabelMap::filled(oh, ow, IGNORE_LABEL);
        let mut counts = [0u32; 256];
        for by in 0..oh {
            for bx in 0..ow {
                counts.iter_mut().for_each(|c| *c = 0);
                for y in by * stride..((by + 1) * stride).min(self.height) {
                    for x in bx * stride..((bx + 1) * stride).min(self.width) {
                        let l = self.get(y, x);
                        if l != IGNORE_LABEL {
                            counts[l as usize] += 1;
                        }
                    }
                }
                let mut best = IGNORE_LABEL;
                let mut best_n = 0;
                for (l, &n) in counts.iter().enumerate() {
                    if n > best_n {
                        best_n = n;
                        best = l as u8;
                    }
                }
                out.set(by, bx, best);
            }
        }
        out
    }

    /// Nearest-neighbour upsampling by an integer factor, cropped to
    /// `height × width`.
    pub fn upsample_to(&self, factor: usize, height: usize, width: usize) -> LabelMap {
        let mut out = LabelMap::filled(height, width, IGNORE_LABEL);
        for y in 0..height {
            for x in 0..width {
                let sy = (y / factor).min(self.height - 1);
                let sx = (x / factor).min(self.width - 1);
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }
}
