//! Toy convolution-style backbone and the fusion that produces the decoder's
//! three feature maps.
//!
//! Each stage merges `f×f` patches (f = 4 for the stem, 2 afterwards), then
//! applies a residual 3×3 depthwise mixing and a residual pointwise MLP. All
//! operations are local and position-independent, so features are
//! translation-equivariant away from the border.

use hg_tensor::{Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::RgbImage;
use crate::error::{config_err, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{ParamId, ParamStore, Session};

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Four feature maps at strides 4, 8, 16, 32, each stored `(h·w)×c`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
    pub dims: [(usize, usize); 4],
    pub channels: [usize; 4],
    /// Input size before padding to a multiple of 32.
    pub input_hw: (usize, usize),
    pub padded_hw: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct DecoderFeatures {
    /// Mask-projection features at stride 4.
    pub k0: Var,
    /// Grouping features at stride 8.
    pub k: Var,
    /// Classification features at stride 8.
    pub v: Var,
    pub k0_hw: (usize, usize),
    pub k_hw: (usize, usize),
    pub input_hw: (usize, usize),
    pub padded_hw: (usize, usize),
}

#[derive(Clone, Debug)]
struct Stage {
    factor: usize,
    c_in: usize,
    c_out: usize,
    merge: Linear,
    norm1: LayerNorm,
    dw_w: ParamId,
    dw_b: ParamId,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Stage {
    fn new(
        store: &mut ParamStore,
        name: &str,
        factor: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            factor,
            c_in,
            c_out,
            merge: Linear::new(
                store,
                &format!("{name}.merge"),
                factor * factor * c_in,
                c_out,
                rng,
            ),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c_out),
            dw_w: store.add_uniform(format!("{name}.dw.w"), &[9, c_out], 1.0 / 3.0, rng),
            dw_b: store.add(format!("{name}.dw.b"), Tensor::zeros([c_out])),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c_out),
            mlp: Mlp::new(store, &format!("{name}.mlp"), c_out, 2 * c_out, c_out, rng),
        }
    }

    fn forward(&self, s: &mut Session, x: Var, h: usize, w: usize) -> Result<(Var, usize, usize)> {
        let merged = patch_merge(s, x, h, w, self.c_in, self.factor)?;
        let (oh, ow) = (h / self.factor, w / self.factor);
        let y = self.merge.forward(s, merged)?;
        let y = self.norm1.forward(s, y)?;
        let mixed = depthwise3x3(s, y, oh, ow, self.c_out, self.dw_w, self.dw_b)?;
        let y = s.g.add(y, mixed)?;
        let n = self.norm2.forward(s, y)?;
        let m = self.mlp.forward(s, n)?;
        let y = s.g.add(y, m)?;
        Ok((y, oh, ow))
    }
}

/// `(h·w)×c` → `(h/f · w/f)×(f·f·c)`, concatenating each patch row-major.
pub fn patch_merge(s: &mut Session, x: Var, h: usize, w: usize, c: usize, f: usize) -> Result<Var> {
    let (oh, ow) = (h / f, w / f);
    let mut idx = Vec::with_capacity(oh * ow * f * f * c);
    for i in 0..oh {
        for j in 0..ow {
            for a in 0..f {
                for b in 0..f {
                    let base = ((i * f + a) * w + (j * f + b)) * c;
                    idx.extend((0..c).map(|ch| (base + ch) as isize));
                }
            }
        }
    }
    Ok(s.g.gather(x, idx, [oh * ow, f * f * c])?)
}

/// Per-channel 3×3 convolution with zero padding.
pub fn depthwise3x3(
    s: &mut Session,
    x: Var,
    h: usize,
    w: usize,
    c: usize,
    weight: ParamId,
    bias: ParamId,
) -> Result<Var> {
    let mut idx = Vec::with_capacity(h * w * 9 * c);
    for i in 0..h as isize {
        for j in 0..w as isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (y, xx) = (i + dy, j + dx);
                    if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                        idx.extend(std::iter::repeat_n(-1, c));
                    } else {
                        let base = (y as usize * w + xx as usize) * c;
                        idx.extend((0..c).map(|ch| (base + ch) as isize));
                    }
                }
            }
        }
    }
    let nb = s.g.gather(x, idx, [h * w, 9, c])?;
    let wv = s.p(weight);
    let weighted = s.g.mul(nb, wv)?;
    let summed = s.g.sum(weighted, 1)?;
    let b = s.p(bias);
    Ok(s.g.add(summed, b)?)
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stages: Vec<Stage>,
    channels: [usize; 4],
    k0_proj: Linear,
    k_proj: Linear,
    v_proj: [Linear; 3],
    v_norm: LayerNorm,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let ch = cfg.backbone_channels;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = 3;
        for (i, &c) in ch.iter().enumerate() {
            let f = if i == 0 { 4 } else { 2 };
            stages.push(Stage::new(
                store,
                &format!("backbone.stage{i}"),
                f,
                c_in,
                c,
                rng,
            ));
            c_in = c;
        }
        let d = cfg.d;
        Self {
            stages,
            channels: ch,
            k0_proj: Linear::new(store, "fuse.k0", ch[0], d, rng),
            k_proj: Linear::new(store, "fuse.k", ch[1], d, rng),
            v_proj: [
                Linear::new(store, "fuse.v8", ch[1], d, rng),
                Linear::new(store, "fuse.v16", ch[2], d, rng),
                Linear::new(store, "fuse.v32", ch[3], d, rng),
            ],
            v_norm: LayerNorm::new(store, "fuse.v_norm", d),
        }
    }

    /// Builds the stride-4..32 pyramid. Inputs whose sides are not multiples
    /// of 32 are zero-padded at the bottom/right; the padding is recorded so
    /// outputs can be cropped.
    pub fn extract_features(&self, s: &mut Session, image: &RgbImage) -> Result<FeaturePyramid> {
        let (h, w) = (image.height, image.width);
        if h == 0 || w == 0 {
            return config_err("empty image");
        }
        let ph = h.div_ceil(32) * 32;
        let pw = w.div_ceil(32) * 32;
        let mut data = vec![0.0; ph * pw * 3];
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * 3;
                let dst = (y * pw + x) * 3;
                for c in 0..3 {
                    data[dst + c] = f64::from(image.data[src + c]) - 0.5;
                }
            }
        }
        let mut x = s.g.constant(Tensor::new([ph * pw, 3], data)?);
        let (mut ch, mut cw) = (ph, pw);
        let mut levels = Vec::with_capacity(4);
        let mut dims = [(0, 0); 4];
        for (i, st) in self.stages.iter().enumerate() {
            let (y, oh, ow) = st.forward(s, x, ch, cw)?;
            levels.push(y);
            dims[i] = (oh, ow);
            x = y;
            ch = oh;
            cw = ow;
        }
        Ok(FeaturePyramid {
            levels: [levels[0], levels[1], levels[2], levels[3]],
            dims,
            channels: self.channels,
            input_hw: (h, w),
            padded_hw: (ph, pw),
        })
    }

    /// K0 and K are linear projections of the stride-4 and stride-8 maps; V
    /// sums projections of strides 8/16/32 after nearest upsampling to
    /// stride 8 and layer-normalizes the sum.
    pub fn fuse(&self, s: &mut Session, pyr: &FeaturePyramid) -> Result<DecoderFeatures> {
        for (i, &lv) in pyr.levels.iter().enumerate() {
            let c = s.g.shape(lv)[1];
            if c != self.channels[i] {
                return config_err(format!(
                    "pyramid level {i} has {c} channels, expected {}",
                    self.channels[i]
                ));
            }
        }
        let k0 = self.k0_proj.forward(s, pyr.levels[0])?;
        let k = self.k_proj.forward(s, pyr.levels[1])?;
        let mut v = self.v_proj[0].forward(s, pyr.levels[1])?;
        for (lvl, factor) in [(2usize, 2usize), (3, 4)] {
            let p = self.v_proj[lvl - 1].forward(s, pyr.levels[lvl])?;
            let (h, w) = pyr.dims[lvl];
            let up = s.g.upsample_nearest(p, h, w, factor)?;
            v = s.g.add(v, up)?;
        }
        let v = self.v_norm.forward(s, v)?;
        Ok(DecoderFeatures {
            k0,
            k,
            v,
            k0_hw: pyr.dims[0],
            k_hw: pyr.dims[1],
            input_hw: pyr.input_hw,
            padded_hw: pyr.padded_hw,
        })
    }

    pub fn forward(&self, s: &mut Session, image: &RgbImage) -> Result<DecoderFeatures> {
        let pyr = self.extract_features(s, image)?;
        self.fuse(s, &pyr)
    }
}
