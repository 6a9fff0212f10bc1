//! Debug renderings: hardened part partition, tiled whole-level mask
//! heatmaps, and the final label map.

use std::path::{Path, PathBuf};

use crate::data::netpbm::{write_pgm, write_ppm};
use crate::data::synth::base_color;
use crate::data::{LabelMap, RgbImage};
use crate::error::Result;
use crate::inference::{Mode, ScoreFields};
use crate::model::Model;
use crate::params::{ParamStore, Session};
use crate::part::harden;

/// Distinct-ish color per part id.
fn part_color(id: usize) -> [f32; 3] {
    let h = (id as u32).wrapping_add(1).wrapping_mul(2_654_435_761);
    [
        (h & 0xff) as f32 / 255.0,
        ((h >> 8) & 0xff) as f32 / 255.0,
        ((h >> 16) & 0xff) as f32 / 255.0,
    ]
}

pub fn colorize_labels(labels: &LabelMap) -> RgbImage {
    let mut img = RgbImage::filled(labels.height, labels.width, [0.0; 3]);
    for y in 0..labels.height {
        for x in 0..labels.width {
            img.set_pixel(y, x, base_color(labels.get(y, x)));
        }
    }
    img
}

/// Renders `image` through the model and writes `parts.ppm` (hierarchical
/// models only), `masks.pgm` and `labels.ppm` into `out_dir`.
pub fn render(
    model: &Model,
    store: &ParamStore,
    image: &RgbImage,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut s = Session::new(store, false);
    let out = model.forward(&mut s, image)?;
    let fields = ScoreFields::from_output(&s, &out)?;
    let (h, w) = (image.height, image.width);
    let mut written = Vec::new();

    if let Some(po) = &out.part {
        let it = &po.iterations[model.cfg.inference_index()];
        let ids = harden(s.g.value(it.assign), &po.window);
        let stride = fields.padded_hw.0 / po.grid.h;
        let mut img = RgbImage::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(y, x, part_color(ids[(y / stride) * po.grid.w + x / stride]));
            }
        }
        let p = out_dir.join("parts.ppm");
        write_ppm(&p, &img)?;
        written.push(p);
    }

    let masks = s.g.value(out.whole.last().masks);
    let (nq, _) = masks.dims2()?;
    let (mh, mw) = fields.k0_hw;
    let cols = 4.min(nq).max(1);
    let rows = nq.div_ceil(cols);
    let mut tiled = LabelMap::filled(rows * (mh + 1), cols * (mw + 1), 0);
    for q in 0..nq {
        let (ty, tx) = ((q / cols) * (mh + 1), (q % cols) * (mw + 1));
        for y in 0..mh {
            for x in 0..mw {
                let v = masks.row(q)[y * mw + x];
                tiled.set(ty + y, tx + x, (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let p = out_dir.join("masks.pgm");
    write_pgm(&p, &tiled)?;
    written.push(p);

    let labels = fields.labels(Mode::Ensemble, model.cfg.inference_index())?;
    let p = out_dir.join("labels.ppm");
    write_ppm(&p, &colorize_labels(&labels))?;
    written.push(p);
    Ok(written)
}
