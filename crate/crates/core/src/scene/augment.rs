//! Exemplar/target pair creation: two independent crop + flip views of one
//! anchor scene, resampled to model resolution.
//!
//! View pipeline (identical for image and label map): crop, resample to
//! `out_size` (bilinear for the image, nearest for labels), then horizontal
//! flip. Flipping last keeps it an exact involution on the output raster.

use rand::Rng;

use super::{SceneImage, SegMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AugmentCfg {
    /// Minimum crop extent as a fraction of each anchor extent.
    pub crop_min_frac: f64,
    pub flip_prob: f64,
    /// Output resolution (model resolution).
    pub out_size: usize,
    /// Anchors smaller than this on either side are rejected.
    pub min_anchor: usize,
}

impl Default for AugmentCfg {
    fn default() -> Self {
        AugmentCfg { crop_min_frac: 0.75, flip_prob: 0.5, out_size: 32, min_anchor: 16 }
    }
}

/// Geometry of one view, sufficient to reproduce it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewDesc {
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop_w: usize,
    pub crop_h: usize,
    pub flip: bool,
}

/// An exemplar/target training pair derived from a single anchor scene.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub exemplar: (SceneImage, SegMap),
    pub target: (SceneImage, SegMap),
    pub anchor_id: u64,
    pub seed: u64,
    /// Exemplar view first, target view second.
    pub views: [ViewDesc; 2],
}

fn crop_image(img: &SceneImage, v: &ViewDesc) -> SceneImage {
    let mut rgb = Vec::with_capacity(v.crop_w * v.crop_h * 3);
    for y in v.crop_y..v.crop_y + v.crop_h {
        let base = (y * img.width + v.crop_x) * 3;
        rgb.extend_from_slice(&img.rgb[base..base + v.crop_w * 3]);
    }
    SceneImage { height: v.crop_h, width: v.crop_w, rgb }
}

fn crop_seg(seg: &SegMap, v: &ViewDesc) -> SegMap {
    let mut labels = Vec::with_capacity(v.crop_w * v.crop_h);
    for y in v.crop_y..v.crop_y + v.crop_h {
        let base = y * seg.width + v.crop_x;
        labels.extend_from_slice(&seg.labels[base..base + v.crop_w]);
    }
    SegMap { height: v.crop_h, width: v.crop_w, labels, num_classes: seg.num_classes }
}

fn hflip_image(img: &SceneImage) -> SceneImage {
    let mut rgb = vec![0.0; img.rgb.len()];
    for y in 0..img.height {
        for x in 0..img.width {
            let src = (y * img.width + x) * 3;
            let dst = (y * img.width + (img.width - 1 - x)) * 3;
            rgb[dst..dst + 3].copy_from_slice(&img.rgb[src..src + 3]);
        }
    }
    SceneImage { height: img.height, width: img.width, rgb }
}

fn hflip_seg(seg: &SegMap) -> SegMap {
    let mut labels = vec![0; seg.labels.len()];
    for y in 0..seg.height {
        for x in 0..seg.width {
            labels[y * seg.width + (seg.width - 1 - x)] = seg.labels[y * seg.width + x];
        }
    }
    SegMap { height: seg.height, width: seg.width, labels, num_classes: seg.num_classes }
}

/// Applies one view to an aligned (image, labels) pair.
pub fn apply_view(
    img: &SceneImage,
    seg: &SegMap,
    v: &ViewDesc,
    out_size: usize,
) -> (SceneImage, SegMap) {
    let ci = crop_image(img, v);
    let cs = crop_seg(seg, v);
    let ri = ci.resize_bilinear(out_size, out_size);
    let rs = cs.resize_nearest(out_size, out_size);
    if v.flip {
        (hflip_image(&ri), hflip_seg(&rs))
    } else {
        (ri, rs)
    }
}

fn sample_view<R: Rng>(r: &mut R, w: usize, h: usize, cfg: &AugmentCfg) -> ViewDesc {
    let min_w = ((w as f64 * cfg.crop_min_frac).ceil() as usize).max(1);
    let min_h = ((h as f64 * cfg.crop_min_frac).ceil() as usize).max(1);
    let crop_w = r.gen_range(min_w..=w);
    let crop_h = r.gen_range(min_h..=h);
    let crop_x = r.gen_range(0..=w - crop_w);
    let crop_y = r.gen_range(0..=h - crop_h);
    let flip = r.gen_bool(cfg.flip_prob);
    ViewDesc { crop_x, crop_y, crop_w, crop_h, flip }
}

/// Draws two independent views of the anchor and packages them as an
/// exemplar/target pair. Deterministic in `(anchor_id, seed)`.
pub fn augment_pair(
    anchor_img: &SceneImage,
    anchor_seg: &SegMap,
    anchor_id: u64,
    seed: u64,
    cfg: &AugmentCfg,
) -> Result<PairSample> {
    if anchor_img.width != anchor_seg.width || anchor_img.height != anchor_seg.height {
        return Err(Error::shape(format!(
            "anchor image {}x{} vs labels {}x{}",
            anchor_img.width, anchor_img.height, anchor_seg.width, anchor_seg.height
        )));
    }
    if anchor_img.width < cfg.min_anchor || anchor_img.height < cfg.min_anchor {
        return Err(Error::config(format!(
            "anchor {}x{} below minimum {}",
            anchor_img.width, anchor_img.height, cfg.min_anchor
        )));
    }
    let mut r = crate::rng::stream_rng(seed, anchor_id ^ 0x9e3779b97f4a7c15);
    let view_x = sample_view(&mut r, anchor_img.width, anchor_img.height, cfg);
    let view_y = sample_view(&mut r, anchor_img.width, anchor_img.height, cfg);
    let exemplar = apply_view(anchor_img, anchor_seg, &view_x, cfg.out_size);
    let target = apply_view(anchor_img, anchor_seg, &view_y, cfg.out_size);
    Ok(PairSample { exemplar, target, anchor_id, seed, views: [view_x, view_y] })
}

/// Anchor-pixel index sampled by the view pipeline for output pixel
/// `(y, x)`: undoes the flip, then maps through nearest resampling into the
/// crop window. This is the label-path geometry; tests re-render from it.
pub fn view_source_pixel(
    v: &ViewDesc,
    out_size: usize,
    y: usize,
    x: usize,
) -> (usize, usize) {
    let x = if v.flip { out_size - 1 - x } else { x };
    let sy = super::nearest_src(y, out_size, v.crop_h) + v.crop_y;
    let sx = super::nearest_src(x, out_size, v.crop_w) + v.crop_x;
    (sy, sx)
}
