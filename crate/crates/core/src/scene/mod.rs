//! Synthetic multi-object scene generation, exemplar/target augmentation,
//! and dataset persistence.
//!
//! Scenes are flat-shaded rectangles, disks, and triangles over a textured
//! background. Every class has a canonical hue so that class identity stays
//! recoverable from generated pixels, while per-instance jitter and texture
//! phase keep individual instances visually distinct.

mod augment;
mod dataset;
mod render;

pub use augment::{apply_view, augment_pair, view_source_pixel, AugmentCfg, PairSample, ViewDesc};
pub use dataset::{read_dataset, write_dataset, DatasetSample};
pub use render::{class_at_point, render_scene};

use crate::error::{Error, Result};

/// Categorical label grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl SegMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "segmap: {}x{} vs {} labels",
                height,
                width,
                labels.len()
            )));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::config(format!("segmap: num_classes {num_classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= num_classes) {
            return Err(Error::config(format!(
                "segmap: label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(SegMap { height, width, labels, num_classes })
    }

    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Nearest-neighbor resample to `(h, w)`.
    pub fn resize_nearest(&self, h: usize, w: usize) -> SegMap {
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = nearest_src(y, h, self.height);
            for x in 0..w {
                let sx = nearest_src(x, w, self.width);
                labels.push(self.labels[sy * self.width + sx]);
            }
        }
        SegMap { height: h, width: w, labels, num_classes: self.num_classes }
    }

    /// Per-class pixel counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }
}

/// Source pixel index picked by nearest-neighbor resampling: the center of
/// destination pixel `d` mapped into source coordinates.
pub(crate) fn nearest_src(d: usize, dst_len: usize, src_len: usize) -> usize {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((d as f64 + 0.5) * scale).floor() as isize;
    s.clamp(0, src_len as isize - 1) as usize
}

/// RGB raster with channel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f64>, // 3 per pixel, row-major
}

impl SceneImage {
    pub fn new(height: usize, width: usize, rgb: Vec<f64>) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "image: {}x{} vs {} channel values",
                height,
                width,
                rgb.len()
            )));
        }
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("image: channel value outside [0,1]".to_string()));
        }
        Ok(SceneImage { height, width, rgb })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Bilinear resample to `(h, w)`.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> SceneImage {
        let sy_scale = self.height as f64 / h as f64;
        let sx_scale = self.width as f64 / w as f64;
        let mut rgb = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            let sy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, self.height as f64 - 1.0);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = sy - y0 as f64;
            for x in 0..w {
                let sx = ((x as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, self.width as f64 - 1.0);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = sx - x0 as f64;
                for c in 0..3 {
                    let p00 = self.rgb[(y0 * self.width + x0) * 3 + c];
                    let p01 = self.rgb[(y0 * self.width + x1) * 3 + c];
                    let p10 = self.rgb[(y1 * self.width + x0) * 3 + c];
                    let p11 = self.rgb[(y1 * self.width + x1) * 3 + c];
                    let top = p00 + (p01 - p00) * wx;
                    let bot = p10 + (p11 - p10) * wx;
                    rgb.push(top + (bot - top) * wy);
                }
            }
        }
        SceneImage { height: h, width: w, rgb }
    }
}

/// Shape primitive of a scene instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

/// Flat color plus a sinusoidal brightness texture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub base_rgb: [f64; 3],
    pub tex_amp: f64,
    pub tex_freq: f64,
    pub tex_phase: f64,
}

impl Appearance {
    /// Color at unit-square point (px, py).
    pub fn color_at(&self, px: f64, py: f64) -> [f64; 3] {
        let m = 1.0 + self.tex_amp
            * (std::f64::consts::TAU * self.tex_freq * (px + py) + self.tex_phase).sin();
        [
            (self.base_rgb[0] * m).clamp(0.0, 1.0),
            (self.base_rgb[1] * m).clamp(0.0, 1.0),
            (self.base_rgb[2] * m).clamp(0.0, 1.0),
        ]
    }
}

/// One placed object.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub class_id: u8,
    pub kind: ShapeKind,
    /// Center and half-extents in unit coordinates.
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub appearance: Appearance,
}

/// Full description of a renderable scene. Instances later in the list draw
/// over earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub canvas: usize,
    pub num_classes: usize,
    pub background_class: u8,
    pub background: Appearance,
    pub instances: Vec<Instance>,
}

/// Canonical class colors: evenly spaced hues at fixed saturation/value.
pub fn palette(num_classes: usize) -> Vec<[f64; 3]> {
    (0..num_classes)
        .map(|k| hsv_to_rgb(k as f64 / num_classes as f64, 0.75, 0.85))
        .collect()
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i64 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue in [0,1) of an RGB triple; gray pixels map to hue 0 by convention.
pub fn rgb_to_hue(rgb: [f64; 3]) -> f64 {
    let max = rgb[0].max(rgb[1]).max(rgb[2]);
    let min = rgb[0].min(rgb[1]).min(rgb[2]);
    let d = max - min;
    if d <= 0.0 {
        return 0.0;
    }
    let h = if max == rgb[0] {
        ((rgb[1] - rgb[2]) / d).rem_euclid(6.0)
    } else if max == rgb[1] {
        (rgb[2] - rgb[0]) / d + 2.0
    } else {
        (rgb[0] - rgb[1]) / d + 4.0
    };
    h / 6.0
}

/// Knobs for the random scene sampler.
#[derive(Debug, Clone)]
pub struct SceneGenCfg {
    pub canvas: usize,
    pub num_classes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Probability of forcing a same-class duplicate instance into a scene.
    pub duplicate_prob: f64,
    pub hue_jitter: f64,
    pub sat_val_jitter: f64,
}

impl Default for SceneGenCfg {
    fn default() -> Self {
        SceneGenCfg {
            canvas: 32,
            num_classes: 6,
            min_instances: 2,
            max_instances: 5,
            duplicate_prob: 0.5,
            hue_jitter: 0.04,
            sat_val_jitter: 0.15,
        }
    }
}

/// Deterministically samples a scene description from `seed`.
pub fn sample_scene(cfg: &SceneGenCfg, seed: u64) -> SceneSpec {
    use rand::Rng;
    let mut r = crate::rng::stream_rng(seed, 0xa11ce);
    let jitter_appearance = |r: &mut rand_chacha::ChaCha8Rng, class: usize, cfg: &SceneGenCfg| {
        let h = class as f64 / cfg.num_classes as f64
            + r.gen_range(-cfg.hue_jitter..=cfg.hue_jitter);
        let s = (0.75 + r.gen_range(-cfg.sat_val_jitter..=cfg.sat_val_jitter)).clamp(0.25, 1.0);
        let v = (0.85 + r.gen_range(-cfg.sat_val_jitter..=cfg.sat_val_jitter)).clamp(0.25, 1.0);
        Appearance {
            base_rgb: hsv_to_rgb(h, s, v),
            tex_amp: r.gen_range(0.10..0.30),
            tex_freq: r.gen_range(1.5..4.0),
            tex_phase: r.gen_range(0.0..std::f64::consts::TAU),
        }
    };
    let background = jitter_appearance(&mut r, 0, cfg);
    let n = r.gen_range(cfg.min_instances..=cfg.max_instances);
    let mut instances = Vec::with_capacity(n + 1);
    let sample_instance = |r: &mut rand_chacha::ChaCha8Rng, class: u8, cfg: &SceneGenCfg| {
        let kind = match r.gen_range(0..3) {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Disk,
            _ => ShapeKind::Triangle,
        };
        Instance {
            class_id: class,
            kind,
            cx: r.gen_range(0.18..0.82),
            cy: r.gen_range(0.18..0.82),
            rx: r.gen_range(0.10..0.28),
            ry: r.gen_range(0.10..0.28),
            appearance: jitter_appearance(r, class as usize, cfg),
        }
    };
    for _ in 0..n {
        let class = r.gen_range(1..cfg.num_classes) as u8;
        instances.push(sample_instance(&mut r, class, cfg));
    }
    if r.gen_bool(cfg.duplicate_prob) {
        let pick = r.gen_range(0..instances.len());
        let class = instances[pick].class_id;
        instances.push(sample_instance(&mut r, class, cfg));
    }
    SceneSpec {
        canvas: cfg.canvas,
        num_classes: cfg.num_classes,
        background_class: 0,
        background,
        instances,
    }
}
