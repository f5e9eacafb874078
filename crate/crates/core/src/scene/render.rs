//! Rasterization of scene descriptions.
//!
//! Pixels are classified by point-inside tests at pixel centers with
//! anti-aliasing off, so the label raster is exactly reproducible from the
//! geometry.

use super::{Instance, SceneImage, SceneSpec, SegMap, ShapeKind};

fn inside(inst: &Instance, px: f64, py: f64) -> bool {
    let dx = px - inst.cx;
    let dy = py - inst.cy;
    match inst.kind {
        ShapeKind::Rectangle => dx.abs() <= inst.rx && dy.abs() <= inst.ry,
        ShapeKind::Disk => {
            let nx = dx / inst.rx;
            let ny = dy / inst.ry;
            nx * nx + ny * ny <= 1.0
        }
        ShapeKind::Triangle => {
            // Isoceles triangle pointing up (y grows downward).
            let a = (inst.cx, inst.cy - inst.ry);
            let b = (inst.cx - inst.rx, inst.cy + inst.ry);
            let c = (inst.cx + inst.rx, inst.cy + inst.ry);
            let sign = |p: (f64, f64), q: (f64, f64)| -> f64 {
                (q.0 - p.0) * (py - p.1) - (q.1 - p.1) * (px - p.0)
            };
            let s1 = sign(a, b);
            let s2 = sign(b, c);
            let s3 = sign(c, a);
            (s1 <= 0.0 && s2 <= 0.0 && s3 <= 0.0) || (s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0)
        }
    }
}

/// Topmost instance covering the unit-square point, honoring draw order
/// (later instances win). Returns the class and the appearance to shade with.
pub fn class_at_point(spec: &SceneSpec, px: f64, py: f64) -> (u8, &super::Appearance) {
    for inst in spec.instances.iter().rev() {
        if inside(inst, px, py) {
            return (inst.class_id, &inst.appearance);
        }
    }
    (spec.background_class, &spec.background)
}

/// Renders the scene at its canvas resolution. The image and label map are
/// aligned pixel-for-pixel.
pub fn render_scene(spec: &SceneSpec) -> (SceneImage, SegMap) {
    let n = spec.canvas;
    let mut rgb = Vec::with_capacity(n * n * 3);
    let mut labels = Vec::with_capacity(n * n);
    for y in 0..n {
        let py = (y as f64 + 0.5) / n as f64;
        for x in 0..n {
            let px = (x as f64 + 0.5) / n as f64;
            let (class, app) = class_at_point(spec, px, py);
            labels.push(class);
            rgb.extend_from_slice(&app.color_at(px, py));
        }
    }
    let image = SceneImage { height: n, width: n, rgb };
    let seg = SegMap { height: n, width: n, labels, num_classes: spec.num_classes };
    (image, seg)
}
