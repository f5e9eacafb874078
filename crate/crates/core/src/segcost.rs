//! Categorical matching cost between two label maps, plus user guidance
//! edits over it.
//!
//! The cost is a binary 4D tensor: entry (i,j,k,l) is 1 exactly when the
//! target label at (i,j) equals the exemplar label at (k,l). To move to an
//! attention resolution, the label maps are nearest-downsampled first and
//! the equality test is applied after, so the result stays exactly binary.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pnm;
use crate::scene::SegMap;

/// Binary 4D cost between a target and an exemplar label map.
#[derive(Debug, Clone)]
pub struct CatCost {
    /// Target rows (h, w), then exemplar columns (h2, w2).
    pub shape: (usize, usize, usize, usize),
    /// Row-major over (i, j, k, l); values are exactly 0.0 or 1.0.
    pub values: Vec<f64>,
    /// Label-map extents the cost was derived from.
    pub source_hw: ((usize, usize), (usize, usize)),
}

impl CatCost {
    pub fn at(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let (_, w, h2, w2) = self.shape;
        self.values[((i * w + j) * h2 + k) * w2 + l]
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Number of target query positions (h * w).
    pub fn rows(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    /// Number of exemplar positions (h2 * w2).
    pub fn cols(&self) -> usize {
        self.shape.2 * self.shape.3
    }
}

/// Exact equality cost at full map resolution.
pub fn build_cat_cost(seg_y: &SegMap, seg_x: &SegMap) -> Result<CatCost> {
    if seg_y.num_classes != seg_x.num_classes {
        return Err(Error::config(format!(
            "categorical cost: class counts differ ({} vs {})",
            seg_y.num_classes, seg_x.num_classes
        )));
    }
    let (h, w) = (seg_y.height, seg_y.width);
    let (h2, w2) = (seg_x.height, seg_x.width);
    let mut values = Vec::with_capacity(h * w * h2 * w2);
    for &ly in &seg_y.labels {
        for &lx in &seg_x.labels {
            values.push(if ly == lx { 1.0 } else { 0.0 });
        }
    }
    Ok(CatCost {
        shape: (h, w, h2, w2),
        values,
        source_hw: ((h, w), (h2, w2)),
    })
}

/// Nearest-downsamples both label maps to `target_hw`, then applies the
/// equality test.
pub fn downsample_cost(seg_y: &SegMap, seg_x: &SegMap, target_hw: (usize, usize)) -> Result<CatCost> {
    let (th, tw) = target_hw;
    if th == 0 || tw == 0 {
        return Err(Error::config("downsample_cost: zero target extent".to_string()));
    }
    if th > seg_y.height || tw > seg_y.width || th > seg_x.height || tw > seg_x.width {
        return Err(Error::config(format!(
            "downsample_cost: target {th}x{tw} exceeds source {}x{} / {}x{}",
            seg_y.height, seg_y.width, seg_x.height, seg_x.width
        )));
    }
    let sy = seg_y.resize_nearest(th, tw);
    let sx = seg_x.resize_nearest(th, tw);
    let mut cost = build_cat_cost(&sy, &sx)?;
    cost.source_hw = ((seg_y.height, seg_y.width), (seg_x.height, seg_x.width));
    Ok(cost)
}

/// One user-declared restriction: the masked target region may attend only
/// to the masked exemplar region, and that exemplar region is reserved for
/// it.
#[derive(Debug, Clone)]
pub struct GuidancePair {
    /// Binary mask over the target label map (1 = selected).
    pub target_mask: Vec<u8>,
    pub target_hw: (usize, usize),
    /// Binary mask over the exemplar label map.
    pub exemplar_mask: Vec<u8>,
    pub exemplar_hw: (usize, usize),
}

#[derive(Debug, Clone, Default)]
pub struct GuidanceSpec {
    pub pairs: Vec<GuidancePair>,
}

impl GuidanceSpec {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Parses the guidance file format: a header line `AMGUIDE 1`, then one
    /// pair of PGM mask paths per line (target mask, exemplar mask),
    /// whitespace-separated, resolved relative to the guidance file.
    pub fn load(path: &Path) -> Result<GuidanceSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "AMGUIDE 1" => {}
            other => {
                return Err(Error::corrupt(
                    path,
                    format!("bad guidance header {:?}, want `AMGUIDE 1`", other.unwrap_or("")),
                ))
            }
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut pairs = Vec::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let (t, x) = match (it.next(), it.next(), it.next()) {
                (Some(t), Some(x), None) => (t, x),
                _ => {
                    return Err(Error::corrupt(
                        path,
                        format!("guidance line `{line}` must name exactly two mask files"),
                    ))
                }
            };
            let tm = pnm::read_pgm(&base.join(t))?;
            let xm = pnm::read_pgm(&base.join(x))?;
            let pair = GuidancePair {
                target_mask: tm.gray.iter().map(|&v| (v > 0) as u8).collect(),
                target_hw: (tm.height, tm.width),
                exemplar_mask: xm.gray.iter().map(|&v| (v > 0) as u8).collect(),
                exemplar_hw: (xm.height, xm.width),
            };
            validate_pair(&pair)?;
            pairs.push(pair);
        }
        Ok(GuidanceSpec { pairs })
    }
}

fn validate_pair(pair: &GuidancePair) -> Result<()> {
    if pair.target_mask.iter().all(|&v| v == 0) || pair.exemplar_mask.iter().all(|&v| v == 0) {
        return Err(Error::config("guidance pair with an empty region".to_string()));
    }
    Ok(())
}

fn mask_to_segmap(mask: &[u8], hw: (usize, usize)) -> SegMap {
    SegMap { height: hw.0, width: hw.1, labels: mask.to_vec(), num_classes: 2 }
}

/// Applies the guidance edits to a cost at its own resolution. Masks are
/// nearest-resampled to the cost resolution first.
///
/// Rows whose target pixel falls in a pair's mask keep cost only inside that
/// pair's exemplar mask; all remaining rows lose cost inside every guided
/// exemplar mask (the region is reserved). Rows that end up all-zero are
/// reported, not failed: the residual attention term still lets them attend.
pub fn apply_guidance(
    cost: &CatCost,
    guide: &GuidanceSpec,
    ) -> (CatCost, Vec<(usize, usize)>) {
    if guide.is_empty() {
        return (cost.clone(), Vec::new());
    }
    let (h, w, h2, w2) = cost.shape;
    // Resample masks to cost resolution.
    let tmasks: Vec<Vec<u8>> = guide
        .pairs
        .iter()
        .map(|p| mask_to_segmap(&p.target_mask, p.target_hw).resize_nearest(h, w).labels)
        .collect();
    let xmasks: Vec<Vec<u8>> = guide
        .pairs
        .iter()
        .map(|p| mask_to_segmap(&p.exemplar_mask, p.exemplar_hw).resize_nearest(h2, w2).labels)
        .collect();

    let cols = h2 * w2;
    let mut out = cost.values.clone();
    let mut starved = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let row_idx = i * w + j;
            let row = &mut out[row_idx * cols..(row_idx + 1) * cols];
            let selected: Vec<usize> = (0..guide.pairs.len())
                .filter(|&p| tmasks[p][row_idx] != 0)
                .collect();
            if selected.is_empty() {
                // Reserved exemplar regions are off-limits for unselected rows.
                for xm in &xmasks {
                    for (c, &m) in xm.iter().enumerate() {
                        if m != 0 {
                            row[c] = 0.0;
                        }
                    }
                }
            } else {
                // Keep cost only where every selecting pair allows it.
                for (c, slot) in row.iter_mut().enumerate() {
                    let allowed = selected.iter().all(|&p| xmasks[p][c] != 0);
                    if !allowed {
                        *slot = 0.0;
                    }
                }
            }
            if out[row_idx * cols..(row_idx + 1) * cols].iter().all(|&v| v == 0.0) {
                starved.push((i, j));
            }
        }
    }
    (
        CatCost { shape: cost.shape, values: out, source_hw: cost.source_hw },
        starved,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SegMap;

    fn seg(h: usize, w: usize, labels: Vec<u8>, k: usize) -> SegMap {
        SegMap::new(h, w, labels, k).unwrap()
    }

    #[test]
    fn uniform_maps_give_all_ones() {
        let a = seg(2, 2, vec![3; 4], 6);
        let b = seg(3, 2, vec![3; 6], 6);
        let c = build_cat_cost(&a, &b).unwrap();
        assert!(c.values.iter().all(|&v| v == 1.0));
        assert_eq!(c.shape, (2, 2, 3, 2));
    }

    #[test]
    fn direct_equality_evaluation() {
        let sy = seg(1, 2, vec![0, 1], 2);
        let sx = seg(1, 2, vec![1, 1], 2);
        let c = build_cat_cost(&sy, &sx).unwrap();
        assert_eq!(c.at(0, 0, 0, 0), 0.0);
        assert_eq!(c.at(0, 0, 0, 1), 0.0);
        assert_eq!(c.at(0, 1, 0, 0), 1.0);
        assert_eq!(c.at(0, 1, 0, 1), 1.0);
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let a = seg(1, 1, vec![0], 2);
        let b = seg(1, 1, vec![0], 3);
        assert!(matches!(build_cat_cost(&a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn matches_quadruple_loop_oracle() {
        use rand::Rng;
        let mut r = crate::rng::rng(17);
        for _ in 0..20 {
            let ly: Vec<u8> = (0..36).map(|_| r.gen_range(0..6)).collect();
            let lx: Vec<u8> = (0..36).map(|_| r.gen_range(0..6)).collect();
            let sy = seg(6, 6, ly.clone(), 6);
            let sx = seg(6, 6, lx.clone(), 6);
            let c = build_cat_cost(&sy, &sx).unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    for k in 0..6 {
                        for l in 0..6 {
                            let want = (ly[i * 6 + j] == lx[k * 6 + l]) as u8 as f64;
                            assert_eq!(c.at(i, j, k, l), want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn row_sums_equal_class_histogram() {
        use rand::Rng;
        let mut r = crate::rng::rng(23);
        let ly: Vec<u8> = (0..16).map(|_| r.gen_range(0..4)).collect();
        let lx: Vec<u8> = (0..16).map(|_| r.gen_range(0..4)).collect();
        let sy = seg(4, 4, ly.clone(), 4);
        let sx = seg(4, 4, lx, 4);
        let hist = sx.class_histogram();
        let c = build_cat_cost(&sy, &sx).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let sum: f64 = (0..4)
                    .flat_map(|k| (0..4).map(move |l| (k, l)))
                    .map(|(k, l)| c.at(i, j, k, l))
                    .sum();
                assert_eq!(sum as usize, hist[ly[i * 4 + j] as usize]);
            }
        }
    }

    #[test]
    fn downsample_to_source_size_is_identity() {
        use rand::Rng;
        let mut r = crate::rng::rng(31);
        let ly: Vec<u8> = (0..64).map(|_| r.gen_range(0..6)).collect();
        let lx: Vec<u8> = (0..64).map(|_| r.gen_range(0..6)).collect();
        let sy = seg(8, 8, ly, 6);
        let sx = seg(8, 8, lx, 6);
        let a = build_cat_cost(&sy, &sx).unwrap();
        let b = downsample_cost(&sy, &sx, (8, 8)).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn downsample_matches_two_stage_oracle() {
        use rand::Rng;
        let mut r = crate::rng::rng(37);
        let ly: Vec<u8> = (0..32 * 32).map(|_| r.gen_range(0..6)).collect();
        let lx: Vec<u8> = (0..32 * 32).map(|_| r.gen_range(0..6)).collect();
        let sy = seg(32, 32, ly.clone(), 6);
        let sx = seg(32, 32, lx.clone(), 6);
        let c = downsample_cost(&sy, &sx, (8, 8)).unwrap();
        assert!(c.is_binary());
        // Oracle: nearest-pick labels by hand, then loop the equality.
        let pick = |labels: &[u8], i: usize, j: usize| -> u8 {
            let si = (i as f64 + 0.5) * 4.0;
            let sj = (j as f64 + 0.5) * 4.0;
            labels[(si.floor() as usize) * 32 + sj.floor() as usize]
        };
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    for l in 0..8 {
                        let want = (pick(&ly, i, j) == pick(&lx, k, l)) as u8 as f64;
                        assert_eq!(c.at(i, j, k, l), want);
                    }
                }
            }
        }
    }

    #[test]
    fn downsample_upscale_rejected() {
        let a = seg(4, 4, vec![0; 16], 2);
        assert!(matches!(downsample_cost(&a, &a, (8, 8)), Err(Error::Config(_))));
    }

    fn disk_mask(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Vec<u8> {
        (0..h * w)
            .map(|i| {
                let y = (i / w) as f64 + 0.5;
                let x = (i % w) as f64 + 0.5;
                (((y - cy).powi(2) + (x - cx).powi(2)).sqrt() <= r) as u8
            })
            .collect()
    }

    #[test]
    fn empty_guidance_is_identity() {
        let a = seg(4, 4, vec![1; 16], 2);
        let c = build_cat_cost(&a, &a).unwrap();
        let (g, starved) = apply_guidance(&c, &GuidanceSpec::default());
        assert_eq!(g.values, c.values);
        assert!(starved.is_empty());
    }

    #[test]
    fn full_masks_change_nothing() {
        let a = seg(4, 4, vec![1; 16], 2);
        let c = build_cat_cost(&a, &a).unwrap();
        let guide = GuidanceSpec {
            pairs: vec![GuidancePair {
                target_mask: vec![1; 16],
                target_hw: (4, 4),
                exemplar_mask: vec![1; 16],
                exemplar_hw: (4, 4),
            }],
        };
        let (g, _) = apply_guidance(&c, &guide);
        assert_eq!(g.values, c.values);
    }

    #[test]
    fn one_to_one_restriction_and_reservation() {
        // Two same-class disks in the exemplar; guide one target disk onto
        // the second exemplar disk only.
        let h = 16;
        let mut ly = vec![0u8; h * h];
        let mut lx = vec![0u8; h * h];
        let t_disk = disk_mask(h, h, 8.0, 8.0, 3.5);
        let x_disk_a = disk_mask(h, h, 4.0, 4.0, 3.0);
        let x_disk_b = disk_mask(h, h, 12.0, 12.0, 3.0);
        for i in 0..h * h {
            if t_disk[i] == 1 {
                ly[i] = 1;
            }
            if x_disk_a[i] == 1 || x_disk_b[i] == 1 {
                lx[i] = 1;
            }
        }
        let sy = seg(h, h, ly.clone(), 2);
        let sx = seg(h, h, lx, 2);
        let c = build_cat_cost(&sy, &sx).unwrap();
        let guide = GuidanceSpec {
            pairs: vec![GuidancePair {
                target_mask: t_disk.clone(),
                target_hw: (h, h),
                exemplar_mask: x_disk_b.clone(),
                exemplar_hw: (h, h),
            }],
        };
        let (g, _) = apply_guidance(&c, &guide);
        assert!(g.is_binary());
        for i in 0..h {
            for j in 0..h {
                for k in 0..h {
                    for l in 0..h {
                        let v = g.at(i, j, k, l);
                        let in_t = t_disk[i * h + j] == 1;
                        let in_xb = x_disk_b[k * h + l] == 1;
                        if in_t && !in_xb {
                            assert_eq!(v, 0.0, "selected row escaped its region");
                        }
                        if !in_t && in_xb {
                            assert_eq!(v, 0.0, "reserved region leaked to unselected row");
                        }
                        if in_t && in_xb {
                            // Same class everywhere inside both disks.
                            assert_eq!(v, c.at(i, j, k, l));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn guidance_is_idempotent() {
        use rand::Rng;
        let mut r = crate::rng::rng(41);
        let ly: Vec<u8> = (0..64).map(|_| r.gen_range(0..3)).collect();
        let lx: Vec<u8> = (0..64).map(|_| r.gen_range(0..3)).collect();
        let sy = seg(8, 8, ly, 3);
        let sx = seg(8, 8, lx, 3);
        let c = build_cat_cost(&sy, &sx).unwrap();
        let tm: Vec<u8> = (0..64).map(|i| (i % 5 == 0) as u8).collect();
        let xm: Vec<u8> = (0..64).map(|i| (i % 3 == 0) as u8).collect();
        let guide = GuidanceSpec {
            pairs: vec![GuidancePair {
                target_mask: tm,
                target_hw: (8, 8),
                exemplar_mask: xm,
                exemplar_hw: (8, 8),
            }],
        };
        let (once, _) = apply_guidance(&c, &guide);
        let (twice, _) = apply_guidance(&once, &guide);
        assert_eq!(once.values, twice.values);
        assert!(twice.is_binary());
    }

    #[test]
    fn guidance_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let tm = crate::pnm::Pgm {
            width: 4,
            height: 4,
            maxval: 255,
            gray: (0..16).map(|i| if i < 4 { 255 } else { 0 }).collect(),
        };
        let xm = crate::pnm::Pgm {
            width: 4,
            height: 4,
            maxval: 255,
            gray: (0..16).map(|i| if i >= 12 { 255 } else { 0 }).collect(),
        };
        crate::pnm::write_pgm(&dir.path().join("t.pgm"), &tm).unwrap();
        crate::pnm::write_pgm(&dir.path().join("x.pgm"), &xm).unwrap();
        let gpath = dir.path().join("guide.txt");
        std::fs::write(&gpath, "AMGUIDE 1\nt.pgm\tx.pgm\n").unwrap();
        let spec = GuidanceSpec::load(&gpath).unwrap();
        assert_eq!(spec.pairs.len(), 1);
        assert_eq!(spec.pairs[0].target_mask[..4], [1, 1, 1, 1]);
        assert_eq!(spec.pairs[0].exemplar_mask[12..], [1, 1, 1, 1]);

        std::fs::write(&gpath, "WRONG\n").unwrap();
        assert!(GuidanceSpec::load(&gpath).is_err());
    }
}
