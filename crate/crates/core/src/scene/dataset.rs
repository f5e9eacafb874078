//! Dataset persistence: one PPM + PGM pair per scene plus a tab-separated
//! manifest (`<id>\t<image-file>\t<seg-file>\t<seed>` per line, ordered by
//! id).

use std::path::Path;

use super::{SceneImage, SegMap};
use crate::error::{Error, Result};
use crate::pnm::{self, Pgm, Ppm};

#[derive(Debug, Clone)]
pub struct DatasetSample {
    pub id: u64,
    pub image: SceneImage,
    pub seg: SegMap,
    /// Seed the scene was generated from; recorded for provenance.
    pub seed: u64,
}

pub const MANIFEST: &str = "manifest.tsv";

pub fn image_to_ppm(img: &SceneImage) -> Ppm {
    let rgb = img
        .rgb
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ppm { width: img.width, height: img.height, rgb }
}

pub fn ppm_to_image(ppm: &Ppm) -> SceneImage {
    let rgb = ppm.rgb.iter().map(|&b| b as f64 / 255.0).collect();
    SceneImage { height: ppm.height, width: ppm.width, rgb }
}

pub fn seg_to_pgm(seg: &SegMap) -> Pgm {
    Pgm {
        width: seg.width,
        height: seg.height,
        maxval: (seg.num_classes - 1) as u8,
        gray: seg.labels.clone(),
    }
}

pub fn pgm_to_seg(pgm: &Pgm) -> Result<SegMap> {
    SegMap::new(pgm.height, pgm.width, pgm.gray.clone(), pgm.maxval as usize + 1)
}

pub fn write_dataset(dir: &Path, samples: &[DatasetSample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sorted: Vec<&DatasetSample> = samples.iter().collect();
    sorted.sort_by_key(|s| s.id);
    let mut manifest = String::new();
    for s in sorted {
        let img_name = format!("scene_{:06}.ppm", s.id);
        let seg_name = format!("scene_{:06}.pgm", s.id);
        pnm::write_ppm(&dir.join(&img_name), &image_to_ppm(&s.image))?;
        pnm::write_pgm(&dir.join(&seg_name), &seg_to_pgm(&s.seg))?;
        manifest.push_str(&format!("{}\t{}\t{}\t{}\n", s.id, img_name, seg_name, s.seed));
    }
    let mpath = dir.join(MANIFEST);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(mpath, e))
}

/// Reads a dataset back, ordered by id. A directory without a manifest is an
/// empty dataset, not an error.
pub fn read_dataset(dir: &Path) -> Result<Vec<DatasetSample>> {
    let mpath = dir.join(MANIFEST);
    let manifest = match std::fs::read_to_string(&mpath) {
        Ok(m) => m,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(mpath, e)),
    };
    let mut samples = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::corrupt(
                &mpath,
                format!("manifest line {} has {} fields, want 4", lineno + 1, fields.len()),
            ));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| Error::corrupt(&mpath, format!("bad id on line {}", lineno + 1)))?;
        let seed: u64 = fields[3]
            .parse()
            .map_err(|_| Error::corrupt(&mpath, format!("bad seed on line {}", lineno + 1)))?;
        let image = ppm_to_image(&pnm::read_ppm(&dir.join(fields[1]))?);
        let seg = pgm_to_seg(&pnm::read_pgm(&dir.join(fields[2]))?)?;
        if image.width != seg.width || image.height != seg.height {
            return Err(Error::corrupt(
                dir.join(fields[2]),
                format!("sample {id}: image {}x{} vs labels {}x{}", image.width, image.height, seg.width, seg.height),
            ));
        }
        samples.push(DatasetSample { id, image, seg, seed });
    }
    samples.sort_by_key(|s| s.id);
    Ok(samples)
}
