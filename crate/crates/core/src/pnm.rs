//! Binary PPM (P6) and PGM (P5) codecs.
//!
//! Writers emit the canonical header `P6\n<w> <h>\n<maxval>\n` followed by
//! raw samples, so identical pixels always produce identical bytes. The
//! reader accepts any standard whitespace/comment layout.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>, // 3 bytes per pixel, row-major
}

/// 8-bit single-channel raster with an explicit maxval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    pub gray: Vec<u8>,
}

pub fn write_ppm(path: &Path, img: &Ppm) -> Result<()> {
    debug_assert_eq!(img.rgb.len(), img.width * img.height * 3);
    let mut out = Vec::with_capacity(img.rgb.len() + 32);
    out.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    out.extend_from_slice(&img.rgb);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, img: &Pgm) -> Result<()> {
    debug_assert_eq!(img.gray.len(), img.width * img.height);
    let mut out = Vec::with_capacity(img.gray.len() + 32);
    out.extend_from_slice(format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).as_bytes());
    out.extend_from_slice(&img.gray);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Ppm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, w, h, maxval, data) =
        parse(&bytes).map_err(|msg| Error::corrupt(path, msg))?;
    if magic != b"P6" {
        return Err(Error::corrupt(path, format!("expected P6, got {:?}", as_str(magic))));
    }
    if maxval != 255 {
        return Err(Error::corrupt(path, format!("unsupported PPM maxval {maxval}")));
    }
    let need = w * h * 3;
    if data.len() < need {
        return Err(Error::corrupt(path, format!("pixel data truncated: {} < {need}", data.len())));
    }
    Ok(Ppm { width: w, height: h, rgb: data[..need].to_vec() })
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, w, h, maxval, data) =
        parse(&bytes).map_err(|msg| Error::corrupt(path, msg))?;
    if magic != b"P5" {
        return Err(Error::corrupt(path, format!("expected P5, got {:?}", as_str(magic))));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::corrupt(path, format!("unsupported PGM maxval {maxval}")));
    }
    let need = w * h;
    if data.len() < need {
        return Err(Error::corrupt(path, format!("pixel data truncated: {} < {need}", data.len())));
    }
    Ok(Pgm { width: w, height: h, maxval: maxval as u8, gray: data[..need].to_vec() })
}

fn as_str(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

/// Parses magic + three header integers, honoring `#` comments; returns the
/// raw sample bytes after the single whitespace that terminates the header.
fn parse(bytes: &[u8]) -> std::result::Result<(&[u8], usize, usize, usize, &[u8]), String> {
    if bytes.len() < 2 {
        return Err("file shorter than magic".to_string());
    }
    let magic = &bytes[..2];
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err("missing header integer".to_string());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse::<usize>()
            .map_err(|_| "header integer out of range".to_string())?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing whitespace after maxval".to_string());
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if w == 0 || h == 0 {
        return Err("zero image extent".to_string());
    }
    Ok((magic, w, h, maxval, &bytes[pos..]))
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ppm_pgm_roundtrip(w in 1usize..9, h in 1usize..9, seed in 0u64..200) {
            use rand::Rng;
            let dir = tempfile::tempdir().unwrap();
            let mut r = crate::rng::rng(seed);
            let rgb: Vec<u8> = (0..w * h * 3).map(|_| r.gen()).collect();
            let ppm = Ppm { width: w, height: h, rgb };
            let p1 = dir.path().join("a.ppm");
            write_ppm(&p1, &ppm).unwrap();
            prop_assert_eq!(read_ppm(&p1).unwrap(), ppm);

            let gray: Vec<u8> = (0..w * h).map(|_| r.gen_range(0..=9)).collect();
            let pgm = Pgm { width: w, height: h, maxval: 9, gray };
            let p2 = dir.path().join("a.pgm");
            write_pgm(&p2, &pgm).unwrap();
            prop_assert_eq!(read_pgm(&p2).unwrap(), pgm);
        }
    }
}
