//! File formats: the TED1 tensor container, PGM/PNG image codecs, and
//! density-map visualizations.
//!
//! TED1 layout: magic bytes `TED1`, four 32-bit little-endian dims
//! (n, c, h, w), then n*c*h*w 32-bit little-endian floats, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor4;
use crate::{Error, Result};

pub const TED1_MAGIC: &[u8; 4] = b"TED1";

pub fn write_ted1<W: Write>(w: &mut W, t: &Tensor4) -> Result<()> {
    w.write_all(TED1_MAGIC)?;
    let (n, c, h, wd) = t.shape();
    for dim in [n, c, h, wd] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_ted1<R: Read>(r: &mut R) -> Result<Tensor4> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TED1_MAGIC {
        return Err(Error::Data(format!("bad TED1 magic {:?}", magic)));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let len = dims.iter().product::<usize>();
    let mut data = Vec::with_capacity(len);
    let mut buf = [0u8; 4];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Tensor4::from_vec(dims[0], dims[1], dims[2], dims[3], data)
}

pub fn save_ted1(path: &Path, t: &Tensor4) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ted1(&mut w, t)
}

pub fn load_ted1(path: &Path) -> Result<Tensor4> {
    let mut r = BufReader::new(File::open(path)?);
    read_ted1(&mut r)
}

/// Binary PGM (P5, maxval 255) writer for a single-channel plane.
pub fn save_pgm(path: &Path, pixels: &[u8], h: usize, w: usize) -> Result<()> {
    if pixels.len() != h * w {
        return Err(Error::Shape(format!(
            "pgm: {} pixels for {}x{}",
            pixels.len(),
            h,
            w
        )));
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", w, h)?;
    f.write_all(pixels)?;
    Ok(())
}

/// Reads a binary PGM (P5) into (pixels, h, w).
pub fn load_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        // skip whitespace and comment lines
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(Error::Data(format!("unsupported PGM magic {}", magic)));
    }
    let w: usize = token()?.parse().map_err(|_| Error::Data("bad PGM width".into()))?;
    let h: usize = token()?.parse().map_err(|_| Error::Data("bad PGM height".into()))?;
    let maxval: usize = token()?.parse().map_err(|_| Error::Data("bad PGM maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Data(format!("unsupported PGM maxval {}", maxval)));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + h * w {
        return Err(Error::Data("truncated PGM data".into()));
    }
    Ok((bytes[pos..pos + h * w].to_vec(), h, w))
}

/// Loads a PNG or PGM image as a normalized [0,1] 1x3xHxW tensor. Grayscale
/// inputs are replicated across the three channels.
pub fn load_image(path: &Path) -> Result<Tensor4> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if ext == "pgm" {
        let (pix, h, w) = load_pgm(path)?;
        let mut t = Tensor4::zeros(1, 3, h, w)?;
        for c in 0..3 {
            for (o, &p) in t.plane_mut(0, c).iter_mut().zip(&pix) {
                *o = p as f64 / 255.0;
            }
        }
        return Ok(t);
    }
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {}", path.display(), e)))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor4::zeros(1, 3, h, w)?;
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                t.set(0, c, y, x, p.0[c] as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

/// Saves a [0,1] 1x3xHxW tensor as an RGB PNG.
pub fn save_image_png(path: &Path, t: &Tensor4) -> Result<()> {
    let (n, c, h, w) = t.shape();
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("png export expects 1x3xHxW, got {:?}", t.shape())));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (t.get(0, 0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (t.get(0, 1, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (t.get(0, 2, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {}", path.display(), e)))
}

/// Saves an 8-bit grayscale buffer as PNG or (by extension) PGM.
pub fn save_gray(path: &Path, pixels: &[u8], h: usize, w: usize) -> Result<()> {
    if pixels.len() != h * w {
        return Err(Error::Shape(format!(
            "gray image: {} pixels for {}x{}",
            pixels.len(),
            h,
            w
        )));
    }
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if ext == "pgm" {
        return save_pgm(path, pixels, h, w);
    }
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels.to_vec())
        .expect("buffer length checked");
    img.save(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {}", path.display(), e)))
}

/// 8-bit visualization of a density map, scaled by 255/max (lossy; the TED1
/// file is the canonical artifact).
pub fn density_to_u8(map: &Tensor4) -> Vec<u8> {
    let max = map.data().iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    map.data()
        .iter()
        .map(|&v| (v.max(0.0) * scale).round().min(255.0) as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn ted1_roundtrip_is_f32_exact() {
        let t = Tensor4::from_vec(1, 2, 2, 2, (0..8).map(|v| v as f64 * 0.37).collect()).unwrap();
        let mut buf = Vec::new();
        write_ted1(&mut buf, &t).unwrap();
        assert_eq!(&buf[0..4], b"TED1");
        let back = read_ted1(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn ted1_rejects_bad_magic() {
        let buf = b"NOPE\x01\x00\x00\x00".to_vec();
        assert!(read_ted1(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let pix: Vec<u8> = (0..12).map(|v| (v * 20) as u8).collect();
        save_pgm(&path, &pix, 3, 4).unwrap();
        let (back, h, w) = load_pgm(&path).unwrap();
        assert_eq!((h, w), (3, 4));
        assert_eq!(back, pix);
    }

    #[test]
    fn density_visualization_scales_by_max() {
        let t = Tensor4::from_vec(1, 1, 1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(density_to_u8(&t), vec![0, 128, 255]);
        let z = Tensor4::zeros(1, 1, 1, 3).unwrap();
        assert_eq!(density_to_u8(&z), vec![0, 0, 0]);
    }
}
