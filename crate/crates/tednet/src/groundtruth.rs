//! Ground-truth density maps from head annotations: each annotated point is
//! stamped with a fixed-bandwidth Gaussian kernel, renormalized after border
//! truncation so every person contributes exactly one unit of count.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{avgpool, Tensor4};
use crate::{Error, Result};

/// Head annotations for one image. Points are (x, y) in pixel coordinates,
/// x rightward and y downward, within `[0, w) x [0, h)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Annotation {
    pub image: String,
    /// (height, width)
    pub size: [usize; 2],
    pub points: Vec<[f64; 2]>,
}

impl Annotation {
    pub fn load(path: &Path) -> Result<Annotation> {
        let f = BufReader::new(File::open(path)?);
        serde_json::from_reader(f)
            .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(f, self)
            .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
    }
}

/// Renders the density map for `ann` as a 1x1xHxW tensor. Each point gets a
/// `ksize` x `ksize` Gaussian stamp (`sigma` in pixels) centered on the
/// rounded coordinate; the part of the stamp left inside the image is
/// rescaled to sum to exactly 1, so the map integrates to the head count.
pub fn render_density(ann: &Annotation, sigma: f64, ksize: usize) -> Result<Tensor4> {
    let [h, w] = ann.size;
    if h == 0 || w == 0 {
        return Err(Error::Data("annotation has empty size".into()));
    }
    if ksize % 2 == 0 || ksize == 0 {
        return Err(Error::Config(format!("kernel size {} must be odd", ksize)));
    }
    if sigma <= 0.0 {
        return Err(Error::Config(format!("sigma {} must be positive", sigma)));
    }
    let r = (ksize / 2) as i64;
    // the un-truncated stamp, computed once
    let mut stamp = vec![0.0f64; ksize * ksize];
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            stamp[((dy + r) as usize) * ksize + (dx + r) as usize] = v;
        }
    }

    let mut map = Tensor4::zeros(1, 1, h, w)?;
    for (i, p) in ann.points.iter().enumerate() {
        let [x, y] = *p;
        if !(0.0..w as f64).contains(&x) || !(0.0..h as f64).contains(&y) {
            return Err(Error::Data(format!(
                "point {} at ({}, {}) outside {}x{} image",
                i, x, y, w, h
            )));
        }
        let cx = (x.round() as i64).min(w as i64 - 1);
        let cy = (y.round() as i64).min(h as i64 - 1);
        // sum of the stamp weights that land inside the image
        let mut inside = 0.0;
        for dy in -r..=r {
            let py = cy + dy;
            if py < 0 || py >= h as i64 {
                continue;
            }
            for dx in -r..=r {
                let px = cx + dx;
                if px < 0 || px >= w as i64 {
                    continue;
                }
                inside += stamp[((dy + r) as usize) * ksize + (dx + r) as usize];
            }
        }
        let plane = map.plane_mut(0, 0);
        for dy in -r..=r {
            let py = cy + dy;
            if py < 0 || py >= h as i64 {
                continue;
            }
            for dx in -r..=r {
                let px = cx + dx;
                if px < 0 || px >= w as i64 {
                    continue;
                }
                plane[py as usize * w + px as usize] +=
                    stamp[((dy + r) as usize) * ksize + (dx + r) as usize] / inside;
            }
        }
    }
    Ok(map)
}

/// Average-pools a full-resolution density map down by `factor` for the
/// quarter-resolution supervision targets. Note the pooled map's sum is the
/// original sum divided by `factor^2`; counting on a pooled map must scale
/// accordingly.
pub fn downsample_gt(y: &Tensor4, factor: usize) -> Result<Tensor4> {
    avgpool(y, factor)
}
