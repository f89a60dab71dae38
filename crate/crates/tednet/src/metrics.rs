//! Evaluation metrics: counting error (MAE and root-mean-square error over
//! per-image counts) and density-map quality (PSNR, SSIM).

use crate::tensor::Tensor4;
use crate::{Error, Result};

/// Counting metrics over (predicted, true) count pairs. Returns
/// (MAE, MSE) where MSE is the root of the mean squared count error.
pub fn count_metrics(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let n = pairs.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for &(p, g) in pairs {
        let d = p - g;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

fn single_plane(t: &Tensor4, what: &str) -> Result<()> {
    if t.n() != 1 || t.c() != 1 {
        return Err(Error::Shape(format!(
            "{} expects a 1x1xHxW map, got {:?}",
            what,
            t.shape()
        )));
    }
    Ok(())
}

/// Scales both maps by 255 / max(y) and clips to [0, 255], mirroring how
/// density maps are visualized as 8-bit images (without quantizing).
fn scale_pair(z: &Tensor4, y: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let ymax = y.data().iter().cloned().fold(0.0f64, f64::max);
    let scale = if ymax > 0.0 {
        255.0 / ymax
    } else {
        let zmax = z.data().iter().cloned().fold(0.0f64, f64::max);
        if zmax > 0.0 {
            255.0 / zmax
        } else {
            1.0
        }
    };
    let clip = |v: f64| (v * scale).clamp(0.0, 255.0);
    (
        z.data().iter().map(|&v| clip(v)).collect(),
        y.data().iter().map(|&v| clip(v)).collect(),
    )
}

/// Peak signal-to-noise ratio between a predicted and true density map,
/// in dB with peak 255 after common scaling. Identical maps give +inf.
pub fn psnr(z: &Tensor4, y: &Tensor4) -> Result<f64> {
    single_plane(z, "psnr")?;
    if z.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "psnr shape mismatch {:?} vs {:?}",
            z.shape(),
            y.shape()
        )));
    }
    let (zs, ys) = scale_pair(z, y);
    let mut mse = 0.0;
    for (a, b) in zs.iter().zip(&ys) {
        let d = a - b;
        mse += d * d;
    }
    mse /= zs.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

const SSIM_WIN: usize = 11;

fn ssim_window() -> [f64; SSIM_WIN] {
    let sigma = 1.5;
    let r = (SSIM_WIN / 2) as i64;
    let mut w = [0.0; SSIM_WIN];
    let mut s = 0.0;
    for d in -r..=r {
        let v = (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
        w[(d + r) as usize] = v;
        s += v;
    }
    for v in w.iter_mut() {
        *v /= s;
    }
    w
}

/// Valid-window separable weighted filtering: horizontal then vertical.
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64; SSIM_WIN]) -> Vec<f64> {
    let ow = w - SSIM_WIN + 1;
    let oh = h - SSIM_WIN + 1;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for k in 0..SSIM_WIN {
                s += win[k] * img[y * w + x + k];
            }
            tmp[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for k in 0..SSIM_WIN {
                s += win[k] * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Mean structural similarity over all fully-interior 11x11 windows with a
/// Gaussian weighting (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 255
/// after the same common scaling as `psnr`.
pub fn ssim(z: &Tensor4, y: &Tensor4) -> Result<f64> {
    single_plane(z, "ssim")?;
    if z.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "ssim shape mismatch {:?} vs {:?}",
            z.shape(),
            y.shape()
        )));
    }
    let (h, w) = (z.h(), z.w());
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::Shape(format!(
            "ssim needs maps at least {0}x{0}, got {1}x{2}",
            SSIM_WIN, h, w
        )));
    }
    let (zs, ys) = scale_pair(z, y);
    let win = ssim_window();
    let zz: Vec<f64> = zs.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
    let zy: Vec<f64> = zs.iter().zip(&ys).map(|(a, b)| a * b).collect();
    let mu_z = filter_valid(&zs, h, w, &win);
    let mu_y = filter_valid(&ys, h, w, &win);
    let e_zz = filter_valid(&zz, h, w, &win);
    let e_yy = filter_valid(&yy, h, w, &win);
    let e_zy = filter_valid(&zy, h, w, &win);

    let c1 = (0.01 * 255.0) * (0.01 * 255.0);
    let c2 = (0.03 * 255.0) * (0.03 * 255.0);
    let mut total = 0.0;
    for i in 0..mu_z.len() {
        let (mz, my) = (mu_z[i], mu_y[i]);
        let var_z = e_zz[i] - mz * mz;
        let var_y = e_yy[i] - my * my;
        let cov = e_zy[i] - mz * my;
        total += ((2.0 * mz * my + c1) * (2.0 * cov + c2))
            / ((mz * mz + my * my + c1) * (var_z + var_y + c2));
    }
    Ok(total / mu_z.len() as f64)
}

/// Per-image evaluation results plus the aggregate summary.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub id: String,
    pub gt_count: f64,
    pub pred_count: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mae: f64,
    pub mse: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<EvalReport> {
        let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.pred_count, r.gt_count)).collect();
        let (mae, mse) = count_metrics(&pairs)?;
        // +inf PSNR (identical maps) would poison the mean; average the rest
        let finite: Vec<f64> = rows.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect();
        let mean_psnr = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
        Ok(EvalReport {
            rows,
            mae,
            mse,
            mean_psnr,
            mean_ssim,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,gt_count,pred_count,psnr,ssim\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                r.id, r.gt_count, r.pred_count, r.psnr, r.ssim
            ));
        }
        s.push_str(&format!(
            "summary,mae={:.6},mse={:.6},psnr={:.6},ssim={:.6}\n",
            self.mae, self.mse, self.mean_psnr, self.mean_ssim
        ));
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<20} {:>10} {:>10} {:>8} {:>7}\n",
            "id", "gt", "pred", "psnr", "ssim"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<20} {:>10.2} {:>10.2} {:>8.2} {:>7.4}\n",
                r.id, r.gt_count, r.pred_count, r.psnr, r.ssim
            ));
        }
        s.push_str(&format!(
            "MAE {:.3}  MSE {:.3}  PSNR {:.2}  SSIM {:.4}\n",
            self.mae, self.mse, self.mean_psnr, self.mean_ssim
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(seed: u64, h: usize, w: usize) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor4::from_vec(1, 1, h, w, data).unwrap()
    }

    #[test]
    fn counting_hand_case() {
        // predictions [10,20] vs truth [12,16]: MAE 3, MSE sqrt(10)
        let (mae, mse) = count_metrics(&[(10.0, 12.0), (20.0, 16.0)]).unwrap();
        assert!((mae - 3.0).abs() < 1e-12);
        assert!((mse - 10.0f64.sqrt()).abs() < 1e-12);
        assert!(count_metrics(&[]).is_err());
    }

    #[test]
    fn mae_never_exceeds_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let pairs: Vec<(f64, f64)> = (0..10)
                .map(|_| (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)))
                .collect();
            let (mae, mse) = count_metrics(&pairs).unwrap();
            assert!(mae <= mse + 1e-12);
        }
    }

    #[test]
    fn psnr_identical_and_known_value() {
        let y = rand_map(2, 16, 16);
        assert_eq!(psnr(&y, &y).unwrap(), f64::INFINITY);
        // constant offset: after scaling by 255/max(y), mse is known
        let ymax = y.data().iter().cloned().fold(0.0f64, f64::max);
        let mut z = y.clone();
        let delta = 0.01;
        for v in z.data_mut().iter_mut() {
            *v = (*v - delta).max(0.0);
        }
        let got = psnr(&z, &y).unwrap();
        // independent recomputation
        let scale = 255.0 / ymax;
        let mse: f64 = z
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| {
                let d = (a * scale).clamp(0.0, 255.0) - (b * scale).clamp(0.0, 255.0);
                d * d
            })
            .sum::<f64>()
            / 256.0;
        let want = 10.0 * (255.0 * 255.0 / mse).log10();
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_identical_and_bounds() {
        let y = rand_map(3, 20, 24);
        let s = ssim(&y, &y).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let z = rand_map(4, 20, 24);
        let s2 = ssim(&z, &y).unwrap();
        assert!(s2 < 1.0 && s2 > -1.0);
    }

    /// Naive dense-window SSIM oracle to pin the separable implementation.
    fn ssim_naive(z: &Tensor4, y: &Tensor4) -> f64 {
        let (h, w) = (z.h(), z.w());
        let ymax = y.data().iter().cloned().fold(0.0f64, f64::max);
        let scale = 255.0 / ymax;
        let zs: Vec<f64> = z.data().iter().map(|&v| (v * scale).clamp(0.0, 255.0)).collect();
        let ys: Vec<f64> = y.data().iter().map(|&v| (v * scale).clamp(0.0, 255.0)).collect();
        let win1 = ssim_window();
        let mut win2 = vec![0.0; SSIM_WIN * SSIM_WIN];
        for i in 0..SSIM_WIN {
            for j in 0..SSIM_WIN {
                win2[i * SSIM_WIN + j] = win1[i] * win1[j];
            }
        }
        let c1 = (0.01 * 255.0f64).powi(2);
        let c2 = (0.03 * 255.0f64).powi(2);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=(h - SSIM_WIN) {
            for x0 in 0..=(w - SSIM_WIN) {
                let (mut mz, mut my, mut ezz, mut eyy, mut ezy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WIN {
                    for j in 0..SSIM_WIN {
                        let wgt = win2[i * SSIM_WIN + j];
                        let a = zs[(y0 + i) * w + x0 + j];
                        let b = ys[(y0 + i) * w + x0 + j];
                        mz += wgt * a;
                        my += wgt * b;
                        ezz += wgt * a * a;
                        eyy += wgt * b * b;
                        ezy += wgt * a * b;
                    }
                }
                let (vz, vy, cov) = (ezz - mz * mz, eyy - my * my, ezy - mz * my);
                total += ((2.0 * mz * my + c1) * (2.0 * cov + c2))
                    / ((mz * mz + my * my + c1) * (vz + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_naive_oracle() {
        let z = rand_map(5, 18, 22);
        let y = rand_map(6, 18, 22);
        let fast = ssim(&z, &y).unwrap();
        let slow = ssim_naive(&z, &y);
        assert!((fast - slow).abs() < 1e-10, "{} vs {}", fast, slow);
    }

    #[test]
    fn ssim_rejects_small_maps() {
        let z = rand_map(7, 8, 8);
        assert!(ssim(&z, &z).is_err());
    }

    #[test]
    fn report_aggregation_skips_infinite_psnr() {
        let rows = vec![
            EvalRow {
                id: "a".into(),
                gt_count: 10.0,
                pred_count: 12.0,
                psnr: f64::INFINITY,
                ssim: 1.0,
            },
            EvalRow {
                id: "b".into(),
                gt_count: 20.0,
                pred_count: 16.0,
                psnr: 30.0,
                ssim: 0.8,
            },
        ];
        let rep = EvalReport::from_rows(rows).unwrap();
        assert!((rep.mae - 3.0).abs() < 1e-12);
        assert!((rep.mean_psnr - 30.0).abs() < 1e-12);
        assert!((rep.mean_ssim - 0.9).abs() < 1e-12);
        let csv = rep.to_csv();
        assert!(csv.starts_with("id,gt_count,pred_count,psnr,ssim\n"));
        assert!(csv.contains("summary,"));
    }
}
