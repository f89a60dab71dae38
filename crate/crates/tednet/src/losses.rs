//! Training losses: pixel-wise MSE, the spatial abstraction loss (a pyramid
//! of max-pooled MSE terms), the spatial correlation loss (one minus the
//! normalized cross correlation), their combination, and the distributed
//! supervision wrapper over all four network heads.

use std::str::FromStr;

use crate::model::{ForwardOutputs, HeadGrads};
use crate::tensor::{maxpool2, maxpool2_backward, Tensor4};
use crate::{Error, Result};

/// Which loss drives training (ablations switch this).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Sal,
    SalScl,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "sal" => Ok(LossKind::Sal),
            "sal+scl" => Ok(LossKind::SalScl),
            other => Err(Error::Config(format!(
                "unknown loss '{}', expected mse|sal|sal+scl",
                other
            ))),
        }
    }
}

fn same_shape(z: &Tensor4, y: &Tensor4) -> Result<()> {
    if z.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "loss shape mismatch: {:?} vs {:?}",
            z.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// Mean squared error and its gradient with respect to `z`.
pub fn mse_loss(z: &Tensor4, y: &Tensor4) -> Result<(f64, Tensor4)> {
    same_shape(z, y)?;
    let n = z.len() as f64;
    let (zn, zc, zh, zw) = z.shape();
    let mut grad = Tensor4::zeros(zn, zc, zh, zw)?;
    let mut loss = 0.0;
    for ((g, &a), &b) in grad.data_mut().iter_mut().zip(z.data()).zip(y.data()) {
        let d = a - b;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Spatial abstraction loss: the sum over abstraction levels k = 0..=levels
/// of the MSE between the k-fold max-pooled prediction and target. Level 0
/// is plain MSE; each further level halves the resolution with 2x2/stride-2
/// max pooling. The gradient routes each pooled term back through the
/// winning elements of the prediction's pooling chain.
pub fn sal_loss(z: &Tensor4, y: &Tensor4, levels: usize) -> Result<(f64, Tensor4)> {
    same_shape(z, y)?;
    let div = 1usize << levels;
    if z.h() % div != 0 || z.w() % div != 0 {
        return Err(Error::Shape(format!(
            "sal with {} levels needs spatial dims divisible by {}, got {}x{}",
            levels,
            div,
            z.h(),
            z.w()
        )));
    }
    let (zn, zc, zh, zw) = z.shape();
    let mut total = 0.0;
    let mut grad = Tensor4::zeros(zn, zc, zh, zw)?;

    let mut zk = z.clone();
    let mut yk = y.clone();
    // (winner indices, input shape) per pooling step, for unrouting
    let mut chain: Vec<(Vec<usize>, (usize, usize, usize, usize))> = Vec::new();
    for k in 0..=levels {
        let (lk, gk) = mse_loss(&zk, &yk)?;
        total += lk;
        // walk the level-k gradient back to full resolution
        let mut g = gk;
        for (idx, shape) in chain.iter().rev() {
            g = maxpool2_backward(&g, idx, *shape)?;
        }
        grad.add_assign(&g)?;
        if k < levels {
            let shape = zk.shape();
            let (zp, zi) = maxpool2(&zk)?;
            let (yp, _) = maxpool2(&yk)?;
            chain.push((zi, shape));
            zk = zp;
            yk = yp;
        }
    }
    Ok((total, grad))
}

/// Spatial correlation loss: 1 - <Z,Y> / (|Z||Y|) (uncentered cosine). When
/// either map has (near-)zero norm the correlation is undefined; the loss is
/// taken as 0 with zero gradient so all-empty scenes do not blow up.
pub fn scl_loss(z: &Tensor4, y: &Tensor4) -> Result<(f64, Tensor4)> {
    same_shape(z, y)?;
    let (zn, zc, zh, zw) = z.shape();
    let mut dot = 0.0;
    let mut zz = 0.0;
    let mut yy = 0.0;
    for (&a, &b) in z.data().iter().zip(y.data()) {
        dot += a * b;
        zz += a * a;
        yy += b * b;
    }
    let denom = zz.sqrt() * yy.sqrt();
    let mut grad = Tensor4::zeros(zn, zc, zh, zw)?;
    if denom < 1e-12 {
        return Ok((0.0, grad));
    }
    let c = dot / denom;
    // d(1-c)/dz_i = -(y_i / denom - c * z_i / zz)
    for ((g, &a), &b) in grad.data_mut().iter_mut().zip(z.data()).zip(y.data()) {
        *g = -(b / denom - c * a / zz);
    }
    Ok((1.0 - c, grad))
}

/// One head's contribution under the chosen loss. Returns
/// (abstraction term, correlation term, gradient of the weighted sum).
/// For `Mse` the abstraction slot holds the plain MSE and the correlation
/// term is zero.
pub fn combinatorial_loss(
    z: &Tensor4,
    y: &Tensor4,
    kind: LossKind,
    levels: usize,
    lambda: f64,
) -> Result<(f64, f64, Tensor4)> {
    match kind {
        LossKind::Mse => {
            let (l, g) = mse_loss(z, y)?;
            Ok((l, 0.0, g))
        }
        LossKind::Sal => {
            let (l, g) = sal_loss(z, y, levels)?;
            Ok((l, 0.0, g))
        }
        LossKind::SalScl => {
            let (ls, mut g) = sal_loss(z, y, levels)?;
            let (lc, gc) = scl_loss(z, y)?;
            let mut gc = gc;
            gc.scale(lambda);
            g.add_assign(&gc)?;
            Ok((ls, lc, g))
        }
    }
}

/// Loss terms of one training example, broken out per head.
#[derive(Clone, Debug)]
pub struct HeadTerm {
    pub name: &'static str,
    pub sal: f64,
    pub scl: f64,
}

#[derive(Clone, Debug)]
pub struct LossReport {
    /// The scalar actually optimized: the sum over supervised heads of
    /// (abstraction + lambda * correlation).
    pub total: f64,
    pub heads: Vec<HeadTerm>,
}

/// Applies the loss to every supervised output and sums the per-head terms
/// with uniform (unit) weights. Intermediate heads compare at quarter
/// resolution, the final head at full resolution. With `single_supervision`
/// only the full-resolution head contributes.
pub fn distributed_loss(
    out: &ForwardOutputs,
    y_full: &Tensor4,
    y_quarter: &Tensor4,
    kind: LossKind,
    levels: usize,
    lambda: f64,
    single_supervision: bool,
) -> Result<(LossReport, HeadGrads)> {
    let mut taps: Vec<(&'static str, &Tensor4, &Tensor4)> = Vec::new();
    if !single_supervision {
        if let Some(z) = &out.z2d {
            taps.push(("z2d", z, y_quarter));
        }
        if let Some(z) = &out.z3d {
            taps.push(("z3d", z, y_quarter));
        }
        if let Some(z) = &out.z4d {
            taps.push(("z4d", z, y_quarter));
        }
    }
    taps.push(("z", &out.z, y_full));

    let mut report = LossReport {
        total: 0.0,
        heads: Vec::with_capacity(taps.len()),
    };
    let mut hg = HeadGrads::default();
    for (name, z, y) in taps {
        let (sal, scl, g) = combinatorial_loss(z, y, kind, levels, lambda)?;
        report.total += sal + lambda * scl;
        report.heads.push(HeadTerm { name, sal, scl });
        let slot = match name {
            "z2d" => &mut hg.g2d,
            "z3d" => &mut hg.g3d,
            "z4d" => &mut hg.g4d,
            _ => &mut hg.g,
        };
        *slot = Some(g);
    }
    if !report.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {}",
            report.total
        )));
    }
    Ok((report, hg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(seed: u64, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor4::from_vec(1, c, h, w, data).unwrap()
    }

    /// Central-difference check of an analytic gradient.
    fn fd_check<F: Fn(&Tensor4) -> f64>(z: &Tensor4, grad: &Tensor4, f: F, tol: f64) {
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp.data_mut()[i] += eps;
            let mut zm = z.clone();
            zm.data_mut()[i] -= eps;
            let num = (f(&zp) - f(&zm)) / (2.0 * eps);
            let ana = grad.data()[i];
            let denom = num.abs().max(ana.abs()).max(1e-8);
            worst = worst.max((num - ana).abs() / denom);
        }
        assert!(worst < tol, "fd mismatch: {}", worst);
    }

    #[test]
    fn mse_value_and_gradient() {
        let z = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = Tensor4::from_vec(1, 1, 2, 2, vec![0.0, 2.0, 5.0, 4.0]).unwrap();
        let (l, g) = mse_loss(&z, &y).unwrap();
        assert!((l - (1.0 + 4.0) / 4.0).abs() < 1e-12);
        assert_eq!(g.data(), &[0.5, 0.0, -1.0, 0.0]);
    }

    #[test]
    fn mse_gradient_fd() {
        let z = rand_t(1, 2, 4, 4, -1.0, 1.0);
        let y = rand_t(2, 2, 4, 4, -1.0, 1.0);
        let (_, g) = mse_loss(&z, &y).unwrap();
        fd_check(&z, &g, |t| mse_loss(t, &y).unwrap().0, 1e-5);
    }

    #[test]
    fn sal_zero_levels_is_mse() {
        let z = rand_t(3, 1, 4, 4, 0.0, 1.0);
        let y = rand_t(4, 1, 4, 4, 0.0, 1.0);
        let (ls, gs) = sal_loss(&z, &y, 0).unwrap();
        let (lm, gm) = mse_loss(&z, &y).unwrap();
        assert_eq!(ls, lm);
        assert_eq!(gs.data(), gm.data());
    }

    #[test]
    fn sal_one_level_hand_case() {
        // 4x4 map with distinct values so pooling winners are unique
        let z = Tensor4::from_vec(
            1,
            1,
            4,
            4,
            vec![
                1.0, 2.0, 5.0, 6.0, //
                3.0, 4.0, 7.0, 8.0, //
                9.0, 10.0, 13.0, 14.0, //
                11.0, 12.0, 15.0, 16.0,
            ],
        )
        .unwrap();
        let y = Tensor4::from_vec(1, 1, 4, 4, vec![0.0; 16]).unwrap();
        let (l, g) = sal_loss(&z, &y, 1).unwrap();
        // level 0: mean of squares = (sum 1..16 of k^2)/16 = 1496/16
        // level 1: pooled z = [4,8,12,16], pooled y = 0 -> (16+64+144+256)/4
        let want = 1496.0 / 16.0 + 480.0 / 4.0;
        assert!((l - want).abs() < 1e-9, "{} vs {}", l, want);
        // winner at (1,1)=4 receives the level-1 term: 2*4/4 = 2 extra
        let g00 = g.get(0, 0, 0, 0);
        let g11 = g.get(0, 0, 1, 1);
        assert!((g00 - 2.0 * 1.0 / 16.0).abs() < 1e-12);
        assert!((g11 - (2.0 * 4.0 / 16.0 + 2.0 * 4.0 / 4.0)).abs() < 1e-12);
    }

    #[test]
    fn sal_gradient_fd() {
        // continuous random values: pooling ties have probability zero
        let z = rand_t(5, 1, 8, 8, 0.0, 1.0);
        let y = rand_t(6, 1, 8, 8, 0.0, 1.0);
        let (_, g) = sal_loss(&z, &y, 2).unwrap();
        fd_check(&z, &g, |t| sal_loss(t, &y, 2).unwrap().0, 1e-4);
    }

    #[test]
    fn sal_rejects_nondivisible() {
        let z = rand_t(7, 1, 6, 6, 0.0, 1.0);
        let y = rand_t(8, 1, 6, 6, 0.0, 1.0);
        assert!(sal_loss(&z, &y, 2).is_err());
    }

    #[test]
    fn scl_perfect_correlation_and_scale_invariance() {
        let y = rand_t(9, 1, 4, 4, 0.1, 1.0);
        let mut z = y.clone();
        z.scale(3.7);
        let (l, _) = scl_loss(&z, &y).unwrap();
        assert!(l.abs() < 1e-12, "scaled copy should correlate perfectly: {}", l);
        // and loss is invariant to scaling z further
        let z2 = {
            let mut t = z.clone();
            t.scale(0.01);
            t
        };
        let (l2, _) = scl_loss(&z2, &y).unwrap();
        assert!((l - l2).abs() < 1e-12);
    }

    #[test]
    fn scl_gradient_fd() {
        let z = rand_t(10, 1, 4, 4, 0.1, 1.0);
        let y = rand_t(11, 1, 4, 4, 0.1, 1.0);
        let (_, g) = scl_loss(&z, &y).unwrap();
        fd_check(&z, &g, |t| scl_loss(t, &y).unwrap().0, 1e-5);
    }

    #[test]
    fn scl_degenerate_empty_maps() {
        let z = Tensor4::zeros(1, 1, 4, 4).unwrap();
        let y = rand_t(12, 1, 4, 4, 0.0, 1.0);
        let (l, g) = scl_loss(&z, &y).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.max_abs(), 0.0);
        let (l2, _) = scl_loss(&y, &Tensor4::zeros(1, 1, 4, 4).unwrap()).unwrap();
        assert_eq!(l2, 0.0);
    }

    #[test]
    fn combinatorial_lambda_weighting() {
        let z = rand_t(13, 1, 8, 8, 0.0, 1.0);
        let y = rand_t(14, 1, 8, 8, 0.0, 1.0);
        let lambda = 0.5;
        let (sal, scl, g) = combinatorial_loss(&z, &y, LossKind::SalScl, 2, lambda).unwrap();
        let total = sal + lambda * scl;
        fd_check(&z, &g, |t| {
            let (s, _) = sal_loss(t, &y, 2).unwrap();
            let (c, _) = scl_loss(t, &y).unwrap();
            s + lambda * c
        }, 1e-4);
        assert!(total > 0.0);
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("mse".parse::<LossKind>().unwrap(), LossKind::Mse);
        assert_eq!("sal".parse::<LossKind>().unwrap(), LossKind::Sal);
        assert_eq!("sal+scl".parse::<LossKind>().unwrap(), LossKind::SalScl);
        assert!("foo".parse::<LossKind>().is_err());
    }
}
