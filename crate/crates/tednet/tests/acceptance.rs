//! End-to-end acceptance suite. Each test prints one pass/fail line; run
//! with `cargo test --test acceptance -- --nocapture` to see them. The toy
//! training runs behind criteria 6 and 7 are expensive (2000 optimizer
//! steps each) and are cached under `target/toy-cache/` keyed by
//! configuration and seed; the runs themselves are fully deterministic.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tednet::gradcheck::run_all;
use tednet::groundtruth::{downsample_gt, render_density, Annotation};
use tednet::losses::{combinatorial_loss, distributed_loss, sal_loss, scl_loss, LossKind};
use tednet::metrics::{count_metrics, psnr, ssim};
use tednet::model::{HeadGrads, TedNet, TrellisConfig};
use tednet::tensor::{avgpool, Tensor4};
use tednet::training::{
    evaluate, mean_count_baseline_mae, split_train_eval, synth_dataset, train, Sample,
    TrainConfig,
};

fn verdict(n: usize, ok: bool, detail: &str) {
    println!(
        "criterion {:>2}: {} - {}",
        n,
        if ok { "PASS" } else { "FAIL" },
        detail
    );
    assert!(ok, "criterion {} failed: {}", n, detail);
}

// ---------------------------------------------------------------------------
// shared toy-training harness (criteria 6 and 7)

#[derive(Clone, Copy, Debug)]
struct RunResult {
    mae: f64,
    psnr: f64,
    baseline: f64,
    secs: f64,
}

fn toy_data() -> &'static (Vec<Sample>, Vec<Sample>) {
    static DATA: OnceLock<(Vec<Sample>, Vec<Sample>)> = OnceLock::new();
    DATA.get_or_init(|| {
        let samples = synth_dataset(7, 200, 128, 128, 5, 50, 4.0, 15).expect("synth");
        split_train_eval(samples)
    })
}

fn cache_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../target/toy-cache");
    std::fs::create_dir_all(&dir).expect("cache dir");
    dir
}

fn run_toy(
    tag: &str,
    seed: u64,
    loss: LossKind,
    single_path: bool,
    single_supervision: bool,
) -> RunResult {
    let cache = cache_dir().join(format!("{}_{}.csv", tag, seed));
    if let Ok(text) = std::fs::read_to_string(&cache) {
        let v: Vec<f64> = text
            .trim()
            .split(',')
            .filter_map(|s| s.parse().ok())
            .collect();
        if v.len() == 4 {
            return RunResult {
                mae: v[0],
                psnr: v[1],
                baseline: v[2],
                secs: v[3],
            };
        }
    }
    let (train_set, eval_set) = toy_data();
    let cfg = TrellisConfig {
        base_channels: 8,
        single_path,
        ..TrellisConfig::default()
    };
    let mut model = TedNet::xavier_init(cfg, seed).expect("init");
    let tc = TrainConfig {
        seed,
        steps: 2000,
        batch: 4,
        lr0: 1e-3,
        loss,
        crop: 64,
        single_supervision,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let mut log = Vec::new();
    train(&mut model, train_set, &tc, &mut log).expect("train");
    let secs = started.elapsed().as_secs_f64();
    let report = evaluate(&model, eval_set).expect("eval");
    let baseline = mean_count_baseline_mae(train_set, eval_set).expect("baseline");
    let result = RunResult {
        mae: report.mae,
        psnr: report.mean_psnr,
        baseline,
        secs,
    };
    std::fs::write(
        &cache,
        format!(
            "{},{},{},{}\n",
            result.mae, result.psnr, result.baseline, result.secs
        ),
    )
    .expect("cache write");
    result
}

fn toy_runs() -> &'static (Vec<RunResult>, Vec<RunResult>) {
    static RUNS: OnceLock<(Vec<RunResult>, Vec<RunResult>)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let comb: Vec<RunResult> = (0..3)
            .map(|s| run_toy("comb", s, LossKind::SalScl, false, false))
            .collect();
        let mse: Vec<RunResult> = (0..3)
            .map(|s| run_toy("mse", s, LossKind::Mse, false, false))
            .collect();
        (comb, mse)
    })
}

/// Reproduces the five-configuration ablation reported in the README (not a
/// pass/fail criterion on its own; criterion 7 covers the directional
/// claim). Run explicitly: `cargo test --test acceptance ablation -- --ignored --nocapture`.
#[test]
#[ignore]
fn ablation_echo_table() {
    let configs: [(&str, &str, LossKind, bool, bool); 5] = [
        ("single_path", "single-path decoder / single supervision / MSE", LossKind::Mse, true, true),
        ("single_sup", "trellis decoder / single supervision / MSE", LossKind::Mse, false, true),
        ("mse", "trellis decoder / distributed supervision / MSE", LossKind::Mse, false, false),
        ("sal", "trellis decoder / distributed supervision / SAL", LossKind::Sal, false, false),
        ("comb", "trellis decoder / distributed supervision / SAL+SCL", LossKind::SalScl, false, false),
    ];
    println!("| # | configuration | MAE | PSNR |");
    println!("|---|---------------|-----|------|");
    for (i, (tag, desc, loss, sp, ss)) in configs.iter().enumerate() {
        let r = run_toy(tag, 0, *loss, *sp, *ss);
        println!("| {} | {} | {:.2} | {:.2} |", i + 1, desc, r.mae, r.psnr);
    }
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_gradient_oracle_suite() {
    let started = Instant::now();
    let reports = run_all(0, false).expect("gradcheck");
    let secs = started.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .map(|r| r.rel_err)
        .fold(0.0f64, f64::max);
    let all_ok = reports.iter().all(|r| r.passed());
    verdict(
        1,
        all_ok && worst < 1e-4 && secs < 60.0,
        &format!(
            "{} components, worst rel err {:.3e}, {:.1} s",
            reports.len(),
            worst,
            secs
        ),
    );
}

#[test]
fn criterion_02_shape_and_topology_contract() {
    let cfg = TrellisConfig {
        base_channels: 4,
        ..TrellisConfig::default()
    };
    let net = TedNet::xavier_init(cfg, 1).expect("init");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ok = true;
    let mut detail = String::new();
    for size in [64usize, 128, 192, 256] {
        let data = (0..3 * size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Tensor4::from_vec(1, 3, size, size, data).unwrap();
        let (out, _) = net.forward(&img).expect("forward");
        let q = size / 4;
        for (name, z) in [
            ("z2d", out.z2d.as_ref().unwrap()),
            ("z3d", out.z3d.as_ref().unwrap()),
            ("z4d", out.z4d.as_ref().unwrap()),
        ] {
            if z.shape() != (1, 1, q, q) {
                ok = false;
                detail = format!("{} at {} is {:?}", name, size, z.shape());
            }
        }
        if out.z.shape() != (1, 1, size, size) {
            ok = false;
            detail = format!("z at {} is {:?}", size, out.z.shape());
        }
    }
    // every decoding cell's right input carries twice the left channels
    let pairs = net.cell_channels();
    if pairs.len() != 6 {
        ok = false;
        detail = format!("expected 6 cells, got {}", pairs.len());
    }
    for (key, left, right) in &pairs {
        if *right != 2 * *left {
            ok = false;
            detail = format!("cell {} has left {} right {}", key, left, right);
        }
    }
    if detail.is_empty() {
        detail = "sizes 64..256 at 1/4 + full res; right = 2 x left in all 6 cells".into();
    }
    verdict(2, ok, &detail);
}

#[test]
fn criterion_03_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let y = Tensor4::from_vec(1, 1, 64, 64, data).unwrap();
    let mut ok = true;
    let mut detail = String::new();

    for alpha in [0.5, 1.0, 3.0] {
        let mut z = y.clone();
        z.scale(alpha);
        let (l, _) = scl_loss(&z, &y).unwrap();
        if l.abs() > 1e-12 {
            ok = false;
            detail = format!("scl({}Y, Y) = {:e}", alpha, l);
        }
    }
    let (sal_self, _) = sal_loss(&y, &y, 3).unwrap();
    if sal_self != 0.0 {
        ok = false;
        detail = format!("sal(Y, Y) = {:e}", sal_self);
    }

    // the combinatorial total is exactly L_SA + lambda * L_SC
    let zdata: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let z = Tensor4::from_vec(1, 1, 64, 64, zdata).unwrap();
    let lambda = 0.7;
    let (sal, scl, _) = combinatorial_loss(&z, &y, LossKind::SalScl, 3, lambda).unwrap();
    let (sal_alone, _) = sal_loss(&z, &y, 3).unwrap();
    let (scl_alone, _) = scl_loss(&z, &y).unwrap();
    if sal != sal_alone || scl != scl_alone {
        ok = false;
        detail = "combinatorial terms differ from standalone losses".into();
    }

    // distributed total is exactly the sum of the four head losses
    let cfg = TrellisConfig {
        base_channels: 4,
        ..TrellisConfig::default()
    };
    let net = TedNet::xavier_init(cfg, 3).unwrap();
    let img = {
        let d = (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor4::from_vec(1, 3, 64, 64, d).unwrap()
    };
    let (out, _) = net.forward(&img).unwrap();
    let yq = avgpool(&y, 4).unwrap();
    let (report, _) =
        distributed_loss(&out, &y, &yq, LossKind::SalScl, 3, lambda, false).unwrap();
    let mut recomputed = 0.0;
    for (z, target) in [
        (out.z2d.as_ref().unwrap(), &yq),
        (out.z3d.as_ref().unwrap(), &yq),
        (out.z4d.as_ref().unwrap(), &yq),
        (&out.z, &y),
    ] {
        let (s, c, _) = combinatorial_loss(z, target, LossKind::SalScl, 3, lambda).unwrap();
        recomputed += s + lambda * c;
    }
    if report.total != recomputed || report.heads.len() != 4 {
        ok = false;
        detail = format!("distributed {} != head sum {}", report.total, recomputed);
    }

    if detail.is_empty() {
        detail = "SCL(aY,Y)=0, SAL(Y,Y)=0, L=L_SA+lambda*L_SC, distributed = head sum".into();
    }
    verdict(3, ok, &detail);
}

#[test]
fn criterion_04_gradient_additivity() {
    let cfg = TrellisConfig {
        base_channels: 2,
        sal_levels: 1,
        ..TrellisConfig::default()
    };
    let net = TedNet::xavier_init(cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let img = {
        let d = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor4::from_vec(1, 3, 16, 16, d).unwrap()
    };
    let (out, cache) = net.forward(&img).unwrap();
    let mut coef = |t: &Tensor4| {
        let (n, c, h, w) = t.shape();
        let d = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor4::from_vec(n, c, h, w, d).unwrap()
    };
    let g2 = coef(out.z2d.as_ref().unwrap());
    let g3 = coef(out.z3d.as_ref().unwrap());
    let g4 = coef(out.z4d.as_ref().unwrap());
    let gz = coef(&out.z);
    let all = net
        .backward(
            &cache,
            &HeadGrads {
                g2d: Some(g2.clone()),
                g3d: Some(g3.clone()),
                g4d: Some(g4.clone()),
                g: Some(gz.clone()),
            },
        )
        .unwrap();
    let mut summed = tednet::model::GradMap::default();
    for hg in [
        HeadGrads { g2d: Some(g2), ..Default::default() },
        HeadGrads { g3d: Some(g3), ..Default::default() },
        HeadGrads { g4d: Some(g4), ..Default::default() },
        HeadGrads { g: Some(gz), ..Default::default() },
    ] {
        summed.add(&net.backward(&cache, &hg).unwrap()).unwrap();
    }
    let fa = net.flatten_grads(&all);
    let fs = net.flatten_grads(&summed);
    let scale = fa.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    let worst = fa
        .iter()
        .zip(&fs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max)
        / scale;
    verdict(
        4,
        worst < 1e-10,
        &format!("four-head grads vs summed single-head grads: rel diff {:.2e}", worst),
    );
}

#[test]
fn criterion_05_count_conservation() {
    // points on every border and corner plus interior ones
    let points = vec![
        [0.0, 0.0],
        [63.0, 0.0],
        [0.0, 63.0],
        [63.0, 63.0],
        [31.5, 0.0],
        [0.0, 31.5],
        [63.0, 32.0],
        [30.0, 63.0],
        [20.0, 40.0],
        [45.7, 12.3],
    ];
    let n = points.len() as f64;
    let ann = Annotation {
        image: "t.png".into(),
        size: [64, 64],
        points,
    };
    let map = render_density(&ann, 4.0, 15).unwrap();
    let integral_err = (map.sum() - n).abs();
    let q = downsample_gt(&map, 4).unwrap();
    let pool_err = (q.sum() - map.sum() / 16.0).abs();
    verdict(
        5,
        integral_err < 1e-6 && pool_err < 1e-9,
        &format!(
            "integral err {:.2e} (border stamps renormalized), avgpool/16 err {:.2e}",
            integral_err, pool_err
        ),
    );
}

#[test]
fn criterion_06_toy_training_beats_baseline() {
    let (comb, _) = toy_runs();
    let r = comb[0];
    verdict(
        6,
        r.mae < r.baseline && r.secs < 1800.0,
        &format!(
            "held-out MAE {:.2} vs mean-count baseline {:.2}; {:.0} s of training",
            r.mae, r.baseline, r.secs
        ),
    );
}

#[test]
fn criterion_07_ablation_echo_combinatorial_vs_mse() {
    let (comb, mse) = toy_runs();
    let mean = |rs: &[RunResult]| rs.iter().map(|r| r.psnr).sum::<f64>() / rs.len() as f64;
    let (pc, pm) = (mean(comb), mean(mse));
    verdict(
        7,
        pc >= pm,
        &format!(
            "mean test PSNR over 3 seeds: combinatorial {:.2} dB vs mse {:.2} dB",
            pc, pm
        ),
    );
}

#[test]
fn criterion_08_metrics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let d1: Vec<f64> = (0..1024).map(|_| rng.gen_range(0.0..1.0)).collect();
        let d2: Vec<f64> = (0..1024).map(|_| rng.gen_range(0.0..1.0)).collect();
        let z = Tensor4::from_vec(1, 1, 32, 32, d1).unwrap();
        let y = Tensor4::from_vec(1, 1, 32, 32, d2).unwrap();
        worst = worst.max((psnr(&z, &y).unwrap() - psnr_naive(&z, &y)).abs());
        worst = worst.max((ssim(&z, &y).unwrap() - ssim_naive(&z, &y)).abs());
    }
    let (mae, mse) = count_metrics(&[(10.0, 12.0), (20.0, 16.0)]).unwrap();
    let hand_ok = mae == 3.0 && mse == 10.0f64.sqrt();
    verdict(
        8,
        worst < 1e-9 && hand_ok,
        &format!(
            "naive-reference deviation {:.2e}; [10,20] vs [12,16] -> MAE {} MSE {:.6}",
            worst, mae, mse
        ),
    );
}

#[test]
fn criterion_09_parameter_count() {
    let net = TedNet::zeros(TrellisConfig::default()).unwrap();
    let n = net.param_count();
    println!("default configuration parameter count: {}", n);
    verdict(
        9,
        (500_000..=5_000_000).contains(&n),
        &format!("{} parameters in [0.5M, 5M]", n),
    );
}

#[test]
fn criterion_10_determinism() {
    let data = synth_dataset(10, 8, 64, 64, 2, 8, 4.0, 15).unwrap();
    let tc = TrainConfig {
        seed: 10,
        steps: 12,
        batch: 2,
        crop: 32,
        sal_levels: 1,
        log_every: 3,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let cfg = TrellisConfig {
            base_channels: 4,
            ..TrellisConfig::default()
        };
        let mut model = TedNet::xavier_init(cfg, 10).unwrap();
        let mut log = Vec::new();
        train(&mut model, &data, &tc, &mut log).unwrap();
        let path = dir.path().join(name);
        model.save_checkpoint(&path).unwrap();
        (std::fs::read(&path).unwrap(), log)
    };
    let (ckpt_a, log_a) = run("a.tedc");
    let (ckpt_b, log_b) = run("b.tedc");
    verdict(
        10,
        ckpt_a == ckpt_b && log_a == log_b,
        &format!(
            "identical seeds: checkpoints ({} bytes) and logs ({} bytes) byte-identical",
            ckpt_a.len(),
            log_a.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// naive reference implementations for criterion 8

fn scale_pair_naive(z: &Tensor4, y: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let ymax = y.data().iter().cloned().fold(0.0f64, f64::max);
    let scale = 255.0 / ymax;
    (
        z.data().iter().map(|&v| (v * scale).clamp(0.0, 255.0)).collect(),
        y.data().iter().map(|&v| (v * scale).clamp(0.0, 255.0)).collect(),
    )
}

fn psnr_naive(z: &Tensor4, y: &Tensor4) -> f64 {
    let (zs, ys) = scale_pair_naive(z, y);
    let mut mse = 0.0;
    for i in 0..zs.len() {
        mse += (zs[i] - ys[i]) * (zs[i] - ys[i]);
    }
    mse /= zs.len() as f64;
    10.0 * (255.0 * 255.0 / mse).log10()
}

fn ssim_naive(z: &Tensor4, y: &Tensor4) -> f64 {
    const WIN: usize = 11;
    let (h, w) = (z.h(), z.w());
    let (zs, ys) = scale_pair_naive(z, y);
    // 11-tap Gaussian, sigma 1.5, normalized
    let mut g = [0.0f64; WIN];
    let mut gsum = 0.0;
    for (i, gi) in g.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *gi = (-d * d / (2.0 * 1.5 * 1.5)).exp();
        gsum += *gi;
    }
    for gi in g.iter_mut() {
        *gi /= gsum;
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - WIN) {
        for x0 in 0..=(w - WIN) {
            let (mut mz, mut my, mut ezz, mut eyy, mut ezy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let wgt = g[i] * g[j];
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
