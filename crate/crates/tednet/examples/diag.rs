//! Temporary diagnostic: short training runs comparing loss variants.

use tednet::losses::LossKind;
use tednet::model::{TedNet, TrellisConfig};
use tednet::training::{evaluate, split_train_eval, synth_dataset, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let loss = match args.get(1).map(String::as_str).unwrap_or("comb") {
        "mse" => LossKind::Mse,
        "sal" => LossKind::Sal,
        _ => LossKind::SalScl,
    };
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(600);
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);
    let samples = synth_dataset(7, 200, 128, 128, 5, 50, 4.0, 15).unwrap();
    let (train_set, eval_set) = split_train_eval(samples);

    let cfg = TrellisConfig {
        base_channels: 8,
        ..TrellisConfig::default()
    };
    let mut model = TedNet::xavier_init(cfg, seed).unwrap();
    let tc = TrainConfig {
        seed,
        steps,
        loss,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    train(&mut model, &train_set, &tc, &mut std::io::sink()).unwrap();
    let report = evaluate(&model, &eval_set).unwrap();
    println!(
        "{:?} seed {} steps {}: MAE {:.3}  psnr {:.3}  ssim {:.4}  ({:.0}s)",
        loss,
        seed,
        steps,
        report.mae,
        report.mean_psnr,
        report.mean_ssim,
        t0.elapsed().as_secs_f64()
    );
}
