use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tednet::groundtruth::{render_density, Annotation};
use tednet::io::{density_to_u8, load_image, save_gray, save_image_png, save_ted1};
use tednet::model::{TedNet, TrellisConfig};
use tednet::training::{
    crop, evaluate, mean_count_baseline_mae, predict, split_train_eval, synth_dataset, train,
    Sample, TrainConfig,
};
use tednet::{Error, Result};

#[derive(Parser)]
#[command(name = "tednet", about = "Trellis encoder-decoder crowd counting")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic crowd dataset (PNG images + JSON annotations).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        min_people: usize,
        #[arg(long, default_value_t = 20)]
        max_people: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a ground-truth density map from a point annotation file.
    GtGen {
        #[arg(long)]
        ann: PathBuf,
        /// Output density map (TED1 tensor file).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4.0)]
        sigma: f64,
        #[arg(long, default_value_t = 15)]
        ksize: usize,
        /// Also write an 8-bit visualization.
        #[arg(long)]
        preview: Option<PathBuf>,
    },
    /// Train a model on a dataset directory or on synthetic data.
    Train {
        /// Directory of image + annotation pairs (see `synth`).
        #[arg(long, conflicts_with = "synth")]
        data: Option<PathBuf>,
        /// Train on this many synthetic scenes instead of a directory.
        #[arg(long)]
        synth: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV path.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value = "sal+scl")]
        loss: String,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 3)]
        sal_levels: usize,
        #[arg(long, default_value_t = 64)]
        crop: usize,
        /// Network width (encoder stage-2 channels).
        #[arg(long, default_value_t = 32)]
        channels: usize,
        /// Ablation: single decoding path instead of the trellis.
        #[arg(long)]
        single_path: bool,
        /// Ablation: supervise only the full-resolution output.
        #[arg(long)]
        single_supervision: bool,
    },
    /// Evaluate a checkpoint (MAE, MSE, PSNR, SSIM).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "synth")]
        data: Option<PathBuf>,
        #[arg(long)]
        synth: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the per-image report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Predict a density map and count for one image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output density map (TED1 tensor file).
        #[arg(long)]
        out: Option<PathBuf>,
        /// 8-bit visualization of the predicted map.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Verify the analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately corrupt the gradients (exercises the failure path).
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

const SYNTH_SIZE: usize = 128;
const SYNTH_MIN_PEOPLE: usize = 5;
const SYNTH_MAX_PEOPLE: usize = 50;
const GT_SIGMA: f64 = 4.0;
const GT_KSIZE: usize = 15;

fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut anns: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    anns.sort();
    if anns.is_empty() {
        return Err(Error::Data(format!(
            "no annotation files in {}",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(anns.len());
    for ap in anns {
        let ann = Annotation::load(&ap)?;
        let image = load_image(&dir.join(&ann.image))?;
        if (image.h(), image.w()) != (ann.size[0], ann.size[1]) {
            return Err(Error::Data(format!(
                "{}: image is {}x{} but annotation says {}x{}",
                ap.display(),
                image.h(),
                image.w(),
                ann.size[0],
                ann.size[1]
            )));
        }
        let density = render_density(&ann, GT_SIGMA, GT_KSIZE)?;
        let count = ann.points.len() as f64;
        let id = ap
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push(Sample {
            id,
            image,
            density,
            count,
            points: ann.points,
        });
    }
    Ok(out)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth {
            out,
            count,
            height,
            width,
            min_people,
            max_people,
            seed,
        } => {
            std::fs::create_dir_all(&out)?;
            let samples = synth_dataset(seed, count, height, width, min_people, max_people, GT_SIGMA, GT_KSIZE)?;
            for s in &samples {
                let png = format!("{}.png", s.id);
                save_image_png(&out.join(&png), &s.image)?;
                let ann = Annotation {
                    image: png,
                    size: [height, width],
                    points: s.points.clone(),
                };
                ann.save(&out.join(format!("{}.json", s.id)))?;
            }
            println!("wrote {} scenes to {}", samples.len(), out.display());
            Ok(())
        }
        Cmd::GtGen {
            ann,
            out,
            sigma,
            ksize,
            preview,
        } => {
            let ann = Annotation::load(&ann)?;
            let map = render_density(&ann, sigma, ksize)?;
            save_ted1(&out, &map)?;
            if let Some(p) = preview {
                save_gray(&p, &density_to_u8(&map), map.h(), map.w())?;
            }
            println!(
                "density map {}x{}, count {:.3}",
                map.h(),
                map.w(),
                map.sum()
            );
            Ok(())
        }
        Cmd::Train {
            data,
            synth,
            out,
            log,
            seed,
            steps,
            batch,
            lr,
            loss,
            lambda,
            sal_levels,
            crop,
            channels,
            single_path,
            single_supervision,
        } => {
            let samples = match (&data, synth) {
                (Some(dir), None) => load_dataset(dir)?,
                (None, Some(n)) => {
                    synth_dataset(seed, n, SYNTH_SIZE, SYNTH_SIZE, SYNTH_MIN_PEOPLE, SYNTH_MAX_PEOPLE, GT_SIGMA, GT_KSIZE)?
                }
                _ => {
                    return Err(Error::Config(
                        "exactly one of --data or --synth is required".into(),
                    ))
                }
            };
            let (train_set, eval_set) = split_train_eval(samples);
            let cfg = TrellisConfig {
                base_channels: channels,
                sal_levels,
                lambda,
                single_path,
                ..TrellisConfig::default()
            };
            let mut model = TedNet::xavier_init(cfg, seed)?;
            println!(
                "model: {} parameters, {} train / {} eval samples",
                model.param_count(),
                train_set.len(),
                eval_set.len()
            );
            let tc = TrainConfig {
                seed,
                steps,
                batch,
                lr0: lr,
                loss: loss.parse()?,
                sal_levels,
                lambda,
                crop,
                single_supervision,
                log_every: 50,
            };
            let mut log_buf: Box<dyn Write> = match &log {
                Some(p) => Box::new(BufWriter::new(File::create(p)?)),
                None => Box::new(std::io::sink()),
            };
            let stats = train(&mut model, &train_set, &tc, &mut log_buf)?;
            log_buf.flush()?;
            model.save_checkpoint(&out)?;
            println!(
                "final loss {:.6}; checkpoint written to {}",
                stats.final_loss,
                out.display()
            );
            if !eval_set.is_empty() {
                let report = evaluate(&model, &eval_set)?;
                let base = mean_count_baseline_mae(&train_set, &eval_set)?;
                print!("{}", report.to_table());
                println!("mean-count baseline MAE {:.3}", base);
            }
            Ok(())
        }
        Cmd::Eval {
            ckpt,
            data,
            synth,
            seed,
            csv,
        } => {
            let model = TedNet::load_checkpoint(&ckpt)?;
            let samples = match (&data, synth) {
                (Some(dir), None) => load_dataset(dir)?,
                (None, Some(n)) => {
                    synth_dataset(seed, n, SYNTH_SIZE, SYNTH_SIZE, SYNTH_MIN_PEOPLE, SYNTH_MAX_PEOPLE, GT_SIGMA, GT_KSIZE)?
                }
                _ => {
                    return Err(Error::Config(
                        "exactly one of --data or --synth is required".into(),
                    ))
                }
            };
            let report = evaluate(&model, &samples)?;
            print!("{}", report.to_table());
            if let Some(p) = csv {
                std::fs::write(&p, report.to_csv())?;
            }
            Ok(())
        }
        Cmd::Predict {
            ckpt,
            image,
            out,
            png,
        } => {
            let model = TedNet::load_checkpoint(&ckpt)?;
            let mut img = load_image(&image)?;
            if img.h() % 4 != 0 || img.w() % 4 != 0 {
                let ch = img.h() / 4 * 4;
                let cw = img.w() / 4 * 4;
                if ch == 0 || cw == 0 {
                    return Err(Error::Data(format!(
                        "image {}x{} too small",
                        img.h(),
                        img.w()
                    )));
                }
                eprintln!(
                    "warning: {}x{} not divisible by 4, center-cropping to {}x{}",
                    img.h(),
                    img.w(),
                    ch,
                    cw
                );
                img = crop(&img, (img.h() - ch) / 2, (img.w() - cw) / 2, ch, cw)?;
            }
            let (z, count) = predict(&model, &img)?;
            println!("count {:.3}", count);
            if let Some(p) = out {
                save_ted1(&p, &z)?;
            }
            if let Some(p) = png {
                save_gray(&p, &density_to_u8(&z), z.h(), z.w())?;
            }
            Ok(())
        }
        Cmd::Gradcheck { seed, corrupt } => {
            let reports = tednet::gradcheck::run_all(seed, corrupt)?;
            let mut ok = true;
            for r in &reports {
                println!(
                    "{:<18} rel_err {:>12.3e}  tol {:.0e}  {}",
                    r.name,
                    r.rel_err,
                    r.tol,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                ok &= r.passed();
            }
            if !ok {
                return Err(Error::Numerical(
                    "gradient check failed (see report above)".into(),
                ));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version are not usage errors
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            let code = match e {
                Error::Config(_) => 1,
                Error::Numerical(_) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
