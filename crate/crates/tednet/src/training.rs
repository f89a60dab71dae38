//! Optimization and data plumbing: Adam with a stepped learning-rate decay,
//! synthetic crowd scenes for self-contained experiments, crop/flip
//! augmentation, the training loop, and evaluation over a sample set.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::groundtruth::{render_density, Annotation};
use crate::losses::{distributed_loss, LossKind};
use crate::metrics::{psnr, ssim, EvalReport, EvalRow};
use crate::model::{GradMap, TedNet};
use crate::tensor::{avgpool, Tensor4};
use crate::{Error, Result};

/// Stepped decay: the base rate scaled by 0.8 every 10k steps.
pub fn lr_at(lr0: f64, step: usize) -> f64 {
    lr0 * 0.8f64.powi((step / 10_000) as i32)
}

#[derive(Clone, Debug, Default)]
struct Moments {
    mw: Vec<f64>,
    vw: Vec<f64>,
    mb: Vec<f64>,
    vb: Vec<f64>,
}

/// Adam optimizer state, keyed by parameter path.
#[derive(Clone, Debug)]
pub struct AdamState {
    t: usize,
    slots: BTreeMap<String, Moments>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new() -> AdamState {
        AdamState {
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update. Parameters missing from `grads` are
    /// treated as having zero gradient (their moments still decay).
    pub fn step(&mut self, model: &mut TedNet, grads: &GradMap, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let slots = &mut self.slots;
        model.for_each_param_mut(|path, conv| {
            let slot = slots.entry(path.to_string()).or_insert_with(|| Moments {
                mw: vec![0.0; conv.w.len()],
                vw: vec![0.0; conv.w.len()],
                mb: vec![0.0; conv.b.len()],
                vb: vec![0.0; conv.b.len()],
            });
            let entry = grads.entries.get(path);
            let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: Option<&[f64]>| {
                for i in 0..p.len() {
                    let gi = g.map_or(0.0, |g| g[i]);
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            };
            update(
                conv.w.data_mut(),
                &mut slot.mw,
                &mut slot.vw,
                entry.map(|(gw, _)| gw.data()),
            );
            update(
                &mut conv.b,
                &mut slot.mb,
                &mut slot.vb,
                entry.map(|(_, gb)| gb.as_slice()),
            );
        });
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// samples and synthetic data

/// One training/eval example: an image, its full-resolution density target,
/// and the true count.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor4,
    pub density: Tensor4,
    pub count: f64,
    pub points: Vec<[f64; 2]>,
}

/// Renders a synthetic crowd scene: a smoothly textured background with dark
/// soft discs standing in for heads. Returns the image and head points.
pub fn synth_scene(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    n_people: usize,
) -> (Tensor4, Vec<[f64; 2]>) {
    let fx = rng.gen_range(0.5..2.5);
    let fy = rng.gen_range(0.5..2.5);
    let phase_x = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase_y = rng.gen_range(0.0..std::f64::consts::TAU);
    let tint = [
        rng.gen_range(0.9..1.0),
        rng.gen_range(0.85..1.0),
        rng.gen_range(0.8..1.0),
    ];
    let mut img = Tensor4::zeros(1, 3, h, w).unwrap();
    let mut base = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 / w as f64;
            let v = y as f64 / h as f64;
            let tex = 0.6
                + 0.15 * (std::f64::consts::TAU * fx * u + phase_x).sin()
                + 0.15 * (std::f64::consts::TAU * fy * v + phase_y).sin();
            base[y * w + x] = tex + rng.gen_range(-0.12..0.12);
        }
    }
    let mut points = Vec::with_capacity(n_people);
    for _ in 0..n_people {
        let px = rng.gen_range(2.0..(w as f64 - 2.0));
        let py = rng.gen_range(2.0..(h as f64 - 2.0));
        let r = rng.gen_range(2.0..4.0);
        // heads vary in contrast so counting cannot key on a single intensity
        let depth = rng.gen_range(0.4..0.85);
        points.push([px, py]);
        let x0 = ((px - r - 1.0).floor().max(0.0)) as usize;
        let x1 = ((px + r + 1.0).ceil().min(w as f64 - 1.0)) as usize;
        let y0 = ((py - r - 1.0).floor().max(0.0)) as usize;
        let y1 = ((py + r + 1.0).ceil().min(h as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
                if d < r {
                    // soft-edged dark disc
                    let k = (1.0 - d / r).min(1.0);
                    base[y * w + x] *= 1.0 - depth * k;
                }
            }
        }
    }
    for c in 0..3 {
        let plane = img.plane_mut(0, c);
        for i in 0..h * w {
            plane[i] = (base[i] * tint[c]).clamp(0.0, 1.0);
        }
    }
    (img, points)
}

/// A deterministic synthetic dataset with head counts up to `max_people`.
pub fn synth_dataset(
    seed: u64,
    count: usize,
    h: usize,
    w: usize,
    min_people: usize,
    max_people: usize,
    sigma: f64,
    ksize: usize,
) -> Result<Vec<Sample>> {
    if min_people > max_people {
        return Err(Error::Config(format!(
            "min_people {} > max_people {}",
            min_people, max_people
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let n = rng.gen_range(min_people.max(1)..=max_people.max(1));
        let (image, points) = synth_scene(&mut rng, h, w, n);
        let ann = Annotation {
            image: format!("synth_{:04}.png", i),
            size: [h, w],
            points,
        };
        let density = render_density(&ann, sigma, ksize)?;
        out.push(Sample {
            id: format!("synth_{:04}", i),
            image,
            density,
            count: n as f64,
            points: ann.points,
        });
    }
    Ok(out)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic 80/20 split by id hash; ids hashing to 0 mod 5 go to eval.
pub fn split_train_eval(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for s in samples {
        if fnv1a(&s.id) % 5 == 0 {
            eval.push(s);
        } else {
            train.push(s);
        }
    }
    (train, eval)
}

// ---------------------------------------------------------------------------
// augmentation

/// Spatial crop of every plane, shared by image and density tensors.
pub fn crop(t: &Tensor4, oy: usize, ox: usize, ch: usize, cw: usize) -> Result<Tensor4> {
    if oy + ch > t.h() || ox + cw > t.w() {
        return Err(Error::Shape(format!(
            "crop {}x{} at ({},{}) exceeds {}x{}",
            ch,
            cw,
            oy,
            ox,
            t.h(),
            t.w()
        )));
    }
    let mut out = Tensor4::zeros(t.n(), t.c(), ch, cw)?;
    for n in 0..t.n() {
        for c in 0..t.c() {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..ch {
                let srow = &src[(oy + y) * t.w() + ox..(oy + y) * t.w() + ox + cw];
                dst[y * cw..(y + 1) * cw].copy_from_slice(srow);
            }
        }
    }
    Ok(out)
}

/// Horizontal mirror.
pub fn hflip(t: &Tensor4) -> Tensor4 {
    let mut out = t.clone();
    let w = t.w();
    for n in 0..t.n() {
        for c in 0..t.c() {
            let plane = out.plane_mut(n, c);
            for row in plane.chunks_mut(w) {
                row.reverse();
            }
        }
    }
    out
}

/// Random crop plus 50% horizontal flip, applied identically to the image
/// and its density map so the crop's count stays consistent.
pub fn augment(rng: &mut ChaCha8Rng, s: &Sample, crop_size: usize) -> Result<(Tensor4, Tensor4)> {
    let (h, w) = (s.image.h(), s.image.w());
    if crop_size > h || crop_size > w {
        return Err(Error::Config(format!(
            "crop {} larger than image {}x{}",
            crop_size, h, w
        )));
    }
    let oy = rng.gen_range(0..=h - crop_size);
    let ox = rng.gen_range(0..=w - crop_size);
    let mut img = crop(&s.image, oy, ox, crop_size, crop_size)?;
    let mut den = crop(&s.density, oy, ox, crop_size, crop_size)?;
    if rng.gen_bool(0.5) {
        img = hflip(&img);
        den = hflip(&den);
    }
    Ok((img, den))
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr0: f64,
    pub loss: LossKind,
    pub sal_levels: usize,
    pub lambda: f64,
    pub crop: usize,
    pub single_supervision: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 2000,
            batch: 4,
            lr0: 1e-3,
            loss: LossKind::SalScl,
            sal_levels: 3,
            lambda: 1.0,
            crop: 64,
            single_supervision: false,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainStats {
    /// (step, mean batch loss) at each logged step.
    pub history: Vec<(usize, f64)>,
    pub final_loss: f64,
}

/// Trains `model` in place. Writes a CSV log (`step,lr,loss`) to `log`; the
/// log carries no timestamps so identical runs produce identical bytes.
/// Aborts with a numerical error if the loss or any gradient goes non-finite.
pub fn train(
    model: &mut TedNet,
    train_set: &[Sample],
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainStats> {
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if cfg.batch == 0 || cfg.steps == 0 {
        return Err(Error::Config("batch and steps must be >= 1".into()));
    }
    let align = 4 << cfg.sal_levels;
    if cfg.crop % align != 0 {
        return Err(Error::Config(format!(
            "crop {} must be a multiple of {} (quarter-scale map pooled {} times)",
            cfg.crop, align, cfg.sal_levels
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new();
    let mut history = Vec::new();
    let mut last = 0.0;
    writeln!(log, "step,lr,loss")?;
    for step in 0..cfg.steps {
        let lr = lr_at(cfg.lr0, step);
        let mut batch_grads = GradMap::default();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let s = &train_set[rng.gen_range(0..train_set.len())];
            let (img, mut y_full) = augment(&mut rng, s, cfg.crop)?;
            y_full.scale(model.cfg.output_scale);
            let y_quarter = avgpool(&y_full, 4)?;
            let (out, cache) = model.forward(&img)?;
            let (report, head_grads) = distributed_loss(
                &out,
                &y_full,
                &y_quarter,
                cfg.loss,
                cfg.sal_levels,
                cfg.lambda,
                cfg.single_supervision,
            )?;
            batch_loss += report.total;
            batch_grads.add(&model.backward(&cache, &head_grads)?)?;
        }
        batch_grads.scale(1.0 / cfg.batch as f64);
        batch_loss /= cfg.batch as f64;
        if !batch_loss.is_finite() || !batch_grads.max_abs().is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at step {}",
                step
            )));
        }
        adam.step(model, &batch_grads, lr);
        last = batch_loss;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            writeln!(log, "{},{},{:.10}", step, lr, batch_loss)?;
            history.push((step, batch_loss));
        }
    }
    Ok(TrainStats {
        history,
        final_loss: last,
    })
}

/// Predicted density map and count (the map's integral) for one image.
pub fn predict(model: &TedNet, image: &Tensor4) -> Result<(Tensor4, f64)> {
    let (out, _) = model.forward(image)?;
    let mut z = out.z;
    z.scale(1.0 / model.cfg.output_scale);
    let count = z.sum();
    Ok((z, count))
}

/// Full-image evaluation over a sample set.
pub fn evaluate(model: &TedNet, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let (z, count) = predict(model, &s.image)?;
        rows.push(EvalRow {
            id: s.id.clone(),
            gt_count: s.count,
            pred_count: count,
            psnr: psnr(&z, &s.density)?,
            ssim: ssim(&z, &s.density)?,
        });
    }
    EvalReport::from_rows(rows)
}

/// MAE of always predicting the training set's mean count — the yardstick a
/// trained model has to beat.
pub fn mean_count_baseline_mae(train_set: &[Sample], eval_set: &[Sample]) -> Result<f64> {
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::Data("empty split for baseline".into()));
    }
    let mean = train_set.iter().map(|s| s.count).sum::<f64>() / train_set.len() as f64;
    Ok(eval_set.iter().map(|s| (s.count - mean).abs()).sum::<f64>() / eval_set.len() as f64)
}
