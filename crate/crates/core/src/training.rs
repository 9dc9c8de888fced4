//! Loss, schedule, augmentation, the training loop, and JSON checkpoints.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::{Array2, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Arr, Tape, Tensor};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::evaluation::{self, MetricReport};
use crate::model::Model;
use crate::nn::{Adam, AdamState, Fwd};

pub const DICE_EPS: f64 = 1.0;
pub const CHECKPOINT_VERSION: u32 = 1;

// ---- losses --------------------------------------------------------------

/// Numerically stable binary cross-entropy from logits:
/// mean(softplus(z) - z * y).
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Tensor {
    logits.softplus().sub(&logits.mul(targets)).mean()
}

/// Soft Dice loss over the whole batch on sigmoid probabilities.
pub fn dice_loss(logits: &Tensor, targets: &Tensor) -> Tensor {
    let p = logits.sigmoid();
    let num = p.mul(targets).sum().scale(2.0).add_scalar(DICE_EPS);
    let den = p.sum().add(&targets.sum()).add_scalar(DICE_EPS);
    num.div(&den).neg().add_scalar(1.0)
}

/// total = BCE + lambda * Dice.
pub fn total_loss(logits: &Tensor, targets: &Tensor, lambda: f64) -> Tensor {
    bce_with_logits(logits, targets).add(&dice_loss(logits, targets).scale(lambda))
}

// ---- schedule ------------------------------------------------------------

/// Cosine annealing from `lr_init` to zero over `total_steps`.
pub fn lr_at_step(lr_init: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return lr_init;
    }
    let frac = (step as f64 / total_steps as f64).min(1.0);
    lr_init * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

// ---- augmentation --------------------------------------------------------

/// Random crop to `size` plus independent horizontal / vertical flips,
/// applied identically to image and mask.
pub fn augment(sample: &Sample, size: (usize, usize), rng: &mut ChaCha8Rng) -> Result<(Array2<f64>, Array2<u8>)> {
    let (h, w) = sample.image.dim();
    let (th, tw) = size;
    if h < th || w < tw {
        return Err(Error::Data(format!(
            "sample '{}' is {h}x{w}, smaller than the crop {th}x{tw}",
            sample.id
        )));
    }
    let oy = if h > th { rng.gen_range(0..=h - th) } else { 0 };
    let ox = if w > tw { rng.gen_range(0..=w - tw) } else { 0 };
    let hflip = rng.gen_bool(0.5);
    let vflip = rng.gen_bool(0.5);
    let map = |y: usize, x: usize| {
        let yy = if vflip { th - 1 - y } else { y } + oy;
        let xx = if hflip { tw - 1 - x } else { x } + ox;
        (yy, xx)
    };
    let img = Array2::from_shape_fn((th, tw), |(y, x)| {
        let (yy, xx) = map(y, x);
        sample.image[[yy, xx]]
    });
    let mask = Array2::from_shape_fn((th, tw), |(y, x)| {
        let (yy, xx) = map(y, x);
        sample.mask[[yy, xx]]
    });
    Ok((img, mask))
}

// ---- checkpoints ----------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
pub struct SavedParam {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: String,
    pub config_hash: String,
    pub step: u64,
    pub epoch: usize,
    pub adam: AdamState,
    pub params: IndexMap<String, SavedParam>,
}

pub fn save_checkpoint(path: &Path, model: &Model, adam: &AdamState, step: u64, epoch: usize) -> Result<()> {
    let mut params = IndexMap::new();
    for (name, p) in model.store.iter() {
        params.insert(
            name.clone(),
            SavedParam {
                shape: p.value.shape().to_vec(),
                data: p.value.iter().cloned().collect(),
            },
        );
    }
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: model.cfg.to_kv_string(),
        config_hash: model.cfg.hash(),
        step,
        epoch,
        adam: adam.clone(),
        params,
    };
    let json = serde_json::to_string(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path.to_path_buf(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} unsupported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    Ok(ckpt)
}

impl Checkpoint {
    /// Write the saved parameters back into a model of the same config.
    pub fn restore(&self, model: &mut Model) -> Result<()> {
        if self.config_hash != model.cfg.hash() {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs model {}",
                self.config_hash,
                model.cfg.hash()
            )));
        }
        for (name, saved) in &self.params {
            if !model.store.contains(name) {
                return Err(Error::Checkpoint(format!("unknown parameter '{name}'")));
            }
            let arr = Arr::from_shape_vec(IxDyn(&saved.shape), saved.data.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter '{name}': {e}")))?;
            if model.store.get(name).shape() != saved.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' shape {:?} vs expected {:?}",
                    saved.shape,
                    model.store.get(name).shape()
                )));
            }
            model.store.set(name, arr);
        }
        Ok(())
    }
}

// ---- training loop ---------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Stop after this many optimizer steps (also the cosine horizon if it
    /// is shorter than epochs x steps-per-epoch).
    pub max_steps: Option<u64>,
    /// Run validation every this many epochs; 0 disables validation.
    pub val_every_epochs: usize,
    /// Where to write `checkpoint.json`, `best.json` and `log.csv`.
    pub out_dir: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
    pub threshold: f64,
    pub match_radius: f64,
    pub augment: bool,
    /// Print one line per `print_every` steps; 0 silences progress output.
    pub print_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_steps: None,
            val_every_epochs: 0,
            out_dir: None,
            resume_from: None,
            threshold: evaluation::DEFAULT_THRESHOLD,
            match_radius: evaluation::DEFAULT_MATCH_RADIUS,
            augment: true,
            print_every: 0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_iou: Option<f64>,
    pub val_pd: Option<f64>,
    pub val_fa: Option<f64>,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub best_val: Option<MetricReport>,
    pub log: Vec<LogRow>,
}

fn stack_batch(pairs: &[(Array2<f64>, Array2<u8>)]) -> (Arr, Arr) {
    let (h, w) = pairs[0].0.dim();
    let n = pairs.len();
    let mut images = Arr::zeros(IxDyn(&[n, 1, h, w]));
    let mut masks = Arr::zeros(IxDyn(&[n, 1, h, w]));
    for (i, (img, m)) in pairs.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                images[[i, 0, y, x]] = img[[y, x]];
                masks[[i, 0, y, x]] = m[[y, x]] as f64;
            }
        }
    }
    (images, masks)
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,epoch,lr,loss,val_iou,val_pd,val_fa\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.8},{:.6},{},{},{}\n",
            r.step,
            r.epoch,
            r.lr,
            r.loss,
            opt(r.val_iou),
            opt(r.val_pd),
            opt(r.val_fa)
        ));
    }
    out
}

/// Full training loop: shuffled minibatches, per-step cosine learning rate,
/// Adam, running-stat updates, periodic validation, best-IoU checkpointing.
pub fn train(model: &mut Model, train_set: &[Sample], val_set: &[Sample], opts: &TrainOptions) -> Result<TrainSummary> {
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let cfg = model.cfg.clone();
    let mut adam = Adam::new();
    let mut step: u64 = 0;
    let mut start_epoch = 0usize;
    if let Some(path) = &opts.resume_from {
        let ckpt = load_checkpoint(path)?;
        ckpt.restore(model)?;
        adam.state = ckpt.adam;
        step = ckpt.step;
        start_epoch = ckpt.epoch;
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size) as u64;
    let horizon = (cfg.epochs as u64 * steps_per_epoch).min(opts.max_steps.unwrap_or(u64::MAX)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut log: Vec<LogRow> = Vec::new();
    let mut best: Option<MetricReport> = None;
    let mut final_loss = f64::NAN;
    let mut last_epoch = start_epoch;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.clone(), e))?;
    }

    'epochs: for epoch in start_epoch..cfg.epochs {
        last_epoch = epoch;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= horizon {
                break 'epochs;
            }
            let pairs: Vec<(Array2<f64>, Array2<u8>)> = chunk
                .iter()
                .map(|&i| {
                    if opts.augment {
                        augment(&train_set[i], cfg.input_size, &mut rng)
                    } else {
                        Ok((train_set[i].image.clone(), train_set[i].mask.clone()))
                    }
                })
                .collect::<Result<_>>()?;
            let (images, masks) = stack_batch(&pairs);
            let x = model.prepare_input(&images)?;
            let lr = lr_at_step(cfg.lr_init, step, horizon);
            let tape = Tape::new();
            let bind = model.store.bind(&tape);
            let fwd = Fwd::new(&tape, &bind, true);
            let out = model.forward(&fwd, &tape.constant(x))?;
            let loss = total_loss(&out.logits, &tape.constant(masks), cfg.lambda_dice);
            let lv = loss.value().iter().cloned().next().unwrap_or(f64::NAN);
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss(step));
            }
            let grads = tape.backward(&loss);
            adam.step(&mut model.store, &bind, &grads, lr);
            fwd.apply_stat_updates(&mut model.store);
            step += 1;
            final_loss = lv;
            log.push(LogRow { step, epoch, lr, loss: lv, val_iou: None, val_pd: None, val_fa: None });
            if opts.print_every > 0 && step % opts.print_every == 0 {
                println!("step {step}/{horizon} epoch {epoch} lr {lr:.6} loss {lv:.5}");
            }
        }
        let do_val = opts.val_every_epochs > 0
            && !val_set.is_empty()
            && ((epoch + 1 - start_epoch) % opts.val_every_epochs == 0 || step >= horizon || epoch + 1 == cfg.epochs);
        if do_val {
            let (preds, _) = evaluation::predict(model, val_set, opts.threshold)?;
            let gts: Vec<Array2<u8>> = val_set.iter().map(|s| s.mask.clone()).collect();
            let report = evaluation::evaluate(&preds, &gts, opts.match_radius)?;
            if let Some(row) = log.last_mut() {
                row.val_iou = Some(report.iou);
                row.val_pd = Some(report.pd);
                row.val_fa = Some(report.fa);
            }
            if opts.print_every > 0 {
                println!(
                    "epoch {epoch}: val IoU {:.4} Pd {:.4} Fa {:.6}",
                    report.iou, report.pd, report.fa
                );
            }
            let improved = best.as_ref().map(|b| report.iou > b.iou).unwrap_or(true);
            if improved {
                best = Some(report);
                if let Some(dir) = &opts.out_dir {
                    save_checkpoint(&dir.join("best.json"), model, &adam.state, step, epoch + 1)?;
                }
            }
        }
        if let Some(dir) = &opts.out_dir {
            save_checkpoint(&dir.join("checkpoint.json"), model, &adam.state, step, epoch + 1)?;
            let p = dir.join("log.csv");
            std::fs::write(&p, log_csv(&log)).map_err(|e| Error::io(p, e))?;
        }
        if step >= horizon {
            break;
        }
    }
    // A `max_steps` stop can land mid-epoch, before the per-epoch save above;
    // always leave a final checkpoint and log behind.
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&dir.join("checkpoint.json"), model, &adam.state, step, last_epoch + 1)?;
        let p = dir.join("log.csv");
        std::fs::write(&p, log_csv(&log)).map_err(|e| Error::io(p, e))?;
    }
    Ok(TrainSummary { steps: step, final_loss, best_val: best, log })
}
