//! Acceptance suite: one pass/fail line per criterion.
//!
//! Built without the libtest harness so every criterion reports directly on
//! stdout. Run everything with `cargo test -p irstd-cli --test acceptance`,
//! or a subset by listing criterion numbers after `--` (e.g. `-- 1 7 9`).

use std::time::Instant;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use irstd_core::config::{DecoderVariantTag, ModelConfig};
use irstd_core::data::{synth_dataset, synth_scene, Sample, SceneSpec, Scenario};
use irstd_core::evaluation::{connected_components, evaluate, predict, drift_report};
use irstd_core::frequency::{filter_with_mask, gaussian_highpass_mask, highpass_filter};
use irstd_core::layout::{compute_layout, DecoderSchema};
use irstd_core::model::Model;
use irstd_core::nn::Fwd;
use irstd_core::training::{bce_with_logits, total_loss, train, TrainOptions};
use irstd_core::autodiff::Tape;

type CritResult = Result<String, String>;

fn fail(msg: impl Into<String>) -> CritResult {
    Err(msg.into())
}

fn budget(start: Instant, limit_s: f64, detail: String) -> CritResult {
    let el = start.elapsed().as_secs_f64();
    if el > limit_s {
        fail(format!("{detail}; runtime {el:.1}s exceeds {limit_s:.0}s budget"))
    } else {
        Ok(detail)
    }
}

// ---------------------------------------------------------------------------
// shared fixtures

fn tiny_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::desk();
    cfg.input_size = (16, 16);
    cfg.decoder_width = 8;
    cfg.num_layers = 1;
    cfg.batch_size = 2;
    cfg
}

/// Mixed-scenario synthetic samples generated in memory.
fn scenes(n: usize, size: (usize, usize), seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let sc = Scenario::ALL[i % Scenario::ALL.len()];
            let spec = SceneSpec::default_for(sc, size);
            synth_scene(&spec, &format!("{}_{i:03}", sc.as_str()), &mut rng)
        })
        .collect()
}

fn batch_from(samples: &[Sample]) -> (ArrayD<f64>, ArrayD<f64>) {
    let (h, w) = samples[0].image.dim();
    let n = samples.len();
    let mut images = ArrayD::<f64>::zeros(IxDyn(&[n, 1, h, w]));
    let mut masks = ArrayD::<f64>::zeros(IxDyn(&[n, 1, h, w]));
    for (i, s) in samples.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                images[[i, 0, y, x]] = s.image[[y, x]];
                masks[[i, 0, y, x]] = s.mask[[y, x]] as f64;
            }
        }
    }
    (images, masks)
}

fn single_image(s: &Sample) -> ArrayD<f64> {
    let (h, w) = s.image.dim();
    let mut images = ArrayD::<f64>::zeros(IxDyn(&[1, 1, h, w]));
    for y in 0..h {
        for x in 0..w {
            images[[0, 0, y, x]] = s.image[[y, x]];
        }
    }
    images
}

// ---------------------------------------------------------------------------
// 1. layout identity

fn c1_layout_identity() -> CritResult {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..200 {
        let layers = rng.gen_range(1..=8);
        let c_dec = rng.gen_range(3..=64);
        let mut cfg = ModelConfig::desk();
        cfg.decoder_width = c_dec;
        let schema = DecoderSchema::homogeneous(layers, c_dec);
        let layout = compute_layout(&schema, &cfg).map_err(|e| e.to_string())?;
        // independent count: every layer is a full C x C 3x3 convolution
        let flat: usize = layers * c_dec * c_dec * 3 * 3;
        if layout.n_q * layout.p != flat {
            return fail(format!(
                "case {case}: N_q*P = {} but sum C_out*C_in*k^2 = {flat} (layers {layers}, C_dec {c_dec})",
                layout.n_q * layout.p
            ));
        }
    }
    budget(start, 1.0, "200 homogeneous schemas, N_q*P == sum C_out*C_in*k^2 exactly".into())
}

// ---------------------------------------------------------------------------
// 2. high-pass correctness

fn c2_highpass() -> CritResult {
    let start = Instant::now();
    let sigma = 5.0;
    let mask = gaussian_highpass_mask(64, 64, sigma).map_err(|e| e.to_string())?;
    let center_val = mask.values[[mask.center.0, mask.center.1]];
    if center_val != 0.0 {
        return fail(format!("mask center is {center_val}, expected exactly 0"));
    }
    // squared distance 2 sigma^2 => mask value 1 - e^-1
    let d = (2.0_f64).sqrt() * sigma;
    let got = mask.value_at(mask.center.0 as f64 + d, mask.center.1 as f64);
    let want = 1.0 - (-1.0_f64).exp();
    if (got - want).abs() > 1e-9 {
        return fail(format!("mask at 2 sigma^2: {got} vs {want}"));
    }
    // constant image suppression
    let flat = Array2::<f64>::from_elem((32, 32), 0.7);
    let sf = highpass_filter(&flat, sigma).map_err(|e| e.to_string())?;
    let hp = sf.channels.index_axis(ndarray::Axis(0), 1);
    let hp_norm = hp.iter().map(|v| v * v).sum::<f64>().sqrt();
    let in_norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if hp_norm > 1e-5 * in_norm {
        return fail(format!("constant image residue {hp_norm:.3e} vs input norm {in_norm:.3e}"));
    }
    // FFT round trip through an all-pass mask
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Array2::<f64>::from_shape_fn((48, 32), |_| rng.gen_range(-1.0..1.0));
    let ones = Array2::<f64>::ones((48, 32));
    let (rt, _) = filter_with_mask(&x, &ones);
    let err = x
        .iter()
        .zip(rt.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if err > 1e-5 * scale {
        return fail(format!("FFT round-trip error {err:.3e}"));
    }
    budget(
        start,
        5.0,
        "center 0, 1-e^-1 at 2 sigma^2, constant suppressed, FFT round-trips".into(),
    )
}

// ---------------------------------------------------------------------------
// 3. gradient fidelity

fn c3_gradients() -> CritResult {
    let start = Instant::now();
    let mut model = Model::new(tiny_cfg()).map_err(|e| e.to_string())?;
    let samples = scenes(2, (16, 16), 3);
    let (images, masks) = batch_from(&samples);
    let x = model.prepare_input(&images).map_err(|e| e.to_string())?;

    let loss_value = |model: &Model| -> f64 {
        let tape = Tape::new();
        let bind = model.store.bind(&tape);
        let fwd = Fwd::new(&tape, &bind, true);
        let out = model.forward(&fwd, &tape.constant(x.clone())).unwrap();
        let loss = total_loss(&out.logits, &tape.constant(masks.clone()), model.cfg.lambda_dice);
        loss.value().iter().next().copied().unwrap()
    };

    // one analytic backward pass
    let tape = Tape::new();
    let bind = model.store.bind(&tape);
    let fwd = Fwd::new(&tape, &bind, true);
    let out = model.forward(&fwd, &tape.constant(x.clone())).map_err(|e| e.to_string())?;
    let loss = total_loss(&out.logits, &tape.constant(masks.clone()), model.cfg.lambda_dice);
    let grads = tape.backward(&loss);

    let names = ["hyper.q_init", "hyper.l0.self.wq", "enc.b1.mkab.g0.w"];
    let mut worst: f64 = 0.0;
    for name in names {
        let analytic = grads
            .get(&bind.get(name))
            .ok_or_else(|| format!("no gradient reached {name}"))?
            .clone();
        let base = model.store.get(name).clone();
        let len = base.len();
        // a handful of spread-out coordinates per parameter
        for pick in 0..4 {
            let idx = pick * (len - 1) / 3;
            let v0 = base.as_slice().unwrap()[idx];
            let eps = 1e-5 * v0.abs().max(1.0);
            let mut plus = base.clone();
            plus.as_slice_mut().unwrap()[idx] = v0 + eps;
            model.store.set(name, plus);
            let lp = loss_value(&model);
            let mut minus = base.clone();
            minus.as_slice_mut().unwrap()[idx] = v0 - eps;
            model.store.set(name, minus);
            let lm = loss_value(&model);
            model.store.set(name, base.clone());
            let fd = (lp - lm) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
            if rel > 1e-3 {
                return fail(format!("{name}[{idx}]: analytic {a:.6e} vs fd {fd:.6e} (rel {rel:.2e})"));
            }
        }
    }
    budget(start, 120.0, format!("q_init, transformer and MKAB grads match FD (worst rel {worst:.2e})"))
}

// ---------------------------------------------------------------------------
// 4. adaptivity + determinism

fn c4_adaptivity() -> CritResult {
    let start = Instant::now();
    let mut cfg = tiny_cfg();
    cfg.epochs = 1000;
    cfg.seed = 4;
    let mut model = Model::new(cfg).map_err(|e| e.to_string())?;
    let samples = scenes(10, (16, 16), 4);
    let opts = TrainOptions {
        max_steps: Some(100),
        augment: false,
        ..TrainOptions::default()
    };
    let summary = train(&mut model, &samples, &[], &opts).map_err(|e| e.to_string())?;
    if summary.steps != 100 {
        return fail(format!("expected 100 training steps, ran {}", summary.steps));
    }

    // determinism: the same image twice gives bit-identical parameters
    let img0 = single_image(&samples[0]);
    let p1: Vec<f64> = model.infer(&img0).map_err(|e| e.to_string())?.param_matrix.value().iter().cloned().collect();
    let p2: Vec<f64> = model.infer(&img0).map_err(|e| e.to_string())?.param_matrix.value().iter().cloned().collect();
    if p1 != p2 {
        return fail("repeated inference on one image gave different generated parameters".to_string());
    }

    // adaptivity: all pairs of distinct images get distinct parameters
    let mats: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            model
                .infer(&single_image(s))
                .map(|o| o.param_matrix.value().iter().cloned().collect())
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut min_linf = f64::INFINITY;
    for i in 0..mats.len() {
        for j in i + 1..mats.len() {
            let linf = mats[i]
                .iter()
                .zip(&mats[j])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            min_linf = min_linf.min(linf);
            if linf <= 0.0 {
                return fail(format!("images {i} and {j} produced identical parameter matrices"));
            }
        }
    }
    budget(start, 300.0, format!("bit-identical reruns; min pairwise Linf {min_linf:.3e} over 10 images"))
}

// ---------------------------------------------------------------------------
// 5. desk overfit

fn c5_overfit() -> CritResult {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ModelConfig::desk();
    cfg.decoder_variant = DecoderVariantTag::SpatialAttention;
    // batch 3 keeps 300 spatial_attention steps inside the 15-minute budget
    // on a single CPU core
    cfg.batch_size = 3;
    cfg.epochs = 100;
    cfg.seed = 100;
    let samples = synth_dataset(&dir.path().join("ds"), &[
        SceneSpec::default_for(Scenario::Sky, (64, 64)),
        SceneSpec::default_for(Scenario::Maritime, (64, 64)),
        SceneSpec::default_for(Scenario::Ground, (64, 64)),
    ], 16, 1.0, 100)
    .map_err(|e| e.to_string())?;
    let mut model = Model::new(cfg).map_err(|e| e.to_string())?;
    // memorization test: no crop/flip augmentation
    let opts = TrainOptions {
        max_steps: Some(300),
        augment: false,
        ..TrainOptions::default()
    };
    let summary = train(&mut model, &samples, &[], &opts).map_err(|e| e.to_string())?;
    let (preds, _) = predict(&model, &samples, 0.5).map_err(|e| e.to_string())?;
    let gts: Vec<Array2<u8>> = samples.iter().map(|s| s.mask.clone()).collect();
    let report = evaluate(&preds, &gts, 3.0).map_err(|e| e.to_string())?;
    let detail = format!(
        "16 images, {} steps, final loss {:.4}: train IoU {:.4}, Pd {:.4}, Fa {:.2e}",
        summary.steps, summary.final_loss, report.iou, report.pd, report.fa
    );
    if report.iou < 0.85 {
        return fail(format!("{detail}; IoU below 0.85"));
    }
    if report.fa > 1e-3 {
        return fail(format!("{detail}; Fa above 1e-3"));
    }
    budget(start, 900.0, detail)
}

// ---------------------------------------------------------------------------
// 6. drift separation vs static baseline

fn c6_drift() -> CritResult {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let samples = synth_dataset(&dir.path().join("ds"), &[
        SceneSpec::default_for(Scenario::Sky, (64, 64)),
        SceneSpec::default_for(Scenario::Maritime, (64, 64)),
        SceneSpec::default_for(Scenario::Ground, (64, 64)),
    ], 60, 1.0, 200)
    .map_err(|e| e.to_string())?;

    let base_cfg = || {
        let mut cfg = ModelConfig::desk();
        cfg.decoder_variant = DecoderVariantTag::Basic;
        cfg.batch_size = 4;
        cfg.epochs = 100;
        cfg.seed = 200;
        cfg
    };
    let opts = TrainOptions {
        max_steps: Some(300),
        ..TrainOptions::default()
    };

    let mut adaptive = Model::new(base_cfg()).map_err(|e| e.to_string())?;
    train(&mut adaptive, &samples, &[], &opts).map_err(|e| e.to_string())?;

    let mut static_cfg = base_cfg();
    static_cfg.static_decoder = true;
    let mut baseline = Model::new(static_cfg).map_err(|e| e.to_string())?;
    train(&mut baseline, &samples, &[], &opts).map_err(|e| e.to_string())?;

    let report = drift_report(&adaptive, &samples, 0.5, 3.0).map_err(|e| e.to_string())?;
    if report.degenerate || report.ratio <= 1.0 {
        return fail(format!(
            "separation ratio {:.4} (intra {:.4}, inter {:.4}, degenerate {})",
            report.ratio, report.intra, report.inter, report.degenerate
        ));
    }
    let static_report = drift_report(&baseline, &samples, 0.5, 3.0).map_err(|e| e.to_string())?;
    let mut wins = 0usize;
    let mut pairs = Vec::new();
    for (name, r) in &report.per_scenario {
        let s = static_report
            .per_scenario
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.iou)
            .unwrap_or(0.0);
        if r.iou >= s {
            wins += 1;
        }
        pairs.push(format!("{name} {:.3} vs {:.3}", r.iou, s));
    }
    let detail = format!(
        "ratio {:.3}; adaptive vs static IoU: {} ({wins}/3 scenarios)",
        report.ratio,
        pairs.join(", ")
    );
    if wins < 2 {
        return fail(detail);
    }
    budget(start, 1800.0, detail)
}

// ---------------------------------------------------------------------------
// 7. metric oracle equivalence

mod oracle {
    use ndarray::Array2;

    /// 8-connected components by breadth-first search, in scan order.
    pub fn components(mask: &Array2<u8>) -> Vec<Vec<(usize, usize)>> {
        let (h, w) = mask.dim();
        let mut seen = vec![vec![false; w]; h];
        let mut out = Vec::new();
        for sy in 0..h {
            for sx in 0..w {
                if mask[[sy, sx]] == 0 || seen[sy][sx] {
                    continue;
                }
                let mut comp = Vec::new();
                let mut queue = std::collections::VecDeque::from([(sy, sx)]);
                seen[sy][sx] = true;
                while let Some((y, x)) = queue.pop_front() {
                    comp.push((y, x));
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                                continue;
                            }
                            let (ny, nx) = (ny as usize, nx as usize);
                            if mask[[ny, nx]] != 0 && !seen[ny][nx] {
                                seen[ny][nx] = true;
                                queue.push_back((ny, nx));
                            }
                        }
                    }
                }
                comp.sort_unstable();
                out.push(comp);
            }
        }
        out
    }

    fn centroid(comp: &[(usize, usize)]) -> (f64, f64) {
        let n = comp.len() as f64;
        let sy: f64 = comp.iter().map(|&(y, _)| y as f64).sum();
        let sx: f64 = comp.iter().map(|&(_, x)| x as f64).sum();
        (sy / n, sx / n)
    }

    /// Brute-force (iou, pd, fa) over a single prediction / ground-truth pair.
    pub fn metrics(pred: &Array2<u8>, gt: &Array2<u8>, radius: f64) -> (f64, f64, f64) {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if p != 0 && g != 0 {
                inter += 1;
            }
            if p != 0 || g != 0 {
                union += 1;
            }
        }
        let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };

        let gt_comps = components(gt);
        let gt_centroids: Vec<(f64, f64)> = gt_comps.iter().map(|c| centroid(c)).collect();
        let mut detected = vec![false; gt_comps.len()];
        let mut false_px = 0usize;
        for pc in components(pred) {
            let (py, px) = centroid(&pc);
            let mut best: Option<(usize, f64)> = None;
            for (i, &(gy, gx)) in gt_centroids.iter().enumerate() {
                let d = ((py - gy).powi(2) + (px - gx).powi(2)).sqrt();
                if best.map(|(_, bd)| d < bd).unwrap_or(true) {
                    best = Some((i, d));
                }
            }
            match best {
                Some((i, d)) if d <= radius => detected[i] = true,
                _ => false_px += pc.len(),
            }
        }
        let n_targets = gt_comps.len();
        let pd = if n_targets == 0 {
            1.0
        } else {
            detected.iter().filter(|&&d| d).count() as f64 / n_targets as f64
        };
        let fa = if pred.is_empty() {
            0.0
        } else {
            false_px as f64 / pred.len() as f64
        };
        (iou, pd, fa)
    }
}

fn c7_metric_oracle() -> CritResult {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        let h = rng.gen_range(1..=16);
        let w = rng.gen_range(1..=16);
        let dens_p = rng.gen_range(0.02..0.6);
        let dens_g = rng.gen_range(0.02..0.6);
        let pred = Array2::<u8>::from_shape_fn((h, w), |_| u8::from(rng.gen_bool(dens_p)));
        let gt = Array2::<u8>::from_shape_fn((h, w), |_| u8::from(rng.gen_bool(dens_g)));
        let radius = rng.gen_range(0.5..5.0);
        let r = evaluate(&[pred.clone()], &[gt.clone()], radius).map_err(|e| e.to_string())?;
        let (iou, pd, fa) = oracle::metrics(&pred, &gt, radius);
        if r.iou != iou || r.pd != pd || r.fa != fa {
            return fail(format!(
                "case {case} ({h}x{w}, r {radius:.2}): got iou {} pd {} fa {}, oracle {iou} {pd} {fa}",
                r.iou, r.pd, r.fa
            ));
        }
        // component partitions must agree as sets of pixel sets
        let mut ours: Vec<Vec<(usize, usize)>> = connected_components(&pred)
            .into_iter()
            .map(|c| {
                let mut p = c.pixels;
                p.sort_unstable();
                p
            })
            .collect();
        ours.sort();
        let mut theirs = oracle::components(&pred);
        theirs.sort();
        if ours != theirs {
            return fail(format!("case {case}: component partition mismatch"));
        }
    }
    budget(start, 60.0, "1000 random mask pairs: iou/pd/fa bitwise-equal to brute force".into())
}

// ---------------------------------------------------------------------------
// 8. shape universality

fn c8_shapes() -> CritResult {
    let start = Instant::now();
    let model = Model::new(ModelConfig::desk()).map_err(|e| e.to_string())?;
    let mut tried = Vec::new();
    for (i, &size) in [(64, 64), (128, 128), (256, 256), (256, 192)].iter().enumerate() {
        let spec = SceneSpec::default_for(Scenario::Sky, size);
        let mut rng = ChaCha8Rng::seed_from_u64(80 + i as u64);
        let sample = synth_scene(&spec, "shape", &mut rng);
        let out = model.infer(&single_image(&sample)).map_err(|e| e.to_string())?;
        let got = out.logits.shape();
        let want = vec![1, 1, size.0, size.1];
        if got != want {
            return fail(format!("input {size:?} produced logits {got:?}"));
        }
        tried.push(format!("{}x{}", size.0, size.1));
    }
    budget(start, 60.0, format!("masks match input size at {}", tried.join(", ")))
}

// ---------------------------------------------------------------------------
// 9. loss endpoints

fn c9_loss_endpoints() -> CritResult {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let targets = ArrayD::<f64>::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |_| f64::from(u8::from(rng.gen_bool(0.3))));

    // perfect confident prediction
    let tape = Tape::new();
    let y = tape.constant(targets.clone());
    let logits = tape.constant(targets.mapv(|t| if t > 0.5 { 20.0 } else { -20.0 }));
    let perfect = total_loss(&logits, &y, 0.5).value().iter().next().copied().unwrap();
    if perfect > 1e-5 {
        return fail(format!("perfect prediction loss {perfect:.3e} > 1e-5"));
    }

    // lambda = 0 collapses to BCE exactly
    let z = tape.constant(ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |_| rng.gen_range(-3.0..3.0)));
    let total = total_loss(&z, &y, 0.0).value().iter().next().copied().unwrap();
    let bce = bce_with_logits(&z, &y).value().iter().next().copied().unwrap();
    if total != bce {
        return fail(format!("lambda=0: total {total} != bce {bce}"));
    }

    // m = 0.5 everywhere => BCE = ln 2
    let zeros = tape.constant(ArrayD::zeros(IxDyn(&[1, 1, 8, 8])));
    let half = bce_with_logits(&zeros, &y).value().iter().next().copied().unwrap();
    if (half - std::f64::consts::LN_2).abs() > 1e-9 {
        return fail(format!("m=0.5 BCE {half} vs ln 2"));
    }
    budget(start, 5.0, "perfect<=1e-5, lambda=0 == BCE bitwise, m=0.5 -> ln 2".into())
}

// ---------------------------------------------------------------------------
// 10. variant ordering + inspect-layout agreement

fn c10_variant_ordering() -> CritResult {
    let start = Instant::now();
    // hand-derived desk counts (C_dec = 32, 4 stages):
    //   basic:             4 * 32                                = 128
    //   multiscale:        4 * (32 + 32 + 32 + 16 + 32)          = 576
    //   spatial_attention: 4 * (32 + 32 + 32 + 16 + 32 + 32 + 32) = 832
    let hand = [("basic", 128usize), ("multiscale", 576), ("spatial_attention", 832)];
    let mut computed = Vec::new();
    for (name, want) in hand {
        let mut cfg = ModelConfig::desk();
        cfg.decoder_variant = match name {
            "basic" => DecoderVariantTag::Basic,
            "multiscale" => DecoderVariantTag::Multiscale,
            _ => DecoderVariantTag::SpatialAttention,
        };
        let schema = DecoderSchema::build(cfg.decoder_variant, &cfg);
        let layout = compute_layout(&schema, &cfg).map_err(|e| e.to_string())?;
        if layout.n_q != want {
            return fail(format!("{name}: computed N_q {} vs hand-derived {want}", layout.n_q));
        }
        computed.push(layout.n_q);

        // the CLI must print the same totals
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_irstd"))
            .args(["inspect-layout", "--profile", "desk", "--variant", name])
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return fail(format!("inspect-layout --variant {name} failed"));
        }
        let text = String::from_utf8_lossy(&out.stdout).into_owned();
        let total = text
            .lines()
            .find(|l| l.starts_with("total,"))
            .ok_or_else(|| format!("{name}: no total row in inspect-layout output"))?;
        let cols: Vec<&str> = total.split(',').collect();
        let printed: usize = cols[4].parse().map_err(|_| format!("{name}: bad total row '{total}'"))?;
        if printed != want {
            return fail(format!("{name}: inspect-layout printed N_q {printed} vs hand-derived {want}"));
        }
    }
    if !(computed[0] < computed[1] && computed[1] < computed[2]) {
        return fail(format!("N_q not strictly increasing: {computed:?}"));
    }
    budget(start, 30.0, "N_q 128 < 576 < 832; inspect-layout totals agree".into())
}

// ---------------------------------------------------------------------------

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: Vec<(usize, &str, fn() -> CritResult)> = vec![
        (1, "layout identity", c1_layout_identity),
        (2, "high-pass correctness", c2_highpass),
        (3, "gradient fidelity", c3_gradients),
        (4, "adaptivity + determinism", c4_adaptivity),
        (5, "desk overfit", c5_overfit),
        (6, "drift separation", c6_drift),
        (7, "metric oracle equivalence", c7_metric_oracle),
        (8, "shape universality", c8_shapes),
        (9, "loss endpoints", c9_loss_endpoints),
        (10, "variant ordering", c10_variant_ordering),
    ];
    let mut failed = false;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let res = std::panic::catch_unwind(f);
        let el = t.elapsed().as_secs_f64();
        match res {
            Ok(Ok(detail)) => println!("criterion {n:2} ({name}): PASS — {detail} [{el:.1}s]"),
            Ok(Err(msg)) => {
                failed = true;
                println!("criterion {n:2} ({name}): FAIL — {msg} [{el:.1}s]");
            }
            Err(_) => {
                failed = true;
                println!("criterion {n:2} ({name}): FAIL — panicked [{el:.1}s]");
            }
        }
    }
    if failed {
        std::process::exit(1);
    }
}
