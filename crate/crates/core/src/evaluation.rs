//! Segmentation and detection metrics plus the scenario-drift report.
//!
//! IoU is pixel-level and dataset-aggregated. Pd / Fa follow the detection
//! convention: connected components (8-connectivity) of the prediction are
//! matched to ground-truth target centroids; a target counts as detected if
//! any predicted component lands within `match_radius` of its centroid, and
//! pixels of unmatched components count as false alarms.

use ndarray::Array2;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;

pub const DEFAULT_MATCH_RADIUS: f64 = 3.0;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One connected component of a binary mask.
#[derive(Debug, Clone)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
    pub centroid: (f64, f64),
}

/// 8-connected components via union-find.
pub fn connected_components(mask: &Array2<u8>) -> Vec<Component> {
    let (h, w) = mask.dim();
    let idx = |y: usize, x: usize| y * w + x;
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let union = |parent: &mut [usize], a: usize, b: usize| {
        let ra = find(parent, a);
        let rb = find(parent, b);
        if ra != rb {
            parent[ra] = rb;
        }
    };
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 {
                continue;
            }
            // link to already-visited neighbors (previous row + left)
            let neighbors: [(isize, isize); 4] = [(-1, -1), (-1, 0), (-1, 1), (0, -1)];
            for (dy, dx) in neighbors {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny >= 0 && nx >= 0 && (nx as usize) < w && mask[[ny as usize, nx as usize]] != 0 {
                    union(&mut parent, idx(y, x), idx(ny as usize, nx as usize));
                }
            }
        }
    }
    let mut groups: std::collections::HashMap<usize, Vec<(usize, usize)>> = std::collections::HashMap::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] != 0 {
                let root = find(&mut parent, idx(y, x));
                groups.entry(root).or_default().push((y, x));
            }
        }
    }
    let mut comps: Vec<Component> = groups
        .into_values()
        .map(|pixels| {
            let n = pixels.len() as f64;
            let cy = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
            let cx = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
            Component { pixels, centroid: (cy, cx) }
        })
        .collect();
    comps.sort_by_key(|c| c.pixels[0]);
    comps
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct MetricReport {
    pub iou: f64,
    pub pd: f64,
    pub fa: f64,
    pub n_images: usize,
    pub n_targets: usize,
    pub n_detected: usize,
    pub false_pixels: usize,
    pub total_pixels: usize,
}

/// Dataset-level metrics over prediction / ground-truth mask pairs.
pub fn evaluate(preds: &[Array2<u8>], gts: &[Array2<u8>], match_radius: f64) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fne = 0usize;
    let mut r = MetricReport { n_images: preds.len(), ..Default::default() };
    for (p, g) in preds.iter().zip(gts) {
        if p.dim() != g.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs mask {:?}", p.dim(), g.dim())));
        }
        for (&pv, &gv) in p.iter().zip(g.iter()) {
            match (pv != 0, gv != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                _ => {}
            }
        }
        r.total_pixels += p.len();
        let gt_comps = connected_components(g);
        let pred_comps = connected_components(p);
        let mut detected = vec![false; gt_comps.len()];
        for pc in &pred_comps {
            // nearest ground-truth centroid
            let best = gt_comps
                .iter()
                .enumerate()
                .map(|(i, gc)| {
                    let d = ((pc.centroid.0 - gc.centroid.0).powi(2)
                        + (pc.centroid.1 - gc.centroid.1).powi(2))
                    .sqrt();
                    (i, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((i, d)) if d <= match_radius => detected[i] = true,
                _ => r.false_pixels += pc.pixels.len(),
            }
        }
        r.n_targets += gt_comps.len();
        r.n_detected += detected.iter().filter(|&&d| d).count();
    }
    let denom = tp + fp + fne;
    r.iou = if denom == 0 { 1.0 } else { tp as f64 / denom as f64 };
    // images without targets contribute nothing to the Pd denominator
    r.pd = if r.n_targets == 0 { 1.0 } else { r.n_detected as f64 / r.n_targets as f64 };
    r.fa = if r.total_pixels == 0 { 0.0 } else { r.false_pixels as f64 / r.total_pixels as f64 };
    Ok(r)
}

pub fn binarize_logits(logits: &Array2<f64>, threshold: f64) -> Array2<u8> {
    logits.mapv(|z| u8::from(1.0 / (1.0 + (-z).exp()) >= threshold))
}

/// Run the model over samples one at a time and binarize at `threshold`.
/// Returns predictions plus the flattened generated parameter matrix per
/// image (used by the drift report).
pub fn predict(model: &Model, samples: &[Sample], threshold: f64) -> Result<(Vec<Array2<u8>>, Vec<Vec<f64>>)> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut params = Vec::with_capacity(samples.len());
    for s in samples {
        let (h, w) = s.image.dim();
        let mut images = ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 1, h, w]));
        for y in 0..h {
            for x in 0..w {
                images[[0, 0, y, x]] = s.image[[y, x]];
            }
        }
        let out = model.infer(&images)?;
        let lv = out.logits.value();
        let logits2 = Array2::from_shape_fn((h, w), |(y, x)| lv[[0, 0, y, x]]);
        preds.push(binarize_logits(&logits2, threshold));
        params.push(out.param_matrix.value().iter().cloned().collect());
    }
    Ok((preds, params))
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DriftReport {
    pub per_scenario: Vec<(String, MetricReport)>,
    /// Mean pairwise distance between parameter vectors within a scenario.
    pub intra: f64,
    /// Mean pairwise distance across scenarios.
    pub inter: f64,
    /// inter / intra; 1.0 with `degenerate` set when either term vanishes.
    pub ratio: f64,
    pub degenerate: bool,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Group samples by scenario, evaluate each group, and measure how strongly
/// the generated parameters separate scenarios.
pub fn drift_report(model: &Model, samples: &[Sample], threshold: f64, match_radius: f64) -> Result<DriftReport> {
    let (preds, params) = predict(model, samples, threshold)?;
    let mut scenario_names: Vec<String> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let name = s
            .scenario
            .map(|sc| sc.as_str().to_string())
            .ok_or_else(|| Error::Data(format!("sample '{}' has no scenario label", s.id)))?;
        match scenario_names.iter().position(|n| *n == name) {
            Some(g) => groups[g].push(i),
            None => {
                scenario_names.push(name);
                groups.push(vec![i]);
            }
        }
    }
    let mut per_scenario = Vec::new();
    for (name, idxs) in scenario_names.iter().zip(&groups) {
        let p: Vec<Array2<u8>> = idxs.iter().map(|&i| preds[i].clone()).collect();
        let g: Vec<Array2<u8>> = idxs.iter().map(|&i| samples[i].mask.clone()).collect();
        per_scenario.push((name.clone(), evaluate(&p, &g, match_radius)?));
    }
    let mut intra_sum = 0.0;
    let mut intra_n = 0usize;
    let mut inter_sum = 0.0;
    let mut inter_n = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let d = euclid(&params[i], &params[j]);
            if samples[i].scenario == samples[j].scenario {
                intra_sum += d;
                intra_n += 1;
            } else {
                inter_sum += d;
                inter_n += 1;
            }
        }
    }
    let intra = if intra_n > 0 { intra_sum / intra_n as f64 } else { 0.0 };
    let inter = if inter_n > 0 { inter_sum / inter_n as f64 } else { 0.0 };
    let degenerate = intra <= 0.0 || inter <= 0.0 || !(inter / intra).is_finite();
    let ratio = if degenerate { 1.0 } else { inter / intra };
    Ok(DriftReport { per_scenario, intra, inter, ratio, degenerate })
}

pub fn metrics_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from("group,iou,pd,fa,images,targets,detected,false_pixels,total_pixels\n");
    for (name, r) in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.8},{},{},{},{},{}\n",
            name, r.iou, r.pd, r.fa, r.n_images, r.n_targets, r.n_detected, r.false_pixels, r.total_pixels
        ));
    }
    out
}

#[cfg(test)]
pub mod oracle {
    //! Independent brute-force reference implementations used by tests.
    use super::*;

    /// Flood-fill components, no union-find.
    pub fn bfs_components(mask: &Array2<u8>) -> Vec<Vec<(usize, usize)>> {
        let (h, w) = mask.dim();
        let mut seen = Array2::<u8>::zeros((h, w));
        let mut comps = Vec::new();
        for sy in 0..h {
            for sx in 0..w {
                if mask[[sy, sx]] == 0 || seen[[sy, sx]] != 0 {
                    continue;
                }
                let mut queue = std::collections::VecDeque::from([(sy, sx)]);
                seen[[sy, sx]] = 1;
                let mut comp = Vec::new();
                while let Some((y, x)) = queue.pop_front() {
                    comp.push((y, x));
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let ny = y as isize + dy;
                            let nx = x as isize + dx;
                            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                                continue;
                            }
                            let (ny, nx) = (ny as usize, nx as usize);
                            if mask[[ny, nx]] != 0 && seen[[ny, nx]] == 0 {
                                seen[[ny, nx]] = 1;
                                queue.push_back((ny, nx));
                            }
                        }
                    }
                }
                comps.push(comp);
            }
        }
        comps
    }

    /// Straight-line re-derivation of the dataset metrics.
    pub fn metrics(preds: &[Array2<u8>], gts: &[Array2<u8>], radius: f64) -> (f64, f64, f64) {
        let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
        let (mut targets, mut detected, mut false_px, mut total_px) = (0usize, 0usize, 0usize, 0usize);
        for (p, g) in preds.iter().zip(gts) {
            for (&pv, &gv) in p.iter().zip(g.iter()) {
                if pv != 0 && gv != 0 {
                    tp += 1;
                } else if pv != 0 {
                    fp += 1;
                } else if gv != 0 {
                    fne += 1;
                }
            }
            total_px += p.len();
            let gcs = bfs_components(g);
            let pcs = bfs_components(p);
            let centroid = |c: &Vec<(usize, usize)>| {
                let n = c.len() as f64;
                (
                    c.iter().map(|q| q.0 as f64).sum::<f64>() / n,
                    c.iter().map(|q| q.1 as f64).sum::<f64>() / n,
                )
            };
            let gcents: Vec<(f64, f64)> = gcs.iter().map(centroid).collect();
            let mut hit = vec![false; gcs.len()];
            for pc in &pcs {
                let (py, px) = centroid(pc);
                let mut best: Option<(usize, f64)> = None;
                for (i, &(gy, gx)) in gcents.iter().enumerate() {
                    let d = ((py - gy).powi(2) + (px - gx).powi(2)).sqrt();
                    if best.is_none() || d < best.unwrap().1 {
                        best = Some((i, d));
                    }
                }
                match best {
                    Some((i, d)) if d <= radius => hit[i] = true,
                    _ => false_px += pc.len(),
                }
            }
            targets += gcs.len();
            detected += hit.iter().filter(|&&x| x).count();
        }
        let iou = if tp + fp + fne == 0 { 1.0 } else { tp as f64 / (tp + fp + fne) as f64 };
        let pd = if targets == 0 { 1.0 } else { detected as f64 / targets as f64 };
        let fa = if total_px == 0 { 0.0 } else { false_px as f64 / total_px as f64 };
        (iou, pd, fa)
    }
}
