//! Five-block convolutional encoder over the spatial-frequency input, each
//! block closed by a Multi-kernel Aggregation Block (MKAB). Blocks 2-5 halve
//! the spatial size via stride 2 on their first convolution.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Fwd, ParamStore};

/// The five encoder feature maps, shallow to deep. `maps[0]` is at full
/// resolution; each later map halves the previous spatial size.
pub struct FeaturePyramid {
    pub maps: [Tensor; 5],
}

impl FeaturePyramid {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.maps.iter().map(|m| m.shape()).collect()
    }
}

const MKAB_KERNELS: [usize; 4] = [1, 3, 5, 7];

pub fn register_encoder_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let mut in_ch = 2usize;
    for (bi, &c) in cfg.encoder_channels.iter().enumerate() {
        let b = bi + 1;
        store.insert(
            &format!("enc.b{b}.conv1.w"),
            nn::he_normal(rng, &[c, in_ch, 3, 3], in_ch * 9),
        );
        nn::register_bn(store, &format!("enc.b{b}.bn1"), c);
        store.insert(
            &format!("enc.b{b}.conv2.w"),
            nn::he_normal(rng, &[c, c, 3, 3], c * 9),
        );
        nn::register_bn(store, &format!("enc.b{b}.bn2"), c);
        // MKAB: four parallel group convolutions, shared BN, channel attention
        let cg = c / 4;
        for (gi, &k) in MKAB_KERNELS.iter().enumerate() {
            store.insert(
                &format!("enc.b{b}.mkab.g{gi}.w"),
                nn::he_normal(rng, &[cg, cg, k, k], cg * k * k),
            );
        }
        nn::register_bn(store, &format!("enc.b{b}.mkab.bn"), c);
        let hidden = (c / 4).max(1);
        store.insert(&format!("enc.b{b}.mkab.mlp.w1"), nn::he_normal(rng, &[c, hidden], c));
        store.insert(&format!("enc.b{b}.mkab.mlp.b1"), nn::zeros(&[hidden]));
        // zero-initialized final layer: attention factor starts at exactly 1.5
        store.insert(&format!("enc.b{b}.mkab.mlp.w2"), nn::zeros(&[hidden, c]));
        store.insert(&format!("enc.b{b}.mkab.mlp.b2"), nn::zeros(&[c]));
        in_ch = c;
    }
}

/// Multi-kernel aggregation: split channels into four groups convolved with
/// kernel sizes {1,3,5,7}, concatenate, BN+ReLU, then scale each channel by
/// 1 + sigmoid(MLP(GMP - GAP)).
pub fn mkab_forward(fwd: &Fwd, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let c = x.shape()[1];
    if c % 4 != 0 {
        return Err(Error::Shape(format!("MKAB input channels {c} not divisible by 4")));
    }
    let cg = c / 4;
    let mut parts = Vec::with_capacity(4);
    for (gi, &k) in MKAB_KERNELS.iter().enumerate() {
        let xg = x.slice_axis(1, gi * cg, (gi + 1) * cg);
        let w = fwd.p(&format!("{prefix}.g{gi}.w"));
        parts.push(xg.conv2d(&w, 1, k / 2, 1));
    }
    let cat = Tensor::concat(&parts, 1);
    let ft = fwd.bn2d(&format!("{prefix}.bn"), &cat).relu();
    // channel attention on the max-minus-mean pooled descriptor
    let s = ft.max_spatial().sub(&ft.mean_spatial()); // [N, C]
    let h = nn::linear(&s, &fwd.p(&format!("{prefix}.mlp.w1")), &fwd.p(&format!("{prefix}.mlp.b1"))).relu();
    let a = nn::linear(&h, &fwd.p(&format!("{prefix}.mlp.w2")), &fwd.p(&format!("{prefix}.mlp.b2"))).sigmoid();
    let n = ft.shape()[0];
    let factor = a.add_scalar(1.0).reshape(&[n, c, 1, 1]);
    Ok(ft.mul(&factor))
}

/// Run the five encoder blocks over `x_sf` ([N, 2, H, W]) and return the
/// feature pyramid.
pub fn encode(fwd: &Fwd, cfg: &ModelConfig, x_sf: &Tensor) -> Result<FeaturePyramid> {
    let shape = x_sf.shape();
    if shape.len() != 4 || shape[1] != 2 {
        return Err(Error::Shape(format!("expected [N, 2, H, W] input, got {shape:?}")));
    }
    if shape[2] % 16 != 0 || shape[3] % 16 != 0 || shape[2] == 0 {
        return Err(Error::Shape(format!(
            "spatial dims must be divisible by 16, got {}x{}",
            shape[2], shape[3]
        )));
    }
    let mut maps: Vec<Tensor> = Vec::with_capacity(5);
    let mut x = x_sf.clone();
    for (bi, _) in cfg.encoder_channels.iter().enumerate() {
        let b = bi + 1;
        let stride = if b == 1 { 1 } else { 2 };
        let p = |s: &str| format!("enc.b{b}.{s}");
        let y = x.conv2d(&fwd.p(&p("conv1.w")), stride, 1, 1);
        let y = fwd.bn2d(&p("bn1"), &y).relu();
        let y = y.conv2d(&fwd.p(&p("conv2.w")), 1, 1, 1);
        let y = fwd.bn2d(&p("bn2"), &y).relu();
        let y = mkab_forward(fwd, &p("mkab"), &y)?;
        maps.push(y.clone());
        x = y;
    }
    Ok(FeaturePyramid {
        maps: maps.try_into().map_err(|_| Error::Shape("pyramid build".into())).unwrap(),
    })
}
