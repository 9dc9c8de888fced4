//! Image-awareness condition c = c_im + c_hf + c_pe: multi-scale patch
//! tokens, high-frequency tokens from the two-channel input, and a fixed
//! sine-cosine positional embedding, all on a shared per-scale grid so the
//! element-wise sum is well defined.

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Arr, Tensor};
use crate::config::{condition_grid, ModelConfig};
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{self, Fwd, ParamStore};

/// The L x C_T condition for each image in the batch.
pub struct ConditionTokens {
    /// [N, L, C_T]
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

/// Patch (= kernel = stride) sizes fixed at model construction from the
/// training geometry: one per projected scale f2..f5, plus the x_sf patch.
/// At inference the grid scales with the image while kernels stay fixed.
pub fn patch_kernels(cfg: &ModelConfig) -> Result<([usize; 4], usize)> {
    let (h, w) = cfg.input_size;
    if h != w {
        return Err(Error::Config("training input_size must be square".into()));
    }
    let g = condition_grid(h)?;
    let mut ks = [0usize; 4];
    for (i, k) in ks.iter_mut().enumerate() {
        let hi = h / (1 << (i + 1)); // H_2..H_5
        if hi % g != 0 {
            return Err(Error::Config(format!(
                "conditioner geometry: scale size {hi} not divisible by grid {g}"
            )));
        }
        *k = hi / g;
    }
    Ok((ks, h / g))
}

pub fn register_conditioner_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let (ks, k_hf) = patch_kernels(cfg).expect("validated config");
    let ct = cfg.token_dim;
    for (i, &k) in ks.iter().enumerate() {
        let c_in = cfg.encoder_channels[i + 1];
        store.insert(
            &format!("cond.c{}.w", i + 2),
            nn::he_normal(rng, &[ct, c_in, k, k], c_in * k * k),
        );
        store.insert(&format!("cond.c{}.b", i + 2), nn::zeros(&[ct]));
    }
    store.insert("cond.hf.w", nn::he_normal(rng, &[ct, 2, k_hf, k_hf], 2 * k_hf * k_hf));
    store.insert("cond.hf.b", nn::zeros(&[ct]));
}

/// Fixed 2D sine-cosine embedding for one grid: first half of the channels
/// encodes the row position, second half the column position.
pub fn sincos_embedding(gh: usize, gw: usize, c_t: usize) -> Arr {
    assert_eq!(c_t % 4, 0, "token_dim must be divisible by 4");
    let half = c_t / 2;
    let pairs = half / 2;
    let axis_table = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|pos| {
                let mut row = Vec::with_capacity(half);
                for i in 0..pairs {
                    let freq = 1.0 / 10000f64.powf(i as f64 / pairs as f64);
                    row.push((pos as f64 * freq).sin());
                    row.push((pos as f64 * freq).cos());
                }
                row
            })
            .collect()
    };
    let rows = axis_table(gh);
    let cols = axis_table(gw);
    let mut pe = Arr::zeros(IxDyn(&[gh * gw, c_t]));
    for r in 0..gh {
        for c in 0..gw {
            let t = r * gw + c;
            for j in 0..half {
                pe[[t, j]] = rows[r][j];
                pe[[t, half + j]] = cols[c][j];
            }
        }
    }
    pe
}

/// Conv-patchify a map to tokens: kernel = stride = `k`, flattened row-major.
fn patchify(fwd: &Fwd, map: &Tensor, w_name: &str, b_name: &str, k: usize) -> Result<Tensor> {
    let s = map.shape();
    if s[2] % k != 0 || s[3] % k != 0 || s[2] < k {
        return Err(Error::Shape(format!(
            "conditioner geometry: map {}x{} not divisible by patch {k}",
            s[2], s[3]
        )));
    }
    let y = map.conv2d(&fwd.p(w_name), k, 0, 1); // [N, C_T, gh, gw]
    let ys = y.shape();
    let (n, ct, gh, gw) = (ys[0], ys[1], ys[2], ys[3]);
    let tokens = y.reshape(&[n, ct, gh * gw]).permute(&[0, 2, 1]);
    Ok(tokens.add(&fwd.p(b_name)))
}

/// Build the condition tokens for a batch: c_im from f2..f5, c_hf from x_sf
/// (tiled across the four scale blocks), plus the shared positional table.
pub fn build_condition(
    fwd: &Fwd,
    cfg: &ModelConfig,
    pyr: &FeaturePyramid,
    x_sf: &Tensor,
) -> Result<ConditionTokens> {
    let (ks, k_hf) = patch_kernels(cfg)?;
    let mut scale_tokens = Vec::with_capacity(4);
    let mut grid = (0usize, 0usize);
    for (i, &k) in ks.iter().enumerate() {
        let map = &pyr.maps[i + 1];
        let t = patchify(fwd, map, &format!("cond.c{}.w", i + 2), &format!("cond.c{}.b", i + 2), k)?;
        let s = map.shape();
        let g = (s[2] / k, s[3] / k);
        if i == 0 {
            grid = g;
        } else if g != grid {
            return Err(Error::Shape(format!(
                "conditioner geometry: scale {} grid {:?} != {:?}",
                i + 2,
                g,
                grid
            )));
        }
        scale_tokens.push(t);
    }
    let hf = patchify(fwd, x_sf, "cond.hf.w", "cond.hf.b", k_hf)?;
    if hf.shape()[1] != grid.0 * grid.1 {
        return Err(Error::Shape("conditioner geometry: x_sf grid mismatch".into()));
    }
    let c_im = Tensor::concat(&scale_tokens, 1);
    let c_hf = Tensor::concat(&[hf.clone(), hf.clone(), hf.clone(), hf], 1);
    let pe_one = sincos_embedding(grid.0, grid.1, cfg.token_dim);
    let pe_tiled = ndarray::concatenate(
        ndarray::Axis(0),
        &[pe_one.view(), pe_one.view(), pe_one.view(), pe_one.view()],
    )
    .unwrap();
    let c_pe = fwd.tape.constant(pe_tiled);
    Ok(ConditionTokens {
        tokens: c_im.add(&c_hf).add(&c_pe),
        grid,
    })
}
