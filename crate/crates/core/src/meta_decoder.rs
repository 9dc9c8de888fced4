//! Decoder whose stage blocks run with per-input generated parameters.
//!
//! Only the glue is learned directly: a 1x1 input projection, 1x1 skip
//! projections from the encoder pyramid, and the shared 3x3 output head.
//! Every stage block pulls its kernels from the generated parameter matrix
//! and its gamma/beta from the generated normalization vector, so the stage
//! computation differs per image.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::config::ModelConfig;
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::layout::{DecoderLayout, DecoderSchema, UnitKind};
use crate::nn::{self, Fwd, ParamStore};

const BN_EPS: f64 = 1e-5;

pub fn register_meta_decoder_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let c = cfg.decoder_width;
    let c5 = cfg.encoder_channels[4];
    store.insert("dec.proj_in.w", nn::he_normal(rng, &[c, c5, 1, 1], c5));
    store.insert("dec.proj_in.b", nn::zeros(&[c]));
    for s in 0..cfg.num_decoder_stages {
        let c_in = cfg.encoder_channels[cfg.num_decoder_stages - 1 - s];
        store.insert(&format!("dec.skip{}.w", s + 1), nn::he_normal(rng, &[c, c_in, 1, 1], c_in));
        store.insert(&format!("dec.skip{}.b", s + 1), nn::zeros(&[c]));
    }
    store.insert("dec.shared.w", nn::he_normal(rng, &[1, c, 3, 3], 9 * c));
    store.insert("dec.shared.b", nn::zeros(&[1]));
}

/// Slice one unit's rows out of the parameter matrix [B, N_q, P] and shape
/// them as per-sample conv weights (5-d for 2D convs, [B, C, K] for the 1D
/// attention kernels). Unused row slack beyond `kernel_elems` is dropped.
fn unit_weight(param_matrix: &Tensor, layout: &DecoderLayout, schema: &DecoderSchema, ui: usize) -> Tensor {
    let unit = &schema.units[ui];
    let start = layout.unit_row_offsets[ui];
    let rows = param_matrix
        .slice_axis(1, start, start + unit.out_channels)
        .slice_axis(2, 0, unit.kernel_elems());
    let b = rows.shape()[0];
    let k = unit.kernel_size();
    match unit.kind {
        UnitKind::Conv3Full | UnitKind::Conv1Pointwise => {
            rows.reshape(&[b, unit.out_channels, unit.in_channels, k, k])
        }
        UnitKind::Conv3Depthwise | UnitKind::Conv5Depthwise => {
            rows.reshape(&[b, unit.out_channels, 1, k, k])
        }
        UnitKind::AttentionConv1d => rows.reshape(&[b, unit.out_channels, k]),
    }
}

/// Generated batch norm: batch statistics while training, per-image spatial
/// statistics at inference; gamma/beta come from the norm vector per sample.
fn generated_bn(fwd: &Fwd, x: &Tensor, norm_vector: &Tensor, gamma: std::ops::Range<usize>, beta: std::ops::Range<usize>) -> Tensor {
    let c = gamma.len();
    let b = x.shape()[0];
    let g = norm_vector.slice_axis(1, gamma.start, gamma.end).reshape(&[b, c, 1, 1]);
    let bt = norm_vector.slice_axis(1, beta.start, beta.end).reshape(&[b, c, 1, 1]);
    let axes: &[usize] = if fwd.train { &[0, 2, 3] } else { &[2, 3] };
    let mu = x.mean_axes(axes);
    let xc = x.sub(&mu);
    let var = xc.mul(&xc).mean_axes(axes);
    xc.div(&var.add_scalar(BN_EPS).sqrt()).mul(&g).add(&bt)
}

/// Column/row position attention: pool the map along each spatial axis, run
/// the generated depthwise 1D kernels over the profiles, and gate with the
/// sigmoid of their broadcast sum.
fn position_attention_gate(d: &Tensor, w_col: &Tensor, w_row: &Tensor) -> Tensor {
    let s = d.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let col = d.mean_axes(&[2]).reshape(&[b, c, w]).conv1d_depthwise(w_col, 1).reshape(&[b, c, 1, w]);
    let row = d.mean_axes(&[3]).reshape(&[b, c, h]).conv1d_depthwise(w_row, 1).reshape(&[b, c, h, 1]);
    col.add(&row).sigmoid()
}

struct StageUnits {
    by_branch: std::collections::HashMap<&'static str, usize>,
}

fn stage_units(schema: &DecoderSchema, stage: usize) -> StageUnits {
    let mut by_branch = std::collections::HashMap::new();
    for (ui, u) in schema.units.iter().enumerate() {
        if u.stage == stage {
            by_branch.insert(u.branch, ui);
        }
    }
    StageUnits { by_branch }
}

/// Run the generated parts of one stage over `d`.
fn stage_block(
    fwd: &Fwd,
    schema: &DecoderSchema,
    layout: &DecoderLayout,
    param_matrix: &Tensor,
    norm_vector: &Tensor,
    bn_ranges: &[Option<(std::ops::Range<usize>, std::ops::Range<usize>)>],
    stage: usize,
    d: &Tensor,
) -> Tensor {
    let units = stage_units(schema, stage);
    let get = |branch: &str| *units.by_branch.get(branch).unwrap_or_else(|| panic!("missing branch {branch}"));
    let gbn = |ui: usize, x: &Tensor| -> Tensor {
        let (g, b) = bn_ranges[ui].clone().expect("unit has bn");
        generated_bn(fwd, x, norm_vector, g, b)
    };
    let conv = |ui: usize, x: &Tensor, pad: usize, groups: usize| -> Tensor {
        x.conv2d(&unit_weight(param_matrix, layout, schema, ui), 1, pad, groups)
    };
    let c = schema.c_dec;

    let main = get("main");
    let u = gbn(main, &conv(main, d, 1, 1)).relu();
    if !units.by_branch.contains_key("dw3") {
        return u;
    }
    let v = conv(get("dw3"), &u, 1, c).add(&conv(get("dw5"), &u, 2, c));
    let pw1 = get("pw1");
    let w = gbn(pw1, &conv(pw1, &v, 0, 1)).relu();
    let pw2 = get("pw2");
    let z = gbn(pw2, &conv(pw2, &w, 0, 1));
    let out = u.add(&z).relu();
    if let Some(&att_col) = units.by_branch.get("att_col") {
        let w_col = unit_weight(param_matrix, layout, schema, att_col);
        let w_row = unit_weight(param_matrix, layout, schema, get("att_row"));
        let gate = position_attention_gate(&out, &w_col, &w_row);
        out.mul(&gate)
    } else {
        out
    }
}

/// Decode full-resolution logits [B, 1, H, W] from the pyramid and the
/// generated parameters ([B, N_q, P] matrix plus [B, bn_param_count] vector).
pub fn decode_mask(
    fwd: &Fwd,
    cfg: &ModelConfig,
    schema: &DecoderSchema,
    layout: &DecoderLayout,
    pyr: &FeaturePyramid,
    param_matrix: &Tensor,
    norm_vector: &Tensor,
) -> Result<Tensor> {
    let pm = param_matrix.shape();
    if pm.len() != 3 || pm[1] != layout.n_q || pm[2] != layout.p {
        return Err(Error::Shape(format!(
            "parameter matrix {:?}, expected [B, {}, {}]",
            pm, layout.n_q, layout.p
        )));
    }
    if norm_vector.shape() != vec![pm[0], layout.bn_param_count] {
        return Err(Error::Shape(format!(
            "norm vector {:?}, expected [B, {}]",
            norm_vector.shape(),
            layout.bn_param_count
        )));
    }
    let bn_ranges = layout.bn_ranges(schema);
    let c = cfg.decoder_width;
    let bias = |name: &str| fwd.p(name).reshape(&[c, 1, 1]);
    let mut d = pyr.maps[4].conv2d(&fwd.p("dec.proj_in.w"), 1, 0, 1).add(&bias("dec.proj_in.b"));
    for s in 0..cfg.num_decoder_stages {
        d = d.upsample2();
        let skip_src = &pyr.maps[cfg.num_decoder_stages - 1 - s];
        let skip = skip_src
            .conv2d(&fwd.p(&format!("dec.skip{}.w", s + 1)), 1, 0, 1)
            .add(&bias(&format!("dec.skip{}.b", s + 1)));
        d = d.add(&skip);
        d = stage_block(fwd, schema, layout, param_matrix, norm_vector, &bn_ranges, s, &d);
    }
    let logits = d
        .conv2d(&fwd.p("dec.shared.w"), 1, 1, 1)
        .add(&fwd.p("dec.shared.b").reshape(&[1, 1, 1]));
    Ok(logits)
}
