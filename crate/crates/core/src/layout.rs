//! The structured 2D decoder representation: row/column bookkeeping of the
//! generated parameter tensor, and materialization of token values into
//! executable layer parameters.
//!
//! Rows are convolution kernels across all decoder layers; columns are
//! within-kernel parameter positions. The row width is fixed at
//! P = 9 * C_dec (the full 3x3 conv requirement); smaller kernels read a
//! prefix of their row and leave the remainder as slack.

use ndarray::Array2;

use crate::config::{DecoderVariantTag, ModelConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Conv3Full,
    Conv5Depthwise,
    Conv3Depthwise,
    Conv1Pointwise,
    AttentionConv1d,
}

impl UnitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            UnitKind::Conv3Full => "conv3_full",
            UnitKind::Conv5Depthwise => "conv5_depthwise",
            UnitKind::Conv3Depthwise => "conv3_depthwise",
            UnitKind::Conv1Pointwise => "conv1_pointwise",
            UnitKind::AttentionConv1d => "attention_conv1d",
        }
    }
}

/// One generated unit of the decoder schema.
#[derive(Debug, Clone)]
pub struct SchemaUnit {
    pub stage: usize,
    pub branch: &'static str,
    pub kind: UnitKind,
    pub out_channels: usize,
    pub in_channels: usize,
    /// Whether this unit is followed by generated batch norm.
    pub has_bn: bool,
}

impl SchemaUnit {
    pub fn kernel_size(&self) -> usize {
        match self.kind {
            UnitKind::Conv3Full | UnitKind::Conv3Depthwise | UnitKind::AttentionConv1d => 3,
            UnitKind::Conv5Depthwise => 5,
            UnitKind::Conv1Pointwise => 1,
        }
    }

    /// Scalars per kernel row: in-channels-per-kernel x k^2 (k for 1D units).
    pub fn kernel_elems(&self) -> usize {
        let k = self.kernel_size();
        match self.kind {
            UnitKind::Conv3Full | UnitKind::Conv1Pointwise => self.in_channels * k * k,
            UnitKind::Conv5Depthwise | UnitKind::Conv3Depthwise => k * k,
            UnitKind::AttentionConv1d => k,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderSchema {
    pub units: Vec<SchemaUnit>,
    pub c_dec: usize,
}

impl DecoderSchema {
    /// Schema for one of the three decoder variants over `num_decoder_stages`
    /// upsampling stages.
    pub fn build(variant: DecoderVariantTag, cfg: &ModelConfig) -> Self {
        let c = cfg.decoder_width;
        let mut units = Vec::new();
        for stage in 0..cfg.num_decoder_stages {
            units.push(SchemaUnit {
                stage,
                branch: "main",
                kind: UnitKind::Conv3Full,
                out_channels: c,
                in_channels: c,
                has_bn: true,
            });
            if variant == DecoderVariantTag::Basic {
                continue;
            }
            units.push(SchemaUnit {
                stage,
                branch: "dw3",
                kind: UnitKind::Conv3Depthwise,
                out_channels: c,
                in_channels: 1,
                has_bn: false,
            });
            units.push(SchemaUnit {
                stage,
                branch: "dw5",
                kind: UnitKind::Conv5Depthwise,
                out_channels: c,
                in_channels: 1,
                has_bn: false,
            });
            units.push(SchemaUnit {
                stage,
                branch: "pw1",
                kind: UnitKind::Conv1Pointwise,
                out_channels: c / 2,
                in_channels: c,
                has_bn: true,
            });
            units.push(SchemaUnit {
                stage,
                branch: "pw2",
                kind: UnitKind::Conv1Pointwise,
                out_channels: c,
                in_channels: c / 2,
                has_bn: true,
            });
            if variant == DecoderVariantTag::SpatialAttention {
                units.push(SchemaUnit {
                    stage,
                    branch: "att_col",
                    kind: UnitKind::AttentionConv1d,
                    out_channels: c,
                    in_channels: 1,
                    has_bn: false,
                });
                units.push(SchemaUnit {
                    stage,
                    branch: "att_row",
                    kind: UnitKind::AttentionConv1d,
                    out_channels: c,
                    in_channels: 1,
                    has_bn: false,
                });
            }
        }
        DecoderSchema { units, c_dec: c }
    }

    /// A homogeneous all-3x3-conv schema of `num_layers` layers; the case in
    /// which the factorization identity N_q * P = sum C_out * C_in * k^2
    /// holds with zero slack.
    pub fn homogeneous(num_layers: usize, c_dec: usize) -> Self {
        let units = (0..num_layers)
            .map(|stage| SchemaUnit {
                stage,
                branch: "main",
                kind: UnitKind::Conv3Full,
                out_channels: c_dec,
                in_channels: c_dec,
                has_bn: true,
            })
            .collect();
        DecoderSchema { units, c_dec }
    }

    pub fn is_homogeneous(&self) -> bool {
        self.units.iter().all(|u| u.kind == UnitKind::Conv3Full)
    }
}

/// Row/column bookkeeping of the parameter tensor.
#[derive(Debug, Clone)]
pub struct DecoderLayout {
    /// Total kernel rows = sum of out_channels over units.
    pub n_q: usize,
    /// Row width = C_dec * 9.
    pub p: usize,
    /// Row index -> (unit index, kernel index within the unit).
    pub row_map: Vec<(usize, usize)>,
    /// First row of each unit.
    pub unit_row_offsets: Vec<usize>,
    /// Total gamma/beta scalars of all BN-bearing units.
    pub bn_param_count: usize,
}

impl DecoderLayout {
    /// (gamma range, beta range) into the norm vector for each BN-bearing
    /// unit, in schema order; `None` for units without BN.
    pub fn bn_ranges(&self, schema: &DecoderSchema) -> Vec<Option<(std::ops::Range<usize>, std::ops::Range<usize>)>> {
        let mut offset = 0usize;
        schema
            .units
            .iter()
            .map(|u| {
                if u.has_bn {
                    let g = offset..offset + u.out_channels;
                    let b = offset + u.out_channels..offset + 2 * u.out_channels;
                    offset += 2 * u.out_channels;
                    Some((g, b))
                } else {
                    None
                }
            })
            .collect()
    }
}

pub fn compute_layout(schema: &DecoderSchema, cfg: &ModelConfig) -> Result<DecoderLayout> {
    let p = 9 * schema.c_dec;
    debug_assert_eq!(schema.c_dec, cfg.decoder_width);
    let mut row_map = Vec::new();
    let mut unit_row_offsets = Vec::with_capacity(schema.units.len());
    let mut bn_param_count = 0usize;
    for (ui, unit) in schema.units.iter().enumerate() {
        if unit.kernel_elems() > p {
            return Err(Error::Shape(format!(
                "unit {} ({}) needs {} scalars per row but the row width is {}",
                ui,
                unit.kind.as_str(),
                unit.kernel_elems(),
                p
            )));
        }
        unit_row_offsets.push(row_map.len());
        for k in 0..unit.out_channels {
            row_map.push((ui, k));
        }
        if unit.has_bn {
            bn_param_count += 2 * unit.out_channels;
        }
    }
    let n_q = row_map.len();
    if schema.is_homogeneous() {
        let flat: usize = schema
            .units
            .iter()
            .map(|u| u.out_channels * u.in_channels * u.kernel_size() * u.kernel_size())
            .sum();
        assert_eq!(n_q * p, flat, "factorization identity violated for homogeneous schema");
    }
    Ok(DecoderLayout {
        n_q,
        p,
        row_map,
        unit_row_offsets,
        bn_param_count,
    })
}

/// Per-input generated parameters bound to a schema.
#[derive(Debug, Clone)]
pub struct MaterializedDecoder {
    /// Per-unit kernel tensors, flattened row-major as
    /// [out_channels, kernel_elems].
    pub kernels: Vec<Array2<f64>>,
    /// Per-unit (gamma, beta), `None` for units without BN.
    pub bn: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    /// Which input generated these parameters.
    pub provenance: String,
}

/// Fill every schema unit from the projected parameter matrix (prefix-sliced
/// rows) and the norm vector (gamma first, then beta, per unit in schema
/// order).
pub fn materialize_decoder(
    layout: &DecoderLayout,
    schema: &DecoderSchema,
    param_matrix: &Array2<f64>,
    norm_vector: &[f64],
    provenance: impl Into<String>,
) -> Result<MaterializedDecoder> {
    if param_matrix.dim() != (layout.n_q, layout.p) {
        return Err(Error::Shape(format!(
            "parameter matrix {:?} does not match layout ({}, {})",
            param_matrix.dim(),
            layout.n_q,
            layout.p
        )));
    }
    if norm_vector.len() != layout.bn_param_count {
        return Err(Error::Shape(format!(
            "norm vector length {} != bn_param_count {}",
            norm_vector.len(),
            layout.bn_param_count
        )));
    }
    let mut kernels = Vec::with_capacity(schema.units.len());
    for (ui, unit) in schema.units.iter().enumerate() {
        let ke = unit.kernel_elems();
        let start = layout.unit_row_offsets[ui];
        let mut k = Array2::<f64>::zeros((unit.out_channels, ke));
        for r in 0..unit.out_channels {
            for c in 0..ke {
                k[[r, c]] = param_matrix[[start + r, c]];
            }
        }
        kernels.push(k);
    }
    let bn = layout
        .bn_ranges(schema)
        .into_iter()
        .map(|ranges| {
            ranges.map(|(g, b)| (norm_vector[g].to_vec(), norm_vector[b].to_vec()))
        })
        .collect();
    let dec = MaterializedDecoder {
        kernels,
        bn,
        provenance: provenance.into(),
    };
    for (unit, bn) in schema.units.iter().zip(&dec.bn) {
        debug_assert_eq!(unit.has_bn, bn.is_some());
        if let Some((g, b)) = bn {
            assert!(g.iter().chain(b.iter()).all(|v| v.is_finite()), "non-finite BN parameters");
        }
    }
    Ok(dec)
}

/// Write the used row prefixes of a materialized decoder back into an
/// N_q x P matrix (slack columns zero).
pub fn flatten_materialized(layout: &DecoderLayout, schema: &DecoderSchema, dec: &MaterializedDecoder) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((layout.n_q, layout.p));
    for (row, &(ui, k)) in layout.row_map.iter().enumerate() {
        let ke = schema.units[ui].kernel_elems();
        for c in 0..ke {
            m[[row, c]] = dec.kernels[ui][[k, c]];
        }
    }
    m
}

/// CSV layout table for the `inspect-layout` command.
pub fn layout_csv(schema: &DecoderSchema, layout: &DecoderLayout) -> String {
    let mut out = String::from("unit,stage,branch,kind,rows,used_width,slack\n");
    for (ui, unit) in schema.units.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            ui,
            unit.stage,
            unit.branch,
            unit.kind.as_str(),
            unit.out_channels,
            unit.kernel_elems(),
            layout.p - unit.kernel_elems()
        ));
    }
    out.push_str(&format!(
        "total,,,,{},{},{}\n",
        layout.n_q,
        layout.p,
        layout.bn_param_count
    ));
    out
}
