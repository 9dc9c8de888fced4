//! The single validated configuration object consumed by every other module.
//!
//! A config starts from a named profile (`paper` or `desk`), takes overrides
//! from a plain `key = value` file and/or CLI flags, and is validated once.
//! Unknown keys are hard errors.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderVariantTag {
    Basic,
    Multiscale,
    SpatialAttention,
}

impl DecoderVariantTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecoderVariantTag::Basic => "basic",
            DecoderVariantTag::Multiscale => "multiscale",
            DecoderVariantTag::SpatialAttention => "spatial_attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(DecoderVariantTag::Basic),
            "multiscale" => Ok(DecoderVariantTag::Multiscale),
            "spatial_attention" => Ok(DecoderVariantTag::SpatialAttention),
            other => Err(Error::Config(format!(
                "unknown decoder_variant '{other}' (expected basic | multiscale | spatial_attention)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Training crop (H, W).
    pub input_size: (usize, usize),
    /// C_1..C_5.
    pub encoder_channels: [usize; 5],
    /// High-pass Gaussian cutoff, in frequency-grid pixels.
    pub sigma_hp: f64,
    /// Transformer hidden dimension C_T.
    pub token_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Transformer depth l.
    pub num_layers: usize,
    /// Standardized decoder channel count C_dec (C_in = C_out everywhere).
    pub decoder_width: usize,
    pub decoder_variant: DecoderVariantTag,
    pub num_decoder_stages: usize,
    /// Dice weight in the total loss.
    pub lambda_dice: f64,
    pub lr_init: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Ablation: replace the hypernetwork by a directly learned constant
    /// parameter matrix of the same shape.
    pub static_decoder: bool,
}

impl ModelConfig {
    /// Full-scale defaults. The transformer width 384 follows from
    /// 6 heads x 64 dims.
    pub fn paper() -> Self {
        ModelConfig {
            input_size: (256, 256),
            encoder_channels: [32, 64, 128, 256, 512],
            sigma_hp: 5.0,
            token_dim: 384,
            num_heads: 6,
            head_dim: 64,
            num_layers: 6,
            decoder_width: 32,
            decoder_variant: DecoderVariantTag::SpatialAttention,
            num_decoder_stages: 4,
            lambda_dice: 0.5,
            lr_init: 8e-4,
            epochs: 800,
            batch_size: 8,
            seed: 0,
            static_decoder: false,
        }
    }

    /// CPU-sized preset: trains in minutes, keeps the generated parameter
    /// count well under 1e6.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: (64, 64),
            encoder_channels: [8, 16, 32, 64, 128],
            sigma_hp: 5.0,
            token_dim: 96,
            num_heads: 6,
            head_dim: 16,
            num_layers: 3,
            decoder_width: 32,
            decoder_variant: DecoderVariantTag::SpatialAttention,
            num_decoder_stages: 4,
            lambda_dice: 0.5,
            lr_init: 8e-4,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            static_decoder: false,
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown profile '{other}' (expected paper | desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let inv = |ok: bool, name: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("invariant violated: {name}")))
            }
        };
        inv(
            self.encoder_channels.windows(2).all(|w| w[0] < w[1]),
            "encoder_channels has exactly 5 entries, strictly increasing",
        )?;
        inv(
            self.token_dim == self.num_heads * self.head_dim,
            "C_T = num_heads × head_dim",
        )?;
        inv(self.decoder_width >= 3, "C_dec ≥ 3")?;
        inv(
            self.input_size.0 % 16 == 0 && self.input_size.1 % 16 == 0 && self.input_size.0 > 0,
            "input_size divisible by 16",
        )?;
        inv(
            self.encoder_channels.iter().all(|&c| c % 4 == 0),
            "encoder_channels divisible by 4 (MKAB group split)",
        )?;
        inv(self.token_dim % 4 == 0, "token_dim divisible by 4 (sine-cosine embedding)")?;
        inv(
            self.num_decoder_stages == 4,
            "num_decoder_stages = 4 (one per skip level)",
        )?;
        if self.decoder_variant != DecoderVariantTag::Basic {
            inv(
                self.decoder_width % 2 == 0,
                "decoder_width even (pointwise compression to C_dec/2)",
            )?;
        }
        inv(self.sigma_hp > 0.0, "sigma_hp > 0")?;
        inv(self.lambda_dice >= 0.0, "lambda_dice ≥ 0")?;
        inv(self.batch_size > 0 && self.epochs > 0, "batch_size and epochs positive")?;
        // The three condition-token summands must land on the same grid.
        condition_grid(self.input_size.0)?;
        condition_grid(self.input_size.1)?;
        Ok(())
    }

    /// Serialize as the external `key = value` config format.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("input_size", format!("{}x{}", self.input_size.0, self.input_size.1));
        put(
            "encoder_channels",
            self.encoder_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        put("sigma_hp", format!("{:?}", self.sigma_hp));
        put("token_dim", self.token_dim.to_string());
        put("num_heads", self.num_heads.to_string());
        put("head_dim", self.head_dim.to_string());
        put("num_layers", self.num_layers.to_string());
        put("decoder_width", self.decoder_width.to_string());
        put("decoder_variant", self.decoder_variant.as_str().to_string());
        put("num_decoder_stages", self.num_decoder_stages.to_string());
        put("lambda_dice", format!("{:?}", self.lambda_dice));
        put("lr_init", format!("{:?}", self.lr_init));
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seed", self.seed.to_string());
        put("static_decoder", self.static_decoder.to_string());
        s
    }

    /// Hex SHA-256 of the canonical serialized form; embedded in checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_kv_string().as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-scale condition grid extent along one image dimension: the largest
/// divisor of H/16 not exceeding H/32 (at least 1). For the full-scale
/// geometry this is exactly H/32; it degrades gracefully for small or
/// non-multiple-of-32 test sizes.
pub fn condition_grid(h: usize) -> Result<usize> {
    if h % 16 != 0 || h == 0 {
        return Err(Error::Config("invariant violated: input_size divisible by 16".into()));
    }
    let h5 = h / 16;
    let target = (h / 32).max(1);
    let g = (1..=target).rev().find(|g| h5 % g == 0).unwrap_or(1);
    Ok(g)
}

/// Parse the plain-text config format: one `key = value` per line, `#`
/// comments, blank lines ignored.
pub fn parse_kv(text: &str) -> Result<IndexMap<String, String>> {
    let mut map = IndexMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1)));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Build a validated config from a raw key-value map. The `profile` key (if
/// any) selects the base preset; every other key overrides one field.
/// Unknown keys are errors.
pub fn validate_config(raw: &IndexMap<String, String>) -> Result<ModelConfig> {
    let mut cfg = match raw.get("profile") {
        Some(p) => ModelConfig::profile(p)?,
        None => ModelConfig::desk(),
    };
    for (k, v) in raw {
        apply_key(&mut cfg, k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_key(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::Config(format!("invalid value '{v}' for key '{key}'")))
    }
    match key {
        "profile" => {} // handled by the caller
        "input_size" => {
            let (h, w) = match value.split_once('x') {
                Some((h, w)) => (num(key, h.trim())?, num(key, w.trim())?),
                None => {
                    let s: usize = num(key, value)?;
                    (s, s)
                }
            };
            cfg.input_size = (h, w);
        }
        "encoder_channels" => {
            let parts: Vec<usize> = value
                .split(',')
                .map(|p| num(key, p.trim()))
                .collect::<Result<_>>()?;
            if parts.len() != 5 {
                return Err(Error::Config(
                    "invariant violated: encoder_channels has exactly 5 entries, strictly increasing".into(),
                ));
            }
            cfg.encoder_channels = [parts[0], parts[1], parts[2], parts[3], parts[4]];
        }
        "sigma_hp" => cfg.sigma_hp = num(key, value)?,
        "token_dim" => cfg.token_dim = num(key, value)?,
        "num_heads" => cfg.num_heads = num(key, value)?,
        "head_dim" => cfg.head_dim = num(key, value)?,
        "num_layers" => cfg.num_layers = num(key, value)?,
        "decoder_width" => cfg.decoder_width = num(key, value)?,
        "decoder_variant" => cfg.decoder_variant = DecoderVariantTag::parse(value)?,
        "num_decoder_stages" => cfg.num_decoder_stages = num(key, value)?,
        "lambda_dice" => cfg.lambda_dice = num(key, value)?,
        "lr_init" => cfg.lr_init = num(key, value)?,
        "epochs" => cfg.epochs = num(key, value)?,
        "batch_size" => cfg.batch_size = num(key, value)?,
        "seed" => cfg.seed = num(key, value)?,
        "static_decoder" => cfg.static_decoder = num(key, value)?,
        other => return Err(Error::Config(format!("unknown config key '{other}'"))),
    }
    Ok(())
}
