//! End-to-end model: frequency-assisted encoder, condition builder, querying
//! transformer (or its learned-constant ablation), and the generated decoder.

use ndarray::{Array2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Arr, Tensor};
use crate::conditioner;
use crate::config::ModelConfig;
use crate::encoder;
use crate::error::{Error, Result};
use crate::frequency;
use crate::hypernet;
use crate::layout::{compute_layout, DecoderLayout, DecoderSchema};
use crate::meta_decoder;
use crate::nn::{self, Fwd, ParamStore};

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub schema: DecoderSchema,
    pub layout: DecoderLayout,
}

pub struct ForwardOutput {
    /// [B, 1, H, W]
    pub logits: Tensor,
    /// [B, N_q, P]
    pub param_matrix: Tensor,
    /// [B, bn_param_count]
    pub norm_vector: Tensor,
}

impl Model {
    /// Build and initialize every parameter deterministically from the
    /// config seed. Parameter registration order is fixed, so two models
    /// from the same config are bit-identical.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let schema = DecoderSchema::build(cfg.decoder_variant, &cfg);
        let layout = compute_layout(&schema, &cfg)?;
        conditioner::patch_kernels(&cfg)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        encoder::register_encoder_params(&mut store, &cfg, &mut rng);
        if cfg.static_decoder {
            store.insert("static_dec.matrix", nn::normal(&mut rng, &[layout.n_q, layout.p], 0.02));
            let mut nv = vec![0.0; layout.bn_param_count];
            for (g, _) in layout.bn_ranges(&schema).into_iter().flatten() {
                for i in g {
                    nv[i] = 1.0;
                }
            }
            store.insert(
                "static_dec.norm",
                Arr::from_shape_vec(IxDyn(&[layout.bn_param_count]), nv).unwrap(),
            );
        } else {
            conditioner::register_conditioner_params(&mut store, &cfg, &mut rng);
            hypernet::register_hypernet_params(&mut store, &cfg, &layout, &schema, &mut rng);
        }
        meta_decoder::register_meta_decoder_params(&mut store, &cfg, &mut rng);
        Ok(Model { cfg, store, schema, layout })
    }

    /// Per-image standardization plus the high-pass channel:
    /// [N, 1, H, W] raw -> [N, 2, H, W].
    pub fn prepare_input(&self, images: &Arr) -> Result<Arr> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Shape(format!("expected images [N, 1, H, W], got {s:?}")));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let mut out = Arr::zeros(IxDyn(&[n, 2, h, w]));
        for i in 0..n {
            let img = Array2::from_shape_fn((h, w), |(r, c)| images[[i, 0, r, c]]);
            let norm = frequency::normalize_image(&img);
            let sf = frequency::highpass_filter(&norm, self.cfg.sigma_hp)?;
            for ch in 0..2 {
                for r in 0..h {
                    for c in 0..w {
                        out[[i, ch, r, c]] = sf.channels[[ch, r, c]];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Full forward pass over prepared input `x_sf` [N, 2, H, W].
    pub fn forward(&self, fwd: &Fwd, x_sf: &Tensor) -> Result<ForwardOutput> {
        let pyr = encoder::encode(fwd, &self.cfg, x_sf)?;
        let b = x_sf.shape()[0];
        let (param_matrix, norm_vector) = if self.cfg.static_decoder {
            let tile = fwd.tape.constant(Arr::zeros(IxDyn(&[b, 1, 1])));
            let m = fwd.p("static_dec.matrix");
            let pm = m.reshape(&[1, self.layout.n_q, self.layout.p]).add(&tile);
            let tile2 = fwd.tape.constant(Arr::zeros(IxDyn(&[b, 1])));
            let nv = fwd.p("static_dec.norm").reshape(&[1, self.layout.bn_param_count]).add(&tile2);
            (pm, nv)
        } else {
            let cond = conditioner::build_condition(fwd, &self.cfg, &pyr, x_sf)?;
            let tokens = hypernet::generate_decoder_tokens(fwd, &self.cfg, &cond.tokens);
            hypernet::project_tokens(fwd, &self.layout, &tokens)
        };
        let logits = meta_decoder::decode_mask(
            fwd,
            &self.cfg,
            &self.schema,
            &self.layout,
            &pyr,
            &param_matrix,
            &norm_vector,
        )?;
        Ok(ForwardOutput { logits, param_matrix, norm_vector })
    }

    /// Convenience: raw images in, logits out, on a fresh tape (inference).
    pub fn infer(&self, images: &Arr) -> Result<ForwardOutput> {
        let x = self.prepare_input(images)?;
        let tape = crate::autodiff::Tape::new();
        let bind = self.store.bind(&tape);
        let fwd = Fwd::new(&tape, &bind, false);
        self.forward(&fwd, &tape.constant(x))
    }
}
