//! Querying transformer: learned decoder-parameter queries attend to the
//! image condition and come out as the rows of the parameter tensor plus the
//! normalization token. Pre-norm layers, residual everywhere, no final
//! normalization — so a freshly zeroed output path returns the queries
//! unchanged.

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Arr, Tensor};
use crate::config::ModelConfig;
use crate::layout::{DecoderLayout, DecoderSchema};
use crate::nn::{self, Fwd, ParamStore};

const Q_INIT_STD: f64 = 0.02;
const PROJ_STD: f64 = 0.02;

fn register_attention(store: &mut ParamStore, prefix: &str, ct: usize, kv_dim: usize, rng: &mut ChaCha8Rng) {
    store.insert(&format!("{prefix}.wq"), nn::normal(rng, &[ct, ct], PROJ_STD));
    store.insert(&format!("{prefix}.bq"), nn::zeros(&[ct]));
    store.insert(&format!("{prefix}.wk"), nn::normal(rng, &[kv_dim, ct], PROJ_STD));
    store.insert(&format!("{prefix}.bk"), nn::zeros(&[ct]));
    store.insert(&format!("{prefix}.wv"), nn::normal(rng, &[kv_dim, ct], PROJ_STD));
    store.insert(&format!("{prefix}.bv"), nn::zeros(&[ct]));
    store.insert(&format!("{prefix}.wo"), nn::normal(rng, &[ct, ct], PROJ_STD));
    store.insert(&format!("{prefix}.bo"), nn::zeros(&[ct]));
}

fn register_ln(store: &mut ParamStore, prefix: &str, ct: usize) {
    store.insert(&format!("{prefix}.g"), nn::ones(&[ct]));
    store.insert(&format!("{prefix}.b"), nn::zeros(&[ct]));
}

pub fn register_hypernet_params(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    layout: &DecoderLayout,
    schema: &DecoderSchema,
    rng: &mut ChaCha8Rng,
) {
    let ct = cfg.token_dim;
    store.insert("hyper.q_init", nn::normal(rng, &[layout.n_q + 1, ct], Q_INIT_STD));
    for j in 0..cfg.num_layers {
        let p = format!("hyper.l{j}");
        register_ln(store, &format!("{p}.ln1"), ct);
        register_attention(store, &format!("{p}.self"), ct, ct, rng);
        register_ln(store, &format!("{p}.ln2"), ct);
        register_attention(store, &format!("{p}.cross"), ct, ct, rng);
        register_ln(store, &format!("{p}.ln3"), ct);
        store.insert(&format!("{p}.ffn.w1"), nn::normal(rng, &[ct, 4 * ct], PROJ_STD));
        store.insert(&format!("{p}.ffn.b1"), nn::zeros(&[4 * ct]));
        store.insert(&format!("{p}.ffn.w2"), nn::normal(rng, &[4 * ct, ct], PROJ_STD));
        store.insert(&format!("{p}.ffn.b2"), nn::zeros(&[ct]));
    }
    store.insert("head.param.w", nn::normal(rng, &[ct, layout.p], PROJ_STD));
    store.insert("head.param.b", nn::zeros(&[layout.p]));
    store.insert("head.norm.w", nn::normal(rng, &[ct, layout.bn_param_count], PROJ_STD));
    // bias +1 at gamma positions so generated BN starts near identity
    let mut nb = vec![0.0; layout.bn_param_count];
    for (g, _) in layout.bn_ranges(schema).into_iter().flatten() {
        for i in g {
            nb[i] = 1.0;
        }
    }
    store.insert("head.norm.b", Arr::from_shape_vec(IxDyn(&[layout.bn_param_count]), nb).unwrap());
}

/// Split the channel axis into heads: [B, T, C] -> [B, H, T, D].
fn split_heads(x: &Tensor, heads: usize, head_dim: usize) -> Tensor {
    let s = x.shape();
    x.reshape(&[s[0], s[1], heads, head_dim]).permute(&[0, 2, 1, 3])
}

fn merge_heads(x: &Tensor) -> Tensor {
    let s = x.shape();
    x.permute(&[0, 2, 1, 3]).reshape(&[s[0], s[2], s[1] * s[3]])
}

/// Multi-head attention of `q_in` over `kv_in`, followed by the output
/// projection. Shapes [B, Tq, C] x [B, Tk, C] -> [B, Tq, C].
fn attention(fwd: &Fwd, prefix: &str, q_in: &Tensor, kv_in: &Tensor, heads: usize, head_dim: usize) -> Tensor {
    let q = nn::linear(q_in, &fwd.p(&format!("{prefix}.wq")), &fwd.p(&format!("{prefix}.bq")));
    let k = nn::linear(kv_in, &fwd.p(&format!("{prefix}.wk")), &fwd.p(&format!("{prefix}.bk")));
    let v = nn::linear(kv_in, &fwd.p(&format!("{prefix}.wv")), &fwd.p(&format!("{prefix}.bv")));
    let qh = split_heads(&q, heads, head_dim);
    let kh = split_heads(&k, heads, head_dim);
    let vh = split_heads(&v, heads, head_dim);
    let out = merge_heads(&qh.scaled_attention(&kh, &vh, 1.0 / (head_dim as f64).sqrt()));
    nn::linear(&out, &fwd.p(&format!("{prefix}.wo")), &fwd.p(&format!("{prefix}.bo")))
}

fn pre_norm(fwd: &Fwd, prefix: &str, x: &Tensor) -> Tensor {
    nn::layer_norm(x, &fwd.p(&format!("{prefix}.g")), &fwd.p(&format!("{prefix}.b")))
}

/// Run the querying transformer: tile the learned queries over the batch and
/// refine them against the condition `c` [B, L, C_T].
/// Returns [B, N_q + 1, C_T].
pub fn generate_decoder_tokens(fwd: &Fwd, cfg: &ModelConfig, c: &Tensor) -> Tensor {
    let b = c.shape()[0];
    let tile = fwd.tape.constant(Arr::zeros(IxDyn(&[b, 1, 1])));
    let q0 = fwd.p("hyper.q_init");
    let qs = q0.shape();
    // The first self-attention still sees the same (tiled) queries for every
    // sample, so it runs once on [1, N_q + 1, C_T] and the result broadcasts
    // over the batch; only cross-attention mixes per-sample information in.
    let mut x = q0.reshape(&[1, qs[0], qs[1]]);
    let mut tiled = false;
    for j in 0..cfg.num_layers {
        let p = format!("hyper.l{j}");
        let n1 = pre_norm(fwd, &format!("{p}.ln1"), &x);
        x = x.add(&attention(fwd, &format!("{p}.self"), &n1, &n1, cfg.num_heads, cfg.head_dim));
        if !tiled {
            x = x.add(&tile);
            tiled = true;
        }
        let n2 = pre_norm(fwd, &format!("{p}.ln2"), &x);
        x = x.add(&attention(fwd, &format!("{p}.cross"), &n2, c, cfg.num_heads, cfg.head_dim));
        let n3 = pre_norm(fwd, &format!("{p}.ln3"), &x);
        let h = nn::linear(&n3, &fwd.p(&format!("{p}.ffn.w1")), &fwd.p(&format!("{p}.ffn.b1"))).gelu();
        x = x.add(&nn::linear(&h, &fwd.p(&format!("{p}.ffn.w2")), &fwd.p(&format!("{p}.ffn.b2"))));
    }
    if !tiled {
        x = x.add(&tile);
    }
    x
}

/// Project refined tokens to the parameter matrix [B, N_q, P] and the
/// normalization vector [B, bn_param_count] (from the extra trailing token).
pub fn project_tokens(fwd: &Fwd, layout: &DecoderLayout, tokens: &Tensor) -> (Tensor, Tensor) {
    let n_q = layout.n_q;
    let rows = tokens.slice_axis(1, 0, n_q);
    let params = nn::linear(&rows, &fwd.p("head.param.w"), &fwd.p("head.param.b"));
    let norm_tok = tokens.slice_axis(1, n_q, n_q + 1);
    let norm = nn::linear(&norm_tok, &fwd.p("head.norm.w"), &fwd.p("head.norm.b"));
    let ns = norm.shape();
    (params, norm.reshape(&[ns[0], ns[2]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::config::DecoderVariantTag;
    use crate::layout::compute_layout;
    use rand::SeedableRng;

    fn setup(cfg: &ModelConfig, seed: u64) -> (ParamStore, DecoderLayout, DecoderSchema) {
        let schema = DecoderSchema::build(cfg.decoder_variant, cfg);
        let layout = compute_layout(&schema, cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_hypernet_params(&mut store, cfg, &layout, &schema, &mut rng);
        (store, layout, schema)
    }

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.input_size = (16, 16);
        cfg.decoder_width = 8;
        cfg.num_layers = 1;
        cfg.decoder_variant = DecoderVariantTag::Basic;
        cfg
    }

    fn rand_condition(rng: &mut ChaCha8Rng, b: usize, l: usize, ct: usize) -> Arr {
        nn::normal(rng, &[b, l, ct], 1.0)
    }

    #[test]
    fn zero_layers_returns_q_init() {
        let mut cfg = tiny_cfg();
        cfg.num_layers = 0;
        let (store, layout, _) = setup(&cfg, 1);
        let tape = Tape::new();
        let bind = store.bind(&tape);
        let fwd = Fwd::new(&tape, &bind, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = tape.constant(rand_condition(&mut rng, 2, 4, cfg.token_dim));
        let out = generate_decoder_tokens(&fwd, &cfg, &c).value();
        let q0 = store.get("hyper.q_init").clone();
        for b in 0..2 {
            for t in 0..layout.n_q + 1 {
                for ch in 0..cfg.token_dim {
                    assert_eq!(out[[b, t, ch]], q0[[t, ch]]);
                }
            }
        }
    }

    #[test]
    fn zeroed_output_paths_return_q_init() {
        let cfg = tiny_cfg();
        let (mut store, _, _) = setup(&cfg, 3);
        for name in ["hyper.l0.self.wo", "hyper.l0.cross.wo", "hyper.l0.ffn.w2"] {
            let shape = store.get(name).shape().to_vec();
            store.set(name, Arr::zeros(IxDyn(&shape)));
        }
        let tape = Tape::new();
        let bind = store.bind(&tape);
        let fwd = Fwd::new(&tape, &bind, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = tape.constant(rand_condition(&mut rng, 1, 4, cfg.token_dim));
        let out = generate_decoder_tokens(&fwd, &cfg, &c).value();
        let q0 = store.get("hyper.q_init").clone();
        let mut max = 0.0f64;
        for t in 0..out.shape()[1] {
            for ch in 0..cfg.token_dim {
                max = max.max((out[[0, t, ch]] - q0[[t, ch]]).abs());
            }
        }
        assert_eq!(max, 0.0);
    }

    #[test]
    fn condition_token_order_is_irrelevant_when_pe_absent() {
        // attention pools K/V by content; permuting condition tokens must not
        // change the output (position is injected upstream via c_pe)
        let cfg = tiny_cfg();
        let (store, _, _) = setup(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = rand_condition(&mut rng, 1, 6, cfg.token_dim);
        let mut c_perm = c.clone();
        for ch in 0..cfg.token_dim {
            c_perm[[0, 0, ch]] = c[[0, 3, ch]];
            c_perm[[0, 3, ch]] = c[[0, 0, ch]];
        }
        let run = |cv: &Arr| {
            let tape = Tape::new();
            let bind = store.bind(&tape);
            let fwd = Fwd::new(&tape, &bind, false);
            let ct = tape.constant(cv.clone());
            generate_decoder_tokens(&fwd, &cfg, &ct).value()
        };
        let a = run(&c);
        let b = run(&c_perm);
        let mut max = 0.0f64;
        for (x, y) in a.iter().zip(b.iter()) {
            max = max.max((x - y).abs());
        }
        assert!(max < 1e-10, "permutation sensitivity {max}");
    }

    #[test]
    fn deterministic_given_seed_and_input() {
        let cfg = tiny_cfg();
        let (store, _, _) = setup(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = rand_condition(&mut rng, 2, 4, cfg.token_dim);
        let run = || {
            let tape = Tape::new();
            let bind = store.bind(&tape);
            let fwd = Fwd::new(&tape, &bind, false);
            let ct = tape.constant(c.clone());
            generate_decoder_tokens(&fwd, &cfg, &ct).value()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn projection_shapes_and_gamma_bias() {
        let cfg = tiny_cfg();
        let (mut store, layout, schema) = setup(&cfg, 9);
        // zero the norm head weight: output should equal its bias, i.e. 1 at
        // gamma positions and 0 at beta positions
        let shape = store.get("head.norm.w").shape().to_vec();
        store.set("head.norm.w", Arr::zeros(IxDyn(&shape)));
        let tape = Tape::new();
        let bind = store.bind(&tape);
        let fwd = Fwd::new(&tape, &bind, false);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = tape.constant(rand_condition(&mut rng, 2, 4, cfg.token_dim));
        let tokens = generate_decoder_tokens(&fwd, &cfg, &c);
        let (pm, nv) = project_tokens(&fwd, &layout, &tokens);
        assert_eq!(pm.shape(), vec![2, layout.n_q, layout.p]);
        assert_eq!(nv.shape(), vec![2, layout.bn_param_count]);
        let nvv = nv.value();
        let mut expect = vec![0.0; layout.bn_param_count];
        for (g, _) in layout.bn_ranges(&schema).into_iter().flatten() {
            for i in g {
                expect[i] = 1.0;
            }
        }
        for b in 0..2 {
            for (i, &e) in expect.iter().enumerate() {
                assert_eq!(nvv[[b, i]], e);
            }
        }
    }

    #[test]
    fn gradient_flows_to_q_init_and_layer_weights() {
        let cfg = tiny_cfg();
        let (store, layout, _) = setup(&cfg, 11);
        let tape = Tape::new();
        let bind = store.bind(&tape);
        let fwd = Fwd::new(&tape, &bind, true);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = tape.constant(rand_condition(&mut rng, 1, 4, cfg.token_dim));
        let tokens = generate_decoder_tokens(&fwd, &cfg, &c);
        let (pm, nv) = project_tokens(&fwd, &layout, &tokens);
        let loss = pm.mul(&pm).sum().add(&nv.mul(&nv).sum());
        let grads = tape.backward(&loss);
        for name in ["hyper.q_init", "hyper.l0.self.wq", "hyper.l0.ffn.w1", "head.param.w", "head.norm.w"] {
            let g = grads.get(&bind.get(name)).expect("gradient present");
            assert!(g.iter().any(|&v| v != 0.0), "zero gradient for {name}");
        }
    }
}
