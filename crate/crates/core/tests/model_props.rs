use lmstack_core::model::loss::cross_entropy;
use lmstack_core::model::{proj_name, rms_norm, rope, ForwardCtx, Model, ModelConfig, Proj, EMBED};
use lmstack_core::{SeedTree, Tape, Tensor};
use proptest::prelude::*;

fn small(n_q: usize, n_kv: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.model_dim = 32;
    cfg.head_dim = 8;
    cfg.n_query_heads = n_q;
    cfg.n_kv_heads = n_kv;
    cfg.ffn_hidden_dim = 48;
    cfg.vocab_size = 40;
    cfg.max_seq_len = 32;
    cfg
}

/// An MHA model computing the same function as `gqa`: every KV head is
/// copied out to the query heads that share it.
fn expand_kv(gqa: &Model<f64>) -> Model<f64> {
    let c = &gqa.config;
    let group = c.n_query_heads / c.n_kv_heads;
    let mut cfg = c.clone();
    cfg.n_kv_heads = c.n_query_heads;
    let mut params = gqa.params.clone();
    let hd = c.head_dim;
    for l in 0..c.n_layers {
        for p in [Proj::K, Proj::V] {
            let name = proj_name(l, p);
            let w = gqa.params.get(&name).unwrap();
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            let src = w.data();
            let mut out = Vec::with_capacity(rows * cols * group);
            for r in 0..rows {
                for h in 0..c.n_query_heads {
                    let g = h / group;
                    out.extend_from_slice(&src[r * cols + g * hd..r * cols + (g + 1) * hd]);
                }
            }
            *params.get_mut(&name).unwrap() = Tensor::new([rows, cols * group], out).unwrap();
        }
        let name = format!("layers.{l}.k_norm");
        let src = gqa.params.get(&name).unwrap().data().to_vec();
        let out: Vec<f64> = (0..c.n_query_heads).flat_map(|h| src[(h / group) * hd..(h / group + 1) * hd].to_vec()).collect();
        *params.get_mut(&name).unwrap() = Tensor::new([c.n_query_heads, hd], out).unwrap();
    }
    Model::from_params(cfg, params).unwrap()
}

fn unit_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rope_at_position_zero_is_identity(x in unit_vec(16), base in 100.0f64..1e7) {
        prop_assert_eq!(rope(&x, 0, base).unwrap(), x);
    }

    #[test]
    fn rope_scores_depend_only_on_offset(
        q in unit_vec(16),
        k in unit_vec(16),
        m in 0usize..200,
        n in 0usize..200,
        shift in 0usize..300,
        base in 100.0f64..1e7,
    ) {
        let dot = |a: usize, b: usize| -> f64 {
            let x = rope(&q, a, base).unwrap();
            let y = rope(&k, b, base).unwrap();
            x.iter().zip(&y).map(|(u, v)| u * v).sum()
        };
        prop_assert!((dot(m, n) - dot(m + shift, n + shift)).abs() < 1e-6);
    }

    #[test]
    fn rms_norm_ignores_input_scale(x in unit_vec(24), gain in unit_vec(24), s in 1e-3f64..1e3) {
        prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let scaled: Vec<f64> = x.iter().map(|v| v * s).collect();
        let a = rms_norm(&x, &gain, 0.0).unwrap();
        let b = rms_norm(&scaled, &gain, 0.0).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-10 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn gqa_equals_mha_with_shared_kv_heads(
        seed in any::<u64>(),
        n_kv in prop::sample::select(vec![1usize, 2, 4]),
        tokens in prop::collection::vec(0u32..40, 1..12),
    ) {
        let gqa = Model::<f64>::init(small(4, n_kv), &SeedTree::new(seed)).unwrap();
        let mha = expand_kv(&gqa);
        prop_assert_eq!(mha.config.n_kv_heads, 4);
        let (a, b) = (gqa.logits(&tokens).unwrap(), mha.logits(&tokens).unwrap());
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn tied_embedding_gets_input_and_output_gradient(seed in any::<u64>()) {
        let model = Model::<f64>::init(small(4, 2), &SeedTree::new(seed)).unwrap();
        // Token 39 is only ever a target, token 1 only an input.
        let seq = [1u32, 2, 3, 4, 5, 39];
        let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let logits = model.forward(&mut tape, &vars, &[&seq[..5]], &ForwardCtx::default()).unwrap();
        let l = cross_entropy(&mut tape, logits, &targets, None).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(vars.get(EMBED).unwrap()).unwrap();
        let d = model.config.model_dim;
        let row = |t: usize| &g.data()[t * d..(t + 1) * d];
        prop_assert!(row(39).iter().any(|v| *v != 0.0));
        prop_assert!(row(1).iter().any(|v| *v != 0.0));
        // Tokens absent from the sequence still get softmax-side gradient.
        prop_assert!(row(20).iter().any(|v| *v != 0.0));
    }
}
