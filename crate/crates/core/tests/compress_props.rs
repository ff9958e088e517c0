use lmstack_core::compress::{
    effective_bpw, kmeans_1d, learn_mask, palettize, plan_mixed, prune, quantize, GroupAxis, LoraAdapter, MaskTrainConfig, MaskTrainer,
    PalettizeOptions, PruneMask, QuantPlan,
};
use lmstack_core::model::{proj_name, ForwardCtx, Model, ModelConfig, Proj};
use lmstack_core::{SeedTree, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

fn small() -> ModelConfig {
    ModelConfig {
        model_dim: 16,
        head_dim: 8,
        n_query_heads: 2,
        n_kv_heads: 1,
        n_layers: 2,
        vocab_size: 20,
        ffn_hidden_dim: 32,
        rope_base: 10_000.0,
        max_seq_len: 32,
        norm_eps: 1e-5,
    }
}

fn tokens(n: usize, vocab: u32, seed: u64) -> Vec<u32> {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(0..vocab)).collect()
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::new([rows, cols], data).unwrap()
}

fn rel_frobenius(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    (num / a.data().iter().map(|x| x * x).sum::<f64>()).sqrt()
}

#[test]
fn four_bit_beats_two_bit_by_an_order_of_magnitude() {
    let w = gaussian(64, 64, 3);
    let mut rng = SeedTree::new(3).stream("pal", 0);
    let e4 = rel_frobenius(&w, &palettize(&w, &PalettizeOptions::new(4, GroupAxis::Cols), &mut rng).unwrap().dequantize());
    let e2 = rel_frobenius(&w, &palettize(&w, &PalettizeOptions::new(2, GroupAxis::Cols), &mut rng).unwrap().dequantize());
    eprintln!("relative error: 4-bit {e4:.5}, 2-bit {e2:.5}");
    let (n4, n2) = (e4 * e4, e2 * e2);
    assert!(n4 < 0.05, "4-bit normalized squared error {n4}");
    assert!(n2 >= 10.0 * n4, "2-bit {n2} vs 4-bit {n4}");
    // Lloyd-Max optimal Gaussian quantizers: 0.0975 (16 levels), 0.3425 (4 levels).
    assert!(e4 < 0.1 && e2 < 0.36, "{e4} {e2}");
}

#[test]
fn lora_with_zero_alpha_matches_base_bit_exactly() {
    let m = Model::<f32>::init(small(), &SeedTree::new(1)).unwrap();
    let mut ad = LoraAdapter::new(&m.config, 4, 0.0, &SeedTree::new(2)).unwrap();
    for (n, t) in ad.params.iter_mut() {
        if n.ends_with(".B") {
            *t = t.map(|_| 0.37);
        }
    }
    let seq = tokens(8, 20, 5);
    let base = m.logits(&seq).unwrap();
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, false);
    let (a, _) = ad.bind(&mut tape, false);
    let out = m
        .forward(&mut tape, &vars, &[&seq], &ForwardCtx { adapters: Some(&a), ..Default::default() })
        .unwrap();
    assert_eq!(tape.value(out).data(), base.data());
}

#[test]
fn fresh_adapter_is_identity() {
    let m = Model::<f32>::init(small(), &SeedTree::new(1)).unwrap();
    let ad = LoraAdapter::new(&m.config, 16, 16.0, &SeedTree::new(2)).unwrap();
    let seq = tokens(8, 20, 6);
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, false);
    let (a, _) = ad.bind(&mut tape, false);
    let out = m
        .forward(&mut tape, &vars, &[&seq], &ForwardCtx { adapters: Some(&a), ..Default::default() })
        .unwrap();
    assert_eq!(tape.value(out).data(), m.logits(&seq).unwrap().data());
}

fn random_mask(cfg: &ModelConfig, k: usize, seed: u64) -> PruneMask {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    PruneMask {
        scores: (0..cfg.n_layers).map(|_| (0..cfg.ffn_hidden_dim).map(|_| r.random()).collect()).collect(),
        temperature: 0.1,
        k,
    }
}

#[test]
fn pruned_model_equals_masked_model() {
    let m = Model::<f64>::init(small(), &SeedTree::new(4)).unwrap();
    let mask = random_mask(&m.config, 12, 9);
    let pruned = prune(&m, &mask).unwrap();
    let seq = tokens(8, 20, 7);

    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, false);
    let masks: Vec<_> = mask.hard_tensors::<f64>().into_iter().map(|t| tape.constant(t)).collect();
    let out = m
        .forward(&mut tape, &vars, &[&seq], &ForwardCtx { ffn_masks: Some(&masks), ..Default::default() })
        .unwrap();
    let want = tape.value(out).clone();
    let got = pruned.logits(&seq).unwrap();
    let diff = want.data().iter().zip(got.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-6, "max abs diff {diff}");

    let d = m.config.model_dim;
    let removed = m.config.ffn_hidden_dim - 12;
    assert_eq!(m.params.num_values() - pruned.params.num_values(), m.config.n_layers * removed * 3 * d);
}

#[test]
fn full_width_mask_is_identity() {
    let m = Model::<f32>::init(small(), &SeedTree::new(5)).unwrap();
    let mask = random_mask(&m.config, 32, 1);
    assert_eq!(prune(&m, &mask).unwrap(), m);
    let learned = learn_mask(&m, |_| Ok(vec![tokens(6, 20, 1)]), 32, &MaskTrainConfig::default()).unwrap();
    assert!(learned.hard().iter().all(|l| l.iter().all(|&b| b)));
    assert!(prune(&m, &random_mask(&small(), 32, 1)).is_ok());
    let mut bad = random_mask(&m.config, 8, 1);
    bad.scores.pop();
    assert!(prune(&m, &bad).is_err());
}

#[test]
fn learned_mask_finds_planted_units() {
    let cfg = small();
    let k = 8;
    let mut m = Model::<f64>::init(cfg.clone(), &SeedTree::new(8)).unwrap();
    for l in 0..cfg.n_layers {
        let w = m.params.get_mut(&proj_name(l, Proj::Down)).unwrap();
        let d = cfg.model_dim;
        for r in k..cfg.ffn_hidden_dim {
            for c in 0..d {
                w.data_mut()[r * d + c] = 0.0;
            }
        }
        for v in w.data_mut()[..k * d].iter_mut() {
            *v *= 4.0;
        }
    }
    let mc = MaskTrainConfig {
        steps: 60,
        lr: 0.05,
        temperature_start: 0.5,
        temperature_end: 0.05,
    };
    let mask = learn_mask(&m, |s| Ok((0..4).map(|i| tokens(12, 20, 100 * s + i)).collect()), k, &mc).unwrap();
    for keep in mask.hard() {
        let hits = keep[..k].iter().filter(|&&b| b).count();
        assert!(hits as f64 >= 0.9 * k as f64, "planted units kept: {hits}/{k}");
    }
}

#[test]
fn mask_training_resumes_bit_exactly() {
    let cfg = small();
    let m = Model::<f64>::init(cfg.clone(), &SeedTree::new(9)).unwrap();
    let mc = MaskTrainConfig {
        steps: 10,
        ..Default::default()
    };
    let batch = |s: u64| -> Vec<Vec<u32>> { (0..2).map(|i| tokens(10, 20, 7 * s + i)).collect() };
    let mut full = MaskTrainer::new(&cfg, 12, &mc).unwrap();
    for s in 0..10 {
        full.step(&m, &batch(s)).unwrap();
    }
    let mut first = MaskTrainer::new(&cfg, 12, &mc).unwrap();
    for s in 0..4 {
        first.step(&m, &batch(s)).unwrap();
    }
    let mut resumed = MaskTrainer::new(&cfg, 12, &mc).unwrap();
    resumed.load_state(&first.state()).unwrap();
    for s in 4..10 {
        resumed.step(&m, &batch(s)).unwrap();
    }
    assert_eq!(resumed.mask(), full.mask());
    assert_eq!(learn_mask(&m, |s| Ok(batch(s)), 12, &mc).unwrap(), full.mask());
}

#[test]
fn mixed_plan_meets_its_target() {
    let cfg = ModelConfig {
        model_dim: 64,
        head_dim: 16,
        n_query_heads: 4,
        n_kv_heads: 2,
        n_layers: 2,
        vocab_size: 40,
        ffn_hidden_dim: 128,
        rope_base: 10_000.0,
        max_seq_len: 16,
        norm_eps: 1e-5,
    };
    let m = Model::<f32>::init(cfg.clone(), &SeedTree::new(6)).unwrap();
    let base = QuantPlan::uniform(&cfg, 4);
    let (plan, errors) = plan_mixed(&m, &base, 3.7, &SeedTree::new(6)).unwrap();
    let bpw = effective_bpw(&plan, &cfg).unwrap().projection_bpw();
    assert!((bpw - 3.7).abs() <= 0.05, "{bpw}");
    assert!(errors.iter().all(|e| e.sq_error_2 > e.sq_error_4));
    assert!(plan.bits.values().any(|&b| b == 2));

    let ck = quantize(&m, &plan, &SeedTree::new(6)).unwrap();
    let q = ck.model::<f32>().unwrap();
    assert_eq!(q.config, cfg);
    assert_ne!(q, m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn few_distinct_values_reconstruct_exactly(
        palette in prop::collection::vec(-64i32..64, 1..=16),
        picks in prop::collection::vec(0usize..1000, 16 * 8),
        rows_axis in any::<bool>(),
    ) {
        // Eighths are exact in half precision.
        let vals: Vec<f64> = picks.iter().map(|&i| palette[i % palette.len()] as f64 / 8.0).collect();
        let w = Tensor::<f64>::new([8, 16], vals).unwrap();
        let axis = if rows_axis { GroupAxis::Rows } else { GroupAxis::Cols };
        let mut o = PalettizeOptions::new(4, axis);
        o.group_size = if rows_axis { 8 } else { 16 };
        let p = palettize(&w, &o, &mut SeedTree::new(1).stream("p", 0)).unwrap();
        prop_assert_eq!(p.dequantize::<f64>(), w);
        prop_assert!(p.indices.iter().all(|&i| i < 16));
    }

    #[test]
    fn kmeans_objective_is_monotone(values in prop::collection::vec(-10.0f64..10.0, 20..200), k in 2usize..9, seed in any::<u64>()) {
        let km = kmeans_1d(&values, k, 25, &mut SeedTree::new(seed).stream("km", 0)).unwrap();
        for w in km.objective.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", km.objective);
        }
        prop_assert!(km.assignment.iter().all(|&a| a < k));
    }

    #[test]
    fn relaxed_mask_mass_matches_k(scores in prop::collection::vec(-3.0f64..3.0, 4..64), frac in 0.05f64..0.95, t in 0.01f64..2.0) {
        let k = ((scores.len() as f64 * frac) as usize).clamp(1, scores.len() - 1);
        let (m, tau) = lmstack_core::compress::soft_top_k(&scores, k, t).unwrap();
        let s: f64 = m.iter().sum();
        prop_assert!((s - k as f64).abs() <= 0.5);
        // Past |z| ~ 36 the sigmoid rounds to exactly 0 or 1 in f64.
        for (&v, &x) in m.iter().zip(&scores) {
            prop_assert!((0.0..=1.0).contains(&v));
            if ((x - tau) / t).abs() < 30.0 {
                prop_assert!(v > 0.0 && v < 1.0);
            }
        }
    }
}
