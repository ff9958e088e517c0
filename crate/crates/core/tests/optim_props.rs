use lmstack_core::model::Grads;
use lmstack_core::optim::{AfmConfig, AfmOptimizer, LrSchedule, MuParamPolicy, Optimizer};
use lmstack_core::{ParamStore, Tensor};
use proptest::prelude::*;

fn store(blocks: &[(&str, Vec<f64>)]) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (n, v) in blocks {
        p.insert(*n, Tensor::from_f64([v.len()], v).unwrap());
    }
    p
}

fn grads(blocks: &[(&str, Vec<f64>)]) -> Grads<f64> {
    blocks
        .iter()
        .map(|(n, v)| (n.to_string(), Tensor::from_f64([v.len()], v).unwrap()))
        .collect()
}

fn afm(global_clip: Option<f64>) -> AfmOptimizer {
    let cfg = AfmConfig {
        global_clip,
        ..AfmConfig::default()
    };
    AfmOptimizer::new(cfg, LrSchedule::constant(0.01), MuParamPolicy::simple(8, 32)).unwrap()
}

fn nonzero() -> impl Strategy<Value = f64> {
    prop_oneof![-100.0..-1e-3f64, 1e-3..100.0f64]
}

proptest! {
    #[test]
    fn first_step_is_scale_free(
        g in prop::collection::vec(nonzero(), 1..12),
        h in prop::collection::vec(nonzero(), 1..6),
        c in 1e-3..1e3f64,
        clip in any::<bool>(),
    ) {
        let w = |n: usize| (0..n).map(|i| i as f64 * 0.1 - 0.3).collect::<Vec<_>>();
        let mut p1 = store(&[("layers.0.wq", w(g.len())), ("embed", w(h.len()))]);
        let mut p2 = p1.clone();
        let g1 = grads(&[("layers.0.wq", g.clone()), ("embed", h.clone())]);
        let scaled = |v: &[f64]| v.iter().map(|x| x * c).collect::<Vec<_>>();
        let g2 = grads(&[("layers.0.wq", scaled(&g)), ("embed", scaled(&h))]);
        let clip = if clip { Some(1.0) } else { None };
        afm(clip).step(&mut p1, &g1).unwrap();
        afm(clip).step(&mut p2, &g2).unwrap();
        for (name, t) in p1.iter() {
            for (a, b) in t.data().iter().zip(p2.get(name).unwrap().data()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn second_moment_stays_non_negative(steps in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 4), 1..8)) {
        let mut opt = afm(Some(1.0));
        let mut p = store(&[("w", vec![0.0; 4])]);
        for g in steps {
            opt.step(&mut p, &grads(&[("w", g)])).unwrap();
            prop_assert!(opt.second_moment("w").unwrap().iter().all(|v| *v >= 0.0));
            prop_assert_eq!(opt.second_moment("w").unwrap().len(), 4);
        }
    }
}

#[test]
fn block_clip_holds_under_adversarial_gradients() {
    let mut opt = afm(None);
    let mut p = store(&[("a", vec![0.0; 16]), ("b", vec![0.0; 3])]);
    for step in 0..6 {
        // Norm-1e6 gradients whose direction flips and concentrates each step.
        let a: Vec<f64> = (0..16).map(|i| if i == step % 16 { 1e6 } else { (-1f64).powi(step) }).collect();
        let b = vec![1e6 / 3f64.sqrt() * if step % 2 == 0 { 1.0 } else { -1.0 }; 3];
        opt.step(&mut p, &grads(&[("a", a), ("b", b)])).unwrap();
        if step >= 3 {
            for (name, n) in opt.last_inst_norms() {
                assert!(*n <= 1.0 + 1e-12, "step {step} block {name}: {n}");
            }
        }
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut opt = afm(Some(1.0));
        let mut p = store(&[("w", vec![0.5, -0.25, 1.0])]);
        for s in 0..20 {
            let g = vec![(s as f64).sin(), (s as f64 * 0.7).cos(), 0.1 * s as f64];
            opt.step(&mut p, &grads(&[("w", g)])).unwrap();
        }
        p
    };
    assert_eq!(run(), run());
}
