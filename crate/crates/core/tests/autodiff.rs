use lmstack_core::tensor::gradcheck::check;
use lmstack_core::{SeedTree, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::Rng;

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = SeedTree::new(seed).stream("t", 0);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Projects `y` onto a fixed random direction so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let w = rand_tensor(tape.shape(y), seed ^ 0xabc, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

fn assert_close(inputs: &[Tensor<f64>], tol: f64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    for (i, r) in check(inputs, 1e-5, f).iter().enumerate() {
        let e = r.rel_error();
        assert!(e < tol, "input {i}: max relative error {e}");
    }
}

#[test]
fn add_and_matmul_examples() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
    let b = t.constant(Tensor::from_f64([2], &[3.0, 4.0]).unwrap());
    let c = t.add(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[4.0, 6.0]);

    let eye = t.constant(Tensor::from_f64([3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    let m = rand_tensor(&[3, 3], 9, -5.0, 5.0);
    let mv = t.constant(m.clone());
    let p = t.matmul(eye, mv).unwrap();
    assert_eq!(t.value(p), &m);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros([2, 3]).unwrap());
    let b = t.constant(Tensor::zeros([4, 2]).unwrap());
    let err = t.add(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "add",
            left: vec![2, 3],
            right: vec![4, 2]
        }
    );
    assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
    assert!(t.matmul(a, b).is_err());
}

#[test]
fn domain_errors_are_reported() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64([3], &[1.0, 0.0, -2.0]).unwrap());
    assert!(matches!(t.log(x), Err(TensorError::Domain { .. })));
    assert!(matches!(t.pow(x, 0.5), Err(TensorError::Domain { .. })));
    assert!(matches!(t.pow(x, -1.0), Err(TensorError::Domain { .. })));
    assert!(t.pow(x, 2.0).is_ok());
}

#[test]
fn backward_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum(sq);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);

    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
    let c = t.constant(Tensor::scalar(5.0));
    let loss = t.scale(c, 2.0);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0; 3]);

    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
    assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn softmax_vjp_matches_finite_differences() {
    let x = rand_tensor(&[8], 1, -3.0, 3.0);
    assert_close(&[x], 1e-6, |t, v| {
        let s = t.softmax(v[0]).unwrap();
        project(t, s, 2)
    });
}

#[test]
fn repeated_use_accumulates() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_f64([2], &[1.5, -0.5]).unwrap());
    let a = t.add(x, x).unwrap();
    let b = t.mul(a, x).unwrap();
    let loss = t.sum(b);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[6.0, -2.0]);
}

#[test]
fn linearity_of_gradients() {
    let x = rand_tensor(&[4, 5], 3, -2.0, 2.0);
    let f1 = |t: &mut Tape<f64>, v: Var| {
        let s = t.sigmoid(v);
        project(t, s, 10)
    };
    let f2 = |t: &mut Tape<f64>, v: Var| {
        let e = t.exp(v);
        let s = t.log_softmax(e).unwrap();
        project(t, s, 11)
    };
    let grad_of = |which: u8| {
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let l = match which {
            1 => f1(&mut t, v),
            2 => f2(&mut t, v),
            _ => {
                let a = f1(&mut t, v);
                let b = f2(&mut t, v);
                t.add(a, b).unwrap()
            }
        };
        t.backward(l).unwrap();
        t.grad(v).unwrap().to_f64()
    };
    let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(3));
    for i in 0..g1.len() {
        assert!((g1[i] + g2[i] - g12[i]).abs() < 1e-12);
    }
}

#[test]
fn forward_and_backward_are_bit_identical_across_runs() {
    let run = || {
        let x = rand_tensor(&[6, 8], 5, -1.0, 1.0);
        let w = rand_tensor(&[8, 8], 6, -1.0, 1.0);
        let mut t = Tape::<f32>::new();
        let xv = t.param(x.cast());
        let wv = t.param(w.cast());
        let h = t.matmul(xv, wv).unwrap();
        let mut r = SeedTree::new(3).stream("dropout", 0);
        let h = t.dropout(h, 0.1, &mut r).unwrap();
        let s = t.log_softmax(h).unwrap();
        let l = t.take_along(s, &[0, 1, 2, 3, 4, 5]).unwrap();
        let l = t.sum(l);
        t.backward(l).unwrap();
        (t.value(l).item(), t.grad(xv).unwrap().clone(), t.grad(wv).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

type Prim = fn(&mut Tape<f64>, &[Var]) -> Var;

fn primitives() -> Vec<(&'static str, Prim, Vec<Vec<usize>>, (f64, f64))> {
    // (name, op, input shapes, input range)
    vec![
        ("add", |t, v| t.add(v[0], v[1]).unwrap(), vec![vec![3, 4], vec![4]], (-10.0, 10.0)),
        ("sub", |t, v| t.sub(v[0], v[1]).unwrap(), vec![vec![3, 4], vec![1, 4]], (-10.0, 10.0)),
        ("mul", |t, v| t.mul(v[0], v[1]).unwrap(), vec![vec![2, 3, 4], vec![3, 4]], (-10.0, 10.0)),
        ("matmul", |t, v| t.matmul(v[0], v[1]).unwrap(), vec![vec![3, 5], vec![5, 2]], (-10.0, 10.0)),
        ("matmul_t", |t, v| t.matmul_t(v[0], v[1]).unwrap(), vec![vec![3, 5], vec![4, 5]], (-10.0, 10.0)),
        ("exp", |t, v| t.exp(v[0]), vec![vec![6]], (-5.0, 5.0)),
        ("log", |t, v| t.log(v[0]).unwrap(), vec![vec![6]], (0.5, 10.0)),
        ("pow", |t, v| t.pow(v[0], 1.7).unwrap(), vec![vec![6]], (0.5, 10.0)),
        ("pow_int", |t, v| t.pow(v[0], 3.0).unwrap(), vec![vec![6]], (-3.0, 3.0)),
        ("sigmoid", |t, v| t.sigmoid(v[0]), vec![vec![2, 5]], (-10.0, 10.0)),
        ("silu", |t, v| t.silu(v[0]).unwrap(), vec![vec![2, 5]], (-10.0, 10.0)),
        ("sum_axis0", |t, v| t.sum_axis(v[0], 0).unwrap(), vec![vec![3, 4]], (-10.0, 10.0)),
        ("sum_axis1", |t, v| t.sum_axis(v[0], 1).unwrap(), vec![vec![2, 3, 4]], (-10.0, 10.0)),
        ("mean_axis", |t, v| t.mean_axis(v[0], 1).unwrap(), vec![vec![3, 4]], (-10.0, 10.0)),
        ("mean", |t, v| t.mean(v[0]), vec![vec![3, 4]], (-10.0, 10.0)),
        ("softmax", |t, v| t.softmax(v[0]).unwrap(), vec![vec![3, 8]], (-5.0, 5.0)),
        ("log_softmax", |t, v| t.log_softmax(v[0]).unwrap(), vec![vec![3, 8]], (-5.0, 5.0)),
        ("rms_normalize", |t, v| t.rms_normalize(v[0], 1e-5).unwrap(), vec![vec![3, 8]], (-5.0, 5.0)),
        ("concat", |t, v| t.concat(&[v[0], v[1]], 1).unwrap(), vec![vec![3, 2], vec![3, 4]], (-10.0, 10.0)),
        ("slice", |t, v| t.slice(v[0], 1, 1, 3).unwrap(), vec![vec![3, 5]], (-10.0, 10.0)),
        ("gather", |t, v| t.gather(v[0], &[2, 0, 2, 1]).unwrap(), vec![vec![4, 3]], (-10.0, 10.0)),
        ("take_along", |t, v| t.take_along(v[0], &[1, 0, 4]).unwrap(), vec![vec![3, 5]], (-10.0, 10.0)),
        ("rope", |t, v| t.rope(v[0], &[0, 3, 9], 4, 10_000.0).unwrap(), vec![vec![3, 8]], (-10.0, 10.0)),
        ("reshape", |t, v| t.reshape(v[0], &[4, 3]).unwrap(), vec![vec![3, 4]], (-10.0, 10.0)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
        for (k, (name, op, shapes, (lo, hi))) in primitives().into_iter().enumerate() {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| rand_tensor(s, seed.wrapping_add(100 * k as u64 + i as u64), lo, hi))
                .collect();
            let reports = check(&inputs, 1e-5, |t, v| {
                let y = op(t, v);
                project(t, y, seed)
            });
            for (i, r) in reports.iter().enumerate() {
                let e = r.rel_error();
                prop_assert!(e < 1e-6, "{name} input {i}: relative error {e}");
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>()) {
        let mut t = Tape::<f64>::new();
        let x = t.constant(rand_tensor(&[4, 7], seed, -30.0, 30.0));
        let s = t.softmax(x).unwrap();
        for row in t.value(s).data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
