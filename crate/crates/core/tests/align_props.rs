use lmstack_core::align::{
    combined_reward, estimator_variance, k3, loo_advantages, mdloo_train, ranking_loss, BanditPolicy, MdlooConfig,
};
use lmstack_core::optim::Sgd;
use lmstack_core::SeedTree;
use proptest::prelude::*;

fn first_arm(_: &[u32], y: &[u32]) -> f64 {
    if y == [0] {
        1.0
    } else {
        0.0
    }
}

proptest! {
    #[test]
    fn loo_advantages_sum_to_zero(rewards in prop::collection::vec(-100.0f64..100.0, 2..17)) {
        let a = loo_advantages(&rewards).unwrap();
        let scale: f64 = a.iter().map(|v| v.abs()).sum::<f64>().max(1e-300);
        prop_assert!(a.iter().sum::<f64>().abs() <= 1e-9 * scale);
    }

    #[test]
    fn loo_advantage_is_reward_minus_mean_of_others(rewards in prop::collection::vec(-10.0f64..10.0, 2..12)) {
        let a = loo_advantages(&rewards).unwrap();
        for (i, r) in rewards.iter().enumerate() {
            let others: f64 = rewards.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum();
            let want = r - others / (rewards.len() - 1) as f64;
            prop_assert!((a[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn certain_label_is_bradley_terry(delta in -40.0f64..40.0) {
        let btl = (-delta).exp().ln_1p();
        prop_assert!((ranking_loss(delta, 1.0) - btl).abs() <= 1e-9);
    }

    #[test]
    fn ranking_loss_is_label_symmetric(delta in -20.0f64..20.0, p in 0.0f64..1.0) {
        prop_assert!((ranking_loss(delta, p) - ranking_loss(-delta, 1.0 - p)).abs() < 1e-12);
    }

    #[test]
    fn k3_is_non_negative(log_ratio in -20.0f64..20.0) {
        prop_assert!(k3(log_ratio) >= 0.0);
    }

    #[test]
    fn kl_penalty_vanishes_at_the_reference(rm in -5.0f64..5.0, logp in -30.0f64..0.0, beta in 0.0f64..2.0) {
        prop_assert_eq!(combined_reward(rm, logp, logp, beta), rm);
    }
}

fn bandit_run(seed: u64, beta: f64) -> BanditPolicy {
    let reference = BanditPolicy::new(&[0.0, 0.0]).unwrap();
    let mut p = reference.clone();
    let mut rm = |items: &[(&[u32], &[u32])]| Ok(items.iter().map(|(x, y)| first_arm(x, y)).collect());
    let cfg = MdlooConfig { beta, ..Default::default() };
    let mut opt = Sgd::new(0.5);
    mdloo_train(&mut p, &reference, &mut rm, &mut |_| vec![vec![1]; 4], &cfg, 0..200, &mut opt, &SeedTree::new(seed), &mut |_, _| Ok(()))
        .unwrap();
    p
}

#[test]
fn bandit_learns_the_rewarded_arm() {
    let p = bandit_run(1, 0.1);
    assert!(p.probs()[0] > 0.95, "{:?}", p.probs());
}

#[test]
fn stronger_kl_penalty_stays_closer_to_reference() {
    let reference = BanditPolicy::new(&[0.0, 0.0]).unwrap();
    let weak = bandit_run(2, 0.1).kl(&reference);
    let strong = bandit_run(2, 0.2).kl(&reference);
    assert!(strong < weak, "{strong} vs {weak}");
}

#[test]
fn leave_one_out_lowers_gradient_variance() {
    let p = BanditPolicy::new(&[0.3, -0.2]).unwrap();
    let seeds = SeedTree::new(9);
    let loo = estimator_variance(&p, &first_arm, &[1], 8, 1000, true, &seeds).unwrap();
    let raw = estimator_variance(&p, &first_arm, &[1], 8, 1000, false, &seeds).unwrap();
    assert!(loo < raw, "{loo} vs {raw}");
}
