use egdp_core::auction::EnvConfig;
use egdp_core::expert::{expert_bid, replay_set, solve_duals, ReplayItem};
use egdp_core::rollout::{fixed_grid_best, run_episode, EvalConfig, Policy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Items, budget and target CPA of a small seeded instance.
fn instance(seed: u64, n: usize) -> (Vec<ReplayItem>, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<ReplayItem> = (0..n)
        .map(|_| ReplayItem {
            value: rng.random_range(0.1..1.0),
            price: rng.random_range(0.1..1.0),
        })
        .collect();
    let total: f64 = items.iter().map(|i| i.price).sum();
    let budget = rng.random_range(0.2..1.0) * total;
    let cpa = rng.random_range(0.5..3.0);
    (items, budget, cpa)
}

/// Feasible allocation with the most value; ties go to the cheaper one.
fn enumerate(items: &[ReplayItem], budget: f64, cpa: f64) -> Vec<bool> {
    let n = items.len();
    let mut best: Option<(f64, f64, Vec<bool>)> = None;
    for mask in 0u32..(1 << n) {
        let x: Vec<bool> = (0..n).map(|j| mask >> j & 1 == 1).collect();
        let value: f64 = items.iter().zip(&x).filter(|(_, &w)| w).map(|(i, _)| i.value).sum();
        let spend: f64 = items.iter().zip(&x).filter(|(_, &w)| w).map(|(i, _)| i.price).sum();
        if spend > budget || spend > cpa * value {
            continue;
        }
        let better = match &best {
            None => true,
            Some((v, s, _)) => value > *v || (value == *v && spend < *s),
        };
        if better {
            best = Some((value, spend, x));
        }
    }
    best.expect("the empty allocation is feasible").2
}

fn expert_allocation(items: &[ReplayItem], budget: f64, cpa: f64) -> Vec<bool> {
    let sol = solve_duals(items, budget, cpa).unwrap();
    items
        .iter()
        .map(|i| expert_bid(i.value, &sol.duals, cpa).unwrap() >= i.price)
        .collect()
}

/// Allocations reachable by some bid multiplier: win everything whose
/// value-to-price ratio clears a threshold.
fn is_threshold(items: &[ReplayItem], x: &[bool]) -> bool {
    let won = items.iter().zip(x).filter(|(_, &w)| w).map(|(i, _)| i.value / i.price);
    let lost = items.iter().zip(x).filter(|(_, &w)| !w).map(|(i, _)| i.value / i.price);
    won.fold(f64::INFINITY, f64::min) > lost.fold(0.0, f64::max)
}

/// Three impressions from the simulator with the budget at half the total
/// price of winning all of them.
fn simulator_instance(seed: u64) -> (Vec<ReplayItem>, f64, f64) {
    let env = EnvConfig {
        num_agents: 4,
        num_steps: 1,
        impressions_per_step: 3,
        ..EnvConfig::default()
    }
    .with_seed(seed);
    let items = replay_set(&env).unwrap();
    let budget = 0.5 * items.iter().map(|i| i.price).sum::<f64>();
    let cpa = 2.0 * items.iter().map(|i| i.price).sum::<f64>() / items.iter().map(|i| i.value).sum::<f64>();
    (items, budget, cpa)
}

#[test]
fn three_impression_instance_matches_enumeration() {
    let (items, budget, cpa) = simulator_instance(0);
    assert_eq!(items.len(), 3);
    let best = enumerate(&items, budget, cpa);
    assert_eq!(expert_allocation(&items, budget, cpa), best, "{items:?} budget {budget}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    // Bids are linear in value, so the expert can only reach threshold
    // allocations; whenever the integer optimum is one, it must be found.
    #[test]
    fn expert_finds_threshold_optima(seed in 0u64..100_000) {
        let (items, budget, cpa) = instance(seed, 3);
        let best = enumerate(&items, budget, cpa);
        let got = expert_allocation(&items, budget, cpa);
        let value = |x: &[bool]| items.iter().zip(x).filter(|(_, &w)| w).map(|(i, _)| i.value).sum::<f64>();
        let spend = |x: &[bool]| items.iter().zip(x).filter(|(_, &w)| w).map(|(i, _)| i.price).sum::<f64>();
        prop_assert!(spend(&got) <= budget + 1e-12);
        prop_assert!(spend(&got) <= cpa * value(&got) + 1e-12);
        if is_threshold(&items, &best) {
            prop_assert!((value(&got) - value(&best)).abs() <= 1e-12, "seed {}: {:?} vs {:?}", seed, got, best);
        }
    }

    #[test]
    fn bid_ranking_is_scale_equivariant(seed in 0u64..10_000, scale in 0.1f64..10.0) {
        let (items, budget, cpa) = instance(seed, 6);
        let sol = solve_duals(&items, budget, cpa).unwrap();
        let rank = |s: f64| {
            let bids: Vec<f64> = items.iter().map(|i| expert_bid(s * i.value, &sol.duals, cpa).unwrap()).collect();
            let mut idx: Vec<usize> = (0..bids.len()).collect();
            idx.sort_by(|&a, &b| bids[a].total_cmp(&bids[b]));
            idx
        };
        prop_assert_eq!(rank(1.0), rank(scale));
    }
}

#[test]
fn desk_expert_beats_every_constant_coefficient() {
    let eval = EvalConfig {
        seeds: vec![0],
        timing: false,
        ..EvalConfig::default()
    };
    for seed in [1, 4] {
        let env = EnvConfig::default().with_seed(seed);
        let sol = solve_duals(&replay_set(&env).unwrap(), env.budget(0), env.cpa(0)).unwrap();
        assert!(sol.feasible);
        let expert = run_episode(&Policy::ExpertOracle, &env, &eval).unwrap();
        let (_, best) = fixed_grid_best(&env, &[seed], &eval).unwrap();
        assert!(expert.score.score >= best - 1e-9, "seed {seed}: {} < {best}", expert.score.score);
    }
}
