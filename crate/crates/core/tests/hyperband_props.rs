mod common;

use lowfreq::boundary::BoundaryConfig;
use lowfreq::hyperband::{run_hyperband, HyperbandConfig, HyperbandResult};
use lowfreq::oracle::{AttackGoal, Oracle, QueryBudget};
use lowfreq::Result;

fn run(config: &HyperbandConfig, image_seed: u64, seed: u64) -> (HyperbandResult, u64) {
    let target = common::rgb_mlp2();
    let img = lowfreq::harness::synthetic_images(target, 1, image_seed).unwrap().remove(0);
    let goal = AttackGoal::Untargeted { label: img.label };
    let mut shared = None;
    let result = run_hyperband(
        config,
        |_, budget: &QueryBudget| -> Result<Box<dyn Oracle>> {
            shared.get_or_insert_with(|| budget.clone());
            Ok(target.oracle(goal, budget.clone())? as Box<dyn Oracle>)
        },
        &img.image,
        seed,
    )
    .unwrap();
    (result, shared.unwrap().used())
}

fn no_early_stop(total: u64) -> HyperbandConfig {
    HyperbandConfig {
        round_length: 100,
        total_queries: total,
        boundary: BoundaryConfig { stop_at_success: false, ..BoundaryConfig::default() },
        ..HyperbandConfig::default()
    }
}

#[test]
fn four_arms_prune_to_two_then_one() {
    let (r, _) = run(&no_early_stop(3000), 21, 1);
    let rounds: Vec<usize> = r.schedule.iter().map(|e| e.round).collect();
    assert_eq!(rounds, vec![1, 1, 1, 1, 2, 2]);
    assert_eq!(r.schedule.iter().filter(|e| e.round == 1 && e.pruned).count(), 2);
    assert_eq!(r.schedule.iter().filter(|e| e.round == 2 && e.pruned).count(), 1);
    assert_eq!(r.arms.iter().filter(|a| a.pruned_after.is_none()).count(), 1);
    assert!(r.arms[r.winner].pruned_after.is_none());
}

#[test]
fn survivors_score_no_worse_than_the_pruned() {
    for seed in 0..5 {
        let (r, _) = run(&no_early_stop(3000), 22 + seed, seed);
        for round in 1..=2 {
            let entries: Vec<_> = r.schedule.iter().filter(|e| e.round == round).collect();
            let worst_kept = entries.iter().filter(|e| !e.pruned).map(|e| e.score).fold(f64::MIN, f64::max);
            let best_pruned = entries.iter().filter(|e| e.pruned).map(|e| e.score).fold(f64::MAX, f64::min);
            assert!(worst_kept <= best_pruned, "round {round}: {worst_kept} > {best_pruned}");
        }
    }
}

#[test]
fn queries_are_conserved() {
    for config in [no_early_stop(3000), HyperbandConfig { round_length: 50, ..HyperbandConfig::default() }] {
        let (r, used) = run(&config, 23, 2);
        assert_eq!(r.total_queries, used);
        let winner = r.winning_trace().total_queries();
        let others: u64 = r.arms.iter().enumerate().filter(|(i, _)| *i != r.winner).map(|(_, a)| a.queries).sum();
        assert_eq!(winner + others, used);
        assert_eq!(r.arms[r.winner].queries, winner);
        assert!(used <= config.total_queries);
    }
}

#[test]
fn fixed_seed_is_deterministic() {
    let config = no_early_stop(2000);
    let (a, _) = run(&config, 24, 3);
    let (b, _) = run(&config, 24, 3);
    assert_eq!(a, b);
}
