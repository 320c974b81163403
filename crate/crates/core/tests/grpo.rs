use jrm::rl::{rl_train, EditorPolicy, RewardSource, RlConfig};
use jrm::synthworld::WorldConfig;

fn drift(kl_beta: f64) -> (f64, f64) {
    let world = WorldConfig::default();
    let cfg = RlConfig {
        kl_beta,
        iterations: 50,
        eval_prompts: 16,
        ..RlConfig::default()
    };
    let base = EditorPolicy::base(world.n_regions, cfg.artifact_sd);
    let r = rl_train(base.clone(), RewardSource::GroundTruthIf, &world, &cfg).unwrap();
    let dist = base
        .flat()
        .iter()
        .zip(r.policy.flat())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let late_kl = r.metrics[40..].iter().map(|m| m.kl).sum::<f64>() / 10.0;
    (dist, late_kl)
}

#[test]
fn strong_kl_penalty_pins_the_policy_to_its_reference() {
    let (free, free_kl) = drift(0.04);
    let (pinned, pinned_kl) = drift(100.0);
    // Adam normalizes step sizes, so even a dominant penalty leaves drift of
    // order lr; what the penalty controls is the direction.
    assert!(pinned < 0.05 * free, "{pinned} vs {free}");
    assert!(pinned < 0.05, "{pinned}");
    assert!(pinned_kl < 1e-3 && pinned_kl < 0.01 * free_kl, "{pinned_kl} vs {free_kl}");
}

#[test]
fn same_seed_same_trajectory() {
    let world = WorldConfig::default();
    let cfg = RlConfig {
        iterations: 10,
        eval_prompts: 16,
        ..RlConfig::default()
    };
    let run = || rl_train(EditorPolicy::base(world.n_regions, cfg.artifact_sd), RewardSource::GroundTruthIf, &world, &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.policy, b.policy);
    assert_eq!(a.metrics.len(), 10);
    assert!(a.metrics.iter().zip(&b.metrics).all(|(x, y)| x.mean_reward.to_bits() == y.mean_reward.to_bits()));
}
