use geopath::blocknet::{predict, BlockNet, BlockNetConfig};
use geopath::diffcore::Tensor2;
use geopath::policynet::{PolicyNetConfig, PolicyNetwork};
use geopath::rewards::{diversity, RewardConfig};
use geopath::synthdata::{generate, GenSpec, Prepared};
use geopath::trainer::{
    eval_rng, evaluate, joint_finetune, pretrain_recognition, train_policy, EvalMode,
    ForcePolicy, StageSchedule, TrainConfig,
};
use geopath::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Setup {
    train: Prepared,
    eval: Prepared,
    net: BlockNet,
    policy: PolicyNetwork,
}

fn spec(classes: usize, pair_fraction: f64, samples_per_class: usize, seed: u64) -> GenSpec {
    GenSpec {
        classes,
        pair_fraction,
        samples_per_class,
        seed,
        ..Default::default()
    }
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        pretrain: StageSchedule {
            epochs: 5,
            ..TrainConfig::default().pretrain
        },
        policy: StageSchedule::new(2, 0.005),
        finetune: StageSchedule::new(1, 0.001),
        batch_size: 32,
        seed,
        ..Default::default()
    }
}

fn setup(gen: &GenSpec, blocks: usize, cfg: &TrainConfig) -> Setup {
    let g = generate(gen).unwrap();
    let train = g.train.prepare(cfg.geo_scheme).unwrap();
    let eval = g.eval.prepare(cfg.geo_scheme).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bcfg = BlockNetConfig {
        input_dim: gen.feature_dim,
        hidden: 16,
        blocks,
        classes: gen.classes,
    };
    let mut net = BlockNet::new(&bcfg, &mut rng).unwrap();
    pretrain_recognition(&mut net, &train, cfg).unwrap();
    let pcfg = PolicyNetConfig {
        blocks,
        image_dim: gen.feature_dim,
        image_hidden: 16,
        ..Default::default()
    };
    let policy = PolicyNetwork::new(&pcfg, &mut rng).unwrap();
    Setup {
        train,
        eval,
        net,
        policy,
    }
}

fn small_setup(seed: u64) -> (Setup, TrainConfig) {
    let cfg = config(seed);
    (setup(&spec(6, 0.5, 40, seed), 4, &cfg), cfg)
}

#[test]
fn pretrain_reaches_high_accuracy_on_separable_classes() {
    let gen = spec(3, 0.0, 100, 3);
    let cfg = TrainConfig {
        seed: 3,
        ..Default::default()
    };
    let g = generate(&gen).unwrap();
    let train = g.train.prepare(cfg.geo_scheme).unwrap();
    let bcfg = BlockNetConfig {
        classes: 3,
        ..Default::default()
    };
    let mut net = BlockNet::new(&bcfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let rows = pretrain_recognition(&mut net, &train, &cfg).unwrap();
    assert_eq!(rows.len(), cfg.pretrain.epochs);
    assert!(rows.last().unwrap().accuracy_greedy >= 0.95);
}

#[test]
fn pretrain_with_zero_epochs_leaves_parameters() {
    let g = generate(&spec(3, 0.0, 20, 1)).unwrap();
    let train = g.train.prepare(Default::default()).unwrap();
    let bcfg = BlockNetConfig {
        classes: 3,
        hidden: 8,
        blocks: 2,
        ..Default::default()
    };
    let mut net = BlockNet::new(&bcfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let before = net.clone();
    let cfg = TrainConfig {
        pretrain: StageSchedule::new(0, 0.01),
        ..Default::default()
    };
    assert!(pretrain_recognition(&mut net, &train, &cfg).unwrap().is_empty());
    assert_eq!(net, before);
}

#[test]
fn pretrain_rejects_empty_dataset() {
    let g = generate(&spec(3, 0.0, 20, 1)).unwrap();
    let empty = g.train.prepare(Default::default()).unwrap().select(&[]);
    let mut net = BlockNet::new(
        &BlockNetConfig {
            classes: 3,
            ..Default::default()
        },
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    assert!(matches!(
        pretrain_recognition(&mut net, &empty, &TrainConfig::default()),
        Err(Error::EmptyDataset)
    ));
}

#[test]
fn pretrain_is_deterministic() {
    let a = small_setup(9).0.net;
    let b = small_setup(9).0.net;
    assert_eq!(a, b);
}

#[test]
fn batch_size_below_two_is_rejected() {
    let (mut s, mut cfg) = small_setup(2);
    cfg.batch_size = 1;
    assert!(matches!(
        train_policy(&s.train, None, &mut s.policy, &s.net, &cfg),
        Err(Error::Config(_))
    ));
}

#[test]
fn policy_stage_keeps_recognition_frozen() {
    let (mut s, cfg) = small_setup(4);
    let before = s.net.clone();
    let policy_before = s.policy.clone();
    train_policy(&s.train, Some(&s.eval), &mut s.policy, &s.net, &cfg).unwrap();
    assert_eq!(s.net, before);
    assert_ne!(s.policy, policy_before);
}

#[test]
fn remove_mlp_ignores_location() {
    let (mut s, mut cfg) = small_setup(5);
    cfg.remove_mlp = true;
    let loc_before = s.policy.loc_params().clone();
    train_policy(&s.train, None, &mut s.policy, &s.net, &cfg).unwrap();
    joint_finetune(&s.train, None, &mut s.policy, &mut s.net, &cfg).unwrap();
    assert!(!s.policy.uses_location());
    assert_eq!(s.policy.loc_params(), &loc_before);
    let shifted = s.eval.x_loc.map(|v| -v + 0.3);
    let a = s.policy.keep_probs(&s.eval.x_loc, &s.eval.x_img).unwrap();
    let b = s.policy.keep_probs(&shifted, &s.eval.x_img).unwrap();
    assert_eq!(a, b);
}

#[test]
fn location_changes_keep_probabilities_in_full_model() {
    let (mut s, cfg) = small_setup(5);
    train_policy(&s.train, None, &mut s.policy, &s.net, &cfg).unwrap();
    let shifted = s.eval.x_loc.map(|v| -v + 0.3);
    let a = s.policy.keep_probs(&s.eval.x_loc, &s.eval.x_img).unwrap();
    let b = s.policy.keep_probs(&shifted, &s.eval.x_img).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x != y));
}

#[test]
fn remove_u_drops_diversity_term() {
    let (mut s, mut cfg) = small_setup(6);
    cfg.remove_u = true;
    let rc = cfg.effective_reward();
    assert_eq!(rc.theta_d, 0.0);
    assert_eq!(rc.theta_s, cfg.reward.theta_s);
    let rows = train_policy(&s.train, None, &mut s.policy, &s.net, &cfg).unwrap();
    for r in rows {
        assert!(r.mean_reward.unwrap() <= cfg.reward.theta_s + 1e-12);
    }
}

#[test]
fn epoch_rows_respect_reward_and_ratio_bounds() {
    let (mut s, cfg) = small_setup(7);
    let mut rows = train_policy(&s.train, Some(&s.eval), &mut s.policy, &s.net, &cfg).unwrap();
    rows.extend(joint_finetune(&s.train, Some(&s.eval), &mut s.policy, &mut s.net, &cfg).unwrap());
    let rc = cfg.reward;
    for r in rows {
        let reward = r.mean_reward.unwrap();
        assert!(reward <= rc.theta_s + rc.theta_d && reward >= -rc.lambda);
        for v in [r.accuracy_greedy, r.accuracy_sample.unwrap(), r.mean_pr, r.eval_pr] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(r.diversity >= 1);
    }
}

/// With only the sparsity term and a mild error penalty, the policy sheds
/// blocks epoch after epoch.
#[test]
fn sparsity_only_reward_lowers_keep_ratio() {
    let gen = spec(3, 0.0, 300, 8);
    let mut cfg = TrainConfig {
        seed: 8,
        ..Default::default()
    };
    cfg.reward = RewardConfig {
        theta_s: 1.0,
        theta_d: 0.0,
        lambda: 0.1,
    };
    cfg.policy = StageSchedule::new(5, 0.05);
    let train = generate(&gen).unwrap().train.prepare(cfg.geo_scheme).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bcfg = BlockNetConfig {
        classes: 3,
        ..Default::default()
    };
    let mut net = BlockNet::new(&bcfg, &mut rng).unwrap();
    pretrain_recognition(&mut net, &train, &cfg).unwrap();
    let mut policy = PolicyNetwork::new(&PolicyNetConfig::default(), &mut rng).unwrap();
    let rows = train_policy(&train, None, &mut policy, &net, &cfg).unwrap();
    let pr: Vec<f64> = rows.iter().map(|r| r.mean_pr).collect();
    assert!(pr[..3].windows(2).all(|w| w[1] < w[0]), "{pr:?}");
    assert!(pr[4] < pr[0] - 0.1, "{pr:?}");
}

#[test]
fn finetune_without_recognition_loss_keeps_recognition() {
    let (mut s, mut cfg) = small_setup(10);
    cfg.beta = 0.0;
    let before = s.net.clone();
    joint_finetune(&s.train, None, &mut s.policy, &mut s.net, &cfg).unwrap();
    assert_eq!(s.net, before);
}

#[test]
fn finetune_moves_recognition_with_positive_weight() {
    let (mut s, cfg) = small_setup(10);
    let before = s.net.clone();
    joint_finetune(&s.train, None, &mut s.policy, &mut s.net, &cfg).unwrap();
    assert_ne!(s.net, before);
}

#[test]
fn finetune_epoch_is_reproducible() {
    let run = || {
        let (mut s, cfg) = small_setup(11);
        let rows = joint_finetune(&s.train, Some(&s.eval), &mut s.policy, &mut s.net, &cfg).unwrap();
        (rows, s.policy, s.net)
    };
    assert_eq!(run(), run());
}

/// When paired classes share their visual centroid, no image-only classifier
/// can beat chance within a pair.
#[test]
fn image_only_classifier_is_capped_on_paired_classes() {
    let gen = GenSpec {
        classes: 10,
        pair_fraction: 1.0,
        visual_noise: 0.01,
        seed: 12,
        ..Default::default()
    };
    let cfg = TrainConfig {
        seed: 12,
        ..Default::default()
    };
    let g = generate(&gen).unwrap();
    let train = g.train.prepare(cfg.geo_scheme).unwrap();
    let eval = g.eval.prepare(cfg.geo_scheme).unwrap();
    let bcfg = BlockNetConfig {
        classes: 10,
        ..Default::default()
    };
    let mut net = BlockNet::new(&bcfg, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    pretrain_recognition(&mut net, &train, &cfg).unwrap();
    let logits = net.logits(&eval.x_img, None).unwrap();
    let correct = (0..eval.len())
        .filter(|&r| predict(logits.row(r)) == eval.labels[r])
        .count();
    let acc = correct as f64 / eval.len() as f64;
    assert!(acc <= 0.55, "image-only accuracy {acc}");
}

#[test]
fn greedy_evaluation_is_deterministic() {
    let (mut s, cfg) = small_setup(13);
    train_policy(&s.train, None, &mut s.policy, &s.net, &cfg).unwrap();
    let rc = cfg.reward;
    let a = evaluate(&s.eval, &s.policy, &s.net, EvalMode::Greedy, None, &rc, &mut eval_rng(1)).unwrap();
    let b = evaluate(&s.eval, &s.policy, &s.net, EvalMode::Greedy, None, &rc, &mut eval_rng(2)).unwrap();
    assert_eq!(a, b);
    let emitted: Vec<_> = a.records.iter().map(|r| r.policy.clone()).collect();
    assert_eq!(a.summary.diversity, diversity(&emitted));
}

#[test]
fn sampled_evaluation_follows_seed() {
    let (s, cfg) = small_setup(14);
    let rc = cfg.reward;
    let run = |seed| {
        evaluate(&s.eval, &s.policy, &s.net, EvalMode::Sample, None, &rc, &mut eval_rng(seed)).unwrap()
    };
    assert_eq!(run(3), run(3));
}

#[test]
fn forced_all_ones_matches_plain_network() {
    let (s, cfg) = small_setup(15);
    let report = evaluate(
        &s.eval,
        &s.policy,
        &s.net,
        EvalMode::Greedy,
        Some(ForcePolicy::Ones),
        &cfg.reward,
        &mut eval_rng(0),
    )
    .unwrap();
    let plain = s.net.logits(&s.eval.x_img, None).unwrap();
    for (k, rec) in report.records.iter().enumerate() {
        assert_eq!(rec.prediction, predict(plain.row(k)));
        assert_eq!(rec.pr, 1.0);
    }
    assert_eq!(report.summary.diversity, 1);
    assert_eq!(report.summary.cost_std, 0.0);
}

#[test]
fn forced_all_zeros_uses_stem_and_head_only() {
    let (s, cfg) = small_setup(16);
    let report = evaluate(
        &s.eval,
        &s.policy,
        &s.net,
        EvalMode::Greedy,
        Some(ForcePolicy::Zeros),
        &cfg.reward,
        &mut eval_rng(0),
    )
    .unwrap();
    let floor = s.net.stem_cost() + s.net.head_cost();
    assert!(report.records.iter().all(|r| r.cost_units == floor && r.pr == 0.0));
}

#[test]
fn evaluation_rejects_mismatched_inputs() {
    let (mut s, cfg) = small_setup(17);
    s.eval.x_img = Tensor2::zeros(s.eval.len(), 3);
    assert!(evaluate(&s.eval, &s.policy, &s.net, EvalMode::Greedy, None, &cfg.reward, &mut eval_rng(0)).is_err());
}
