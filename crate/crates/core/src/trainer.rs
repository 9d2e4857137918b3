//! Training stages and evaluation.
//!
//! 1. [`pretrain_recognition`]: cross-entropy on the recognition network
//!    with every block active.
//! 2. [`train_policy`]: self-critical policy gradient on the policy network
//!    while the recognition network stays frozen.
//! 3. [`joint_finetune`]: both networks, loss `−J + β·CE`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocknet::{predict, BlockNet};
use crate::diffcore::{Grads, Sgd, Tape, Tensor2, Var};
use crate::error::{Error, Result};
use crate::geoenc::GeoScheme;
use crate::policynet::{greedy_policy, log_likelihood, sample_policy, KeepProbs, Policy, PolicyNetwork};
use crate::rewards::{
    diversity, reward, substituted_uniqueness, uniqueness_with, RewardConfig, UniquenessMode,
};
use crate::synthdata::Prepared;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub epochs: usize,
    pub lr: f64,
    /// Global gradient-norm ceiling applied before every update of this
    /// stage; `None` disables clipping.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl StageSchedule {
    /// Schedule without gradient clipping.
    pub fn new(epochs: usize, lr: f64) -> Self {
        StageSchedule {
            epochs,
            lr,
            max_grad_norm: None,
        }
    }

    fn clip(&self, grads: &mut Grads) {
        if let Some(c) = self.max_grad_norm {
            grads.clip_norm(c);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pretrain: StageSchedule,
    pub policy: StageSchedule,
    pub finetune: StageSchedule,
    /// Batch size M; uniqueness is computed over each batch.
    pub batch_size: usize,
    pub momentum: f64,
    pub reward: RewardConfig,
    pub uniqueness: UniquenessMode,
    /// Weight of the recognition cross-entropy during joint finetuning.
    pub beta: f64,
    pub remove_mlp: bool,
    pub remove_u: bool,
    pub geo_scheme: GeoScheme,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            // the untrained residual stack amplifies activations enough to
            // diverge at this rate without clipping
            pretrain: StageSchedule {
                max_grad_norm: Some(5.0),
                ..StageSchedule::new(30, 0.01)
            },
            policy: StageSchedule::new(30, 0.005),
            finetune: StageSchedule::new(20, 0.001),
            batch_size: 64,
            momentum: 0.9,
            reward: RewardConfig::default(),
            uniqueness: UniquenessMode::default(),
            beta: 1.0,
            remove_mlp: false,
            remove_u: false,
            geo_scheme: GeoScheme::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} < 2: uniqueness needs a policy set",
                self.batch_size
            )));
        }
        for (name, s) in [
            ("pretrain", self.pretrain),
            ("policy", self.policy),
            ("finetune", self.finetune),
        ] {
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(Error::Config(format!("{name} learning rate must be > 0")));
            }
            if s.max_grad_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
                return Err(Error::Config(format!("{name} max_grad_norm must be > 0")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        self.reward.validate()
    }

    /// Reward weights with the ablations applied.
    pub fn effective_reward(&self) -> RewardConfig {
        let mut r = self.reward;
        if self.remove_u {
            r.theta_d = 0.0;
        }
        r
    }

    fn stage_rng(&self, stage: Stage) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stage as u64 + 1);
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Policy,
    Finetune,
    Evaluate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Policy => "policy",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
        })
    }
}

/// One row of the per-epoch metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Mean reward of the sampled policies (policy-driven stages only).
    pub mean_reward: Option<f64>,
    /// Accuracy along sampled paths during the epoch.
    pub accuracy_sample: Option<f64>,
    /// Accuracy of the evaluation pass (greedy paths; all blocks during
    /// pretraining).
    pub accuracy_greedy: f64,
    /// Mean keep ratio of the sampled paths.
    pub mean_pr: f64,
    /// Mean keep ratio of the evaluation pass.
    pub eval_pr: f64,
    /// Distinct paths emitted by the evaluation pass.
    pub diversity: usize,
    /// Mean batch uniqueness of the sampled paths.
    pub mean_uniqueness: Option<f64>,
}

/// Per-batch numbers from one policy-gradient step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub samples: usize,
    pub reward_sum: f64,
    pub correct_sampled: usize,
    pub correct_greedy: usize,
    pub pr_sum: f64,
    pub uniqueness_sum: f64,
    pub loss: f64,
    pub sampled: Vec<Policy>,
    pub advantages: Vec<f64>,
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch).map(<[usize]>::to_vec).collect();
    // a trailing singleton cannot form a policy set; fold it into the previous batch
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

fn accuracy(logits: &Tensor2, labels: &[usize]) -> (Vec<usize>, usize) {
    let preds: Vec<usize> = (0..logits.rows()).map(|r| predict(logits.row(r))).collect();
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    (preds, correct)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Trains the recognition network with all blocks active. Returns one
/// metrics row per epoch; accuracy is measured on the training set after
/// each epoch.
pub fn pretrain_recognition(
    net: &mut BlockNet,
    train: &Prepared,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let mut rng = cfg.stage_rng(Stage::Pretrain);
    let mut opt = Sgd::new(cfg.pretrain.lr, cfg.momentum);
    let mut rows = Vec::with_capacity(cfg.pretrain.epochs);
    for epoch in 0..cfg.pretrain.epochs {
        let batches = shuffled_batches(train.len(), cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        for idx in &batches {
            let batch = train.select(idx);
            let mut tape = Tape::new();
            let x = tape.constant(batch.x_img);
            let logits = net.forward(&mut tape, x, None)?;
            let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            loss_sum += tape.value(loss).item();
            let mut grads = tape.backward(loss)?;
            cfg.pretrain.clip(&mut grads);
            opt.step(net.params_mut(), &grads);
        }
        let logits = net.logits(&train.x_img, None)?;
        let (_, correct) = accuracy(&logits, &train.labels);
        rows.push(EpochMetrics {
            epoch,
            stage: Stage::Pretrain,
            loss: loss_sum / batches.len() as f64,
            mean_reward: None,
            accuracy_sample: None,
            accuracy_greedy: ratio(correct, train.len()),
            mean_pr: 1.0,
            eval_pr: 1.0,
            diversity: 1,
            mean_uniqueness: None,
        });
    }
    Ok(rows)
}

/// Which reward the policy gradient is centred on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// `A = R(p) − R(p̃)` with `p̃` the greedy path.
    SelfCritical,
    /// Plain REINFORCE, `A = R(p)`.
    None,
}

/// Sampled and greedy paths drawn for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub probs: Vec<KeepProbs>,
    pub sampled: Vec<Policy>,
    pub greedy: Vec<Policy>,
}

/// Draws one path per row of the keep-probability node `s`.
pub fn rollout(
    policy: &PolicyNetwork,
    tape: &Tape,
    s: Var,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    let sv = tape.value(s);
    let probs = (0..sv.rows())
        .map(|r| KeepProbs::new(sv.row(r).to_vec(), policy.epsilon()))
        .collect::<Result<Vec<_>>>()?;
    let sampled = probs.iter().map(|p| sample_policy(p, rng)).collect();
    let greedy = probs.iter().map(greedy_policy).collect();
    Ok(Rollout {
        probs,
        sampled,
        greedy,
    })
}

/// Policy-gradient surrogate `−(1/M) Σ_i A_i · log π(p_i)`. Its gradient is
/// the negated estimate of `∇J`.
pub fn self_critical_loss(
    tape: &mut Tape,
    s: Var,
    sampled: &[Policy],
    advantages: &[f64],
) -> Result<Var> {
    let ll = log_likelihood(tape, s, sampled)?;
    let weighted = tape.mul_const(ll, Tensor2::col_vector(advantages))?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / sampled.len().max(1) as f64))
}

/// Gradient estimate of `−J` for one batch with rewards supplied by
/// `rewards(sampled, greedy) -> (R(p), R(p̃))`. Returns the gradients (empty
/// when every advantage is zero), the rollout and the advantages.
pub fn policy_gradient<F>(
    policy: &PolicyNetwork,
    x_loc: &Tensor2,
    x_img: &Tensor2,
    baseline: Baseline,
    rng: &mut ChaCha8Rng,
    mut rewards: F,
) -> Result<(Grads, Rollout, Vec<f64>)>
where
    F: FnMut(&[Policy], &[Policy]) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let mut tape = Tape::new();
    let l = tape.constant(x_loc.clone());
    let i = tape.constant(x_img.clone());
    let s = policy.fuse_batch(&mut tape, l, i)?;
    let ro = rollout(policy, &tape, s, rng)?;
    let (r_sampled, r_greedy) = rewards(&ro.sampled, &ro.greedy)?;
    let advantages: Vec<f64> = match baseline {
        Baseline::SelfCritical => r_sampled.iter().zip(&r_greedy).map(|(a, b)| a - b).collect(),
        Baseline::None => r_sampled,
    };
    if advantages.iter().all(|&a| a == 0.0) {
        return Ok((Grads::default(), ro, advantages));
    }
    let loss = self_critical_loss(&mut tape, s, &ro.sampled, &advantages)?;
    Ok((tape.backward(loss)?, ro, advantages))
}

struct RewardEval {
    r_sampled: Vec<f64>,
    r_greedy: Vec<f64>,
    u: Vec<f64>,
    correct_sampled: usize,
    correct_greedy: usize,
}

fn batch_rewards(
    cfg: &TrainConfig,
    sampled: &[Policy],
    greedy: &[Policy],
    pred_sampled: &[usize],
    pred_greedy: &[usize],
    labels: &[usize],
) -> Result<RewardEval> {
    let rc = cfg.effective_reward();
    let u = uniqueness_with(sampled, cfg.uniqueness)?;
    // The baseline swaps only the sample's own path: p̃_i is compared with the
    // other sampled paths, so p_i == p̃_i gives a zero advantage.
    let u_greedy = substituted_uniqueness(sampled, greedy, cfg.uniqueness)?;
    let mut out = RewardEval {
        r_sampled: Vec::with_capacity(sampled.len()),
        r_greedy: Vec::with_capacity(sampled.len()),
        u: u.clone(),
        correct_sampled: 0,
        correct_greedy: 0,
    };
    for k in 0..sampled.len() {
        let ok_s = pred_sampled[k] == labels[k];
        let ok_g = pred_greedy[k] == labels[k];
        out.correct_sampled += ok_s as usize;
        out.correct_greedy += ok_g as usize;
        out.r_sampled.push(reward(&sampled[k], u[k].min(1.0), ok_s, &rc));
        out.r_greedy.push(reward(&greedy[k], u_greedy[k].min(1.0), ok_g, &rc));
    }
    Ok(out)
}

fn preds(logits: &Tensor2) -> Vec<usize> {
    (0..logits.rows()).map(|r| predict(logits.row(r))).collect()
}

/// One policy-gradient update on `batch` with the recognition network
/// frozen. When every advantage is zero the parameters are left untouched.
pub fn policy_step(
    batch: &Prepared,
    policy: &mut PolicyNetwork,
    net: &BlockNet,
    opt: &mut Sgd,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BatchStats> {
    let mut eval = None;
    let (mut grads, ro, advantages) = policy_gradient(
        policy,
        &batch.x_loc,
        &batch.x_img,
        Baseline::SelfCritical,
        rng,
        |sampled, greedy| {
            let ps = preds(&net.logits(&batch.x_img, Some(sampled))?);
            let pg = preds(&net.logits(&batch.x_img, Some(greedy))?);
            let e = batch_rewards(cfg, sampled, greedy, &ps, &pg, &batch.labels)?;
            let out = (e.r_sampled.clone(), e.r_greedy.clone());
            eval = Some(e);
            Ok(out)
        },
    )?;
    let eval = eval.expect("reward closure runs once per step");
    if !grads.is_empty() {
        cfg.policy.clip(&mut grads);
        opt.step(policy.loc_params_mut(), &grads);
        opt.step(policy.img_params_mut(), &grads);
    }
    let loss = -advantages.iter().sum::<f64>() / advantages.len() as f64;
    Ok(stats_from(eval, ro.sampled, advantages, loss))
}

fn stats_from(eval: RewardEval, sampled: Vec<Policy>, advantages: Vec<f64>, loss: f64) -> BatchStats {
    BatchStats {
        samples: sampled.len(),
        reward_sum: eval.r_sampled.iter().sum(),
        correct_sampled: eval.correct_sampled,
        correct_greedy: eval.correct_greedy,
        pr_sum: sampled.iter().map(Policy::keep_ratio).sum(),
        uniqueness_sum: eval.u.iter().sum(),
        loss,
        sampled,
        advantages,
    }
}

/// One joint update: policy-gradient surrogate plus `β` times the
/// recognition cross-entropy along the sampled paths.
pub fn finetune_step(
    batch: &Prepared,
    policy: &mut PolicyNetwork,
    net: &mut BlockNet,
    opt_policy: &mut Sgd,
    opt_net: &mut Sgd,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BatchStats> {
    let mut tape = Tape::new();
    let l = tape.constant(batch.x_loc.clone());
    let i = tape.constant(batch.x_img.clone());
    let s = policy.fuse_batch(&mut tape, l, i)?;
    let ro = rollout(policy, &tape, s, rng)?;

    let x = tape.constant(batch.x_img.clone());
    let logits = net.forward(&mut tape, x, Some(&ro.sampled))?;
    let ps = preds(tape.value(logits));
    let pg = preds(&net.logits(&batch.x_img, Some(&ro.greedy))?);
    let eval = batch_rewards(cfg, &ro.sampled, &ro.greedy, &ps, &pg, &batch.labels)?;
    let advantages: Vec<f64> = eval
        .r_sampled
        .iter()
        .zip(&eval.r_greedy)
        .map(|(a, b)| a - b)
        .collect();

    let pg_loss = self_critical_loss(&mut tape, s, &ro.sampled, &advantages)?;
    let loss = if cfg.beta > 0.0 {
        let ce = tape.softmax_cross_entropy(logits, &batch.labels)?;
        let ce = tape.scale(ce, cfg.beta);
        tape.add(pg_loss, ce)?
    } else {
        pg_loss
    };
    let loss_value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    cfg.finetune.clip(&mut grads);
    opt_policy.step(policy.loc_params_mut(), &grads);
    opt_policy.step(policy.img_params_mut(), &grads);
    if cfg.beta > 0.0 {
        opt_net.step(net.params_mut(), &grads);
    }
    Ok(stats_from(eval, ro.sampled, advantages, loss_value))
}

/// Path selection used by [`evaluate`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Greedy,
    Sample,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(EvalMode::Greedy),
            "sample" => Ok(EvalMode::Sample),
            other => Err(Error::UnknownName {
                kind: "evaluation mode",
                name: other.into(),
            }),
        }
    }
}

/// Fixed path overriding the policy network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForcePolicy {
    Ones,
    Zeros,
}

impl FromStr for ForcePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ones" => Ok(ForcePolicy::Ones),
            "zeros" => Ok(ForcePolicy::Zeros),
            other => Err(Error::UnknownName {
                kind: "forced policy",
                name: other.into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub label: usize,
    pub prediction: usize,
    pub correct: bool,
    pub policy: Policy,
    pub pr: f64,
    pub cost_units: u64,
    pub uniqueness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub samples: usize,
    pub accuracy: f64,
    pub mean_pr: f64,
    pub diversity: usize,
    pub mean_uniqueness: f64,
    pub mean_reward: f64,
    pub cost_mean: f64,
    pub cost_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub records: Vec<SampleRecord>,
}

/// Runs every sample of `data` once. Uniqueness and reward are computed
/// over the whole emitted policy set.
pub fn evaluate(
    data: &Prepared,
    policy: &PolicyNetwork,
    net: &BlockNet,
    mode: EvalMode,
    force: Option<ForcePolicy>,
    reward_cfg: &RewardConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EvalReport> {
    let n = net.blocks();
    let policies: Vec<Policy> = match force {
        Some(ForcePolicy::Ones) => vec![Policy::ones(n); data.len()],
        Some(ForcePolicy::Zeros) => vec![Policy::zeros(n); data.len()],
        None => {
            let probs = policy.keep_probs(&data.x_loc, &data.x_img)?;
            match mode {
                EvalMode::Greedy => probs.iter().map(greedy_policy).collect(),
                EvalMode::Sample => probs.iter().map(|p| sample_policy(p, rng)).collect(),
            }
        }
    };
    report_for(data, net, policies, reward_cfg)
}

fn report_for(
    data: &Prepared,
    net: &BlockNet,
    policies: Vec<Policy>,
    reward_cfg: &RewardConfig,
) -> Result<EvalReport> {
    let logits = net.logits(&data.x_img, Some(&policies))?;
    let (preds, correct) = accuracy(&logits, &data.labels);
    let u = if policies.is_empty() {
        Vec::new()
    } else {
        uniqueness_with(&policies, UniquenessMode::IncludeSelf)?
    };
    let records: Vec<SampleRecord> = (0..data.len())
        .map(|k| {
            let cost = net.sparsity(&policies[k]);
            SampleRecord {
                id: data.ids[k],
                label: data.labels[k],
                prediction: preds[k],
                correct: preds[k] == data.labels[k],
                policy: policies[k].clone(),
                pr: cost.pr,
                cost_units: cost.cost_units,
                uniqueness: u[k],
            }
        })
        .collect();
    let m = records.len().max(1) as f64;
    let cost_mean = records.iter().map(|r| r.cost_units as f64).sum::<f64>() / m;
    let cost_var = records
        .iter()
        .map(|r| (r.cost_units as f64 - cost_mean).powi(2))
        .sum::<f64>()
        / m;
    let mean_reward = records
        .iter()
        .map(|r| reward(&r.policy, r.uniqueness, r.correct, reward_cfg))
        .sum::<f64>()
        / m;
    Ok(EvalReport {
        summary: EvalSummary {
            samples: records.len(),
            accuracy: ratio(correct, records.len()),
            mean_pr: records.iter().map(|r| r.pr).sum::<f64>() / m,
            diversity: diversity(&policies),
            mean_uniqueness: u.iter().sum::<f64>() / m,
            mean_reward,
            cost_mean,
            cost_std: cost_var.sqrt(),
        },
        records,
    })
}

fn epoch_row(
    epoch: usize,
    stage: Stage,
    batches: &[BatchStats],
    eval: &EvalSummary,
) -> EpochMetrics {
    let samples: usize = batches.iter().map(|b| b.samples).sum();
    let m = samples.max(1) as f64;
    EpochMetrics {
        epoch,
        stage,
        loss: batches.iter().map(|b| b.loss).sum::<f64>() / batches.len().max(1) as f64,
        mean_reward: Some(batches.iter().map(|b| b.reward_sum).sum::<f64>() / m),
        accuracy_sample: Some(batches.iter().map(|b| b.correct_sampled).sum::<usize>() as f64 / m),
        accuracy_greedy: eval.accuracy,
        mean_pr: batches.iter().map(|b| b.pr_sum).sum::<f64>() / m,
        eval_pr: eval.mean_pr,
        diversity: eval.diversity,
        mean_uniqueness: Some(batches.iter().map(|b| b.uniqueness_sum).sum::<f64>() / m),
    }
}

/// Policy-gradient training with a frozen recognition network. After each
/// epoch a greedy pass over `eval` (or `train` when absent) supplies the
/// accuracy, Pr and diversity columns.
pub fn train_policy(
    train: &Prepared,
    eval: Option<&Prepared>,
    policy: &mut PolicyNetwork,
    net: &BlockNet,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    policy.set_use_location(!cfg.remove_mlp);
    let mut rng = cfg.stage_rng(Stage::Policy);
    let mut opt = Sgd::new(cfg.policy.lr, cfg.momentum);
    let eval_set = eval.unwrap_or(train);
    let rc = cfg.effective_reward();
    let mut rows = Vec::with_capacity(cfg.policy.epochs);
    for epoch in 0..cfg.policy.epochs {
        let mut stats = Vec::new();
        for idx in shuffled_batches(train.len(), cfg.batch_size, &mut rng) {
            let batch = train.select(&idx);
            stats.push(policy_step(&batch, policy, net, &mut opt, cfg, &mut rng)?);
        }
        let report = evaluate(eval_set, policy, net, EvalMode::Greedy, None, &rc, &mut rng)?;
        rows.push(epoch_row(epoch, Stage::Policy, &stats, &report.summary));
    }
    Ok(rows)
}

/// Joint finetuning of both networks.
pub fn joint_finetune(
    train: &Prepared,
    eval: Option<&Prepared>,
    policy: &mut PolicyNetwork,
    net: &mut BlockNet,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    policy.set_use_location(!cfg.remove_mlp);
    let mut rng = cfg.stage_rng(Stage::Finetune);
    let mut opt_policy = Sgd::new(cfg.finetune.lr, cfg.momentum);
    let mut opt_net = Sgd::new(cfg.finetune.lr, cfg.momentum);
    let eval_set = eval.unwrap_or(train);
    let rc = cfg.effective_reward();
    let mut rows = Vec::with_capacity(cfg.finetune.epochs);
    for epoch in 0..cfg.finetune.epochs {
        let mut stats = Vec::new();
        for idx in shuffled_batches(train.len(), cfg.batch_size, &mut rng) {
            let batch = train.select(&idx);
            stats.push(finetune_step(
                &batch,
                policy,
                net,
                &mut opt_policy,
                &mut opt_net,
                cfg,
                &mut rng,
            )?);
        }
        let report = evaluate(eval_set, policy, net, EvalMode::Greedy, None, &rc, &mut rng)?;
        rows.push(epoch_row(epoch, Stage::Finetune, &stats, &report.summary));
    }
    Ok(rows)
}

/// RNG for evaluation passes outside the training loops.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(Stage::Evaluate as u64 + 1);
    rng
}
