//! Independent oracles shared by the integration tests: central finite
//! differences, randomly composed networks, enumeration over all paths and a
//! chi-square goodness-of-fit statistic.

#![allow(dead_code)]

use geopath::diffcore::{param_key, Grads, Tape, Tensor2, Var};
use geopath::policynet::{log_likelihood, Policy, PolicyNetConfig, PolicyNetwork};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// Upper 0.001 tail of the chi-square distribution with 7 degrees of freedom.
pub const CHI2_7DF_P001: f64 = 24.322;

pub const MODULE: &str = "check";

pub fn name(i: usize) -> String {
    format!("p{i}")
}

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub failures: usize,
}

impl FdReport {
    pub fn ok(&self) -> bool {
        self.failures == 0
    }

    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.max_rel = self.max_rel.max(other.max_rel);
        self.failures += other.failures;
    }
}

/// Agreement test with a relative tolerance and an absolute floor.
pub fn grads_agree(analytic: f64, numeric: f64) -> (bool, f64) {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    let rel = if scale > 0.0 { diff / scale } else { 0.0 };
    (diff <= FD_ABS_FLOOR || rel < FD_REL_TOL, rel)
}

/// Compares tape gradients of `build` with central differences over every
/// entry of every parameter. `build` must register `params[i]` under
/// `(MODULE, name(i))` and return the scalar loss.
pub fn finite_difference_check<F>(params: &[Tensor2], build: F) -> FdReport
where
    F: Fn(&mut Tape, &[Tensor2]) -> Var,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    let grads = tape.backward(loss).expect("scalar loss");
    let eval = |ps: &[Tensor2]| {
        let mut t = Tape::new();
        let l = build(&mut t, ps);
        t.value(l).item()
    };
    let mut report = FdReport::default();
    let mut work = params.to_vec();
    for (i, p) in params.iter().enumerate() {
        let g = grads
            .get(&param_key(MODULE, &name(i)))
            .expect("every parameter receives a gradient");
        for k in 0..p.len() {
            let orig = p.data()[k];
            work[i].data_mut()[k] = orig + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[k] = orig - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let (ok, rel) = grads_agree(g.data()[k], numeric);
            report.checked += 1;
            report.max_rel = report.max_rel.max(rel);
            if !ok {
                report.failures += 1;
            }
        }
    }
    report
}

pub fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor2 {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

#[derive(Clone, Copy, Debug)]
enum Act {
    Identity,
    Relu,
    Sigmoid,
    Exp,
    Clamp,
    Square,
}

#[derive(Clone, Debug)]
enum Head {
    CrossEntropy(Vec<usize>),
    LogSigmoidMean,
    SumRowsWeighted(Tensor2),
    Gated(Vec<bool>),
    PathLikelihood(Vec<Policy>, Vec<f64>),
}

/// A randomly composed dense network with a scalar loss, built only from
/// public tape operations.
#[derive(Clone, Debug)]
pub struct RandomNet {
    pub params: Vec<Tensor2>,
    x: Tensor2,
    acts: Vec<Act>,
    offset: Tensor2,
    head: Head,
}

/// Distance below which a kinked op input is considered too close to its
/// kink for a finite-difference comparison.
const KINK_MARGIN: f64 = 1e-3;
const CLAMP_LO: f64 = -0.8;
const CLAMP_HI: f64 = 0.8;

impl RandomNet {
    /// Draws networks until one has no kinked input within the margin of a
    /// kink.
    pub fn sample<R: Rng>(rng: &mut R) -> RandomNet {
        loop {
            let net = Self::draw(rng);
            if net.min_kink_distance() > KINK_MARGIN {
                return net;
            }
        }
    }

    fn draw<R: Rng>(rng: &mut R) -> RandomNet {
        let m = rng.random_range(1..=4);
        let depth = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(1..=6)];
        for _ in 0..depth {
            dims.push(rng.random_range(1..=6));
        }
        let x = random_tensor(rng, m, dims[0], 1.0);
        let mut params = Vec::new();
        let mut acts = Vec::new();
        let all = [
            Act::Identity,
            Act::Relu,
            Act::Sigmoid,
            Act::Exp,
            Act::Clamp,
            Act::Square,
        ];
        for w in dims.windows(2) {
            params.push(random_tensor(rng, w[0], w[1], 1.0));
            params.push(random_tensor(rng, 1, w[1], 0.5));
            acts.push(*all.choose(rng).unwrap());
        }
        let out = *dims.last().unwrap();
        let offset = random_tensor(rng, m, out, 0.3);
        let head = match rng.random_range(0..5) {
            0 => Head::CrossEntropy((0..m).map(|_| rng.random_range(0..out)).collect()),
            1 => Head::LogSigmoidMean,
            2 => Head::SumRowsWeighted(random_tensor(rng, m, 1, 1.0)),
            3 => Head::Gated((0..m).map(|_| rng.random_bool(0.5)).collect()),
            _ => {
                let policies = (0..m)
                    .map(|_| Policy::from_bits((0..out).map(|_| rng.random_bool(0.5)).collect()))
                    .collect();
                let adv = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
                Head::PathLikelihood(policies, adv)
            }
        };
        RandomNet {
            params,
            x,
            acts,
            offset,
            head,
        }
    }

    /// Builds the loss on `tape`. Returns the loss and the inputs of every
    /// kinked op.
    fn build_inner(&self, tape: &mut Tape, params: &[Tensor2]) -> (Var, Vec<Var>, Vec<Var>) {
        let mut h = tape.constant(self.x.clone());
        let mut relu_inputs = Vec::new();
        let mut clamp_inputs = Vec::new();
        for (layer, act) in self.acts.iter().enumerate() {
            let w = tape.param(MODULE, &name(2 * layer), &params[2 * layer]);
            let b = tape.param(MODULE, &name(2 * layer + 1), &params[2 * layer + 1]);
            let z = tape.affine(h, w, b).unwrap();
            h = match act {
                Act::Identity => z,
                Act::Relu => {
                    relu_inputs.push(z);
                    tape.relu(z)
                }
                Act::Sigmoid => tape.sigmoid(z),
                Act::Exp => {
                    let small = tape.scale(z, 0.5);
                    tape.exp(small)
                }
                Act::Clamp => {
                    clamp_inputs.push(z);
                    tape.clamp(z, CLAMP_LO, CLAMP_HI)
                }
                Act::Square => {
                    let quarter = tape.value(z).map(|_| 0.25);
                    let shifted = tape.add_const(z, &quarter).unwrap();
                    tape.mul(shifted, z).unwrap()
                }
            };
        }
        let h = tape.add_const(h, &self.offset).unwrap();
        let loss = match &self.head {
            Head::CrossEntropy(labels) => tape.softmax_cross_entropy(h, labels).unwrap(),
            Head::LogSigmoidMean => {
                let s = tape.sigmoid(h);
                let l = tape.log(s).unwrap();
                tape.mean(l)
            }
            Head::SumRowsWeighted(w) => {
                let r = tape.sum_rows(h);
                let r = tape.mul_const(r, w.clone()).unwrap();
                let half = tape.scale(r, 0.5);
                let r = tape.sub(r, half).unwrap();
                tape.sum(r)
            }
            Head::Gated(gates) => {
                let f = tape.sigmoid(h);
                let g = tape.gate(h, f, gates).unwrap();
                tape.mean(g)
            }
            Head::PathLikelihood(policies, adv) => {
                let s = tape.sigmoid(h);
                let s = tape.scale_shift(s, 0.9, 0.05);
                let ll = log_likelihood(tape, s, policies).unwrap();
                let weighted = tape.mul_const(ll, Tensor2::col_vector(adv)).unwrap();
                let total = tape.sum(weighted);
                tape.scale(total, -1.0 / adv.len() as f64)
            }
        };
        (loss, relu_inputs, clamp_inputs)
    }

    pub fn build(&self, tape: &mut Tape, params: &[Tensor2]) -> Var {
        self.build_inner(tape, params).0
    }

    fn min_kink_distance(&self) -> f64 {
        let mut tape = Tape::new();
        let (_, relus, clamps) = self.build_inner(&mut tape, &self.params);
        let mut best = f64::INFINITY;
        for v in relus {
            for &z in tape.value(v).data() {
                best = best.min(z.abs());
            }
        }
        for v in clamps {
            for &z in tape.value(v).data() {
                best = best.min((z - CLAMP_LO).abs()).min((z - CLAMP_HI).abs());
            }
        }
        best
    }

    pub fn check(&self) -> FdReport {
        finite_difference_check(&self.params, |t, p| self.build(t, p))
    }

    pub fn gradients(&self) -> Grads {
        let mut tape = Tape::new();
        let loss = self.build(&mut tape, &self.params);
        tape.backward(loss).unwrap()
    }
}

/// Runs the finite-difference oracle over `count` random networks.
pub fn check_random_networks<R: Rng>(rng: &mut R, count: usize) -> FdReport {
    let mut total = FdReport::default();
    for _ in 0..count {
        total.merge(RandomNet::sample(rng).check());
    }
    total
}

/// All `2^n` paths in index order.
pub fn all_policies(n: usize) -> Vec<Policy> {
    (0..1usize << n).map(|c| Policy::from_index(c, n)).collect()
}

/// Pearson chi-square statistic of observed counts against probabilities.
pub fn chi_square(observed: &[u64], probs: &[f64]) -> f64 {
    let total: u64 = observed.iter().sum();
    observed
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = p * total as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

pub fn small_policy(seed: u64) -> PolicyNetwork {
    let cfg = PolicyNetConfig {
        blocks: 3,
        image_dim: 4,
        image_hidden: 8,
        ..Default::default()
    };
    PolicyNetwork::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn inputs(rows: usize, seed: u64) -> (Tensor2, Tensor2) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loc: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let img: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rep = |v: &[f64]| Tensor2::from_rows(&vec![v.to_vec(); rows]).unwrap();
    (rep(&loc), rep(&img))
}

/// Exact `∇ Σ_p π(p) R(p)` by enumerating every path on the tape.
pub fn exact_objective_gradient(policy: &PolicyNetwork, table: &[f64]) -> (f64, Grads) {
    let paths = all_policies(policy.blocks());
    let (loc, img) = inputs(paths.len(), 99);
    let mut tape = Tape::new();
    let l = tape.constant(loc);
    let i = tape.constant(img);
    let s = policy.fuse_batch(&mut tape, l, i).unwrap();
    let ll = log_likelihood(&mut tape, s, &paths).unwrap();
    let pi = tape.exp(ll);
    let weighted = tape.mul_const(pi, Tensor2::col_vector(table)).unwrap();
    let objective = tape.sum(weighted);
    let value = tape.value(objective).item();
    (value, tape.backward(objective).unwrap())
}

pub fn table_reward(table: &[f64], p: &Policy) -> f64 {
    let code = p.bits().iter().enumerate().map(|(n, &b)| (b as usize) << n).sum::<usize>();
    table[code]
}

/// Flattens two gradient maps over the keys of `reference`, treating missing
/// entries as zero.
pub fn aligned(estimate: &Grads, reference: &Grads) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (key, r) in reference.iter() {
        b.extend_from_slice(r.data());
        match estimate.get(key) {
            Some(e) => a.extend_from_slice(e.data()),
            None => a.extend(std::iter::repeat_n(0.0, r.len())),
        }
    }
    (a, b)
}
