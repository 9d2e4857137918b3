//! The two-branch policy network and the Bernoulli path policy it induces.
//!
//! The location branch is a fixed 8→128→256→256→128→N MLP over the encoded
//! coordinates. The image branch is any [`FeatureBranch`]; the default is a
//! dense d→h→h→N network over precomputed image features. Branch outputs
//! are mixed as `α·loc + (1−α)·img` and squashed into keep probabilities.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, Mlp, ParamSet, Tape, Tensor2, Var};
use crate::error::{shape_err, Error, Result};
use crate::geoenc::GEO_DIM;

pub const LOC_MODULE: &str = "policy.loc";
pub const IMG_MODULE: &str = "policy.img";

/// Hidden widths of the location MLP.
pub const LOC_HIDDEN: [usize; 4] = [128, 256, 256, 128];

/// Keep (`true`) / skip (`false`) decision per residual block.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Policy {
    bits: Vec<bool>,
}

impl Policy {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Policy { bits }
    }

    pub fn ones(n: usize) -> Self {
        Policy { bits: vec![true; n] }
    }

    pub fn zeros(n: usize) -> Self {
        Policy { bits: vec![false; n] }
    }

    /// Policy whose bit `i` is bit `i` of `code` (little-endian).
    pub fn from_index(code: usize, n: usize) -> Self {
        Policy {
            bits: (0..n).map(|i| code >> i & 1 == 1).collect(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// `|p|₀`
    pub fn active(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `|p|₀ / N`
    pub fn keep_ratio(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.active() as f64 / self.len() as f64
    }

    pub fn complement(&self) -> Policy {
        Policy {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// True if every kept block of `self` is also kept in `other`.
    pub fn is_subset_of(&self, other: &Policy) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Policy({self})")
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::Config(format!("invalid policy string '{s}'"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Policy::from_bits)
    }
}

impl From<Policy> for String {
    fn from(p: Policy) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for Policy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Per-block keep probabilities `s`, each within `[ε, 1−ε]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeepProbs {
    values: Vec<f64>,
}

impl KeepProbs {
    pub fn new(values: Vec<f64>, epsilon: f64) -> Result<Self> {
        if let Some(v) = values
            .iter()
            .find(|&&v| !(v >= epsilon && v <= 1.0 - epsilon))
        {
            return Err(Error::Config(format!(
                "keep probability {v} outside [{epsilon}, {}]",
                1.0 - epsilon
            )));
        }
        Ok(KeepProbs { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `π(p|s) = Π s^p (1−s)^(1−p)`, in log space.
    pub fn log_likelihood(&self, p: &Policy) -> Result<f64> {
        if p.len() != self.len() {
            return Err(shape_err(
                "log_likelihood",
                format!("policy of length {} for {} blocks", p.len(), self.len()),
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(p.bits())
            .map(|(&s, &b)| if b { s.ln() } else { (1.0 - s).ln() })
            .sum())
    }
}

/// Independent Bernoulli draw per block, consuming one uniform per block in
/// index order.
pub fn sample_policy<R: Rng + ?Sized>(s: &KeepProbs, rng: &mut R) -> Policy {
    Policy::from_bits(
        s.values
            .iter()
            .map(|&p| rng.random::<f64>() < p)
            .collect(),
    )
}

/// The most probable policy: keep block `n` iff `s^n > 0.5`.
pub fn greedy_policy(s: &KeepProbs) -> Policy {
    Policy::from_bits(s.values.iter().map(|&p| p > 0.5).collect())
}

/// Row-wise log-likelihood of `policies` under keep probabilities `s`
/// (M×N), as an M×1 tape node: `Σ_n log(s·p + (1−s)(1−p))`.
pub fn log_likelihood(tape: &mut Tape, s: Var, policies: &[Policy]) -> Result<Var> {
    let (m, n) = tape.value(s).shape();
    if policies.len() != m || policies.iter().any(|p| p.len() != n) {
        return Err(shape_err(
            "log_likelihood",
            format!("{} policies for {m}x{n} keep probabilities", policies.len()),
        ));
    }
    // s·p + (1−s)(1−p) = s·(2p−1) + (1−p)
    let mut sign = Tensor2::zeros(m, n);
    let mut offset = Tensor2::zeros(m, n);
    for (r, p) in policies.iter().enumerate() {
        for (c, &b) in p.bits().iter().enumerate() {
            sign.set(r, c, if b { 1.0 } else { -1.0 });
            offset.set(r, c, if b { 0.0 } else { 1.0 });
        }
    }
    let signed = tape.mul_const(s, sign)?;
    let prob = tape.add_const(signed, &offset)?;
    let logp = tape.log(prob)?;
    Ok(tape.sum_rows(logp))
}

/// Image-feature extractor feeding the policy. The dense [`Mlp`] is the
/// stock implementation; any extractor producing one logit per block can be
/// substituted.
pub trait FeatureBranch {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var>;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
}

impl FeatureBranch for Mlp {
    fn input_dim(&self) -> usize {
        Mlp::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        Mlp::output_dim(self)
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Mlp::forward(self, tape, x)
    }

    fn params(&self) -> &ParamSet {
        Mlp::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        Mlp::params_mut(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyNetConfig {
    /// Number of gated blocks N.
    pub blocks: usize,
    /// Image-feature dimension d.
    pub image_dim: usize,
    /// Hidden width h of the dense image branch.
    pub image_hidden: usize,
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for PolicyNetConfig {
    fn default() -> Self {
        PolicyNetConfig {
            blocks: 9,
            image_dim: 32,
            image_hidden: 64,
            alpha: 0.7,
            epsilon: 0.05,
        }
    }
}

impl PolicyNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.image_dim == 0 || self.image_hidden == 0 {
            return Err(Error::Config("policy network sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!(
                "epsilon {} outside (0, 0.5)",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNetwork<B = Mlp> {
    loc: Mlp,
    img: B,
    alpha: f64,
    epsilon: f64,
    use_location: bool,
}

impl PolicyNetwork<Mlp> {
    pub fn new<R: Rng + ?Sized>(cfg: &PolicyNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.image_hidden;
        let img = Mlp::new(IMG_MODULE, &[cfg.image_dim, h, h, cfg.blocks], rng);
        PolicyNetwork::with_image_branch(cfg, img, rng)
    }
}

impl<B: FeatureBranch> PolicyNetwork<B> {
    /// Pairs a fresh location MLP with a caller-supplied image branch.
    pub fn with_image_branch<R: Rng + ?Sized>(
        cfg: &PolicyNetConfig,
        img: B,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if img.output_dim() != cfg.blocks {
            return Err(shape_err(
                "policy network",
                format!(
                    "image branch emits {} logits for {} blocks",
                    img.output_dim(),
                    cfg.blocks
                ),
            ));
        }
        let mut dims = vec![GEO_DIM];
        dims.extend_from_slice(&LOC_HIDDEN);
        dims.push(cfg.blocks);
        Ok(PolicyNetwork {
            loc: Mlp::new(LOC_MODULE, &dims, rng),
            img,
            alpha: cfg.alpha,
            epsilon: cfg.epsilon,
            use_location: true,
        })
    }

    pub fn blocks(&self) -> usize {
        self.loc.output_dim()
    }

    pub fn image_dim(&self) -> usize {
        self.img.input_dim()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        self.alpha = alpha;
        Ok(())
    }

    /// With the location branch disabled its output is replaced by zeros,
    /// so the policy sees image features only.
    pub fn set_use_location(&mut self, on: bool) {
        self.use_location = on;
    }

    pub fn uses_location(&self) -> bool {
        self.use_location
    }

    pub fn loc_params(&self) -> &ParamSet {
        self.loc.params()
    }

    pub fn img_params(&self) -> &ParamSet {
        self.img.params()
    }

    pub fn loc_params_mut(&mut self) -> &mut ParamSet {
        self.loc.params_mut()
    }

    pub fn img_params_mut(&mut self) -> &mut ParamSet {
        self.img.params_mut()
    }

    /// Pre-sigmoid fused logits `α·loc(x_loc) + (1−α)·img(x_img)` (M×N).
    pub fn fused_logits(&self, tape: &mut Tape, x_loc: Var, x_img: Var) -> Result<Var> {
        let (m_loc, m_img) = (tape.value(x_loc).rows(), tape.value(x_img).rows());
        if m_loc != m_img {
            return Err(shape_err(
                "fuse",
                format!("{m_loc} location rows vs {m_img} image rows"),
            ));
        }
        let img = self.img.forward(tape, x_img)?;
        let img = tape.scale(img, 1.0 - self.alpha);
        if !self.use_location {
            return Ok(img);
        }
        let loc = self.loc.forward(tape, x_loc)?;
        let loc = tape.scale(loc, self.alpha);
        tape.add(loc, img)
    }

    /// Keep probabilities for a batch (M×N tape node). The sigmoid is mapped
    /// affinely onto `[ε, 1−ε]`, which keeps every entry away from 0 and 1
    /// without zeroing gradients. The trailing clamp only absorbs rounding.
    pub fn fuse_batch(&self, tape: &mut Tape, x_loc: Var, x_img: Var) -> Result<Var> {
        let z = self.fused_logits(tape, x_loc, x_img)?;
        let s = tape.sigmoid(z);
        let eps = self.epsilon;
        let s = tape.scale_shift(s, 1.0 - 2.0 * eps, eps);
        Ok(tape.clamp(s, eps, 1.0 - eps))
    }

    /// Keep probabilities for every row of `x_loc` / `x_img`.
    pub fn keep_probs(&self, x_loc: &Tensor2, x_img: &Tensor2) -> Result<Vec<KeepProbs>> {
        let mut tape = Tape::new();
        let l = tape.constant(x_loc.clone());
        let i = tape.constant(x_img.clone());
        let s = self.fuse_batch(&mut tape, l, i)?;
        let sv = tape.value(s);
        Ok((0..sv.rows())
            .map(|r| KeepProbs {
                values: sv.row(r).to_vec(),
            })
            .collect())
    }

    /// Single-sample fusion.
    pub fn fuse(&self, x_loc: &[f64], x_img: &[f64]) -> Result<KeepProbs> {
        let mut probs = self.keep_probs(&Tensor2::row_vector(x_loc), &Tensor2::row_vector(x_img))?;
        Ok(probs.remove(0))
    }

    /// Keep probabilities from precomputed pre-sigmoid logits, applying the
    /// same squash as [`fuse_batch`](Self::fuse_batch).
    pub fn probs_from_logits(&self, logits: &[f64]) -> KeepProbs {
        let eps = self.epsilon;
        KeepProbs {
            values: logits
                .iter()
                .map(|&z| ((1.0 - 2.0 * eps) * sigmoid(z) + eps).clamp(eps, 1.0 - eps))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> PolicyNetConfig {
        PolicyNetConfig {
            blocks: 3,
            image_dim: 4,
            image_hidden: 5,
            ..Default::default()
        }
    }

    fn probs(v: &[f64]) -> KeepProbs {
        KeepProbs::new(v.to_vec(), 0.05).unwrap()
    }

    #[test]
    fn greedy_thresholds_strictly() {
        assert_eq!(greedy_policy(&probs(&[0.9, 0.2, 0.6])).to_string(), "101");
        assert_eq!(greedy_policy(&probs(&[0.5])).to_string(), "0");
    }

    #[test]
    fn greedy_is_the_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=10 {
            let s = probs(&(0..n).map(|_| rng.random_range(0.05..=0.95)).collect::<Vec<_>>());
            let g = s.log_likelihood(&greedy_policy(&s)).unwrap();
            for code in 0..1usize << n {
                let ll = s.log_likelihood(&Policy::from_index(code, n)).unwrap();
                assert!(g >= ll);
            }
        }
    }

    #[test]
    fn likelihood_examples() {
        let half = probs(&[0.5; 4]);
        let ll = half.log_likelihood(&"1010".parse().unwrap()).unwrap();
        assert!((ll - 4.0 * 0.5f64.ln()).abs() < 1e-15);

        let s = probs(&[0.8, 0.3]);
        let ll = s.log_likelihood(&"10".parse().unwrap()).unwrap();
        assert!((ll - (0.8f64.ln() + 0.7f64.ln())).abs() < 1e-15);
        assert!((ll + 0.5798).abs() < 1e-4);
        assert!(s.log_likelihood(&"1".parse().unwrap()).is_err());
    }

    #[test]
    fn likelihood_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..=10 {
            let s = probs(&(0..n).map(|_| rng.random_range(0.05..=0.95)).collect::<Vec<_>>());
            let total: f64 = (0..1usize << n)
                .map(|c| s.log_likelihood(&Policy::from_index(c, n)).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "n={n} total={total}");
        }
    }

    #[test]
    fn tape_likelihood_matches_values() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor2::from_rows(&[[0.8, 0.3], [0.5, 0.9]]).unwrap());
        let pols = ["10".parse().unwrap(), "01".parse().unwrap()];
        let ll = log_likelihood(&mut tape, s, &pols).unwrap();
        let v = tape.value(ll);
        assert!((v.get(0, 0) - probs(&[0.8, 0.3]).log_likelihood(&pols[0]).unwrap()).abs() < 1e-15);
        assert!((v.get(1, 0) - probs(&[0.5, 0.9]).log_likelihood(&pols[1]).unwrap()).abs() < 1e-15);
        assert!(log_likelihood(&mut tape, s, &pols[..1]).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let s = probs(&[0.3, 0.5, 0.9, 0.1]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_policy(&s, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn saturated_keep_rate_within_three_sigma() {
        let n = 6;
        let eps = 0.05;
        let s = probs(&vec![1.0 - eps; n]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 10_000;
        let mut kept = vec![0usize; n];
        for _ in 0..draws {
            for (k, &b) in kept.iter_mut().zip(sample_policy(&s, &mut rng).bits()) {
                *k += b as usize;
            }
        }
        let sigma = ((1.0 - eps) * eps / draws as f64).sqrt();
        for k in kept {
            let rate = k as f64 / draws as f64;
            assert!((rate - (1.0 - eps)).abs() <= 3.0 * sigma, "rate {rate}");
        }
    }

    #[test]
    fn fusion_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = PolicyNetwork::new(&small_cfg(), &mut rng).unwrap();
        let loc_a = [1.0, 0.2, 0.1, 0.3, -1.0, 0.5, 0.2, 0.9];
        let loc_b = [-1.0, 0.4, 0.9, 0.1, 1.0, 0.1, 0.7, 0.2];
        let img_a = [0.1, -0.2, 0.3, 0.5];
        let img_b = [-0.7, 0.4, 0.0, 0.2];

        net.set_alpha(1.0).unwrap();
        assert_eq!(net.fuse(&loc_a, &img_a).unwrap(), net.fuse(&loc_a, &img_b).unwrap());
        assert_ne!(net.fuse(&loc_a, &img_a).unwrap(), net.fuse(&loc_b, &img_a).unwrap());

        net.set_alpha(0.0).unwrap();
        assert_eq!(net.fuse(&loc_a, &img_a).unwrap(), net.fuse(&loc_b, &img_a).unwrap());
        assert_ne!(net.fuse(&loc_a, &img_a).unwrap(), net.fuse(&loc_a, &img_b).unwrap());

        net.set_alpha(0.7).unwrap();
        net.set_use_location(false);
        assert_eq!(net.fuse(&loc_a, &img_a).unwrap(), net.fuse(&loc_b, &img_a).unwrap());
        assert!(net.set_alpha(1.5).is_err());
    }

    #[test]
    fn zero_logits_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = PolicyNetwork::new(&small_cfg(), &mut rng).unwrap();
        assert_eq!(net.probs_from_logits(&[0.0; 3]).values(), &[0.5; 3]);
        let s = net.probs_from_logits(&[-1e3, 1e3]);
        assert_eq!(s.values(), &[0.05, 0.95]);
    }

    #[test]
    fn branch_gradients_split_at_fusion_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = PolicyNetwork::new(&small_cfg(), &mut rng).unwrap();
        let x_loc = Tensor2::from_rows(&[[1.0, 0.2, 0.1, 0.3, -1.0, 0.5, 0.2, 0.9]]).unwrap();
        let x_img = Tensor2::from_rows(&[[0.1, -0.2, 0.3, 0.5]]).unwrap();
        let pol: Policy = "101".parse().unwrap();
        for alpha in [0.0, 1.0] {
            net.set_alpha(alpha).unwrap();
            let mut tape = Tape::new();
            let l = tape.constant(x_loc.clone());
            let i = tape.constant(x_img.clone());
            let s = net.fuse_batch(&mut tape, l, i).unwrap();
            let ll = log_likelihood(&mut tape, s, std::slice::from_ref(&pol)).unwrap();
            let loss = tape.sum(ll);
            let g = tape.backward(loss).unwrap();
            let zero_module = if alpha == 1.0 { IMG_MODULE } else { LOC_MODULE };
            let live_module = if alpha == 1.0 { LOC_MODULE } else { IMG_MODULE };
            for (k, t) in g.iter() {
                if k.starts_with(zero_module) {
                    assert!(t.data().iter().all(|&v| v == 0.0), "{k} not zero");
                }
            }
            let live: f64 = g
                .iter()
                .filter(|(k, _)| k.starts_with(live_module))
                .map(|(_, t)| t.data().iter().map(|v| v.abs()).sum::<f64>())
                .sum();
            assert!(live > 0.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(PolicyNetConfig { alpha: -0.1, ..Default::default() }.validate().is_err());
        assert!(PolicyNetConfig { epsilon: 0.5, ..Default::default() }.validate().is_err());
        assert!(PolicyNetConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(PolicyNetConfig { blocks: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn policy_strings() {
        let p: Policy = "0110".parse().unwrap();
        assert_eq!(p.active(), 2);
        assert_eq!(p.keep_ratio(), 0.5);
        assert_eq!(p.complement().to_string(), "1001");
        assert!("01x".parse::<Policy>().is_err());
        assert_eq!(serde_json::to_string(&p).unwrap(), "\"0110\"");
        assert_eq!(Policy::from_index(0b101, 3).to_string(), "101");
    }
}
