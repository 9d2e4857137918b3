//! Recognition network with individually skippable residual blocks.
//!
//! `x₀ = relu(stem(x))`, `x_n = x_{n−1} + p^n·F_n(x_{n−1})` with
//! `F_n = fc2(relu(fc1(·)))`, logits `= head(x_N)`. All blocks share one
//! width so any subset of them forms a valid path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Tape, Tensor2, Var};
use crate::error::{shape_err, Error, Result};
use crate::policynet::Policy;

pub const MODULE: &str = "recognition";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockNetConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub classes: usize,
}

impl Default for BlockNetConfig {
    fn default() -> Self {
        BlockNetConfig {
            input_dim: 32,
            hidden: 64,
            blocks: 9,
            classes: 20,
        }
    }
}

impl BlockNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.blocks == 0 || self.classes == 0 {
            return Err(Error::Config("recognition network sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Compute accounting for one path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// `|p|₀`
    pub active_blocks: usize,
    /// `|p|₀ / N`
    pub pr: f64,
    /// Multiply-accumulate count of one forward pass along the path.
    pub cost_units: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockNet {
    cfg: BlockNetConfig,
    params: ParamSet,
}

impl BlockNet {
    pub fn new<R: Rng + ?Sized>(cfg: &BlockNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let mut params = ParamSet::new(MODULE);
        params.add_linear("stem", cfg.input_dim, h, rng);
        for n in 0..cfg.blocks {
            params.add_linear(&format!("block{n}.fc1"), h, h, rng);
            params.add_linear(&format!("block{n}.fc2"), h, h, rng);
        }
        params.add_linear("head", h, cfg.classes, rng);
        Ok(BlockNet { cfg: *cfg, params })
    }

    pub fn config(&self) -> &BlockNetConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> usize {
        self.cfg.blocks
    }

    pub fn classes(&self) -> usize {
        self.cfg.classes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn residual(&self, tape: &mut Tape, n: usize, x: Var) -> Result<Var> {
        let h = self.params.linear(tape, &format!("block{n}.fc1"), x)?;
        let h = tape.relu(h);
        self.params.linear(tape, &format!("block{n}.fc2"), h)
    }

    /// Batched forward pass. `policies` holds one path per row of `x`;
    /// `None` runs every block without gating.
    pub fn forward(&self, tape: &mut Tape, x: Var, policies: Option<&[Policy]>) -> Result<Var> {
        let (rows, cols) = tape.value(x).shape();
        if cols != self.cfg.input_dim {
            return Err(shape_err(
                "recognition",
                format!("expects {} input features, got {cols}", self.cfg.input_dim),
            ));
        }
        if let Some(ps) = policies {
            if ps.len() != rows {
                return Err(shape_err(
                    "recognition",
                    format!("{} policies for {rows} inputs", ps.len()),
                ));
            }
            if let Some(p) = ps.iter().find(|p| p.len() != self.cfg.blocks) {
                return Err(shape_err(
                    "recognition",
                    format!("policy of length {} for {} blocks", p.len(), self.cfg.blocks),
                ));
            }
        }

        let h = self.params.linear(tape, "stem", x)?;
        let mut h = tape.relu(h);
        for n in 0..self.cfg.blocks {
            let gates: Option<Vec<bool>> = policies.map(|ps| ps.iter().map(|p| p.bits()[n]).collect());
            match gates {
                Some(g) if g.iter().all(|&b| !b) => continue,
                Some(g) if !g.iter().all(|&b| b) => {
                    let f = self.residual(tape, n, h)?;
                    h = tape.gate(h, f, &g)?;
                }
                _ => {
                    let f = self.residual(tape, n, h)?;
                    h = tape.add(h, f)?;
                }
            }
        }
        self.params.linear(tape, "head", h)
    }

    /// Class logits for every row of `x` along the given paths.
    pub fn logits(&self, x: &Tensor2, policies: Option<&[Policy]>) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, policies)?;
        Ok(tape.value(out).clone())
    }

    /// Class logits of one input along path `p`.
    pub fn infer(&self, x: &[f64], p: &Policy) -> Result<Vec<f64>> {
        let logits = self.logits(&Tensor2::row_vector(x), Some(std::slice::from_ref(p)))?;
        Ok(logits.into_vec())
    }

    pub fn stem_cost(&self) -> u64 {
        (self.cfg.input_dim * self.cfg.hidden) as u64
    }

    pub fn block_cost(&self) -> u64 {
        (2 * self.cfg.hidden * self.cfg.hidden) as u64
    }

    pub fn head_cost(&self) -> u64 {
        (self.cfg.hidden * self.cfg.classes) as u64
    }

    pub fn sparsity(&self, p: &Policy) -> CostReport {
        let active = p.active();
        CostReport {
            active_blocks: active,
            pr: p.keep_ratio(),
            cost_units: self.stem_cost() + active as u64 * self.block_cost() + self.head_cost(),
        }
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Mean of per-path keep ratios.
pub fn mean_pr(policies: &[Policy]) -> f64 {
    if policies.is_empty() {
        return 0.0;
    }
    policies.iter().map(Policy::keep_ratio).sum::<f64>() / policies.len() as f64
}
