use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{param_key, Grads, Tape, Tensor2, Var};
use crate::error::{shape_err, Error, Result};

/// Named parameters belonging to one module (e.g. `policy.loc`). Values
/// are shared with tapes and copied only when updated while a tape holds
/// them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    module: String,
    entries: BTreeMap<String, Arc<Tensor2>>,
}

impl ParamSet {
    pub fn new(module: impl Into<String>) -> Self {
        ParamSet {
            module: module.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn module(&self) -> &str {
        &self.module
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    /// Panics if `name` was never inserted; parameter names are fixed at
    /// construction.
    pub fn get(&self, name: &str) -> &Tensor2 {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name} in {}", self.module))
            .as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Puts `name` on the tape as a differentiable parameter.
    pub fn on_tape(&self, tape: &mut Tape, name: &str) -> Var {
        let value = self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name} in {}", self.module));
        tape.param_shared(&self.module, name, Arc::clone(value))
    }

    /// Adds a dense layer `name.w` (fan_in×fan_out) and `name.b` (1×fan_out).
    /// Weights are uniform in ±√(6/(fan_in+fan_out)), biases zero.
    pub fn add_linear<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let w = Tensor2::from_vec(fan_in, fan_out, data).expect("sized by construction");
        self.insert(format!("{name}.w"), w);
        self.insert(format!("{name}.b"), Tensor2::zeros(1, fan_out));
    }

    /// `x·W + b` for the dense layer `name`.
    pub fn linear(&self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let w = self.on_tape(tape, &format!("{name}.w"));
        let b = self.on_tape(tape, &format!("{name}.b"));
        tape.affine(x, w, b)
    }
}

/// Stochastic gradient descent with momentum: `v ← μv + g`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor2>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every parameter of `params` that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        let module = params.module.clone();
        for (name, w) in params.entries.iter_mut() {
            let key = param_key(&module, name);
            let Some(g) = grads.get(&key) else { continue };
            let v = self
                .velocity
                .entry(key)
                .or_insert_with(|| Tensor2::zeros(w.rows(), w.cols()));
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            Arc::make_mut(w).axpy(-self.lr, v);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// JSON checkpoint: module name → parameter name → shape + row-major values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Checkpoint {
    modules: BTreeMap<String, BTreeMap<String, ParamRecord>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn modules(&self) -> impl Iterator<Item = &str> {
        self.modules.keys().map(String::as_str)
    }

    pub fn contains(&self, module: &str) -> bool {
        self.modules.contains_key(module)
    }

    pub fn store(&mut self, params: &ParamSet) {
        let records = params
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    ParamRecord {
                        shape: [t.rows(), t.cols()],
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        self.modules.insert(params.module.clone(), records);
    }

    /// Overwrites `params` from the stored module of the same name. The
    /// stored parameter names and shapes must match exactly.
    pub fn restore(&self, params: &mut ParamSet) -> Result<()> {
        let module = params.module.clone();
        let records = self
            .modules
            .get(&module)
            .ok_or_else(|| Error::Checkpoint(format!("module '{module}' missing")))?;
        if records.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "module '{module}' has {} parameters, network expects {}",
                records.len(),
                params.len()
            )));
        }
        for (name, w) in params.entries.iter_mut() {
            let rec = records.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("parameter '{module}/{name}' missing"))
            })?;
            if rec.shape != [w.rows(), w.cols()] {
                return Err(shape_err(
                    "checkpoint restore",
                    format!(
                        "parameter '{module}/{name}' has shape {:?}, network expects [{}, {}]",
                        rec.shape,
                        w.rows(),
                        w.cols()
                    ),
                ));
            }
            let t = Tensor2::from_vec(rec.shape[0], rec.shape[1], rec.values.clone())
                .map_err(|_| {
                    Error::Checkpoint(format!(
                        "parameter '{module}/{name}' has {} values for shape {:?}",
                        rec.values.len(),
                        rec.shape
                    ))
                })?;
            if !t.all_finite() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{module}/{name}' contains non-finite values"
                )));
            }
            *w = Arc::new(t);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn from_value(v: serde_json::Value) -> Result<Self> {
        Ok(serde_json::from_value(v)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new("m");
        p.add_linear("fc", 10, 6, &mut rng);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(p.get("fc.w").data().iter().all(|v| v.abs() <= bound));
        assert!(p.get("fc.b").data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_momentum_update() {
        let mut p = ParamSet::new("m");
        p.insert("w", Tensor2::row_vector(&[1.0, 2.0]));
        let mut tape = Tape::new();
        let w = p.on_tape(&mut tape, "w");
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut p, &g);
        assert_eq!(p.get("w").data(), &[0.9, 1.9]);
        // v = 0.9 * 1 + 1 = 1.9
        opt.step(&mut p, &g);
        let w = p.get("w").data();
        assert!((w[0] - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = ParamSet::new("net");
        a.add_linear("fc", 3, 2, &mut rng);
        let mut ck = Checkpoint::new();
        ck.store(&a);

        let mut b = ParamSet::new("net");
        b.add_linear("fc", 3, 4, &mut rng);
        let err = ck.restore(&mut b).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");

        let mut c = ParamSet::new("other");
        c.add_linear("fc", 3, 2, &mut rng);
        assert!(matches!(ck.restore(&mut c), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn checkpoint_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ParamSet::new("policy.loc");
        a.add_linear("fc1", 4, 3, &mut rng);
        let mut ck = Checkpoint::new();
        ck.store(&a);
        let json = ck.to_json().unwrap();
        let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(doc["policy.loc"]["fc1.w"]["shape"], serde_json::json!([4, 3]));

        let mut b = ParamSet::new("policy.loc");
        b.add_linear("fc1", 4, 3, &mut rng);
        Checkpoint::from_json(&json).unwrap().restore(&mut b).unwrap();
        assert_eq!(a, b);
    }
}
