use rand::Rng;

use crate::diffcore::{ParamSet, Tape, Var};
use crate::error::{shape_err, Result};

/// Dense stack `dims[0] → dims[1] → … → dims[last]` with ReLU between
/// layers and a linear output. Layers are named `fc1`, `fc2`, ….
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    params: ParamSet,
    dims: Vec<usize>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(module: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let mut params = ParamSet::new(module);
        for (i, pair) in dims.windows(2).enumerate() {
            params.add_linear(&format!("fc{}", i + 1), pair[0], pair[1], rng);
        }
        Mlp {
            params,
            dims: dims.to_vec(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.input_dim() {
            return Err(shape_err(
                "mlp",
                format!(
                    "{} expects {} input features, got {cols}",
                    self.params.module(),
                    self.input_dim()
                ),
            ));
        }
        let layers = self.dims.len() - 1;
        let mut h = x;
        for i in 1..=layers {
            h = self.params.linear(tape, &format!("fc{i}"), h)?;
            if i < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Multiply-accumulate count of one forward pass for a single input.
    pub fn macs(&self) -> u64 {
        self.dims.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
    }
}
