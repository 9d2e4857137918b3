use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::diffcore::Tensor2;
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleShift(Var, f64),
    MulConst(Var, Tensor2),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    Gate { x: Var, f: Var, gates: Vec<bool> },
    SoftmaxCe { logits: Var, probs: Tensor2, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor2>,
    op: Op,
}

/// Gradients keyed by the fully qualified parameter name (`module/param`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    map: BTreeMap<String, Tensor2>,
}

impl Grads {
    pub fn get(&self, key: &str) -> Option<&Tensor2> {
        self.map.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// True if every gradient entry is exactly zero.
    pub fn all_zero(&self) -> bool {
        self.map.values().all(|t| t.data().iter().all(|&v| v == 0.0))
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales every entry so the global norm is at most `max_norm`.
    /// Returns the norm before rescaling.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// All entries concatenated in key order.
    pub fn flatten(&self) -> Vec<f64> {
        self.map.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// `self += other`, entry by entry. Keys missing from `self` are added.
    pub fn accumulate(&mut self, other: &Grads) {
        for (k, t) in &other.map {
            match self.map.get_mut(k) {
                Some(mine) => mine.add_assign(t),
                None => {
                    self.map.insert(k.clone(), t.clone());
                }
            }
        }
    }

    /// Multiplies every gradient by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

pub fn param_key(module: &str, name: &str) -> String {
    format!("{module}/{name}")
}

/// Records primitive operations for one forward pass and replays them in
/// reverse to compute parameter gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    registry: Vec<(String, Var)>,
    lookup: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value from {op:?}");
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Tensor2>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a parameter. Registering the same key twice returns the
    /// existing node.
    pub fn param(&mut self, module: &str, name: &str, value: &Tensor2) -> Var {
        self.param_shared(module, name, Arc::new(value.clone()))
    }

    /// [`param`](Self::param) without copying the value.
    pub fn param_shared(&mut self, module: &str, name: &str, value: Arc<Tensor2>) -> Var {
        let key = param_key(module, name);
        if let Some(&v) = self.lookup.get(&key) {
            return v;
        }
        let v = self.push_shared(value, Op::Param);
        self.registry.push((key.clone(), v));
        self.lookup.insert(key, v);
        v
    }

    pub fn param_keys(&self) -> impl Iterator<Item = &str> {
        self.registry.iter().map(|(k, _)| k.as_str())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `x + b` with `b` a 1×n row broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(shape_err(
                "add_bias",
                format!(
                    "bias {}x{} for input {}x{}",
                    bv.rows(),
                    bv.cols(),
                    xv.rows(),
                    xv.cols()
                ),
            ));
        }
        let mut out = xv.clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            for (o, &bias) in row.iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// `x·W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(
                op,
                format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `scale * x + shift`.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::ScaleShift(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.scale_shift(x, scale, 0.0)
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor2) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(shape_err(
                "mul_const",
                format!(
                    "{}x{} vs {}x{}",
                    xv.rows(),
                    xv.cols(),
                    c.rows(),
                    c.cols()
                ),
            ));
        }
        let value = xv.zip_map(&c, |a, b| a * b);
        Ok(self.push(value, Op::MulConst(x, c)))
    }

    /// Elementwise sum with a constant tensor.
    pub fn add_const(&mut self, x: Var, c: &Tensor2) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(shape_err(
                "add_const",
                format!(
                    "{}x{} vs {}x{}",
                    xv.rows(),
                    xv.cols(),
                    c.rows(),
                    c.cols()
                ),
            ));
        }
        let value = xv.zip_map(c, |a, b| a + b);
        Ok(self.push(value, Op::AddConst(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// Natural log. Inputs must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0) {
            return Err(shape_err("log", format!("non-positive input {bad}")));
        }
        let value = xv.map(f64::ln);
        Ok(self.push(value, Op::Log(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only inside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(x, lo, hi))
    }

    /// m×n → m×1.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let sums: Vec<f64> = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        self.push(Tensor2::col_vector(&sums), Op::SumRows(x))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor2::scalar(s), Op::Sum(x))
    }

    /// Mean of all entries as a 1×1 node.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / xv.len().max(1) as f64;
        self.push(Tensor2::scalar(s), Op::Mean(x))
    }

    /// Row-wise residual gating: row `i` of the result is `x_i + f_i` when
    /// `gates[i]` is set and `x_i` otherwise.
    pub fn gate(&mut self, x: Var, f: Var, gates: &[bool]) -> Result<Var> {
        self.same_shape("gate", x, f)?;
        let (xv, fv) = (self.value(x), self.value(f));
        if gates.len() != xv.rows() {
            return Err(shape_err(
                "gate",
                format!("{} gates for {} rows", gates.len(), xv.rows()),
            ));
        }
        let mut out = xv.clone();
        let cols = out.cols();
        for (r, &g) in gates.iter().enumerate() {
            if g {
                for (o, &d) in out.data_mut()[r * cols..(r + 1) * cols]
                    .iter_mut()
                    .zip(fv.row(r))
                {
                    *o += d;
                }
            }
        }
        Ok(self.push(
            out,
            Op::Gate {
                x,
                f,
                gates: gates.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `logits` (m×C) against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for {} rows", labels.len(), lv.rows()),
            ));
        }
        if lv.rows() == 0 {
            return Err(shape_err("softmax_cross_entropy", "empty batch"));
        }
        let classes = lv.cols();
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidLabel { label, classes });
        }
        let mut probs = Tensor2::zeros(lv.rows(), classes);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let top = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            let max = row[top];
            // log Σ exp(v − max) = ln(1 + rest); ln_1p keeps confident rows exact
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != top)
                .map(|(_, &v)| (v - max).exp())
                .sum();
            let log_z_shifted = rest.ln_1p();
            for (c, &v) in row.iter().enumerate() {
                probs.set(r, c, (v - max - log_z_shifted).exp());
            }
            loss += log_z_shifted + (max - row[label]);
        }
        loss /= lv.rows() as f64;
        Ok(self.push(
            Tensor2::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse pass from a 1×1 `loss`. Every registered parameter receives
    /// an entry; parameters not on a path to `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Tensor2>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(x, b) => {
                    let mut gb = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ScaleShift(x, s) => {
                    let s = *s;
                    accumulate(&mut grads, *x, g.map(|v| s * v));
                }
                Op::MulConst(x, c) => {
                    accumulate(&mut grads, *x, g.zip_map(c, |a, b| a * b));
                }
                Op::AddConst(x) => accumulate(&mut grads, *x, g),
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), |d, v| if v > 0.0 { d } else { 0.0 });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, |d, s| d * s * (1.0 - s));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Log(x) => {
                    let gx = g.zip_map(self.value(*x), |d, v| d / v);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = g.zip_map(&node.value, |d, e| d * e);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Clamp(x, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let gx = g.zip_map(self.value(*x), |d, v| {
                        if (lo..=hi).contains(&v) {
                            d
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumRows(x) => {
                    let xv = self.value(*x);
                    let mut gx = Tensor2::zeros(xv.rows(), xv.cols());
                    let cols = xv.cols();
                    for r in 0..xv.rows() {
                        let d = g.get(r, 0);
                        gx.data_mut()[r * cols..(r + 1) * cols].fill(d);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut grads, *x, Tensor2::filled(r, c, g.item()));
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let d = g.item() / xv.len().max(1) as f64;
                    accumulate(&mut grads, *x, Tensor2::filled(xv.rows(), xv.cols(), d));
                }
                Op::Gate { x, f, gates } => {
                    let mut gf = Tensor2::zeros(g.rows(), g.cols());
                    let cols = g.cols();
                    for (r, &on) in gates.iter().enumerate() {
                        if on {
                            gf.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(g.row(r));
                        }
                    }
                    accumulate(&mut grads, *f, gf);
                    accumulate(&mut grads, *x, g);
                }
                Op::SoftmaxCe {
                    logits,
                    probs,
                    labels,
                } => {
                    let scale = g.item() / labels.len() as f64;
                    let mut gx = probs.map(|p| p * scale);
                    for (r, &l) in labels.iter().enumerate() {
                        let v = gx.get(r, l);
                        gx.set(r, l, v - scale);
                    }
                    accumulate(&mut grads, *logits, gx);
                }
            }
        }

        let mut map = BTreeMap::new();
        for (key, v) in &self.registry {
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| {
                    let (r, c) = self.value(*v).shape();
                    Tensor2::zeros(r, c)
                });
            map.insert(key.clone(), g);
        }
        Ok(Grads { map })
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // keep the result inside the open interval even where it rounds to 0 or 1
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}
