//! Reverse-mode differentiation over the tensor operations.
//!
//! A `Tape` records every forward operation eagerly (values are computed at
//! record time with the same primitives the inference path uses) and replays
//! the adjoints in reverse order. One scalar loss, gradients for every
//! registered parameter.

use std::collections::BTreeMap;
use std::io::Write;

use crate::attention::apply_causal_mask;
use crate::block::{token_norm_with_stats, Activation, NormParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on one particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Ordered collection of named parameter tensors. BTreeMap so iteration
/// order (and therefore everything derived from it) is deterministic.
pub type NamedParams = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    /// Constant input; no gradient tracked.
    Constant,
    /// Registered parameter leaf.
    Param,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    /// Broadcast-add of a column vector to every column of a matrix.
    AddColVec(NodeId, NodeId),
    ColumnSoftmax(NodeId),
    TokenNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Activation(NodeId, Activation),
    /// Column gather from an embedding table.
    EmbedLookup {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// [a | b] along the column axis.
    ConcatCols(NodeId, NodeId),
    /// Contiguous column range [start, start + len).
    SliceCols {
        input: NodeId,
        start: usize,
    },
    SumAll(NodeId),
    /// Overwrite sub-diagonal logits with the masked constant; gradients do
    /// not flow into overwritten entries.
    MaskCausal(NodeId),
    /// Mean over columns of -log softmax(column)[target].
    CrossEntropyCols {
        logits: NodeId,
        targets: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
enum Saved {
    None,
    TokenNorm {
        standardised: Tensor,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        probs: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    saved: Saved,
}

/// Reverse-mode tape: nodes in topological order plus a parameter registry.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    loss: Option<NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            loss: None,
        }
    }

    fn push(&mut self, op: Op, value: Tensor, saved: Saved) -> NodeId {
        self.nodes.push(Node { op, value, saved });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, Saved::None)
    }

    /// Register a named parameter leaf. Names must be unique per tape.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!(
                "parameter '{name}' registered twice"
            )));
        }
        let id = self.push(Op::Param, value, Saved::None);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value, Saved::None))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value, Saved::None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value, Saved::None))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).scale(factor);
        self.push(Op::Scale(a, factor), value, Saved::None)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), value, Saved::None))
    }

    pub fn add_col_vec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let value = self.value(m).add_col_vec(self.value(v))?;
        Ok(self.push(Op::AddColVec(m, v), value, Saved::None))
    }

    pub fn column_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).column_softmax()?;
        Ok(self.push(Op::ColumnSoftmax(a), value, Saved::None))
    }

    pub fn token_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, epsilon: f64) -> Result<NodeId> {
        let p = NormParams {
            gamma: self.value(gamma).clone(),
            beta: self.value(beta).clone(),
            epsilon,
        };
        let (value, standardised, inv_std) = token_norm_with_stats(self.value(x), &p)?;
        Ok(self.push(
            Op::TokenNorm { x, gamma, beta },
            value,
            Saved::TokenNorm {
                standardised,
                inv_std,
            },
        ))
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> NodeId {
        let value = self.value(a).map(|v| act.apply(v));
        self.push(Op::Activation(a, act), value, Saved::None)
    }

    pub fn embed_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let w = t.cols();
        for (pos, &id) in ids.iter().enumerate() {
            if id >= w {
                return Err(Error::Index(format!(
                    "token id {id} at position {pos} is outside the table of width {w}"
                )));
            }
        }
        let value = Tensor::from_fn(t.rows(), ids.len(), |r, n| t.get(r, ids[n]));
        Ok(self.push(
            Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
            },
            value,
            Saved::None,
        ))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::shape("concat_cols", ta.shape(), tb.shape()));
        }
        let left = ta.cols();
        let value = Tensor::from_fn(ta.rows(), left + tb.cols(), |r, c| {
            if c < left {
                ta.get(r, c)
            } else {
                tb.get(r, c - left)
            }
        });
        Ok(self.push(Op::ConcatCols(a, b), value, Saved::None))
    }

    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(input);
        if start + len > t.cols() {
            return Err(Error::Range(format!(
                "column slice {start}..{} out of {} columns",
                start + len,
                t.cols()
            )));
        }
        let value = Tensor::from_fn(t.rows(), len, |r, c| t.get(r, start + c));
        Ok(self.push(Op::SliceCols { input, start }, value, Saved::None))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::new(1, 1, vec![self.value(a).sum()]).expect("scalar");
        self.push(Op::SumAll(a), value, Saved::None)
    }

    pub fn mask_causal(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rows() != t.cols() {
            return Err(Error::shape("mask_causal", t.shape(), t.shape()));
        }
        let mut value = t.clone();
        apply_causal_mask(&mut value);
        Ok(self.push(Op::MaskCausal(a), value, Saved::None))
    }

    /// Mean cross-entropy over columns: column n scores class targets[n].
    pub fn cross_entropy_cols(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let t = self.value(logits);
        if targets.len() != t.cols() {
            return Err(Error::Contract(format!(
                "{} targets for {} logit columns",
                targets.len(),
                t.cols()
            )));
        }
        if targets.is_empty() {
            return Err(Error::Contract("cross entropy over zero columns".to_string()));
        }
        for (n, &target) in targets.iter().enumerate() {
            if target >= t.rows() {
                return Err(Error::Index(format!(
                    "target {target} at column {n} is outside {} classes",
                    t.rows()
                )));
            }
        }
        let probs = t.column_softmax()?;
        let mut total = 0.0;
        for (n, &target) in targets.iter().enumerate() {
            // stable -log softmax via logsumexp
            let mut max = f64::NEG_INFINITY;
            for r in 0..t.rows() {
                max = max.max(t.get(r, n));
            }
            let mut sum = 0.0;
            for r in 0..t.rows() {
                sum += (t.get(r, n) - max).exp();
            }
            total += max + sum.ln() - t.get(target, n);
        }
        let value = Tensor::new(1, 1, vec![total / targets.len() as f64]).expect("scalar");
        Ok(self.push(
            Op::CrossEntropyCols {
                logits,
                targets: targets.to_vec(),
            },
            value,
            Saved::CrossEntropy { probs },
        ))
    }

    /// Gradients of the recorded loss for every registered parameter.
    /// Parameters on no path to the loss get zero tensors.
    pub fn backward(&self) -> Result<NamedParams> {
        let loss = self
            .loss
            .ok_or_else(|| Error::State("backward called before forward".to_string()))?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(1, 1, vec![1.0]).expect("scalar"));

        for idx in (0..self.nodes.len()).rev() {
            let grad = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(idx, &grad, &mut grads)?;
            grads[idx] = Some(grad);
        }

        let mut out = NamedParams::new();
        for (name, id) in &self.params {
            let tensor = match &grads[id.0] {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = self.nodes[id.0].value.shape();
                    Tensor::zeros(r, c)
                }
            };
            out.insert(name.clone(), tensor);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, delta: Tensor) -> Result<()> {
        match &mut grads[target.0] {
            Some(existing) => *existing = existing.add(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn accumulate_inputs(
        &self,
        idx: usize,
        grad: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let da = grad.matmul(&self.value(*b).transpose())?;
                let db = self.value(*a).transpose().matmul(grad)?;
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, grad.transpose())?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, grad.clone())?;
                self.accumulate(grads, *b, grad.clone())?;
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, grad.scale(*factor))?;
            }
            Op::Hadamard(a, b) => {
                self.accumulate(grads, *a, grad.hadamard(self.value(*b))?)?;
                self.accumulate(grads, *b, grad.hadamard(self.value(*a))?)?;
            }
            Op::AddColVec(m, v) => {
                self.accumulate(grads, *m, grad.clone())?;
                let dv = Tensor::from_fn(grad.rows(), 1, |r, _| {
                    (0..grad.cols()).map(|c| grad.get(r, c)).sum()
                });
                self.accumulate(grads, *v, dv)?;
            }
            Op::ColumnSoftmax(a) => {
                let s = &self.nodes[idx].value;
                let mut da = Tensor::zeros(s.rows(), s.cols());
                for n in 0..s.cols() {
                    let mut dot = 0.0;
                    for r in 0..s.rows() {
                        dot += grad.get(r, n) * s.get(r, n);
                    }
                    for r in 0..s.rows() {
                        da.set(r, n, s.get(r, n) * (grad.get(r, n) - dot));
                    }
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::TokenNorm { x, gamma, beta } => {
                let (standardised, inv_std) = match &self.nodes[idx].saved {
                    Saved::TokenNorm {
                        standardised,
                        inv_std,
                    } => (standardised, inv_std),
                    _ => unreachable!("token norm saves its stats"),
                };
                let gamma_t = self.value(*gamma);
                let (d, n) = standardised.shape();
                let dim = d as f64;
                let mut dgamma = Tensor::zeros(d, 1);
                let mut dbeta = Tensor::zeros(d, 1);
                for r in 0..d {
                    let mut sg = 0.0;
                    let mut sb = 0.0;
                    for c in 0..n {
                        sg += grad.get(r, c) * standardised.get(r, c);
                        sb += grad.get(r, c);
                    }
                    dgamma.set(r, 0, sg);
                    dbeta.set(r, 0, sb);
                }
                let mut dx = Tensor::zeros(d, n);
                for c in 0..n {
                    let mut mean_g = 0.0;
                    let mut mean_gz = 0.0;
                    for r in 0..d {
                        let g = grad.get(r, c) * gamma_t.get(r, 0);
                        mean_g += g;
                        mean_gz += g * standardised.get(r, c);
                    }
                    mean_g /= dim;
                    mean_gz /= dim;
                    for r in 0..d {
                        let g = grad.get(r, c) * gamma_t.get(r, 0);
                        dx.set(
                            r,
                            c,
                            inv_std[c] * (g - mean_g - standardised.get(r, c) * mean_gz),
                        );
                    }
                }
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gamma, dgamma)?;
                self.accumulate(grads, *beta, dbeta)?;
            }
            Op::Activation(a, act) => {
                let input = self.value(*a);
                let da = Tensor::from_fn(input.rows(), input.cols(), |r, c| {
                    grad.get(r, c) * act.derivative(input.get(r, c))
                });
                self.accumulate(grads, *a, da)?;
            }
            Op::EmbedLookup { table, ids } => {
                let t = self.value(*table);
                let mut dt = Tensor::zeros(t.rows(), t.cols());
                for (n, &id) in ids.iter().enumerate() {
                    for r in 0..t.rows() {
                        dt.set(r, id, dt.get(r, id) + grad.get(r, n));
                    }
                }
                self.accumulate(grads, *table, dt)?;
            }
            Op::ConcatCols(a, b) => {
                let left = self.value(*a).cols();
                let da = Tensor::from_fn(grad.rows(), left, |r, c| grad.get(r, c));
                let db = Tensor::from_fn(grad.rows(), grad.cols() - left, |r, c| {
                    grad.get(r, c + left)
                });
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::SliceCols { input, start } => {
                let full = self.value(*input);
                let mut da = Tensor::zeros(full.rows(), full.cols());
                for r in 0..grad.rows() {
                    for c in 0..grad.cols() {
                        da.set(r, start + c, grad.get(r, c));
                    }
                }
                self.accumulate(grads, *input, da)?;
            }
            Op::SumAll(a) => {
                let value = self.value(*a);
                let g = grad.get(0, 0);
                self.accumulate(grads, *a, Tensor::filled(value.rows(), value.cols(), g))?;
            }
            Op::MaskCausal(a) => {
                let mut da = grad.clone();
                let n = da.cols();
                for key in 0..n {
                    for query in 0..key {
                        da.set(key, query, 0.0);
                    }
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::CrossEntropyCols { logits, targets } => {
                let probs = match &self.nodes[idx].saved {
                    Saved::CrossEntropy { probs } => probs,
                    _ => unreachable!("cross entropy saves probabilities"),
                };
                let g = grad.get(0, 0) / targets.len() as f64;
                let mut dl = Tensor::zeros(probs.rows(), probs.cols());
                for (n, &target) in targets.iter().enumerate() {
                    for r in 0..probs.rows() {
                        let indicator = if r == target { 1.0 } else { 0.0 };
                        dl.set(r, n, g * (probs.get(r, n) - indicator));
                    }
                }
                self.accumulate(grads, *logits, dl)?;
            }
        }
        Ok(())
    }
}

/// Run a graph builder, validate that it produced a scalar loss, and return
/// the loss value together with the tape ready for [`Tape::backward`].
pub fn forward<F>(builder: F) -> Result<(f64, Tape)>
where
    F: FnOnce(&mut Tape) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = builder(&mut tape)?;
    if tape.is_empty() || loss.0 >= tape.nodes.len() {
        return Err(Error::Contract(
            "graph builder returned a node that is not on this tape".to_string(),
        ));
    }
    let shape = tape.nodes[loss.0].value.shape();
    if shape != (1, 1) {
        return Err(Error::Contract(format!(
            "loss must be a scalar node, got {}x{}",
            shape.0, shape.1
        )));
    }
    tape.loss = Some(loss);
    let value = tape.nodes[loss.0].value.get(0, 0);
    Ok((value, tape))
}

/// Comparison of analytic and central-difference gradients for one parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub max_rel_err: f64,
}

/// Full gradient-check report across all parameters.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub entries: Vec<ParamCheck>,
    pub tolerance: f64,
}

/// Relative error |a - n| / max(|a|, |n|, 1e-8), with |.| the largest
/// absolute entry. The floor keeps near-zero gradients from blowing up the
/// ratio; the per-tensor norm keeps f64 finite-difference noise (~1e-10
/// absolute at h = 1e-5) from swamping entries whose true gradient is tiny.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    diff / analytic.max_abs().max(numeric.max_abs()).max(1e-8)
}

impl GradientReport {
    /// Build a report from per-parameter analytic/numeric pairs.
    pub fn from_pairs(pairs: Vec<(String, Tensor, Tensor)>, tolerance: f64) -> Self {
        let entries = pairs
            .into_iter()
            .map(|(name, analytic, numeric)| {
                let max_rel_err = relative_error(&analytic, &numeric);
                ParamCheck {
                    name,
                    analytic,
                    numeric,
                    max_rel_err,
                }
            })
            .collect();
        GradientReport { entries, tolerance }
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }

    /// Plain-text table, one row per parameter.
    pub fn write_table(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "{:<28} {:>10} {:>14} {:>6}", "parameter", "shape", "max rel err", "ok")?;
        for e in &self.entries {
            writeln!(
                out,
                "{:<28} {:>10} {:>14.3e} {:>6}",
                e.name,
                format!("{}x{}", e.analytic.rows(), e.analytic.cols()),
                e.max_rel_err,
                if e.max_rel_err < self.tolerance { "yes" } else { "NO" }
            )?;
        }
        writeln!(
            out,
            "overall max rel err {:.3e} (tolerance {:.1e}): {}",
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        Ok(())
    }
}

/// Check analytic gradients against central differences.
///
/// `loss_fn` must register the parameters it uses on the tape under the
/// same names they carry in `params`, and must be deterministic: two
/// evaluations at the same point are required to agree bit-for-bit.
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &NamedParams,
    h: f64,
    tolerance: f64,
) -> Result<GradientReport>
where
    F: Fn(&mut Tape, &NamedParams) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::Precondition(format!(
            "finite difference step must be positive, got {h}"
        )));
    }
    let eval = |p: &NamedParams| -> Result<f64> {
        let (value, _) = forward(|tape| loss_fn(tape, p))?;
        Ok(value)
    };

    let base = eval(params)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!(
            "loss function is not deterministic: {base} vs {again} at the same point"
        )));
    }

    let (_, tape) = forward(|tape| loss_fn(tape, params))?;
    let analytic = tape.backward()?;

    let mut pairs = Vec::new();
    for (name, value) in params {
        let (rows, cols) = value.shape();
        let mut numeric = Tensor::zeros(rows, cols);
        for i in 0..rows * cols {
            let mut plus = params.clone();
            plus.get_mut(name).expect("present").data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).expect("present").data_mut()[i] -= h;
            numeric.data_mut()[i] = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        }
        let a = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(rows, cols));
        pairs.push((name.clone(), a, numeric));
    }
    Ok(GradientReport::from_pairs(pairs, tolerance))
}
