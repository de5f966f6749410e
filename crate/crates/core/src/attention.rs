//! Self-attention and multi-head self-attention.
//!
//! The attention matrix A is N x N and column-stochastic: A[n', n] weights
//! how much position n' contributes to the output at position n, and each
//! column sums to 1. Stage output is Y = X A per head, projected and summed
//! as Y = sum_h V_h X A_h.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite stand-in for -inf in masked logits. Large enough that the masked
/// exponentials underflow to exactly 0.0 after max subtraction, small enough
/// to stay finite through the differentiable path.
pub const MASKED_LOGIT: f64 = -1e30;

/// Parameters of one attention head: query/key projections and the output
/// projection V (square, full-rank in general).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// K x D query projection.
    pub u_q: Tensor,
    /// K x D key projection.
    pub u_k: Tensor,
    /// D x D per-head output projection.
    pub v: Tensor,
}

impl HeadParams {
    pub fn new(u_q: Tensor, u_k: Tensor, v: Tensor) -> Result<Self> {
        let head = HeadParams { u_q, u_k, v };
        head.validate()?;
        Ok(head)
    }

    /// Symmetric-similarity convenience constructor: queries and keys share
    /// one projection matrix.
    pub fn tied(u: Tensor, v: Tensor) -> Result<Self> {
        HeadParams::new(u.clone(), u, v)
    }

    /// Fresh head with entries drawn N(0, 1/fan_in).
    pub fn random(k: usize, d: usize, rng: &mut impl Rng) -> Self {
        HeadParams {
            u_q: gaussian(k, d, rng),
            u_k: gaussian(k, d, rng),
            v: gaussian(d, d, rng),
        }
    }

    pub fn proj_dim(&self) -> usize {
        self.u_q.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.u_q.cols()
    }

    fn validate(&self) -> Result<()> {
        if self.u_q.shape() != self.u_k.shape() {
            return Err(Error::shape("head q/k", self.u_q.shape(), self.u_k.shape()));
        }
        let d = self.u_q.cols();
        if self.v.shape() != (d, d) {
            return Err(Error::Config(format!(
                "head projection V must be {d}x{d}, got {}x{}",
                self.v.rows(),
                self.v.cols()
            )));
        }
        Ok(())
    }
}

/// Weights drawn N(0, 1/fan_in), fan_in = number of columns.
pub(crate) fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let std = 1.0 / (cols.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    Tensor::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// All heads of one multi-head self-attention stage.
#[derive(Debug, Clone, PartialEq)]
pub struct MHSAParams {
    pub heads: Vec<HeadParams>,
    /// Divide logits by sqrt(K). On by default; off reproduces the unscaled
    /// textbook form where the factor is absorbed into U.
    pub scale: bool,
}

impl MHSAParams {
    pub fn new(heads: Vec<HeadParams>, scale: bool) -> Result<Self> {
        let params = MHSAParams { heads, scale };
        params.validate()?;
        Ok(params)
    }

    pub fn random(n_heads: usize, k: usize, d: usize, rng: &mut impl Rng) -> Self {
        MHSAParams {
            heads: (0..n_heads).map(|_| HeadParams::random(k, d, rng)).collect(),
            scale: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Config("MHSA needs at least one head".to_string()));
        }
        let k = self.heads[0].proj_dim();
        let d = self.heads[0].feature_dim();
        for (h, head) in self.heads.iter().enumerate() {
            head.validate()?;
            if head.proj_dim() != k || head.feature_dim() != d {
                return Err(Error::Config(format!(
                    "head {h} has shape K={} D={}, expected K={k} D={d}",
                    head.proj_dim(),
                    head.feature_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.heads[0].feature_dim()
    }
}

/// Whether attention may look at future positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Every position attends to every position.
    None,
    /// A[n', n] = 0 for n' > n: upper-triangular attention, no future leakage.
    Causal,
}

impl MaskMode {
    pub fn is_causal(self) -> bool {
        matches!(self, MaskMode::Causal)
    }
}

/// Overwrite the forbidden entries of an N x N logit matrix in place.
pub(crate) fn apply_causal_mask(logits: &mut Tensor) {
    let n = logits.cols();
    for key in 0..n {
        for query in 0..key {
            logits.set(key, query, MASKED_LOGIT);
        }
    }
}

/// Attention matrix from queries and keys: A[n', n] = softmax over n' of
/// k_{n'} . q_n, scaled by 1/sqrt(K) when `scale` is set.
pub fn attention_weights(
    x: &Tensor,
    u_q: &Tensor,
    u_k: &Tensor,
    mask: MaskMode,
    scale: bool,
) -> Result<Tensor> {
    if u_q.rows() == 0 {
        return Err(Error::Config(
            "attention projection dimension K must be at least 1".to_string(),
        ));
    }
    if u_q.shape() != u_k.shape() {
        return Err(Error::shape("attention q/k", u_q.shape(), u_k.shape()));
    }
    if u_q.cols() != x.rows() {
        return Err(Error::shape("attention projection", u_q.shape(), x.shape()));
    }
    if x.cols() == 0 {
        return Err(Error::Contract(
            "attention requires at least one token".to_string(),
        ));
    }
    let queries = u_q.matmul(x)?;
    let keys = u_k.matmul(x)?;
    let mut logits = keys.transpose().matmul(&queries)?;
    if scale {
        logits = logits.scale(1.0 / (u_q.rows() as f64).sqrt());
    }
    if mask.is_causal() {
        apply_causal_mask(&mut logits);
    }
    logits.column_softmax()
}

/// Weighted average of input columns: Y = X A.
pub fn apply_attention(x: &Tensor, a: &Tensor) -> Result<Tensor> {
    if a.rows() != a.cols() || a.rows() != x.cols() {
        return Err(Error::shape("apply_attention", x.shape(), a.shape()));
    }
    x.matmul(a)
}

/// Multi-head self-attention: Y = sum_h V_h X A_h.
pub fn mhsa_forward(x: &Tensor, params: &MHSAParams, mask: MaskMode) -> Result<Tensor> {
    Ok(mhsa_forward_with_weights(x, params, mask)?.0)
}

/// Same as [`mhsa_forward`] but also returns each head's attention matrix,
/// in head order.
pub fn mhsa_forward_with_weights(
    x: &Tensor,
    params: &MHSAParams,
    mask: MaskMode,
) -> Result<(Tensor, Vec<Tensor>)> {
    params.validate()?;
    if params.feature_dim() != x.rows() {
        return Err(Error::Config(format!(
            "MHSA expects D={} features, input has {}",
            params.feature_dim(),
            x.rows()
        )));
    }
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let mut weights = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let a = attention_weights(x, &head.u_q, &head.u_k, mask, params.scale)?;
        let contrib = head.v.matmul(&apply_attention(x, &a)?)?;
        out = out.add(&contrib)?;
        weights.push(a);
    }
    Ok((out, weights))
}

/// One head in the conventional queries/keys/values/output parameterisation.
#[derive(Debug, Clone)]
pub struct QkvHeadParams {
    pub u_q: Tensor,
    pub u_k: Tensor,
    /// K x D value projection.
    pub u_v: Tensor,
    /// D x K output projection.
    pub u_o: Tensor,
}

/// Fold the values/output-projection pair of each head into a single
/// low-rank V_h = U_o U_v, giving the compact parameterisation.
pub fn qkv_equivalence_form(heads: &[QkvHeadParams], scale: bool) -> Result<MHSAParams> {
    let mut folded = Vec::with_capacity(heads.len());
    for head in heads {
        let v = head.u_o.matmul(&head.u_v)?;
        folded.push(HeadParams::new(head.u_q.clone(), head.u_k.clone(), v)?);
    }
    MHSAParams::new(folded, scale)
}

/// The conventional computation: project to values, attend, project back.
/// Kept as an independent route for checking [`qkv_equivalence_form`].
pub fn mhsa_forward_qkv(
    x: &Tensor,
    heads: &[QkvHeadParams],
    mask: MaskMode,
    scale: bool,
) -> Result<Tensor> {
    if heads.is_empty() {
        return Err(Error::Config("MHSA needs at least one head".to_string()));
    }
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for head in heads {
        let a = attention_weights(x, &head.u_q, &head.u_k, mask, scale)?;
        let values = head.u_v.matmul(x)?;
        let contrib = head.u_o.matmul(&values.matmul(&a)?)?;
        out = out.add(&contrib)?;
    }
    Ok(out)
}

/// Plain-text dump of one attention matrix: a header line with the layer
/// index, head index and N, then N rows of N floats.
pub fn write_attention_dump(out: &mut impl Write, layer: usize, head: usize, a: &Tensor) -> Result<()> {
    let n = a.rows();
    writeln!(out, "{layer} {head} {n}")?;
    for row in 0..n {
        let line: Vec<String> = (0..n).map(|c| format!("{}", a.get(row, c))).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Parse a dump produced by [`write_attention_dump`].
pub fn read_attention_dump(input: &mut impl BufRead) -> Result<(usize, usize, Tensor)> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(Error::Format("attention dump header must be 'layer head N'".to_string()));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Format(format!("bad integer '{s}' in attention dump header")))
    };
    let (layer, head, n) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
    let mut a = Tensor::zeros(n, n);
    for row in 0..n {
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            return Err(Error::Corrupt(format!("attention dump truncated at row {row}")));
        }
        let entries: Vec<&str> = line.split_whitespace().collect();
        if entries.len() != n {
            return Err(Error::Corrupt(format!(
                "attention dump row {row} has {} entries, expected {n}",
                entries.len()
            )));
        }
        for (col, entry) in entries.iter().enumerate() {
            let v: f64 = entry
                .parse()
                .map_err(|_| Error::Corrupt(format!("bad float '{entry}' in attention dump")))?;
            a.set(row, col, v);
        }
    }
    Ok((layer, head, a))
}
