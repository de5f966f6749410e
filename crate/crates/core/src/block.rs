//! The transformer block: token normalisation, position-wise MLP, and the
//! pre-norm residual wiring of the two stages.

use rand::Rng;

use crate::attention::{self, MaskMode, MHSAParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scale/shift parameters for token normalisation. Each token (column) is
/// standardised independently over its D features.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    /// D x 1 learned scale.
    pub gamma: Tensor,
    /// D x 1 learned shift.
    pub beta: Tensor,
    pub epsilon: f64,
}

impl NormParams {
    pub fn unit(d: usize, epsilon: f64) -> Result<Self> {
        if epsilon <= 0.0 {
            return Err(Error::Config("token norm epsilon must be positive".to_string()));
        }
        Ok(NormParams {
            gamma: Tensor::filled(d, 1, 1.0),
            beta: Tensor::zeros(d, 1),
            epsilon,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.gamma.rows()
    }
}

/// Pointwise nonlinearity for the MLP stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            // tanh form of GELU
            Activation::Gelu => {
                0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
            }
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t)
                    + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// One-hidden-layer position-wise MLP, the same parameters applied to every
/// column.
#[derive(Debug, Clone, PartialEq)]
pub struct MLPParams {
    /// D_hidden x D.
    pub w1: Tensor,
    /// D_hidden x 1.
    pub b1: Tensor,
    /// D x D_hidden.
    pub w2: Tensor,
    /// D x 1.
    pub b2: Tensor,
    pub activation: Activation,
}

impl MLPParams {
    pub fn random(d: usize, d_hidden: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        MLPParams {
            w1: attention::gaussian(d_hidden, d, rng),
            b1: Tensor::zeros(d_hidden, 1),
            w2: attention::gaussian(d, d_hidden, rng),
            b2: Tensor::zeros(d, 1),
            activation,
        }
    }

    pub fn zeros(d: usize, d_hidden: usize, activation: Activation) -> Self {
        MLPParams {
            w1: Tensor::zeros(d_hidden, d),
            b1: Tensor::zeros(d_hidden, 1),
            w2: Tensor::zeros(d, d_hidden),
            b2: Tensor::zeros(d, 1),
            activation,
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.w1.cols();
        let hidden = self.w1.rows();
        if self.b1.shape() != (hidden, 1)
            || self.w2.shape() != (d, hidden)
            || self.b2.shape() != (d, 1)
        {
            return Err(Error::Config(format!(
                "MLP shapes do not chain: w1 {hidden}x{d}, b1 {:?}, w2 {:?}, b2 {:?}",
                self.b1.shape(),
                self.w2.shape(),
                self.b2.shape()
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.cols()
    }
}

/// Everything one transformer block owns.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1: NormParams,
    pub mhsa: MHSAParams,
    pub norm2: NormParams,
    pub mlp: MLPParams,
}

impl BlockParams {
    pub fn random(
        d: usize,
        n_heads: usize,
        k: usize,
        d_hidden: usize,
        activation: Activation,
        epsilon: f64,
        scale: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut mhsa = MHSAParams::random(n_heads, k, d, rng);
        mhsa.scale = scale;
        Ok(BlockParams {
            norm1: NormParams::unit(d, epsilon)?,
            mhsa,
            norm2: NormParams::unit(d, epsilon)?,
            mlp: MLPParams::random(d, d_hidden, activation, rng),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.mhsa.validate()?;
        self.mlp.validate()?;
        let d = self.mhsa.feature_dim();
        if self.norm1.feature_dim() != d
            || self.norm2.feature_dim() != d
            || self.mlp.feature_dim() != d
        {
            return Err(Error::Config(
                "block components disagree on feature dimension".to_string(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.mhsa.feature_dim()
    }
}

/// Token norm plus the intermediates its adjoint needs: the standardised
/// values (before scale/shift) and 1/sqrt(var + eps) per column.
pub(crate) fn token_norm_with_stats(x: &Tensor, p: &NormParams) -> Result<(Tensor, Tensor, Vec<f64>)> {
    if p.feature_dim() != x.rows() {
        return Err(Error::shape("token_norm", p.gamma.shape(), x.shape()));
    }
    let (means, vars) = x.column_mean_var();
    let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + p.epsilon).sqrt()).collect();
    let mut standardised = Tensor::zeros(x.rows(), x.cols());
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for n in 0..x.cols() {
        for d in 0..x.rows() {
            let z = (x.get(d, n) - means[n]) * inv_std[n];
            standardised.set(d, n, z);
            out.set(d, n, p.gamma.get(d, 0) * z + p.beta.get(d, 0));
        }
    }
    Ok((out, standardised, inv_std))
}

/// Per-token standardisation with learned scale and shift:
/// out[d, n] = gamma_d * (x[d, n] - mean_n) / sqrt(var_n + eps) + beta_d.
pub fn token_norm(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    Ok(token_norm_with_stats(x, p)?.0)
}

/// Position-wise MLP: W2 act(W1 x + b1) + b2 applied to every column.
pub fn mlp_forward(x: &Tensor, p: &MLPParams) -> Result<Tensor> {
    p.validate()?;
    if p.feature_dim() != x.rows() {
        return Err(Error::shape("mlp_forward", p.w1.shape(), x.shape()));
    }
    let hidden = p.w1.matmul(x)?.add_col_vec(&p.b1)?;
    let activated = hidden.map(|v| p.activation.apply(v));
    p.w2.matmul(&activated)?.add_col_vec(&p.b2)
}

/// Pre-norm transformer block:
/// y = x + MHSA(norm1(x)); out = y + MLP(norm2(y)).
pub fn block_forward(x: &Tensor, p: &BlockParams, mask: MaskMode) -> Result<Tensor> {
    Ok(block_forward_with_weights(x, p, mask)?.0)
}

/// Block forward that also surfaces the per-head attention matrices.
pub fn block_forward_with_weights(
    x: &Tensor,
    p: &BlockParams,
    mask: MaskMode,
) -> Result<(Tensor, Vec<Tensor>)> {
    let normed = token_norm(x, &p.norm1)?;
    let (attended, weights) = attention::mhsa_forward_with_weights(&normed, &p.mhsa, mask)?;
    let y = x.add(&attended)?;
    let refined = mlp_forward(&token_norm(&y, &p.norm2)?, &p.mlp)?;
    let out = y.add(&refined)?;
    Ok((out, weights))
}

impl Tensor {
    /// Broadcast-add a column vector (rows x 1) to every column.
    pub fn add_col_vec(&self, v: &Tensor) -> Result<Tensor> {
        if v.shape() != (self.rows(), 1) {
            return Err(Error::shape("add_col_vec", self.shape(), v.shape()));
        }
        Ok(Tensor::from_fn(self.rows(), self.cols(), |r, c| {
            self.get(r, c) + v.get(r, 0)
        }))
    }
}
