//! Desk-scale training: a plain Adam loop over one sequence (or one image)
//! per step, with optional global gradient-norm clipping and a constant or
//! linearly decaying learning rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, NamedParams};
use crate::config::OptimConfig;
use crate::embed::Image;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// Adam state, one first/second moment tensor per parameter.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: NamedParams,
    v: NamedParams,
    t: u32,
}

impl Adam {
    pub fn new(optim: &OptimConfig) -> Self {
        Adam {
            beta1: optim.beta1,
            beta2: optim.beta2,
            epsilon: optim.adam_epsilon,
            m: NamedParams::new(),
            v: NamedParams::new(),
            t: 0,
        }
    }

    /// One update over every parameter with a matching gradient.
    pub fn step(&mut self, params: &mut ModelParams, grads: &NamedParams, lr: f64) {
        self.t += 1;
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        params.visit_mut(|name, value| {
            let grad = match grads.get(name) {
                Some(g) => g,
                None => return,
            };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(value.rows(), value.cols()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(value.rows(), value.cols()));
            let (beta1, beta2, eps) = (self.beta1, self.beta2, self.epsilon);
            let value_data = value.data_mut();
            for i in 0..value_data.len() {
                let g = grad.data()[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * g;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                value_data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

/// Scale all gradients so their global L2 norm is at most `clip_norm`
/// (0 disables). Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut NamedParams, clip_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        for &x in g.data() {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if clip_norm > 0.0 && norm > clip_norm {
        let factor = clip_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }
    norm
}

fn annotate_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{msg} at step {step}; aborting")),
        other => other,
    }
}

fn check_loss(loss: f64, step: usize) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "loss became non-finite ({loss}) at step {step}; aborting"
        )));
    }
    Ok(loss)
}

/// Train a language model from fresh parameters. Returns the trained
/// parameters and the per-step loss trace.
pub fn train_lm(
    config: &ModelConfig,
    optim: &OptimConfig,
    seq_len: usize,
    corpus_ids: &[usize],
) -> Result<(ModelParams, Vec<f64>)> {
    let params = ModelParams::init(config)?;
    train_lm_from(params, config, optim, seq_len, corpus_ids)
}

/// Same loop, starting from the given parameters.
pub fn train_lm_from(
    mut params: ModelParams,
    config: &ModelConfig,
    optim: &OptimConfig,
    seq_len: usize,
    corpus_ids: &[usize],
) -> Result<(ModelParams, Vec<f64>)> {
    let min_len = if config.bos() { 1 } else { 2 };
    if corpus_ids.len() < min_len {
        return Err(Error::Input(format!(
            "corpus of {} tokens is too short to train on",
            corpus_ids.len()
        )));
    }
    let budget = config.n_max - usize::from(config.bos());
    let window = seq_len.min(budget).min(corpus_ids.len());
    if window < min_len {
        return Err(Error::Config(format!(
            "window of {window} tokens cannot produce a prediction"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x77696e64));
    let mut adam = Adam::new(optim);
    let mut losses = Vec::with_capacity(optim.steps);
    for step in 0..optim.steps {
        let start = if corpus_ids.len() > window {
            rng.gen_range(0..=corpus_ids.len() - window)
        } else {
            0
        };
        let ids = &corpus_ids[start..start + window];
        let (loss, tape) =
            autodiff::forward(|tape| model::lm_loss_graph(tape, &params, config, ids))
                .map_err(|e| annotate_step(e, step))?;
        losses.push(check_loss(loss, step)?);
        let mut grads = tape.backward()?;
        clip_gradients(&mut grads, optim.clip_norm);
        let lr = optim.schedule.rate(optim.lr, step, optim.steps);
        adam.step(&mut params, &grads, lr);
    }
    Ok((params, losses))
}

/// Fraction of examples whose argmax logit matches the label.
pub fn cls_accuracy(
    params: &ModelParams,
    config: &ModelConfig,
    items: &[(Image, usize)],
) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (image, label) in items {
        let logits = model::classify_image(image, params, config)?;
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        if best == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Train a classifier from fresh parameters. Returns trained parameters,
/// the per-step loss trace, and (step, test accuracy) checkpoints.
pub fn train_cls(
    config: &ModelConfig,
    optim: &OptimConfig,
    eval_every: usize,
    train_items: &[(Image, usize)],
    test_items: &[(Image, usize)],
) -> Result<(ModelParams, Vec<f64>, Vec<(usize, f64)>)> {
    let params = ModelParams::init(config)?;
    train_cls_from(params, config, optim, eval_every, train_items, test_items)
}

pub fn train_cls_from(
    mut params: ModelParams,
    config: &ModelConfig,
    optim: &OptimConfig,
    eval_every: usize,
    train_items: &[(Image, usize)],
    test_items: &[(Image, usize)],
) -> Result<(ModelParams, Vec<f64>, Vec<(usize, f64)>)> {
    if train_items.is_empty() {
        return Err(Error::Input("no training examples".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x636c73));
    let mut adam = Adam::new(optim);
    let mut losses = Vec::with_capacity(optim.steps);
    let mut metrics = Vec::new();
    for step in 0..optim.steps {
        let (image, label) = &train_items[rng.gen_range(0..train_items.len())];
        let (loss, tape) =
            autodiff::forward(|tape| model::cls_loss_graph(tape, &params, config, image, *label))
                .map_err(|e| annotate_step(e, step))?;
        losses.push(check_loss(loss, step)?);
        let mut grads = tape.backward()?;
        clip_gradients(&mut grads, optim.clip_norm);
        let lr = optim.schedule.rate(optim.lr, step, optim.steps);
        adam.step(&mut params, &grads, lr);

        let last = step + 1 == optim.steps;
        if (eval_every > 0 && (step + 1) % eval_every == 0) || last {
            metrics.push((step + 1, cls_accuracy(&params, config, test_items)?));
        }
    }
    Ok((params, losses, metrics))
}
