//! The full model: M stacked blocks over an embedded input, with an
//! autoregressive language-model head or a classification head, plus
//! cache-backed incremental decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::MaskMode;
use crate::autodiff::{NamedParams, NodeId, Tape};
use crate::block::{self, Activation, BlockParams};
use crate::config::KvReader;
use crate::data::Vocab;
use crate::embed::{
    self, Combine, Image, PatchEmbedder, PositionEncoding, PositionMode, TokenTable,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What sits on top of the final representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Next-token softmax over the vocabulary.
    Lm,
    /// Classify from the learned token prepended at position 0.
    ClsToken,
    /// Classify from the column sum of the final representation.
    ClsPool,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Lm => "lm",
            HeadKind::ClsToken => "cls-token",
            HeadKind::ClsPool => "cls-pool",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "lm" => Ok(HeadKind::Lm),
            "cls-token" => Ok(HeadKind::ClsToken),
            "cls-pool" => Ok(HeadKind::ClsPool),
            other => Err(Error::Config(format!("unknown head kind '{other}'"))),
        }
    }
}

/// Task-specific configuration payload.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskConfig {
    Lm {
        vocab: Vocab,
        /// Prepend a learned begin-of-sequence token so the first real token
        /// is predicted too.
        bos: bool,
    },
    Cls {
        classes: Vec<String>,
        image_h: usize,
        image_w: usize,
        patch_h: usize,
        patch_w: usize,
        channels: usize,
    },
}

/// Hyperparameters defining one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature dimension D.
    pub d: usize,
    /// Heads H.
    pub n_heads: usize,
    /// Per-head projection dimension K.
    pub k: usize,
    /// Blocks M.
    pub n_layers: usize,
    pub d_hidden: usize,
    pub n_max: usize,
    pub mask: MaskMode,
    pub positions: PositionMode,
    pub head: HeadKind,
    pub epsilon: f64,
    /// Frequency base of the sinusoid position ladder.
    pub pos_base: f64,
    pub scale_logits: bool,
    pub activation: Activation,
    pub seed: u64,
    pub task: TaskConfig,
}

impl ModelConfig {
    /// Vocabulary size W (language modelling) or class count C.
    pub fn output_size(&self) -> usize {
        match &self.task {
            TaskConfig::Lm { vocab, .. } => vocab.size(),
            TaskConfig::Cls { classes, .. } => classes.len(),
        }
    }

    pub fn bos(&self) -> bool {
        matches!(self.task, TaskConfig::Lm { bos: true, .. })
    }

    /// Width of the embedding table: the vocabulary plus the optional
    /// begin-of-sequence column at index W.
    pub fn table_width(&self) -> usize {
        match &self.task {
            TaskConfig::Lm { vocab, bos } => vocab.size() + usize::from(*bos),
            TaskConfig::Cls { .. } => 0,
        }
    }

    pub fn bos_id(&self) -> Option<usize> {
        match &self.task {
            TaskConfig::Lm { vocab, bos: true } => Some(vocab.size()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.k == 0 || self.d_hidden == 0 {
            return Err(Error::Config(
                "model dimensions must all be positive".to_string(),
            ));
        }
        if self.n_layers < 1 {
            return Err(Error::Config("n_layers must be at least 1".to_string()));
        }
        if self.n_max < 1 {
            return Err(Error::Config("n_max must be at least 1".to_string()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".to_string()));
        }
        match (&self.task, self.head) {
            (TaskConfig::Lm { .. }, HeadKind::Lm) => {}
            (TaskConfig::Cls { .. }, HeadKind::ClsToken | HeadKind::ClsPool) => {}
            (task, head) => {
                let kind = match task {
                    TaskConfig::Lm { .. } => "language modelling",
                    TaskConfig::Cls { .. } => "classification",
                };
                return Err(Error::Config(format!(
                    "head '{}' does not fit a {kind} task",
                    head.name()
                )));
            }
        }
        if let TaskConfig::Cls {
            classes,
            image_h,
            image_w,
            patch_h,
            patch_w,
            channels,
        } = &self.task
        {
            if classes.len() < 2 {
                return Err(Error::Config("need at least two classes".to_string()));
            }
            if *patch_h == 0 || *patch_w == 0 || *channels == 0 {
                return Err(Error::Config("patch dims must be positive".to_string()));
            }
            if image_h % patch_h != 0 || image_w % patch_w != 0 {
                return Err(Error::Config(format!(
                    "image {image_h}x{image_w} not divisible by patch {patch_h}x{patch_w}"
                )));
            }
            let tokens = (image_h / patch_h) * (image_w / patch_w)
                + usize::from(self.head == HeadKind::ClsToken);
            if tokens > self.n_max {
                return Err(Error::Config(format!(
                    "{tokens} tokens exceed n_max {}",
                    self.n_max
                )));
            }
        }
        Ok(())
    }

    /// Serialise as the `key = value` block stored inside checkpoints.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("d_model", self.d.to_string());
        push("n_heads", self.n_heads.to_string());
        push("head_dim", self.k.to_string());
        push("n_layers", self.n_layers.to_string());
        push("d_hidden", self.d_hidden.to_string());
        push("n_max", self.n_max.to_string());
        push(
            "mask",
            match self.mask {
                MaskMode::None => "none".to_string(),
                MaskMode::Causal => "causal".to_string(),
            },
        );
        push("positions", self.positions.name().to_string());
        push("head", self.head.name().to_string());
        push("epsilon", format!("{}", self.epsilon));
        push("pos_base", format!("{}", self.pos_base));
        push("scale_logits", self.scale_logits.to_string());
        push("activation", self.activation.name().to_string());
        push("seed", self.seed.to_string());
        match &self.task {
            TaskConfig::Lm { vocab, bos } => {
                push("bos", bos.to_string());
                push("vocab", vocab.to_escaped_string());
            }
            TaskConfig::Cls {
                classes,
                image_h,
                image_w,
                patch_h,
                patch_w,
                channels,
            } => {
                push("classes", classes.join(","));
                push("image_h", image_h.to_string());
                push("image_w", image_w.to_string());
                push("patch_h", patch_h.to_string());
                push("patch_w", patch_w.to_string());
                push("channels", channels.to_string());
            }
        }
        out
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut kv = KvReader::new(text)?;
        let d = kv.require_parsed("d_model")?;
        let n_heads = kv.require_parsed("n_heads")?;
        let k = kv.require_parsed("head_dim")?;
        let n_layers = kv.require_parsed("n_layers")?;
        let d_hidden = kv.require_parsed("d_hidden")?;
        let n_max = kv.require_parsed("n_max")?;
        let mask = match kv.require("mask")?.as_str() {
            "none" => MaskMode::None,
            "causal" => MaskMode::Causal,
            other => return Err(Error::Config(format!("unknown mask mode '{other}'"))),
        };
        let positions = PositionMode::parse(&kv.require("positions")?)?;
        let head = HeadKind::parse(&kv.require("head")?)?;
        let epsilon = kv.require_parsed("epsilon")?;
        let pos_base = kv.parsed_or("pos_base", 10_000.0)?;
        let scale_logits = kv.bool_or("scale_logits", true)?;
        let activation = Activation::parse(&kv.require("activation")?)?;
        let seed = kv.require_parsed("seed")?;
        let task = match head {
            HeadKind::Lm => TaskConfig::Lm {
                bos: kv.bool_or("bos", true)?,
                vocab: Vocab::from_escaped_string(&kv.require("vocab")?)?,
            },
            HeadKind::ClsToken | HeadKind::ClsPool => TaskConfig::Cls {
                classes: kv
                    .require("classes")?
                    .split(',')
                    .map(|s| s.to_string())
                    .collect(),
                image_h: kv.require_parsed("image_h")?,
                image_w: kv.require_parsed("image_w")?,
                patch_h: kv.require_parsed("patch_h")?,
                patch_w: kv.require_parsed("patch_w")?,
                channels: kv.require_parsed("channels")?,
            },
        };
        kv.finish()?;
        let cfg = ModelConfig {
            d,
            n_heads,
            k,
            n_layers,
            d_hidden,
            n_max,
            mask,
            positions,
            head,
            epsilon,
            pos_base,
            scale_logits,
            activation,
            seed,
            task,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Input embedding parameters, token table or patch matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbedParams {
    Tokens(TokenTable),
    Patches(PatchEmbedder),
}

/// Output head weights.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputHead {
    /// D x W softmax weights, one column per vocabulary entry.
    Lm(Tensor),
    /// C x D classifier.
    Classifier(Tensor),
}

/// Every learnable tensor in the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed: EmbedParams,
    /// Learned position table (D x N_max); None for fixed or absent positions.
    pub pos_table: Option<Tensor>,
    pub blocks: Vec<BlockParams>,
    pub head: OutputHead,
    /// Learned class token column (D x 1) for the cls-token head.
    pub class_token: Option<Tensor>,
}

const EMBED_INIT_STD: f64 = 0.02;

impl ModelParams {
    /// Fresh parameters, deterministic in `config.seed`. Hidden weights are
    /// N(0, 1/fan_in); embeddings and positions N(0, 0.02); norm scales 1;
    /// head weights start at zero so initial logits are exactly uniform.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let small = Normal::new(0.0, EMBED_INIT_STD).expect("valid normal");

        let embed = match &config.task {
            TaskConfig::Lm { .. } => EmbedParams::Tokens(TokenTable::new(Tensor::from_fn(
                config.d,
                config.table_width(),
                |_, _| small.sample(&mut rng),
            ))),
            TaskConfig::Cls {
                patch_h,
                patch_w,
                channels,
                ..
            } => EmbedParams::Patches(PatchEmbedder::new(
                *patch_h,
                *patch_w,
                *channels,
                crate::attention::gaussian(config.d, patch_h * patch_w * channels, &mut rng),
            )?),
        };

        let pos_table = match config.positions {
            PositionMode::Learned => Some(Tensor::from_fn(config.d, config.n_max, |_, _| {
                small.sample(&mut rng)
            })),
            _ => None,
        };

        let blocks = (0..config.n_layers)
            .map(|_| {
                BlockParams::random(
                    config.d,
                    config.n_heads,
                    config.k,
                    config.d_hidden,
                    config.activation,
                    config.epsilon,
                    config.scale_logits,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let head = match config.head {
            HeadKind::Lm => OutputHead::Lm(Tensor::zeros(config.d, config.output_size())),
            HeadKind::ClsToken | HeadKind::ClsPool => {
                OutputHead::Classifier(Tensor::zeros(config.output_size(), config.d))
            }
        };

        let class_token = match config.head {
            HeadKind::ClsToken => Some(Tensor::from_fn(config.d, 1, |_, _| small.sample(&mut rng))),
            _ => None,
        };

        Ok(ModelParams {
            embed,
            pos_table,
            blocks,
            head,
            class_token,
        })
    }

    /// Visit every tensor with its canonical name, in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor)) {
        match &self.embed {
            EmbedParams::Tokens(t) => f("embed.table", &t.table),
            EmbedParams::Patches(p) => f("embed.patch", &p.w_patch),
        }
        if let Some(table) = &self.pos_table {
            f("pos.table", table);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("block{i}.norm1.gamma"), &b.norm1.gamma);
            f(&format!("block{i}.norm1.beta"), &b.norm1.beta);
            for (h, head) in b.mhsa.heads.iter().enumerate() {
                f(&format!("block{i}.head{h}.u_q"), &head.u_q);
                f(&format!("block{i}.head{h}.u_k"), &head.u_k);
                f(&format!("block{i}.head{h}.v"), &head.v);
            }
            f(&format!("block{i}.norm2.gamma"), &b.norm2.gamma);
            f(&format!("block{i}.norm2.beta"), &b.norm2.beta);
            f(&format!("block{i}.mlp.w1"), &b.mlp.w1);
            f(&format!("block{i}.mlp.b1"), &b.mlp.b1);
            f(&format!("block{i}.mlp.w2"), &b.mlp.w2);
            f(&format!("block{i}.mlp.b2"), &b.mlp.b2);
        }
        match &self.head {
            OutputHead::Lm(g) => f("head.g", g),
            OutputHead::Classifier(w) => f("head.w", w),
        }
        if let Some(x0) = &self.class_token {
            f("cls.x0", x0);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        match &mut self.embed {
            EmbedParams::Tokens(t) => f("embed.table", &mut t.table),
            EmbedParams::Patches(p) => f("embed.patch", &mut p.w_patch),
        }
        if let Some(table) = &mut self.pos_table {
            f("pos.table", table);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.norm1.gamma"), &mut b.norm1.gamma);
            f(&format!("block{i}.norm1.beta"), &mut b.norm1.beta);
            for (h, head) in b.mhsa.heads.iter_mut().enumerate() {
                f(&format!("block{i}.head{h}.u_q"), &mut head.u_q);
                f(&format!("block{i}.head{h}.u_k"), &mut head.u_k);
                f(&format!("block{i}.head{h}.v"), &mut head.v);
            }
            f(&format!("block{i}.norm2.gamma"), &mut b.norm2.gamma);
            f(&format!("block{i}.norm2.beta"), &mut b.norm2.beta);
            f(&format!("block{i}.mlp.w1"), &mut b.mlp.w1);
            f(&format!("block{i}.mlp.b1"), &mut b.mlp.b1);
            f(&format!("block{i}.mlp.w2"), &mut b.mlp.w2);
            f(&format!("block{i}.mlp.b2"), &mut b.mlp.b2);
        }
        match &mut self.head {
            OutputHead::Lm(g) => f("head.g", g),
            OutputHead::Classifier(w) => f("head.w", w),
        }
        if let Some(x0) = &mut self.class_token {
            f("cls.x0", x0);
        }
    }

    pub fn named(&self) -> NamedParams {
        let mut out = NamedParams::new();
        self.visit(|name, t| {
            out.insert(name.to_string(), t.clone());
        });
        out
    }

    /// Rebuild typed parameters from named tensors, checking names and
    /// shapes against what the config dictates.
    pub fn from_named(config: &ModelConfig, mut named: NamedParams) -> Result<Self> {
        let mut params = ModelParams::init(config)?;
        let mut missing = Vec::new();
        params.visit_mut(|name, slot| {
            match named.remove(name) {
                Some(tensor) => {
                    if tensor.shape() != slot.shape() {
                        // flag by poisoning the name list; reported below
                        missing.push(format!(
                            "{name} has shape {}x{}, expected {}x{}",
                            tensor.rows(),
                            tensor.cols(),
                            slot.rows(),
                            slot.cols()
                        ));
                    } else {
                        *slot = tensor;
                    }
                }
                None => missing.push(format!("{name} missing")),
            }
        });
        if let Some(problem) = missing.first() {
            return Err(Error::Corrupt(format!(
                "checkpoint tensors disagree with config: {problem}"
            )));
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Corrupt(format!(
                "checkpoint carries unexpected tensor '{extra}'"
            )));
        }
        params.ensure_finite()?;
        Ok(params)
    }

    pub fn ensure_finite(&self) -> Result<()> {
        let mut bad = None;
        self.visit(|name, t| {
            if bad.is_none() && !t.is_finite() {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(name) => Err(Error::Corrupt(format!(
                "parameter '{name}' holds non-finite values"
            ))),
            None => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit(|_, t| count += t.data().len());
        count
    }

    /// Position encoding ready for [`embed::add_positions`].
    pub fn position_encoding(&self, config: &ModelConfig) -> Result<PositionEncoding> {
        Ok(match config.positions {
            PositionMode::None => PositionEncoding::none(),
            PositionMode::Learned => {
                let table = self
                    .pos_table
                    .clone()
                    .ok_or_else(|| Error::Contract("learned positions without a table".to_string()))?;
                PositionEncoding::additive(PositionMode::Learned, table)
            }
            PositionMode::Sinusoidal => PositionEncoding {
                mode: PositionMode::Sinusoidal,
                combine: Combine::Additive,
                table: embed::sinusoidal_positions_with_base(config.d, config.n_max, config.pos_base)?,
            },
        })
    }
}

// ── Pure forward paths ───────────────────────────────────────────────

/// Apply position encoding then all M blocks: X^(0) -> X^(M).
pub fn forward(x0: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<Tensor> {
    Ok(forward_with_attention(x0, params, config)?.0)
}

/// Forward pass that also collects every layer's attention matrices
/// (outer index layer, inner index head).
pub fn forward_with_attention(
    x0: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
    if x0.rows() != config.d {
        return Err(Error::shape("forward", x0.shape(), (config.d, x0.cols())));
    }
    if x0.cols() > config.n_max {
        return Err(Error::Range(format!(
            "sequence of length {} exceeds n_max {}",
            x0.cols(),
            config.n_max
        )));
    }
    let pe = params.position_encoding(config)?;
    let mut x = embed::add_positions(x0, &pe)?;
    let mut per_layer = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (next, weights) = block::block_forward_with_weights(&x, b, config.mask)?;
        x = next;
        per_layer.push(weights);
    }
    Ok((x, per_layer))
}

fn token_table(params: &ModelParams) -> Result<&TokenTable> {
    match &params.embed {
        EmbedParams::Tokens(t) => Ok(t),
        EmbedParams::Patches(_) => Err(Error::Contract(
            "this model embeds patches, not tokens".to_string(),
        )),
    }
}

fn patch_embedder(params: &ModelParams) -> Result<&PatchEmbedder> {
    match &params.embed {
        EmbedParams::Patches(p) => Ok(p),
        EmbedParams::Tokens(_) => Err(Error::Contract(
            "this model embeds tokens, not patches".to_string(),
        )),
    }
}

/// Token ids actually fed to the network: the optional BOS column plus the
/// sequence itself.
pub fn full_input_ids(ids: &[usize], config: &ModelConfig) -> Vec<usize> {
    match config.bos_id() {
        Some(bos) => std::iter::once(bos).chain(ids.iter().copied()).collect(),
        None => ids.to_vec(),
    }
}

fn lm_targets<'a>(ids: &'a [usize], config: &ModelConfig) -> Result<&'a [usize]> {
    if config.bos() {
        if ids.is_empty() {
            return Err(Error::Contract(
                "language-model loss needs at least one token".to_string(),
            ));
        }
        Ok(ids)
    } else {
        if ids.len() < 2 {
            return Err(Error::Contract(
                "without a BOS token the loss needs at least two tokens".to_string(),
            ));
        }
        Ok(&ids[1..])
    }
}

/// Per-position next-token cross-entropies from one masked forward pass.
pub fn lm_step_losses(
    ids: &[usize],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<f64>> {
    if config.mask != MaskMode::Causal {
        return Err(Error::Contract(
            "language-model loss requires a causal mask".to_string(),
        ));
    }
    let targets = lm_targets(ids, config)?;
    let table = token_table(params)?;
    let full = full_input_ids(ids, config);
    let x0 = embed::embed_tokens(&full, table)?;
    let xm = forward(&x0, params, config)?;
    let g = match &params.head {
        OutputHead::Lm(g) => g,
        OutputHead::Classifier(_) => {
            return Err(Error::Contract("model has no language head".to_string()))
        }
    };
    let logits = g.transpose().matmul(&xm)?;
    let mut losses = Vec::with_capacity(targets.len());
    for (n, &target) in targets.iter().enumerate() {
        losses.push(column_cross_entropy(&logits, n, target));
    }
    Ok(losses)
}

fn column_cross_entropy(logits: &Tensor, col: usize, target: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for r in 0..logits.rows() {
        max = max.max(logits.get(r, col));
    }
    let mut sum = 0.0;
    for r in 0..logits.rows() {
        sum += (logits.get(r, col) - max).exp();
    }
    max + sum.ln() - logits.get(target, col)
}

/// Mean next-token cross-entropy in nats, computed on the tape.
pub fn lm_loss(ids: &[usize], params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    let (loss, _) = crate::autodiff::forward(|tape| lm_loss_graph(tape, params, config, ids))?;
    Ok(loss)
}

/// Class logits for one embedded image.
pub fn cls_logits(x0: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<Vec<f64>> {
    let w = match &params.head {
        OutputHead::Classifier(w) => w,
        OutputHead::Lm(_) => {
            return Err(Error::Contract(
                "model has a language head, not a classifier".to_string(),
            ))
        }
    };
    let feature = match config.head {
        HeadKind::ClsToken => {
            let x0_token = params
                .class_token
                .as_ref()
                .ok_or_else(|| Error::Contract("cls-token head without a class token".to_string()))?;
            let joined = Tensor::from_fn(x0.rows(), x0.cols() + 1, |r, c| {
                if c == 0 {
                    x0_token.get(r, 0)
                } else {
                    x0.get(r, c - 1)
                }
            });
            let xm = forward(&joined, params, config)?;
            Tensor::from_fn(config.d, 1, |r, _| xm.get(r, 0))
        }
        HeadKind::ClsPool => {
            let xm = forward(x0, params, config)?;
            let ones = Tensor::filled(xm.cols(), 1, 1.0);
            xm.matmul(&ones)?
        }
        HeadKind::Lm => {
            return Err(Error::Contract(
                "cls_logits requires a classification head".to_string(),
            ))
        }
    };
    let logits = w.matmul(&feature)?;
    Ok(logits.col(0))
}

/// Classify a raw image end to end.
pub fn classify_image(
    image: &Image,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<f64>> {
    let x0 = embed::embed_patches(image, patch_embedder(params)?)?;
    cls_logits(&x0, params, config)
}

// ── Tape graphs ──────────────────────────────────────────────────────

/// Named parameter nodes registered on a tape.
pub struct GraphParams {
    nodes: std::collections::BTreeMap<String, NodeId>,
}

impl GraphParams {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Result<Self> {
        let mut pending = Vec::new();
        params.visit(|name, t| pending.push((name.to_string(), t.clone())));
        let mut nodes = std::collections::BTreeMap::new();
        for (name, tensor) in pending {
            let id = tape.param(&name, tensor)?;
            nodes.insert(name, id);
        }
        Ok(GraphParams { nodes })
    }

    fn get(&self, name: &str) -> NodeId {
        *self.nodes.get(name).unwrap_or_else(|| panic!("parameter node '{name}'"))
    }
}

fn positions_graph(
    tape: &mut Tape,
    x: NodeId,
    graph: &GraphParams,
    params: &ModelParams,
    config: &ModelConfig,
    n: usize,
) -> Result<NodeId> {
    match config.positions {
        PositionMode::None => Ok(x),
        PositionMode::Learned => {
            let table = graph.get("pos.table");
            let idx: Vec<usize> = (0..n).collect();
            let cols = tape.embed_lookup(table, &idx)?;
            tape.add(x, cols)
        }
        PositionMode::Sinusoidal => {
            let pe = params.position_encoding(config)?;
            let cols = tape.constant(pe.table.take_cols(n));
            tape.add(x, cols)
        }
    }
}

fn block_graph(
    tape: &mut Tape,
    x: NodeId,
    graph: &GraphParams,
    config: &ModelConfig,
    layer: usize,
) -> Result<NodeId> {
    let name = |suffix: &str| format!("block{layer}.{suffix}");
    let g1 = graph.get(&name("norm1.gamma"));
    let b1 = graph.get(&name("norm1.beta"));
    let normed = tape.token_norm(x, g1, b1, config.epsilon)?;

    let mut attended: Option<NodeId> = None;
    for h in 0..config.n_heads {
        let u_q = graph.get(&name(&format!("head{h}.u_q")));
        let u_k = graph.get(&name(&format!("head{h}.u_k")));
        let v = graph.get(&name(&format!("head{h}.v")));
        let queries = tape.matmul(u_q, normed)?;
        let keys = tape.matmul(u_k, normed)?;
        let keys_t = tape.transpose(keys);
        let mut logits = tape.matmul(keys_t, queries)?;
        if config.scale_logits {
            logits = tape.scale(logits, 1.0 / (config.k as f64).sqrt());
        }
        if config.mask.is_causal() {
            logits = tape.mask_causal(logits)?;
        }
        let a = tape.column_softmax(logits)?;
        let xa = tape.matmul(normed, a)?;
        let contrib = tape.matmul(v, xa)?;
        attended = Some(match attended {
            None => contrib,
            Some(acc) => tape.add(acc, contrib)?,
        });
    }
    let y = tape.add(x, attended.expect("at least one head"))?;

    let g2 = graph.get(&name("norm2.gamma"));
    let b2 = graph.get(&name("norm2.beta"));
    let normed2 = tape.token_norm(y, g2, b2, config.epsilon)?;
    let w1 = graph.get(&name("mlp.w1"));
    let b1m = graph.get(&name("mlp.b1"));
    let w2 = graph.get(&name("mlp.w2"));
    let b2m = graph.get(&name("mlp.b2"));
    let pre = tape.matmul(w1, normed2)?;
    let pre = tape.add_col_vec(pre, b1m)?;
    let act = tape.activation(pre, config.activation);
    let post = tape.matmul(w2, act)?;
    let post = tape.add_col_vec(post, b2m)?;
    tape.add(y, post)
}

/// Build the masked single-pass language-model loss on a tape.
pub fn lm_loss_graph(
    tape: &mut Tape,
    params: &ModelParams,
    config: &ModelConfig,
    ids: &[usize],
) -> Result<NodeId> {
    if config.mask != MaskMode::Causal {
        return Err(Error::Contract(
            "language-model loss requires a causal mask".to_string(),
        ));
    }
    token_table(params)?;
    let targets = lm_targets(ids, config)?.to_vec();
    let full = full_input_ids(ids, config);
    if full.len() > config.n_max {
        return Err(Error::Range(format!(
            "sequence of length {} exceeds n_max {}",
            full.len(),
            config.n_max
        )));
    }
    let graph = GraphParams::register(tape, params)?;
    let table = graph.get("embed.table");
    let mut x = tape.embed_lookup(table, &full)?;
    x = positions_graph(tape, x, &graph, params, config, full.len())?;
    for layer in 0..config.n_layers {
        x = block_graph(tape, x, &graph, config, layer)?;
    }
    let g = graph.get("head.g");
    let g_t = tape.transpose(g);
    let logits = tape.matmul(g_t, x)?;
    let scored = tape.slice_cols(logits, 0, targets.len())?;
    tape.cross_entropy_cols(scored, &targets)
}

/// Build the classification loss for one image on a tape.
pub fn cls_loss_graph(
    tape: &mut Tape,
    params: &ModelParams,
    config: &ModelConfig,
    image: &Image,
    label: usize,
) -> Result<NodeId> {
    let pe = patch_embedder(params)?;
    if label >= config.output_size() {
        return Err(Error::Index(format!(
            "label {label} outside {} classes",
            config.output_size()
        )));
    }
    let patches = embed::patch_matrix(image, pe.patch_h, pe.patch_w, pe.channels)?;
    let graph = GraphParams::register(tape, params)?;
    let w_patch = graph.get("embed.patch");
    let patches_node = tape.constant(patches);
    let mut x = tape.matmul(w_patch, patches_node)?;

    if config.head == HeadKind::ClsToken {
        let x0 = graph.get("cls.x0");
        x = tape.concat_cols(x0, x)?;
    }
    let n = tape.value(x).cols();
    if n > config.n_max {
        return Err(Error::Range(format!(
            "sequence of length {n} exceeds n_max {}",
            config.n_max
        )));
    }
    x = positions_graph(tape, x, &graph, params, config, n)?;
    for layer in 0..config.n_layers {
        x = block_graph(tape, x, &graph, config, layer)?;
    }
    let feature = match config.head {
        HeadKind::ClsToken => tape.slice_cols(x, 0, 1)?,
        HeadKind::ClsPool => {
            let ones = tape.constant(Tensor::filled(n, 1, 1.0));
            tape.matmul(x, ones)?
        }
        HeadKind::Lm => {
            return Err(Error::Contract(
                "classification loss requires a classification head".to_string(),
            ))
        }
    };
    let w = graph.get("head.w");
    let logits = tape.matmul(w, feature)?;
    tape.cross_entropy_cols(logits, &[label])
}

// ── Incremental decoding ─────────────────────────────────────────────

struct LayerCache {
    /// Token-normalised layer inputs, one D-vector per consumed position.
    normed: Vec<Vec<f64>>,
    /// Per head, one K-vector of key projections per consumed position.
    keys: Vec<Vec<Vec<f64>>>,
}

/// Per-layer store of normalised inputs and key projections for positions
/// consumed so far. Contents are bit-identical to what a full forward pass
/// over the same prefix computes at those positions.
pub struct KVCache {
    layers: Vec<LayerCache>,
    len: usize,
    n_max: usize,
}

impl KVCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Stored normalised input for `layer` at `position` (test hook for the
    /// bit-identity contract).
    pub fn normed_at(&self, layer: usize, position: usize) -> &[f64] {
        &self.layers[layer].normed[position]
    }
}

/// Empty cache for a causal language model.
pub fn incremental_init(config: &ModelConfig, params: &ModelParams) -> Result<KVCache> {
    if config.mask != MaskMode::Causal {
        return Err(Error::Contract(
            "incremental decoding requires a causal mask".to_string(),
        ));
    }
    token_table(params)?;
    if config.head != HeadKind::Lm {
        return Err(Error::Contract(
            "incremental decoding requires the language-model head".to_string(),
        ));
    }
    Ok(KVCache {
        layers: (0..config.n_layers)
            .map(|_| LayerCache {
                normed: Vec::new(),
                keys: vec![Vec::new(); config.n_heads],
            })
            .collect(),
        len: 0,
        n_max: config.n_max,
    })
}

/// Consume one token: returns next-token logits over the vocabulary and
/// grows the cache by one position.
pub fn incremental_step(
    cache: &mut KVCache,
    params: &ModelParams,
    config: &ModelConfig,
    token_id: usize,
) -> Result<Vec<f64>> {
    if cache.len >= cache.n_max {
        return Err(Error::Range(format!(
            "cache already holds n_max = {} positions",
            cache.n_max
        )));
    }
    let table = token_table(params)?;
    if token_id >= table.vocab_size() {
        return Err(Error::Index(format!(
            "token id {token_id} outside the embedding table of width {}",
            table.vocab_size()
        )));
    }
    let position = cache.len;
    let d = config.d;

    // embed + position, exactly as the full path does column by column
    let mut col = Tensor::from_fn(d, 1, |r, _| table.table.get(r, token_id));
    match config.positions {
        PositionMode::None => {}
        PositionMode::Learned => {
            let pos = params
                .pos_table
                .as_ref()
                .ok_or_else(|| Error::Contract("learned positions without a table".to_string()))?;
            col = Tensor::from_fn(d, 1, |r, _| col.get(r, 0) + pos.get(r, position));
        }
        PositionMode::Sinusoidal => {
            let pe = embed::sinusoidal_positions_with_base(d, position + 1, config.pos_base)?;
            col = Tensor::from_fn(d, 1, |r, _| col.get(r, 0) + pe.get(r, position));
        }
    }

    for (layer, block_params) in params.blocks.iter().enumerate() {
        let state = &mut cache.layers[layer];
        let normed = block::token_norm(&col, &block_params.norm1)?;
        state.normed.push(normed.col(0));

        let mut attended_sum = Tensor::zeros(d, 1);
        for (h, head) in block_params.mhsa.heads.iter().enumerate() {
            let key = head.u_k.matmul(&normed)?;
            state.keys[h].push(key.col(0));
            let query = head.u_q.matmul(&normed)?;

            let k_dim = head.u_q.rows();
            let inv = if block_params.mhsa.scale {
                1.0 / (k_dim as f64).sqrt()
            } else {
                1.0
            };
            let count = position + 1;
            let mut logits = Vec::with_capacity(count);
            for cached_key in &state.keys[h] {
                let mut dot = 0.0;
                for i in 0..k_dim {
                    dot += cached_key[i] * query.get(i, 0);
                }
                logits.push(dot * inv);
            }
            let mut max = f64::NEG_INFINITY;
            for &l in &logits {
                max = max.max(l);
            }
            let mut sum = 0.0;
            let mut weights = Vec::with_capacity(count);
            for &l in &logits {
                let e = (l - max).exp();
                weights.push(e);
                sum += e;
            }
            for w in &mut weights {
                *w /= sum;
            }

            // weighted average over cached normalised inputs, then project
            let mut averaged = vec![0.0; d];
            for (n_prev, w) in weights.iter().enumerate() {
                let x_prev = &state.normed[n_prev];
                for r in 0..d {
                    averaged[r] += x_prev[r] * w;
                }
            }
            let mut contrib = vec![0.0; d];
            for r in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += head.v.get(r, c) * averaged[c];
                }
                contrib[r] = acc;
            }
            for r in 0..d {
                attended_sum.set(r, 0, attended_sum.get(r, 0) + contrib[r]);
            }
        }
        let y = col.add(&attended_sum)?;
        let refined = block::mlp_forward(&block::token_norm(&y, &block_params.norm2)?, &block_params.mlp)?;
        col = y.add(&refined)?;
    }

    cache.len += 1;

    let g = match &params.head {
        OutputHead::Lm(g) => g,
        OutputHead::Classifier(_) => unreachable!("checked at init"),
    };
    let logits = g.transpose().matmul(&col)?;
    Ok(logits.col(0))
}

// ── Generation ───────────────────────────────────────────────────────

/// Next-token selection rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    Greedy,
    Temperature(f64),
}

impl Sampler {
    fn validate(self) -> Result<()> {
        if let Sampler::Temperature(t) = self {
            if t <= 0.0 {
                return Err(Error::Config(format!(
                    "sampling temperature must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }
}

fn sample_index(logits: &[f64], sampler: Sampler, rng: &mut ChaCha8Rng) -> usize {
    match sampler {
        Sampler::Greedy => {
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best
        }
        Sampler::Temperature(tau) => {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u: f64 = rng.gen::<f64>() * total;
            for (i, &w) in weights.iter().enumerate() {
                u -= w;
                if u < 0.0 {
                    return i;
                }
            }
            weights.len() - 1
        }
    }
}

/// Autoregressive generation with the KV cache. Returns the prompt followed
/// by `steps` sampled tokens; deterministic in `seed`.
pub fn generate(
    params: &ModelParams,
    config: &ModelConfig,
    prompt: &[usize],
    steps: usize,
    sampler: Sampler,
    seed: u64,
) -> Result<Vec<usize>> {
    sampler.validate()?;
    if prompt.is_empty() {
        return Err(Error::Precondition("generation needs a non-empty prompt".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = incremental_init(config, params)?;
    let mut logits = Vec::new();
    if let Some(bos) = config.bos_id() {
        logits = incremental_step(&mut cache, params, config, bos)?;
    }
    for &id in prompt {
        logits = incremental_step(&mut cache, params, config, id)?;
    }
    let mut out = prompt.to_vec();
    for remaining in (0..steps).rev() {
        let next = sample_index(&logits, sampler, &mut rng);
        out.push(next);
        if remaining > 0 {
            logits = incremental_step(&mut cache, params, config, next)?;
        }
    }
    Ok(out)
}

/// Reference generation path that recomputes the full forward pass for
/// every emitted token. Same sampling stream as [`generate`].
pub fn generate_uncached(
    params: &ModelParams,
    config: &ModelConfig,
    prompt: &[usize],
    steps: usize,
    sampler: Sampler,
    seed: u64,
) -> Result<Vec<usize>> {
    sampler.validate()?;
    if prompt.is_empty() {
        return Err(Error::Precondition("generation needs a non-empty prompt".to_string()));
    }
    if config.mask != MaskMode::Causal {
        return Err(Error::Contract(
            "generation requires a causal mask".to_string(),
        ));
    }
    let table = token_table(params)?;
    let g = match &params.head {
        OutputHead::Lm(g) => g,
        OutputHead::Classifier(_) => {
            return Err(Error::Contract("model has no language head".to_string()))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = prompt.to_vec();
    for _ in 0..steps {
        let full = full_input_ids(&out, config);
        if full.len() > config.n_max {
            return Err(Error::Range(format!(
                "sequence of length {} exceeds n_max {}",
                full.len(),
                config.n_max
            )));
        }
        let x0 = embed::embed_tokens(&full, table)?;
        let xm = forward(&x0, params, config)?;
        let logits_mat = g.transpose().matmul(&xm)?;
        let logits = logits_mat.col(logits_mat.cols() - 1);
        out.push(sample_index(&logits, sampler, &mut rng));
    }
    Ok(out)
}
