//! Command-line surface: train, generate, classify, gradient-check,
//! inspect attention, and run the invariant suite.
//!
//! Exit codes: 0 success, 1 numeric/contract failure, 2 usage or config
//! error. `SEQFORMER_SEED` overrides the seed from any config file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::write_attention_dump;
use crate::autodiff::finite_diff_check;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{self, generate_synthetic_cls, load_labeled_dir, PatternKind, Vocab};
use crate::embed;
use crate::error::{Error, Result};
use crate::model::{self, EmbedParams, HeadKind, ModelConfig, ModelParams, Sampler, TaskConfig};
use crate::selftest;
use crate::tensor::Tensor;
use crate::train;

#[derive(Parser)]
#[command(name = "seqformer", version, about = "Desk-scale transformer: train, generate, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a character-level language model on a text corpus
    TrainLm {
        config: PathBuf,
        corpus: PathBuf,
        out_dir: PathBuf,
    },
    /// Sample a continuation of a prompt from a trained checkpoint
    Generate {
        checkpoint: PathBuf,
        prompt: String,
        steps: usize,
        /// Sampling temperature; omit for greedy decoding
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train an image classifier on labelled PGM directories
    TrainCls {
        config: PathBuf,
        data_dir: PathBuf,
        out_dir: PathBuf,
        /// Generate the synthetic bright/dark set into data_dir if absent
        #[arg(long)]
        synthetic: bool,
    },
    /// Compare analytic gradients against central differences
    Gradcheck {
        config: PathBuf,
        seed: Option<u64>,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Dump every layer/head attention matrix for one input
    InspectAttention {
        checkpoint: PathBuf,
        input: String,
        out_dir: PathBuf,
    },
    /// Run the built-in invariant suite
    Selftest,
}

/// Entry point for the `seqformer` binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::TrainLm {
            config,
            corpus,
            out_dir,
        } => cmd_train_lm(&config, &corpus, &out_dir),
        Command::Generate {
            checkpoint,
            prompt,
            steps,
            temperature,
            seed,
        } => cmd_generate(&checkpoint, &prompt, steps, temperature, seed),
        Command::TrainCls {
            config,
            data_dir,
            out_dir,
            synthetic,
        } => cmd_train_cls(&config, &data_dir, &out_dir, synthetic),
        Command::Gradcheck {
            config,
            seed,
            tol,
            step,
        } => cmd_gradcheck(&config, seed, tol, step),
        Command::InspectAttention {
            checkpoint,
            input,
            out_dir,
        } => cmd_inspect_attention(&checkpoint, &input, &out_dir),
        Command::Selftest => {
            let stdout = std::io::stdout();
            let ok = selftest::run(&mut stdout.lock())?;
            Ok(u8::from(!ok))
        }
    }
}

fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = RunConfig::parse(&text)?;
    if let Ok(raw) = std::env::var("SEQFORMER_SEED") {
        config.seed = raw
            .parse()
            .map_err(|_| Error::Config(format!("bad SEQFORMER_SEED '{raw}'")))?;
    }
    Ok(config)
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (step, loss) in losses.iter().enumerate() {
        out.push_str(&format!("{step},{loss}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn cmd_train_lm(config_path: &Path, corpus_path: &Path, out_dir: &Path) -> Result<u8> {
    let rc = load_run_config(config_path)?;
    if rc.head != HeadKind::Lm {
        return Err(Error::Config(
            "train-lm requires head = lm in the config".to_string(),
        ));
    }
    let corpus = fs::read(corpus_path)
        .map_err(|e| Error::Input(format!("cannot read corpus {}: {e}", corpus_path.display())))?;
    if corpus.is_empty() {
        return Err(Error::Input(format!(
            "corpus {} is empty",
            corpus_path.display()
        )));
    }
    let vocab = Vocab::from_corpus(&corpus)?;
    let ids = vocab.encode(&corpus)?;
    let config = rc.to_lm_model_config(vocab.clone())?;

    let (params, losses) = train::train_lm(&config, &rc.optim, rc.seq_len, &ids)?;

    fs::create_dir_all(out_dir)?;
    write_loss_csv(&out_dir.join("loss.csv"), &losses)?;
    fs::write(out_dir.join("vocab.txt"), vocab.to_file_text())?;
    save_checkpoint(&params, &config, &out_dir.join("model.sqfm"))?;
    println!(
        "trained {} steps, first loss {:.4}, final loss {:.4}; wrote {}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        out_dir.display()
    );
    Ok(0)
}

pub fn cmd_generate(
    checkpoint: &Path,
    prompt: &str,
    steps: usize,
    temperature: Option<f64>,
    seed: u64,
) -> Result<u8> {
    let (params, config) = load_checkpoint(checkpoint)?;
    let vocab = match &config.task {
        TaskConfig::Lm { vocab, .. } => vocab.clone(),
        TaskConfig::Cls { .. } => {
            return Err(Error::Contract(
                "generation needs a language-model checkpoint".to_string(),
            ))
        }
    };
    let prompt_ids = vocab.encode(prompt.as_bytes())?;
    let sampler = match temperature {
        Some(t) => Sampler::Temperature(t),
        None => Sampler::Greedy,
    };
    let ids = model::generate(&params, &config, &prompt_ids, steps, sampler, seed)?;
    let bytes = vocab.decode(&ids)?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    lock.write_all(&bytes)?;
    writeln!(lock)?;
    Ok(0)
}

pub fn cmd_train_cls(
    config_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
    synthetic: bool,
) -> Result<u8> {
    let rc = load_run_config(config_path)?;
    if !matches!(rc.head, HeadKind::ClsToken | HeadKind::ClsPool) {
        return Err(Error::Config(
            "train-cls requires head = cls-token or cls-pool".to_string(),
        ));
    }
    if synthetic && !data_dir.exists() {
        generate_synthetic_cls(
            data_dir,
            &[PatternKind::Bright, PatternKind::Dark],
            8,
            200,
            100,
            rc.seed,
        )?;
    }
    let train_set = load_labeled_dir(&data_dir.join("train"))?;
    let test_set = load_labeled_dir(&data_dir.join("test"))?;
    if train_set.classes != test_set.classes {
        return Err(Error::Input(
            "train and test class directories disagree".to_string(),
        ));
    }
    let first = &train_set.items[0].0;
    let config = rc.to_cls_model_config(
        train_set.classes.clone(),
        first.height,
        first.width,
        first.channels,
    )?;

    let (params, losses, metrics) = train::train_cls(
        &config,
        &rc.optim,
        rc.eval_every,
        &train_set.items,
        &test_set.items,
    )?;

    fs::create_dir_all(out_dir)?;
    write_loss_csv(&out_dir.join("loss.csv"), &losses)?;
    let mut metrics_text = String::from("step,test_accuracy\n");
    for (step, acc) in &metrics {
        metrics_text.push_str(&format!("{step},{acc}\n"));
    }
    fs::write(out_dir.join("metrics.csv"), metrics_text)?;
    save_checkpoint(&params, &config, &out_dir.join("model.sqfm"))?;
    let final_acc = metrics.last().map(|(_, a)| *a).unwrap_or(0.0);
    println!(
        "trained {} steps, final test accuracy {:.1}%; wrote {}",
        losses.len(),
        100.0 * final_acc,
        out_dir.display()
    );
    Ok(0)
}

const GRADCHECK_PARAM_GUARD: usize = 50_000;

pub fn cmd_gradcheck(config_path: &Path, seed: Option<u64>, tol: f64, step: f64) -> Result<u8> {
    let mut rc = load_run_config(config_path)?;
    if let Some(seed) = seed {
        rc.seed = seed;
    }
    let (config, probe) = gradcheck_probe(&rc)?;
    let params = gradcheck_params(&config)?;
    if params.param_count() > GRADCHECK_PARAM_GUARD {
        return Err(Error::Config(format!(
            "model has {} parameters; finite differences are guarded at {GRADCHECK_PARAM_GUARD}",
            params.param_count()
        )));
    }
    let report = finite_diff_check(
        |tape, named| {
            let p = ModelParams::from_named(&config, named.clone())?;
            match &probe {
                GradcheckProbe::Tokens(ids) => model::lm_loss_graph(tape, &p, &config, ids),
                GradcheckProbe::Image(image, label) => {
                    model::cls_loss_graph(tape, &p, &config, image, *label)
                }
            }
        },
        &params.named(),
        step,
        tol,
    )?;
    let stdout = std::io::stdout();
    report.write_table(&mut stdout.lock())?;
    Ok(u8::from(!report.passed()))
}

enum GradcheckProbe {
    Tokens(Vec<usize>),
    Image(embed::Image, usize),
}

/// Fixed probe input for gradient checking, derived from the run seed.
fn gradcheck_probe(rc: &RunConfig) -> Result<(ModelConfig, GradcheckProbe)> {
    let mut rng = ChaCha8Rng::seed_from_u64(rc.seed.wrapping_add(0x67726164));
    match rc.head {
        HeadKind::Lm => {
            let vocab = Vocab::from_corpus(b"abcdefghijk")?;
            let config = rc.to_lm_model_config(vocab.clone())?;
            let n = 5.min(config.n_max.saturating_sub(usize::from(config.bos())).max(1));
            let ids = (0..n).map(|_| rng.gen_range(0..vocab.size())).collect();
            Ok((config, GradcheckProbe::Tokens(ids)))
        }
        HeadKind::ClsToken | HeadKind::ClsPool => {
            let (ph, pw) = (rc.patch_h.expect("validated"), rc.patch_w.expect("validated"));
            let (h, w) = (ph * 2, pw * 2);
            let config = rc.to_cls_model_config(
                vec!["a".to_string(), "b".to_string()],
                h,
                w,
                1,
            )?;
            let image = embed::Image::new(
                h,
                w,
                1,
                (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )?;
            Ok((config, GradcheckProbe::Image(image, 1)))
        }
    }
}

/// Fresh parameters with a non-zero head so gradients reach the body.
fn gradcheck_params(config: &ModelConfig) -> Result<ModelParams> {
    let mut params = ModelParams::init(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x68656164));
    params.visit_mut(|name, t| {
        if name.starts_with("head.") {
            *t = Tensor::from_fn(t.rows(), t.cols(), |_, _| rng.gen_range(-0.5..0.5));
        }
    });
    Ok(params)
}

pub fn cmd_inspect_attention(checkpoint: &Path, input: &str, out_dir: &Path) -> Result<u8> {
    let (params, config) = load_checkpoint(checkpoint)?;
    let x0 = match (&config.task, &params.embed) {
        (TaskConfig::Lm { vocab, .. }, EmbedParams::Tokens(table)) => {
            let ids = vocab.encode(input.as_bytes())?;
            if ids.is_empty() {
                return Err(Error::Input("input text is empty".to_string()));
            }
            let full = model::full_input_ids(&ids, &config);
            embed::embed_tokens(&full, table)?
        }
        (TaskConfig::Cls { .. }, EmbedParams::Patches(pe)) => {
            let image = data::read_pgm(Path::new(input))?;
            let mut x = embed::embed_patches(&image, pe)?;
            if config.head == HeadKind::ClsToken {
                let x0 = params
                    .class_token
                    .as_ref()
                    .ok_or_else(|| Error::Contract("cls-token head without a token".to_string()))?;
                x = Tensor::from_fn(x.rows(), x.cols() + 1, |r, c| {
                    if c == 0 {
                        x0.get(r, 0)
                    } else {
                        x.get(r, c - 1)
                    }
                });
            }
            x
        }
        _ => return Err(Error::Corrupt("checkpoint task/embedding mismatch".to_string())),
    };
    let (_, per_layer) = model::forward_with_attention(&x0, &params, &config)?;
    fs::create_dir_all(out_dir)?;
    for (layer, heads) in per_layer.iter().enumerate() {
        for (head, a) in heads.iter().enumerate() {
            let path = out_dir.join(format!("attn_l{layer}_h{head}.txt"));
            let mut file = fs::File::create(&path)?;
            write_attention_dump(&mut file, layer, head, a)?;
        }
    }
    println!(
        "wrote {} attention dumps to {}",
        per_layer.len() * per_layer.first().map_or(0, |h| h.len()),
        out_dir.display()
    );
    Ok(0)
}
