//! In-binary invariant suite behind the `selftest` subcommand: quick,
//! seeded spot checks of the properties the library is built around.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, MaskMode, MHSAParams};
use crate::autodiff::finite_diff_check;
use crate::block::Activation;
use crate::data::Vocab;
use crate::embed::{self, PositionMode};
use crate::error::Result;
use crate::model::{self, HeadKind, ModelConfig, ModelParams, Sampler, TaskConfig};
use crate::tensor::Tensor;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn small_lm_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        n_heads: 2,
        k: 4,
        n_layers: 2,
        d_hidden: 16,
        n_max: 64,
        mask: MaskMode::Causal,
        positions: PositionMode::Learned,
        head: HeadKind::Lm,
        epsilon: 1e-5,
        pos_base: 10_000.0,
        scale_logits: true,
        activation: Activation::Gelu,
        seed: 7,
        task: TaskConfig::Lm {
            vocab: Vocab::from_corpus(b"abcdefghijk").unwrap(),
            bos: true,
        },
    }
}

fn jittered(config: &ModelConfig) -> Result<ModelParams> {
    let mut params = ModelParams::init(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xa5a5);
    params.visit_mut(|name, t| {
        if name.starts_with("head.") {
            *t = Tensor::from_fn(t.rows(), t.cols(), |_, _| rng.gen_range(-0.5..0.5));
        }
    });
    Ok(params)
}

fn column_sums_check() -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let d = rng.gen_range(2..=12);
        let n = rng.gen_range(1..=16);
        let k = rng.gen_range(1..=4);
        let x = random_tensor(&mut rng, d, n);
        let u_q = random_tensor(&mut rng, k, d);
        let u_k = random_tensor(&mut rng, k, d);
        for mask in [MaskMode::None, MaskMode::Causal] {
            let a = attention::attention_weights(&x, &u_q, &u_k, mask, true)?;
            for col in 0..n {
                let sum: f64 = (0..n).map(|r| a.get(r, col)).sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

fn causal_leakage_check() -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, 6, 8);
    let params = MHSAParams::random(2, 3, 6, &mut rng);
    let y = attention::mhsa_forward(&x, &params, MaskMode::Causal)?;
    let mut perturbed = x.clone();
    for r in 0..6 {
        perturbed.set(r, 6, perturbed.get(r, 6) + 5.0);
    }
    let y2 = attention::mhsa_forward(&perturbed, &params, MaskMode::Causal)?;
    for col in 0..6 {
        for r in 0..6 {
            if y.get(r, col) != y2.get(r, col) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn permutation_equivariance_check() -> Result<bool> {
    let config = {
        let mut c = small_lm_config();
        c.mask = MaskMode::None;
        c.positions = PositionMode::None;
        c
    };
    let params = jittered(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 7;
    let x = random_tensor(&mut rng, config.d, n);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let p = Tensor::from_fn(n, n, |r, c| if perm[c] == r { 1.0 } else { 0.0 });
    let lhs = model::forward(&x.matmul(&p)?, &params, &config)?;
    let rhs = model::forward(&x, &params, &config)?.matmul(&p)?;
    Ok(lhs.sub(&rhs)?.max_abs() < 1e-9)
}

fn convolution_recovery_check() -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let n = rng.gen_range(4..10);
        let x = random_tensor(&mut rng, 3, n);
        let filter: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a = Tensor::from_fn(n, n, |key, query| {
            let lag = key as isize - query as isize + 1;
            if (0..3).contains(&lag) {
                filter[lag as usize]
            } else {
                0.0
            }
        });
        let via_attention = attention::apply_attention(&x, &a)?;
        let direct = Tensor::from_fn(3, n, |d, out_col| {
            let mut acc = 0.0;
            for in_col in 0..n {
                let lag = in_col as isize - out_col as isize + 1;
                let w = if (0..3).contains(&lag) { filter[lag as usize] } else { 0.0 };
                acc += x.get(d, in_col) * w;
            }
            acc
        });
        if via_attention != direct {
            return Ok(false);
        }
    }
    Ok(true)
}

fn qkv_equivalence_check() -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let heads: Vec<attention::QkvHeadParams> = (0..2)
            .map(|_| attention::QkvHeadParams {
                u_q: random_tensor(&mut rng, 2, 4),
                u_k: random_tensor(&mut rng, 2, 4),
                u_v: random_tensor(&mut rng, 2, 4),
                u_o: random_tensor(&mut rng, 4, 2),
            })
            .collect();
        let x = random_tensor(&mut rng, 4, 5);
        let folded = attention::qkv_equivalence_form(&heads, true)?;
        let a = attention::mhsa_forward(&x, &folded, MaskMode::None)?;
        let b = attention::mhsa_forward_qkv(&x, &heads, MaskMode::None, true)?;
        if a.sub(&b)?.max_abs() > 1e-12 {
            return Ok(false);
        }
    }
    Ok(true)
}

fn concat_additive_check() -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let v = random_tensor(&mut rng, 5, 6);
        let w = random_tensor(&mut rng, 4, 3);
        let p = random_tensor(&mut rng, 3, 1);
        let e = random_tensor(&mut rng, 2, 1);
        let (w2, e2) = embed::concat_additive_equivalence(&v, &w, &e)?;
        let wp = w.matmul(&p)?;
        let stacked = Tensor::from_fn(6, 1, |r, _| {
            if r < 4 {
                wp.get(r, 0)
            } else {
                e.get(r - 4, 0)
            }
        });
        let lhs = v.matmul(&stacked)?;
        let rhs = w2.matmul(&p)?.add(&e2)?;
        if lhs.sub(&rhs)?.max_abs() > 1e-12 {
            return Ok(false);
        }
    }
    Ok(true)
}

fn incremental_check() -> Result<bool> {
    let config = small_lm_config();
    let params = jittered(&config)?;
    let ids: Vec<usize> = (0..16).map(|i| (i * 5 + 2) % 11).collect();
    let full = model::full_input_ids(&ids, &config);
    let table = match &params.embed {
        model::EmbedParams::Tokens(t) => t.clone(),
        _ => unreachable!(),
    };
    let g = match &params.head {
        model::OutputHead::Lm(g) => g.clone(),
        _ => unreachable!(),
    };
    let mut cache = model::incremental_init(&config, &params)?;
    for (n, &id) in full.iter().enumerate() {
        let logits = model::incremental_step(&mut cache, &params, &config, id)?;
        let x0 = embed::embed_tokens(&full[..=n], &table)?;
        let xm = model::forward(&x0, &params, &config)?;
        let reference = g.transpose().matmul(&xm)?.col(n);
        for (a, b) in logits.iter().zip(&reference) {
            if (a - b).abs() > 1e-9 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn single_pass_loss_check() -> Result<bool> {
    let config = small_lm_config();
    let params = jittered(&config)?;
    let ids: Vec<usize> = (0..8).map(|i| (i * 3 + 1) % 11).collect();
    let single = model::lm_step_losses(&ids, &params, &config)?;
    let mean = single.iter().sum::<f64>() / single.len() as f64;
    let tape = model::lm_loss(&ids, &params, &config)?;
    Ok((mean - tape).abs() <= 1e-9)
}

fn gradcheck_small() -> Result<bool> {
    let mut config = small_lm_config();
    config.d = 4;
    config.k = 2;
    config.n_layers = 1;
    config.d_hidden = 8;
    config.task = TaskConfig::Lm {
        vocab: Vocab::from_corpus(b"abcde").unwrap(),
        bos: true,
    };
    let params = jittered(&config)?;
    let ids = [0usize, 3, 1, 4];
    let report = finite_diff_check(
        |tape, named| {
            let p = ModelParams::from_named(&config, named.clone())?;
            model::lm_loss_graph(tape, &p, &config, &ids)
        },
        &params.named(),
        1e-5,
        1e-6,
    )?;
    Ok(report.passed())
}

fn sampler_limit_check() -> Result<bool> {
    let config = small_lm_config();
    let params = jittered(&config)?;
    let greedy = model::generate(&params, &config, &[1, 2], 12, Sampler::Greedy, 3)?;
    let cold = model::generate(&params, &config, &[1, 2], 12, Sampler::Temperature(1e-12), 3)?;
    let cached = model::generate(&params, &config, &[1, 2], 12, Sampler::Temperature(0.7), 9)?;
    let uncached =
        model::generate_uncached(&params, &config, &[1, 2], 12, Sampler::Temperature(0.7), 9)?;
    Ok(greedy == cold && cached == uncached)
}

/// Run every check, printing one line per invariant. Returns true when all
/// pass.
pub fn run(out: &mut impl Write) -> Result<bool> {
    let checks: Vec<(&str, Box<dyn Fn() -> Result<bool>>)> = vec![
        ("attention columns sum to one", Box::new(column_sums_check)),
        ("causal masking leaks nothing", Box::new(causal_leakage_check)),
        ("unmasked model is permutation-equivariant", Box::new(permutation_equivariance_check)),
        ("toeplitz attention is convolution", Box::new(convolution_recovery_check)),
        ("low-rank values match the standard route", Box::new(qkv_equivalence_check)),
        ("concat positions reduce to additive", Box::new(concat_additive_check)),
        ("incremental decoding matches full passes", Box::new(incremental_check)),
        ("single-pass loss equals per-step mean", Box::new(single_pass_loss_check)),
        ("analytic gradients match finite differences", Box::new(gradcheck_small)),
        ("cached sampling matches uncached and greedy limits", Box::new(sampler_limit_check)),
    ];
    let mut all_ok = true;
    for (name, check) in checks {
        let ok = check()?;
        writeln!(out, "{} {name}", if ok { "ok  " } else { "FAIL" })?;
        all_ok &= ok;
    }
    Ok(all_ok)
}
