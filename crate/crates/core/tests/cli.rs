//! End-to-end tests of the `seqformer` binary: exit codes, file outputs,
//! and determinism at the file level.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use seqformer_core::attention::read_attention_dump;
use seqformer_core::checkpoint::load_checkpoint;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_seqformer")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("SEQFORMER_SEED")
        .output()
        .expect("binary runs")
}

fn run_with_seed_env(args: &[&str], seed: &str) -> Output {
    Command::new(bin())
        .args(args)
        .env("SEQFORMER_SEED", seed)
        .output()
        .expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

fn stderr_text(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

const LM_CONFIG: &str = "\
d_model = 16
n_heads = 2
n_layers = 1
n_max = 48
head = lm
seq_len = 24
steps = 80
lr = 3e-3
seed = 42
";

/// One properly trained pattern model, shared across generate tests.
fn trained_lm() -> &'static (tempfile::TempDir, PathBuf) {
    static TRAINED: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("run.cfg");
        fs::write(
            &config_path,
            "d_model = 32\nn_heads = 4\nn_layers = 2\nn_max = 128\nhead = lm\n\
             seq_len = 48\nsteps = 500\nlr = 3e-3\nseed = 42\n",
        )
        .unwrap();
        let corpus_path = dir.path().join("corpus.txt");
        fs::write(&corpus_path, "abc".repeat(400)).unwrap();
        let out = dir.path().join("out");
        let output = run(&[
            "train-lm",
            config_path.to_str().unwrap(),
            corpus_path.to_str().unwrap(),
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&output), 0, "{}", stderr_text(&output));
        let ckpt = out.join("model.sqfm");
        (dir, ckpt)
    })
}

fn write_quick_lm(dir: &Path) -> (PathBuf, PathBuf) {
    let config_path = dir.join("run.cfg");
    fs::write(&config_path, LM_CONFIG).unwrap();
    let corpus_path = dir.join("corpus.txt");
    fs::write(&corpus_path, "abcabc".repeat(40)).unwrap();
    (config_path, corpus_path)
}

#[test]
fn train_lm_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (config, corpus) = write_quick_lm(dir.path());
    let out = dir.path().join("out");
    let output = run(&[
        "train-lm",
        config.to_str().unwrap(),
        corpus.to_str().unwrap(),
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "{}", stderr_text(&output));

    let loss_csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    let mut lines = loss_csv.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    assert_eq!(lines.count(), 80);

    let vocab = fs::read_to_string(out.join("vocab.txt")).unwrap();
    assert_eq!(vocab, "a\nb\nc\n");

    let (_, config) = load_checkpoint(&out.join("model.sqfm")).unwrap();
    assert_eq!(config.d, 16);
}

#[test]
fn train_lm_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (config, corpus) = write_quick_lm(dir.path());
    let out = dir.path().join("out");
    for _ in 0..2 {
        let output = run(&[
            "train-lm",
            config.to_str().unwrap(),
            corpus.to_str().unwrap(),
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&output), 0);
    }
    let first_loss = fs::read(out.join("loss.csv")).unwrap();
    let first_ckpt = fs::read(out.join("model.sqfm")).unwrap();
    let output = run(&[
        "train-lm",
        config.to_str().unwrap(),
        corpus.to_str().unwrap(),
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0);
    assert_eq!(fs::read(out.join("loss.csv")).unwrap(), first_loss);
    assert_eq!(fs::read(out.join("model.sqfm")).unwrap(), first_ckpt);
}

#[test]
fn seed_env_var_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (config, corpus) = write_quick_lm(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let output = run(&[
        "train-lm",
        config.to_str().unwrap(),
        corpus.to_str().unwrap(),
        out_a.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0);
    let output = run_with_seed_env(
        &[
            "train-lm",
            config.to_str().unwrap(),
            corpus.to_str().unwrap(),
            out_b.to_str().unwrap(),
        ],
        "123",
    );
    assert_eq!(code(&output), 0);
    assert_ne!(
        fs::read(out_a.join("model.sqfm")).unwrap(),
        fs::read(out_b.join("model.sqfm")).unwrap()
    );
}

#[test]
fn zero_learning_rate_gives_a_flat_trace() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.cfg");
    fs::write(&config_path, format!("{LM_CONFIG}lr = 0\n")).unwrap();
    // duplicate key: the base config already sets lr, so rewrite instead
    fs::write(
        &config_path,
        LM_CONFIG.replace("lr = 3e-3", "lr = 0").as_bytes(),
    )
    .unwrap();
    let corpus_path = dir.path().join("corpus.txt");
    fs::write(&corpus_path, "abcabc".repeat(40)).unwrap();
    let out = dir.path().join("out");
    let output = run(&[
        "train-lm",
        config_path.to_str().unwrap(),
        corpus_path.to_str().unwrap(),
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "{}", stderr_text(&output));
    let loss_csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    let values: Vec<&str> = loss_csv
        .lines()
        .skip(1)
        .map(|l| l.split_once(',').unwrap().1)
        .collect();
    assert!(values.windows(2).all(|w| w[0] == w[1]), "trace not flat");
}

#[test]
fn missing_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.cfg");
    fs::write(&config_path, "d_model = 16\nn_heads = 2\n").unwrap();
    let corpus_path = dir.path().join("corpus.txt");
    fs::write(&corpus_path, "abc").unwrap();
    let output = run(&[
        "train-lm",
        config_path.to_str().unwrap(),
        corpus_path.to_str().unwrap(),
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 2);
    assert!(stderr_text(&output).contains("n_layers"));
}

#[test]
fn empty_corpus_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = write_quick_lm(dir.path());
    let corpus = dir.path().join("empty.txt");
    fs::write(&corpus, "").unwrap();
    let output = run(&[
        "train-lm",
        config.to_str().unwrap(),
        corpus.to_str().unwrap(),
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 1);
    assert!(stderr_text(&output).contains("empty"));
}

#[test]
fn generate_zero_steps_echoes_the_prompt() {
    let (_dir, ckpt) = trained_lm();
    let output = run(&["generate", ckpt.to_str().unwrap(), "abca", "0"]);
    assert_eq!(code(&output), 0, "{}", stderr_text(&output));
    assert_eq!(String::from_utf8_lossy(&output.stdout), "abca\n");
}

#[test]
fn generate_is_deterministic_per_seed() {
    let (_dir, ckpt) = trained_lm();
    let args = [
        "generate",
        ckpt.to_str().unwrap(),
        "ab",
        "30",
        "--temperature",
        "0.8",
        "--seed",
        "7",
    ];
    let first = run(&args);
    let second = run(&args);
    assert_eq!(code(&first), 0);
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn trained_model_continues_the_pattern() {
    let (_dir, ckpt) = trained_lm();
    let output = run(&["generate", ckpt.to_str().unwrap(), "ab", "100"]);
    assert_eq!(code(&output), 0, "{}", stderr_text(&output));
    let text = String::from_utf8_lossy(&output.stdout);
    let text = text.trim_end();
    // next-char accuracy against the abc... continuation
    let expected = "abcabc".chars().cycle();
    let correct = text
        .chars()
        .zip(expected)
        .filter(|(a, b)| a == b)
        .count();
    assert!(
        correct * 100 >= text.len() * 95,
        "only {correct}/{} match: {text}",
        text.len()
    );
}

#[test]
fn unknown_prompt_character_is_reported() {
    let (_dir, ckpt) = trained_lm();
    let output = run(&["generate", ckpt.to_str().unwrap(), "abz", "5"]);
    assert_eq!(code(&output), 1);
    assert!(stderr_text(&output).contains('z'));
}

#[test]
fn train_cls_synthetic_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.cfg");
    fs::write(
        &config_path,
        "d_model = 16\nn_heads = 2\nn_layers = 1\nn_max = 32\nhead = cls-token\n\
         patch_h = 2\npatch_w = 2\nsteps = 150\nlr = 1e-3\nseed = 5\neval_every = 75\n",
    )
    .unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    let output = run(&[
        "train-cls",
        config_path.to_str().unwrap(),
        data.to_str().unwrap(),
        out.to_str().unwrap(),
        "--synthetic",
    ]);
    assert_eq!(code(&output), 0, "{}", stderr_text(&output));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,test_accuracy\n"));
    assert!(metrics.lines().count() >= 2);
    let (_, config) = load_checkpoint(&out.join("model.sqfm")).unwrap();
    assert_eq!(config.output_size(), 2);
}

#[test]
fn corrupt_pgm_is_an_input_error_with_filename() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.cfg");
    fs::write(
        &config_path,
        "d_model = 8\nn_heads = 2\nn_layers = 1\nn_max = 32\nhead = cls-token\n\
         patch_h = 2\npatch_w = 2\nsteps = 5\n",
    )
    .unwrap();
    for split in ["train", "test"] {
        for class in ["a", "b"] {
            fs::create_dir_all(dir.path().join("data").join(split).join(class)).unwrap();
        }
    }
    let bad = dir.path().join("data/train/a/bad.pgm");
    fs::write(&bad, b"NOT A PGM").unwrap();
    fs::write(dir.path().join("data/train/b/ok.pgm"), b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
    fs::write(dir.path().join("data/test/a/ok.pgm"), b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
    fs::write(dir.path().join("data/test/b/ok.pgm"), b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
    let output = run(&[
        "train-cls",
        config_path.to_str().unwrap(),
        dir.path().join("data").to_str().unwrap(),
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 1);
    assert!(stderr_text(&output).contains("bad.pgm"));
}

#[test]
fn gradcheck_small_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.cfg");
    fs::write(
        &config_path,
        "d_model = 8\nn_heads = 2\nn_layers = 2\nn_max = 16\nhead = lm\nseed = 11\n",
    )
    .unwrap();
    let output = run(&["gradcheck", config_path.to_str().unwrap()]);
    assert_eq!(code(&output), 0, "{}", stderr_text(&output));
    let table = String::from_utf8_lossy(&output.stdout);
    assert!(table.contains("PASS"), "{table}");
    assert!(table.contains("block0.head0.u_q"));
}

#[test]
fn gradcheck_zero_tolerance_fails() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.cfg");
    fs::write(
        &config_path,
        "d_model = 4\nn_heads = 1\nn_layers = 1\nn_max = 8\nhead = lm\n",
    )
    .unwrap();
    let output = run(&["gradcheck", config_path.to_str().unwrap(), "--tol", "0"]);
    assert_eq!(code(&output), 1);
}

#[test]
fn gradcheck_guards_oversized_models() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.cfg");
    fs::write(
        &config_path,
        "d_model = 128\nn_heads = 4\nn_layers = 4\nn_max = 64\nhead = lm\n",
    )
    .unwrap();
    let output = run(&["gradcheck", config_path.to_str().unwrap()]);
    assert_eq!(code(&output), 2);
    assert!(stderr_text(&output).contains("guard"));
}

#[test]
fn inspect_attention_dumps_match_structure() {
    let dir = tempfile::tempdir().unwrap();
    // bos off so a single character really is a single column
    let config_path = dir.path().join("run.cfg");
    fs::write(
        &config_path,
        "d_model = 8\nn_heads = 2\nn_layers = 2\nn_max = 16\nhead = lm\n\
         bos = false\nsteps = 10\nseq_len = 4\nseed = 3\n",
    )
    .unwrap();
    let corpus = dir.path().join("corpus.txt");
    fs::write(&corpus, "abcabcabcabc").unwrap();
    let out = dir.path().join("out");
    let output = run(&[
        "train-lm",
        config_path.to_str().unwrap(),
        corpus.to_str().unwrap(),
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "{}", stderr_text(&output));
    let ckpt = out.join("model.sqfm");

    // single-token input: every dump is the 1x1 matrix [1]
    let dumps = dir.path().join("dumps1");
    let output = run(&[
        "inspect-attention",
        ckpt.to_str().unwrap(),
        "a",
        dumps.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "{}", stderr_text(&output));
    let mut files: Vec<_> = fs::read_dir(&dumps)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert_eq!(files.len(), 4, "layers x heads");
    for file in &files {
        let mut reader = BufReader::new(fs::File::open(file).unwrap());
        let (_, _, a) = read_attention_dump(&mut reader).unwrap();
        assert_eq!(a.shape(), (1, 1));
        assert_eq!(a.get(0, 0), 1.0);
    }

    // longer input: strictly zero below the diagonal, columns sum to one,
    // and the dump round-trips to the in-process matrices
    let dumps = dir.path().join("dumps4");
    let output = run(&[
        "inspect-attention",
        ckpt.to_str().unwrap(),
        "abca",
        dumps.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0);
    let (params, config) = load_checkpoint(&ckpt).unwrap();
    let vocab = match &config.task {
        seqformer_core::model::TaskConfig::Lm { vocab, .. } => vocab.clone(),
        _ => unreachable!(),
    };
    let table = match &params.embed {
        seqformer_core::model::EmbedParams::Tokens(t) => t.clone(),
        _ => unreachable!(),
    };
    let ids = vocab.encode(b"abca").unwrap();
    let x0 = seqformer_core::embed::embed_tokens(&ids, &table).unwrap();
    let (_, per_layer) =
        seqformer_core::model::forward_with_attention(&x0, &params, &config).unwrap();
    for layer in 0..2 {
        for head in 0..2 {
            let path = dumps.join(format!("attn_l{layer}_h{head}.txt"));
            let mut reader = BufReader::new(fs::File::open(&path).unwrap());
            let (l, h, a) = read_attention_dump(&mut reader).unwrap();
            assert_eq!((l, h), (layer, head));
            assert_eq!(a.shape(), (4, 4));
            for key in 0..4 {
                for query in 0..4 {
                    if key > query {
                        assert_eq!(a.get(key, query), 0.0);
                    }
                }
            }
            for query in 0..4 {
                let sum: f64 = (0..4).map(|key| a.get(key, query)).sum();
                assert!((sum - 1.0).abs() <= 1e-9);
            }
            let reference = &per_layer[layer][head];
            assert!(reference.sub(&a).unwrap().max_abs() <= 1e-12);
        }
    }
}

#[test]
fn selftest_exits_zero() {
    let output = run(&["selftest"]);
    assert_eq!(code(&output), 0, "{}", stderr_text(&output));
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.lines().count() >= 10);
    assert!(!text.contains("FAIL"));
}

#[test]
fn usage_errors_exit_2() {
    let output = run(&["definitely-not-a-subcommand"]);
    assert_eq!(code(&output), 2);
    let output = run(&["generate"]);
    assert_eq!(code(&output), 2);
}
