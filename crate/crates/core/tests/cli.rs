use std::fs;
use std::path::{Path, PathBuf};

use fdvae::checkpoint;
use fdvae::cli::{interpolate, main_with_args, RunConfig, RunManifest};
use fdvae::model::VaeModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

const TINY: &str = r#"
[corpus.synthetic]
n_train = 60
n_dev = 10
n_test = 12

[train]
embed_dim = 8
hidden_dim = 12
latent_dim = 3
batch_size = 16
epochs = 2
validation_samples = 0
seed = 5

[eval]
nll_samples = 4
mi_samples = 2
max_decode_len = 15
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> i32 {
    let mut all = vec!["fdvae"];
    all.extend_from_slice(args);
    main_with_args(all)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

fn train_tiny(root: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = write_config(root, TINY);
    let out = root.join(name);
    let mut args = vec!["train", "--config", s(&cfg), "--out-dir", s(&out)];
    args.extend_from_slice(extra);
    assert_eq!(run(&args), 0);
    out
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn param_values(m: &VaeModel) -> Vec<Vec<u64>> {
    m.params.iter().map(|p| p.value.data().iter().map(|v| v.to_bits()).collect()).collect()
}

#[test]
fn train_writes_artifacts_and_manifest() {
    let root = tempfile::tempdir().unwrap();
    let out = train_tiny(root.path(), "a", &[]);
    for f in ["final.ckpt", "best.ckpt", "vocab.txt", "train_log.ndjson", "manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let m = manifest(&out);
    assert_eq!(m.command, "train");
    assert_eq!(m.status, "ok");
    assert_eq!(m.seed, 5);
    for key in ["train", "dev", "test", "vocab"] {
        assert!(m.hashes.contains_key(key));
    }
    for (name, hash) in &m.artifacts {
        assert_eq!(&sha(&out.join(name)), hash, "{name}");
    }
    assert_eq!(fs::read_to_string(out.join("train_log.ndjson")).unwrap().lines().count(), 2);
}

#[test]
fn repeated_training_is_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let a = train_tiny(root.path(), "a", &[]);
    let b = train_tiny(root.path(), "b", &[]);
    for f in ["final.ckpt", "best.ckpt", "vocab.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(manifest(&a).artifacts, manifest(&b).artifacts);

    let c = train_tiny(root.path(), "c", &["--seed", "6"]);
    assert_ne!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(c.join("final.ckpt")).unwrap());
}

#[test]
fn zero_learning_rate_keeps_initialization() {
    let root = tempfile::tempdir().unwrap();
    let out = train_tiny(root.path(), "z", &["--epochs", "1", "--lr", "0"]);
    let (trained, header) = checkpoint::load(&out.join("final.ckpt")).unwrap();
    let cfg: RunConfig = serde_json::from_value(header.meta).unwrap();
    assert_eq!(cfg.train.lr, 0.0);
    assert_eq!(cfg.train.epochs, 1);
    let init = VaeModel::new(header.model, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed));
    let init = init.unwrap();
    assert_eq!(param_values(&trained), param_values(&init));
}

#[test]
fn eval_is_repeatable_and_read_only() {
    let root = tempfile::tempdir().unwrap();
    let out = train_tiny(root.path(), "a", &[]);
    let ckpt = out.join("final.ckpt");
    let before = sha(&ckpt);
    let e1 = root.path().join("e1");
    let e2 = root.path().join("e2");
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt), "--out-dir", s(&e1)]), 0);
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt), "--out-dir", s(&e2)]), 0);
    assert_eq!(sha(&ckpt), before);
    assert_eq!(fs::read(e1.join("report.json")).unwrap(), fs::read(e2.join("report.json")).unwrap());
    let m = manifest(&e1);
    assert_eq!(m.extra["checkpoint_sha256"], before);

    let report: serde_json::Value = serde_json::from_slice(&fs::read(e1.join("report.json")).unwrap()).unwrap();
    for key in ["nll", "ppl", "kl", "mi", "au", "bleu"] {
        let v = report[key].as_f64().unwrap_or_else(|| panic!("{key} missing in {report}"));
        assert!(v.is_finite(), "{key}");
    }

    let e3 = root.path().join("e3");
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt), "--split", "dev", "--out-dir", s(&e3)]), 0);
    assert_ne!(fs::read(e1.join("report.json")).unwrap(), fs::read(e3.join("report.json")).unwrap());
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt), "--split", "bogus"]), 2);
}

fn write_text_corpus(dir: &Path, with_test: bool) {
    fs::create_dir_all(dir).unwrap();
    let lines = ["the cat sat", "a dog ran far", "the dog sat", "a cat ran", "the bird flew far"];
    fs::write(dir.join("train.txt"), lines.join("\n")).unwrap();
    fs::write(dir.join("dev.txt"), "the cat ran\nthe bird sat\n").unwrap();
    if with_test {
        fs::write(dir.join("test.txt"), "a bird sat\n").unwrap();
    }
}

#[test]
fn text_corpus_and_empty_split() {
    let root = tempfile::tempdir().unwrap();
    let corpus = root.path().join("corpus");
    write_text_corpus(&corpus, false);
    let cfg = write_config(root.path(), TINY);
    let out = root.path().join("t");
    assert_eq!(
        run(&["train", "--config", s(&cfg), "--corpus", s(&corpus), "--out-dir", s(&out), "--epochs", "1"]),
        0
    );
    let ckpt = out.join("final.ckpt");
    // no test.txt: the default split is empty
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt)]), 3);
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt), "--split", "dev"]), 0);
}

#[test]
fn vocabulary_mismatch_is_refused() {
    let root = tempfile::tempdir().unwrap();
    let corpus = root.path().join("corpus");
    write_text_corpus(&corpus, true);
    let out = train_tiny(root.path(), "a", &[]);
    let ckpt = out.join("final.ckpt");
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&corpus)]), 3);
    assert_eq!(run(&["sample", "--checkpoint", s(&ckpt), "--corpus", s(&corpus)]), 3);
}

#[test]
fn configuration_errors_exit_2() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("x");
    let bad = write_config(root.path(), "[train]\nepochs = 1\nlearning_rate = 0.1\n");
    assert_eq!(run(&["train", "--config", s(&bad), "--out-dir", s(&out)]), 2);
    let bad = write_config(root.path(), "[train]\nkeep_prob = 1.5\n");
    assert_eq!(run(&["train", "--config", s(&bad), "--out-dir", s(&out)]), 2);
    let cfg = write_config(root.path(), TINY);
    assert_eq!(run(&["train", "--config", s(&cfg), "--out-dir", s(&out), "--lr=-1"]), 2);
    assert_eq!(run(&["train", "--config", s(&cfg), "--out-dir", s(&out), "--alpha", "nan"]), 2);
    assert_eq!(run(&["train", "--bogus-flag"]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert!(!out.join("final.ckpt").exists());
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn missing_files_exit_3() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("nope.ckpt");
    assert_eq!(run(&["eval", "--checkpoint", s(&missing)]), 3);
    let garbage = root.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint at all").unwrap();
    assert_eq!(run(&["interpolate", "--checkpoint", s(&garbage)]), 3);
    let cfg = write_config(root.path(), TINY);
    let out = root.path().join("o");
    let corpus = root.path().join("empty_corpus");
    fs::create_dir_all(&corpus).unwrap();
    assert_eq!(
        run(&["train", "--config", s(&cfg), "--corpus", s(&corpus), "--out-dir", s(&out)]),
        3
    );
}

#[test]
fn divergence_exits_4_with_manifest() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), TINY);
    let out = root.path().join("d");
    assert_eq!(run(&["train", "--config", s(&cfg), "--out-dir", s(&out), "--lr", "1000"]), 4);
    let m = manifest(&out);
    assert_eq!(m.status, "diverged");
    assert!(!m.extra["diverged"].is_null());
}

#[test]
fn sweep_tables() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), TINY);
    let one = root.path().join("s1");
    assert_eq!(
        run(&["sweep", "--config", s(&cfg), "--alphas", "0", "--epochs", "1", "--out-dir", s(&one)]),
        0
    );
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(one.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["alpha"], 0.0);
    assert!(rows[0]["report"].is_object());
    assert!(one.join("alpha_0/final.ckpt").exists());

    let a = root.path().join("sa");
    let b = root.path().join("sb");
    for dir in [&a, &b] {
        assert_eq!(
            run(&["sweep", "--config", s(&cfg), "--alphas", "0,0.5", "--epochs", "1", "--out-dir", s(dir)]),
            0
        );
    }
    let table = fs::read_to_string(a.join("sweep.txt")).unwrap();
    assert_eq!(table, fs::read_to_string(b.join("sweep.txt")).unwrap());
    assert_eq!(table.lines().count(), 3);
    assert_eq!(manifest(&a).status, "ok");
    assert_eq!(run(&["sweep", "--config", s(&cfg), "--alphas=-1", "--out-dir", s(&a)]), 2);
}

#[test]
fn interpolation_endpoints_and_repeatability() {
    let root = tempfile::tempdir().unwrap();
    let out = train_tiny(root.path(), "a", &[]);
    let ckpt = out.join("final.ckpt");
    let (model, _) = checkpoint::load(&ckpt).unwrap();

    let lines = interpolate(&model, 2, 15, 11).unwrap();
    assert_eq!(lines.len(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z1: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
    let z2: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
    assert_eq!(lines[0], model.decode_greedy(&z1, 15).unwrap());
    assert_eq!(lines[1], model.decode_greedy(&z2, 15).unwrap());
    assert!(interpolate(&model, 1, 15, 11).is_err());

    let i1 = root.path().join("i1");
    let i2 = root.path().join("i2");
    for dir in [&i1, &i2] {
        assert_eq!(
            run(&["interpolate", "--checkpoint", s(&ckpt), "--steps", "4", "--seed", "3", "--out-dir", s(dir)]),
            0
        );
    }
    let text = fs::read_to_string(i1.join("interpolation.txt")).unwrap();
    assert_eq!(text, fs::read_to_string(i2.join("interpolation.txt")).unwrap());
    assert_eq!(text.lines().count(), 4);
    assert_eq!(manifest(&i1).command, "interpolate");
    assert_eq!(run(&["interpolate", "--checkpoint", s(&ckpt), "--steps", "1"]), 2);
}

#[test]
fn sampling_writes_requested_count() {
    let root = tempfile::tempdir().unwrap();
    let out = train_tiny(root.path(), "a", &[]);
    let ckpt = out.join("final.ckpt");
    let dir = root.path().join("samples");
    assert_eq!(
        run(&["sample", "--checkpoint", s(&ckpt), "--count", "7", "--out-dir", s(&dir)]),
        0
    );
    let text = fs::read_to_string(dir.join("samples.txt")).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(!text.contains("<s>") && !text.contains("<pad>"));
}

#[test]
fn selfcheck_exit_codes() {
    assert_eq!(run(&["selfcheck"]), 0);
    assert_eq!(run(&["selfcheck", "--inject-fault"]), 5);
}
