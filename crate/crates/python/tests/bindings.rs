use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

/// Runs `code` with the bindings importable as `fdvae`; Python assertion
/// failures surface as test failures.
fn run(code: &str) {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "fdvae").unwrap();
        fdvae_py::fdvae_module(&m).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("fdvae", m).unwrap();
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.display(py);
            panic!("python error: {e}");
        }
    });
}

#[test]
fn kl_and_bleu() {
    run(r#"
import math
total, per_dim = fdvae.kl_divergence([1.0, 1.0], [0.0, 0.0])
assert total == 1.0 and per_dim == [0.5, 0.5]
assert fdvae.kl_divergence([0.0], [0.0])[0] == 0.0
try:
    fdvae.kl_divergence([0.0], [])
    raise AssertionError("length mismatch accepted")
except ValueError:
    pass

assert fdvae.bleu("a b c".split(), "a b c".split()) == 1.0
got = fdvae.bleu("a b c d e".split(), "a b c".split())
assert abs(got - math.exp(1 - 5 / 3)) < 1e-12
try:
    fdvae.bleu([], ["a"])
    raise AssertionError("empty reference accepted")
except ValueError:
    pass
s = fdvae.corpus_bleu([["a", "b"]], [["a", "b"]])
assert s["score"] == 1.0
"#);
}

#[test]
fn latent_metrics() {
    run(r#"
import math
count, variances = fdvae.active_units([[1.0, 0.5], [-1.0, 0.5]])
assert count == 1 and abs(variances[0] - 2.0) < 1e-12 and variances[1] == 0.0
mi = fdvae.mutual_information([[0.0, 0.0]] * 5, [[0.0, 0.0]] * 5, 10, 1)
assert abs(mi) < 1e-12
mi = fdvae.mutual_information([[10.0], [-10.0]], [[0.0], [0.0]], 200, 4)
assert abs(mi - math.log(2)) / math.log(2) < 0.05
d, e = fdvae.sample_masks(50, 0.7, 3)
assert all(a + b == 1.0 for a, b in zip(d, e))
assert fdvae.sample_masks(50, 0.7, 3) == (d, e)
"#);
}

#[test]
fn model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"garbage").unwrap();
    run(&format!(
        r#"
m = fdvae.Model(8, embed_dim=4, hidden_dim=6, latent_dim=3, init_scale=0.5, seed=2)
assert m.latent_dim == 3 and m.vocab_size == 8
assert "encoder.embed" in m.parameter_names()
shape, values = m.parameter("encoder.embed")
assert shape == [4, 8] and len(values) == 32
mu, logvar = m.encode([4, 5, 6])
assert len(mu) == 3 and m.encode([4, 5, 6]) == (mu, logvar)
ll = m.log_likelihood(mu, [4, 5, 6])
assert ll < 0
out = m.decode_greedy(mu, 7)
assert len(out) <= 7 and all(0 <= t < 8 for t in out)
m.save({path:?}, "h")
again = fdvae.Model.load({path:?})
assert again.encode([4, 5, 6]) == (mu, logvar)
assert again.log_likelihood(mu, [4, 5, 6]) == ll
try:
    fdvae.Model.load({bad:?})
    raise AssertionError("garbage checkpoint loaded")
except ValueError:
    pass
try:
    m.encode([])
    raise AssertionError("empty sentence encoded")
except ValueError:
    pass
try:
    fdvae.Model(0)
    raise AssertionError("empty vocabulary accepted")
except ValueError:
    pass
before = m.parameter("encoder.embed")
m.reset_decoder(5)
assert m.parameter("encoder.embed") == before
"#
    ));
}

#[test]
fn corpus_evaluation_and_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run(&format!(
        r#"
import json
spec = json.dumps({{"n_train": 40, "n_dev": 6, "n_test": 6}})
vocab, splits = fdvae.synthetic_corpus(spec)
assert len(splits["train"]) == 40 and len(splits["test"]) == 6
words = vocab.decode(splits["train"][0])
assert vocab.encode(words) == splits["train"][0]
m = fdvae.Model(len(vocab), embed_dim=8, hidden_dim=8, latent_dim=2, seed=1)
cfg = json.dumps({{"nll_samples": 3, "mi_samples": 2}})
r = m.evaluate(splits["test"], 1, cfg)
for key in ("nll", "ppl", "mi", "au", "bleu", "kl"):
    assert key in r, key
assert r["n_sentences"] == 6
assert m.evaluate(splits["test"], 1, cfg) == r

config = """
[corpus.synthetic]
n_train = 40
n_dev = 6
n_test = 6
[train]
embed_dim = 8
hidden_dim = 8
latent_dim = 2
epochs = 2
validation_samples = 0
"""
log = fdvae.train({out:?}, config)
assert [e["epoch"] for e in log] == [1, 2]
trained = fdvae.Model.load({out:?} + "/final.ckpt")
assert trained.latent_dim == 2
v = fdvae.Vocabulary.load({out:?} + "/vocab.txt")
assert v.hash() == vocab.hash()
try:
    fdvae.train({out:?}, "[train]\nbogus = 1\n")
    raise AssertionError("unknown field accepted")
except ValueError:
    pass
"#
    ));
}

#[test]
fn self_check_passes() {
    run(r#"
passed, checks = fdvae.self_check()
assert passed, checks
assert len(checks) >= 3
assert fdvae.__version__
"#);
}
