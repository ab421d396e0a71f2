"""Smoke test for the installed `fdvae` extension module.

    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/fdvae-*.whl
    python python/smoke_test.py
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import fdvae


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    return bool(cond)


def main():
    results = []

    total, per_dim = fdvae.kl_divergence([1.0, 1.0], [0.0, 0.0])
    results.append(check(total == 1.0 and per_dim == [0.5, 0.5], "KL at mu=1, logvar=0 is 0.5 per dim"))

    bp = fdvae.bleu("a b c d e".split(), "a b c".split())
    results.append(check(abs(bp - math.exp(1 - 5 / 3)) < 1e-12, "BLEU brevity penalty case"))

    mi = fdvae.mutual_information([[10.0], [-10.0]], [[0.0], [0.0]], 200, 4)
    results.append(check(abs(mi - math.log(2)) < 0.05 * math.log(2), f"MI of separated posteriors {mi:.4f}"))

    spec = json.dumps({"n_train": 200, "n_dev": 20, "n_test": 20})
    vocab, splits = fdvae.synthetic_corpus(spec)
    print("     e.g. " + " ".join(vocab.decode(splits["train"][0])))

    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "run"
        config = """
[corpus.synthetic]
n_train = 200
n_dev = 20
n_test = 20
[train]
embed_dim = 16
hidden_dim = 32
latent_dim = 4
epochs = 3
lr = 0.01
alpha = 0.1
validation_samples = 0
"""
        log = fdvae.train(str(out), config)
        recon = [e["reconstruction"] for e in log]
        results.append(check(len(log) == 3 and recon[-1] < recon[0], f"training lowers reconstruction {recon}"))

        model = fdvae.Model.load(str(out / "final.ckpt"))
        report = model.evaluate(splits["test"], 1, json.dumps({"nll_samples": 10}))
        print("     " + ", ".join(f"{k} {report[k]:.4g}" for k in ("nll", "ppl", "kl", "mi", "au", "bleu")))
        results.append(check(math.isfinite(report["nll"]) and report["ppl"] >= 1.0, "evaluation report is finite"))

        z = [0.0] * model.latent_dim
        words = vocab.decode(model.decode_greedy(z, 20))
        results.append(check(len(words) <= 20, "greedy decode: " + " ".join(words)))

    passed, checks = fdvae.self_check()
    results.append(check(passed, f"self-check ({len(checks)} checks)"))

    failed = results.count(False)
    print(f"{len(results) - failed}/{len(results)} passed")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
