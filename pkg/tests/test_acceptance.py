"""Acceptance checks, one test per criterion.

Each test prints ``PASS``/``FAIL`` with the measured value before asserting,
and the lines are repeated in the pytest terminal summary. The training
criteria (6 to 9) share one seeded corpus and cache trained models, so the
whole module takes tens of minutes on a single CPU.
"""

import json
import math
import time

import numpy as np
import pytest
from click.testing import CliRunner

from memorykt import autodiff as ad
from memorykt.cli import cli
from memorykt.data import split_train_test
from memorykt.forgetting import Forgetting, score_change
from memorykt.metrics import auc, case_study, pearson_r
from memorykt.model import ModelConfig
from memorykt.synthetic import generate
from memorykt.training import (TrainConfig, build_windows, check_model_gradients,
                               evaluate_batch, train)

from conftest import ACCEPTANCE

pytestmark = pytest.mark.slow

K = 20
CORPUS_SEED = 7
EPOCHS = 60
PATIENCE = 10


def verdict(n, name, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {name} ({detail})"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared synthetic corpus and trained models
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus():
    d, truth = generate(400, K, 60, seed=CORPUS_SEED)
    train_all, test = d.subset(range(300)), d.subset(range(300, 400))
    tr, va = split_train_test(train_all, 0.2, seed=0)
    fg = Forgetting.fit(tr)
    return {"train": tr, "valid": va, "test": test, "forgetting": fg,
            "test_windows": build_windows(test, 50, fg)}


_models: dict = {}


def fitted(corpus, seed=0, use_vae=True, use_forget=True, lambda_kld=1.0):
    key = (seed, use_vae, use_forget, lambda_kld)
    if key not in _models:
        mc = ModelConfig(K, use_vae=use_vae, use_forget=use_forget)
        tc = TrainConfig(lambda_rec=0.5, lambda_kld=lambda_kld, max_epochs=EPOCHS,
                         patience=PATIENCE, seed=seed)
        t0 = time.perf_counter()
        store, report = train(corpus["train"], corpus["valid"], mc, tc, corpus["forgetting"])
        test = evaluate_batch(store, mc, corpus["test_windows"])
        _models[key] = {"store": store, "cfg": mc, "report": report, "test": test,
                        "seconds": time.perf_counter() - t0}
    return _models[key]


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def test_1_gradient_check():
    t0 = time.perf_counter()
    report = check_model_gradients(seed=0, eps=1e-5, tol=1e-4)
    secs = time.perf_counter() - t0
    worst = max(report.errors.values())
    verdict(1, "full-model gradient check", report.passed and secs < 30,
            f"{len(report.errors)} params, max rel err {worst:.2e}, {secs:.1f}s")


def test_2_kl_oracle():
    rng = np.random.default_rng(2)
    n = 1_000_000
    misses, worst = 0, 0.0
    for _ in range(100):
        mq, mp = rng.normal(0, 1.5, 2)
        sq, sp = rng.uniform(0.2, 3.0, 2)
        closed = ad.gaussian_kl(*(np.array([[v]]) for v in (mq, sq, mp, sp)), [1]).item()
        z = mq + sq * rng.standard_normal(n)
        diff = (np.log(sp / sq) - 0.5 * ((z - mq) / sq) ** 2 + 0.5 * ((z - mp) / sp) ** 2)
        se = diff.std(ddof=1) / math.sqrt(n)
        gap = abs(closed - diff.mean()) / se
        worst = max(worst, gap)
        misses += gap > 3 or closed < 0
    mu = rng.normal(size=(50, 8))
    sig = rng.uniform(0.05, 5.0, (50, 8))
    zero = ad.gaussian_kl(mu, sig, mu, sig, np.ones(50)).item()
    others = [ad.gaussian_kl(rng.normal(size=(1, 4)), rng.uniform(0.1, 3, (1, 4)),
                             rng.normal(size=(1, 4)), rng.uniform(0.1, 3, (1, 4)), [1]).item()
              for _ in range(1000)]
    ok = misses == 0 and abs(zero) < 1e-9 and min(others) >= 0
    verdict(2, "KL closed form vs Monte Carlo", ok,
            f"worst |gap| {worst:.2f} SE, KL(q||q) {zero:.1e}, min KL {min(others):.2e}")


def pairwise_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    cmp = pos[:, None] - neg[None, :]
    return ((cmp > 0).sum() + 0.5 * (cmp == 0).sum()) / (pos.size * neg.size)


def test_3_auc_oracle():
    rng = np.random.default_rng(3)
    worst, sets = 0.0, 0
    while sets < 1000:
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            continue
        levels = int(rng.integers(2, 30))  # coarse grid forces ties
        scores = rng.integers(0, levels, n) / levels
        worst = max(worst, abs(auc(scores, labels) - pairwise_auc(scores, labels)))
        sets += 1
    verdict(3, "rank AUC vs pairwise win fraction", worst <= 1e-12,
            f"{sets} sets, max diff {worst:.1e}")


def test_4_forgetting_properties():
    rng = np.random.default_rng(4)
    failures = []
    for i in range(10_000):
        r = int(rng.integers(2))
        d = float(rng.uniform(0.01, 0.9))
        dd = float(rng.uniform(0.005, 0.09))
        dt = float(rng.uniform(0, 700)) if rng.random() < 0.8 else float(rng.uniform(0, 5e3))
        step = float(rng.uniform(0.5, 50))
        prev = [None, 0, 1][int(rng.integers(3))]
        T = int(rng.integers(1, 300))
        ds = score_change(r, d, dt, prev, T)
        checks = {
            "sign": ds != 0 and (ds > 0) == (r == 1),
            "normalization": math.isclose(score_change(r, d, dt, prev, 2 * T) * 2, ds,
                                          rel_tol=1e-12),
            "difficulty": (score_change(1, d + dd, dt, prev, T) > score_change(1, d, dt, prev, T)
                           and abs(score_change(0, d + dd, dt, prev, T))
                           < abs(score_change(0, d, dt, prev, T))),
            "penalty": abs(score_change(0, d, dt, 1, T)) > abs(score_change(0, d, dt, 0, T)),
        }
        if dt + step <= 720:  # the time weight saturates beyond the cap
            checks["time"] = (score_change(1, d, dt + step, prev, T) > score_change(1, d, dt, prev, T)
                              and abs(score_change(0, d, dt + step, prev, T))
                              < abs(score_change(0, d, dt, prev, T)))
        else:
            checks["time"] = (score_change(1, d, dt + step, prev, T) >= score_change(1, d, dt, prev, T)
                              and abs(score_change(0, d, dt + step, prev, T))
                              <= abs(score_change(0, d, dt, prev, T)))
        failures += [(i, k) for k, ok in checks.items() if not ok]
    verdict(4, "forgetting rule properties", not failures,
            f"10000 inputs, {len(failures)} violations")


def test_5_forgetting_tracks_half_life():
    t0 = time.perf_counter()
    d, truth = generate(500, K, 60, seed=CORPUS_SEED)
    fg = Forgetting.fit(d)
    r = pearson_r(truth.tau, [fg.final_score(s) for s in d.sequences])
    secs = time.perf_counter() - t0
    verdict(5, "r(half-life, final forgetting score)", r > 0.5 and secs < 60,
            f"r = {r:.3f}, {secs:.1f}s")


def test_6_end_to_end(corpus):
    m = fitted(corpus)
    a = m["test"]["auc"]
    verdict(6, "test AUC after training", a >= 0.65 and m["seconds"] < 600,
            f"AUC {a:.4f}, {m['report'].best_epoch}/{len(m['report'].epochs)} epochs, "
            f"{m['seconds']:.0f}s")


def test_7_ablation_direction(corpus):
    res = {name: np.mean([fitted(corpus, seed, **flags)["test"]["auc"] for seed in range(3)])
           for name, flags in (("full", {}), ("no_forget", {"use_forget": False}),
                               ("no_vae", {"use_vae": False}))}
    ok = res["full"] >= res["no_forget"] and res["full"] >= res["no_vae"]
    verdict(7, "ablation direction over 3 seeds", ok,
            ", ".join(f"{k} {v:.4f}" for k, v in res.items()))


def test_8_case_study_direction(corpus):
    m = fitted(corpus)
    study = case_study(m["store"], m["cfg"], corpus["test"], corpus["forgetting"],
                       n_students=100, seed=0)
    ok = study.r_quality_forget > 0 and study.r_quality_accuracy > 0
    verdict(8, "case study correlations", ok,
            f"r(quality, forget) {study.r_quality_forget:.3f}, "
            f"r(quality, correct rate) {study.r_quality_accuracy:.3f}")


def test_9_loss_weight_sanity(corpus):
    parts = []
    ok = True
    for lam in (0.1, 1.0):
        m = fitted(corpus, lambda_kld=lam)
        finite = all(math.isfinite(e[k]) for e in m["report"].epochs
                     for k in ("loss", "recon", "kl", "pred"))
        ok &= finite and m["test"]["auc"] > 0.55
        parts.append(f"kld {lam}: AUC {m['test']['auc']:.4f}, finite={finite}")
    verdict(9, "loss-weight grid", ok, "; ".join(parts))


def test_10_cli_reproducible(tmp_path):
    small = ["--embed-dim", "8", "--hidden-dim", "12", "--latent-dim", "4",
             "--forget-embed-dim", "4", "--epochs", "3", "--window", "20"]

    def pipeline(out):
        runner = CliRunner()
        steps = [
            ["synth", "--students", "40", "--concepts", "6", "--steps", "25", "--seed", "5",
             "--out", out / "data"],
            ["forget-score", out / "data/interactions.csv", "--out", out / "forget",
             "--ground-truth", out / "data/ground_truth.csv"],
            ["train", out / "data/interactions.csv", "--out", out / "run", "--folds", "2",
             "--seed", "5", *small],
            ["evaluate", "--run", out / "run"],
            ["case-study", "--run", out / "run", "--students", "6", "--seed", "5"],
            ["gradcheck", "--seed", "5", "--out", out / "gc"],
        ]
        for args in steps:
            res = runner.invoke(cli, [str(a) for a in args])
            assert res.exit_code == 0, (args, res.output)
        files = ["data/interactions.csv", "data/ground_truth.csv", "forget/forget_scores.csv",
                 "forget/summary.json", "run/summary.json", "run/summary.csv",
                 "run/fold_0/epochs.csv", "run/fold_1/report.json", "run/metrics_test.json",
                 "run/metrics_test.csv", "run/case_study/case_study.csv",
                 "run/case_study/correlations.json", "gc/gradcheck.json"]
        return {f: (out / f).read_bytes() for f in files}

    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    differ = [f for f in a if a[f] != b[f]]
    verdict(10, "seeded CLI runs identical", not differ,
            f"{len(a)} artifacts compared, {len(differ)} differ")
