"""Acceptance criteria 2-9 (criterion 1 is a statement, not a test).

Criteria 5, 6 and 8 share one module-scoped fixture that runs the full CLI
pipeline three times: a baseline, an identical repeat and a lambda=0
ablation.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from colar.cli import main
from colar.dataset import gen_synthetic, load_dataset
from colar.dynamic import dynamic_forward_batch, forward_dynamic
from colar.errors import NumericError
from colar.evaluation import average_precision, calibrated_ap, noninterpolated_ap
from colar.exemplars import ExemplarBank, kmeans
from colar.model import DynamicParams, Hyper, StaticParams, init_model
from colar.numeric import grad_check, make_rng
from colar.static import forward_static, static_forward_batch
from colar.streaming import detect_video
from colar.training import frame_windows, loss_terms, model_loss_and_grads

from conftest import micro_model
from oracles import brute_ap, brute_cap, nearest_mean_accuracy


def _record(log, n, desc, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {desc}  [{detail}]"
    print(line)
    log.append(line)
    assert ok, line


# ----------------------------------------------------------------------------
# 2. gradient fidelity


def test_c2_gradient_fidelity(acceptance_log):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        model = micro_model(seed, C=2, D=3, H=4, T=3, M=2)
        rng = make_rng(10_000 + seed)
        bank = rng.normal(size=(3, 2, 3))
        windows, valid = frame_windows(rng.normal(size=(4, 3)), 3)
        y = np.eye(3)[rng.integers(0, 3, size=4)]
        names = [("dynamic", k) for k, _ in model.dynamic.items()] + [("static", k) for k, _ in model.static.items()]

        def as_model(theta, model=model):
            # wraps the perturbed arrays in place; no copies per evaluation
            dyn = {k: theta[f"dynamic.{k}"] for k, _ in model.dynamic.items()}
            sta = {k: theta[f"static.{k}"] for k, _ in model.static.items()}
            return replace(model, dynamic=DynamicParams(**dyn), static=StaticParams(**sta))

        def f(theta, bank=bank, windows=windows, valid=valid, y=y, as_model=as_model):
            total, gdyn, gsta = model_loss_and_grads(as_model(theta), bank, windows, valid, y)
            grads = {f"dynamic.{k}": g for k, g in gdyn.items()}
            grads.update({f"static.{k}": g for k, g in gsta.items()})
            return total, grads

        def value(theta, bank=bank, windows=windows, valid=valid, y=y, as_model=as_model):
            m = as_model(theta)
            ld, _ = dynamic_forward_batch(windows, m.dynamic, valid)
            ls, _ = static_forward_batch(windows[:, -1], bank, m.static)
            ce_d, ce_s, cons = loss_terms(ld, ls, y)
            return float(np.mean(ce_d + ce_s + m.hyper.lam * cons))

        theta = {f"{b}.{k}": getattr(getattr(model, b), k).copy() for b, k in names}
        worst = max(worst, grad_check(f, theta, value=value))
    elapsed = time.perf_counter() - start
    _record(
        acceptance_log, 2, "end-to-end gradient check on 100 micro-instances",
        worst < 1e-6 and elapsed < 60, f"max rel err {worst:.2e}, {elapsed:.1f}s",
    )  # fmt: skip


# ----------------------------------------------------------------------------
# 3. metric oracle equivalence


def test_c3_metric_oracles(acceptance_log):
    start = time.perf_counter()
    rng = make_rng(3)
    mismatches, worst_identity, n = 0, 0.0, 0
    while n < 1000:
        N = int(rng.integers(1, 51))
        # every third instance uses coarse scores so ties are common
        scores = rng.integers(0, 5, size=N) / 4 if n % 3 == 0 else rng.random(N)
        pos = rng.random(N) < rng.uniform(0.05, 0.95)
        if not pos.any():
            continue
        n += 1
        w = float(rng.uniform(0.1, 10))
        s, p = scores.tolist(), pos.tolist()
        mismatches += average_precision(scores, pos) != brute_ap(s, p)
        mismatches += calibrated_ap(scores, pos, w) != brute_cap(s, p, w)
        worst_identity = max(worst_identity, abs(calibrated_ap(scores, pos, 1.0) - noninterpolated_ap(scores, pos)))
    elapsed = time.perf_counter() - start
    _record(
        acceptance_log, 3, "AP/cAP equal brute-force oracles on 1000 instances",
        mismatches == 0 and worst_identity <= 1e-12 and elapsed < 30,
        f"{mismatches} mismatches, |cAP(w=1)-AP_ni| <= {worst_identity:.1e}, {elapsed:.1f}s",
    )  # fmt: skip


# ----------------------------------------------------------------------------
# 4. causality


def test_c4_causality(acceptance_log):
    start = time.perf_counter()
    model = init_model(3, 16, Hyper(T=16, H=64, M=8), seed=4)
    bank = ExemplarBank(make_rng(40).normal(size=(4, 8, 16)))
    data = gen_synthetic(3, 16, 50, 30, 10.0, make_rng(41))
    rng = make_rng(42)
    broken = 0
    for seq in data.sequences:
        full = detect_video(seq, model, bank)
        for t in rng.integers(0, seq.length, size=10):
            short = type(seq)(seq.video_id, seq.frames[: t + 1], seq.labels[: t + 1], ())
            part = detect_video(short, model, bank)
            broken += any(a.tobytes() != b[: t + 1].tobytes() for a, b in zip(part, full))
    elapsed = time.perf_counter() - start
    _record(
        acceptance_log, 4, "truncation leaves earlier rows bit-identical (50 videos x 10 t)",
        broken == 0 and elapsed < 60, f"{broken} violations, {elapsed:.1f}s",
    )  # fmt: skip


# ----------------------------------------------------------------------------
# 5, 6, 8. full pipeline


def _pipeline(root, lam=1.0):
    """synth -> exemplars -> train -> detect (x3 betas) -> eval, all via the CLI."""
    root.mkdir()
    train_m = root / "train" / "manifest.json"
    test_m = root / "test" / "manifest.json"
    cfg = root / "config.json"
    cfg.write_text(json.dumps({"T": 16, "H": 64, "epochs": 30, "lambda": lam}))
    steps = [
        ["synth", "--out", str(root / "train"), "--classes", "3", "--dim", "16", "--videos", "20",
         "--frames", "200", "--separation", "10", "--seed", "7"],
        ["synth", "--out", str(root / "test"), "--classes", "3", "--dim", "16", "--videos", "20",
         "--frames", "200", "--separation", "10", "--seed", "8", "--prefix", "t"],
        ["exemplars", "--data", str(train_m), "--m", "8", "--seed", "0", "--out", str(root / "bank.clrb")],
        ["train", "--data", str(train_m), "--bank", str(root / "bank.clrb"), "--config", str(cfg),
         "--seed", "0", "--out", str(root / "model.clrc")],
        ["detect", "--data", str(test_m), "--bank", str(root / "bank.clrb"), "--ckpt", str(root / "model.clrc"),
         "--out", str(root / "pred.jsonl")],
        ["eval", "--pred", str(root / "pred.jsonl"), "--data", str(test_m), "--out", str(root / "report.json")],
        ["eval", "--pred", str(root / "pred.jsonl"), "--data", str(test_m), "--key", "s_d",
         "--out", str(root / "report_dynamic.json")],
    ]  # fmt: skip
    start = time.perf_counter()
    codes = [main(argv) for argv in steps]
    elapsed = time.perf_counter() - start
    assert codes == [0] * len(steps), codes
    return {"root": root, "elapsed": elapsed, "train": train_m, "test": test_m}


def _report(run, name="report.json"):
    return json.loads((run["root"] / name).read_text())


def _accuracy(run, key="scores"):
    data = load_dataset(run["test"])
    truth = {(s.video_id, t): int(c) for s in data.sequences for t, c in enumerate(s.classes)}
    correct = total = 0
    with open(run["root"] / "pred.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            correct += int(np.argmax(rec[key])) == truth[(rec["video_id"], rec["frame"])]
            total += 1
    return correct / total


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline")
    return {
        "a": _pipeline(base / "a"),
        "b": _pipeline(base / "b"),
        "lam0": _pipeline(base / "lam0", lam=0.0),
    }


@pytest.mark.slow
def test_c5_synthetic_convergence(runs, acceptance_log):
    run = runs["a"]
    acc = _accuracy(run)
    mAP = _report(run)["map"]
    oracle = nearest_mean_accuracy(load_dataset(run["train"]), load_dataset(run["test"], split="test"))
    _record(
        acceptance_log, 5, "held-out fused accuracy and mAP >= 0.95, nearest-mean oracle >= 0.99",
        acc >= 0.95 and mAP >= 0.95 and oracle >= 0.99 and run["elapsed"] < 600,
        f"acc {acc:.4f}, mAP {mAP:.4f}, oracle {oracle:.4f}, pipeline {run['elapsed']:.0f}s",
    )  # fmt: skip


@pytest.mark.slow
def test_c6_fusion_ablation(runs, acceptance_log):
    fused = _report(runs["a"])["map"]
    dynamic_only = _report(runs["a"], "report_dynamic.json")["map"]
    no_cons = _report(runs["lam0"])["map"]
    _record(
        acceptance_log, 6, "fused >= dynamic-only - 0.01 and lambda=1 >= lambda=0 - 0.01",
        fused >= dynamic_only - 0.01 and fused >= no_cons - 0.01,
        f"fused {fused:.4f}, dynamic-only {dynamic_only:.4f}, lambda=0 fused {no_cons:.4f}",
    )  # fmt: skip


@pytest.mark.slow
def test_c8_determinism(runs, acceptance_log):
    names = ["bank.clrb", "model.clrc", "pred.jsonl", "report.json"]
    differ = [n for n in names if (runs["a"]["root"] / n).read_bytes() != (runs["b"]["root"] / n).read_bytes()]
    _record(
        acceptance_log, 8, "repeated pipeline gives byte-identical bank, checkpoint, predictions, report",
        not differ, f"differing: {differ or 'none'}",
    )  # fmt: skip


# ----------------------------------------------------------------------------
# 7. k-means


def test_c7_kmeans(acceptance_log):
    start = time.perf_counter()
    failures = 0
    for seed in range(100):
        rng = make_rng(seed)
        pts = rng.normal(size=(int(rng.integers(20, 200)), int(rng.integers(1, 8)))) * rng.uniform(0.1, 10)
        M = int(rng.integers(1, 9))
        try:
            h = kmeans(pts, M, make_rng(seed + 1000)).history
        except NumericError:
            failures += 1
            continue
        failures += not all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(h, h[1:]))
    recovered = 0
    for seed in range(20):
        pts = make_rng(500 + seed).normal(size=(8, 5))
        res = kmeans(pts, 8, make_rng(seed))
        recovered += sorted(map(tuple, res.centroids)) == sorted(map(tuple, pts))
    elapsed = time.perf_counter() - start
    _record(
        acceptance_log, 7, "objective non-increasing in 100 runs; N == M recovers the points",
        failures == 0 and recovered == 20 and elapsed < 30,
        f"{failures} non-monotone runs, {recovered}/20 exact recoveries, {elapsed:.1f}s",
    )  # fmt: skip


# ----------------------------------------------------------------------------
# 9. attention invariants


def test_c9_attention_invariants(acceptance_log):
    start = time.perf_counter()
    worst_sum, worst_perm = 0.0, 0.0
    for seed in range(1000):
        rng = make_rng(seed)
        C, D, H, M, T = (int(v) for v in rng.integers([1, 1, 1, 1, 0], [5, 6, 9, 6, 8]))
        model = micro_model(seed, C=C, D=D, H=H, T=max(T, 1), M=M)
        scale = float(rng.uniform(0.1, 20))
        dyn = forward_dynamic(scale * rng.normal(size=(T + 1, D)), model.dynamic)
        bank = scale * rng.normal(size=(C + 1, M, D))
        f0 = scale * rng.normal(size=D)
        sta = forward_static(f0, bank, model.static)
        worst_sum = max(
            worst_sum,
            abs(dyn.attention.sum() - 1),
            float(np.max(np.abs(sta.per_category_attention.sum(axis=1) - 1))),
            abs(sta.category_weights.sum() - 1),
        )
        perm = np.stack([rng.permutation(M) for _ in range(C + 1)])
        shuffled = np.take_along_axis(bank, perm[..., None], axis=1)
        worst_perm = max(worst_perm, float(np.max(np.abs(forward_static(f0, shuffled, model.static).logits - sta.logits))))
    elapsed = time.perf_counter() - start
    _record(
        acceptance_log, 9, "attention rows sum to 1 and static logits ignore exemplar order (1000 passes)",
        worst_sum <= 1e-9 and worst_perm <= 1e-9,
        f"max |sum-1| {worst_sum:.1e}, max permutation diff {worst_perm:.1e}, {elapsed:.1f}s",
    )  # fmt: skip
