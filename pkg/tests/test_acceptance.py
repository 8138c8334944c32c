"""Acceptance criteria, each at its stated tolerance.

Every test records one pass/fail line (printed in the terminal summary) and
then asserts the criterion.  Criterion 7 reads the desk-scale training run in
``artifacts/desk_run`` and trains it first when the artifacts are missing.
"""

import dataclasses
import json
import time
from pathlib import Path

import numpy as np
import pytest

from unsupmeta import checkpoint as C
from unsupmeta import update_rule as U
from unsupmeta.analysis import rollout
from unsupmeta.base_model import ACTIVATIONS, ArchSpec, BaseParams, forward, init_params
from unsupmeta.cluster import run_cluster
from unsupmeta.config import get_profile
from unsupmeta.meta_objective import ridge_solve
from unsupmeta.tasks import glyph_task, two_moons_task
from unsupmeta import tensor as T
from unsupmeta.trainer import SequentialTrainer, evaluate_segment, learning_rate, theta_seed, unroll_segment

import oracles

ROOT = Path(__file__).resolve().parents[1]
DESK_RUN = ROOT / "artifacts" / "desk_run"
DESK = get_profile("desk")


def desk_config(**trainer):
    return dataclasses.replace(DESK, trainer=dataclasses.replace(DESK.trainer, **trainer))


# -------------------------------------------------------------------- 1


def test_c01_meta_gradient_matches_finite_differences(accept):
    t0 = time.perf_counter()
    theta = U.init_theta(DESK.rule, theta_seed(0))
    task = glyph_task(4, 10, 3)
    params = init_params(ArchSpec((100, 8, 8), "relu"), 3)
    Uu, M, K, seed, h = 2, 1, 40, 11, 1e-5
    res = unroll_segment(params, theta, task, Uu, M, seed, K)
    base = theta.arrays()
    names = theta.names()
    sizes = np.array([base[n].size for n in names])
    rng = np.random.default_rng(0)
    flat = rng.choice(sizes.sum(), size=100, replace=False)
    errs, mags, resolved = [], [], []
    for f in flat:
        i = int(np.searchsorted(np.cumsum(sizes), f, side="right"))
        name, idx = names[i], int(f - (np.cumsum(sizes)[i] - sizes[i]))

        def J(step):
            arr = dict(base)
            a = base[name].copy().ravel()
            a[idx] += step
            arr[name] = a.reshape(base[name].shape)
            return evaluate_segment(params, theta.replace(arr), task, Uu, M, seed, K)

        rel = lambda a, b: 0.0 if max(abs(a), abs(b)) == 0 else abs(a - b) / max(abs(a), abs(b))
        fd = (J(h) - J(-h)) / (2 * h)
        an = float(res.grad[name].ravel()[idx])
        errs.append(rel(an, fd))
        mags.append(abs(an))
        if errs[-1] > 1e-4:
            # diagnostic only: does the difference quotient agree at a coarser or finer step?
            other = min(rel(an, (J(s) - J(-s)) / (2 * s)) for s in (1e-3, 1e-7))
            resolved.append(other <= 1e-4)
    errs, mags = np.array(errs), np.array(mags)
    elapsed = time.perf_counter() - t0
    bad = errs > 1e-4
    detail = (f"max rel err {errs.max():.2e} over 100 coords at h=1e-5 ({bad.sum()} above 1e-4, "
              f"largest |grad| among those {mags[bad].max() if bad.any() else 0:.1e}, "
              f"{sum(resolved)} of them agree within 1e-4 at h=1e-3 or 1e-7); "
              f"median rel err {np.median(errs):.1e}; {elapsed:.0f}s")
    ok = accept(1, errs.max() <= 1e-4 and elapsed < 300, detail)
    assert ok, detail


# -------------------------------------------------------------------- 2


def test_c02_update_rule_oracle(accept):
    cfg = U.UpdateRuleConfig(hdims=16, deltadims=8, topdeltasize=16, computehsize=16, batch_size=4)
    th = U.init_theta(cfg, 5)
    r = np.random.default_rng(1)
    arr = th.arrays()
    for k in arr:
        if k.endswith((".scale", ".offset", ".b")) or k == "b_readout":
            arr[k] = arr[k] + r.normal(0, 0.1, size=arr[k].shape)
    th = th.replace(arr)
    p = init_params(ArchSpec((4, 4, 4)), 3)
    x = np.random.default_rng(3).normal(size=(4, 4))
    got = U.compute_delta_weight(forward(x, p), p, th)
    A = p.arrays()
    W, V, b = [A["W1"], A["W2"]], [A["V1"], A["V2"]], [A["b1"], A["b2"]]
    xs, zs = oracles.base_forward(x, W, b, [A["bn_scale1"], A["bn_scale2"]], [A["bn_offset1"], A["bn_offset2"]])
    dW, db, dV, _ = oracles.delta_weight(xs, zs, W, V, b, th.arrays())
    diff = max(np.max(np.abs(g.data - w)) for g, w in zip(got.W + got.b + got.V, dW + db + dV))
    detail = f"max abs diff {diff:.2e} (tolerance 1e-9)"
    assert accept(2, diff <= 1e-9, detail), detail


# -------------------------------------------------------------------- 3


def test_c03_constraint_invariants(accept):
    t0 = time.perf_counter()
    r = np.random.default_rng(2024)
    worst = {"orth": -np.inf, "rms_w": 0.0, "rms_b": 0.0, "rms_d": 0.0}
    acts = list(ACTIVATIONS)
    for i in range(1000):
        cfg = DESK.rule
        th = U.init_theta(cfg, [7, i])
        arr = th.arrays()
        for k in arr:
            arr[k] = arr[k] + r.normal(0, 0.3, size=arr[k].shape)
        th = th.replace(arr)
        depth = int(r.integers(1, 4))
        sizes = tuple(int(v) for v in r.integers(2, 17, size=depth + 1))
        p = init_params(ArchSpec(sizes, acts[i % len(acts)]), [8, i])
        x = r.normal(size=(cfg.batch_size, sizes[0])) * r.uniform(0.1, 10)
        out = U.compute_delta_weight(forward(x, p), p, th, keep_aux=True)
        for parts, final, w in zip(out.aux["W_parts"] + out.aux["V_parts"], out.W + out.V, p.W + p.V):
            worst["orth"] = max(worst["orth"], float(np.sum(parts["orth"].data * w.data)))
            worst["rms_w"] = max(worst["rms_w"], float(np.sqrt(np.mean(final.data ** 2))))
        for db in out.b:
            rms = np.sqrt(np.mean(db.data ** 2))
            if rms > 0:
                worst["rms_b"] = max(worst["rms_b"], abs(rms - 1))
        for d in out.aux["d"][:-1]:
            rms = np.sqrt(np.mean(d.data ** 2, axis=2))
            nz = rms > 0
            worst["rms_d"] = max(worst["rms_d"], float(np.max(np.abs(rms[nz] - 1), initial=0.0)))
    elapsed = time.perf_counter() - t0
    ok = (worst["orth"] <= 1e-12 and worst["rms_w"] < 1 and worst["rms_b"] <= 1e-6 and worst["rms_d"] <= 1e-9
          and elapsed < 120)
    detail = (f"max <dW_orth,W> {worst['orth']:.1e}; max RMS(dW_final) {worst['rms_w']:.4f}; "
              f"max |RMS(db)-1| {worst['rms_b']:.1e}; max |RMS(d)-1| {worst['rms_d']:.1e}; {elapsed:.0f}s")
    assert accept(3, ok, detail), detail


# -------------------------------------------------------------------- 4


def test_c04_permutation_equivariance(accept):
    theta = U.init_theta(DESK.rule, theta_seed(0))
    plain = glyph_task(4, 10, 21, noise_std=0.1)
    permuted = glyph_task(4, 10, 21, noise_std=0.1, permute=True)
    perm = np.asarray(permuted.spec.permutation)
    p = init_params(ArchSpec((100, 16, 16)), 4)
    A = p.arrays()
    A["W1"], A["V1"] = A["W1"][perm], A["V1"][perm]
    q = BaseParams.from_arrays(p.arch, A)
    a, _ = rollout(theta, p, plain, 50, 10, DESK, seed=6, eval_repeats=1)
    b, _ = rollout(theta, q, permuted, 50, 10, DESK, seed=6, eval_repeats=1)
    diff = np.abs(a.column("meta_objective") - b.column("meta_objective"))
    detail = (f"max |J - J_perm| over steps {a.steps}: {diff.max():.2e} (tolerance 1e-9); "
              f"step 0 diff {diff[0]:.1e}")
    assert accept(4, diff.max() <= 1e-9, detail), detail


# -------------------------------------------------------------------- 5


def test_c05_architecture_generalization(accept):
    theta = U.init_theta(DESK.rule, theta_seed(0))
    task = glyph_task(4, 10, 5)
    rng = np.random.default_rng(0)
    acts = ("relu", "leaky_relu", "swish", "tanh", "step")
    failures = []
    n = 0
    for depth in range(2, 7):
        for width in (16, 32, 64, 128, 256):
            for act in acts:
                n += 1
                try:
                    p = init_params(ArchSpec((100,) + (width,) * (depth - 1) + (32,), act), [depth, width])
                    for _ in range(2):
                        new, d = U.unsupervised_update(task.sample(8, rng).x, p, theta)
                        if not all(np.all(np.isfinite(t.data)) for t in d.W + d.V + d.b):
                            raise FloatingPointError("non-finite delta")
                        p = new.detach()
                except Exception as err:  # any failure counts against the criterion
                    failures.append((depth, width, act, repr(err)))
    detail = f"{n} configurations, {len(failures)} failures" + (f": {failures[:3]}" if failures else "")
    assert accept(5, not failures and n == 125, detail), detail


# -------------------------------------------------------------------- 6


def test_c06_ridge_solver(accept):
    r = np.random.default_rng(6)
    worst_gd, worst_res = 0.0, 0.0
    for _ in range(20):
        n, f, c = int(r.integers(6, 20)), int(r.integers(2, 6)), int(r.integers(2, 5))
        x, y = r.normal(size=(n, f)), r.normal(size=(n, c))
        C_ = ridge_solve(T.Tensor(x), y, 0.1).C.data
        worst_gd = max(worst_gd, float(np.max(np.abs(C_ - oracles.ridge_gd(x, y, 0.1)))))
        A = np.hstack([x, np.ones((n, 1))])
        worst_res = max(worst_res, float(np.max(np.abs((A.T @ A + 0.1 * np.eye(f + 1)) @ C_ - A.T @ y))))
    detail = f"max |C - C_gd| {worst_gd:.1e} (<= 1e-6); max residual {worst_res:.1e} (<= 1e-9)"
    assert accept(6, worst_gd <= 1e-6 and worst_res <= 1e-9, detail), detail


# -------------------------------------------------------------------- 7


def _ensure_desk_run():
    metrics = DESK_RUN / "metrics.jsonl"
    done = ROOT / "artifacts" / "desk_run.end"
    if metrics.exists() and done.exists() and (DESK_RUN / "theta.smup").exists():
        return
    from unsupmeta.cli import main

    DESK_RUN.mkdir(parents=True, exist_ok=True)
    (ROOT / "artifacts" / "desk_run.start").write_text(f"{int(time.time())}\n")
    assert main(["meta-train", "--profile", "desk", "--seed", "0", "--checkpoint-every", "100",
                 "--out", str(DESK_RUN)]) == 0
    done.write_text(f"{int(time.time())}\n")


def test_c07_desk_training_trend(accept):
    _ensure_desk_run()
    rows = [json.loads(l) for l in (DESK_RUN / "metrics.jsonl").read_text().splitlines()]
    J = np.array([r["J"] for r in rows])
    first, last = J[:50].mean(), J[-50:].mean()
    drop = 1 - last / first
    start = int((ROOT / "artifacts" / "desk_run.start").read_text())
    end = int((ROOT / "artifacts" / "desk_run.end").read_text())
    hours = (end - start) / 3600
    theta, cfg, _ = C.load_theta(DESK_RUN / "theta.smup")
    gains = []
    for s in range(10):
        task = two_moons_task(cfg.tasks.moons_noise, 10_000 + s)
        params = init_params(ArchSpec((2, 32, 32, cfg.arch.embed_dim)), [s, 11])
        series, _ = rollout(theta, params, task, 1000, 1000, cfg, seed=s)
        acc = series.column("few_shot_accuracy")
        gains.append(acc[-1] - acc[0])
    gain = float(np.mean(gains))
    ok = len(rows) == 2000 and drop >= 0.2 and gain >= 0.05 and hours <= 2
    detail = (f"{len(rows)} meta-steps; J first50 {first:.3f} last50 {last:.3f} (drop {drop:.1%}, need 20%); "
              f"two-moons accuracy gain {gain * 100:+.1f} pts over 10 seeds (need +5); run time {hours:.2f} h")
    assert accept(7, ok, detail), detail


# -------------------------------------------------------------------- 8


def test_c08_distributed_equivalence(accept):
    cfg = desk_config(meta_batch=1)
    seq = SequentialTrainer(cfg)
    seq.run(100)
    one = run_cluster(1, cfg, "deterministic", n_applies=100)
    same = one.version == 100 and all(np.array_equal(one.theta.arrays()[k], v) for k, v in seq.theta.arrays().items())
    free = run_cluster(8, desk_config(meta_batch=2), "free", n_applies=10)
    led = free.ledger
    ok = same and led["balanced"] and free.version == 10
    detail = (f"1-worker vs sequential over 100 steps bit-identical: {same}; 8 free workers: "
              f"received {led['received']} = applied {led['applied']}x{led['meta_batch']} + buffered "
              f"{led['buffered']} + rejected {led['rejected']} -> balanced {led['balanced']}, versions 0->{free.version}")
    assert accept(8, ok, detail), detail


# -------------------------------------------------------------------- 9


def test_c09_checkpoint_round_trip(accept, tmp_path):
    cfg = desk_config(meta_batch=1)
    full = SequentialTrainer(cfg)
    full.run(50)
    part = SequentialTrainer(cfg)
    part.run(25)
    C.save(tmp_path / "a.smup", C.trainer_checkpoint(part))
    C.save(tmp_path / "b.smup", C.load(tmp_path / "a.smup"))
    identical = (tmp_path / "a.smup").read_bytes() == (tmp_path / "b.smup").read_bytes()
    resumed = C.restore_trainer(tmp_path / "a.smup")
    resumed.run(25)
    same = all(np.array_equal(resumed.theta.arrays()[k], v) for k, v in full.theta.arrays().items())
    detail = f"save-load-save byte-identical: {identical}; 25+25 resume equals 50-step run: {same}"
    assert accept(9, identical and same, detail), detail


# ------------------------------------------------------------------- 10


def test_c10_profile_constants(accept):
    cfg = get_profile("paper")
    th = U.init_theta(cfg.rule, 0)
    checks = {
        "hdims 64": th["b_readout"].shape == (64,) and cfg.rule.hdims == 64,
        "deltadims 32": th["errorprop.W"].shape == (64, 32),
        "gradc 4": th["lowrr.zero.Pa"].shape == (64, 4),
        "topdeltasize 64": th["topd.conv0.w"].shape[2] == 64,
        "computehsize 64": th["computeh.conv0.w"].shape[2] == 64,
        "phi lr 3e-4": cfg.rule.phi_lr == 3e-4,
        "ridge 0.1": cfg.objective.ridge_penalty == 0.1,
        "clip norm 5": cfg.trainer.clip_norm == 5.0,
        "adam schedule": [learning_rate(t, cfg.trainer) for t in (0, 120_000, 160_000)] == [3e-4, 1e-4, 2e-5],
        "adam betas": (cfg.trainer.adam_beta1, cfg.trainer.adam_beta2, cfg.trainer.adam_eps) == (0.9, 0.999, 1e-8),
    }
    bad = [k for k, v in checks.items() if not v]
    detail = f"{len(checks) - len(bad)}/{len(checks)} constants match" + (f"; mismatched {bad}" if bad else "")
    assert accept(10, not bad, detail), detail
