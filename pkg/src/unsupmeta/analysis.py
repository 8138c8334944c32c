"""Evaluation tools: rule rollouts, the supervised baseline, filter export and PCA."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .base_model import BaseParams, embed, forward
from .meta_objective import meta_objective, probe_accuracy
from .tasks import Task, invert_permutation, write_pgm
from .update_rule import apply_update, compute_delta_weight


@dataclass
class MetricSeries:
    rows: list = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.rows and row["inner_step"] <= self.rows[-1]["inner_step"]:
            raise ValueError("inner_step must be strictly increasing")
        self.rows.append(row)

    @property
    def steps(self) -> list:
        return [r["inner_step"] for r in self.rows]

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])


def _rms(a: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(a))))


def evaluate_params(params: BaseParams, task: Task, cfg, rng: np.random.Generator, repeats: int = 5,
                    n_eval: int | None = None) -> tuple:
    """Mean probe accuracy and meta-objective over ``repeats`` fresh labeled batch pairs."""
    k = task.spec.n_classes * cfg.trainer.labeled_per_class
    n_eval = n_eval or k
    accs, objs = [], []
    for _ in range(repeats):
        a = task.sample(k, rng)
        b = task.sample(n_eval, rng)
        accs.append(probe_accuracy(a, b, params, cfg.objective))
        objs.append(meta_objective(a, b, params, cfg.objective).item())
    return float(np.mean(accs)), float(np.mean(objs))


def rollout(theta, params: BaseParams, task: Task, steps: int, eval_every: int, cfg, seed=0,
            eval_repeats: int = 5, n_eval: int | None = None) -> tuple:
    """Apply the rule ``steps`` times; evaluate at ``0, eval_every, ...``.

    The unlabeled stream and the evaluation stream are independent, so
    evaluations never change the trajectory.  ``delta_rms`` in a row is the
    per-layer RMS of the weight update the rule proposes from that state.
    Returns ``(series, final_params)``.
    """
    if steps < 0 or eval_every < 1:
        raise ValueError("steps must be >= 0 and eval_every >= 1")
    B = theta.cfg.batch_size
    data_ss, eval_ss = np.random.SeedSequence(seed).spawn(2)
    data_rng, eval_rng = np.random.default_rng(data_ss), np.random.default_rng(eval_ss)
    series = MetricSeries()
    p = params.detach()
    for t in range(steps + 1):
        is_eval = t % eval_every == 0
        if t == steps and not is_eval:
            break
        x = task.sample(B, data_rng).x  # labels are dropped here
        if x.shape[0] != B:
            raise T.ShapeError(f"rule expects batch {B}")
        trace = forward(x, p)
        deltas = compute_delta_weight(trace, p, theta)
        if is_eval:
            acc, obj = evaluate_params(p, task, cfg, eval_rng, eval_repeats, n_eval)
            series.append({
                "inner_step": t,
                "few_shot_accuracy": acc,
                "meta_objective": obj,
                "delta_rms": [_rms(d.data) for d in deltas.W],
            })
        if t == steps:
            break
        p = apply_update(p, deltas, theta.cfg.phi_lr).detach()
    return series, p


def write_series_csv(series: MetricSeries, path) -> None:
    n_layers = max((len(r["delta_rms"]) for r in series.rows), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["inner_step", "few_shot_accuracy", "meta_objective"] + [f"delta_rms_{l + 1}" for l in range(n_layers)])
        for r in series.rows:
            w.writerow([r["inner_step"], repr(r["few_shot_accuracy"]), repr(r["meta_objective"])]
                       + [repr(v) for v in r["delta_rms"]])


# ---------------------------------------------------------------- baseline


def _log_softmax(logits: T.Tensor) -> T.Tensor:
    shift = T.Tensor(logits.data.max(axis=1, keepdims=True))
    s = logits - shift
    return s - T.log(T.sum(T.exp(s), 1, keepdims=True))


def _baseline_loss(x, ids, params: BaseParams, head_w, head_b) -> T.Tensor:
    feats = embed(x, params)
    logp = _log_softmax(T.matmul(feats, head_w) + T.reshape(head_b, (1, -1)))
    onehot = np.zeros(logp.shape)
    onehot[np.arange(len(ids)), ids] = 1.0
    return -T.mean(T.sum(logp * T.Tensor(onehot), 1))


def _labeled_set(task: Task, per_class: int, rng) -> tuple:
    spec = task.spec
    if getattr(task, "_labels", None) is not None:
        counts = [int(np.sum(task._labels == c)) for c in spec.classes]
        if min(counts) < per_class:
            raise ValueError(f"task has only {min(counts)} examples for some class, {per_class} requested")
    b = task.sample(per_class * spec.n_classes, rng)
    return b.x, b.class_ids


def supervised_baseline(task: Task, params: BaseParams, labeled_per_class: int = 10, train_steps: int = 200,
                        lr: float = 3e-3, seed=0, n_test: int = 1000, shuffle_labels: bool = False) -> dict:
    """Train the whole base model plus a softmax head on a few labeled examples with Adam."""
    if labeled_per_class < 1:
        raise ValueError("labeled_per_class must be positive")
    rng = np.random.default_rng(seed)
    x, ids = _labeled_set(task, labeled_per_class, rng)
    if shuffle_labels:
        ids = rng.permutation(ids)
    C = task.spec.n_classes
    emb = params.arch.embed_dim
    head_w = rng.normal(0.0, 1.0 / np.sqrt(emb), size=(emb, C))
    head_b = np.zeros(C)
    arrays = dict(params.arrays(), head_w=head_w, head_b=head_b)
    names = sorted(arrays)
    m = {k: np.zeros_like(v) for k, v in arrays.items()}
    v = {k: np.zeros_like(a) for k, a in arrays.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    losses = []

    def loss_and_grad(arr):
        with T.Tape() as tape:
            w = {k: tape.watch(arr[k]) for k in names}
            L = params.arch.n_layers
            get = lambda key: [w[f"{key}{l + 1}"] for l in range(L)]
            p = BaseParams(params.arch, get("W"), get("V"), get("b"), get("bn_scale"), get("bn_offset"))
            loss = _baseline_loss(x, ids, p, w["head_w"], w["head_b"])
            grads = tape.gradient(loss, [w[k] for k in names])
        return loss.item(), dict(zip(names, grads))

    for t in range(1, train_steps + 1):
        loss, g = loss_and_grad(arrays)
        losses.append(loss)
        for k in names:
            m[k] = b1 * m[k] + (1 - b1) * g[k]
            v[k] = b2 * v[k] + (1 - b2) * g[k] ** 2
            arrays[k] = arrays[k] - lr * (m[k] / (1 - b1**t)) / (np.sqrt(v[k] / (1 - b2**t)) + eps)
    final_loss, _ = loss_and_grad(arrays)
    losses.append(final_loss)
    trained = BaseParams.from_arrays(params.arch, {k: arrays[k] for k in names if not k.startswith("head_")})
    test = task.sample(n_test - n_test % C if n_test >= C else C, rng)
    logits = embed(test.x, trained).data @ arrays["head_w"] + arrays["head_b"]
    acc = float(np.mean(np.argmax(logits, axis=1) == test.class_ids))
    return {"accuracy": acc, "losses": losses, "train_steps": train_steps, "lr": lr,
            "labeled_per_class": labeled_per_class}


# ----------------------------------------------------------------- filters


def filter_images(params: BaseParams, layer: int = 1, permutation=None, grid: int | None = None) -> np.ndarray:
    """Columns of ``W^layer`` in original pixel order, reshaped to ``[N, grid, grid]``."""
    W = params.W[layer - 1].data
    n_in = W.shape[0]
    if grid is None:
        side = int(round(np.sqrt(n_in)))
        if side * side != n_in:
            raise ValueError(f"input dimension {n_in} is not square; pass an explicit grid")
        grid = side
    if grid * grid != n_in:
        raise ValueError(f"grid {grid} does not match input dimension {n_in}")
    if permutation is not None:
        # feature i of the model reads original pixel perm[i]
        W = W[invert_permutation(permutation)]
    return W.T.reshape(-1, grid, grid)


def extract_filters(params: BaseParams, out_dir, layer: int = 1, permutation=None, grid: int | None = None) -> list:
    images = filter_images(params, layer, permutation, grid)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for j, img in enumerate(images):
        path = out / f"filter_{j:03d}.pgm"
        write_pgm(path, img)
        files.append(path)
    csv_path = out / "filters.csv"
    np.savetxt(csv_path, images.reshape(len(images), -1), delimiter=",", fmt="%.17g")
    files.append(csv_path)
    return files


# --------------------------------------------------------------------- PCA


def pca_variance(data) -> dict:
    """Eigen-spectrum of the centered sample covariance, largest first."""
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("PCA needs a [n, dim] matrix with n >= 2")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals = np.linalg.eigh(cov)[0][::-1]
    evals = np.clip(evals, 0.0, None)
    total = evals.sum()
    if total <= 0:
        raise ValueError("data has zero variance")
    frac = evals / total
    return {"eigenvalues": evals, "explained": frac, "cumulative": np.cumsum(frac)}


def write_pca_csv(res: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "eigenvalue", "explained", "cumulative"])
        for i, (e, f, c) in enumerate(zip(res["eigenvalues"], res["explained"], res["cumulative"])):
            w.writerow([i + 1, repr(float(e)), repr(float(f)), repr(float(c))])
