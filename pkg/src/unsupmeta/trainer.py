"""Truncated back-propagation through unrolled inner loops, and Adam on the rule.

:class:`SequentialTrainer` is the single-process reference loop: sample a task
and a fresh base model, run ``K`` truncated segments of ``U`` rule applications
each, and apply clipped Adam whenever ``meta_batch`` segment gradients have
been collected.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .base_model import BaseParams, init_params, sample_arch, ArchSpec
from .config import MetaTrainerConfig, RunConfig
from .meta_objective import MetaObjectiveConfig, meta_objective
from .tasks import Task, TaskSpec, make_task, sample_task
from .update_rule import UpdateRuleParams, init_theta, unsupervised_update

logger = logging.getLogger(__name__)


class SegmentError(RuntimeError):
    """An unroll segment produced a non-finite value."""


# ---------------------------------------------------------------- schedules


def _ramp(step: int, start: int, end: int) -> float:
    if end <= start:
        return 1.0 if step >= end else 0.0
    return float(np.clip((step - start) / (end - start), 0.0, 1.0))


def unroll_range(meta_step: int, cfg: MetaTrainerConfig) -> tuple:
    f = _ramp(meta_step, 0, cfg.unroll_ramp_steps)
    lo = cfg.unroll_start[0] + f * (cfg.unroll_end[0] - cfg.unroll_start[0])
    hi = cfg.unroll_start[1] + f * (cfg.unroll_end[1] - cfg.unroll_start[1])
    return int(round(lo)), int(round(hi))


def sample_unroll_len(meta_step: int, cfg: MetaTrainerConfig, seed) -> int:
    lo, hi = unroll_range(meta_step, cfg)
    return int(np.random.default_rng(seed).integers(lo, hi + 1))


def truncation_scale(meta_step: int, cfg: MetaTrainerConfig) -> float:
    f = _ramp(meta_step, cfg.trunc_ramp[0], cfg.trunc_ramp[1])
    return cfg.trunc_std_start + f * (cfg.trunc_std_end - cfg.trunc_std_start)


def sample_truncation_count(meta_step: int, cfg: MetaTrainerConfig, seed) -> int:
    """Number of segments per task: normal with equal mean and std, clamped at 1."""
    s = truncation_scale(meta_step, cfg)
    return max(1, int(round(np.random.default_rng(seed).normal(s, s))))


def learning_rate(meta_step: int, cfg: MetaTrainerConfig) -> float:
    idx = int(np.searchsorted(cfg.lr_boundaries, meta_step, side="right"))
    return cfg.lr_values[idx] * cfg.lr_scale


# --------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, theta: UpdateRuleParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in theta.arrays().items()},
                   {k: np.zeros_like(a) for k, a in theta.arrays().items()})


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple:
    norm = T.global_norm(grads[k] for k in sorted(grads))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


def adam_step(theta: UpdateRuleParams, grads: dict, meta_step: int, state: AdamState,
              cfg: MetaTrainerConfig) -> tuple:
    """Clipped Adam update; returns ``(new_theta, info)``.

    Non-finite gradients leave ``theta`` and the moments untouched and bump
    ``state.skipped``.
    """
    if set(grads) != set(state.m):
        raise T.ShapeError("gradient names do not match theta")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        return theta, {"applied": False, "grad_norm": float("nan"), "lr": learning_rate(meta_step, cfg)}
    clipped, norm = clip_by_global_norm(grads, cfg.clip_norm)
    lr = learning_rate(meta_step, cfg)
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    new = {}
    arrays = theta.arrays()
    for k in sorted(arrays):
        g = clipped[k]
        if g.shape != arrays[k].shape:
            raise T.ShapeError(f"{k}: gradient shape {g.shape} != {arrays[k].shape}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        new[k] = arrays[k] - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return theta.replace(new), {"applied": True, "grad_norm": norm, "lr": lr}


def average_gradients(grads: list) -> dict:
    out = {}
    for k in sorted(grads[0]):
        total = grads[0][k].copy()
        for g in grads[1:]:
            total = total + g[k]
        out[k] = total / len(grads)
    return out


# ------------------------------------------------------------------ unrolls


@dataclass
class UnrollResult:
    phi_end: BaseParams
    J_mean: float
    grad: dict
    stats: dict = field(default_factory=dict)


def unroll_segment(params: BaseParams, theta: UpdateRuleParams, task: Task, U: int, M: int, seed,
                   labeled_batch: int, objective: MetaObjectiveConfig | None = None,
                   unlabeled=None) -> UnrollResult:
    """Apply the rule ``U`` times and average the objective over every new state.

    Gradients reach ``theta`` through the whole segment but stop at the incoming
    ``params``.  ``unlabeled`` may supply the ``U`` input batches explicitly;
    otherwise they are drawn from a stream independent of the evaluation draws.
    """
    if U < 1:
        raise ValueError("U must be at least 1")
    objective = objective or MetaObjectiveConfig(eval_repeats=M)
    B = theta.cfg.batch_size
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    data_ss, eval_ss = ss.spawn(2)
    data_rng, eval_rng = np.random.default_rng(data_ss), np.random.default_rng(eval_ss)
    if unlabeled is None:
        unlabeled = [task.sample(B, data_rng).x for _ in range(U)]
    elif len(unlabeled) != U:
        raise ValueError("unlabeled must hold exactly U batches")
    names = theta.names()
    try:
        with T.Tape() as tape:
            th = theta.watched(tape)
            p = params.detach()
            states, delta_rms = [], []
            for x in unlabeled:
                p, deltas = unsupervised_update(x, p, th)
                states.append(p)
                delta_rms.append([float(np.sqrt(np.mean(d.data ** 2))) for d in deltas.W])
            total = None
            per_step = []
            scale = 1.0 / (U * M)
            for p_u in states:
                step_total = 0.0
                for _ in range(M):
                    a = task.sample(labeled_batch, eval_rng)
                    b = task.sample(labeled_batch, eval_rng)
                    j = meta_objective(a, b, p_u, objective)
                    step_total += j.item()
                    total = j * scale if total is None else total + j * scale
                per_step.append(step_total / M)
            grads = tape.gradient(total, [th[n] for n in names])
    except (T.NonFiniteError, ZeroDivisionError, np.linalg.LinAlgError) as err:
        raise SegmentError(f"segment aborted: {err}") from err
    J = total.item()
    if not np.isfinite(J) or not all(np.all(np.isfinite(g)) for g in grads):
        raise SegmentError("segment aborted: non-finite objective or gradient")
    return UnrollResult(p.detach(), J, dict(zip(names, grads)), {"J_per_step": per_step, "delta_rms": delta_rms})


def evaluate_segment(params: BaseParams, theta: UpdateRuleParams, task: Task, U: int, M: int, seed,
                     labeled_batch: int, objective: MetaObjectiveConfig | None = None) -> float:
    """Forward-only value of the segment objective (used for finite differences)."""
    objective = objective or MetaObjectiveConfig(eval_repeats=M)
    B = theta.cfg.batch_size
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    data_ss, eval_ss = ss.spawn(2)
    data_rng, eval_rng = np.random.default_rng(data_ss), np.random.default_rng(eval_ss)
    p = params.detach()
    states = []
    for x in [task.sample(B, data_rng).x for _ in range(U)]:
        p, _ = unsupervised_update(x, p, theta)
        states.append(p)
    total = 0.0
    for p_u in states:
        for _ in range(M):
            a = task.sample(labeled_batch, eval_rng)
            b = task.sample(labeled_batch, eval_rng)
            total += meta_objective(a, b, p_u, objective).item() / (U * M)
    return total


# ------------------------------------------------------------------ episode


@dataclass
class Episode:
    """One task with its persistent base model, spanning ``K`` segments."""

    spec: TaskSpec
    params: BaseParams
    K: int
    k: int = 0
    t: int = 0
    task: Task | None = None

    def __post_init__(self):
        if self.task is None:
            self.task = make_task(self.spec)

    @property
    def done(self) -> bool:
        return self.k >= self.K


def theta_seed(seed: int) -> list:
    return [int(seed), 0x7E7A]


def worker_seed(seed: int, worker_id: int) -> list:
    return [int(seed), 0x3E11, int(worker_id)]


def labeled_batch_size(spec: TaskSpec, cfg: MetaTrainerConfig) -> int:
    return spec.n_classes * cfg.labeled_per_class


def start_episode(rng: np.random.Generator, cfg: RunConfig, meta_step: int) -> Episode:
    spec = sample_task(cfg.tasks, int(rng.integers(2**63)))
    a = cfg.arch
    arch = sample_arch(rng, spec.input_dim, a.hidden_layers, a.hidden_sizes, a.embed_dim, a.activation)
    params = init_params(arch, int(rng.integers(2**63)))
    K = sample_truncation_count(meta_step, cfg.trainer, int(rng.integers(2**63)))
    return Episode(spec, params, K)


def run_episode_segment(ep: Episode, theta: UpdateRuleParams, rng: np.random.Generator, cfg: RunConfig,
                        meta_step: int) -> UnrollResult:
    U = sample_unroll_len(meta_step, cfg.trainer, int(rng.integers(2**63)))
    seg_seed = int(rng.integers(2**63))
    res = unroll_segment(ep.params, theta, ep.task, U, cfg.objective.eval_repeats, seg_seed,
                         labeled_batch_size(ep.spec, cfg.trainer), cfg.objective)
    res.stats["U"] = U
    return res


# ------------------------------------------------------------------ trainer


class SequentialTrainer:
    """Single-worker meta-training loop, fully determined by ``cfg.seed``."""

    def __init__(self, cfg: RunConfig, theta: UpdateRuleParams | None = None):
        self.cfg = cfg
        self.theta = theta if theta is not None else init_theta(cfg.rule, theta_seed(cfg.seed))
        self.adam = AdamState.zeros(self.theta)
        self.step = 0
        self.rng = np.random.default_rng(worker_seed(cfg.seed, 0))
        self.episode: Episode | None = None
        self.buffer: list = []
        self.buffer_info: list = []
        self.rejected = 0
        self.history: list = []

    def _segment(self):
        if self.episode is None or self.episode.done:
            self.episode = start_episode(self.rng, self.cfg, self.step)
        ep = self.episode
        try:
            res = run_episode_segment(ep, self.theta, self.rng, self.cfg, self.step)
        except SegmentError as err:
            logger.warning("meta-step %d: %s; restarting the task", self.step, err)
            self.rejected += 1
            self.episode = None
            return
        ep.params = res.phi_end
        ep.k += 1
        ep.t += res.stats["U"]
        self.buffer.append(res.grad)
        self.buffer_info.append({"J": res.J_mean, "U": res.stats["U"], "K": ep.K, "source": ep.spec.source})

    def train_step(self) -> dict:
        """Collect ``meta_batch`` segment gradients and apply one Adam update."""
        while len(self.buffer) < self.cfg.trainer.meta_batch:
            self._segment()
        grad = average_gradients(self.buffer)
        info = self.buffer_info
        self.theta, upd = adam_step(self.theta, grad, self.step, self.adam, self.cfg.trainer)
        row = {
            "step": self.step,
            "J": float(np.mean([i["J"] for i in info])),
            "grad_norm": upd["grad_norm"],
            "lr": upd["lr"],
            "U": float(np.mean([i["U"] for i in info])),
            "K": info[-1]["K"],
            "source": info[-1]["source"],
            "sources": [i["source"] for i in info],
            "applied": upd["applied"],
            "rejected": self.rejected,
        }
        self.step += 1
        self.buffer, self.buffer_info = [], []
        self.history.append(row)
        return row

    def run(self, n_steps: int, metrics_path=None, checkpoint_fn=None, checkpoint_every: int = 0) -> list:
        rows = []
        sink = open(metrics_path, "a") if metrics_path else None
        try:
            for _ in range(n_steps):
                row = self.train_step()
                rows.append(row)
                if sink:
                    sink.write(json.dumps(row) + "\n")
                    sink.flush()
                if checkpoint_fn and checkpoint_every and self.step % checkpoint_every == 0:
                    checkpoint_fn(self)
        finally:
            if sink:
                sink.close()
        return rows

    # -- persistence ------------------------------------------------------

    def state_dict(self) -> tuple:
        """``(arrays, meta)`` fully describing the trainer for exact resumption."""
        arrays = {f"theta/{k}": v for k, v in self.theta.arrays().items()}
        arrays.update({f"adam_m/{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in self.adam.v.items()})
        for i, g in enumerate(self.buffer):
            arrays.update({f"buffer/{i:04d}/{k}": v for k, v in g.items()})
        meta = {
            "step": self.step,
            "adam_t": self.adam.t,
            "adam_skipped": self.adam.skipped,
            "rejected": self.rejected,
            "rng": self.rng.bit_generator.state,
            "buffer_info": self.buffer_info,
            "episode": None,
        }
        if self.episode is not None:
            ep = self.episode
            arrays.update({f"phi/{k}": v for k, v in ep.params.arrays().items()})
            meta["episode"] = {"spec": ep.spec.to_dict(), "arch": ep.params.arch.to_dict(),
                               "K": ep.K, "k": ep.k, "t": ep.t}
        return arrays, meta

    def load_state_dict(self, arrays: dict, meta: dict) -> None:
        pick = lambda prefix: {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        self.theta = self.theta.replace(pick("theta/"))
        self.adam = AdamState(pick("adam_m/"), pick("adam_v/"), int(meta["adam_t"]), int(meta["adam_skipped"]))
        self.step = int(meta["step"])
        self.rejected = int(meta["rejected"])
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = meta["rng"]
        buf = pick("buffer/")
        n_buf = len({k.split("/")[0] for k in buf})
        self.buffer = [{k.split("/", 1)[1]: v for k, v in buf.items() if k.startswith(f"{i:04d}/")}
                       for i in range(n_buf)]
        self.buffer_info = list(meta.get("buffer_info", []))
        ep = meta.get("episode")
        if ep is None:
            self.episode = None
        else:
            arch = ArchSpec(tuple(ep["arch"]["layer_sizes"]), ep["arch"]["activation"])
            params = BaseParams.from_arrays(arch, pick("phi/"))
            self.episode = Episode(TaskSpec.from_dict(ep["spec"]), params, int(ep["K"]), int(ep["k"]), int(ep["t"]))


def train_sequential(cfg: RunConfig, n_steps: int | None = None, metrics_path=None) -> tuple:
    """Run the reference loop; returns ``(theta, rows, trainer)``."""
    trainer = SequentialTrainer(cfg)
    rows = trainer.run(cfg.trainer.meta_steps if n_steps is None else n_steps, metrics_path)
    return trainer.theta, rows, trainer
