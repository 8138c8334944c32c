"""In-process parameter server with asynchronous workers.

Workers fetch an immutable snapshot of the rule parameters, run one truncated
segment against it and submit the gradient.  The server buffers messages and,
once ``meta_batch`` have arrived, applies their mean with clipped Adam and
bumps its version.  Gradients computed against an older version are accepted
as is; their staleness is recorded.

Two drivers exist.  ``deterministic`` steps worker generators with a seeded
cooperative scheduler, so a run is reproducible; ``free`` runs each worker in
its own thread.
"""

from __future__ import annotations

import json
import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .trainer import (AdamState, SegmentError, adam_step, average_gradients, run_episode_segment,
                      start_episode, worker_seed, theta_seed)
from .update_rule import UpdateRuleParams, init_theta


class ServerStopped(RuntimeError):
    pass


class WorkerError(RuntimeError):
    def __init__(self, worker_id: int, cause: BaseException):
        super().__init__(f"worker {worker_id} failed: {cause!r}")
        self.worker_id = worker_id
        self.cause = cause


@dataclass
class GradientMessage:
    grad: dict
    theta_version: int
    worker_id: int
    J: float
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """JSON-ready form (arrays as nested lists)."""
        return {"grad": {k: np.asarray(v).tolist() for k, v in sorted(self.grad.items())},
                "theta_version": self.theta_version, "worker_id": self.worker_id, "J": self.J,
                "info": self.info}

    @classmethod
    def from_dict(cls, d: dict) -> "GradientMessage":
        return cls({k: np.asarray(v, dtype=np.float64) for k, v in d["grad"].items()},
                   int(d["theta_version"]), int(d["worker_id"]), float(d["J"]), dict(d.get("info", {})))


@dataclass
class Ack:
    accepted: bool
    applied: bool
    new_version: int
    reason: str = ""


class ParameterServer:
    """Single-writer owner of the rule parameters and the Adam state."""

    def __init__(self, theta: UpdateRuleParams, cfg: RunConfig, max_applies: int | None = None,
                 metrics_path=None):
        self.cfg = cfg
        self.meta_batch = cfg.trainer.meta_batch
        self._theta = theta
        self._shapes = {k: v.shape for k, v in theta.arrays().items()}
        self.adam = AdamState.zeros(theta)
        self.version = 0
        self.max_applies = max_applies
        self.buffer: list = []
        self.staleness = Counter()
        self.received = 0
        self.applied = 0
        self.rejected = 0
        self.segment_failures = 0
        self.history: list = []
        self._lock = threading.Lock()
        self._stopped = threading.Event()
        self._metrics = open(metrics_path, "w") if metrics_path else None

    # -- reader side -------------------------------------------------------

    @property
    def stopped(self) -> bool:
        return self._stopped.is_set()

    def fetch(self) -> tuple:
        """``(version, theta)``; the parameters object is never mutated afterwards."""
        with self._lock:
            if self.stopped:
                raise ServerStopped()
            return self.version, self._theta

    @property
    def theta(self) -> UpdateRuleParams:
        with self._lock:
            return self._theta

    # -- writer side -------------------------------------------------------

    def _reject(self, reason: str) -> Ack:
        self.rejected += 1
        return Ack(False, False, self.version, reason)

    def submit(self, msg: GradientMessage) -> Ack:
        with self._lock:
            if self.stopped:
                raise ServerStopped()
            self.received += 1
            if msg.theta_version > self.version or msg.theta_version < 0:
                return self._reject("unknown theta version")
            if set(msg.grad) != set(self._shapes) or any(
                    np.shape(msg.grad[k]) != s for k, s in self._shapes.items()):
                return self._reject("gradient shapes do not match theta")
            if not all(np.all(np.isfinite(g)) for g in msg.grad.values()) or not np.isfinite(msg.J):
                return self._reject("non-finite gradient")
            self.staleness[self.version - msg.theta_version] += 1
            self.buffer.append(msg)
            if len(self.buffer) < self.meta_batch:
                return Ack(True, False, self.version)
            self._apply()
            if self.max_applies is not None and self.applied >= self.max_applies:
                self._stopped.set()
            return Ack(True, True, self.version)

    def _apply(self) -> None:
        batch = self.buffer
        grad = average_gradients([m.grad for m in batch])
        self._theta, upd = adam_step(self._theta, grad, self.version, self.adam, self.cfg.trainer)
        row = {
            "version": self.version + 1,
            "mean_J": float(np.mean([m.J for m in batch])),
            "grad_norm": upd["grad_norm"],
            "lr": upd["lr"],
            "adam_applied": upd["applied"],
            "staleness_histogram_bins": {str(k): v for k, v in sorted(Counter(
                self.version - m.theta_version for m in batch).items())},
            "workers": [m.worker_id for m in batch],
        }
        self.version += 1
        self.applied += 1
        self.buffer = []
        self.history.append(row)
        if self._metrics:
            self._metrics.write(json.dumps(row) + "\n")
            self._metrics.flush()

    def note_segment_failure(self) -> None:
        with self._lock:
            self.segment_failures += 1

    def stop(self) -> None:
        self._stopped.set()

    def close(self) -> None:
        self.stop()
        if self._metrics:
            self._metrics.close()
            self._metrics = None

    def ledger(self) -> dict:
        with self._lock:
            return {
                "received": self.received,
                "applied": self.applied,
                "meta_batch": self.meta_batch,
                "buffered": len(self.buffer),
                "rejected": self.rejected,
                "balanced": self.received == self.applied * self.meta_batch + len(self.buffer) + self.rejected,
                "segment_failures": self.segment_failures,
            }


def worker_loop(worker_id: int, server: ParameterServer, cfg: RunConfig, seed=None):
    """Generator running one worker.

    It yields once after fetching a snapshot and once after submitting, which
    lets a cooperative scheduler interleave workers between the two.  Returns
    when the server stops.
    """
    rng = np.random.default_rng(worker_seed(cfg.seed if seed is None else seed, worker_id))
    episode = None
    while True:
        try:
            version, theta = server.fetch()
        except ServerStopped:
            return
        yield ("fetched", version)
        if episode is None or episode.done:
            episode = start_episode(rng, cfg, version)
        try:
            res = run_episode_segment(episode, theta, rng, cfg, version)
        except SegmentError:
            episode = None
            server.note_segment_failure()
            yield ("failed", version)
            continue
        episode.params = res.phi_end
        episode.k += 1
        episode.t += res.stats["U"]
        msg = GradientMessage(res.grad, version, worker_id, res.J_mean,
                              {"U": res.stats["U"], "K": episode.K, "source": episode.spec.source})
        try:
            ack = server.submit(msg)
        except ServerStopped:
            return
        yield ("submitted", ack)


@dataclass
class ClusterResult:
    theta: UpdateRuleParams
    version: int
    ledger: dict
    staleness: dict
    history: list


def run_cluster(n_workers: int, cfg: RunConfig, mode: str = "deterministic", n_applies: int = 100,
                metrics_path=None, theta: UpdateRuleParams | None = None, scheduler_seed=None) -> ClusterResult:
    if n_workers < 1:
        raise ValueError("need at least one worker")
    if mode not in ("deterministic", "free"):
        raise ValueError(f"unknown mode {mode!r}")
    theta = theta if theta is not None else init_theta(cfg.rule, theta_seed(cfg.seed))
    server = ParameterServer(theta, cfg, max_applies=n_applies, metrics_path=metrics_path)
    try:
        if n_applies > 0:
            if mode == "deterministic":
                _run_deterministic(server, n_workers, cfg, scheduler_seed)
            else:
                _run_free(server, n_workers, cfg)
    finally:
        server.close()
    return ClusterResult(server.theta, server.version, server.ledger(), dict(server.staleness), server.history)


def _run_deterministic(server: ParameterServer, n_workers: int, cfg: RunConfig, scheduler_seed) -> None:
    gens = {w: worker_loop(w, server, cfg) for w in range(n_workers)}
    sched = np.random.default_rng([cfg.seed if scheduler_seed is None else scheduler_seed, 0x5C4E])
    while gens and not server.stopped:
        for w in sched.permutation(sorted(gens)):
            w = int(w)
            try:
                next(gens[w])
            except StopIteration:
                del gens[w]
            except Exception as err:
                raise WorkerError(w, err) from err
            if server.stopped:
                break
    if not server.stopped:
        raise RuntimeError("all workers exited before the server stopped")


def _run_free(server: ParameterServer, n_workers: int, cfg: RunConfig) -> None:
    errors: list = []

    def target(w):
        try:
            for _ in worker_loop(w, server, cfg):
                if errors:
                    return
        except Exception as err:  # surfaced to the caller below
            errors.append(WorkerError(w, err))
            server.stop()

    threads = [threading.Thread(target=target, args=(w,), name=f"worker-{w}", daemon=True)
               for w in range(n_workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
