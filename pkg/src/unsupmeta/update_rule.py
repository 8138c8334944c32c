"""The learned, label-free weight update.

One application reads a forward trace of the base model and produces new
``W``, ``V`` and ``b`` for every layer.  All learned pieces live in a single
flat mapping of named arrays (:class:`UpdateRuleParams`).  Their shapes depend
only on :class:`UpdateRuleConfig`, never on the base architecture, which is
what lets one rule drive networks of any depth and width.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .base_model import BaseParams, ForwardTrace, forward
from .tensor import Tensor

INNER_BN_EPS = 1e-5
NORM_EPS = 1e-20

LOWRR_NAMES = ("zero", "rbf", "first", "linLowerSymm", "sqrLowerSymm", "linUpperSymm", "sqrUpperSymm")
N_PLANES = 10


@dataclass(frozen=True)
class UpdateRuleConfig:
    hdims: int = 64
    deltadims: int = 32
    gradc: int = 4
    topdeltasize: int = 64
    computehsize: int = 64
    phi_lr: float = 3e-4
    batch_size: int = 8  # the fixed batch the TopD unit convolutions are built for

    def __post_init__(self):
        for name in ("hdims", "deltadims", "gradc", "topdeltasize", "computehsize"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0 < self.phi_lr <= 1:
            raise ValueError("phi_lr must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def theta_shapes(cfg: UpdateRuleConfig) -> dict:
    """Name -> shape for every meta-parameter."""
    B, tds, dd, hd = cfg.batch_size, cfg.topdeltasize, cfg.deltadims, cfg.hdims
    chs = cfg.computehsize
    shapes = {}
    topd_convs = [(5, 1, tds), (3, tds, B), (3, B, B), (3, B, tds), (3, tds, tds), (3, tds, dd)]
    for i, shp in enumerate(topd_convs):
        shapes[f"topd.conv{i}.w"] = shp
        if i < len(topd_convs) - 1:
            shapes[f"topd.bn{i}.scale"] = (shp[2],)
            shapes[f"topd.bn{i}.offset"] = (shp[2],)
    shapes["topd.conv5.b"] = (dd,)
    n_in = 4 + dd
    shapes["computeh.bn_in.scale"] = (n_in,)
    shapes["computeh.bn_in.offset"] = (n_in,)
    computeh_convs = [(3, 4 + 4 + n_in + 1, chs), (3, chs, chs), (3, chs, chs), (3, chs, hd)]
    for i, shp in enumerate(computeh_convs):
        shapes[f"computeh.conv{i}.w"] = shp
        shapes[f"computeh.bn{i}.scale"] = (shp[2],)
        shapes[f"computeh.bn{i}.offset"] = (shp[2],)
    shapes["errorprop.W"] = (hd, dd)
    shapes["errorprop.b"] = (dd,)
    for name in LOWRR_NAMES:
        shapes[f"lowrr.{name}.Pa"] = (hd, cfg.gradc)
        shapes[f"lowrr.{name}.Pb"] = (hd, cfg.gradc)
    shapes["mergeW"] = (N_PLANES,)
    shapes["b_readout"] = (hd,)
    return shapes


@dataclass
class UpdateRuleParams:
    """Meta-parameters, shared by every layer of every base model."""

    cfg: UpdateRuleConfig
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = theta_shapes(self.cfg)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise T.ShapeError(f"theta does not match config (missing {missing}, unexpected {extra})")
        for name, shp in expected.items():
            t = self.tensors[name]
            if not isinstance(t, Tensor):
                t = self.tensors[name] = Tensor(t)
            if t.shape != tuple(shp):
                raise T.ShapeError(f"{name}: expected shape {shp}, got {t.shape}")

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def names(self) -> list:
        return sorted(self.tensors)

    def arrays(self) -> dict:
        return {k: self.tensors[k].data for k in self.names()}

    def watched(self, tape: T.Tape) -> "UpdateRuleParams":
        return UpdateRuleParams(self.cfg, {k: tape.watch(v.data) for k, v in self.tensors.items()})

    def replace(self, arrays: dict) -> "UpdateRuleParams":
        return UpdateRuleParams(self.cfg, {k: Tensor(np.array(arrays[k])) for k in self.tensors})

    def size(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


def init_theta(cfg: UpdateRuleConfig, seed) -> UpdateRuleParams:
    rng = np.random.default_rng(seed)
    out = {}
    for name in sorted(theta_shapes(cfg)):
        shp = theta_shapes(cfg)[name]
        if name.endswith(".scale"):
            out[name] = np.ones(shp)
        elif name.endswith(".offset") or name.endswith(".b"):
            out[name] = np.zeros(shp)
        elif name == "mergeW":
            out[name] = rng.normal(0.0, 0.1, size=shp)
        elif name.endswith(".w"):
            fan_in = shp[0] * shp[1]
            out[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shp)
        else:
            out[name] = rng.normal(0.0, 1.0 / np.sqrt(shp[0]), size=shp)
    return UpdateRuleParams(cfg, {k: Tensor(v) for k, v in out.items()})


# ------------------------------------------------------------------- blocks


def _bn_relu(m, theta, prefix) -> Tensor:
    return T.batch_norm(m, (0, 1), theta[f"{prefix}.scale"], theta[f"{prefix}.offset"], INNER_BN_EPS, relu=True)


def top_d(xL, theta: UpdateRuleParams) -> Tensor:
    """Top-down signal ``[B, N, deltadims]`` from the embedding ``[B, N]``."""
    xL = T.as_tensor(xL)
    if xL.shape[0] != theta.cfg.batch_size:
        raise T.ShapeError(f"TopD is built for batch {theta.cfg.batch_size}, got {xL.shape[0]}")
    m = T.reshape(xL, xL.shape + (1,))
    m = _bn_relu(T.conv1d_axis(m, theta["topd.conv0.w"], 0), theta, "topd.bn0")
    m = _bn_relu(T.conv1d_axis(m, theta["topd.conv1.w"], 1), theta, "topd.bn1")
    m = _bn_relu(T.conv1d_axis(m, theta["topd.conv2.w"], 1), theta, "topd.bn2")
    m = _bn_relu(T.conv1d_axis(m, theta["topd.conv3.w"], 0), theta, "topd.bn3")
    m = _bn_relu(T.conv1d_axis(m, theta["topd.conv4.w"], 0), theta, "topd.bn4")
    m = T.conv1d_axis(m, theta["topd.conv5.w"], 0)
    return m + T.reshape(theta["topd.conv5.b"], (1, 1, -1))


def positional_embedding(batch: int, n_units: int) -> tuple:
    angle = 2.0 * np.pi * np.arange(n_units) / n_units
    return np.tile(np.sin(angle), (batch, 1)), np.tile(np.cos(angle), (batch, 1))


def weight_stats(w, axis: int) -> Tensor:
    """Stack of (l1 mean, rms, mean, std) along ``axis`` -> ``[remaining, 4]``."""
    return T.stacked_stats(w, axis)


def compute_h(d, x, z, W_in, W_out, b, theta: UpdateRuleParams) -> Tensor:
    """Per-neuron hidden state ``[B, N, hdims]`` for one layer.

    ``W_in`` is the layer's own weight matrix ``[N_prev, N]`` and ``W_out`` the
    one above ``[N, N_next]``; either may be ``None`` (zero stand-in), as may
    ``z`` and ``b`` for the input layer.
    """
    x = T.as_tensor(x)
    B, N = x.shape
    if B != theta.cfg.batch_size:
        raise T.ShapeError(f"ComputeH is built for batch {theta.cfg.batch_size}, got {B}")
    z = Tensor(np.zeros((B, N))) if z is None else T.as_tensor(z)
    p0, p1 = positional_embedding(B, N)
    m0 = T.stack([x, z, Tensor(p0), Tensor(p1)], axis=-1)
    m1 = T.concat([m0, T.as_tensor(d)], axis=-1)
    m2 = T.batch_norm(m1, (0, 1), theta["computeh.bn_in.scale"], theta["computeh.bn_in.offset"], INNER_BN_EPS)
    s0 = Tensor(np.zeros((N, 4))) if W_in is None else weight_stats(W_in, 0)
    s1 = Tensor(np.zeros((N, 4))) if W_out is None else weight_stats(W_out, 1)
    s0 = T.broadcast_to(T.reshape(s0, (1, N, 4)), (B, N, 4))
    s1 = T.broadcast_to(T.reshape(s1, (1, N, 4)), (B, N, 4))
    bias = Tensor(np.zeros((B, N, 1))) if b is None else T.broadcast_to(T.reshape(b, (1, N, 1)), (B, N, 1))
    m = T.concat([s0, s1, m2, bias], axis=-1)
    m = _bn_relu(T.conv1d_axis(m, theta["computeh.conv0.w"], 0), theta, "computeh.bn0")
    m = _bn_relu(T.conv1d_axis(m, theta["computeh.conv1.w"], 1), theta, "computeh.bn1")
    m = _bn_relu(T.conv1d_axis(m, theta["computeh.conv2.w"], 0), theta, "computeh.bn2")
    m = _bn_relu(T.conv1d_axis(m, theta["computeh.conv3.w"], 1), theta, "computeh.bn3")
    return m


def error_signal(d, h, z, theta: UpdateRuleParams) -> Tensor:
    """``delta = d * sigmoid(z) + h @ W_err + b_err``."""
    z = T.as_tensor(z)
    gate = T.reshape(T.sigmoid(z), z.shape + (1,))
    h = T.as_tensor(h)
    B, N, hd = h.shape
    readout = T.reshape(T.matmul(T.reshape(h, (B * N, hd)), theta["errorprop.W"]), (B, N, -1))
    return T.as_tensor(d) * gate + readout + T.reshape(theta["errorprop.b"], (1, 1, -1))


def propagate_down(delta, V) -> Tensor:
    """Carry ``delta`` through backward weights ``V`` and renormalize per (example, unit)."""
    d_tilde = T.einsum("ijd,mj->imd", delta, V)
    return T.rms_normalize(d_tilde, 2, NORM_EPS)


def error_propagate(d, h, z, V, theta: UpdateRuleParams) -> tuple:
    delta = error_signal(d, h, z, theta)
    return delta, propagate_down(delta, V)


def low_rank_readout(h_a, h_b, P_a, P_b) -> Tensor:
    """``out[m, n] = sum_{i,k} (h_a P_a)[i,m,k] (h_b P_b)[i,n,k] / (B * hdims)``."""
    h_a, h_b, P_a, P_b = (T.as_tensor(t) for t in (h_a, h_b, P_a, P_b))
    B, Na, hd = h_a.shape
    Nb = h_b.shape[1]
    gc = P_a.shape[1]
    scale = 1.0 / (B * hd)
    # [Na, B*gc] and [Nb, B*gc] layouts turn the double sum into one matmul
    r_a = (h_a.data.reshape(B * Na, hd) @ P_a.data).reshape(B, Na, gc).transpose(1, 0, 2).reshape(Na, B * gc)
    r_b = (h_b.data.reshape(B * Nb, hd) @ P_b.data).reshape(B, Nb, gc).transpose(1, 0, 2).reshape(Nb, B * gc)
    out = (r_a @ r_b.T) * scale

    def vjp(g, need):
        g = g * scale
        gr_a = (g @ r_b).reshape(Na, B, gc).transpose(1, 0, 2).reshape(B * Na, gc)
        gr_b = (g.T @ r_a).reshape(Nb, B, gc).transpose(1, 0, 2).reshape(B * Nb, gc)
        return (
            (gr_a @ P_a.data.T).reshape(B, Na, hd) if need[0] else None,
            (gr_b @ P_b.data.T).reshape(B, Nb, hd) if need[1] else None,
            h_a.data.reshape(B * Na, hd).T @ gr_a if need[2] else None,
            h_b.data.reshape(B * Nb, hd).T @ gr_b if need[3] else None,
        )

    return T.record(out, (h_a, h_b, P_a, P_b), vjp)


def readouts(h_prev, h, theta: UpdateRuleParams) -> dict:
    """All seven low-rank readouts for one layer (shared by the W and V updates)."""
    out = {}
    for name in LOWRR_NAMES:
        if name in ("zero", "rbf", "first"):
            a, b = h_prev, h
        elif "Lower" in name:
            a, b = h_prev, h_prev
        else:
            a, b = h, h
        out[name] = low_rank_readout(a, b, theta[f"lowrr.{name}.Pa"], theta[f"lowrr.{name}.Pb"])
    return out


def column_normalize(W) -> Tensor:
    return T.rms_normalize(W, 0, NORM_EPS)


def covariance_plane(x_prev, x) -> Tensor:
    x_prev, x = T.as_tensor(x_prev), T.as_tensor(x)
    a = x_prev - T.mean(x_prev, 0, keepdims=True)
    b = x - T.mean(x, 0, keepdims=True)
    return T.matmul(a.T, b) * (1.0 / x.shape[0])


def _symm_offdiag(S, scale: float = 1.0) -> Tensor:
    """``scale * (S + S^T) / sqrt(2)`` with the diagonal zeroed."""
    S = T.as_tensor(S)
    n = S.shape[0]
    mask = (1.0 - np.eye(n)) * (scale / np.sqrt(2.0))
    out = (S.data + S.data.T) * mask

    def vjp(g, need):
        gm = g * mask
        return (gm + gm.T,)

    return T.record(out, (S,), vjp)


def weight_planes(W, lowrr: dict, cov) -> list:
    """The ten basis updates for one weight matrix, in order."""
    W = T.as_tensor(W)
    n_prev, n = W.shape
    W_hat = column_normalize(W)
    W_hat_sq = T.square(W_hat)
    soft = T.sqrt(1.0 + T.square(W)) - 1.0
    S7 = _symm_offdiag(lowrr["linLowerSymm"], 1.0 / np.sqrt(n_prev))
    S8 = _symm_offdiag(lowrr["sqrLowerSymm"], 1.0 / np.sqrt(n_prev))
    S9 = _symm_offdiag(lowrr["linUpperSymm"], 1.0 / np.sqrt(n))
    S10 = _symm_offdiag(lowrr["sqrUpperSymm"], 1.0 / np.sqrt(n))
    return [
        W_hat,
        W_hat_sq * T.sign(W_hat),
        lowrr["zero"],
        T.exp(-W_hat_sq) * lowrr["rbf"],
        W * lowrr["first"],
        T.as_tensor(cov),
        T.matmul(S7, W),
        T.matmul(S8, soft),
        T.matmul(W, S9),
        T.matmul(soft, S10),
    ]


def _soft_normalize(a, axis=None) -> Tensor:
    # a / sqrt(1 + mean(a**2)) is an RMS normalization with unit epsilon
    return T.rms_normalize(a, axis, 1.0)


def merge_planes(planes: list, mergeW) -> Tensor:
    mergeW = T.as_tensor(mergeW)
    if len(planes) != N_PLANES:
        raise ValueError(f"expected {N_PLANES} planes, got {len(planes)}")
    soft = _soft_normalize(T.stack(planes, axis=0), (1, 2))
    return T.einsum("p,pmn->mn", mergeW, soft) * (1.0 / N_PLANES)


def orthogonalize(delta, W) -> Tensor:
    """Remove the component of ``delta`` that grows ``W`` (Frobenius sense)."""
    delta, W = T.as_tensor(delta), T.as_tensor(W)
    dd, wd = delta.data, W.data
    r = np.sqrt(np.sum(wd * wd) + NORM_EPS)
    u = wd / r
    a = np.sum(dd * u)
    active = a > 0
    out = dd - u * a if active else dd.copy()

    def vjp(g, need):
        if not active:
            return (g if need[0] else None, np.zeros_like(wd) if need[1] else None)
        gu_dot = np.sum(g * u)
        g_delta = g - u * gu_dot if need[0] else None
        g_W = None
        if need[1]:
            gu = -g * a - dd * gu_dot
            g_W = gu / r - wd * (np.sum(gu * wd) / r**3)
        return g_delta, g_W

    return T.record(out, (delta, W), vjp)


def merge_and_constrain(planes: list, W, mergeW, return_parts: bool = False):
    merged = merge_planes(planes, mergeW)
    orth = orthogonalize(merged, W)
    final = _soft_normalize(orth)
    if return_parts:
        return final, {"merge": merged, "orth": orth}
    return final


def bias_delta(h, b_readout, return_parts: bool = False):
    h = T.as_tensor(h)
    B, N, hd = h.shape
    per_example = T.reshape(T.matmul(T.reshape(h, (B * N, hd)), T.reshape(b_readout, (hd, 1))), (B, N))
    base = T.mean(per_example, 0)
    constrained = base - T.relu(-T.mean(base))
    final = T.rms_normalize(constrained, 0, NORM_EPS)
    if return_parts:
        return final, {"base": base, "constrained": constrained}
    return final


@dataclass
class Deltas:
    W: list
    b: list
    V: list
    aux: dict = field(default_factory=dict)


def compute_delta_weight(trace: ForwardTrace, params: BaseParams, theta: UpdateRuleParams,
                         keep_aux: bool = False) -> Deltas:
    """Weight, bias and backward-weight targets for every layer."""
    L = trace.n_layers
    xs, zs = trace.x, trace.z
    d = [None] * (L + 1)
    h = [None] * (L + 1)
    delta = [None] * (L + 1)
    d[L] = top_d(xs[L], theta)
    for l in range(L, -1, -1):
        z_l = zs[l - 1] if l >= 1 else None
        W_in = params.W[l - 1] if l >= 1 else None
        W_out = params.W[l] if l < L else None
        b_l = params.b[l - 1] if l >= 1 else None
        h[l] = compute_h(d[l], xs[l], z_l, W_in, W_out, b_l, theta)
        if l >= 1:
            delta[l], d[l - 1] = error_propagate(d[l], h[l], z_l, params.V[l - 1], theta)
    dW, dV, db = [], [], []
    aux = {"d": d, "h": h, "delta": delta, "W_parts": [], "V_parts": []} if keep_aux else {}
    for l in range(1, L + 1):
        lowrr = readouts(h[l - 1], h[l], theta)
        cov = covariance_plane(xs[l - 1], xs[l])
        for target, out, key in ((params.W[l - 1], dW, "W_parts"), (params.V[l - 1], dV, "V_parts")):
            planes = weight_planes(target, lowrr, cov)
            final, parts = merge_and_constrain(planes, target, theta["mergeW"], return_parts=True)
            out.append(final)
            if keep_aux:
                parts["planes"] = planes
                aux[key].append(parts)
        db.append(bias_delta(h[l], theta["b_readout"]))
    return Deltas(dW, db, dV, aux)


def apply_update(params: BaseParams, deltas: Deltas, lr: float) -> BaseParams:
    """Exponential-moving-average step toward the deltas; batch-norm terms untouched."""
    keep = 1.0 - lr
    blend = lambda old, new: old * keep + new * lr
    return BaseParams(
        params.arch,
        [blend(w, dw) for w, dw in zip(params.W, deltas.W)],
        [blend(v, dv) for v, dv in zip(params.V, deltas.V)],
        [blend(b, d) for b, d in zip(params.b, deltas.b)],
        list(params.bn_scale),
        list(params.bn_offset),
    )


def unsupervised_update(x0, params: BaseParams, theta: UpdateRuleParams) -> tuple:
    """One full application of the rule on an unlabeled batch; returns ``(new_params, deltas)``."""
    trace = forward(x0, params)
    deltas = compute_delta_weight(trace, params, theta)
    return apply_update(params, deltas, theta.cfg.phi_lr), deltas
