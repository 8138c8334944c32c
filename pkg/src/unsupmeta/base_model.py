"""The MLP being trained by the learned rule: parameters, init and forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

ACTIVATIONS = ("relu", "leaky_relu", "swish", "tanh", "step")

_ACT_FN = {
    "relu": T.relu,
    "leaky_relu": lambda z: T.leaky_relu(z, 0.01),
    "swish": T.swish,
    "tanh": T.tanh,
    "step": T.step,
}

BN_EPS = 1e-5


@dataclass(frozen=True)
class ArchSpec:
    layer_sizes: tuple
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("an architecture needs an input size and at least one layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.activation not in _ACT_FN:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {ACTIVATIONS}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def embed_dim(self) -> int:
        return self.layer_sizes[-1]

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation}


def sample_arch(rng: np.random.Generator, input_dim: int, hidden_layers=(2, 3), hidden_sizes=(16, 64),
                embed_dim: int = 32, activation: str = "relu") -> ArchSpec:
    """Draw a hidden-layer count uniformly and each width log-uniformly."""
    n_hidden = int(rng.integers(hidden_layers[0], hidden_layers[1] + 1))
    lo, hi = np.log(hidden_sizes[0]), np.log(hidden_sizes[1])
    widths = [int(round(float(np.exp(rng.uniform(lo, hi))))) for _ in range(n_hidden)]
    return ArchSpec((input_dim, *widths, embed_dim), activation)


@dataclass
class BaseParams:
    """Forward weights ``W``, backward weights ``V``, biases ``b`` and frozen BN affine terms.

    Entries are :class:`Tensor` so an unrolled trajectory stays on the tape; a
    fresh ``BaseParams`` built from arrays is a truncation boundary.
    """

    arch: ArchSpec
    W: list
    V: list
    b: list
    bn_scale: list = field(default_factory=list)
    bn_offset: list = field(default_factory=list)

    def detach(self) -> "BaseParams":
        return BaseParams(self.arch, [w.detach() for w in self.W], [v.detach() for v in self.V],
                          [b.detach() for b in self.b], [s.detach() for s in self.bn_scale],
                          [o.detach() for o in self.bn_offset])

    def arrays(self) -> dict:
        out = {}
        for l in range(self.arch.n_layers):
            out[f"W{l + 1}"] = self.W[l].data
            out[f"V{l + 1}"] = self.V[l].data
            out[f"b{l + 1}"] = self.b[l].data
            out[f"bn_scale{l + 1}"] = self.bn_scale[l].data
            out[f"bn_offset{l + 1}"] = self.bn_offset[l].data
        return out

    @classmethod
    def from_arrays(cls, arch: ArchSpec, arrays: dict) -> "BaseParams":
        L = arch.n_layers
        get = lambda k: [Tensor(np.array(arrays[f"{k}{l + 1}"])) for l in range(L)]
        params = cls(arch, get("W"), get("V"), get("b"), get("bn_scale"), get("bn_offset"))
        params.check()
        return params

    def check(self):
        sizes = self.arch.layer_sizes
        for l in range(self.arch.n_layers):
            shape = (sizes[l], sizes[l + 1])
            if self.W[l].shape != shape or self.V[l].shape != shape:
                raise T.ShapeError(f"layer {l + 1}: W/V must be {shape}")
            if self.b[l].shape != (sizes[l + 1],):
                raise T.ShapeError(f"layer {l + 1}: b must be ({sizes[l + 1]},)")


def init_params(arch: ArchSpec, seed) -> BaseParams:
    rng = np.random.default_rng(seed)
    W, V, b, scale, offset = [], [], [], [], []
    for n_in, n_out in zip(arch.layer_sizes[:-1], arch.layer_sizes[1:]):
        std = 1.0 / np.sqrt(n_in)
        W.append(Tensor(rng.normal(0.0, std, size=(n_in, n_out))))
        V.append(Tensor(rng.normal(0.0, std, size=(n_in, n_out))))
        b.append(Tensor(np.zeros(n_out)))
        scale.append(Tensor(np.ones(n_out)))
        offset.append(Tensor(np.zeros(n_out)))
    return BaseParams(arch, W, V, b, scale, offset)


@dataclass
class ForwardTrace:
    x: list  # x[0] is the input, x[l] post-activation of layer l
    z: list  # z[l - 1] is the pre-activation of layer l

    @property
    def n_layers(self) -> int:
        return len(self.z)


def forward(x0, params: BaseParams) -> ForwardTrace:
    x0 = T.as_tensor(x0)
    if x0.ndim != 2:
        raise T.ShapeError(f"input must be [batch, features], got {x0.shape}")
    if x0.shape[0] < 2:
        raise ValueError("batch norm needs a batch of at least 2")
    if x0.shape[1] != params.arch.input_dim:
        raise T.ShapeError(f"input has {x0.shape[1]} features, model expects {params.arch.input_dim}")
    act = _ACT_FN[params.arch.activation]
    xs, zs = [x0], []
    for l in range(params.arch.n_layers):
        pre = T.matmul(xs[-1], params.W[l])
        z = T.batch_norm(pre, (0,), params.bn_scale[l], params.bn_offset[l], BN_EPS) + T.reshape(params.b[l], (1, -1))
        zs.append(z)
        xs.append(act(z))
    return ForwardTrace(xs, zs)


def embed(x0, params: BaseParams) -> Tensor:
    return forward(x0, params).x[-1]
