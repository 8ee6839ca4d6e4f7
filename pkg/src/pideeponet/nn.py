"""Network building blocks: MLP, gated (modified) MLP, Fourier features, Adam."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("tanh", "elu", "relu")

_ACT = {"tanh": ad.tanh, "elu": ad.elu, "relu": ad.relu}


def activation_fn(name: str):
    try:
        return _ACT[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}") from None


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def glorot_normal_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Weight matrix of shape ``(fan_out, fan_in)`` with entries N(0, 2/(fan_in+fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be >= 1")
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return std * rng.standard_normal((fan_out, fan_in))


def _dense(fan_in, fan_out, rng):
    return glorot_normal_init(fan_in, fan_out, rng), np.zeros(fan_out)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    """Plain fully-connected net.  ``layers[i] = (W, b)`` with ``W`` shaped (out, in)."""

    layers: list
    activation: str = "tanh"

    def __post_init__(self):
        activation_fn(self.activation)
        for (W0, _), (W1, _) in zip(self.layers, self.layers[1:]):
            if np.shape(W1)[1] != np.shape(W0)[0]:
                raise ValueError("adjacent layer dimensions do not chain")

    @classmethod
    def init(cls, sizes, rng, activation="tanh") -> "MlpParams":
        """``sizes = [in, h1, ..., out]``; one affine layer per consecutive pair."""
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        return cls([_dense(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])], activation)

    @property
    def in_dim(self):
        return np.shape(self.layers[0][0])[1]

    @property
    def out_dim(self):
        return np.shape(self.layers[-1][0])[0]

    def sizes(self):
        return [self.in_dim] + [np.shape(W)[0] for W, _ in self.layers]

    def arrays(self, prefix=""):
        out = {}
        for i, (W, b) in enumerate(self.layers):
            out[f"{prefix}{i}.W"] = W
            out[f"{prefix}{i}.b"] = b
        return out

    def with_arrays(self, arrays, prefix=""):
        layers = [(arrays[f"{prefix}{i}.W"], arrays[f"{prefix}{i}.b"]) for i in range(len(self.layers))]
        new = object.__new__(MlpParams)
        new.layers, new.activation = layers, self.activation
        return new


@dataclass
class ModifiedMlpParams:
    """Gated MLP: two encoder streams U, V mixed by per-layer gates Z."""

    u_gate: tuple
    v_gate: tuple
    hidden: list
    head: tuple
    activation: str = "tanh"

    def __post_init__(self):
        activation_fn(self.activation)
        width = np.shape(self.u_gate[0])[0]
        if np.shape(self.v_gate[0])[0] != width:
            raise ValueError("U and V encoders must share a width")
        d_in = np.shape(self.u_gate[0])[1]
        prev = d_in
        for W, _ in self.hidden:
            if np.shape(W) != (width, prev):
                raise ValueError("modified MLP hidden layers must all have the encoder width")
            prev = width
        if np.shape(self.head[0])[1] != width:
            raise ValueError("head input must equal the hidden width")

    @classmethod
    def init(cls, d_in, width, n_hidden, d_out, rng, activation="tanh") -> "ModifiedMlpParams":
        if n_hidden < 1:
            raise ValueError("need at least one gated layer")
        u = _dense(d_in, width, rng)
        v = _dense(d_in, width, rng)
        hidden = [_dense(d_in if k == 0 else width, width, rng) for k in range(n_hidden)]
        return cls(u, v, hidden, _dense(width, d_out, rng), activation)

    @property
    def in_dim(self):
        return np.shape(self.u_gate[0])[1]

    @property
    def out_dim(self):
        return np.shape(self.head[0])[0]

    @property
    def width(self):
        return np.shape(self.u_gate[0])[0]

    def arrays(self, prefix=""):
        out = {
            f"{prefix}U.W": self.u_gate[0],
            f"{prefix}U.b": self.u_gate[1],
            f"{prefix}V.W": self.v_gate[0],
            f"{prefix}V.b": self.v_gate[1],
        }
        for k, (W, b) in enumerate(self.hidden):
            out[f"{prefix}Z{k}.W"] = W
            out[f"{prefix}Z{k}.b"] = b
        out[f"{prefix}head.W"] = self.head[0]
        out[f"{prefix}head.b"] = self.head[1]
        return out

    def with_arrays(self, arrays, prefix=""):
        new = object.__new__(ModifiedMlpParams)
        new.u_gate = (arrays[f"{prefix}U.W"], arrays[f"{prefix}U.b"])
        new.v_gate = (arrays[f"{prefix}V.W"], arrays[f"{prefix}V.b"])
        new.hidden = [(arrays[f"{prefix}Z{k}.W"], arrays[f"{prefix}Z{k}.b"]) for k in range(len(self.hidden))]
        new.head = (arrays[f"{prefix}head.W"], arrays[f"{prefix}head.b"])
        new.activation = self.activation
        return new


@dataclass
class FourierFeatureMap:
    """Frozen random projection ``v -> [cos(Bv); sin(Bv)]``."""

    B: np.ndarray
    sigma: float

    @classmethod
    def init(cls, n_features, d, sigma, rng) -> "FourierFeatureMap":
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        return cls(sigma * rng.standard_normal((n_features, d)), float(sigma))

    @property
    def out_dim(self):
        return 2 * self.B.shape[0]


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _in_dim(x):
    v = ad.value_of(x)
    return np.shape(v)[-1]


def mlp_forward(params: MlpParams, x):
    """Affine + activation for every layer but the last, which stays affine.

    ``x`` may be an array of shape (..., in), a tape ``Var`` or a ``Dual2``.
    """
    if _in_dim(x) != params.in_dim:
        raise ValueError(f"input has {_in_dim(x)} features, network expects {params.in_dim}")
    act = activation_fn(params.activation)
    h = x
    for W, b in params.layers[:-1]:
        h = act(ad.linear(h, W, b))
    W, b = params.layers[-1]
    return ad.linear(h, W, b)


def modified_mlp_forward(params: ModifiedMlpParams, x):
    """Gated forward pass.

    U = act(x W_u + b_u), V = act(x W_v + b_v), H_1 = x;
    Z_k = act(H_k W_k + b_k), H_{k+1} = (1 - Z_k) * U + Z_k * V;
    output = H_{L+1} W + b.
    """
    if _in_dim(x) != params.in_dim:
        raise ValueError(f"input has {_in_dim(x)} features, network expects {params.in_dim}")
    act = activation_fn(params.activation)
    U = act(ad.linear(x, *params.u_gate))
    V = act(ad.linear(x, *params.v_gate))
    diff = ad.sub(V, U)
    h = x
    for W, b in params.hidden:
        z = act(ad.linear(h, W, b))
        # (1 - z) U + z V == U + z (V - U)
        h = ad.add(U, ad.mul(z, diff))
    return ad.linear(h, *params.head)


def fourier_embed(fmap: FourierFeatureMap, v):
    """``[cos(Bv); sin(Bv)]`` along the last axis."""
    if isinstance(v, ad.Dual2):
        p = v.linear(fmap.B)
        c, s = p.cos(), p.sin()
        return ad.Dual2(*(ad.concatenate([a, b], axis=-1) for a, b in ((c.value, s.value), (c.d1, s.d1), (c.d2, s.d2))))
    p = ad.linear(v, fmap.B)
    return ad.concatenate([ad.cos(p), ad.sin(p)], axis=-1)


def net_forward(params, x):
    if isinstance(params, ModifiedMlpParams):
        return modified_mlp_forward(params, x)
    return mlp_forward(params, x)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def learning_rate(base_lr: float, iteration: int, decay_rate: float = 0.9, decay_steps: int = 1000) -> float:
    """Continuous exponential decay ``base_lr * decay_rate ** (iteration / decay_steps)``."""
    return base_lr * decay_rate ** (iteration / decay_steps)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], base_lr=1e-3) -> "AdamState":
        return cls(
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
            0,
            base_lr,
        )


def adam_step(state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], iteration: int):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Inputs are left untouched.  Keys are processed independently so the
    result does not depend on dictionary order.
    """
    if set(params) != set(grads) or set(params) != set(state.m):
        raise KeyError("parameter, gradient and optimizer-state keys differ")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
        if np.shape(g) != np.shape(params[k]):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[k])} for {k!r}")
    step = state.step + 1
    lr = learning_rate(state.base_lr, iteration)
    c1 = 1.0 - state.beta1**step
    c2 = 1.0 - state.beta2**step
    new_p, new_m, new_v = {}, {}, {}
    for k in params:
        g = grads[k]
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        new_p[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, step, state.base_lr, state.beta1, state.beta2, state.eps)


# ---------------------------------------------------------------------------
# checkpoint archive
# ---------------------------------------------------------------------------

_MAGIC = b"PIDONCK1"


def save_arrays(path, arrays: Mapping[str, np.ndarray], metadata: dict) -> None:
    """Write named float64 arrays plus a JSON header to a flat binary archive.

    Layout: magic, u64 header length, UTF-8 JSON header (metadata and an
    ordered index of ``{name, shape}``), then each array as row-major
    little-endian float64 in index order.
    """
    index = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = json.dumps({"metadata": metadata, "arrays": index}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for k, v in arrays.items():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint archive")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    pos = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after last array")
    return arrays, header["metadata"]
