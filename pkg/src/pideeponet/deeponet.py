"""Branch/trunk operator model, row-triplet datasets and error metrics."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .nn import (
    FourierFeatureMap,
    MlpParams,
    ModifiedMlpParams,
    fourier_embed,
    load_arrays,
    net_forward,
    save_arrays,
)

# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class DeepOnetParams:
    """Branch net on sensor values, trunk net on query coordinates.

    The two nets must end in the same latent width ``q``; their outputs are
    merged by a plain dot product (no trailing bias).
    """

    branch: MlpParams | ModifiedMlpParams
    trunk: MlpParams | ModifiedMlpParams
    fourier: FourierFeatureMap | None = None

    def __post_init__(self):
        if self.branch.out_dim != self.trunk.out_dim:
            raise ValueError(f"branch width {self.branch.out_dim} != trunk width {self.trunk.out_dim}")
        if self.fourier is not None and self.fourier.out_dim != self.trunk.in_dim:
            raise ValueError("Fourier embedding size does not match the trunk input")

    @property
    def q(self) -> int:
        return self.branch.out_dim

    @property
    def m(self) -> int:
        return self.branch.in_dim

    @property
    def d(self) -> int:
        if self.fourier is not None:
            return self.fourier.B.shape[1]
        return self.trunk.in_dim

    @classmethod
    def init(
        cls,
        m: int,
        d: int,
        width: int,
        depth: int,
        rng: np.random.Generator,
        backbone: str = "mlp",
        activation: str = "tanh",
        fourier_sigma: float | None = None,
        fourier_features: int | None = None,
        q: int | None = None,
    ) -> "DeepOnetParams":
        """Build both nets with ``depth`` affine layers of ``width`` units.

        ``q`` defaults to ``width``.  For the modified backbone ``depth - 1``
        gated layers sit in front of the affine head.
        """
        q = width if q is None else q
        if depth < 2:
            raise ValueError("depth counts affine layers and must be >= 2")
        fourier = None
        trunk_in = d
        if fourier_sigma is not None:
            fourier = FourierFeatureMap.init(fourier_features or width // 2 or 1, d, fourier_sigma, rng)
            trunk_in = fourier.out_dim

        def make(d_in):
            if backbone == "mlp":
                return MlpParams.init([d_in] + [width] * (depth - 1) + [q], rng, activation)
            if backbone == "modified_mlp":
                return ModifiedMlpParams.init(d_in, width, depth - 1, q, rng, activation)
            raise ValueError(f"unknown backbone {backbone!r}")

        branch = make(m)
        trunk = make(trunk_in)
        return cls(branch, trunk, fourier)

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays only (the Fourier projection is frozen)."""
        out = self.branch.arrays("branch.")
        out.update(self.trunk.arrays("trunk."))
        return out

    def with_arrays(self, arrays) -> "DeepOnetParams":
        new = object.__new__(DeepOnetParams)
        new.branch = self.branch.with_arrays(arrays, "branch.")
        new.trunk = self.trunk.with_arrays(arrays, "trunk.")
        new.fourier = self.fourier
        return new

    def metadata(self) -> dict:
        def describe(net):
            if isinstance(net, ModifiedMlpParams):
                return {
                    "backbone": "modified_mlp",
                    "in": int(net.in_dim),
                    "width": int(net.width),
                    "gated_layers": len(net.hidden),
                    "out": int(net.out_dim),
                    "activation": net.activation,
                }
            return {"backbone": "mlp", "sizes": [int(s) for s in net.sizes()], "activation": net.activation}

        meta = {"branch": describe(self.branch), "trunk": describe(self.trunk), "q": int(self.q)}
        meta["fourier_sigma"] = None if self.fourier is None else self.fourier.sigma
        return meta


def branch_features(params: DeepOnetParams, u):
    return net_forward(params.branch, u)


def trunk_features(params: DeepOnetParams, y):
    """Trunk output for coordinates ``y`` (array, Var or Dual2 jet)."""
    if params.fourier is not None:
        y = fourier_embed(params.fourier, y)
    return net_forward(params.trunk, y)


def merge(b, t):
    """Row-wise dot product of branch features ``b`` with trunk features ``t``."""
    if isinstance(t, ad.Dual2):
        return (t * b).sum(axis=-1)
    return ad.sum(ad.mul(b, t), axis=-1)


def deeponet_eval(params: DeepOnetParams, u, y):
    """G(u)(y) = sum_k b_k(u) t_k(y).

    ``u`` has shape (m,) or (n, m); ``y`` shape (d,) or (n, d).  A single
    ``u`` is broadcast against many ``y`` rows.
    """
    u = np.asarray(u, dtype=np.float64) if not isinstance(u, ad.Var) else u
    y = np.asarray(y, dtype=np.float64) if not isinstance(y, (ad.Var, ad.Dual2)) else y
    if np.shape(ad.value_of(u))[-1] != params.m:
        raise ValueError(f"u has {np.shape(ad.value_of(u))[-1]} sensors, branch expects {params.m}")
    if np.shape(ad.value_of(y))[-1] != params.d:
        raise ValueError(f"y has dimension {np.shape(ad.value_of(y))[-1]}, trunk expects {params.d}")
    b = branch_features(params, u)
    t = trunk_features(params, y)
    bq = np.shape(ad.value_of(b))[-1]
    tq = np.shape(ad.value_of(t))[-1]
    if bq != tq:
        raise ValueError(f"latent width mismatch: branch {bq}, trunk {tq}")
    return merge(b, t)


def save_checkpoint(path, params: DeepOnetParams, extra_metadata: dict | None = None) -> None:
    arrays = dict(params.arrays())
    if params.fourier is not None:
        arrays["fourier.B"] = params.fourier.B
    meta = params.metadata()
    if extra_metadata:
        meta.update(extra_metadata)
    save_arrays(path, arrays, meta)


def params_from_arrays(arrays: dict, meta: dict) -> DeepOnetParams:
    def build(desc, prefix):
        act = desc["activation"]
        if desc["backbone"] == "mlp":
            n = len(desc["sizes"]) - 1
            return MlpParams([(arrays[f"{prefix}{i}.W"], arrays[f"{prefix}{i}.b"]) for i in range(n)], act)
        k = desc["gated_layers"]
        return ModifiedMlpParams(
            (arrays[f"{prefix}U.W"], arrays[f"{prefix}U.b"]),
            (arrays[f"{prefix}V.W"], arrays[f"{prefix}V.b"]),
            [(arrays[f"{prefix}Z{i}.W"], arrays[f"{prefix}Z{i}.b"]) for i in range(k)],
            (arrays[f"{prefix}head.W"], arrays[f"{prefix}head.b"]),
            act,
        )

    fourier = None
    if meta.get("fourier_sigma") is not None:
        fourier = FourierFeatureMap(arrays["fourier.B"], float(meta["fourier_sigma"]))
    return DeepOnetParams(build(meta["branch"], "branch."), build(meta["trunk"], "trunk."), fourier)


def load_checkpoint(path) -> tuple[DeepOnetParams, dict]:
    arrays, meta = load_arrays(path)
    return params_from_arrays(arrays, meta), meta


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class FieldSample:
    """Input function sampled at fixed sensors.

    ``sensor_locations`` is (m,) for 1-D inputs or (m, 2) for curves, whose
    branch input is the flattened point list.
    """

    sensor_locations: np.ndarray
    values: np.ndarray
    id: int = 0

    @property
    def branch_input(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64).reshape(-1)


@dataclass
class QueryPoint:
    y: np.ndarray
    target: float | None = None


@dataclass
class OperatorDataset:
    """Rows of (sample_id, branch_input, y, target) with each sample's block contiguous."""

    sample_ids: np.ndarray  # (N*P,)
    branch_inputs: np.ndarray  # (N*P, m)
    ys: np.ndarray  # (N*P, d)
    targets: np.ndarray | None  # (N*P, 1) or None
    N: int
    P: int

    @property
    def m(self) -> int:
        return self.branch_inputs.shape[1]

    @property
    def d(self) -> int:
        return self.ys.shape[1]

    def __len__(self):
        return self.sample_ids.shape[0]

    def unique_samples(self) -> tuple[np.ndarray, np.ndarray]:
        """One (id, branch_input) per sample, in first-appearance order."""
        ids = self.sample_ids[:: self.P]
        return ids, self.branch_inputs[:: self.P]

    def save(self, path) -> None:
        write_dataset(path, self)

    def to_csv(self, path) -> None:
        export_csv(path, self)


def assemble_dataset(samples: Sequence[FieldSample], queries_per_sample: Sequence[Sequence]) -> OperatorDataset:
    """Lay out N samples with P queries each as N*P contiguous rows.

    Each query is a ``QueryPoint`` or a ``(y, target)`` / ``(y,)`` tuple.
    Targets must be present for all rows or for none.
    """
    if len(samples) != len(queries_per_sample):
        raise ValueError("one query list per sample is required")
    if not samples:
        raise ValueError("empty dataset")
    P = len(queries_per_sample[0])
    if P == 0:
        raise ValueError("each sample needs at least one query")
    ids, us, ys, ts = [], [], [], []
    m = samples[0].branch_input.shape[0]
    for s, queries in zip(samples, queries_per_sample):
        if len(queries) != P:
            raise ValueError(f"ragged dataset: sample {s.id} has {len(queries)} queries, expected {P}")
        u = s.branch_input
        if u.shape[0] != m:
            raise ValueError("all samples must share the sensor count")
        for q in queries:
            if isinstance(q, QueryPoint):
                y, t = q.y, q.target
            else:
                y, t = q[0], (q[1] if len(q) > 1 else None)
            ids.append(s.id)
            us.append(u)
            ys.append(np.atleast_1d(np.asarray(y, dtype=np.float64)))
            ts.append(t)
    have = [t is not None for t in ts]
    if any(have) and not all(have):
        raise ValueError("targets must be given for every row or for none")
    targets = np.asarray(ts, dtype=np.float64).reshape(-1, 1) if all(have) else None
    return OperatorDataset(
        np.asarray(ids, dtype=np.int64),
        np.asarray(us, dtype=np.float64),
        np.asarray(ys, dtype=np.float64),
        targets,
        len(samples),
        P,
    )


def operator_loss(params: DeepOnetParams, dataset: OperatorDataset):
    """Mean squared misfit over all N*P rows."""
    if dataset.targets is None:
        raise ValueError("operator_loss needs targets on every row")
    pred = deeponet_eval(params, dataset.branch_inputs, dataset.ys)
    r = ad.sub(pred, dataset.targets[:, 0])
    return ad.mean(ad.mul(r, r))


def relative_l2(pred, truth) -> float:
    """||pred - truth||_2 / ||truth||_2."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if truth.size == 0:
        raise ValueError("empty input")
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    denom = np.linalg.norm(truth)
    if denom == 0.0:
        raise ZeroDivisionError("relative L2 error undefined for an all-zero truth")
    return float(np.linalg.norm(pred - truth) / denom)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------
#
# Text header line "N m P d has_targets\n", then N*P frames.  Each frame is a
# little-endian uint32 payload length followed by the payload: float64 values
# sample_id, u[0..m), y[0..d) and, if has_targets, the target.


def write_dataset(path, ds: OperatorDataset) -> None:
    has_t = ds.targets is not None
    cols = [ds.sample_ids.astype(np.float64)[:, None], ds.branch_inputs, ds.ys]
    if has_t:
        cols.append(ds.targets)
    table = np.ascontiguousarray(np.hstack(cols), dtype="<f8")
    frame = struct.pack("<I", table.shape[1] * 8)
    with open(path, "wb") as fh:
        fh.write(f"{ds.N} {ds.m} {ds.P} {ds.d} {int(has_t)}\n".encode("ascii"))
        for row in table:
            fh.write(frame)
            fh.write(row.tobytes())


def read_dataset(path) -> OperatorDataset:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    N, m, P, d, has_t = (int(v) for v in data[:nl].split())
    width = 1 + m + d + has_t
    rows = N * P
    body = data[nl + 1 :]
    stride = 4 + 8 * width
    if len(body) != rows * stride:
        raise ValueError(f"{path}: expected {rows} frames of {stride} bytes, found {len(body)} bytes")
    raw = np.frombuffer(body, dtype=np.uint8).reshape(rows, stride)
    lengths = raw[:, :4].copy().view("<u4").ravel()
    if np.any(lengths != 8 * width):
        raise ValueError(f"{path}: corrupt frame length")
    table = raw[:, 4:].copy().view("<f8").reshape(rows, width).astype(np.float64)
    ids = table[:, 0].astype(np.int64)
    return OperatorDataset(
        ids,
        table[:, 1 : 1 + m],
        table[:, 1 + m : 1 + m + d],
        table[:, 1 + m + d :] if has_t else None,
        N,
        P,
    )


def export_csv(path, ds: OperatorDataset) -> None:
    """Lossless text dump (17 significant digits)."""
    header = ["sample_id"] + [f"u{i}" for i in range(ds.m)] + [f"y{i}" for i in range(ds.d)]
    cols = [ds.sample_ids.astype(np.float64)[:, None], ds.branch_inputs, ds.ys]
    if ds.targets is not None:
        header.append("target")
        cols.append(ds.targets)
    table = np.hstack(cols)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in table:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")
