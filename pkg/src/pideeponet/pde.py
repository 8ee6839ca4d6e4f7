"""Benchmark residuals and composite physics-informed losses.

Every loss takes a ``Batch``: a table of branch inputs (one row per input
function) plus named pools of rows ``(sample index, coordinates, target)``.
Branch features are computed once per distinct sample in the batch; all
coordinate derivatives come from pushing ``Dual2`` jets through the trunk.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .deeponet import DeepOnetParams, FieldSample, branch_features, merge, trunk_features

KINDS = ("antiderivative", "diffusion_reaction", "burgers", "eikonal")

SQRT_EPS = 1e-12


@dataclass
class CollocationSpec:
    """Q residual points and P constraint points per input sample."""

    Q: int
    P: int

    def __post_init__(self):
        if self.Q < 1 or self.P < 1:
            raise ValueError("P and Q must be >= 1")


@dataclass
class PdeProblem:
    kind: str
    constants: dict = field(default_factory=dict)
    weights: dict = field(default_factory=lambda: {"lambda_ic": 1.0})
    collocation: CollocationSpec | None = None

    _REQUIRED = {
        "antiderivative": set(),
        "diffusion_reaction": {"D", "k"},
        "burgers": {"nu"},
        "eikonal": set(),
    }

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown benchmark kind {self.kind!r}")
        if set(self.constants) != self._REQUIRED[self.kind]:
            raise ValueError(f"{self.kind} needs constants {sorted(self._REQUIRED[self.kind])}, got {sorted(self.constants)}")
        if self.weights.get("lambda_ic", 1.0) <= 0:
            raise ValueError("lambda_ic must be positive")

    @classmethod
    def default(cls, kind: str, **kw) -> "PdeProblem":
        constants = {"diffusion_reaction": {"D": 0.01, "k": 0.01}, "burgers": {"nu": 0.01}}.get(kind, {})
        return cls(kind, dict(constants), **kw)

    def loss(self, params, batch: "Batch") -> "LossTerms":
        if self.kind == "antiderivative":
            return loss_antiderivative(params, batch)
        if self.kind == "diffusion_reaction":
            return loss_diffusion_reaction(params, batch, **self.constants)
        if self.kind == "burgers":
            return loss_burgers(params, batch, self.weights.get("lambda_ic", 1.0), **self.constants)
        return loss_eikonal(params, batch)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class RowSet:
    sample: np.ndarray  # (n,) indices into Batch.branch_inputs
    y: np.ndarray  # (n, d)
    target: np.ndarray | None = None  # (n,)

    def __len__(self):
        return self.sample.shape[0]

    def subset(self, idx) -> "RowSet":
        return RowSet(self.sample[idx], self.y[idx], None if self.target is None else self.target[idx])


@dataclass
class Batch:
    branch_inputs: np.ndarray  # (N, m)
    pools: dict

    def subset(self, selections: dict) -> "Batch":
        return Batch(self.branch_inputs, {k: self.pools[k].subset(v) for k, v in selections.items()})


@dataclass
class LossTerms:
    """Unweighted sub-losses, their weights, and the weighted total."""

    total: object
    terms: dict
    weights: dict

    def contributions(self) -> dict:
        """Weighted sub-losses as floats; they add up to ``total``."""
        return {k: self.weights.get(k, 1.0) * float(np.asarray(ad.value_of(v))) for k, v in self.terms.items()}


def _combine(terms: dict, weights: dict) -> LossTerms:
    total = None
    for k, v in terms.items():
        w = weights.get(k, 1.0)
        c = v if w == 1.0 else ad.mul(w, v)
        total = c if total is None else ad.add(total, c)
    return LossTerms(total, terms, weights)


def _branch_rows(params, batch: Batch, pools):
    """Branch features gathered for each requested pool, one net pass total."""
    idx = np.concatenate([batch.pools[p].sample for p in pools])
    uniq, inv = np.unique(idx, return_inverse=True)
    feats = branch_features(params, batch.branch_inputs[uniq])
    out, start = {}, 0
    for p in pools:
        n = len(batch.pools[p])
        out[p] = ad.take(feats, inv[start : start + n], axis=0)
        start += n
    return out


def _jet(y: np.ndarray, second_order: bool = True) -> ad.Dual2:
    """Seed one jet direction per coordinate of ``y`` (n, d)."""
    n, d = y.shape
    seeds = np.broadcast_to(np.eye(d)[:, None, :], (d, n, d)).copy()
    return ad.Dual2(y, seeds, np.zeros((d, n, d)))


def _msq(r):
    return ad.mean(ad.mul(r, r))


def _value(params, b, y):
    return merge(b, trunk_features(params, y))


def _derivs(params, b, y) -> ad.Dual2:
    """Jet of G at rows ``y``: value (n,), d1 (d, n), d2 (d, n)."""
    return merge(b, trunk_features(params, _jet(y)))


def _part(x, k):
    return x[k]


# ---------------------------------------------------------------------------
# anti-derivative
# ---------------------------------------------------------------------------


def _residual_antiderivative_rows(params, b, y, u_at_y):
    g = _derivs(params, b, y)
    return ad.sub(_part(g.d1, 0), u_at_y)


def loss_antiderivative(params: DeepOnetParams, batch: Batch) -> LossTerms:
    """IC misfit at y = 0 plus the ODE residual dG/dy - u at sensor-aligned points."""
    b = _branch_rows(params, batch, ("ic", "residual"))
    ic, res = batch.pools["ic"], batch.pools["residual"]
    g0 = _value(params, b["ic"], ic.y)
    tgt = 0.0 if ic.target is None else ic.target
    r = _residual_antiderivative_rows(params, b["residual"], res.y, res.target)
    return _combine({"ic": _msq(ad.sub(g0, tgt)), "physics": _msq(r)}, {})


# ---------------------------------------------------------------------------
# diffusion-reaction
# ---------------------------------------------------------------------------


def _residual_dr_rows(params, b, y, D, k):
    g = _derivs(params, b, y)
    G = g.value
    return ad.sub(ad.sub(_part(g.d1, 1), ad.mul(D, _part(g.d2, 0))), ad.mul(k, ad.mul(G, G)))


def loss_diffusion_reaction(params: DeepOnetParams, batch: Batch, D: float = 0.01, k: float = 0.01) -> LossTerms:
    """Zero IC/BC misfit ("operator") plus mean squared (R - u(x_r))."""
    b = _branch_rows(params, batch, ("boundary", "residual"))
    bd, res = batch.pools["boundary"], batch.pools["residual"]
    gb = _value(params, b["boundary"], bd.y)
    tgt = 0.0 if bd.target is None else bd.target
    r = ad.sub(_residual_dr_rows(params, b["residual"], res.y, D, k), res.target)
    return _combine({"operator": _msq(ad.sub(gb, tgt)), "physics": _msq(r)}, {})


# ---------------------------------------------------------------------------
# Burgers
# ---------------------------------------------------------------------------


def _residual_burgers_rows(params, b, y, nu):
    g = _derivs(params, b, y)
    G = g.value
    return ad.add(ad.add(_part(g.d1, 1), ad.mul(G, _part(g.d1, 0))), ad.mul(-nu, _part(g.d2, 0)))


def loss_burgers(params: DeepOnetParams, batch: Batch, lambda_ic: float = 1.0, nu: float = 0.01) -> LossTerms:
    """lambda * L_IC + L_BC + L_physics.

    The ``bc`` pool stores times only; both x = 0 and x = 1 copies are
    evaluated and value and slope periodicity are penalized.
    """
    b = _branch_rows(params, batch, ("ic", "bc", "residual"))
    ic, bc, res = batch.pools["ic"], batch.pools["bc"], batch.pools["residual"]
    g_ic = _value(params, b["ic"], ic.y)
    t = bc.y[:, -1]
    n = t.shape[0]
    ends = np.concatenate([np.column_stack([np.zeros(n), t]), np.column_stack([np.ones(n), t])])
    bb = ad.concatenate([b["bc"], b["bc"]], axis=0)
    gj = merge(bb, trunk_features(params, ad.Dual2(ends, np.tile([1.0, 0.0], (1, 2 * n, 1)), np.zeros((1, 2 * n, 2)))))
    gx = _part(gj.d1, 0)
    val_gap = ad.sub(_row_slice(gj.value, 0, n), _row_slice(gj.value, n, 2 * n))
    slope_gap = ad.sub(_row_slice(gx, 0, n), _row_slice(gx, n, 2 * n))
    r = _residual_burgers_rows(params, b["residual"], res.y, nu)
    terms = {
        "ic": _msq(ad.sub(g_ic, ic.target)),
        "bc": ad.add(_msq(val_gap), _msq(slope_gap)),
        "physics": _msq(r),
    }
    return _combine(terms, {"ic": float(lambda_ic)})


def _row_slice(x, start, stop):
    return x[start:stop]


# ---------------------------------------------------------------------------
# Eikonal
# ---------------------------------------------------------------------------


def _residual_eikonal_rows(params, b, y):
    g = _derivs(params, b, y)
    gx, gy = _part(g.d1, 0), _part(g.d1, 1)
    return ad.sqrt(ad.add(ad.add(ad.mul(gx, gx), ad.mul(gy, gy)), SQRT_EPS))


def loss_eikonal(params: DeepOnetParams, batch: Batch) -> LossTerms:
    """Zero level set on the curve points plus mean squared (|grad G| - 1)."""
    b = _branch_rows(params, batch, ("boundary", "residual"))
    bd, res = batch.pools["boundary"], batch.pools["residual"]
    gb = _value(params, b["boundary"], bd.y)
    r = ad.sub(_residual_eikonal_rows(params, b["residual"], res.y), 1.0)
    return _combine({"bc": _msq(gb), "physics": _msq(r)}, {})


# ---------------------------------------------------------------------------
# conventional (data-fitting) loss on constraint rows
# ---------------------------------------------------------------------------


def loss_data(params: DeepOnetParams, batch: Batch, pools=("ic",)) -> LossTerms:
    """Plain mean-squared misfit on the named pools (no physics term)."""
    pools = tuple(p for p in pools if p in batch.pools)
    b = _branch_rows(params, batch, pools)
    rows = [batch.pools[p] for p in pools]
    preds = [_value(params, b[p], r.y) for p, r in zip(pools, rows)]
    pred = preds[0] if len(preds) == 1 else ad.concatenate(preds, axis=0)
    tgt = np.concatenate([r.target if r.target is not None else np.zeros(len(r)) for r in rows])
    return _combine({"operator": _msq(ad.sub(pred, tgt))}, {})


# ---------------------------------------------------------------------------
# single-sample residuals
# ---------------------------------------------------------------------------


def _single(params, u: FieldSample, y):
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    bi = u.branch_input[None, :]
    b = branch_features(params, bi)
    b = np.broadcast_to(b, (y.shape[0], b.shape[-1])) if not isinstance(b, ad.Var) else ad.take(b, np.zeros(y.shape[0], dtype=int))
    return b, y


def _sensor_values(u: FieldSample, x, interpolate: bool):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    loc = np.asarray(u.sensor_locations, dtype=np.float64)
    vals = np.asarray(u.values, dtype=np.float64)
    idx = np.searchsorted(loc, x)
    idx = np.clip(idx, 0, len(loc) - 1)
    left = np.clip(idx - 1, 0, len(loc) - 1)
    hit = np.where(np.isclose(loc[idx], x, rtol=0, atol=1e-12), idx, np.where(np.isclose(loc[left], x, rtol=0, atol=1e-12), left, -1))
    if np.all(hit >= 0):
        return vals[hit]
    if not interpolate:
        raise ValueError("collocation point is not on the sensor grid and interpolation is disabled")
    return np.interp(x, loc, vals)


def residual_antiderivative(params, u: FieldSample, x, interpolate: bool = False):
    """dG/dy(x) - u(x); scalar for scalar ``x``, array for an array of points."""
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if np.any((xs < 0.0) | (xs > 1.0)):
        raise ValueError("x must lie in [0, 1]")
    b, y = _single(params, u, xs[:, None])
    r = ad.value_of(_residual_antiderivative_rows(params, b, y, _sensor_values(u, xs, interpolate)))
    return float(r[0]) if np.ndim(x) == 0 else r


def residual_diffusion_reaction(params, u: FieldSample, x, t, D: float = 0.01, k: float = 0.01):
    """R = dG/dt - D d2G/dx2 - k G^2 (the loss compares R with u(x))."""
    b, y = _single(params, u, np.column_stack([np.atleast_1d(x), np.atleast_1d(t)]))
    r = _residual_dr_rows(params, b, y, D, k)
    return _finite_out(r, x)


def residual_burgers(params, u0: FieldSample, x, t, nu: float = 0.01):
    b, y = _single(params, u0, np.column_stack([np.atleast_1d(x), np.atleast_1d(t)]))
    return _finite_out(_residual_burgers_rows(params, b, y, nu), x)


def residual_eikonal(params, curve: FieldSample, x, y):
    """sqrt(Gx^2 + Gy^2 + eps); the loss penalizes (residual - 1)^2."""
    b, yy = _single(params, curve, np.column_stack([np.atleast_1d(x), np.atleast_1d(y)]))
    return _finite_out(_residual_eikonal_rows(params, b, yy), x)


def _finite_out(r, x):
    r = np.asarray(ad.value_of(r))
    if not np.all(np.isfinite(r)):
        raise ad.AutodiffError("non-finite residual")
    return float(r[0]) if np.ndim(x) == 0 else r


# ---------------------------------------------------------------------------
# collocation pools
# ---------------------------------------------------------------------------


def pools_antiderivative(u_values: np.ndarray, sensors: np.ndarray) -> dict:
    """IC row y = 0 (target 0) and Q = m sensor-aligned residual rows per sample."""
    N, m = u_values.shape
    ids = np.arange(N)
    ic = RowSet(ids.copy(), np.zeros((N, 1)), np.zeros(N))
    res = RowSet(np.repeat(ids, m), np.tile(sensors, N)[:, None], u_values.reshape(-1).copy())
    return {"ic": ic, "residual": res}


def sample_dr_boundary(P: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points on {x=0} U {x=1} U {t=0} of the unit square (t=1 edge excluded).

    The three unit-length edges are chosen with equal probability.
    """
    edge = rng.integers(0, 3, size=P)
    s = rng.uniform(0.0, 1.0, size=P)
    x = np.where(edge == 0, 0.0, np.where(edge == 1, 1.0, s))
    t = np.where(edge == 2, 0.0, s)
    return np.column_stack([x, t])


def pools_diffusion_reaction(u_values: np.ndarray, sensors: np.ndarray, P: int, Q: int, rng) -> dict:
    N, m = u_values.shape
    bd_y = np.concatenate([sample_dr_boundary(P, rng) for _ in range(N)])
    bd = RowSet(np.repeat(np.arange(N), P), bd_y, np.zeros(N * P))
    if Q == m:
        j = np.tile(np.arange(m), N)
    else:
        j = rng.integers(0, m, size=N * Q)
    t = rng.uniform(0.0, 1.0, size=N * Q)
    rows = np.repeat(np.arange(N), Q)
    res = RowSet(rows, np.column_stack([sensors[j], t]), u_values[rows, j])
    return {"boundary": bd, "residual": res}


def pools_burgers(u_values: np.ndarray, sensors: np.ndarray, P: int, Q: int, rng) -> dict:
    N, m = u_values.shape
    if P == m:
        j = np.tile(np.arange(m), N)
    else:
        j = rng.integers(0, m, size=N * P)
    rows = np.repeat(np.arange(N), P)
    ic = RowSet(rows, np.column_stack([sensors[j], np.zeros(N * P)]), u_values[rows, j])
    bc = RowSet(rows.copy(), rng.uniform(0.0, 1.0, size=(N * P, 1)))
    res_rows = np.repeat(np.arange(N), Q)
    res = RowSet(res_rows, rng.uniform(0.0, 1.0, size=(N * Q, 2)))
    return {"ic": ic, "bc": bc, "residual": res}


def pools_eikonal(curves: np.ndarray, Q: int, box: float, rng) -> dict:
    """``curves`` is (N, m, 2); boundary rows are the curve points themselves."""
    N, m, _ = curves.shape
    bd = RowSet(np.repeat(np.arange(N), m), curves.reshape(-1, 2).copy(), np.zeros(N * m))
    res = RowSet(np.repeat(np.arange(N), Q), rng.uniform(-box, box, size=(N * Q, 2)))
    return {"boundary": bd, "residual": res}
