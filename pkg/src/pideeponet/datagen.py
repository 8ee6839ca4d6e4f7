"""Input-function samplers and the reference solvers used for ground truth."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import solve_banded

from .deeponet import FieldSample

log = logging.getLogger(__name__)

JITTER = 1e-10
MAX_JITTER = 1e-6


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Gaussian random fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GrfSpec:
    """Mean-zero GRF with squared-exponential kernel exp(-|x1-x2|^2 / 2 l^2) on a fixed grid."""

    length_scale: float
    grid: tuple

    def __post_init__(self):
        if self.length_scale <= 0:
            raise ValueError("length scale must be positive")
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 1 or g.size < 1 or np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing")
        object.__setattr__(self, "grid", tuple(float(v) for v in g))

    @classmethod
    def uniform(cls, length_scale: float, m: int, a: float = 0.0, b: float = 1.0) -> "GrfSpec":
        return cls(length_scale, tuple(np.linspace(a, b, m)))

    def covariance(self) -> np.ndarray:
        x = np.asarray(self.grid)
        return np.exp(-0.5 * (x[:, None] - x[None, :]) ** 2 / self.length_scale**2)

    def cholesky(self) -> np.ndarray:
        return _cholesky(self.length_scale, self.grid)


@lru_cache(maxsize=16)
def _cholesky(length_scale: float, grid: tuple) -> np.ndarray:
    K = GrfSpec(length_scale, grid).covariance()
    jitter = JITTER
    eye = np.eye(K.shape[0])
    while True:
        try:
            L = np.linalg.cholesky(K + jitter * eye)
        except np.linalg.LinAlgError:
            L = None
        if L is not None:
            if jitter > JITTER:
                log.info("GRF covariance (l=%g, n=%d) needed jitter %.0e", length_scale, K.shape[0], jitter)
            L.setflags(write=False)
            return L
        jitter *= 10.0
        if jitter > MAX_JITTER * (1 + 1e-9):
            raise np.linalg.LinAlgError(f"Cholesky failed for l={length_scale} even with jitter {MAX_JITTER:g}")


def grf_samples(spec: GrfSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws on the grid, shape (n, m)."""
    L = spec.cholesky()
    z = rng.standard_normal((L.shape[0], n))
    return (L @ z).T


def grf_sample(spec: GrfSpec, rng: np.random.Generator, id: int = 0) -> FieldSample:
    return FieldSample(np.asarray(spec.grid), grf_samples(spec, 1, rng)[0], id)


@dataclass(frozen=True)
class PeriodicGrfSpec:
    """Periodic field on [0, 1) with mode variances amplitude^2 ((2 pi k)^2 + shift^2)^(-power)."""

    amplitude: float = 25.0
    laplacian_shift: float = 5.0
    power: float = 4.0
    modes: int = 49

    def mode_variances(self) -> np.ndarray:
        k = np.arange(self.modes + 1)
        return self.amplitude**2 * ((2 * np.pi * k) ** 2 + self.laplacian_shift**2) ** (-self.power)

    def pointwise_variance(self) -> float:
        return float(self.mode_variances().sum())

    @classmethod
    def for_grid(cls, nx: int, **kw) -> "PeriodicGrfSpec":
        return cls(modes=nx // 2 - 1, **kw)


def periodic_grf_coefficients(spec: PeriodicGrfSpec, rng: np.random.Generator, n: int = 1):
    """Cosine and sine coefficients, each (n, K+1); the k = 0 sine slot is zero."""
    sd = np.sqrt(spec.mode_variances())
    a = rng.standard_normal((n, spec.modes + 1)) * sd
    b = rng.standard_normal((n, spec.modes + 1)) * sd
    b[:, 0] = 0.0
    return a, b


def periodic_field(a: np.ndarray, b: np.ndarray, x) -> np.ndarray:
    """Evaluate sum_k a_k cos(2 pi k x) + b_k sin(2 pi k x); a, b are (K+1,) or (n, K+1)."""
    x = np.asarray(x, dtype=np.float64)
    k = np.arange(np.shape(a)[-1])
    ph = 2 * np.pi * np.multiply.outer(x, k)
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim == 1:
        return np.cos(ph) @ a + np.sin(ph) @ b
    return (np.cos(ph) @ a.T + np.sin(ph) @ b.T).T


def periodic_grf_sample(spec: PeriodicGrfSpec, grid, rng: np.random.Generator, id: int = 0) -> FieldSample:
    a, b = periodic_grf_coefficients(spec, rng)
    grid = np.asarray(grid, dtype=np.float64)
    return FieldSample(grid, periodic_field(a[0], b[0], grid), id)


# ---------------------------------------------------------------------------
# anti-derivative reference
# ---------------------------------------------------------------------------


def solve_antiderivative_rk45(u: FieldSample, atol: float = 1e-9, rtol: float = 1e-9) -> np.ndarray:
    """s(x) = int_0^x u with s(0) = 0, u linearly interpolated between sensors."""
    x = np.asarray(u.sensor_locations, dtype=np.float64)
    vals = np.asarray(u.values, dtype=np.float64)
    if np.any(np.diff(x) <= 0):
        raise ValueError("sensor grid must be increasing")
    if x[0] != 0.0:
        raise ValueError("integration starts at the first sensor, which must be x = 0")
    if not np.any(vals):
        return np.zeros_like(x)
    # one solve per sensor interval: the interpolant has kinks at the sensors,
    # and an RK step straddling a kink loses an order of accuracy
    out = np.zeros_like(x)
    for i in range(len(x) - 1):
        slope = (vals[i + 1] - vals[i]) / (x[i + 1] - x[i])
        sol = solve_ivp(
            lambda t, s, i=i, slope=slope: np.array([vals[i] + slope * (t - x[i])]),
            (x[i], x[i + 1]),
            [out[i]],
            method="RK45",
            atol=atol,
            rtol=rtol,
        )
        if not sol.success:
            raise SolverError(f"RK45 failed on [{x[i]}, {x[i + 1]}]: {sol.message}")
        out[i + 1] = sol.y[0, -1]
    return out


# ---------------------------------------------------------------------------
# diffusion-reaction reference
# ---------------------------------------------------------------------------


def _to_grid(values, locations, x):
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] == x.shape[0] and (locations is None or np.allclose(locations, x)):
        return values
    if locations is None:
        locations = np.linspace(0.0, 1.0, values.shape[-1])
    if values.ndim == 1:
        return np.interp(x, locations, values)
    return np.stack([np.interp(x, locations, v) for v in values])


def solve_diffusion_reaction(
    u,
    D: float = 0.01,
    k: float = 0.01,
    nx: int = 100,
    nt: int = 100,
    source: Callable | None = None,
) -> np.ndarray:
    """Solve s_t = D s_xx + k s^2 + u(x) with zero initial/boundary values on [0,1]^2.

    Crank-Nicolson for diffusion; the reaction and source are evaluated at the
    half step through one predictor-corrector pass.  ``u`` is a FieldSample,
    an array of sensor values (interpolated to the grid), or a batch (B, m).
    ``source(x, t)``, if given, replaces ``u`` with a time-dependent forcing.

    Returns (nx, nt), or (B, nx, nt) for a batch; rows are x, columns t.
    """
    if nx < 3 or nt < 3:
        raise ValueError("need nx, nt >= 3")
    x = np.linspace(0.0, 1.0, nx)
    t = np.linspace(0.0, 1.0, nt)
    dx, dt = x[1] - x[0], t[1] - t[0]
    if source is not None:
        src = None
        batch = False
        B = 1
    else:
        if isinstance(u, FieldSample):
            src = _to_grid(u.values, np.asarray(u.sensor_locations), x)
        else:
            src = _to_grid(u, None, x)
        batch = src.ndim == 2
        src = np.atleast_2d(src)
        B = src.shape[0]
    n = nx - 2
    r = D * dt / (2 * dx * dx)
    ab = np.zeros((3, n))
    ab[0, 1:] = -r
    ab[1, :] = 1 + 2 * r
    ab[2, :-1] = -r
    xi = x[1:-1]

    def forcing(s, tm):
        f = k * s * s
        if source is not None:
            return f + np.asarray(source(xi, tm), dtype=np.float64)[:, None]
        return f + src[:, 1:-1].T

    out = np.zeros((B, nx, nt))
    s = np.zeros((n, B))
    for j in range(nt - 1):
        tm = 0.5 * (t[j] + t[j + 1])
        lap = np.zeros_like(s)
        lap[1:] += s[:-1]
        lap[:-1] += s[1:]
        lap -= 2 * s
        rhs0 = s + r * lap
        pred = solve_banded((1, 1), ab, rhs0 + dt * forcing(s, tm))
        s = solve_banded((1, 1), ab, rhs0 + dt * forcing(0.5 * (s + pred), tm))
        if not np.all(np.isfinite(s)) or np.max(np.abs(s)) > 1e6:
            raise SolverError(f"diffusion-reaction solver diverged at t={t[j + 1]:.4f}")
        out[:, 1:-1, j + 1] = s.T
    return out if batch else out[0]


# ---------------------------------------------------------------------------
# Burgers reference (Fourier pseudo-spectral ETDRK4)
# ---------------------------------------------------------------------------


def fourier_resample(values: np.ndarray, n_out: int) -> np.ndarray:
    """Trigonometric interpolation of periodic samples on a uniform [0,1) grid."""
    values = np.asarray(values, dtype=np.float64)
    n_in = values.shape[-1]
    if n_out == n_in:
        return values.copy()
    c = np.fft.rfft(values, axis=-1) / n_in
    k_keep = min(n_in, n_out) // 2
    out = np.zeros(values.shape[:-1] + (n_out // 2 + 1,), dtype=complex)
    out[..., : k_keep + 1] = c[..., : k_keep + 1]
    # a Nyquist bin is shared between +/- k; halve it when it stops being Nyquist
    if n_in % 2 == 0 and n_out > n_in:
        out[..., n_in // 2] *= 0.5
    if n_out % 2 == 0 and n_out < n_in:
        out[..., n_out // 2] = 2 * out[..., n_out // 2].real
    return np.fft.irfft(out * n_out, n=n_out, axis=-1)


class _Etdrk4:
    def __init__(self, nx, nu, dt, n_contour=32):
        kw = 2 * np.pi * np.arange(nx // 2 + 1)
        self.ik = 1j * kw
        if nx % 2 == 0:
            self.ik[-1] = 0.0
        Lop = -nu * kw**2
        self.E = np.exp(dt * Lop)
        self.E2 = np.exp(dt * Lop / 2)
        roots = np.exp(1j * np.pi * (np.arange(1, n_contour + 1) - 0.5) / n_contour)
        LR = dt * Lop[:, None] + roots[None, :]
        self.Q = dt * np.real(np.mean((np.exp(LR / 2) - 1) / LR, axis=1))
        self.f1 = dt * np.real(np.mean((-4 - LR + np.exp(LR) * (4 - 3 * LR + LR**2)) / LR**3, axis=1))
        self.f2 = dt * np.real(np.mean((2 + LR + np.exp(LR) * (LR - 2)) / LR**3, axis=1))
        self.f3 = dt * np.real(np.mean((-4 - 3 * LR - LR**2 + np.exp(LR) * (4 - LR)) / LR**3, axis=1))
        self.dealias = np.arange(nx // 2 + 1) < (nx / 3.0)
        self.nx = nx

    def nonlinear(self, vh):
        u = np.fft.irfft(vh * self.dealias, n=self.nx)
        return -0.5 * self.ik * np.fft.rfft(u * u)

    def step(self, v):
        Nv = self.nonlinear(v)
        a = self.E2 * v + self.Q * Nv
        Na = self.nonlinear(a)
        b = self.E2 * v + self.Q * Na
        Nb = self.nonlinear(b)
        c = self.E2 * a + self.Q * (2 * Nb - Nv)
        Nc = self.nonlinear(c)
        return self.E * v + Nv * self.f1 + 2 * (Na + Nb) * self.f2 + Nc * self.f3


def solve_burgers_spectral(
    u0,
    nu: float = 0.01,
    nx: int = 128,
    dt: float = 1e-3,
    snapshot_every: float = 0.01,
    t_final: float = 1.0,
    output_nx: int | None = None,
) -> np.ndarray:
    """Integrate s_t + s s_x = nu s_xx on the periodic unit interval.

    ``u0`` holds the initial field on a uniform [0,1) grid (FieldSample or
    array); it is Fourier-interpolated onto ``nx`` solver points.  Returns
    snapshots of shape (output_nx, n_snapshots) with column j at time
    j * snapshot_every; ``output_nx`` defaults to the input grid size.
    """
    if nu <= 0:
        raise ValueError("viscosity must be positive")
    vals = np.asarray(u0.values if isinstance(u0, FieldSample) else u0, dtype=np.float64)
    output_nx = vals.shape[-1] if output_nx is None else output_nx
    steps = snapshot_every / dt
    if abs(steps - round(steps)) > 1e-9:
        raise ValueError("snapshot_every must be a multiple of dt")
    steps = int(round(steps))
    n_snap = int(round(t_final / snapshot_every)) + 1
    v = np.fft.rfft(fourier_resample(vals, nx))
    v0_max = max(np.max(np.abs(v)), 1e-300)
    integ = _Etdrk4(nx, nu, dt)
    snaps = np.empty((n_snap, nx))
    snaps[0] = np.fft.irfft(v, n=nx)
    for j in range(1, n_snap):
        for _ in range(steps):
            v = integ.step(v)
        if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > 1e8 * v0_max:
            raise SolverError(f"Burgers solver blew up before t={j * snapshot_every:.3f}")
        snaps[j] = np.fft.irfft(v, n=nx)
    return fourier_resample(snaps, output_nx).T


# ---------------------------------------------------------------------------
# curves and signed distance
# ---------------------------------------------------------------------------


@dataclass
class BoundaryCurve:
    points: np.ndarray  # (m, 2)
    closed: bool = True

    def as_field(self, id: int = 0) -> FieldSample:
        """Branch representation: the curve points as fixed sensors."""
        return FieldSample(self.points.copy(), self.points.copy(), id)


def sdf_circle(r: float, x, y):
    """Signed distance to the origin-centred circle of radius ``r`` (negative inside)."""
    if r <= 0:
        raise ValueError("radius must be positive")
    return np.hypot(x, y) - r


def circle_sensors(r: float, m: int) -> BoundaryCurve:
    if m < 3:
        raise ValueError("need at least 3 points")
    th = 2 * np.pi * np.arange(m) / m
    return BoundaryCurve(np.column_stack([r * np.cos(th), r * np.sin(th)]), True)


def sample_radii(n: int, rng: np.random.Generator, low: float = 0.5, high: float = 1.5) -> np.ndarray:
    return rng.uniform(low, high, size=n)


def resample_curve(points: np.ndarray, m: int, closed: bool = True) -> np.ndarray:
    """``m`` points equally spaced in arclength along the polyline, in vertex order."""
    pts = np.asarray(points, dtype=np.float64)
    if closed and not np.allclose(pts[0], pts[-1]):
        pts = np.vstack([pts, pts[:1]])
    seg = np.hypot(*np.diff(pts, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        raise ValueError("degenerate curve with zero length")
    target = np.linspace(0.0, s[-1], m, endpoint=not closed)
    return np.column_stack([np.interp(target, s, pts[:, 0]), np.interp(target, s, pts[:, 1])])


def load_airfoil(path, m: int | None = 250) -> BoundaryCurve:
    """Read a Selig-style coordinate file and normalize it.

    An optional non-numeric first line (the airfoil name) is skipped.  The
    curve is resampled by arclength to ``m`` points (``None`` keeps the file
    vertices) and each coordinate shifted and scaled to zero mean and unit
    variance.
    """
    pts = []
    first = True
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.strip()
        if not text:
            continue
        parts = text.replace(",", " ").split()
        try:
            if len(parts) != 2:
                raise ValueError
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError:
            if first and not pts:
                first = False
                continue
            raise ValueError(f"{path}:{lineno}: expected 'x y', got {text!r}") from None
        first = False
    if len(pts) < 3:
        raise ValueError(f"{path}: need at least 3 points, found {len(pts)}")
    arr = np.asarray(pts)
    closed = bool(np.allclose(arr[0], arr[-1], atol=1e-6))
    if closed:
        arr = arr[:-1]
    if m is not None:
        # airfoil outlines close through the trailing edge
        arr = resample_curve(arr, m, closed=True)
    arr = (arr - arr.mean(axis=0)) / arr.std(axis=0)
    return BoundaryCurve(arr, True)
