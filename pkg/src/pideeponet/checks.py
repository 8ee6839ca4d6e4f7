"""Oracle suites shared by ``selftest`` and the acceptance tests.

Each check returns a ``CheckResult`` holding the observed figure and the
bound it was held to; nothing here raises on failure.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import datagen, pde
from .deeponet import DeepOnetParams, deeponet_eval


@dataclass
class CheckResult:
    name: str
    value: float
    bound: float
    seconds: float
    detail: str = ""
    at_least: bool = False  # pass when value >= bound instead of value < bound

    @property
    def passed(self) -> bool:
        if not np.isfinite(self.value):
            return False
        return bool(self.value >= self.bound if self.at_least else self.value < self.bound)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        op = ">=" if self.at_least else "<"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{tag} {self.name}: {self.value:.3e} {op} {self.bound:.3g}{extra} [{self.seconds:.1f}s]"


# ---------------------------------------------------------------------------
# tiny problems for gradient checks
# ---------------------------------------------------------------------------


def tiny_problem(kind: str, rng: np.random.Generator, width: int = 4, depth: int = 2, backbone: str = "mlp",
                 activation: str = "tanh", n_samples: int = 3, m: int = 8):
    """Random tiny DeepONet plus a small batch with every pool of ``kind``."""
    if kind == "antiderivative":
        sensors = np.linspace(0.0, 1.0, m)
        U = rng.standard_normal((n_samples, m))
        pools = pde.pools_antiderivative(U, sensors)
        d = 1
    elif kind == "diffusion_reaction":
        sensors = np.linspace(0.0, 1.0, m)
        U = rng.standard_normal((n_samples, m))
        pools = pde.pools_diffusion_reaction(U, sensors, 4, 5, rng)
        d = 2
    elif kind == "burgers":
        sensors = np.arange(m) / m
        U = rng.standard_normal((n_samples, m))
        pools = pde.pools_burgers(U, sensors, 4, 5, rng)
        d = 2
    elif kind == "eikonal":
        radii = rng.uniform(0.5, 1.5, n_samples)
        curves = np.stack([datagen.circle_sensors(r, m).points for r in radii])
        U = curves.reshape(n_samples, -1)
        pools = pde.pools_eikonal(curves, 5, 2.0, rng)
        d = 2
    else:
        raise ValueError(f"unknown benchmark {kind!r}")
    params = DeepOnetParams.init(U.shape[1], d, width, depth, rng, backbone=backbone, activation=activation)
    # small random biases so the zero-bias init does not hide bias gradients
    arrays = {k: v + (0.1 * rng.standard_normal(v.shape) if k.endswith(".b") else 0.0) for k, v in params.arrays().items()}
    params = params.with_arrays(arrays)
    problem = pde.PdeProblem.default(kind, weights={"lambda_ic": 3.0})
    return params, pde.Batch(U, pools), problem


def flat(arrays: dict) -> np.ndarray:
    return np.concatenate([np.ravel(arrays[k]) for k in sorted(arrays)])


def unflat(template: dict, vec: np.ndarray) -> dict:
    out, pos = {}, 0
    for k in sorted(template):
        n = template[k].size
        out[k] = vec[pos : pos + n].reshape(template[k].shape)
        pos += n
    return out


def loss_value(params, problem, batch, arrays) -> float:
    return float(np.asarray(ad.value_of(problem.loss(params.with_arrays(arrays), batch).total)))


def gradient_check(kind: str, n_points: int = 20, seed: int = 0, h: float = 1e-6, **tiny_kw) -> CheckResult:
    """Reverse-mode gradient vs central differences over every parameter.

    Error at a point is ||g - fd|| / ||fd||; the result keeps the worst point.
    """
    start = time.perf_counter()
    rng = np.random.default_rng([seed, 17])
    worst = 0.0
    for _ in range(n_points):
        params, batch, problem = tiny_problem(kind, rng, **tiny_kw)
        arrays = params.arrays()
        grads = ad.reverse_grad(lambda a, b: problem.loss(params.with_arrays(a), b).total, arrays, batch)
        g = flat(grads)
        x0 = flat(arrays)
        fd = np.empty_like(x0)
        for i in range(x0.size):
            e = np.zeros_like(x0)
            e[i] = h
            fd[i] = (loss_value(params, problem, batch, unflat(arrays, x0 + e))
                     - loss_value(params, problem, batch, unflat(arrays, x0 - e))) / (2 * h)
        worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
    tags = ",".join(str(v) for v in tiny_kw.values())
    name = f"gradient {kind}" + (f" [{tags}]" if tags else "")
    return CheckResult(name, worst, 1e-5, time.perf_counter() - start, f"{n_points} points")


# ---------------------------------------------------------------------------
# second derivatives through the trunk
# ---------------------------------------------------------------------------


def second_derivative_check(n_points: int = 50, seed: int = 0, h: float = 1e-3, backbone: str = "mlp",
                            fourier_sigma: float | None = None) -> CheckResult:
    """Jet d2G/dx2 of a random (x, t) surrogate vs a 5-point stencil."""
    start = time.perf_counter()
    rng = np.random.default_rng([seed, 29])
    params = DeepOnetParams.init(10, 2, 16, 3, rng, backbone=backbone, fourier_sigma=fourier_sigma,
                                 fourier_features=8 if fourier_sigma else None)
    u = rng.standard_normal(10)
    y = rng.uniform(0.0, 1.0, size=(n_points, 2))
    jet = ad.Dual2(y, np.tile([1.0, 0.0], (1, n_points, 1)), np.zeros((1, n_points, 2)))
    b = np.broadcast_to(u, (n_points, 10))
    d2 = np.asarray(deeponet_eval(params, b, jet).d2[0])

    def g(dx):
        return np.asarray(deeponet_eval(params, b, y + np.array([dx, 0.0])))

    fd = (-g(2 * h) + 16 * g(h) - 30 * g(0.0) + 16 * g(-h) - g(-2 * h)) / (12 * h * h)
    worst = float(np.max(np.abs(d2 - fd) / np.abs(fd)))
    tag = backbone + (f",fourier {fourier_sigma:g}" if fourier_sigma else "")
    return CheckResult(f"second derivative [{tag}]", worst, 1e-4, time.perf_counter() - start, f"{n_points} points")


# ---------------------------------------------------------------------------
# solver oracles
# ---------------------------------------------------------------------------


def rk45_sine_check(m: int = 2001) -> CheckResult:
    """s' = cos(2 pi x), s(0) = 0 against sin(2 pi x) / (2 pi)."""
    start = time.perf_counter()
    x = np.linspace(0.0, 1.0, m)
    s = datagen.solve_antiderivative_rk45(datagen.FieldSample(x, np.cos(2 * np.pi * x)))
    err = float(np.max(np.abs(s - np.sin(2 * np.pi * x) / (2 * np.pi))))
    return CheckResult("rk45 sine antiderivative", err, 1e-6, time.perf_counter() - start, f"m={m}")


def dr_manufactured_check(grids=(50, 100, 200), D: float = 0.01, k: float = 0.01) -> CheckResult:
    """Smallest observed order of the diffusion-reaction scheme on s = t sin(pi x)."""
    start = time.perf_counter()
    errs = []
    for n in grids:
        x = np.linspace(0.0, 1.0, n)
        t = np.linspace(0.0, 1.0, n)

        def exact(xx, tt):
            return tt * np.sin(np.pi * xx)

        def source(xx, tt):
            s = exact(xx, tt)
            return np.sin(np.pi * xx) + D * np.pi**2 * s - k * s * s

        S = datagen.solve_diffusion_reaction(None, D, k, nx=n, nt=n, source=source)
        X, T = np.meshgrid(x, t, indexing="ij")
        errs.append(float(np.max(np.abs(S - exact(X, T)))))
    orders = [np.log(errs[i] / errs[i + 1]) / np.log(grids[i + 1] / grids[i]) for i in range(len(grids) - 1)]
    return CheckResult("diffusion-reaction convergence order", float(min(orders)), 1.9, time.perf_counter() - start,
                       "orders " + ", ".join(f"{o:.3f}" for o in orders), at_least=True)


def burgers_self_convergence_check(seed: int = 0) -> CheckResult:
    """Relative L2 gap at t = 1 between (nx=128, dt=1e-3) and (nx=256, dt=2.5e-4), read on 100 points."""
    start = time.perf_counter()
    rng = np.random.default_rng([seed, 41])
    spec = datagen.PeriodicGrfSpec.for_grid(100)
    x = np.arange(100) / 100
    a, b = datagen.periodic_grf_coefficients(spec, rng, 1)
    u0 = datagen.periodic_field(a, b, x)[0] + 0.5 * np.sin(2 * np.pi * x)
    coarse = datagen.solve_burgers_spectral(u0, nx=128, dt=1e-3, output_nx=100)[:, -1]
    fine = datagen.solve_burgers_spectral(u0, nx=256, dt=2.5e-4, output_nx=100)[:, -1]
    err = float(np.linalg.norm(coarse - fine) / np.linalg.norm(fine))
    return CheckResult("burgers self-convergence", err, 1e-4, time.perf_counter() - start)


def circle_sdf_check() -> CheckResult:
    start = time.perf_counter()
    worst = 0.0
    for r in (0.5, 1.0, 1.37):
        phi = np.linspace(0.0, 2 * np.pi, 97)
        for rho in (0.0, 0.3, r, 1.9):
            x, y = rho * np.cos(phi), rho * np.sin(phi)
            worst = max(worst, float(np.max(np.abs(datagen.sdf_circle(r, x, y) - (rho - r)))))
    return CheckResult("circle signed distance", worst, 1e-12, time.perf_counter() - start)


def solver_checks() -> list[CheckResult]:
    return [rk45_sine_check(), dr_manufactured_check(), burgers_self_convergence_check(), circle_sdf_check()]


def gradient_checks(n_points: int = 20) -> list[CheckResult]:
    return [gradient_check(k, n_points) for k in pde.KINDS]
