"""Configuration, data generation, training loop, evaluation and prediction."""
from __future__ import annotations

import configparser
import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datagen, pde
from .deeponet import DeepOnetParams, relative_l2, save_checkpoint, trunk_features, branch_features
from .nn import AdamState, adam_step, learning_rate, load_arrays, save_arrays

log = logging.getLogger(__name__)

METRICS_HEADER = ["iteration", "total", "ic", "bc", "physics", "operator", "lr", "wall_seconds"]

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_SECTIONS = {
    "harness": ("benchmark", "seed", "iterations", "batch_size", "base_lr", "log_every", "loss_mode", "constraint_fraction"),
    "data": ("N", "m", "P", "Q", "n_test", "length_scale", "box", "radius_low", "radius_high"),
    "nn": ("depth", "width", "backbone", "activation", "fourier_sigma", "fourier_features"),
    "pde": ("lambda_ic",),
}


@dataclass
class TrainConfig:
    benchmark: str = "antiderivative"
    seed: int = 0
    iterations: int = 40_000
    batch_size: int = 10_000
    base_lr: float = 1e-3
    log_every: int = 100
    # "physics" trains the composite loss; "data" fits constraint rows only
    loss_mode: str = "physics"
    # share of each batch given to constraint pools; None -> proportional to pool sizes
    constraint_fraction: float | None = None
    N: int = 10_000
    m: int = 100
    P: int = 1
    Q: int = 100
    n_test: int = 1_000
    length_scale: float = 0.2
    box: float = 2.0
    radius_low: float = 0.5
    radius_high: float = 1.5
    depth: int = 5
    width: int = 50
    backbone: str = "mlp"
    activation: str = "tanh"
    fourier_sigma: float | None = None
    fourier_features: int | None = None
    lambda_ic: float = 1.0

    def __post_init__(self):
        if self.benchmark not in pde.KINDS:
            raise ValueError(f"unknown benchmark {self.benchmark!r}")
        if self.loss_mode not in ("physics", "data"):
            raise ValueError("loss_mode must be 'physics' or 'data'")
        if min(self.N, self.m, self.P, self.Q, self.batch_size) < 1:
            raise ValueError("N, m, P, Q and batch_size must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.constraint_fraction is not None and not 0.0 < self.constraint_fraction < 1.0:
            raise ValueError("constraint_fraction must lie in (0, 1)")

    def problem(self) -> pde.PdeProblem:
        return pde.PdeProblem.default(
            self.benchmark,
            weights={"lambda_ic": self.lambda_ic},
            collocation=pde.CollocationSpec(self.Q, self.P),
        )

    # -- text format -----------------------------------------------------------

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        values = asdict(self)
        for sec, keys in _SECTIONS.items():
            cp[sec] = {k: _fmt(values[k]) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read_string(text)
        types = {f.name: f.type for f in fields(cls)}
        known = {k for keys in _SECTIONS.values() for k in keys}
        kw = {}
        for sec in cp.sections():
            if sec not in _SECTIONS:
                raise ValueError(f"unknown config section [{sec}]")
            for k, v in cp[sec].items():
                if k not in known or k not in _SECTIONS[sec]:
                    raise ValueError(f"unknown key {k!r} in [{sec}]")
                kw[k] = _parse(v, types[k])
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, typ):
    text = text.strip()
    typ = str(typ)
    if text.lower() == "none":
        if "None" not in typ:
            raise ValueError(f"value may not be none for type {typ}")
        return None
    if typ.startswith("int"):
        return int(text.replace("_", ""))
    if typ.startswith("float"):
        return float(text)
    return text


def preset(benchmark: str, scale: str = "desk", **overrides) -> TrainConfig:
    """Paper-scale settings or reduced desk-scale settings for each benchmark."""
    paper = {
        "antiderivative": dict(N=10_000, m=100, P=1, Q=100, n_test=1_000, iterations=40_000, depth=5, width=50),
        "diffusion_reaction": dict(N=10_000, m=100, P=100, Q=100, n_test=1_000, iterations=120_000, depth=5, width=50),
        "burgers": dict(N=1_000, m=100, P=100, Q=2_500, n_test=1_000, iterations=200_000, depth=7, width=100),
        "eikonal": dict(N=1_000, m=100, P=100, Q=1_000, n_test=1_000, iterations=80_000, depth=6, width=50, box=2.0),
    }
    desk = {
        "antiderivative": dict(
            N=1_000, m=100, P=1, Q=100, n_test=200, iterations=20_000, depth=3, width=32,
            batch_size=2_000, constraint_fraction=0.25,
        ),
        "diffusion_reaction": dict(
            N=1_000, m=100, P=100, Q=100, n_test=100, iterations=30_000, depth=5, width=32,
            batch_size=2_000, constraint_fraction=0.5,
        ),
        "burgers": dict(
            N=100, m=100, P=100, Q=500, n_test=50, iterations=30_000, depth=4, width=32,
            batch_size=1_500, constraint_fraction=0.5, backbone="modified_mlp", lambda_ic=20.0,
        ),
        "eikonal": dict(
            N=200, m=100, P=100, Q=400, n_test=50, iterations=20_000, depth=4, width=32,
            batch_size=1_000, constraint_fraction=0.5, box=2.0,
            # a zero-bias tanh trunk is odd in y and stays near that subspace,
            # which cannot hold an even field such as a circle's distance
            activation="elu",
        ),
    }
    table = {"paper": paper, "desk": desk}[scale]
    kw = dict(benchmark=benchmark)
    kw.update(table[benchmark])
    kw.update(overrides)
    return TrainConfig(**kw)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class TestSet:
    """Held-out inputs with reference fields on a shared query grid."""

    branch_inputs: np.ndarray  # (n, m)
    grid: np.ndarray  # (P, d) query points, row-major over ``axes``
    truth: np.ndarray  # (n, P)
    axes: dict = field(default_factory=dict)  # axis name -> 1-D coordinates, slowest first
    extras: dict = field(default_factory=dict)


@dataclass
class TrainingData:
    batch: pde.Batch
    sensors: np.ndarray
    test: TestSet


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    data, init = ss.spawn(2)
    return np.random.default_rng(data), np.random.default_rng(init)


def _mesh(*axes):
    grids = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([g.ravel() for g in grids])


def generate(config: TrainConfig) -> TrainingData:
    """Sample training inputs, collocation pools and a solved test set."""
    rng, _ = _streams(config.seed)
    kind = config.benchmark
    if kind == "antiderivative":
        sensors = np.linspace(0.0, 1.0, config.m)
        spec = datagen.GrfSpec(config.length_scale, tuple(sensors))
        U = datagen.grf_samples(spec, config.N, rng)
        pools = pde.pools_antiderivative(U, sensors)
        U_test = datagen.grf_samples(spec, config.n_test, rng)
        truth = np.stack([datagen.solve_antiderivative_rk45(datagen.FieldSample(sensors, u)) for u in U_test])
        test = TestSet(U_test, sensors[:, None], truth, {"x": sensors})
    elif kind == "diffusion_reaction":
        sensors = np.linspace(0.0, 1.0, config.m)
        spec = datagen.GrfSpec(config.length_scale, tuple(sensors))
        U = datagen.grf_samples(spec, config.N, rng)
        pools = pde.pools_diffusion_reaction(U, sensors, config.P, config.Q, rng)
        U_test = datagen.grf_samples(spec, config.n_test, rng)
        S = datagen.solve_diffusion_reaction(U_test, nx=100, nt=100)
        x = t = np.linspace(0.0, 1.0, 100)
        test = TestSet(U_test, _mesh(x, t), S.reshape(config.n_test, -1), {"x": x, "t": t})
    elif kind == "burgers":
        sensors = np.arange(config.m) / config.m
        gspec = datagen.PeriodicGrfSpec.for_grid(config.m)
        a, b = datagen.periodic_grf_coefficients(gspec, rng, config.N)
        U = datagen.periodic_field(a, b, sensors)
        pools = pde.pools_burgers(U, sensors, config.P, config.Q, rng)
        a, b = datagen.periodic_grf_coefficients(gspec, rng, config.n_test)
        U_test = datagen.periodic_field(a, b, sensors)
        S = np.stack([datagen.solve_burgers_spectral(u, output_nx=config.m) for u in U_test])
        t = np.linspace(0.0, 1.0, S.shape[-1])
        test = TestSet(U_test, _mesh(sensors, t), S.reshape(config.n_test, -1), {"x": sensors, "t": t})
    else:
        radii = datagen.sample_radii(config.N, rng, config.radius_low, config.radius_high)
        curves = np.stack([datagen.circle_sensors(r, config.m).points for r in radii])
        sensors = curves
        U = curves.reshape(config.N, -1)
        pools = pde.pools_eikonal(curves, config.Q, config.box, rng)
        r_test = datagen.sample_radii(config.n_test, rng, config.radius_low, config.radius_high)
        U_test = np.stack([datagen.circle_sensors(r, config.m).points.ravel() for r in r_test])
        g = np.linspace(-config.box, config.box, 51)
        grid = _mesh(g, g)
        truth = np.stack([datagen.sdf_circle(r, grid[:, 0], grid[:, 1]) for r in r_test])
        test = TestSet(U_test, grid, truth, {"x": g, "y": g}, {"radii": r_test})
    return TrainingData(pde.Batch(U, pools), sensors, test)


_CONSTRAINT_POOLS = {"ic", "bc", "boundary"}


def constraint_pools(batch: pde.Batch) -> tuple:
    return tuple(k for k in batch.pools if k in _CONSTRAINT_POOLS)


def save_data(path, data: TrainingData) -> None:
    """Store a generated dataset as one named-array archive."""
    arrays = {"branch_inputs": data.batch.branch_inputs, "sensors": data.sensors}
    for name, rows in data.batch.pools.items():
        arrays[f"pool.{name}.sample"] = rows.sample.astype(np.float64)
        arrays[f"pool.{name}.y"] = rows.y
        if rows.target is not None:
            arrays[f"pool.{name}.target"] = rows.target
    t = data.test
    arrays.update({"test.branch_inputs": t.branch_inputs, "test.grid": t.grid, "test.truth": t.truth})
    for k, v in t.axes.items():
        arrays[f"test.axis.{k}"] = v
    for k, v in t.extras.items():
        arrays[f"test.extra.{k}"] = v
    meta = {"pools": list(data.batch.pools), "axes": list(t.axes), "extras": list(t.extras)}
    save_arrays(path, arrays, meta)


def load_data(path) -> TrainingData:
    arrays, meta = load_arrays(path)
    pools = {}
    for name in meta["pools"]:
        pools[name] = pde.RowSet(
            arrays[f"pool.{name}.sample"].astype(np.int64),
            arrays[f"pool.{name}.y"],
            arrays.get(f"pool.{name}.target"),
        )
    test = TestSet(
        arrays["test.branch_inputs"],
        arrays["test.grid"],
        arrays["test.truth"],
        {k: arrays[f"test.axis.{k}"] for k in meta["axes"]},
        {k: arrays[f"test.extra.{k}"] for k in meta["extras"]},
    )
    return TrainingData(pde.Batch(arrays["branch_inputs"], pools), arrays["sensors"], test)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def split_batch(sizes: dict, batch_size: int, constraint: tuple = (), constraint_fraction: float | None = None) -> dict:
    """Rows per pool; proportional to pool size unless a constraint share is fixed."""
    names = list(sizes)
    if constraint_fraction is None or not constraint or len(constraint) == len(names):
        total = sum(sizes.values())
        weights = {k: sizes[k] / total for k in names}
    else:
        c_total = sum(sizes[k] for k in constraint)
        o_total = sum(sizes[k] for k in names if k not in constraint)
        weights = {
            k: constraint_fraction * sizes[k] / c_total if k in constraint else (1 - constraint_fraction) * sizes[k] / o_total
            for k in names
        }
    return {k: max(1, int(round(batch_size * weights[k]))) for k in names}


def sample_minibatch(pools: dict, batch_size: int, rng: np.random.Generator, counts: dict | None = None) -> dict:
    """Row indices drawn uniformly with replacement from every pool.

    ``counts`` fixes rows per pool; by default the batch is split in
    proportion to pool sizes.
    """
    if not pools:
        raise ValueError("no pools to sample from")
    sizes = {k: len(v) for k, v in pools.items()}
    for k, n in sizes.items():
        if n == 0:
            raise ValueError(f"pool {k!r} is empty")
    counts = counts or split_batch(sizes, batch_size)
    return {k: rng.integers(0, sizes[k], size=counts[k]) for k in pools}


@dataclass
class MetricsRecord:
    iteration: int
    total_loss: float
    ic_loss: float
    bc_loss: float
    physics_loss: float
    operator_loss: float
    lr: float
    wall_seconds: float

    def row(self):
        vals = [self.total_loss, self.ic_loss, self.bc_loss, self.physics_loss, self.operator_loss, self.lr, self.wall_seconds]
        return [str(self.iteration)] + [format(v, ".17g") for v in vals]


def write_metrics(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow(r.row())


def read_metrics(path) -> list[MetricsRecord]:
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if rows[0] != METRICS_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [MetricsRecord(int(r[0]), *(float(v) for v in r[1:])) for r in rows[1:]]


class TrainingDiverged(RuntimeError):
    def __init__(self, message, params, metrics):
        super().__init__(message)
        self.params = params
        self.metrics = metrics


def loss_function(config: TrainConfig, batch_template: pde.Batch):
    """``f(arrays, batch) -> (total, contributions)`` for ``value_and_grad``."""
    problem = config.problem()
    cpools = constraint_pools(batch_template)

    def f(template, arrays, batch):
        params = template.with_arrays(arrays)
        if config.loss_mode == "data":
            lt = pde.loss_data(params, batch, cpools)
        else:
            lt = problem.loss(params, batch)
        contrib = {k: (ad.mul(lt.weights.get(k, 1.0), v)) for k, v in lt.terms.items()}
        return lt.total, contrib

    return f


def init_params(config: TrainConfig, data: TrainingData) -> DeepOnetParams:
    _, rng = _streams(config.seed)
    d = data.batch.pools[next(iter(data.batch.pools))].y.shape[1]
    if config.benchmark in ("diffusion_reaction", "burgers", "eikonal"):
        d = 2
    return DeepOnetParams.init(
        data.batch.branch_inputs.shape[1],
        d,
        config.width,
        config.depth,
        rng,
        backbone=config.backbone,
        activation=config.activation,
        fourier_sigma=config.fourier_sigma,
        fourier_features=config.fourier_features,
    )


def train(config: TrainConfig, data: TrainingData, out_dir=None, params: DeepOnetParams | None = None):
    """Adam on mini-batches; returns ``(params, metrics)``.

    With ``out_dir`` the final checkpoint, metrics CSV and config are written
    there.  A non-finite loss raises ``TrainingDiverged`` carrying the last
    finite parameters (also checkpointed when ``out_dir`` is set).
    """
    params = init_params(config, data) if params is None else params
    arrays = params.arrays()
    state = AdamState.zeros_like(arrays, config.base_lr)
    f = loss_function(config, data.batch)
    pools = data.batch.pools
    sizes = {k: len(v) for k, v in pools.items()}
    counts = split_batch(sizes, config.batch_size, constraint_pools(data.batch), config.constraint_fraction)
    metrics: list[MetricsRecord] = []
    start = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        config.save(out_dir / "config.ini")

    def record(it, total, contrib):
        metrics.append(
            MetricsRecord(
                it,
                total,
                contrib.get("ic", 0.0),
                contrib.get("bc", 0.0),
                contrib.get("physics", 0.0),
                contrib.get("operator", 0.0),
                learning_rate(config.base_lr, it),
                time.perf_counter() - start,
            )
        )

    def finish(p):
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint.bin", p, {"benchmark": config.benchmark})
            write_metrics(out_dir / "metrics.csv", metrics)

    for it in range(config.iterations):
        rng = np.random.default_rng([config.seed, 1, it])
        sel = sample_minibatch(pools, config.batch_size, rng, counts)
        batch = data.batch.subset(sel)
        try:
            total, contrib, grads = ad.value_and_grad(lambda a, b: f(params, a, b), arrays, batch)
        except ad.AutodiffError as exc:
            total, contrib, grads = math.nan, {}, None
            log.error("gradient sweep failed at iteration %d: %s", it, exc)
        if not math.isfinite(total):
            good = params.with_arrays(arrays)
            finish(good)
            raise TrainingDiverged(f"non-finite loss at iteration {it}", good, metrics)
        if it % config.log_every == 0:
            record(it, total, contrib)
            log.debug("iter %d loss %.4e", it, total)
        arrays, state = adam_step(state, arrays, grads, it)
    final = params.with_arrays(arrays)
    finish(final)
    return final, metrics


def full_loss(config: TrainConfig, params: DeepOnetParams, data: TrainingData, chunk: int = 20_000) -> dict:
    """Unweighted sub-losses over the complete pools, plus the weighted total.

    Pools are walked one at a time in chunks; the other pools are cut down to
    a single row whose terms are ignored.
    """
    pools = data.batch.pools
    problem = config.problem()
    cpools = constraint_pools(data.batch)
    term_of = _POOL_TERM[config.benchmark]
    sums = {}
    for name, rows in pools.items():
        if config.loss_mode == "data" and name not in cpools:
            continue
        acc = 0.0
        for s in range(0, len(rows), chunk):
            idx = np.arange(s, min(len(rows), s + chunk))
            sub = data.batch.subset({k: idx if k == name else idx[:1] * 0 for k in pools})
            if config.loss_mode == "data":
                lt, term = pde.loss_data(params, sub, (name,)), "operator"
            else:
                lt, term = problem.loss(params, sub), term_of[name]
            acc += float(np.asarray(ad.value_of(lt.terms[term]))) * len(idx)
        sums[name] = (acc, len(rows))
    if config.loss_mode == "data":
        op = sum(a for a, _ in sums.values()) / sum(n for _, n in sums.values())
        return {"operator": op, "total": op}
    terms = {term_of[name]: a / n for name, (a, n) in sums.items()}
    weights = {"ic": config.lambda_ic} if config.benchmark == "burgers" else {}
    terms["total"] = sum(weights.get(k, 1.0) * v for k, v in terms.items())
    return terms


_POOL_TERM = {
    "antiderivative": {"ic": "ic", "residual": "physics"},
    "diffusion_reaction": {"boundary": "operator", "residual": "physics"},
    "burgers": {"ic": "ic", "bc": "bc", "residual": "physics"},
    "eikonal": {"boundary": "bc", "residual": "physics"},
}


# ---------------------------------------------------------------------------
# evaluation and prediction
# ---------------------------------------------------------------------------


def predict_fields(params: DeepOnetParams, branch_inputs: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Predictions for every input on a shared grid, shape (n, P)."""
    branch_inputs = np.atleast_2d(np.asarray(branch_inputs, dtype=np.float64))
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 1:
        grid = grid[:, None]
    if branch_inputs.shape[1] != params.m:
        raise ValueError(f"inputs have {branch_inputs.shape[1]} sensors, model expects {params.m}")
    if grid.shape[1] != params.d:
        raise ValueError(f"grid has dimension {grid.shape[1]}, model expects {params.d}")
    b = branch_features(params, branch_inputs)
    t = trunk_features(params, grid)
    # same product-then-sum reduction as deeponet_eval, so batched and
    # pointwise predictions agree bit-for-bit
    return np.stack([np.sum(bi * t, axis=-1) for bi in b])


def predict(params: DeepOnetParams, u, grid) -> np.ndarray:
    """G(u) on ``grid`` (P, d); a single FieldSample or branch vector."""
    u = u.branch_input if hasattr(u, "branch_input") else np.asarray(u, dtype=np.float64).ravel()
    return predict_fields(params, u[None, :], grid)[0]


@dataclass
class Evaluation:
    errors: np.ndarray
    mean: float
    std: float

    def summary(self) -> str:
        return f"mean {self.mean:.6e} std {self.std:.6e} n {self.errors.size}"


def evaluate(params: DeepOnetParams, test: TestSet) -> Evaluation:
    """Per-sample relative L2 error on the test grid with mean and (population) std."""
    pred = predict_fields(params, test.branch_inputs, test.grid)
    if pred.shape != test.truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {test.truth.shape}")
    errs = np.array([relative_l2(p, t) for p, t in zip(pred, test.truth)])
    return Evaluation(errs, float(errs.mean()), float(errs.std()))


def write_prediction_csv(path_or_buf, values: np.ndarray, axes: dict) -> None:
    """Row-major table with one column per axis (slowest first) and a value column."""
    names = list(axes)
    grid = _mesh(*(np.asarray(axes[k]) for k in names))
    close = False
    if isinstance(path_or_buf, (str, Path)):
        fh = open(path_or_buf, "w", newline="")
        close = True
    else:
        fh = path_or_buf
    try:
        fh.write("# grid " + " ".join(f"{k}={len(axes[k])}" for k in names) + "\n")
        fh.write(",".join(names + ["value"]) + "\n")
        for row, v in zip(grid, np.ravel(values)):
            fh.write(",".join(format(c, ".17g") for c in row) + "," + format(v, ".17g") + "\n")
    finally:
        if close:
            fh.close()


def zero_level_radius(params: DeepOnetParams, curve_input: np.ndarray, n_rays: int = 16, r_max: float = 2.0) -> float:
    """Mean radius along ``n_rays`` rays where the predicted field changes sign."""
    phi = 2 * np.pi * np.arange(n_rays) / n_rays
    r = np.linspace(1e-3, r_max, 2001)
    pts = np.concatenate([np.column_stack([r * np.cos(p), r * np.sin(p)]) for p in phi])
    vals = predict(params, curve_input, pts).reshape(n_rays, -1)
    radii = []
    for v in vals:
        sign = np.nonzero(np.diff(np.sign(v)) != 0)[0]
        if sign.size == 0:
            radii.append(np.nan)
            continue
        i = sign[0]
        radii.append(r[i] - v[i] * (r[i + 1] - r[i]) / (v[i + 1] - v[i]))
    return float(np.mean(radii))
