"""Acceptance criteria 1-9, one verdict line each.

The long desk-scale trainings sit in module-scoped fixtures and carry the
``slow`` marker; ``pytest -m "not slow"`` runs only criteria 1-4.
"""
import time

import numpy as np
import pytest

from pideeponet import checks, datagen, harness, pde


def verdict(lines, n, ok, text):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}"
    print(line)
    lines.append(line)
    assert ok, line


def desk_run(out_dir, kind, **over):
    cfg = harness.preset(kind, "desk", **over)
    start = time.perf_counter()
    data = harness.generate(cfg)
    params, metrics = harness.train(cfg, data, out_dir=out_dir)
    return dict(config=cfg, data=data, params=params, metrics=metrics, seconds=time.perf_counter() - start, out=out_dir)


# ---------------------------------------------------------------- 1-4: oracle suites


def test_criterion_1_gradient_oracles(criterion_lines):
    start = time.perf_counter()
    results = [checks.gradient_check(kind, n_points=20, seed=0) for kind in pde.KINDS]
    secs = time.perf_counter() - start
    worst = max(r.value for r in results)
    detail = ", ".join(f"{r.name.split()[1]} {r.value:.2e}" for r in results)
    verdict(criterion_lines, 1, all(r.passed for r in results) and secs < 60,
            f"worst relative gradient error {worst:.2e} < 1e-5 over 4x20 points ({detail}) in {secs:.1f}s < 60s")


def test_criterion_2_second_derivative_oracle(criterion_lines):
    start = time.perf_counter()
    results = [checks.second_derivative_check(50, seed=0),
               checks.second_derivative_check(50, seed=1, backbone="modified_mlp"),
               checks.second_derivative_check(50, seed=2, fourier_sigma=2.0)]
    secs = time.perf_counter() - start
    worst = max(r.value for r in results)
    verdict(criterion_lines, 2, all(r.passed for r in results) and secs < 60,
            f"worst d2/dx2 relative error {worst:.2e} < 1e-4 at 50 points (mlp, modified, fourier) in {secs:.1f}s < 60s")


def test_criterion_3_grf_statistics(criterion_lines):
    start = time.perf_counter()
    spec = datagen.GrfSpec.uniform(0.2, 100)
    x = np.asarray(spec.grid)
    U = datagen.grf_samples(spec, 10_000, np.random.default_rng(2024))
    pairs = [(50, 50), (20, 25), (10, 20), (60, 75), (30, 50)]
    rel = []
    for i, j in pairs:
        kernel = np.exp(-((x[i] - x[j]) ** 2) / (2 * 0.2**2))
        rel.append(abs(np.mean(U[:, i] * U[:, j]) / kernel - 1))
    pspec = datagen.PeriodicGrfSpec.for_grid(100)
    a, b = datagen.periodic_grf_coefficients(pspec, np.random.default_rng(2025), 10_000)
    V = datagen.periodic_field(a, b, np.arange(100) / 100)
    prel = abs(V.var(axis=0).mean() / pspec.pointwise_variance() - 1)
    secs = time.perf_counter() - start
    ok = max(rel) < 0.05 and prel < 0.05 and secs < 120
    verdict(criterion_lines, 3, ok,
            f"worst covariance deviation {max(rel):.2%} < 5% at 5 pairs, periodic variance deviation {prel:.2%} < 5% "
            f"in {secs:.1f}s < 120s")


def test_criterion_4_solver_oracles(criterion_lines):
    start = time.perf_counter()
    results = checks.solver_checks()
    secs = time.perf_counter() - start
    text = "; ".join(f"{r.name} {r.value:.3e}" for r in results)
    verdict(criterion_lines, 4, all(r.passed for r in results) and secs < 300, f"{text} in {secs:.1f}s < 300s")


# ---------------------------------------------------------------- 5, 9: anti-derivative


@pytest.fixture(scope="module")
def antiderivative_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("antiderivative")
    physics = desk_run(root / "physics", "antiderivative")
    data_only = desk_run(root / "data", "antiderivative", loss_mode="data")
    return physics, data_only


@pytest.mark.slow
def test_criterion_5_antiderivative(antiderivative_runs, criterion_lines):
    physics, data_only = antiderivative_runs
    ev = harness.evaluate(physics["params"], physics["data"].test)
    base = harness.evaluate(data_only["params"], data_only["data"].test)
    ratio = base.mean / ev.mean
    ok = ev.mean < 5e-2 and ratio >= 10 and physics["seconds"] <= 900
    verdict(criterion_lines, 5, ok,
            f"physics-informed mean relative L2 {ev.mean:.3e} (std {ev.std:.2e}, n={ev.errors.size}) < 5e-2; "
            f"IC-rows-only baseline {base.mean:.3e} is {ratio:.1f}x worse (>= 10x); {physics['seconds']:.0f}s <= 900s")


@pytest.mark.slow
def test_criterion_9_determinism(antiderivative_runs, tmp_path, criterion_lines):
    first = antiderivative_runs[0]["out"]
    rerun = desk_run(tmp_path / "rerun", "antiderivative")["out"]

    def series(path):
        # wall_seconds is a clock reading, not a training quantity
        return [line.rsplit(",", 1)[0] for line in (path / "metrics.csv").read_text().splitlines()]

    same_metrics = series(first) == series(rerun)
    same_ckpt = (first / "checkpoint.bin").read_bytes() == (rerun / "checkpoint.bin").read_bytes()
    verdict(criterion_lines, 9, same_metrics and same_ckpt,
            f"rerun metrics CSV identical apart from wall_seconds: {same_metrics}; checkpoint bytes identical: {same_ckpt}")


# ---------------------------------------------------------------- 6: diffusion-reaction


@pytest.mark.slow
def test_criterion_6_diffusion_reaction(tmp_path, criterion_lines):
    run = desk_run(tmp_path, "diffusion_reaction")
    ev = harness.evaluate(run["params"], run["data"].test)
    verdict(criterion_lines, 6, ev.mean < 5e-2 and run["seconds"] <= 1800,
            f"mean relative L2 {ev.mean:.3e} (std {ev.std:.2e}, n={ev.errors.size}) < 5e-2; "
            f"{run['seconds']:.0f}s <= 1800s")


# ---------------------------------------------------------------- 7: eikonal


@pytest.mark.slow
def test_criterion_7_eikonal(tmp_path, criterion_lines):
    run = desk_run(tmp_path, "eikonal")
    test = run["data"].test
    ev = harness.evaluate(run["params"], test)
    radii = test.extras["radii"][:10]
    est = np.array([harness.zero_level_radius(run["params"], u) for u in test.branch_inputs[:10]])
    rel = np.abs(est - radii) / radii
    worst = float(np.max(rel)) if np.all(np.isfinite(rel)) else float("inf")
    ok = ev.mean < 5e-2 and worst < 0.02 and run["seconds"] <= 1200
    verdict(criterion_lines, 7, ok,
            f"mean relative L2 {ev.mean:.3e} < 5e-2; worst zero-level radius error {worst:.2%} < 2% over 10 held-out "
            f"circles; {run['seconds']:.0f}s <= 1200s")


# ---------------------------------------------------------------- 8: burgers


@pytest.mark.slow
def test_criterion_8_burgers(tmp_path, criterion_lines):
    start = time.perf_counter()
    modified = desk_run(tmp_path / "modified", "burgers")
    plain = desk_run(tmp_path / "plain", "burgers", backbone="mlp")
    fm = harness.full_loss(modified["config"], modified["params"], modified["data"])
    fp = harness.full_loss(plain["config"], plain["params"], plain["data"])
    secs = time.perf_counter() - start
    ok = fm["ic"] < 1e-3 and fm["bc"] < 1e-3 and fm["total"] < fp["total"] and secs <= 3600
    verdict(criterion_lines, 8, ok,
            f"modified MLP full-pool IC loss {fm['ic']:.2e} and BC loss {fm['bc']:.2e} < 1e-3; total loss "
            f"{fm['total']:.3e} < plain MLP {fp['total']:.3e}; {secs:.0f}s <= 3600s")
