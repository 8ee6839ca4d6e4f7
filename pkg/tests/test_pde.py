import numpy as np
import pytest
from hypothesis import given, strategies as st

from pideeponet import autodiff as ad
from pideeponet import datagen, pde
from pideeponet.deeponet import DeepOnetParams, FieldSample, deeponet_eval
from pideeponet.nn import MlpParams

# ---------------------------------------------------------------- helpers


def const_branch(m, q=1):
    return MlpParams([(np.zeros((q, m)), np.ones(q))])


def affine_trunk(w, c=0.0):
    """Single affine trunk layer G(y) = w . y + c."""
    w = np.atleast_1d(np.asarray(w, dtype=np.float64))
    return MlpParams([(w[None, :], np.array([c]))])


def numpy_net_jet(net, x, k):
    """Independent forward-mode oracle for a tanh MLP: value, d/dx_k, d2/dx_k2 per row."""
    h = np.asarray(x, dtype=np.float64)
    h1 = np.zeros_like(h)
    h1[..., k] = 1.0
    h2 = np.zeros_like(h)
    for i, (W, b) in enumerate(net.layers):
        z, z1, z2 = h @ W.T + b, h1 @ W.T, h2 @ W.T
        if i == len(net.layers) - 1:
            return z, z1, z2
        a = np.tanh(z)
        s = 1 - a * a
        h, h1, h2 = a, s * z1, -2 * a * s * z1 * z1 + s * z2


def numpy_branch(net, u):
    return numpy_net_jet(net, u, 0)[0]


def oracle_G(p, u, y, k):
    b = numpy_branch(p.branch, u)
    t, t1, t2 = numpy_net_jet(p.trunk, y, k)
    return float(b @ t), float(b @ t1), float(b @ t2)


def rand_params(rng, m, d, width=5, depth=3):
    p = DeepOnetParams.init(m, d, width, depth, rng)
    arrays = {k: v + (0.2 * rng.standard_normal(v.shape) if k.endswith(".b") else 0.0) for k, v in p.arrays().items()}
    return p.with_arrays(arrays)


def fs(values, x=None):
    values = np.asarray(values, dtype=np.float64)
    return FieldSample(np.linspace(0, 1, values.size) if x is None else x, values)


# ---------------------------------------------------------------- problem definition


def test_problem_constants_validated():
    assert pde.PdeProblem.default("diffusion_reaction").constants == {"D": 0.01, "k": 0.01}
    assert pde.PdeProblem.default("burgers").constants == {"nu": 0.01}
    assert pde.PdeProblem.default("eikonal").constants == {}
    with pytest.raises(ValueError):
        pde.PdeProblem("burgers", {})
    with pytest.raises(ValueError):
        pde.PdeProblem("antiderivative", {"nu": 0.1})
    with pytest.raises(ValueError):
        pde.PdeProblem("heat")
    with pytest.raises(ValueError):
        pde.PdeProblem.default("burgers", weights={"lambda_ic": 0.0})
    with pytest.raises(ValueError):
        pde.CollocationSpec(0, 3)


# ---------------------------------------------------------------- anti-derivative


def test_antiderivative_residual_zero_net_zero_u():
    p = DeepOnetParams(MlpParams([(np.zeros((1, 4)), np.zeros(1))]), affine_trunk([0.0]))
    assert pde.residual_antiderivative(p, fs(np.zeros(4)), 1 / 3) == 0.0


def test_antiderivative_residual_exact_solution():
    p = DeepOnetParams(const_branch(4), affine_trunk([1.0]))
    r = pde.residual_antiderivative(p, fs(np.ones(4)), np.linspace(0, 1, 4))
    assert np.max(np.abs(r)) < 1e-8


def test_antiderivative_residual_matches_fd_slope(rng):
    p = rand_params(rng, 20, 1)
    u = fs(rng.standard_normal(20))
    x = rng.uniform(0.01, 0.99, 50)
    r = pde.residual_antiderivative(p, u, x, interpolate=True)
    h = 1e-6
    slope = (deeponet_eval(p, u.values, (x + h)[:, None]) - deeponet_eval(p, u.values, (x - h)[:, None])) / (2 * h)
    np.testing.assert_allclose(r, slope - np.interp(x, u.sensor_locations, u.values), atol=1e-5)


def test_antiderivative_residual_errors(rng):
    p = rand_params(rng, 5, 1)
    u = fs(rng.standard_normal(5))
    with pytest.raises(ValueError):
        pde.residual_antiderivative(p, u, 0.3)  # off-grid, interpolation disabled
    with pytest.raises(ValueError):
        pde.residual_antiderivative(p, u, 1.5, interpolate=True)


def test_antiderivative_loss_examples():
    sensors = np.linspace(0, 1, 6)
    U = np.ones((1, 6))
    batch = pde.Batch(U, pde.pools_antiderivative(U, sensors))
    exact = DeepOnetParams(const_branch(6), affine_trunk([1.0]))
    assert float(pde.loss_antiderivative(exact, batch).total) < 1e-16
    zero = DeepOnetParams(const_branch(6), affine_trunk([0.0]))
    lt = pde.loss_antiderivative(zero, batch)
    assert float(lt.total) == 1.0
    assert float(lt.terms["ic"]) == 0.0


def test_antiderivative_loss_loop_oracle(rng):
    sensors = np.linspace(0, 1, 5)
    U = rng.standard_normal((2, 5))
    batch = pde.Batch(U, pde.pools_antiderivative(U, sensors))
    p = rand_params(rng, 5, 1)
    ic = np.mean([oracle_G(p, U[i], [0.0], 0)[0] ** 2 for i in range(2)])
    res = np.mean([(oracle_G(p, U[i], [x], 0)[1] - U[i, j]) ** 2 for i in range(2) for j, x in enumerate(sensors)])
    lt = pde.loss_antiderivative(p, batch)
    assert float(lt.terms["ic"]) == pytest.approx(ic, rel=1e-12)
    assert float(lt.terms["physics"]) == pytest.approx(res, rel=1e-12)
    assert float(lt.total) == pytest.approx(ic + res, rel=1e-12)


def test_antiderivative_pools_layout():
    sensors = np.linspace(0, 1, 4)
    U = np.arange(8.0).reshape(2, 4)
    pools = pde.pools_antiderivative(U, sensors)
    np.testing.assert_array_equal(pools["ic"].y, np.zeros((2, 1)))
    np.testing.assert_array_equal(pools["residual"].sample, [0, 0, 0, 0, 1, 1, 1, 1])
    np.testing.assert_array_equal(pools["residual"].y[:, 0], np.tile(sensors, 2))
    np.testing.assert_array_equal(pools["residual"].target, U.ravel())


# ---------------------------------------------------------------- diffusion-reaction


def test_dr_residual_examples():
    zero = DeepOnetParams(const_branch(3), affine_trunk([0.0, 0.0]))
    assert pde.residual_diffusion_reaction(zero, fs([1.0, 2.0, 3.0]), 0.4, 0.7) == 0.0
    g_t = DeepOnetParams(const_branch(3), affine_trunk([0.0, 1.0]))
    t = np.linspace(0, 1, 11)
    r = pde.residual_diffusion_reaction(g_t, fs(np.zeros(3)), np.full(11, 0.3), t)
    np.testing.assert_allclose(r, 1 - 0.01 * t * t, rtol=0, atol=1e-15)
    assert pde.residual_diffusion_reaction(g_t, fs(np.zeros(3)), 0.5, 0.0) == 1.0


def test_dr_residual_matches_fd(rng):
    p = rand_params(rng, 6, 2)
    u = fs(rng.standard_normal(6))
    pts = rng.uniform(0.05, 0.95, (20, 2))
    r = pde.residual_diffusion_reaction(p, u, pts[:, 0], pts[:, 1])

    def G(dx, dt):
        return deeponet_eval(p, u.values, pts + [dx, dt])

    h = 1e-4
    gt = (G(0, h) - G(0, -h)) / (2 * h)
    gxx = (G(h, 0) - 2 * G(0, 0) + G(-h, 0)) / h**2
    np.testing.assert_allclose(r, gt - 0.01 * gxx - 0.01 * G(0, 0) ** 2, atol=1e-4)


def _dr_batch(U, P, Q, rng):
    return pde.Batch(U, pde.pools_diffusion_reaction(U, np.linspace(0, 1, U.shape[1]), P, Q, rng))


def test_dr_loss_examples(rng):
    zero = DeepOnetParams(const_branch(5), affine_trunk([0.0, 0.0]))
    assert float(pde.loss_diffusion_reaction(zero, _dr_batch(np.zeros((2, 5)), 4, 5, rng)).total) == 0.0
    lt = pde.loss_diffusion_reaction(zero, _dr_batch(np.full((2, 5), 1.5), 4, 5, rng))
    assert float(lt.total) == 1.5**2
    assert float(lt.terms["operator"]) == 0.0


def test_dr_loss_loop_oracle(rng):
    U = rng.standard_normal((2, 5))
    batch = _dr_batch(U, 3, 3, rng)
    p = rand_params(rng, 5, 2)
    D = k = 0.01
    bd, res = batch.pools["boundary"], batch.pools["residual"]
    op = np.mean([oracle_G(p, U[s], y, 0)[0] ** 2 for s, y in zip(bd.sample, bd.y)])
    phys = []
    for s, y, tgt in zip(res.sample, res.y, res.target):
        g, _, gxx = oracle_G(p, U[s], y, 0)
        _, gt, _ = oracle_G(p, U[s], y, 1)
        phys.append((gt - D * gxx - k * g * g - tgt) ** 2)
    lt = pde.loss_diffusion_reaction(p, batch)
    assert float(lt.terms["operator"]) == pytest.approx(op, rel=1e-12)
    assert float(lt.terms["physics"]) == pytest.approx(np.mean(phys), rel=1e-12)


def test_dr_pools_follow_sampling_rules():
    rng = np.random.default_rng(3)
    sensors = np.linspace(0, 1, 7)
    U = rng.standard_normal((4, 7))
    pools = pde.pools_diffusion_reaction(U, sensors, 50, 9, rng)
    bd, res = pools["boundary"], pools["residual"]
    x, t = bd.y[:, 0], bd.y[:, 1]
    assert np.all((x == 0) | (x == 1) | (t == 0))
    assert np.all(t < 1)
    assert np.all(np.isin(res.y[:, 0], sensors))
    j = np.searchsorted(sensors, res.y[:, 0])
    np.testing.assert_array_equal(res.target, U[res.sample, j])
    np.testing.assert_array_equal(np.bincount(res.sample), [9] * 4)


def test_dr_boundary_edges_equally_likely():
    y = pde.sample_dr_boundary(30_000, np.random.default_rng(0))
    counts = np.array([np.sum((y[:, 0] == 0) & (y[:, 1] > 0)), np.sum((y[:, 0] == 1) & (y[:, 1] > 0)), np.sum(y[:, 1] == 0)])
    expected = 10_000
    chi2 = np.sum((counts - expected) ** 2 / expected)
    assert chi2 < 13.8  # 99.9% quantile, 2 dof


# ---------------------------------------------------------------- Burgers


def test_burgers_residual_examples(rng):
    zero = DeepOnetParams(const_branch(4), affine_trunk([0.0, 0.0]))
    assert pde.residual_burgers(zero, fs(np.zeros(4)), 0.2, 0.3) == 0.0
    c = DeepOnetParams(const_branch(4), affine_trunk([0.0, 0.0], 0.8))
    r = pde.residual_burgers(c, fs(np.full(4, 0.8)), rng.uniform(0, 1, 10), rng.uniform(0, 1, 10))
    assert np.all(r == 0.0)


def test_burgers_residual_matches_fd(rng):
    p = rand_params(rng, 6, 2)
    u = fs(rng.standard_normal(6))
    pts = rng.uniform(0.05, 0.95, (20, 2))

    def G(dx, dt):
        return deeponet_eval(p, u.values, pts + [dx, dt])

    h = 1e-4
    g = G(0, 0)
    ref = (G(0, h) - G(0, -h)) / (2 * h) + g * (G(h, 0) - G(-h, 0)) / (2 * h) - 0.01 * (G(h, 0) - 2 * g + G(-h, 0)) / h**2
    np.testing.assert_allclose(pde.residual_burgers(p, u, pts[:, 0], pts[:, 1]), ref, atol=1e-4)


def _burgers_batch(U, P, Q, rng):
    return pde.Batch(U, pde.pools_burgers(U, np.arange(U.shape[1]) / U.shape[1], P, Q, rng))


def test_burgers_constant_solution_has_zero_loss(rng):
    c = DeepOnetParams(const_branch(6), affine_trunk([0.0, 0.0], -0.4))
    lt = pde.loss_burgers(c, _burgers_batch(np.full((2, 6), -0.4), 6, 5, rng), lambda_ic=20.0)
    assert float(lt.total) == 0.0
    assert all(float(v) == 0.0 for v in lt.terms.values())


def test_burgers_lambda_scales_ic_contribution(rng):
    U = rng.standard_normal((2, 6))
    batch = _burgers_batch(U, 6, 5, rng)
    p = rand_params(rng, 6, 2)
    a = pde.loss_burgers(p, batch, lambda_ic=3.0).contributions()
    b = pde.loss_burgers(p, batch, lambda_ic=6.0).contributions()
    assert b["ic"] == 2 * a["ic"]
    assert b["bc"] == a["bc"] and b["physics"] == a["physics"]


def test_burgers_lambda_one_is_plain_sum(rng):
    U = rng.standard_normal((2, 6))
    batch = _burgers_batch(U, 6, 5, rng)
    p = rand_params(rng, 6, 2)
    lt = pde.loss_burgers(p, batch, lambda_ic=1.0)
    plain = sum(float(v) for v in lt.terms.values())
    assert float(lt.total) == pytest.approx(plain, rel=1e-15)


def test_burgers_loss_loop_oracle(rng):
    U = rng.standard_normal((1, 4))
    batch = _burgers_batch(U, 4, 4, rng)
    p = rand_params(rng, 4, 2)
    nu, lam = 0.01, 2.5
    ic, bc, res = batch.pools["ic"], batch.pools["bc"], batch.pools["residual"]
    l_ic = np.mean([(oracle_G(p, U[0], y, 0)[0] - tg) ** 2 for y, tg in zip(ic.y, ic.target)])
    gaps_v, gaps_x = [], []
    for t in bc.y[:, 0]:
        g0, gx0, _ = oracle_G(p, U[0], [0.0, t], 0)
        g1, gx1, _ = oracle_G(p, U[0], [1.0, t], 0)
        gaps_v.append((g0 - g1) ** 2)
        gaps_x.append((gx0 - gx1) ** 2)
    l_bc = np.mean(gaps_v) + np.mean(gaps_x)
    phys = []
    for y in res.y:
        g, gx, gxx = oracle_G(p, U[0], y, 0)
        gt = oracle_G(p, U[0], y, 1)[1]
        phys.append((gt + g * gx - nu * gxx) ** 2)
    lt = pde.loss_burgers(p, batch, lambda_ic=lam)
    assert float(lt.terms["ic"]) == pytest.approx(l_ic, rel=1e-12)
    assert float(lt.terms["bc"]) == pytest.approx(l_bc, rel=1e-12)
    assert float(lt.terms["physics"]) == pytest.approx(np.mean(phys), rel=1e-12)
    assert float(lt.total) == pytest.approx(lam * l_ic + l_bc + np.mean(phys), rel=1e-12)


def test_burgers_pools_follow_sampling_rules(rng):
    sensors = np.arange(8) / 8
    U = rng.standard_normal((3, 8))
    pools = pde.pools_burgers(U, sensors, 8, 11, rng)
    ic = pools["ic"]
    assert np.all(ic.y[:, 1] == 0) and np.all(np.isin(ic.y[:, 0], sensors))
    np.testing.assert_array_equal(ic.target, U[ic.sample, np.round(ic.y[:, 0] * 8).astype(int)])
    assert pools["bc"].y.shape == (24, 1)
    assert pools["residual"].y.shape == (33, 2)


# ---------------------------------------------------------------- Eikonal


def test_eikonal_residual_examples():
    gx = DeepOnetParams(const_branch(4), affine_trunk([1.0, 0.0]))
    r = pde.residual_eikonal(gx, fs(np.zeros(4)), np.linspace(-1, 1, 5), np.linspace(1, -1, 5))
    np.testing.assert_allclose(r, 1.0, rtol=1e-12)
    zero = DeepOnetParams(const_branch(4), affine_trunk([0.0, 0.0]))
    r0 = pde.residual_eikonal(zero, fs(np.zeros(4)), 0.3, 0.2)
    assert r0 == pytest.approx(np.sqrt(pde.SQRT_EPS))
    assert (r0 - 1) ** 2 == pytest.approx(1.0, abs=1e-5)


def test_eikonal_residual_matches_fd(rng):
    p = rand_params(rng, 8, 2)
    u = fs(rng.standard_normal(8))
    pts = rng.uniform(-2, 2, (20, 2))
    h = 1e-5
    gx = (deeponet_eval(p, u.values, pts + [h, 0]) - deeponet_eval(p, u.values, pts - [h, 0])) / (2 * h)
    gy = (deeponet_eval(p, u.values, pts + [0, h]) - deeponet_eval(p, u.values, pts - [0, h])) / (2 * h)
    np.testing.assert_allclose(pde.residual_eikonal(p, u, pts[:, 0], pts[:, 1]), np.hypot(gx, gy), atol=1e-4)


def _eik_batch(radii, Q, rng, m=16):
    curves = np.stack([datagen.circle_sensors(r, m).points for r in radii])
    return pde.Batch(curves.reshape(len(radii), -1), pde.pools_eikonal(curves, Q, 2.0, rng))


def test_eikonal_exact_sdf_loss(monkeypatch, rng):
    # swap the trunk for the exact signed distance of a radius-0.8 circle
    r = 0.8
    batch = _eik_batch([r], 200, rng)
    res = batch.pools["residual"]
    keep = np.hypot(res.y[:, 0], res.y[:, 1]) > 0.1
    batch.pools["residual"] = res.subset(np.nonzero(keep)[0])

    def sdf_trunk(params, y):
        if isinstance(y, ad.Dual2):
            x0 = ad.Dual2(y.value[:, 0], y.d1[..., 0], y.d2[..., 0])
            y0 = ad.Dual2(y.value[:, 1], y.d1[..., 1], y.d2[..., 1])
            g = (x0 * x0 + y0 * y0).sqrt() - r
            return ad.Dual2(np.asarray(g.value)[:, None], np.asarray(g.d1)[..., None], np.asarray(g.d2)[..., None])
        return (np.hypot(y[:, 0], y[:, 1]) - r)[:, None]

    monkeypatch.setattr(pde, "trunk_features", sdf_trunk)
    monkeypatch.setattr(pde, "branch_features", lambda params, u: np.ones((np.shape(u)[0], 1)))
    lt = pde.loss_eikonal(None, batch)
    assert float(lt.terms["bc"]) < 1e-24
    assert float(lt.terms["physics"]) < 1e-20
    assert float(lt.total) < 1e-16


def test_eikonal_zero_net_loss(rng):
    zero = DeepOnetParams(const_branch(32), affine_trunk([0.0, 0.0]))
    lt = pde.loss_eikonal(zero, _eik_batch([1.0], 7, rng))
    assert float(lt.terms["bc"]) == 0.0
    assert float(lt.terms["physics"]) == pytest.approx(1.0, abs=3e-6)


def test_eikonal_loss_loop_oracle(rng):
    batch = _eik_batch([0.9], 5, rng, m=6)
    p = rand_params(rng, 12, 2)
    U = batch.branch_inputs
    bd, res = batch.pools["boundary"], batch.pools["residual"]
    l_bc = np.mean([oracle_G(p, U[0], y, 0)[0] ** 2 for y in bd.y])
    phys = []
    for y in res.y:
        gx = oracle_G(p, U[0], y, 0)[1]
        gy = oracle_G(p, U[0], y, 1)[1]
        phys.append((np.sqrt(gx * gx + gy * gy + pde.SQRT_EPS) - 1) ** 2)
    lt = pde.loss_eikonal(p, batch)
    assert float(lt.terms["bc"]) == pytest.approx(l_bc, rel=1e-12)
    assert float(lt.terms["physics"]) == pytest.approx(np.mean(phys), rel=1e-12)


def test_eikonal_pools(rng):
    curves = np.stack([datagen.circle_sensors(r, 10).points for r in (0.6, 1.2)])
    pools = pde.pools_eikonal(curves, 30, 2.0, rng)
    np.testing.assert_array_equal(pools["boundary"].y, curves.reshape(-1, 2))
    assert np.all(pools["boundary"].target == 0)
    assert np.all(np.abs(pools["residual"].y) <= 2.0)


# ---------------------------------------------------------------- shared properties


def _any_batch(kind, rng):
    from pideeponet.checks import tiny_problem
    return tiny_problem(kind, rng)


@pytest.mark.parametrize("kind", pde.KINDS)
@given(seed=st.integers(0, 10_000))
def test_terms_non_negative_and_sum_to_total(kind, seed):
    params, batch, problem = _any_batch(kind, np.random.default_rng(seed))
    lt = problem.loss(params, batch)
    contrib = lt.contributions()
    assert all(float(v) >= 0 for v in lt.terms.values())
    total = float(lt.total)
    assert total >= 0
    assert sum(contrib.values()) == pytest.approx(total, rel=1e-14, abs=1e-300)


@pytest.mark.parametrize("kind", pde.KINDS)
def test_losses_are_pure(kind, rng):
    params, batch, problem = _any_batch(kind, rng)
    a = float(problem.loss(params, batch).total)
    b = float(problem.loss(params, batch).total)
    assert a == b


def test_single_sample_residuals_are_pure(rng):
    p = rand_params(rng, 6, 2)
    u = fs(rng.standard_normal(6))
    x, t = rng.uniform(0, 1, (2, 15))
    for f in (pde.residual_diffusion_reaction, pde.residual_burgers, pde.residual_eikonal):
        assert f(p, u, x, t).tobytes() == f(p, u, x, t).tobytes()


def test_data_loss_uses_constraint_rows_only(rng):
    sensors = np.linspace(0, 1, 5)
    U = rng.standard_normal((2, 5))
    batch = pde.Batch(U, pde.pools_antiderivative(U, sensors))
    p = rand_params(rng, 5, 1)
    lt = pde.loss_data(p, batch, ("ic",))
    ref = np.mean([oracle_G(p, U[i], [0.0], 0)[0] ** 2 for i in range(2)])
    assert set(lt.terms) == {"operator"}
    assert float(lt.total) == pytest.approx(ref, rel=1e-12)


def test_branch_evaluated_once_per_unique_sample(monkeypatch, rng):
    params, batch, problem = _any_batch("diffusion_reaction", rng)
    calls = []
    real = pde.branch_features

    def spy(p, u):
        calls.append(np.shape(ad.value_of(u))[0])
        return real(p, u)

    monkeypatch.setattr(pde, "branch_features", spy)
    problem.loss(params, batch)
    assert calls == [batch.branch_inputs.shape[0]]
