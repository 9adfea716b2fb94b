import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cddsgld.channel import ChannelParams, block_energy, check_power
from cddsgld.errors import InternalConsistencyError, InvalidConfigurationError, NumericalDivergenceError
from cddsgld.models import AgentGradients, Dataset, ModelSpec, exact_posterior, generate_synthetic_task
from cddsgld.samplers import (
    DigitalLinks,
    SamplerConfig,
    cd_dsgld_round,
    dsgd_round,
    dsgld_round,
    encode_transmit,
    optimize_power_control,
    q_dsgd_round,
    receiver_scaling,
    run_chain,
    sgld_step,
    solve_power_control_numeric,
)
from cddsgld.topology import mixing_for


def conjugate_task(seed=0, dim=2, per_agent=4, n=5):
    task = generate_synthetic_task(seed, "conjugate-gaussian", dim, n, observations_per_agent=per_agent)
    return task, AgentGradients(task.spec, task.agents)


def test_config_validation():
    assert SamplerConfig().retained == 100
    with pytest.raises(InvalidConfigurationError):
        SamplerConfig(total_rounds=100, burn_in=100)
    with pytest.raises(InvalidConfigurationError):
        SamplerConfig(algorithm="hmc")


def test_sgld_step_examples():
    theta = np.array([0.3, -1.0])
    assert np.array_equal(sgld_step(theta, np.zeros(2), 0.1, np.zeros(2)), theta)
    assert np.allclose(sgld_step(np.zeros(3), np.zeros(3), 0.5, np.ones(3)), np.ones(3))
    with pytest.raises(NumericalDivergenceError) as err:
        sgld_step(theta, np.array([np.nan, 0.0]), 0.1, np.zeros(2), round_index=7)
    assert err.value.round_index == 7


def test_sgld_matches_one_dimensional_posterior():
    spec = ModelSpec("conjugate-gaussian", 1)
    data = Dataset(np.random.default_rng(0).normal(1.0, 1.0, size=(20, 1)))
    post = exact_posterior(spec, data)
    grad = AgentGradients(spec, [data])
    cfg = SamplerConfig("sgld", 1e-3, 200_000, 10_000)
    res = run_chain(grad, np.zeros((1, 1)), cfg, seed=3)
    x = res.samples[0, :, 0]
    assert abs(x.mean() / post.mean[0] - 1) < 0.05
    assert abs(x.var() / post.covariance[0, 0] - 1) < 0.05


def test_dsgld_degenerate_graph_is_sgld():
    theta = np.array([[1.0, 2.0]])
    g = np.array([[0.5, -0.5]])
    xi = np.array([[0.1, 0.2]])
    assert np.allclose(dsgld_round(theta, np.eye(1), g, 0.01, xi), sgld_step(theta[0], g[0], 0.01, xi[0]))


def test_dsgld_consensus_fixed_point():
    _, mix = mixing_for("star", 5)
    theta = np.tile([0.4, -2.0, 1.0], (5, 1))
    out = dsgld_round(theta, mix.weights, np.zeros_like(theta), 0.01, np.zeros_like(theta))
    assert np.allclose(out, theta, atol=1e-15)


def test_dsgld_full_graph_pooled_mean():
    task, grad = conjugate_task(seed=1)
    topo, mix = mixing_for("full", 5)
    cfg = SamplerConfig("dsgld", 1e-3, 60_000, 5_000)
    res = run_chain(grad, np.zeros((5, 2)), cfg, 1, topo, mix)
    post = exact_posterior(task.spec, task.agents)
    avg = res.samples.mean(axis=0)
    from cddsgld.metrics import batch_means_se

    se = batch_means_se(avg)
    assert np.all(np.abs(avg.mean(axis=0) - post.mean) < 3 * se)


def test_encode_transmit_examples():
    assert not encode_transmit(np.zeros(3), 0.4, 5.0).signal.any()
    assert np.allclose(encode_transmit(np.array([1.0, 0.0]), 0.4, 2.0).signal, [0.8, 0.0])
    p = ChannelParams(1.0, 1.0, 2)
    with pytest.raises(InternalConsistencyError):
        encode_transmit(np.array([10.0, 0.0]), 0.5, 1.0, agent=3, params=p)


def test_power_control_unconstrained_returns_beta():
    p = ChannelParams(1.0, 1e6, 3)
    pc = optimize_power_control(np.ones((4, 3)), 0.4, 2.5, p)
    assert np.all(pc.alphas == 2.5)


def test_power_control_closed_form_example_against_grid():
    p = ChannelParams(1.0, 1.0, 2)
    theta = np.array([[6.0, 8.0]])
    pc = optimize_power_control(theta, 0.5, 1.0, p)
    assert pc.alphas[0] == pytest.approx(math.sqrt(2) / 5, abs=1e-12)
    grid = np.linspace(1e-6, 1.0, 200_001)
    feasible = grid[(0.5 * grid * 10.0) ** 2 <= 2.0]
    best = feasible[np.argmin((feasible - 1.0) ** 2)]
    assert pc.alphas[0] == pytest.approx(best, abs=1e-5)


def test_power_control_matches_numeric_solver():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n, m = int(rng.integers(2, 7)), int(rng.integers(1, 20))
        thetas = rng.normal(scale=rng.uniform(0.1, 10), size=(n, m))
        p = ChannelParams(rng.uniform(0.01, 1), rng.uniform(0.1, 2), m)
        w, beta = rng.uniform(0.1, 0.6), rng.uniform(0.5, 50)
        a = optimize_power_control(thetas, w, beta, p).alphas / beta
        b = solve_power_control_numeric(thetas, w, beta, p).alphas / beta
        worst = max(worst, np.max(np.abs(a - b)))
    assert worst < 1e-6


@given(
    hnp.arrays(np.float64, (5, 6), elements=st.floats(-1e3, 1e3)),
    st.floats(1e-3, 1.0),
    st.floats(1e-3, 1e3),
    st.floats(1e-4, 10.0),
)
def test_power_control_never_exceeds_beta_or_budget(thetas, w, beta, power):
    p = ChannelParams(1.0, power, 6)
    pc = optimize_power_control(thetas, w, beta, p)
    assert np.all(pc.alphas <= beta)
    for j in range(5):
        assert check_power((w * pc.alphas[j]) * thetas[j], p)


@pytest.mark.parametrize("kind", ["full", "ring", "star"])
def test_coupling_with_dsgld(kind):
    rng = np.random.default_rng(5)
    topo, mix = mixing_for(kind, 5)
    eta = 1e-3
    p = ChannelParams(0.01, 1e8, 4)
    for _ in range(20):
        thetas = rng.normal(size=(5, 4))
        grads = rng.normal(size=(5, 4))
        xi = rng.normal(size=(5, 4))
        new, pc = cd_dsgld_round(thetas, topo, mix, p, grads, eta, xi)
        assert np.all(pc.alphas == pc.beta)
        ref = dsgld_round(thetas, mix.weights, grads, eta, xi)
        assert np.max(np.abs(new - ref)) <= 1e-12 * np.max(np.abs(ref))


@pytest.mark.parametrize("n0", [0.01, 0.04])
def test_effective_noise_variance_independent_of_beta(n0):
    eta = 1e-3
    p = ChannelParams(n0, 1e6, 1)
    assert receiver_scaling(n0, eta) == pytest.approx(math.sqrt(n0 / (2 * eta)))
    topo, mix = mixing_for("ring", 5)
    z = np.random.default_rng(2).normal(size=(20_000, 5, 1))
    thetas = np.zeros((5, 1))
    out = np.array([cd_dsgld_round(thetas, topo, mix, p, thetas, eta, zs)[0] for zs in z])
    assert out.var() == pytest.approx(2 * eta, rel=0.03)


def test_cd_dsgld_ring_high_snr_moments():
    task, grad = conjugate_task(seed=2)
    topo, mix = mixing_for("ring", 5)
    p = ChannelParams.from_snr_db(40.0, 2)
    cfg = SamplerConfig("cd-dsgld", 1e-3, 100_000, 10_000)
    res = run_chain(grad, np.zeros((5, 2)), cfg, 2, topo, mix, p)
    assert res.stats["power_limited_rounds"] == 0
    post = exact_posterior(task.spec, task.agents)
    pooled = res.pooled()
    assert np.linalg.norm(pooled.mean(axis=0) - post.mean) / np.linalg.norm(post.mean) < 0.1
    cov = np.cov(pooled.T)
    assert np.linalg.norm(cov - post.covariance) / np.linalg.norm(post.covariance) < 0.1


def test_dsgd_is_dsgld_without_noise():
    rng = np.random.default_rng(0)
    _, mix = mixing_for("ring", 4)
    th, g = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert np.array_equal(dsgd_round(th, mix.weights, g, 0.1), dsgld_round(th, mix.weights, g, 0.1, np.zeros((4, 3))))


def _dsgd_fixed_point(task, weights, eta):
    # per coordinate: (I - W + eta a) theta = eta b for f_k = a/2 theta^2 - b_k theta
    n = len(task.agents)
    a = np.array([len(d) + 1.0 / n for d in task.agents])
    b = np.array([d.inputs.sum(axis=0) for d in task.agents])
    return np.linalg.solve(np.eye(n) - weights + eta * np.diag(a), eta * b)


@pytest.mark.parametrize("kind", ["full", "ring"])
def test_dsgd_converges_to_map(kind):
    task, grad = conjugate_task(seed=4)
    topo, mix = mixing_for(kind, 5)
    eta = 5e-3
    cfg = SamplerConfig("dsgd", eta, 20_000, 19_999)
    res = run_chain(grad, np.zeros((5, 2)), cfg, 0, topo, mix)
    post = exact_posterior(task.spec, task.agents)
    # constant-step gossip keeps an O(eta) spread across agents; the network average is exact
    assert np.max(np.abs(res.final.mean(axis=0) - post.mean)) < 1e-6
    assert np.max(np.abs(res.final - _dsgd_fixed_point(task, mix.weights, eta))) < 1e-10


def test_dsgd_homogeneous_agents_reach_map_individually():
    rng = np.random.default_rng(8)
    spec = ModelSpec("conjugate-gaussian", 2)
    shared = Dataset(rng.normal(size=(4, 2)))
    grad = AgentGradients(spec, [shared] * 5)
    post = exact_posterior(spec, [shared] * 5)
    finals = []
    for kind in ("full", "ring"):
        topo, mix = mixing_for(kind, 5)
        res = run_chain(grad, rng.normal(size=(5, 2)), SamplerConfig("dsgd", 5e-3, 20_000, 19_999), 0, topo, mix)
        assert np.max(np.abs(res.final - post.mean)) < 1e-6
        finals.append(res.final)
    assert np.max(np.abs(finals[0] - finals[1])) < 1e-6


def _thetas_and_grads(seed, n=5, m=7):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, m)), rng.normal(size=(n, m))


@pytest.mark.parametrize("kind", ["full", "ring", "star"])
def test_q_dsgd_lossless_equals_dsgd(kind):
    topo, mix = mixing_for(kind, 5)
    p = ChannelParams.from_snr_db(0.0, 7)
    links = DigitalLinks.setup(topo, p, None, 0, unlimited=True)
    th = _thetas_and_grads(0)[0]
    ref = th.copy()
    for s in range(50):
        g = np.sin(th) + 0.1 * s
        th = q_dsgd_round(th, links, mix, g, 0.05, s)
        ref = dsgd_round(ref, mix.weights, np.sin(ref) + 0.1 * s, 0.05)
        assert np.array_equal(th, ref)


def test_q_dsgd_zero_budget_decouples_agents():
    topo, mix = mixing_for("ring", 5)
    p = ChannelParams.from_snr_db(-40.0, 7)
    links = DigitalLinks.setup(topo, p, 10, 0)
    assert np.all(links.t == 0)
    th, g = _thetas_and_grads(1)
    out = q_dsgd_round(th, links, mix, g, 0.1)
    assert not links.replicas.any()
    assert np.allclose(out, np.diag(mix.weights)[:, None] * th - 0.1 * g)


def test_q_dsgd_messages_respect_budget():
    topo, mix = mixing_for("star", 5)
    p = ChannelParams.from_snr_db(10.0, 200)
    links = DigitalLinks.setup(topo, p, 10, 3)
    assert 0 < links.t[0] < links.t[1] < 200
    th = _thetas_and_grads(2, m=200)[0]
    for s in range(20):
        th = q_dsgd_round(th, links, mix, 0.1 * th, 0.1, s)
    links.budgets[:] = 1.0
    with pytest.raises(InternalConsistencyError):
        q_dsgd_round(th + 1.0, links, mix, 0.1 * th, 0.1)


@pytest.mark.parametrize("alg", ["dsgld", "cd-dsgld", "dsgd", "q-dsgd"])
def test_relabelling_agents_permutes_outputs(alg):
    task = generate_synthetic_task(0, "logistic-regression", 3, 5)
    perm = np.array([3, 0, 4, 1, 2])
    topo, mix = mixing_for("full", 5)
    p = ChannelParams.from_snr_db(10.0, task.spec.dim)
    init = np.random.default_rng(0).normal(size=(5, task.spec.dim))
    xi = np.random.default_rng(1).normal(size=(41, 5, task.spec.dim))
    cfg = SamplerConfig(alg, 1e-3, 40, 30, unlimited_budget=True, n_bits=None)
    kw = {"xi_override": lambda s: xi[s], "noise_override": lambda s: xi[s]}
    a = run_chain(AgentGradients(task.spec, task.agents), init, cfg, 0, topo, mix, p, **kw)
    agents = [task.agents[k] for k in perm]
    kw_p = {"xi_override": lambda s: xi[s][perm], "noise_override": lambda s: xi[s][perm]}
    b = run_chain(AgentGradients(task.spec, agents), init[perm], cfg, 0, topo, mix, p, **kw_p)
    # summation order inside the mixing product changes, so only rounding differs
    assert np.max(np.abs(a.samples[perm] - b.samples)) < 1e-12


def test_round_functions_do_not_mutate_round_state():
    topo, mix = mixing_for("ring", 5)
    p = ChannelParams.from_snr_db(5.0, 7)
    th, g = _thetas_and_grads(3)
    xi = np.random.default_rng(4).normal(size=th.shape)
    frozen = th.copy()
    dsgld_round(th, mix.weights, g, 1e-3, xi)
    cd_dsgld_round(th, topo, mix, p, g, 1e-3, xi)
    dsgd_round(th, mix.weights, g, 1e-3)
    q_dsgd_round(th, DigitalLinks.setup(topo, p, 4, 0), mix, g, 1e-3)
    assert np.array_equal(th, frozen)


@pytest.mark.parametrize("order", [[4, 3, 2, 1, 0], [2, 0, 4, 1, 3]])
def test_q_dsgd_encoding_order_is_irrelevant(order):
    topo, mix = mixing_for("star", 5)
    p = ChannelParams.from_snr_db(20.0, 60)
    a = DigitalLinks.setup(topo, p, 6, 11)
    b = DigitalLinks.setup(topo, p, 6, 11)
    th_a, g = _thetas_and_grads(5, m=60)
    th_b = th_a.copy()
    for s in range(30):
        th_a = q_dsgd_round(th_a, a, mix, g, 0.01, s)
        th_b = q_dsgd_round(th_b, b, mix, g, 0.01, s, order=order)
        assert np.array_equal(th_a, th_b)


def test_retained_sample_bookkeeping():
    task, grad = conjugate_task()
    topo, mix = mixing_for("ring", 5)
    p = ChannelParams.from_snr_db(20.0, 2)
    res = run_chain(grad, np.zeros((5, 2)), SamplerConfig("cd-dsgld", 1e-4, 300, 200), 0, topo, mix, p)
    assert res.samples.shape == (5, 100, 2)
    assert res.pooled().shape == (500, 2)
    assert np.array_equal(res.samples[:, -1], res.final)


def test_divergence_is_reported():
    spec = ModelSpec("conjugate-gaussian", 1)
    grad = AgentGradients(spec, [Dataset(np.ones((50, 1)))])
    with pytest.raises(NumericalDivergenceError):
        run_chain(grad, np.ones((1, 1)), SamplerConfig("sgld", 1.0, 500, 10), 0)


def test_chain_is_deterministic():
    task, grad = conjugate_task()
    topo, mix = mixing_for("ring", 5)
    p = ChannelParams.from_snr_db(10.0, 2)
    cfg = SamplerConfig("cd-dsgld", 1e-3, 500, 400)
    a = run_chain(grad, np.zeros((5, 2)), cfg, 9, topo, mix, p)
    b = run_chain(grad, np.zeros((5, 2)), cfg, 9, topo, mix, p)
    assert np.array_equal(a.samples, b.samples)
