import itertools

import numpy as np
import pytest

from revdomain.crf import CrfInstance, NotPositiveDefiniteError, energy, map_inference, nll, system_matrix
from revdomain.superpixel import SimilarityGraph


def random_instance(rng, p_max=8, with_truth=True):
    p = int(rng.integers(2, p_max + 1))
    pairs = [pr for pr in itertools.combinations(range(p), 2) if rng.random() < 0.6]
    if not pairs:
        pairs = [(0, 1)]
    edges = np.array(pairs)
    sims = rng.uniform(0.05, 1.0, size=(len(edges), 2))
    graph = SimilarityGraph(p, edges, sims)
    h = rng.normal(2.0, 1.0, size=p)
    y = rng.normal(2.0, 1.0, size=p) if with_truth else None
    beta = rng.uniform(0.0, 3.0, size=2)
    return CrfInstance(graph, h, y), beta


def neg_energy_grad(y, h, graph, beta):
    """Gradient of -E written out edge by edge."""
    g = 2.0 * (y - h)
    for (i, j), s in zip(graph.edges, graph.similarities):
        w = float(np.dot(beta, s))
        g[i] += w * (y[i] - y[j])
        g[j] -= w * (y[i] - y[j])
    return g


def gradient_descent_minimizer(inst, beta, iters=20000):
    y = inst.h.copy()
    # step below 1 / Lipschitz of grad(-E) = 2 * lambda_max(A)
    wsum = np.zeros(inst.graph.n_nodes)
    for (i, j), s in zip(inst.graph.edges, inst.graph.similarities):
        w = float(np.dot(beta, s))
        wsum[i] += w
        wsum[j] += w
    step = 1.0 / (2.0 + 2.0 * wsum.max())
    for _ in range(iters):
        g = neg_energy_grad(y, inst.h, inst.graph, beta)
        y = y - step * g
        if np.abs(g).max() < 1e-13:
            break
    return y


def two_node(w=2.0):
    graph = SimilarityGraph(2, np.array([[0, 1]]), np.array([[w, 0.0]]))
    return CrfInstance(graph, np.array([0.0, 1.0]), np.array([0.0, 1.0])), np.array([1.0, 0.0])


def test_energy_hand_value():
    inst, beta = two_node()
    assert energy([0.0, 1.0], inst, beta) == pytest.approx(-1.0, abs=1e-15)


def test_energy_zero_at_constant_match():
    graph = SimilarityGraph(3, np.array([[0, 1], [1, 2]]), np.ones((2, 2)))
    inst = CrfInstance(graph, np.full(3, 4.0))
    assert energy(np.full(3, 4.0), inst, [2.0, 3.0]) == 0.0


def test_energy_nonpositive():
    rng = np.random.default_rng(0)
    for _ in range(100):
        inst, beta = random_instance(rng)
        assert energy(rng.normal(size=inst.graph.n_nodes) * 5, inst, beta) <= 0.0


def test_map_two_by_two():
    inst, beta = two_node()
    np.testing.assert_allclose(system_matrix(inst.graph, beta), [[2.0, -1.0], [-1.0, 2.0]])
    np.testing.assert_allclose(map_inference(inst, beta), [1 / 3, 2 / 3], atol=1e-15)


def test_map_beta_zero_is_unary_exactly():
    rng = np.random.default_rng(1)
    for _ in range(20):
        inst, _ = random_instance(rng)
        assert np.array_equal(map_inference(inst, np.zeros(2)), inst.h)


def test_map_matches_gradient_descent():
    rng = np.random.default_rng(2)
    for _ in range(50):
        inst, beta = random_instance(rng)
        y_star = map_inference(inst, beta)
        y_gd = gradient_descent_minimizer(inst, beta)
        assert np.abs(y_star - y_gd).max() < 1e-8


def test_smoothing_variance_monotone():
    rng = np.random.default_rng(3)
    for _ in range(20):
        inst, beta = random_instance(rng)
        # connected chain guarantees the limit is a constant
        variances = [np.var(map_inference(inst, m * (beta + 0.1))) for m in (0, 1, 10, 100)]
        assert all(a >= b - 1e-12 for a, b in zip(variances, variances[1:]))


def test_negative_beta_rejected():
    inst, _ = two_node()
    with pytest.raises(ValueError):
        map_inference(inst, np.array([-1.0, 0.0]))


def test_non_spd_rejected():
    graph = SimilarityGraph(2, np.array([[0, 1]]), np.array([[np.nan, 1.0]]))
    inst = CrfInstance(graph, np.zeros(2), np.zeros(2))
    with pytest.raises(NotPositiveDefiniteError):
        nll(inst, np.array([1.0, 1.0]))


def test_nll_beta_zero_matches_direct_density():
    rng = np.random.default_rng(4)
    for _ in range(20):
        inst, _ = random_instance(rng)
        loss, _, _ = nll(inst, np.zeros(2))
        # independent Gaussians of variance 1/2 around h
        dens = np.prod(np.exp(-(inst.y_true - inst.h) ** 2) / np.sqrt(np.pi))
        assert loss == pytest.approx(-np.log(dens), rel=1e-12)


def test_nll_single_node():
    graph = SimilarityGraph(1, np.zeros((0, 2), dtype=int), np.zeros((0, 2)))
    inst = CrfInstance(graph, np.array([0.3]), np.array([1.1]))
    loss, gh, gb = nll(inst, np.array([1.0, 2.0]))
    assert loss == pytest.approx(0.8 ** 2 + 0.5 * np.log(np.pi), abs=1e-14)
    ys = np.linspace(-8, 8, 20001)
    dens = [np.exp(-nll(CrfInstance(graph, inst.h, np.array([v])), np.array([1.0, 2.0]))[0]) for v in ys[::50]]
    assert np.trapezoid(dens, ys[::50]) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("p", [2, 3])
def test_nll_matches_numerical_integration(p):
    rng = np.random.default_rng(10 + p)
    for _ in range(3):
        edges = np.array(list(itertools.combinations(range(p), 2)))
        graph = SimilarityGraph(p, edges, rng.uniform(0.1, 1.0, size=(len(edges), 2)))
        h = rng.normal(size=p)
        beta = rng.uniform(0.2, 2.0, size=2)
        y = h + rng.normal(scale=0.4, size=p)
        inst = CrfInstance(graph, h, y)
        center = map_inference(inst, beta)
        n = 161 if p == 3 else 801
        axes = [np.linspace(c - 5.0, c + 5.0, n) for c in center]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, p)
        # exp(E) evaluated straight from its definition
        e = -np.sum((grid - h) ** 2, axis=1)
        for (i, j), s in zip(edges, graph.similarities):
            e -= 0.5 * np.dot(beta, s) * (grid[:, i] - grid[:, j]) ** 2
        vals = np.exp(e).reshape((n,) * p)
        z = vals
        for ax in reversed(axes):
            z = np.trapezoid(z, ax, axis=-1)
        e_y = energy(y, inst, beta)
        want = np.exp(e_y) / z
        got = np.exp(-nll(inst, beta)[0])
        assert got == pytest.approx(want, rel=1e-3)


def test_nll_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    eps = 1e-6
    for _ in range(12):
        inst, beta = random_instance(rng)
        beta = beta + 0.05
        lam = 0.0007
        _, gh, gb = nll(inst, beta, lam)
        for i in range(len(inst.h)):
            hp, hm = inst.h.copy(), inst.h.copy()
            hp[i] += eps
            hm[i] -= eps
            num = (nll(CrfInstance(inst.graph, hp, inst.y_true), beta, lam)[0]
                   - nll(CrfInstance(inst.graph, hm, inst.y_true), beta, lam)[0]) / (2 * eps)
            assert abs(num - gh[i]) / max(1.0, abs(gh[i])) < 1e-5
        for k in range(2):
            bp, bm = beta.copy(), beta.copy()
            bp[k] += eps
            bm[k] -= eps
            num = (nll(inst, bp, lam)[0] - nll(inst, bm, lam)[0]) / (2 * eps)
            assert abs(num - gb[k]) / max(1.0, abs(gb[k])) < 1e-5
