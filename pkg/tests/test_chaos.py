import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special
from scipy.stats import multivariate_normal

from poisson_polymer.chaos import (BoxIndicatorKernel, FactorialTupleCursor, FunctionKernel, LinearCombination,
                                   QuadratureSpec, R_beta, SimplexKernel, T_k_W_kernel, chaos_reconstruct_W,
                                   chaos_tail_bound, covariance_check, factorial_measure_sum, fock_norm_rho,
                                   fock_term, inner_product, phi_t_kernel, rho_k_kernel, simplex_l2_norm_sq,
                                   symmetrize, tube_hit_probability, wiener_ito_integral)
from poisson_polymer.core import RandomStream, SpaceTimeBox, heat_kernel, heat_kernel_chain
from poisson_polymer.errors import CapacityError, DomainError, ToleranceError, TruncationError
from poisson_polymer.polymer import (Environment, PolymerParams, ScalingSchedule, gamma_t, renormalized_W,
                                     scaling_schedule_eval)

UNIT = SpaceTimeBox(0.0, 1.0, 0.0, 1.0)
A = SpaceTimeBox(0.0, 0.5, 0.0, 1.0)
B = SpaceTimeBox(0.5, 1.0, -1.0, 0.0)


def env_from(points, box=SpaceTimeBox(0.0, 1.0, -2.0, 2.0), nu=1.0):
    return Environment.from_points(points, box, nu)


def random_env(seed, n=5):
    g = RandomStream(seed).generator()
    pts = np.column_stack([g.random(n), g.uniform(-2, 2, n)])
    return env_from(pts)


# --- symmetrisation -----------------------------------------------------------------------


def f1(s, x):
    return np.sin(s) + x


def f2(s, x):
    return np.exp(-s) * x ** 2


def product_kernel():
    return FunctionKernel(lambda s, x: f1(s[:, 0], x[:, 0]) * f2(s[:, 1], x[:, 1]), 2)


def test_symmetrize_product_is_two_term_average():
    sym = symmetrize(product_kernel())
    g = RandomStream(1).generator()
    s, x = g.random((20, 2)), g.standard_normal((20, 2))
    want = 0.5 * (f1(s[:, 0], x[:, 0]) * f2(s[:, 1], x[:, 1]) + f1(s[:, 1], x[:, 1]) * f2(s[:, 0], x[:, 0]))
    assert np.allclose(sym.evaluate(s, x), want, rtol=1e-14)


def test_symmetrize_keeps_symmetric_input_and_is_idempotent():
    sym = symmetrize(product_kernel())
    assert symmetrize(sym) is sym
    sym_in = FunctionKernel(lambda s, x: np.prod(s * x, axis=1), 3, symmetric=True)
    assert symmetrize(sym_in) is sym_in
    g = RandomStream(2).generator()
    s, x = g.random((10, 3)), g.standard_normal((10, 3))
    plain = FunctionKernel(lambda s, x: s[:, 0] * x[:, 1] ** 2 + s[:, 2], 3)
    once = symmetrize(plain)
    twice = symmetrize(FunctionKernel(once.evaluate, 3))
    assert np.allclose(once.evaluate(s, x), twice.evaluate(s, x), rtol=1e-14, atol=1e-15)
    for p in itertools.permutations(range(3)):
        assert np.allclose(once.evaluate(s[:, p], x[:, p]), once.evaluate(s, x), rtol=1e-14)


def test_symmetrize_rejects_zero_arity():
    with pytest.raises(DomainError):
        symmetrize(FunctionKernel(lambda s, x: 1.0, 0))


# --- factorial measures ------------------------------------------------------------------------


def test_cursor_counts():
    env = random_env(3, 5)
    for k in (1, 2, 3):
        c = FactorialTupleCursor(env, k, chunk=7)
        assert c.count == math.perm(5, k)
        tuples = np.concatenate(list(c))
        assert len(tuples) == c.count
        assert all(len(set(t)) == k for t in tuples.tolist())
    assert FactorialTupleCursor(env, 6).count == 0


def test_factorial_sum_constant_and_product_of_counts():
    env = random_env(4, 7)
    one = FunctionKernel(lambda s, x: np.ones(s.shape[0]), 2)
    assert factorial_measure_sum(env, 2, one) == 42
    pts = [(0.1, 0.5), (0.2, 0.5), (0.3, 0.2), (0.7, -0.5), (0.8, -0.2), (0.9, 1.5)]
    env = env_from(pts)
    assert factorial_measure_sum(env, 2, BoxIndicatorKernel([A, B])) == 6


def test_factorial_sum_capacity_guard():
    env = random_env(5, 5)
    with pytest.raises(CapacityError):
        factorial_measure_sum(env, 5, FunctionKernel(lambda s, x: np.ones(s.shape[0]), 5))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_factorial_sum_matches_brute_force(seed, k):
    env = random_env(seed, 5)
    w = RandomStream(seed, 1).generator().standard_normal(4)

    def g(s, x):
        return np.cos(w[0] * s[:, 0] + w[1] * x[:, -1]) + w[2] * s[:, -1] * x[:, 0] + w[3]

    kern = FunctionKernel(g, k)
    brute = 0.0
    for idx in itertools.permutations(range(len(env)), k):
        idx = list(idx)
        brute += float(kern.evaluate(env.s[idx], env.x[idx])[0])
    assert factorial_measure_sum(env, k, kern) == pytest.approx(brute, rel=1e-12, abs=1e-12)


def test_factorial_sum_symmetrisation_invariance():
    env = random_env(6, 5)
    g = product_kernel()
    assert factorial_measure_sum(env, 2, symmetrize(g)) == pytest.approx(factorial_measure_sum(env, 2, g),
                                                                        rel=1e-13)


# --- multiple integrals ------------------------------------------------------------------------


def test_first_order_is_compensated_count():
    box = SpaceTimeBox(0.0, 1.0, -1.0, 1.0)
    env = Environment.sample(box, 3.0, RandomStream(7))
    g = BoxIndicatorKernel([A])
    m = int(np.sum(A.contains(env.s, env.x)))
    assert wiener_ito_integral(env, 3.0, 1, g) == pytest.approx(m - 3.0 * A.area, abs=1e-14)


def test_first_order_numeric_quadrature():
    box = SpaceTimeBox(0.0, 1.0, -1.0, 1.0)
    env = Environment.sample(box, 2.0, RandomStream(8))
    g = FunctionKernel(lambda s, x: (s[:, 0] * np.cos(x[:, 0])), 1)
    exact = 0.5 * 2 * math.sin(1.0)
    want = float(np.sum(env.s * np.cos(env.x))) - 2.0 * exact
    assert wiener_ito_integral(env, 2.0, 1, g) == pytest.approx(want, abs=1e-9)


def test_zero_order_and_tolerance_error():
    env = random_env(9)
    assert wiener_ito_integral(env, 1.0, 0, 2.5) == 2.5
    rough = FunctionKernel(lambda s, x: np.sin(40 * s[:, 0] * x[:, 1]) * np.sign(x[:, 0]), 2)
    with pytest.raises(ToleranceError) as exc:
        wiener_ito_integral(env, 1.0, 2, rough, QuadratureSpec(n_qmc=1 << 6, n_rep=4, tol=1e-8))
    assert exc.value.achieved > 1e-8


def test_symmetrisation_invariance_per_environment():
    box = SpaceTimeBox(0.0, 1.0, -1.0, 1.0)
    env = Environment.sample(box, 4.0, RandomStream(10))
    g = BoxIndicatorKernel([A, B])
    a = wiener_ito_integral(env, 4.0, 2, g)
    b = wiener_ito_integral(env, 4.0, 2, symmetrize(g))
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_linearity():
    box = SpaceTimeBox(0.0, 1.0, -1.0, 1.0)
    env = Environment.sample(box, 4.0, RandomStream(11))
    f = BoxIndicatorKernel([A, B])
    g = BoxIndicatorKernel([B, SpaceTimeBox(0.2, 0.9, -0.5, 0.5)])
    comb = LinearCombination([(2.0, f), (-0.5, g)])
    lhs = wiener_ito_integral(env, 4.0, 2, comb)
    rhs = 2.0 * wiener_ito_integral(env, 4.0, 2, f) - 0.5 * wiener_ito_integral(env, 4.0, 2, g)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("k", [1, 2])
def test_mean_zero_and_isometry(k):
    nu = 2.0
    box = SpaceTimeBox(0.0, 1.0, -1.0, 1.0)
    g = BoxIndicatorKernel([A] if k == 1 else [A, B])
    vals = np.array([wiener_ito_integral(Environment.sample(box, nu, RandomStream(12, k, (i,))), nu, k, g)
                     for i in range(4000)])
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean()) <= 3 * se
    # isometry for a kernel supported on ordered times: E[I_k(g)^2] = k! nu^k <Sym g, Sym g>
    want = math.factorial(k) * nu ** k * inner_product(g, g, box)
    sq = vals ** 2
    assert abs(sq.mean() - want) <= 3 * sq.std(ddof=1) / math.sqrt(sq.size)


def test_inner_product_hand_values():
    box = SpaceTimeBox(0.0, 1.0, -1.0, 1.0)
    g = BoxIndicatorKernel([A, B])
    # Sym g = (1_AxB + 1_BxA)/2 with A, B disjoint: <Sym g, Sym g> = (|A||B| + |B||A|)/4 = 0.125
    assert inner_product(g, g, box) == pytest.approx(0.125)
    assert inner_product(g, g, box, symmetrized=False) == pytest.approx(0.25)
    assert inner_product(BoxIndicatorKernel([A]), g, box) == 0.0


def test_covariance_examples():
    box = SpaceTimeBox(0.0, 1.0, -0.5, 0.5)
    unit = BoxIndicatorKernel([box])
    c = covariance_check(2.0, 1, 1, unit, unit, 3000, RandomStream(13), box)
    assert c.theoretical == pytest.approx(2.0)
    assert abs(c.z) < 3
    wide = SpaceTimeBox(0.0, 1.0, -1.0, 1.0)
    pair = BoxIndicatorKernel([A, B])
    c = covariance_check(2.0, 1, 2, BoxIndicatorKernel([A]), pair, 3000, RandomStream(14), wide)
    assert c.theoretical == 0.0
    assert abs(c.z) < 3
    c = covariance_check(2.0, 2, 2, pair, pair, 3000, RandomStream(15), wide)
    assert c.theoretical == pytest.approx(2 * 4 * 0.125)
    assert abs(c.z) < 3
    with pytest.raises(CapacityError):
        covariance_check(2.0, 3, 1, pair, pair, 10, RandomStream(0), wide)


# --- T_k W kernels ---------------------------------------------------------------------------------


def test_tube_probability_two_points_vs_bivariate_normal():
    s = np.array([[0.3, 1.1], [0.5, 0.6]])
    x = np.array([[0.2, -0.4], [-0.1, 0.3]])
    w = 0.6
    got = tube_hit_probability(s, x, w)
    for i in range(2):
        cov = [[s[i, 0], s[i, 0]], [s[i, 0], s[i, 1]]]
        mvn = multivariate_normal(mean=[0, 0], cov=cov)
        want = mvn.cdf(x[i] + w / 2, lower_limit=x[i] - w / 2)
        assert got[i] == pytest.approx(want, abs=1e-6)


def test_tube_probability_one_point_is_cdf_difference():
    s, x, w = np.array([[0.7]]), np.array([[0.4]]), 0.3
    want = special.ndtr((0.55) / math.sqrt(0.7)) - special.ndtr(0.25 / math.sqrt(0.7))
    assert tube_hit_probability(s, x, w)[0] == pytest.approx(want, rel=1e-14)
    with pytest.raises(DomainError):
        tube_hit_probability(np.array([[0.5, 0.5]]), np.zeros((1, 2)), w)


def test_tk_w_small_tube():
    p = PolymerParams(0.4, 1.0, 0.01, 2.0)
    g = T_k_W_kernel(p, 1)
    val = g(np.array([1.0]), np.array([0.0]))
    quad, _ = integrate.quad(lambda y: heat_kernel(1.0, y), -0.005, 0.005)
    assert val == pytest.approx(p.lam * quad, rel=1e-12)
    assert val == pytest.approx(p.lam * p.r * heat_kernel(1.0, 0.0), rel=1e-4)


def test_tk_w_trivial_cases():
    p = PolymerParams(0.4, 1.0, 0.5, 1.0)
    assert T_k_W_kernel(p, 0)(None, None) == 1.0
    q = PolymerParams(0.0, 1.0, 0.5, 1.0)
    g = T_k_W_kernel(q, 2)
    assert np.all(g.evaluate(np.array([[0.2, 0.5]]), np.array([[0.0, 0.1]])) == 0)
    with pytest.raises(DomainError):
        T_k_W_kernel(p, 2)(np.array([0.5, 0.2]), np.array([0.0, 0.0]))
    with pytest.raises(CapacityError):
        T_k_W_kernel(p, 4)


def test_tk_w_symmetric_under_pair_permutations():
    p = PolymerParams(0.5, 1.0, 0.5, 1.0)
    g = T_k_W_kernel(p, 3)
    s = np.array([[0.2, 0.45, 0.8]])
    x = np.array([[0.1, -0.2, 0.3]])
    base = g.evaluate(s, x)
    assert base[0] > 0
    for perm in itertools.permutations(range(3)):
        assert g.evaluate(s[:, perm], x[:, perm]) == pytest.approx(base, rel=1e-13)


def test_phi_t_equals_rescaled_tk_w():
    sched = ScalingSchedule(1.0, "fixed-nu-r", 1.0, 1.0)
    t = 1e3
    p = scaling_schedule_eval(sched, t)
    gam = gamma_t(p, 1.0)
    s = np.array([[0.2, 0.6]])
    x = np.array([[0.1, -0.3]])
    lhs = gam ** 2 * phi_t_kernel(sched, t, 2).evaluate(s, x)
    rhs = T_k_W_kernel(p, 2).evaluate(t * s, math.sqrt(t) * x)
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_phi_t_pointwise_limit(k):
    sched = ScalingSchedule(1.3, "fixed-nu-r", 1.0, 1.0)
    s = np.array([[0.3, 0.55, 0.9][:k]])
    x = np.array([[0.2, -0.1, 0.4][:k]])
    target = 1.3 ** k * heat_kernel_chain(s[0], x[0])
    errs = [abs(phi_t_kernel(sched, t, k).evaluate(s, x)[0] - target) / target for t in (1e2, 1e4, 1e6)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-4


def test_phi_t_l2_convergence_and_uniform_bound():
    sched = ScalingSchedule(1.0, "fixed-nu-r", 1.0, 1.0)
    rho1 = rho_k_kernel(1)
    for k in (1, 2):
        rho = rho_k_kernel(k)
        dists, norms = [], []
        for t in (1e2, 1e4, 1e6):
            phi = phi_t_kernel(sched, t, k)
            diff = simplex_l2_norm_sq(lambda s, x: phi.func(s, x) - rho.func(s, x), k, n=1 << 13, n_rep=6,
                                      seed=3, x_scale=phi.x_scale)
            dists.append(diff.value)
            norms.append(phi.norm_sq(n=1 << 13, n_rep=6, seed=4).value)
        assert dists[0] > dists[1] > dists[2]
        # with C = 1.5 the bound ||phi_t^k||^2 <= C^(2k) ||rho^k||^2 holds on the grid
        assert max(norms) <= 1.5 ** (2 * k) * rho.exact_norm_sq
    assert rho1.exact_norm_sq == pytest.approx(1 / math.sqrt(math.pi))


def test_simplex_kernel_domain():
    rho = rho_k_kernel(2)
    with pytest.raises(DomainError):
        rho(np.array([0.5, 0.4]), np.array([0.0, 0.0]))
    assert rho.evaluate(np.array([[0.5, 0.4]]), np.zeros((1, 2)))[0] == 0.0
    assert rho(np.array([0.4, 0.5]), np.array([0.0, 0.0])) == pytest.approx(
        heat_kernel(0.4, 0.0) * heat_kernel(0.1, 0.0))


# --- chaos reconstruction ------------------------------------------------------------------------


def test_chaos_reconstruction_trivial_orders():
    p = PolymerParams(0.3, 0.5, 0.5, 1.0)
    env = Environment.for_params(p, RandomStream(16))
    assert chaos_reconstruct_W(env, p, 0).value == 1.0
    q = PolymerParams(0.0, 0.5, 0.5, 1.0)
    assert chaos_reconstruct_W(env, q, 3).value == 1.0
    with pytest.raises(TruncationError):
        chaos_reconstruct_W(env, p, 1, tolerance=1e-12)


def test_chaos_reconstruction_matches_direct():
    p = PolymerParams(0.3, 0.5, 0.5, 1.0)
    env = Environment.for_params(p, RandomStream(17))
    direct = renormalized_W(env, p, 1 << 21, RandomStream(18))
    gaps = []
    for K in (1, 2, 3):
        rec = chaos_reconstruct_W(env, p, K)
        gaps.append(abs(rec.value - direct.value))
    budget = rec.tail_bound + 1e-4 + 3 * direct.stderr
    assert gaps[-1] < budget
    assert gaps[0] > gaps[2]


def test_chaos_tail_bound_decreases():
    p = PolymerParams(0.3, 0.5, 0.5, 1.0)
    b = [chaos_tail_bound(p, K) for K in range(6)]
    assert all(x > y for x, y in zip(b, b[1:]))
    assert chaos_tail_bound(PolymerParams(0.0, 0.5, 0.5, 1.0), 2) == 0.0


# --- Fock norms ---------------------------------------------------------------------------------------


def test_fock_examples():
    assert fock_norm_rho(0.0, 5) == (1.0, 0.0)
    total, tail = fock_norm_rho(1.0, 30)
    assert total == pytest.approx(1.9524, abs=1e-4)
    assert tail < 1e-12
    assert fock_term(1) == pytest.approx(1 / math.sqrt(math.pi), rel=1e-14)
    assert fock_term(1) == pytest.approx(0.564190, abs=1e-6)
    with pytest.raises(DomainError):
        fock_norm_rho(1.0, -1)


def test_fock_series_agrees_with_closed_form():
    # sum_k x^k / Gamma(k/2 + 1) = e^{x^2} (1 + erf x) with x = beta^2 / 2
    for beta in (0.5, 1.0, 2.0):
        total, tail = fock_norm_rho(beta, 80)
        xv = beta ** 2 / 2
        assert total == pytest.approx(math.exp(xv * xv) * (1 + math.erf(xv)), rel=1e-13)
        assert tail < 1e-12


@given(st.floats(0.0, 3.0), st.integers(0, 40))
def test_fock_tail_is_a_bound(beta, K):
    total, tail = fock_norm_rho(beta, K)
    full, _ = fock_norm_rho(beta, 200)
    assert full - total <= tail * (1 + 1e-9) + 1e-15


@pytest.mark.parametrize("k", [1, 2, 3])
def test_fock_term_matches_quasi_mc(k):
    est = simplex_l2_norm_sq(rho_k_kernel(k).func, k, n=1 << 14, n_rep=8, seed=5)
    assert abs(est.value - fock_term(k)) <= 3 * est.stderr


def test_r_beta_element():
    R = R_beta(1.0, 3)
    assert R.order == 3
    est = R.norm_sq()
    assert est.value == pytest.approx(math.fsum(fock_term(k) for k in range(4)), rel=1e-14)
    assert R.tail_bound == pytest.approx(fock_norm_rho(1.0, 3)[1])


def test_simplex_kernel_norm_falls_back_to_qmc():
    kern = SimplexKernel(1, lambda s, x: heat_kernel(s[:, 0], x[:, 0]), 1.0)
    est = kern.norm_sq(n=1 << 12, n_rep=6, seed=1)
    assert abs(est.value - fock_term(1)) <= 3 * est.stderr + 1e-12
