import math
from dataclasses import replace

import numpy as np
import pytest

from poisson_polymer.core import RandomStream, SpaceTimeBox, heat_kernel
from poisson_polymer.errors import DomainError
from poisson_polymer.polymer import Environment, PolymerParams, renormalized_W
from poisson_polymer.transfer import (TransferGrid, transfer_W, transfer_W_batch, transfer_p2p,
                                      transfer_solve)

P = PolymerParams(0.8, 1.0, 0.5, 1.0)


@pytest.fixture(scope="module")
def envs():
    return [Environment.for_params(P, RandomStream(40, i)) for i in range(6)]


def test_no_disorder_gives_one(envs):
    q = replace(P, beta=0.0)
    assert np.allclose(transfer_W_batch(envs, q), 1.0, rtol=0, atol=1e-12)
    q = replace(P, nu=0.0)
    env0 = Environment.for_params(q, RandomStream(0))
    assert transfer_W(env0, q) == pytest.approx(1.0, abs=1e-12)


def test_zero_point_environment_is_pure_drift():
    env = Environment.from_points(np.empty((0, 2)), SpaceTimeBox(0.0, 2.0, -10.0, 10.0), 1.0)
    p = PolymerParams(1.0, 1.0, 0.5, 2.0)
    assert transfer_W(env, p) == pytest.approx(math.exp(-p.compensator), rel=1e-12)


def test_p2p_without_disorder_is_heat_kernel():
    q = replace(P, nu=0.0)
    env0 = Environment.for_params(q, RandomStream(0))
    for x in (0.0, 0.35, 1.2):
        assert transfer_p2p(env0, q, x, cells_per_tube=16) == pytest.approx(heat_kernel(1.0, x), rel=1e-3)


def test_agrees_with_path_monte_carlo(envs):
    ref = transfer_W_batch(envs[:3], P, cells_per_tube=32)
    for i, env in enumerate(envs[:3]):
        est = renormalized_W(env, P, 1 << 16, RandomStream(41, i))
        assert abs(est.value - ref[i]) <= 3 * est.stderr + 2e-3 * ref[i]


def test_constant_pairing_equals_mass(envs):
    res = transfer_solve(envs, P, test_functions=[[lambda x: np.ones_like(x), lambda x: 0 * x]])
    assert np.allclose(res.pairings[0][:, 0], res.mass[:, 0], rtol=1e-12)
    assert np.all(res.pairings[0][:, 1] == 0)


def test_record_times_match_separate_solves(envs):
    res = transfer_solve(envs[:2], P, record_times=[0.5, 1.0])
    half = replace(P, t=0.5)
    grid = TransferGrid.for_params(P)
    direct = transfer_solve(envs[:2], half, grid=grid).mass[:, 0]
    assert np.allclose(res.mass[:, 0], direct, rtol=1e-12)
    assert np.allclose(res.mass[:, 1], transfer_W_batch(envs[:2], P), rtol=1e-12)


def test_batch_size_changes_only_rounding(envs):
    a = transfer_solve(envs, P, batch=64).mass
    b = transfer_solve(envs, P, batch=2).mass
    assert np.allclose(a, b, rtol=1e-13)
    # the same batch size is bit-reproducible
    assert np.array_equal(a, transfer_solve(envs, P, batch=64).mass)


def test_mean_one_over_environments():
    envs = [Environment.for_params(P, RandomStream(42, i)) for i in range(1500)]
    w = transfer_W_batch(envs, P, cells_per_tube=4)
    assert abs(w.mean() - 1) <= 3 * w.std(ddof=1) / math.sqrt(w.size)
    assert np.all(w > 0)


def test_validation(envs):
    with pytest.raises(DomainError):
        transfer_solve(envs, P, record_times=[0.6, 0.5])
    with pytest.raises(DomainError):
        transfer_solve(envs, P, record_times=[1.5])
    with pytest.raises(DomainError):
        transfer_solve(envs, P, record_times=[0.5, 1.0], probes=[np.zeros(1)])
    with pytest.raises(DomainError):
        transfer_solve(envs, P, probes=[np.array([100.0])], grid=TransferGrid.for_params(P))
    short = Environment.for_params(replace(P, t=0.5), RandomStream(0))
    with pytest.raises(DomainError):
        transfer_solve([short], P)
