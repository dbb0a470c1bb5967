"""Estimator reductions and the distributional tests used by experiments."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .core import RandomStream
from .errors import DomainError


@dataclass(frozen=True)
class EstimatorResult:
    value: float
    stderr: float
    n: int

    def __post_init__(self):
        if self.stderr < 0 or not math.isfinite(self.stderr):
            raise DomainError("stderr must be finite and non-negative")

    def scaled(self, c: float) -> "EstimatorResult":
        return EstimatorResult(self.value * c, self.stderr * abs(c), self.n)

    def z_score(self, target: float) -> float:
        if self.stderr == 0:
            return 0.0 if self.value == target else math.copysign(math.inf, self.value - target)
        return (self.value - target) / self.stderr

    @staticmethod
    def pooled(results) -> "EstimatorResult":
        """Combine independent estimates of the same mean, weighted by n.

        Combination runs in the given order, so a fixed task order gives a
        fixed floating-point result.
        """
        results = list(results)
        n = sum(r.n for r in results)
        value = math.fsum(r.n * r.value for r in results) / n
        var = math.fsum((r.n * r.stderr) ** 2 for r in results) / n ** 2
        return EstimatorResult(value, math.sqrt(var), n)


@dataclass(frozen=True)
class SampleSet:
    values: np.ndarray
    inner_stderr: np.ndarray | None = None
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "values", v)
        if v.size < 2:
            raise DomainError("a sample set needs at least two values")
        if np.isnan(v).any():
            raise DomainError("sample set contains NaN")
        if self.inner_stderr is not None:
            e = np.asarray(self.inner_stderr, dtype=float).reshape(-1)
            if e.shape != v.shape:
                raise DomainError("inner stderr must match the sample length")
            object.__setattr__(self, "inner_stderr", e)

    def __len__(self):
        return self.values.size


def _values(samples):
    return samples.values if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float).reshape(-1)


def mean_stderr(samples) -> EstimatorResult:
    v = _values(samples)
    if v.size < 2:
        raise DomainError("mean_stderr needs at least two samples")
    return EstimatorResult(float(np.mean(v)), float(np.std(v, ddof=1) / math.sqrt(v.size)), v.size)


def ks_two_sample(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov distance sup |F_a - F_b|."""
    x = np.sort(_values(a))
    y = np.sort(_values(b))
    if x.size < 50 or y.size < 50:
        raise DomainError("KS distance needs at least 50 samples on each side")
    return float(sps.ks_2samp(x, y, method="asymp").statistic)


def ks_critical(n: int, m: int, alpha: float = 0.01) -> float:
    """Asymptotic two-sample KS critical distance at level ``alpha``."""
    c = math.sqrt(-0.5 * math.log(alpha / 2))
    return c * math.sqrt((n + m) / (n * m))


@dataclass(frozen=True)
class MomentComparison:
    moment: float
    stderr: float
    z: float


def moment_compare(samples, target: float, p: int, n_boot: int = 1000,
                   stream: RandomStream | None = None) -> MomentComparison:
    """p-th raw moment with a seeded bootstrap stderr and its z-score vs ``target``."""
    if p not in (1, 2, 3, 4):
        raise DomainError("p must be 1, 2, 3 or 4")
    v = _values(samples)
    if v.size < 100:
        raise DomainError("moment_compare needs at least 100 samples")
    vp = v ** p
    m = float(np.mean(vp))
    rng = (stream or RandomStream(0)).generator()
    boots = np.empty(n_boot)
    for i in range(n_boot):
        boots[i] = vp[rng.integers(0, v.size, v.size)].mean()
    se = float(np.std(boots, ddof=1))
    if se == 0:
        z = 0.0 if m == target else math.copysign(math.inf, m - target)
    else:
        z = (m - target) / se
    return MomentComparison(m, se, z)


@dataclass(frozen=True)
class TrendResult:
    tau: float
    decreasing: bool

    @property
    def verdict(self) -> str:
        return "decreasing" if self.decreasing else "not-decreasing"


def kendall_tau(values) -> float:
    """Kendall tau-a of ``values`` against their index."""
    v = np.asarray(values, dtype=float)
    n = v.size
    i, j = np.triu_indices(n, 1)
    return float(np.sign(v[j] - v[i]).sum() / (n * (n - 1) / 2))


def trend_test(values) -> TrendResult:
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size < 3:
        raise DomainError("trend test needs at least three points")
    tau = kendall_tau(v)
    return TrendResult(tau, tau <= -0.5)


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    dof: int
    p_value: float


def chi_square_poisson(counts, mean: float, min_expected: float = 5.0) -> ChiSquareResult:
    """Pearson goodness of fit of integer ``counts`` to Poisson(mean).

    Bins with expected count below ``min_expected`` are merged into their
    neighbours; the two tails are open-ended bins.
    """
    c = np.asarray(counts, dtype=np.int64).reshape(-1)
    n = c.size
    kmax = int(max(c.max(), sps.poisson.ppf(1 - 1e-12, mean)))
    probs = sps.poisson.pmf(np.arange(kmax + 1), mean)
    probs[-1] += sps.poisson.sf(kmax, mean)
    observed = np.bincount(np.minimum(c, kmax), minlength=kmax + 1).astype(float)
    # greedy merge left to right, then fold a short last bin into its neighbour
    obs_b, exp_b = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(observed, probs * n):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            obs_b.append(acc_o)
            exp_b.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 or acc_o > 0:
        if obs_b:
            obs_b[-1] += acc_o
            exp_b[-1] += acc_e
        else:
            obs_b.append(acc_o)
            exp_b.append(acc_e)
    obs_b = np.array(obs_b)
    exp_b = np.array(exp_b)
    dof = obs_b.size - 1
    if dof < 1:
        return ChiSquareResult(0.0, 0, 1.0)
    stat = float(np.sum((obs_b - exp_b) ** 2 / exp_b))
    return ChiSquareResult(stat, dof, float(sps.chi2.sf(stat, dof)))
