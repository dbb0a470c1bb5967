"""Brownian polymer in a Poisson environment.

The tube around a path at time s is the interval [B_s - r/2, B_s + r/2], and
the energy of a path is the number of environment points it meets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import (ORIGIN, PathSample, RandomStream, SpaceTimeBox, SpaceTimePoint, heat_kernel,
                   sample_bridge_at, sample_brownian_at, sample_poisson_points)
from .errors import BudgetExceededError, ContractError, DomainError
from .stats import EstimatorResult, SampleSet

WINDOW_C = 6.0
# paths per inner-MC chunk; fixed so chunked results do not depend on batch size
PATH_CHUNK = 1 << 15
# paths per block in the SHE residual, which stores every time node
SHE_CHUNK = 1 << 12


def lambda_of_beta(beta):
    """lambda(beta) = e^beta - 1."""
    out = np.expm1(beta)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class PolymerParams:
    beta: float
    nu: float
    r: float
    t: float

    def __post_init__(self):
        if not math.isfinite(self.beta):
            raise DomainError("beta must be finite")
        if not (self.nu >= 0 and math.isfinite(self.nu)):
            raise DomainError("nu must be finite and >= 0")
        if not self.r > 0:
            raise DomainError("r must be positive")
        if not (self.t > 0 and math.isfinite(self.t)):
            raise DomainError("t must be positive")

    @property
    def lam(self) -> float:
        return lambda_of_beta(self.beta)

    @property
    def compensator(self) -> float:
        """lambda * nu * r * t, the log of E[Z_t]."""
        return self.lam * self.nu * self.r * self.t


def polymer_window(t: float, r: float, x_end: float = 0.0, c: float = WINDOW_C) -> SpaceTimeBox:
    """Space-time box [0, t] x [-(c sqrt t + r), c sqrt t + r], stretched to reach ``x_end``."""
    half = c * math.sqrt(t) + r
    return SpaceTimeBox(0.0, t, min(0.0, x_end) - half, max(0.0, x_end) + half)


@dataclass(frozen=True)
class Environment:
    """Finite Poisson configuration; ``s`` is sorted and ``box.t_min`` is 0."""

    s: np.ndarray
    x: np.ndarray
    box: SpaceTimeBox
    intensity: float

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float).reshape(-1)
        if s.shape != x.shape:
            raise DomainError("point arrays differ in length")
        if self.box.t_min != 0:
            raise DomainError("environment boxes start at time 0")
        if s.size and (np.any(np.diff(s) < 0) or not np.all(self.box.contains(s, x))):
            raise DomainError("points must be time-sorted and inside the box")
        if self.intensity < 0:
            raise DomainError("intensity must be non-negative")
        s.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "x", x)

    @classmethod
    def sample(cls, box: SpaceTimeBox, nu: float, stream: RandomStream) -> "Environment":
        pts = sample_poisson_points(box, nu, stream)
        return cls(pts[:, 0], pts[:, 1], box, nu)

    @classmethod
    def for_params(cls, params: PolymerParams, stream: RandomStream, x_end: float = 0.0,
                   c: float = WINDOW_C) -> "Environment":
        return cls.sample(polymer_window(params.t, params.r, x_end, c), params.nu, stream)

    @classmethod
    def from_points(cls, points, box: SpaceTimeBox, nu: float) -> "Environment":
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        order = np.argsort(pts[:, 0], kind="stable")
        return cls(pts[order, 0], pts[order, 1], box, nu)

    def __len__(self):
        return self.s.size

    @property
    def points(self) -> list[SpaceTimePoint]:
        return [SpaceTimePoint(float(a), float(b)) for a, b in zip(self.s, self.x)]

    def up_to(self, t: float):
        """Points with time in (0, t]."""
        m = (self.s > 0) & (self.s <= t)
        return self.s[m], self.x[m]

    def shifted(self, s0: float, y0: float) -> "Environment":
        """theta_{s0,y0}: keep points after s0 and translate them by (-s0, -y0)."""
        if not 0 <= s0 < self.box.t_max:
            raise DomainError("shift time outside the environment box")
        m = self.s > s0
        box = SpaceTimeBox(0.0, self.box.t_max - s0, self.box.x_min - y0, self.box.x_max - y0)
        return Environment(self.s[m] - s0, self.x[m] - y0, box, self.intensity)


def tube_energy(path: PathSample, env: Environment, r: float, t: float | None = None):
    """Number of points met by the path: #{i : |x_i - B_{s_i}| <= r/2}.

    ``path`` must be sampled exactly at the point times in (0, t].  Batched
    paths give one count per row.
    """
    t = env.box.t_max if t is None else t
    s, x = env.up_to(t)
    if path.times.shape != s.shape or not np.array_equal(path.times, s):
        raise ContractError("path times must equal the environment point times in (0, t]")
    hits = np.abs(x - path.values) <= 0.5 * r
    out = hits.sum(axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def _check_env(env: Environment, params: PolymerParams):
    if env.box.t_max < params.t:
        raise ContractError("environment box does not cover [0, t]")


def _paired_estimate(values_chunks, antithetic: bool) -> EstimatorResult:
    """Mean and stderr; antithetic rows i and i + n/2 are averaged first."""
    if antithetic:
        pieces = []
        for v in values_chunks:
            h = v.size // 2
            pieces.append(0.5 * (v[:h] + v[h:]))
        units = np.concatenate(pieces)
        n = 2 * units.size
    else:
        units = np.concatenate(values_chunks)
        n = units.size
    se = float(np.std(units, ddof=1) / math.sqrt(units.size)) if units.size > 1 else 0.0
    return EstimatorResult(float(np.mean(units)), se, n)


def _chunks(n_paths: int, size: int = PATH_CHUNK):
    sizes = [size] * (n_paths // size)
    if n_paths % size:
        sizes.append(n_paths % size)
    return sizes


def _check_paths(n_paths, antithetic):
    if n_paths < 2:
        raise DomainError("need at least two inner paths")
    if antithetic and n_paths % 2:
        raise DomainError("antithetic sampling needs an even number of paths")


def _path_functional(env, params, n_paths, stream, antithetic, log_weight, bridge_to=None):
    """Average exp(log_weight(N)) over paths, N the tube energy."""
    _check_paths(n_paths, antithetic)
    s, x = env.up_to(params.t)
    if bridge_to is not None:
        s, x = s[s < params.t], x[s < params.t]
    if s.size == 0 or params.beta == 0:
        # every path has the same weight; no sampling needed
        w = math.exp(log_weight(0))
        return EstimatorResult(w, 0.0, n_paths)
    chunks = []
    for i, m in enumerate(_chunks(n_paths)):
        sub = stream if n_paths <= PATH_CHUNK else stream.substream(i)
        if bridge_to is None:
            path = sample_brownian_at(s, sub, m, antithetic)
        else:
            path = sample_bridge_at(s, bridge_to, sub, m, antithetic)
        hits = (np.abs(x - path.values) <= 0.5 * params.r).sum(axis=1)
        chunks.append(np.exp(log_weight(hits)))
    return _paired_estimate(chunks, antithetic)


def partition_Z(env: Environment, params: PolymerParams, n_paths: int, stream: RandomStream,
                antithetic: bool = True) -> EstimatorResult:
    """Inner Monte Carlo estimate of P[exp(beta * omega(V_t))] on one environment."""
    _check_env(env, params)
    b = params.beta
    return _path_functional(env, params, n_paths, stream, antithetic, lambda n: b * n)


def renormalized_W(env: Environment, params: PolymerParams, n_paths: int, stream: RandomStream,
                   antithetic: bool = True) -> EstimatorResult:
    """W_t = exp(-lambda nu r t) Z_t."""
    _check_env(env, params)
    b, c = params.beta, params.compensator
    return _path_functional(env, params, n_paths, stream, antithetic, lambda n: b * n - c)


def p2p_W(env: Environment, params: PolymerParams, endpoint, n_paths: int, stream: RandomStream,
          antithetic: bool = True) -> EstimatorResult:
    """rho(t, x) * P_bridge[exp(beta omega(V_t) - lambda nu r t)] for endpoint (t, x)."""
    t, x_end = float(endpoint[0]), float(endpoint[1])
    if not math.isclose(t, params.t, rel_tol=0, abs_tol=1e-12 * max(1.0, params.t)):
        raise DomainError("endpoint time must equal params.t")
    _check_env(env, params)
    b, c = params.beta, params.compensator
    res = _path_functional(env, params, n_paths, stream, antithetic, lambda n: b * n - c,
                           bridge_to=(params.t, x_end))
    return res.scaled(float(heat_kernel(params.t, x_end)))


def shifted_p2p_W(env: Environment, params: PolymerParams, frm, to, n_paths: int,
                  stream: RandomStream, antithetic: bool = True) -> EstimatorResult:
    """W(s, y; t, x) = W(t - s, x - y) evaluated on the shifted environment."""
    s0, y0 = float(frm[0]), float(frm[1])
    t, x = float(to[0]), float(to[1])
    if s0 >= t:
        raise DomainError("shifted P2P needs s < t")
    if not math.isclose(t, params.t, rel_tol=0, abs_tol=1e-12 * max(1.0, t)):
        raise DomainError("endpoint time must equal params.t")
    if env.box.t_max < t:
        raise ContractError("environment box does not cover [s, t]")
    shifted = env if (s0 == 0 and y0 == 0) else env.shifted(s0, y0)
    sub = replace(params, t=t - s0)
    return p2p_W(shifted, sub, (t - s0, x - y0), n_paths, stream, antithetic)


# --- intermediate-disorder scaling -------------------------------------------------

FAMILIES = ("fixed-nu-r", "fixed-beta", "custom")


@dataclass(frozen=True)
class ScalingSchedule:
    """(beta_t, nu_t, r_t) with nu r^2 lambda^2 = beta*^2 t^(-1/2) exactly.

    fixed-nu-r: nu = nu0, r = r0, beta_t from the relation.
    fixed-beta: beta = beta0, r = r0, nu_t from the relation.
    custom: nu = nu0 t^nu_exp, r = r0 t^r_exp, beta_t from the relation.
    """

    beta_star: float
    family: str = "fixed-nu-r"
    nu0: float = 1.0
    r0: float = 1.0
    beta0: float = 1.0
    nu_exp: float = 0.0
    r_exp: float = 0.0

    def __post_init__(self):
        if self.beta_star == 0 or not math.isfinite(self.beta_star):
            raise DomainError("beta* must be a non-zero real")
        if self.family not in FAMILIES:
            raise DomainError(f"unknown scaling family {self.family!r}")
        if self.r0 <= 0 or self.nu0 <= 0:
            raise DomainError("nu0 and r0 must be positive")

    def __call__(self, t: float) -> PolymerParams:
        return scaling_schedule_eval(self, t)


def scaling_schedule_eval(schedule: ScalingSchedule, t: float) -> PolymerParams:
    if not t > 0:
        raise DomainError("t must be positive")
    bs = schedule.beta_star
    if schedule.family == "fixed-beta":
        lam0 = lambda_of_beta(schedule.beta0)
        if lam0 == 0:
            raise DomainError("fixed-beta family needs lambda(beta0) != 0")
        nu = bs ** 2 * t ** -0.5 / (schedule.r0 ** 2 * lam0 ** 2)
        return PolymerParams(schedule.beta0, nu, schedule.r0, t)
    if schedule.family == "fixed-nu-r":
        nu, r = schedule.nu0, schedule.r0
    else:
        nu, r = schedule.nu0 * t ** schedule.nu_exp, schedule.r0 * t ** schedule.r_exp
    lam = bs * t ** -0.25 / (r * math.sqrt(nu))
    if lam <= -1:
        raise DomainError("schedule needs lambda(beta_t) > -1 at this t")
    return PolymerParams(math.log1p(lam), nu, r, t)


def gamma_t(params: PolymerParams, beta_star: float) -> float:
    """gamma_t = beta*^(-3) nu r^3 lambda^3."""
    if beta_star == 0:
        raise DomainError("beta* must be non-zero")
    return params.nu * (params.r * params.lam) ** 3 / beta_star ** 3


def scaling_ratios(params: PolymerParams, beta_star: float) -> dict:
    """The three quantities of the scaling relations at one t."""
    lam, nu, r, t = params.lam, params.nu, params.r, params.t
    return {
        "a_ratio": nu * r * r * lam * lam * math.sqrt(t) / beta_star ** 2,
        "b": nu * (r * lam) ** 3,
        "c": r / math.sqrt(t),
        "gamma": gamma_t(params, beta_star),
        "nu_t32_gamma2": nu * t ** 1.5 * gamma_t(params, beta_star) ** 2,
    }


def rescaled_epsilon(params: PolymerParams) -> float:
    """Tube width in diffusive units, r_t / sqrt(t)."""
    return params.r / math.sqrt(params.t)


# --- test functions ---------------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """Smooth test function with its second derivative and a support interval."""

    __test__ = False

    f: object
    d2f: object = None
    support: tuple = (-math.inf, math.inf)

    def __call__(self, x):
        return self.f(np.asarray(x, dtype=float))

    def second_derivative(self, x):
        if self.d2f is None:
            raise DomainError("test function has no second derivative")
        return self.d2f(np.asarray(x, dtype=float))


def smooth_bump(center: float = 0.0, width: float = 1.0, height: float = 1.0) -> TestFunction:
    """C-infinity bump exp(-1/(1-u^2)) on |u| < 1, u = (x - center)/width."""

    def f(x):
        u = (x - center) / width
        out = np.zeros_like(u)
        m = np.abs(u) < 1
        out[m] = height * np.exp(-1.0 / (1.0 - u[m] ** 2))
        return out

    def d2f(x):
        u = (x - center) / width
        out = np.zeros_like(u)
        m = np.abs(u) < 1
        um = u[m]
        q = 1.0 - um ** 2
        g = np.exp(-1.0 / q)
        # g' = g * (-2u/q^2); g'' = g * (4u^2/q^4 - (2 + 6u^2)/q^3)
        out[m] = height * g * (4 * um ** 2 / q ** 4 - (2 + 6 * um ** 2) / q ** 3) / width ** 2
        return out

    return TestFunction(f, d2f, (center - width, center + width))


def gaussian_bump(center: float = 0.0, sigma: float = 0.5, cutoff: float = 8.0) -> TestFunction:
    """Gaussian exp(-(x-c)^2 / 2 sigma^2), treated as supported on |x - c| <= cutoff sigma."""

    def f(x):
        u = (x - center) / sigma
        return np.exp(-0.5 * u * u)

    def d2f(x):
        u = (x - center) / sigma
        return (u * u - 1.0) * np.exp(-0.5 * u * u) / sigma ** 2

    return TestFunction(f, d2f, (center - cutoff * sigma, center + cutoff * sigma))


# --- Poisson SHE identity -----------------------------------------------------------


@dataclass(frozen=True)
class SheResidual:
    residual: float
    error: float
    stderr: float
    quadrature_error: float
    n_paths: int

    @property
    def ok(self) -> bool:
        return abs(self.residual) <= 3 * self.error


def _she_terms(tau, B, xi_after, lam, nu, r, phi, keep):
    """Per-path time integrals on the node subset ``keep``; point nodes are always kept."""
    tau_k = tau[keep]
    B_k = B[:, keep]
    xa = xi_after[:, keep]
    # no jumps between kept nodes, so xi just before the next node is pure drift
    dtau = np.diff(tau_k)
    xb = xa[:, :-1] * np.exp(-lam * nu * r * dtau)
    f0 = phi.second_derivative(B_k)
    g0 = phi(B_k)
    lebesgue = 0.5 * np.sum(0.5 * (xa[:, :-1] * f0[:, :-1] + xb * f0[:, 1:]) * dtau, axis=1)
    comp = lam * nu * r * np.sum(0.5 * (xa[:, :-1] * g0[:, :-1] + xb * g0[:, 1:]) * dtau, axis=1)
    return lebesgue, comp


def verify_poisson_she(env: Environment, params: PolymerParams, phi: TestFunction, n_paths: int,
                       stream: RandomStream, dt_grid: float = 1e-3) -> SheResidual:
    """Residual of the weak Poisson-SHE identity on one environment.

    Per path, with xi_s = exp(beta N_s - lambda nu r s) the running weight,
        xi_t phi(B_t) - phi(0) - 1/2 int xi phi''(B) ds
            - lambda sum_i xi_{s_i-} phi(B_{s_i}) 1{hit_i} + lambda nu r int xi phi(B) ds
    has mean zero; averaging over paths gives the pairing of W with phi in the
    identity.  Time integrals are trapezoidal on a uniform grid merged with
    the point times, using left and right limits of xi at the points.
    """
    if phi.d2f is None:
        raise DomainError("phi must come with its second derivative")
    _check_env(env, params)
    lam, nu, r, t = params.lam, params.nu, params.r, params.t
    n_grid = max(2, int(math.ceil(t / dt_grid)))
    n_grid += n_grid % 2  # even, so the coarse grid is every other node
    grid = np.linspace(0.0, t, n_grid + 1)
    if lam == 0 or nu == 0:
        # W is the heat kernel and the jump terms vanish: check the heat equation by quadrature
        from scipy import integrate as _int
        a, b = phi.support
        a, b = max(a, -12 * math.sqrt(t)), min(b, 12 * math.sqrt(t))
        xs = np.linspace(a, b, 4001)

        def pair(fun, s):
            return _int.simpson(heat_kernel(s, xs) * fun(xs), x=xs)

        lhs = pair(phi, t) - float(phi(np.array([0.0]))[0])
        # time integral of 1/2 <rho_s, phi''> with the s=0 value phi''(0)
        ts = np.linspace(0.0, t, 2001)
        vals = np.array([float(phi.second_derivative(np.array([0.0]))[0]) if s == 0
                         else pair(phi.second_derivative, s) for s in ts])
        res = lhs - 0.5 * _int.simpson(vals, x=ts)
        return SheResidual(float(res), 1e-6, 0.0, 0.0, n_paths)

    s_pts, x_pts = env.up_to(t)
    s_pts, x_pts = s_pts[s_pts < t], x_pts[s_pts < t]
    tau = np.concatenate([grid, s_pts])
    kind = np.concatenate([np.zeros(grid.size, dtype=int), np.ones(s_pts.size, dtype=int)])
    gidx = np.concatenate([np.arange(grid.size), np.full(s_pts.size, -1)])
    order = np.argsort(tau, kind="stable")
    tau, kind, gidx = tau[order], kind[order], gidx[order]
    is_point = kind == 1
    # coarse grid keeps every other background node plus all point nodes
    keep_coarse = is_point | ((gidx >= 0) & (gidx % 2 == 0))
    keep_fine = np.ones(tau.size, dtype=bool)

    _check_paths(n_paths, True)
    res_f, res_c = [], []
    for i, m in enumerate(_chunks(n_paths, SHE_CHUNK)):
        sub = stream if n_paths <= SHE_CHUNK else stream.substream(i)
        path = sample_brownian_at(tau[1:], sub, m, antithetic=True)
        B = np.concatenate([np.zeros((m, 1)), path.values], axis=1)
        hit = np.zeros(B.shape, dtype=bool)
        hit[:, is_point] = np.abs(x_pts - B[:, is_point]) <= 0.5 * r
        n_after = np.cumsum(hit, axis=1)
        xi_after = np.exp(params.beta * n_after - lam * nu * r * tau)
        xi_before = np.exp(params.beta * (n_after[:, is_point] - hit[:, is_point]) - lam * nu * r * tau[is_point])
        jumps = lam * np.sum(xi_before * phi(B[:, is_point]) * hit[:, is_point], axis=1)
        lhs = xi_after[:, -1] * phi(B[:, -1]) - float(phi(np.array([0.0]))[0])
        leb_f, comp_f = _she_terms(tau, B, xi_after, lam, nu, r, phi, keep_fine)
        leb_c, comp_c = _she_terms(tau, B, xi_after, lam, nu, r, phi, keep_coarse)
        res_f.append(lhs - leb_f - jumps + comp_f)
        res_c.append(lhs - leb_c - jumps + comp_c)
    est = _paired_estimate(res_f, True)
    res_f, res_c = np.concatenate(res_f), np.concatenate(res_c)
    quad = abs(float(np.mean(res_f) - np.mean(res_c))) / 3.0
    return SheResidual(est.value, est.stderr + quad, est.stderr, quad, n_paths)


# --- distributions over environments ------------------------------------------------


def sample_W_distribution(schedule: ScalingSchedule, t: float, n_envs: int, n_paths_inner: int,
                          stream: RandomStream, method: str = "transfer", rel_tol: float = 0.02,
                          max_paths: int = 1 << 20, **transfer_kw) -> SampleSet:
    """One W_t sample per environment, environment i drawn from ``stream.substream(i)``.

    ``method="transfer"`` evaluates each W_t by the deterministic transfer
    operator (inner stderr 0).  ``method="paths"`` uses inner Monte Carlo,
    doubling the path count until the relative stderr is below ``rel_tol``.
    """
    if n_envs < 100:
        raise DomainError("need at least 100 environments")
    params = scaling_schedule_eval(schedule, t)
    if method == "transfer":
        from .transfer import transfer_W_batch
        envs = [Environment.for_params(params, stream.substream(i)) for i in range(n_envs)]
        vals = transfer_W_batch(envs, params, **transfer_kw)
        return SampleSet(vals, np.zeros(n_envs), f"W_t t={t:g}")
    if method != "paths":
        raise DomainError(f"unknown method {method!r}")
    vals = np.empty(n_envs)
    errs = np.empty(n_envs)
    for i in range(n_envs):
        sub = stream.substream(i)
        env = Environment.for_params(params, sub.substream(0))
        n = n_paths_inner
        while True:
            est = renormalized_W(env, params, n, sub.substream(1))
            rel = est.stderr / est.value if est.value > 0 else math.inf
            if rel < rel_tol:
                break
            if 2 * n > max_paths:
                raise BudgetExceededError(f"environment {i}: inner stderr target unreachable", rel,
                                          partial=SampleSet(vals[:i], errs[:i]) if i >= 2 else None)
            n *= 2
        vals[i], errs[i] = est.value, est.stderr
    return SampleSet(vals, errs, f"W_t t={t:g}")


def rescaled_field_Y(env: Environment, schedule: ScalingSchedule, t: float, T: float, X: float,
                     n_paths: int, stream: RandomStream, antithetic: bool = True) -> EstimatorResult:
    """Y_t(T, X) = rho(T, X) * P_bridge[exp(beta omega - lambda nu r tT)] to (tT, sqrt(t) X).

    Equivalently sqrt(t) * W(tT, sqrt(t) X), the diffusively rescaled P2P field.
    """
    if T == 0 and X != 0:
        raise DomainError("Y_t(0, X) is singular for X != 0")
    if not 0 < T <= 1:
        raise DomainError("T must lie in (0, 1]")
    p = scaling_schedule_eval(schedule, t)
    sub = replace(p, t=t * T)
    res = p2p_W(env, sub, (t * T, math.sqrt(t) * X), n_paths, stream, antithetic)
    return res.scaled(math.sqrt(t))


__all__ = [
    "EstimatorResult", "Environment", "PolymerParams", "ScalingSchedule", "SheResidual", "TestFunction",
    "gamma_t", "gaussian_bump", "lambda_of_beta", "p2p_W", "partition_Z", "polymer_window",
    "renormalized_W", "rescaled_epsilon", "rescaled_field_Y", "sample_W_distribution",
    "scaling_ratios", "scaling_schedule_eval", "shifted_p2p_W", "smooth_bump", "tube_energy",
    "verify_poisson_she", "ORIGIN",
]
