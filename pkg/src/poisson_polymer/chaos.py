"""Poisson Wiener-Ito calculus: factorial measures, multiple integrals and chaos kernels.

Kernels used by :func:`wiener_ito_integral` are objects with ``arity``,
``evaluate(s, x)`` taking ``(M, k)`` arrays, and optionally an exact
``partial_integral(fixed, s_fixed, x_fixed, domain)`` that integrates the
free coordinates over ``domain``.  Plain callables are wrapped in
:class:`FunctionKernel` and integrated numerically.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.stats import qmc

from .core import RandomStream, SpaceTimeBox, heat_kernel
from .errors import CapacityError, DomainError, ToleranceError, TruncationError
from .polymer import Environment, PolymerParams, ScalingSchedule, scaling_schedule_eval, gamma_t
from .stats import EstimatorResult

MAX_ORDER = 4
MAX_CHAOS_ORDER = 3

_GL_CACHE: dict = {}


def _gauss_legendre(n):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


# --- joint tube probabilities -----------------------------------------------------------


def _panels(a, b, breaks, n_nodes):
    """Composite Gauss-Legendre nodes on [a, b] split at ``breaks`` (all broadcastable)."""
    xi, wi = _gauss_legendre(n_nodes)
    bps = np.stack(np.broadcast_arrays(a, b, *breaks), axis=-1)
    bps = np.clip(bps, a[..., None], b[..., None])
    bps.sort(axis=-1)
    lo, hi = bps[..., :-1], bps[..., 1:]
    half = 0.5 * (hi - lo)
    nodes = (lo + half)[..., None] + half[..., None] * xi
    weights = half[..., None] * wi
    shape = nodes.shape[:-2] + (-1,)
    return nodes.reshape(shape), weights.reshape(shape)


def tube_hit_probability(s, x, width: float, n_nodes: int = 16):
    """P[|B_{s_i} - x_i| <= width/2 for all i] for Brownian motion from (0, 0).

    ``s`` is ``(M, k)`` with strictly increasing positive rows.  The Markov
    property turns the probability into nested one-dimensional integrals over
    the boxes; each level uses composite Gauss-Legendre panels split where the
    integrand bends (the previous node, and the edges of the next box), and
    the innermost level is an exact normal-CDF difference.
    """
    s = np.atleast_2d(np.asarray(s, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    M, k = s.shape
    if k == 0:
        return np.ones(M)
    ds = np.diff(np.concatenate([np.zeros((M, 1)), s], axis=1), axis=1)
    if np.any(ds <= 0):
        raise DomainError("tube probability needs strictly increasing positive times")
    h = 0.5 * width
    sig = np.sqrt(ds)
    y = np.zeros((M, 1))
    w = np.ones((M, 1))
    for i in range(k - 1):
        a = np.broadcast_to((x[:, i] - h)[:, None], y.shape)
        b = np.broadcast_to((x[:, i] + h)[:, None], y.shape)
        si = sig[:, i:i + 1]
        nxt = x[:, i + 1:i + 2]
        breaks = [y, y - 2 * si, y + 2 * si, y - 5 * si, y + 5 * si, nxt - h, nxt + h]
        nodes, weights = _panels(a, b, breaks, n_nodes)  # (M, P, Q)
        dens = np.exp(-(nodes - y[..., None]) ** 2 / (2 * ds[:, i, None, None])) / np.sqrt(2 * np.pi * ds[:, i, None, None])
        w = (w[..., None] * weights * dens).reshape(M, -1)
        y = nodes.reshape(M, -1)
    sk = sig[:, -1:]
    last = special.ndtr((x[:, -1:] + h - y) / sk) - special.ndtr((x[:, -1:] - h - y) / sk)
    return np.sum(w * last, axis=1)


# --- kernels -----------------------------------------------------------------------------


def _as_2d(s, x, k):
    s = np.asarray(s, dtype=float)
    x = np.asarray(x, dtype=float)
    if s.ndim == 1:
        s, x = s[None, :], x[None, :]
    if s.shape[-1] != k or x.shape != s.shape:
        raise DomainError(f"expected {k} times and positions per row")
    return s, x


class FunctionKernel:
    """Wraps ``f(s, x)`` acting on ``(M, k)`` arrays; integrals are numeric."""

    symmetric = False

    def __init__(self, f, arity: int, symmetric: bool = False):
        self.f = f
        self.arity = arity
        self.symmetric = symmetric

    def evaluate(self, s, x):
        s, x = _as_2d(s, x, self.arity)
        return np.asarray(self.f(s, x), dtype=float).reshape(-1)

    __call__ = evaluate


def as_kernel(g, k=None):
    if hasattr(g, "evaluate") and hasattr(g, "arity"):
        if k is not None and g.arity != k:
            raise DomainError(f"kernel arity {g.arity} does not match k={k}")
        return g
    if k is None:
        raise DomainError("arity needed to wrap a plain function")
    return FunctionKernel(g, k)


class BoxIndicatorKernel:
    """Product of indicators prod_i 1_{A_i}(s_i, x_i)."""

    symmetric = False

    def __init__(self, boxes):
        self.boxes = tuple(boxes)
        self.arity = len(self.boxes)

    def evaluate(self, s, x):
        s, x = _as_2d(s, x, self.arity)
        out = np.ones(s.shape[0])
        for i, A in enumerate(self.boxes):
            out *= A.contains(s[:, i], x[:, i])
        return out

    __call__ = evaluate

    def partial_integral(self, fixed, s_fixed, x_fixed, domain: SpaceTimeBox):
        out = np.ones(s_fixed.shape[0])
        for j, i in enumerate(fixed):
            out *= self.boxes[i].contains(s_fixed[:, j], x_fixed[:, j])
        for i in range(self.arity):
            if i not in fixed:
                A = self.boxes[i].intersect(domain)
                out *= 0.0 if A is None else A.area
        return out


class LinearCombination:
    """sum_j c_j g_j for kernels of equal arity."""

    def __init__(self, terms):
        self.terms = [(float(c), as_kernel(g)) for c, g in terms]
        arities = {g.arity for _, g in self.terms}
        if len(arities) != 1:
            raise DomainError("all terms must share one arity")
        self.arity = arities.pop()
        self.symmetric = all(g.symmetric for _, g in self.terms)

    def evaluate(self, s, x):
        return sum(c * g.evaluate(s, x) for c, g in self.terms)

    __call__ = evaluate

    @property
    def exact(self):
        return all(hasattr(g, "partial_integral") for _, g in self.terms)

    def partial_integral(self, fixed, s_fixed, x_fixed, domain):
        if not self.exact:
            raise NotImplementedError
        return sum(c * g.partial_integral(fixed, s_fixed, x_fixed, domain) for c, g in self.terms)


class SymmetrizedKernel:
    """Sym g = (1/k!) sum over permutations of the (s_i, x_i) pairs."""

    symmetric = True

    def __init__(self, g):
        self.base = g
        self.arity = g.arity
        self.perms = list(itertools.permutations(range(self.arity)))

    def evaluate(self, s, x):
        s, x = _as_2d(s, x, self.arity)
        tot = np.zeros(s.shape[0])
        for p in self.perms:
            tot += self.base.evaluate(s[:, p], x[:, p])
        return tot / len(self.perms)

    __call__ = evaluate

    def partial_integral(self, fixed, s_fixed, x_fixed, domain):
        if not hasattr(self.base, "partial_integral"):
            raise NotImplementedError
        tot = np.zeros(s_fixed.shape[0])
        where = {c: j for j, c in enumerate(fixed)}
        for p in self.perms:
            # argument slot i of g receives coordinate p[i]
            slots = [i for i in range(self.arity) if p[i] in where]
            cols = [where[p[i]] for i in slots]
            tot += self.base.partial_integral(tuple(slots), s_fixed[:, cols], x_fixed[:, cols], domain)
        return tot / len(self.perms)


def symmetrize(g, k=None):
    """Symmetrised kernel; symmetric inputs are returned unchanged (Sym is idempotent)."""
    g = as_kernel(g, k)
    if g.arity < 1:
        raise DomainError("symmetrize needs k >= 1")
    return g if g.symmetric else SymmetrizedKernel(g)


# --- factorial measures ------------------------------------------------------------------


@dataclass
class FactorialTupleCursor:
    """Ordered k-tuples of distinct point indices, produced in fixed-size chunks."""

    env: Environment
    k: int
    chunk: int = 1 << 16
    _it: object = field(default=None, init=False, repr=False)

    @property
    def count(self) -> int:
        n = len(self.env)
        return math.perm(n, self.k) if self.k <= n else 0

    def __iter__(self):
        it = itertools.permutations(range(len(self.env)), self.k)
        while True:
            block = list(itertools.islice(it, self.chunk))
            if not block:
                return
            yield np.array(block, dtype=np.int64).reshape(-1, self.k)


def _guard(k, max_order):
    if k > max_order:
        raise CapacityError(f"order {k} exceeds the configured maximum {max_order}")
    if k < 0:
        raise DomainError("order must be non-negative")


def factorial_measure_sum(env: Environment, k: int, g, max_order: int = MAX_ORDER) -> float:
    """omega^(k)(g): sum of g over ordered k-tuples of distinct points."""
    _guard(k, max_order)
    if k < 1:
        raise DomainError("k must be at least 1")
    g = as_kernel(g, k)
    total = 0.0
    for idx in FactorialTupleCursor(env, k):
        total += float(np.sum(g.evaluate(env.s[idx], env.x[idx])))
    return total


def _sobol(dim: int, stream: RandomStream):
    # scipy spawns the scrambling generator from a seed sequence, which a keyed Philox lacks
    gen = np.random.Generator(np.random.Philox(stream.seed_sequence()))
    return qmc.Sobol(dim, scramble=True, seed=gen)


@dataclass(frozen=True)
class QuadratureSpec:
    """Lebesgue parts: Gauss-Legendre product rule for one free point,
    scrambled Sobol quasi-MC (``n_qmc`` nodes per replicate) for two or more."""

    n_gauss: int = 24
    n_panels: int = 8
    n_qmc: int = 1 << 17
    n_rep: int = 4
    seed: int = 0
    tol: float = 1e-4
    strict: bool = True


def _gl_rect(domain, n_panels, n_gauss):
    xi, wi = _gauss_legendre(n_gauss)

    def axis(a, b):
        edges = np.linspace(a, b, n_panels + 1)
        half = 0.5 * np.diff(edges)
        nodes = ((edges[:-1] + half)[:, None] + half[:, None] * xi).ravel()
        return nodes, (half[:, None] * wi).ravel()

    ts, tw = axis(domain.t_min, domain.t_max)
    xs, xw = axis(domain.x_min, domain.x_max)
    S, X = np.meshgrid(ts, xs, indexing="ij")
    return S.ravel(), X.ravel(), np.outer(tw, xw).ravel()


def _assemble(k, fixed, s_fixed, x_fixed, s_free, x_free):
    """Full (R, k) arrays from fixed columns (M rows) and free columns (R rows, broadcast)."""
    M = s_fixed.shape[0]
    Q = s_free.shape[0]
    s = np.empty((M, Q, k))
    x = np.empty((M, Q, k))
    free = [i for i in range(k) if i not in fixed]
    for j, i in enumerate(fixed):
        s[:, :, i] = s_fixed[:, j:j + 1]
        x[:, :, i] = x_fixed[:, j:j + 1]
    for j, i in enumerate(free):
        s[:, :, i] = s_free[None, :, j]
        x[:, :, i] = x_free[None, :, j]
    return s.reshape(-1, k), x.reshape(-1, k)


def _numeric_partial(g, fixed, s_fixed, x_fixed, domain, spec: QuadratureSpec):
    """Integral over free coordinates plus an error estimate."""
    k = g.arity
    nf = k - len(fixed)
    M = s_fixed.shape[0]
    if nf == 1:
        vals = []
        for panels in (spec.n_panels, 2 * spec.n_panels):
            ts, xs, ws = _gl_rect(domain, panels, spec.n_gauss)
            out = np.empty(M)
            step = max(1, (1 << 20) // ts.size)
            for a in range(0, M, step):
                s, x = _assemble(k, fixed, s_fixed[a:a + step], x_fixed[a:a + step], ts[:, None], xs[:, None])
                out[a:a + step] = g.evaluate(s, x).reshape(-1, ts.size) @ ws
            vals.append(out)
        return vals[1], np.abs(vals[1] - vals[0])
    vol = domain.area ** nf
    reps = []
    for rep in range(spec.n_rep):
        eng = _sobol(2 * nf, RandomStream(spec.seed, 0, (nf, rep)))
        u = eng.random_base2(int(math.log2(spec.n_qmc)))
        ts = domain.t_min + u[:, :nf] * domain.duration
        xs = domain.x_min + u[:, nf:] * domain.width
        out = np.empty(M)
        step = max(1, (1 << 20) // ts.shape[0])
        for a in range(0, M, step):
            s, x = _assemble(k, fixed, s_fixed[a:a + step], x_fixed[a:a + step], ts, xs)
            out[a:a + step] = g.evaluate(s, x).reshape(-1, ts.shape[0]).mean(axis=1) * vol
        reps.append(out)
    reps = np.array(reps)
    return reps.mean(axis=0), reps.std(axis=0, ddof=1) / math.sqrt(spec.n_rep)


def _partial(g, fixed, s_fixed, x_fixed, domain, spec):
    if hasattr(g, "partial_integral"):
        try:
            return g.partial_integral(fixed, s_fixed, x_fixed, domain), np.zeros(s_fixed.shape[0])
        except NotImplementedError:
            pass
    return _numeric_partial(g, fixed, s_fixed, x_fixed, domain, spec)


def wiener_ito_integral(env: Environment, nu: float, k: int, g, quadrature: QuadratureSpec | None = None,
                        domain: SpaceTimeBox | None = None, max_order: int = MAX_ORDER,
                        return_error: bool = False):
    """Multiple integral against the compensated measure omega - nu ds dx.

    Inclusion-exclusion over J subsets of [k]: point sums over distinct
    J-tuples times nu-weighted Lebesgue integrals over the other coordinates,
    with sign (-1)^(k - |J|).  The Lebesgue part runs over ``domain``
    (default: the environment box).
    """
    _guard(k, max_order)
    spec = quadrature or QuadratureSpec()
    domain = domain or env.box
    if k == 0:
        val = float(np.asarray(g() if callable(g) else g))
        return (val, 0.0) if return_error else val
    g = as_kernel(g, k)
    n = len(env)
    total = 0.0
    err = 0.0
    for m in range(k + 1):
        coef = (-nu) ** (k - m)
        if coef == 0 or m > n:
            continue
        if g.symmetric:
            # every J of size m contributes the same sum: k!/(k-m)! times the sum over m-subsets
            fixed = tuple(range(m))
            if m == 0:
                v, e = _partial(g, (), np.zeros((1, 0)), np.zeros((1, 0)), domain, spec)
            else:
                idx = np.array(list(itertools.combinations(range(n), m)), dtype=np.int64).reshape(-1, m)
                v, e = _partial(g, fixed, env.s[idx], env.x[idx], domain, spec)
            # C(k, m) choices of J, each with m! orderings of a subset
            mult = math.perm(k, m)
            total += coef * mult * float(np.sum(v))
            err += abs(coef) * mult * float(np.sum(e))
            continue
        for J in itertools.combinations(range(k), m):
            if m == 0:
                v, e = _partial(g, (), np.zeros((1, 0)), np.zeros((1, 0)), domain, spec)
                total += coef * float(np.sum(v))
                err += abs(coef) * float(np.sum(e))
                continue
            for idx in FactorialTupleCursor(env, m):
                if m == k:
                    v = g.evaluate(env.s[idx], env.x[idx])
                    e = 0.0
                else:
                    v, e = _partial(g, J, env.s[idx], env.x[idx], domain, spec)
                total += coef * float(np.sum(v))
                err += abs(coef) * float(np.sum(e))
    if spec.strict and err > spec.tol:
        raise ToleranceError("Lebesgue part of the multiple integral missed its tolerance", err)
    return (total, err) if return_error else total


def inner_product(g, h, domain: SpaceTimeBox, symmetrized: bool = True) -> float:
    """<Sym g, Sym h> (or <g, h>) on domain^k, exact for box-indicator combinations."""
    g = as_kernel(g)
    h = as_kernel(h)
    if g.arity != h.arity:
        return 0.0
    k = g.arity

    def atoms(q):
        if isinstance(q, BoxIndicatorKernel):
            return [(1.0, q)]
        if isinstance(q, LinearCombination):
            return [(c * c2, a) for c, sub in q.terms for c2, a in atoms(sub)]
        raise DomainError("exact inner products need box-indicator kernels")

    total = 0.0
    perms = list(itertools.permutations(range(k))) if symmetrized else [tuple(range(k))]
    for cg, a in atoms(g):
        for ch, b in atoms(h):
            acc = 0.0
            for p in perms:
                prod = 1.0
                for i in range(k):
                    box = a.boxes[i].intersect(b.boxes[p[i]])
                    box = box.intersect(domain) if box is not None else None
                    prod *= 0.0 if box is None else box.area
                acc += prod
            total += cg * ch * acc / len(perms)
    return total


@dataclass(frozen=True)
class CovarianceCheck:
    empirical: float
    stderr: float
    theoretical: float
    n: int

    @property
    def z(self) -> float:
        return 0.0 if self.stderr == 0 and self.empirical == self.theoretical else \
            (self.empirical - self.theoretical) / self.stderr


def covariance_check(nu: float, k: int, l: int, g, h, n_envs: int, stream: RandomStream,
                     box: SpaceTimeBox, quadrature: QuadratureSpec | None = None) -> CovarianceCheck:
    """Empirical E[omega^(k)(g) omega^(l)(h)] over environments vs delta_kl k! nu^k <Sym g, Sym h>.

    Both integrals have mean zero, so the product mean is the covariance.
    """
    if k > 2 or l > 2 or k < 1 or l < 1:
        raise CapacityError("covariance checks are limited to orders 1 and 2")
    prods = np.empty(n_envs)
    for i in range(n_envs):
        env = Environment.sample(box, nu, stream.substream(i))
        a = wiener_ito_integral(env, nu, k, g, quadrature)
        b = wiener_ito_integral(env, nu, l, h, quadrature)
        prods[i] = a * b
    theo = math.factorial(k) * nu ** k * inner_product(g, h, box) if k == l else 0.0
    return CovarianceCheck(float(prods.mean()), float(prods.std(ddof=1) / math.sqrt(n_envs)), theo, n_envs)


# --- simplex kernels and chaos of W -----------------------------------------------------


class SimplexKernel:
    """k-point kernel on Delta_k(0, horizon) x R^k, extended by zero off the simplex.

    ``__call__`` checks that the times lie in the open simplex; ``evaluate``
    is the extension by zero used inside integrals.
    """

    symmetric = False

    def __init__(self, arity: int, func, horizon: float = 1.0, exact_norm_sq: float | None = None,
                 x_scale: float = 0.0, label: str = ""):
        self.arity = arity
        self.func = func
        self.horizon = horizon
        self.exact_norm_sq = exact_norm_sq
        self.x_scale = x_scale
        self.label = label

    def _on_simplex(self, s):
        ds = np.diff(np.concatenate([np.zeros((s.shape[0], 1)), s], axis=1), axis=1)
        return np.all(ds > 0, axis=1) & (s[:, -1] <= self.horizon)

    def __call__(self, s, x):
        if self.arity == 0:
            return float(self.func(None, None))
        s2, x2 = _as_2d(s, x, self.arity)
        if not np.all(self._on_simplex(s2)):
            raise DomainError("times must lie in the open simplex 0 < s_1 < ... < s_k <= horizon")
        out = self.func(s2, x2)
        return out[0] if np.ndim(s) == 1 else out

    def evaluate(self, s, x):
        s, x = _as_2d(s, x, self.arity)
        out = np.zeros(s.shape[0])
        m = self._on_simplex(s)
        if m.any():
            out[m] = self.func(s[m], x[m])
        return out

    def norm_sq(self, n: int = 1 << 14, n_rep: int = 8, seed: int = 0) -> EstimatorResult:
        """||g||^2 on the simplex: exact when declared, otherwise quasi-MC."""
        if self.exact_norm_sq is not None:
            return EstimatorResult(self.exact_norm_sq, 0.0, 1 << 62)
        return simplex_l2_norm_sq(self.func, self.arity, self.horizon, n, n_rep, seed, self.x_scale)


def simplex_l2_norm_sq(func, k: int, horizon: float = 1.0, n: int = 1 << 14, n_rep: int = 8,
                       seed: int = 0, x_scale: float = 0.0) -> EstimatorResult:
    """Randomised quasi-MC estimate of int_{Delta_k x R^k} func(s, x)^2.

    Times: s_j = s_{j-1} + (horizon - s_{j-1}) u_j^2, which cancels the
    (s_j - s_{j-1})^(-1/2) singularities of heat-kernel chains.  Positions:
    x_j = x_{j-1} + sigma_j z_j with sigma_j^2 = 2 (s_j - s_{j-1}) + x_scale^2,
    matching the spread of rho^2.  The stderr comes from independent scrambles.
    """
    if k < 1:
        raise DomainError("k must be at least 1")
    m = int(math.ceil(math.log2(n)))
    ests = np.empty(n_rep)
    for rep in range(n_rep):
        eng = _sobol(2 * k, RandomStream(seed, 1, (k, rep)))
        u = eng.random_base2(m)
        u = np.clip(u, 1e-300, 1 - 1e-16)
        s = np.empty((u.shape[0], k))
        x = np.empty((u.shape[0], k))
        jac = np.ones(u.shape[0])
        prev_s = np.zeros(u.shape[0])
        prev_x = np.zeros(u.shape[0])
        for j in range(k):
            rem = horizon - prev_s
            d = rem * u[:, j] ** 2
            jac *= 2 * u[:, j] * rem
            z = special.ndtri(u[:, k + j])
            sig = np.sqrt(2 * d + x_scale ** 2)
            jac *= sig * math.sqrt(2 * math.pi) * np.exp(0.5 * z * z)
            prev_s = prev_s + d
            prev_x = prev_x + sig * z
            s[:, j] = prev_s
            x[:, j] = prev_x
        ok = np.all(np.diff(np.concatenate([np.zeros((s.shape[0], 1)), s], axis=1), axis=1) > 0, axis=1)
        vals = np.zeros(s.shape[0])
        if ok.any():
            vals[ok] = np.asarray(func(s[ok], x[ok]), dtype=float) ** 2 * jac[ok]
        ests[rep] = vals.mean()
    return EstimatorResult(float(ests.mean()), float(ests.std(ddof=1) / math.sqrt(n_rep)), n_rep << m)


def rho_k_kernel(k: int, beta: float = 1.0, horizon: float = 1.0) -> SimplexKernel:
    """beta^k rho^k(s, x) on Delta_k(0, horizon), with its exact squared norm."""
    def f(s, x):
        return beta ** k * np.prod(_increments_density(s, x), axis=1)
    norm = beta ** (2 * k) * fock_term(k) * horizon ** (k / 2) if k else 1.0
    return SimplexKernel(k, f, horizon, norm, label=f"rho^{k}")


def _increments_density(s, x):
    ds = np.diff(np.concatenate([np.zeros((s.shape[0], 1)), s], axis=1), axis=1)
    dx = np.diff(np.concatenate([np.zeros((x.shape[0], 1)), x], axis=1), axis=1)
    return heat_kernel(ds, dx)


class TkWKernel(SimplexKernel):
    """T_k W_t(s, x) = lambda^k P[prod_i chi^r_{s_i, x_i}(B)].

    As a function on the cube it is symmetric (rows are time-sorted before
    evaluation), and its Lebesgue partial integrals over [0, t] x R are exact
    because each chi integrates to r in space.
    """

    symmetric = True

    def __init__(self, params: PolymerParams, k: int, n_nodes: int = 16):
        self.params = params
        self.n_nodes = n_nodes
        lam, r = params.lam, params.r

        def f(s, x):
            if lam == 0:
                return np.zeros(s.shape[0])
            return lam ** k * tube_hit_probability(s, x, r, n_nodes)

        super().__init__(k, f, params.t, label=f"T_{k}W")

    def evaluate(self, s, x):
        s, x = _as_2d(s, x, self.arity)
        order = np.argsort(s, axis=1, kind="stable")
        s = np.take_along_axis(s, order, axis=1)
        x = np.take_along_axis(x, order, axis=1)
        out = np.zeros(s.shape[0])
        ok = np.all(np.diff(s, axis=1) > 0, axis=1) & (s[:, 0] > 0) & (s[:, -1] <= self.horizon)
        if ok.any():
            out[ok] = self.func(s[ok], x[ok])
        return out

    def partial_integral(self, fixed, s_fixed, x_fixed, domain):
        p = self.params
        nf = self.arity - len(fixed)
        scale = p.lam ** self.arity * (p.r * p.t) ** nf
        if p.lam == 0:
            return np.zeros(s_fixed.shape[0])
        if not fixed:
            return np.full(s_fixed.shape[0], scale)
        order = np.argsort(s_fixed, axis=1, kind="stable")
        s = np.take_along_axis(s_fixed, order, axis=1)
        x = np.take_along_axis(x_fixed, order, axis=1)
        return scale * tube_hit_probability(s, x, p.r, self.n_nodes)


def T_k_W_kernel(params: PolymerParams, k: int, max_order: int = MAX_CHAOS_ORDER, n_nodes: int = 16):
    _guard(k, max_order)
    if k == 0:
        return SimplexKernel(0, lambda s, x: 1.0, params.t, 1.0, label="T_0W")
    return TkWKernel(params, k, n_nodes)


def phi_t_kernel(schedule: ScalingSchedule, t: float, k: int, max_order: int = MAX_CHAOS_ORDER,
                 n_nodes: int = 16) -> SimplexKernel:
    """gamma_t^-k lambda^k P[prod chi^eps_{s_i, x_i}] on the unit simplex, eps = r_t / sqrt(t)."""
    _guard(k, max_order)
    p = scaling_schedule_eval(schedule, t)
    if k == 0:
        return SimplexKernel(0, lambda s, x: 1.0, 1.0, 1.0, label="phi^0")
    g = gamma_t(p, schedule.beta_star)
    eps = p.r / math.sqrt(t)
    lam = p.lam
    if g == 0:
        return SimplexKernel(k, lambda s, x: np.zeros(s.shape[0]), 1.0, 0.0, label=f"phi_t^{k}")
    coef = (lam / g) ** k

    def f(s, x):
        return coef * tube_hit_probability(s, x, eps, n_nodes)

    return SimplexKernel(k, f, 1.0, x_scale=eps, label=f"phi_t^{k}")


def fock_term(k: int) -> float:
    """||rho^k||^2 on Delta_k(0, 1) x R^k = 2^-k / Gamma(k/2 + 1)."""
    return math.exp(-k * math.log(2.0) - special.gammaln(0.5 * k + 1.0))


def fock_norm_rho(beta: float, K: int):
    """Partial sum of sum_k beta^(2k) 2^-k / Gamma(k/2 + 1) up to K, and a tail bound.

    The consecutive-term ratio q_k = a_{k+1}/a_k = (beta^2/2) Gamma(k/2+1)/Gamma(k/2+3/2)
    decreases in k, so the tail beyond K is at most a_{K+1} / (1 - q_{K+1}).
    """
    if K < 0:
        raise DomainError("K must be non-negative")
    b2 = beta * beta
    terms = [b2 ** k * fock_term(k) for k in range(K + 1)]
    partial = math.fsum(terms)
    if b2 == 0:
        return partial, 0.0
    a_next = b2 ** (K + 1) * fock_term(K + 1)
    q = 0.5 * b2 * math.exp(special.gammaln(0.5 * (K + 1) + 1) - special.gammaln(0.5 * (K + 2) + 1))
    tail = a_next / (1 - q) if q < 1 else math.inf
    return partial, tail


@dataclass(frozen=True)
class FockElement:
    """Kernels g^0 (a scalar), g^1, ..., g^K with an optional certified tail."""

    kernels: tuple
    tail_bound: float | None = None

    @property
    def order(self) -> int:
        return len(self.kernels) - 1

    def norm_sq(self, **qmc_kw) -> EstimatorResult:
        parts = [EstimatorResult(float(self.kernels[0]) ** 2, 0.0, 1 << 62)]
        parts += [g.norm_sq(**qmc_kw) for g in self.kernels[1:]]
        val = math.fsum(p.value for p in parts)
        se = math.sqrt(math.fsum(p.stderr ** 2 for p in parts))
        return EstimatorResult(val, se, min(p.n for p in parts))


def R_beta(beta: float, K: int) -> FockElement:
    """The Fock element (beta^k rho^k)_k whose image is the continuum P2L partition function."""
    _, tail = fock_norm_rho(beta, K)
    return FockElement(tuple([1.0] + [rho_k_kernel(k, beta) for k in range(1, K + 1)]), tail)


def chaos_tail_bound(params: PolymerParams, K: int, k_max: int = 400) -> float:
    """RMS bound on W_t minus its chaos truncation at order K.

    Uses nu^k ||T_k W 1_Delta||^2 <= a^k / Gamma(k/2 + 1), a = nu lambda^2 r^2 sqrt(t/2),
    which follows from P[prod chi] <= prod r / sqrt(2 pi (s_j - s_{j-1})) and
    int chi dx = r.
    """
    a = params.nu * params.lam ** 2 * params.r ** 2 * math.sqrt(params.t / 2)
    if a == 0:
        return 0.0
    ks = np.arange(K + 1, K + 1 + k_max)
    logs = ks * math.log(a) - special.gammaln(0.5 * ks + 1)
    return float(math.sqrt(np.exp(logs).sum()))


@dataclass(frozen=True)
class ChaosReconstruction:
    value: float
    terms: tuple
    tail_bound: float
    quadrature_error: float


def chaos_reconstruct_W(env: Environment, params: PolymerParams, K: int, quadrature: QuadratureSpec | None = None,
                        tolerance: float | None = None, max_order: int = MAX_CHAOS_ORDER,
                        n_nodes: int = 16) -> ChaosReconstruction:
    """sum_{k <= K} (1/k!) omega^(k)(T_k W_t) on the points of ``env`` in (0, t]."""
    _guard(K, max_order)
    tail = chaos_tail_bound(params, K)
    if tolerance is not None and tail > tolerance:
        raise TruncationError(f"truncation at K={K} is too coarse", tail)
    s, x = env.up_to(params.t)
    box = SpaceTimeBox(0.0, params.t, env.box.x_min, env.box.x_max)
    env_t = Environment(s, x, box, env.intensity)
    terms = [1.0]
    qerr = 0.0
    for k in range(1, K + 1):
        if params.lam == 0:
            terms.append(0.0)
            continue
        g = TkWKernel(params, k, n_nodes)
        v, e = wiener_ito_integral(env_t, params.nu, k, g, quadrature, max_order=max(max_order, MAX_ORDER),
                                   return_error=True)
        terms.append(v / math.factorial(k))
        qerr += e / math.factorial(k)
    return ChaosReconstruction(math.fsum(terms), tuple(terms), tail, qerr)
