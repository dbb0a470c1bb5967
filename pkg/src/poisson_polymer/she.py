"""Stochastic heat equation with multiplicative space-time white noise.

dZ = 1/2 Z'' dT + beta Z eta, started from a delta at the origin.  Two
discretisations share the same noise cells: an explicit finite-difference
scheme and a chaos-level Picard recursion that propagates with the exact
heat semigroup (spectral).  Node j sits at X_j = j dx and noise column j
covers [X_j - dx/2, X_j + dx/2].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import fft, integrate

from .chaos import fock_norm_rho
from .core import RandomStream, SpaceTimeBox, WhiteNoiseGrid, noise_rows, sample_white_noise_grid
from .errors import DomainError, NegativityError, StabilityError

DX = 0.02
X_MAX = 6.0
NEGATIVE_LIMIT = 1e-3
NOISE_CHUNK = 256


def default_dt(dx: float = DX) -> float:
    return dx * dx / 4


def _steps(T: float, dt: float) -> int:
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise DomainError(f"time {T} is not a multiple of dt={dt}")
    return n


@dataclass(frozen=True)
class SHEGrid:
    """Field samples ``values[i, j]`` = Z(record_times[i], X_j)."""

    dt: float
    dx: float
    T_max: float
    X_max: float
    record_times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        check_stability(self.dt, self.dx)

    @property
    def x(self) -> np.ndarray:
        J = int(round(self.X_max / self.dx))
        return np.arange(-J, J + 1) * self.dx

    def row(self, T: float) -> np.ndarray:
        i = np.flatnonzero(np.isclose(self.record_times, T, rtol=0, atol=0.5 * self.dt))
        if i.size == 0:
            raise DomainError(f"time {T} was not recorded")
        return self.values[i[0]]


def check_stability(dt: float, dx: float):
    if not (dt > 0 and dx > 0):
        raise DomainError("steps must be positive")
    if dt > 0.5 * dx * dx * (1 + 1e-12):
        raise StabilityError(f"explicit scheme needs dt <= dx^2/2 (dt={dt}, dx={dx})")


@dataclass(frozen=True)
class SHESolution:
    grid: SHEGrid
    beta: float
    noise: WhiteNoiseGrid | None
    scheme: str
    negative_fraction: float = 0.0
    levels: np.ndarray | None = None  # Picard chaos levels, (K+1, n_rec, n_x)

    def value(self, T: float, X: float) -> float:
        row = self.grid.row(T)
        return float(np.interp(X, self.grid.x, row))


def noise_box(T_max: float, X_max: float, dx: float) -> SpaceTimeBox:
    J = int(round(X_max / dx))
    return SpaceTimeBox(0.0, T_max, -(J + 0.5) * dx, (J + 0.5) * dx)


def _n_nodes(X_max, dx):
    J = int(round(X_max / dx))
    if abs(J * dx - X_max) > 1e-9 * max(1.0, X_max):
        raise DomainError("X_max must be a multiple of dx")
    return 2 * J + 1, J


def _record_steps(record_times, T_max, dt):
    rt = np.atleast_1d(np.asarray(T_max if record_times is None else record_times, dtype=float))
    if rt.size and (np.any(rt <= 0) or np.any(rt > T_max + 1e-12) or np.any(np.diff(rt) <= 0)):
        raise DomainError("record times must be increasing inside (0, T_max]")
    return rt, [_steps(T, dt) for T in rt]


def _fd_evolve(Z, beta, dt, dx, rows, n0, n1, rec_steps):
    """Explicit Euler from step n0 to n1 on fields Z of shape (B, ..., n_x).

    ``rows(n, m)`` returns noise for steps n..n+m-1 with shape (B, m, n_x);
    ``beta`` broadcasts against the middle axes of Z.  Returns recorded fields
    (B, ..., n_rec, n_x) and the number of negative recorded cells.
    """
    c = dt / (2 * dx * dx)
    g = np.asarray(beta, dtype=float)[..., None] / dx
    extra = (1,) * (Z.ndim - 2)
    out = {}
    neg = 0
    n = n0
    targets = set(rec_steps)
    if n0 in targets:
        out[n0] = Z.copy()
    while n < n1:
        m = min(NOISE_CHUNK, n1 - n)
        nz = rows(n, m)
        for j in range(m):
            w = nz[:, j].reshape((Z.shape[0],) + extra + (Z.shape[-1],))
            with np.errstate(over="ignore", invalid="ignore"):
                lap = -2.0 * Z
                lap[..., 1:] += Z[..., :-1]
                lap[..., :-1] += Z[..., 1:]
                Z = Z + c * lap + g * Z * w
            step = n + j + 1
            if step in targets:
                out[step] = Z.copy()
                # non-finite cells mean the scheme blew up; count them with the negative ones
                neg += int(np.count_nonzero(~(Z >= 0)))
        n += m
    rec = np.stack([out[s] for s in rec_steps], axis=-2)
    return rec, neg


def _grid_rows(noise: WhiteNoiseGrid):
    def rows(n, m):
        return noise.cells[None, n:n + m]
    return rows


def _stream_rows(streams, n_x, dt, dx):
    gens = [s.generator() for s in streams]
    pos = [0]

    def rows(n, m):
        if n != pos[0]:
            raise RuntimeError("noise rows must be consumed in order")
        pos[0] = n + m
        return np.stack([noise_rows(g, m, n_x, dt, dx) for g in gens])
    return rows


def _check_noise(noise: WhiteNoiseGrid, dt, dx, n_x, n_steps):
    if not (math.isclose(noise.dt, dt) and math.isclose(noise.dx, dx)):
        raise DomainError("noise grid does not match (dt, dx)")
    if noise.n_x != n_x or noise.n_t < n_steps:
        raise DomainError("noise grid does not cover the solution window")


def _delta(B, n_x, j, dx):
    Z = np.zeros((B, n_x))
    Z[:, j] = 1.0 / dx
    return Z


def _negative_guard(neg, total):
    frac = neg / total if total else 0.0
    if frac > NEGATIVE_LIMIT:
        raise NegativityError(frac)
    return frac


def solve_she_fd(beta: float, dt: float, dx: float, T_max: float, X_max: float,
                 noise: WhiteNoiseGrid | None = None, stream: RandomStream | None = None,
                 record_times=None) -> SHESolution:
    """Explicit finite differences: Z += dt/2 Lap Z + beta Z W_cell / dx."""
    check_stability(dt, dx)
    n_x, J = _n_nodes(X_max, dx)
    n_steps = _steps(T_max, dt)
    if noise is None:
        if stream is None:
            raise DomainError("need a noise grid or a stream")
        noise = sample_white_noise_grid(dt, dx, noise_box(T_max, X_max, dx), stream)
    _check_noise(noise, dt, dx, n_x, n_steps)
    rt, rs = _record_steps(record_times, T_max, dt)
    rec, neg = _fd_evolve(_delta(1, n_x, J, dx), beta, dt, dx, _grid_rows(noise), 0, n_steps, rs)
    frac = _negative_guard(neg, rec.size)
    grid = SHEGrid(dt, dx, T_max, X_max, rt, rec[0])
    return SHESolution(grid, beta, noise, "finite-difference", frac)


def solve_she_fd_batch(beta, streams, dt: float, dx: float, T_max: float, X_max: float,
                       record_times=None) -> tuple[np.ndarray, float]:
    """Fields for one noise draw per stream, generating the noise on the fly.

    A scalar ``beta`` gives shape (B, n_rec, n_x); a sequence of betas gives
    (B, n_beta, n_rec, n_x) with every beta driven by the same noise.  Draw b
    sees exactly the cells ``sample_white_noise_grid`` would produce from
    ``streams[b]``, so batched and single solves agree bit for bit.
    """
    check_stability(dt, dx)
    n_x, J = _n_nodes(X_max, dx)
    n_steps = _steps(T_max, dt)
    rt, rs = _record_steps(record_times, T_max, dt)
    streams = list(streams)
    Z = _delta(len(streams), n_x, J, dx)
    if np.ndim(beta):
        Z = np.repeat(Z[:, None], len(beta), axis=1)
    rec, neg = _fd_evolve(Z, beta, dt, dx, _stream_rows(streams, n_x, dt, dx), 0, n_steps, rs)
    return rec, _negative_guard(neg, rec.size)


class _SpectralHeat:
    """Exact heat semigroup over dt on a zero-padded periodic grid."""

    def __init__(self, n_x, dx, dt, pad=64):
        self.n_x = n_x
        self.n = fft.next_fast_len(n_x + pad, real=True)
        kap = 2 * np.pi * fft.rfftfreq(self.n, dx)
        self.mult = np.exp(-0.5 * kap * kap * dt)

    def __call__(self, u):
        buf = np.zeros(u.shape[:-1] + (self.n,))
        buf[..., :self.n_x] = u
        out = fft.irfft(fft.rfft(buf, axis=-1) * self.mult, self.n, axis=-1)
        return out[..., :self.n_x]


def picard_solve(beta: float, K: int, dt: float, dx: float, T_max: float, X_max: float,
                 noise: WhiteNoiseGrid | None = None, stream: RandomStream | None = None,
                 record_times=None) -> SHESolution:
    """K-fold Picard iteration of the mild equation, run level by level.

    Level j obeys C_j(n+1) = G_dt[C_j(n) + beta C_{j-1}(n) W_n / dx] with C_0
    the heat flow of the delta, so sum_{j<=K} C_j is the chaos truncation
    sum_k beta^k I_k(rho^k) on the grid.  G_dt is the exact heat semigroup.
    """
    if K > 6 or K < 0:
        raise DomainError("Picard order must be between 0 and 6")
    check_stability(dt, dx)
    n_x, J = _n_nodes(X_max, dx)
    n_steps = _steps(T_max, dt)
    if noise is None:
        if stream is None:
            raise DomainError("need a noise grid or a stream")
        noise = sample_white_noise_grid(dt, dx, noise_box(T_max, X_max, dx), stream)
    _check_noise(noise, dt, dx, n_x, n_steps)
    rt, rs = _record_steps(record_times, T_max, dt)
    heat = _SpectralHeat(n_x, dx, dt)
    C = np.zeros((K + 1, n_x))
    C[0, J] = 1.0 / dx
    g = beta / dx
    levels = {}
    for n in range(n_steps):
        D = C.copy()
        if K and beta != 0:
            D[1:] += g * C[:-1] * noise.cells[n]
        C = heat(D)
        if n + 1 in rs:
            levels[n + 1] = C.copy()
    lv = np.stack([levels[s] for s in rs], axis=1)
    grid = SHEGrid(dt, dx, T_max, X_max, rt, lv.sum(axis=0))
    return SHESolution(grid, beta, noise, f"picard({K})", 0.0, lv)


def p2l_Z(solution: SHESolution, T: float = 1.0) -> float:
    """Riemann sum of Z(T, .) over the grid; T = 1 gives the point-to-line partition function."""
    if solution.grid.T_max < T - 1e-12:
        raise DomainError("solution does not reach T")
    return float(solution.grid.row(T).sum() * solution.grid.dx)


def p2p_Z(beta: float, frm, to, noise: WhiteNoiseGrid, dt: float, dx: float, X_max: float,
          scheme: str = "fd", K: int = 4) -> float:
    """Z(S, Y; T, X): delta started at (S, Y), evolved with noise rows from S on."""
    S, Y = float(frm[0]), float(frm[1])
    T, X = float(to[0]), float(to[1])
    if S >= T:
        raise DomainError("P2P needs S < T")
    check_stability(dt, dx)
    n_x, J = _n_nodes(X_max, dx)
    n0, n1 = _steps(S, dt), _steps(T, dt)
    _check_noise(noise, dt, dx, n_x, n1)
    j0 = J + int(round(Y / dx))
    if not 0 <= j0 < n_x or abs(X) > X_max:
        raise DomainError("P2P endpoints outside the spatial window")
    xs = (np.arange(n_x) - J) * dx
    if scheme == "fd":
        rec, neg = _fd_evolve(_delta(1, n_x, j0, dx), beta, dt, dx, _grid_rows(noise), n0, n1, [n1])
        _negative_guard(neg, rec.size)
        return float(np.interp(X, xs, rec[0, 0]))
    if scheme != "picard":
        raise DomainError(f"unknown scheme {scheme!r}")
    heat = _SpectralHeat(n_x, dx, dt)
    C = np.zeros((K + 1, n_x))
    C[0, j0] = 1.0 / dx
    for n in range(n0, n1):
        D = C.copy()
        if K and beta != 0:
            D[1:] += beta / dx * C[:-1] * noise.cells[n]
        C = heat(D)
    return float(np.interp(X, xs, C.sum(axis=0)))


def test_against_phi(solution: SHESolution, phi, T: float = 1.0) -> float:
    """Riemann pairing sum_j Z(T, X_j) phi(X_j) dx.

    ``phi.support``, when present, must lie inside the spatial window.
    """
    a, b = getattr(phi, "support", (-solution.grid.X_max, solution.grid.X_max))
    if a < -solution.grid.X_max or b > solution.grid.X_max:
        raise DomainError("test function support exceeds the spatial window")
    xs = solution.grid.x
    return float(np.sum(solution.grid.row(T) * phi(xs)) * solution.grid.dx)


test_against_phi.__test__ = False


def heat_pairing(phi, T: float = 1.0) -> float:
    """int rho(T, X) phi(X) dX by adaptive quadrature."""
    from .core import heat_kernel
    a, b = getattr(phi, "support", (-math.inf, math.inf))
    a = max(a, -40 * math.sqrt(T))
    b = min(b, 40 * math.sqrt(T))
    return integrate.quad(lambda x: float(heat_kernel(T, x) * phi(np.array([x]))[0]), a, b,
                          epsabs=1e-12, limit=400)[0]


def second_moment_closed_form(beta: float, tol: float = 1e-12) -> float:
    """E[Z_beta^2] = sum_k beta^(2k) 2^-k / Gamma(k/2 + 1), summed until the tail is below ``tol``."""
    K = 0
    while True:
        partial, tail = fock_norm_rho(beta, K)
        if tail < tol:
            return partial
        K += 1
