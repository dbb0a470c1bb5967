"""Random streams, samplers and heat-kernel primitives.

Every sampler takes a :class:`RandomStream`, which is an immutable value.
Calling a sampler twice with the same stream gives the same draws, so
parallel callers only need to agree on how substream indices are assigned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .errors import DomainError, ToleranceError

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RandomStream:
    """Counter-based stream keyed by (seed, substream_index, path).

    The Philox key is derived from a SeedSequence whose spawn key is the
    substream index followed by the optional nested path, so streams with
    different indices are independent and need no coordination.
    """

    seed: int
    substream_index: int = 0
    path: tuple = ()

    def __post_init__(self):
        if self.substream_index < 0 or any(p < 0 for p in self.path):
            raise DomainError("substream indices must be non-negative")

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed & _MASK64, spawn_key=(self.substream_index, *self.path))

    def generator(self) -> np.random.Generator:
        key = self.seed_sequence().generate_state(2, dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def substream(self, index: int) -> "RandomStream":
        """Child stream; children of distinct indices are independent."""
        return RandomStream(self.seed, self.substream_index, (*self.path, int(index)))


@dataclass(frozen=True)
class SpaceTimePoint:
    s: float
    x: float

    def __post_init__(self):
        if not (math.isfinite(self.s) and math.isfinite(self.x)):
            raise DomainError("space-time point must be finite")
        if self.s < 0:
            raise DomainError("time must be non-negative")


ORIGIN = SpaceTimePoint(0.0, 0.0)


@dataclass(frozen=True)
class SpaceTimeBox:
    t_min: float
    t_max: float
    x_min: float
    x_max: float

    def __post_init__(self):
        if not self.t_min < self.t_max:
            raise DomainError("box needs t_min < t_max")
        if not self.x_min < self.x_max:
            raise DomainError("box needs x_min < x_max")

    @property
    def duration(self) -> float:
        return self.t_max - self.t_min

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def area(self) -> float:
        return self.duration * self.width

    def contains(self, s, x):
        s = np.asarray(s)
        x = np.asarray(x)
        return (s >= self.t_min) & (s <= self.t_max) & (x >= self.x_min) & (x <= self.x_max)

    def intersect(self, other: "SpaceTimeBox"):
        """Intersection box, or None when it has empty interior."""
        t0, t1 = max(self.t_min, other.t_min), min(self.t_max, other.t_max)
        x0, x1 = max(self.x_min, other.x_min), min(self.x_max, other.x_max)
        if t0 >= t1 or x0 >= x1:
            return None
        return SpaceTimeBox(t0, t1, x0, x1)


@dataclass(frozen=True)
class PathSample:
    """Brownian (or bridge) values at a strictly increasing set of times.

    ``values`` has shape ``(len(times),)`` for one path or
    ``(n_paths, len(times))`` for a batch.
    """

    times: np.ndarray
    values: np.ndarray
    start: SpaceTimePoint = ORIGIN
    pin: SpaceTimePoint | None = None
    antithetic: bool = False

    @property
    def n_paths(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[0]


@dataclass(frozen=True)
class WhiteNoiseGrid:
    """Gaussian cell masses; ``cells[i, j]`` covers time row i, space column j."""

    dt: float
    dx: float
    box: SpaceTimeBox
    cells: np.ndarray = field(repr=False)

    @property
    def n_t(self) -> int:
        return self.cells.shape[0]

    @property
    def n_x(self) -> int:
        return self.cells.shape[1]

    def mass(self, rows, cols) -> float:
        """eta(A) for A the union of the selected cells."""
        return float(self.cells[rows, cols].sum())

    def zeroed_after(self, T: float) -> "WhiteNoiseGrid":
        """Copy with every cell starting at time >= T set to zero."""
        cells = self.cells.copy()
        first = int(math.ceil((T - self.box.t_min) / self.dt - 1e-9))
        cells[max(first, 0):] = 0.0
        return WhiteNoiseGrid(self.dt, self.dx, self.box, cells)


def _check_times(times, lower=0.0, strict_lower=False):
    times = np.asarray(times, dtype=float).reshape(-1)
    if times.size and not np.all(np.isfinite(times)):
        raise DomainError("times must be finite")
    if times.size > 1 and np.any(np.diff(times) <= 0):
        raise DomainError("times must be strictly increasing")
    if times.size and (times[0] < lower or (strict_lower and times[0] == lower)):
        raise DomainError("times start before the path start")
    return times


def heat_kernel(s, x):
    """rho(s, x) = exp(-x^2 / 2s) / sqrt(2 pi s), vectorised."""
    s = np.asarray(s, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(s <= 0):
        raise DomainError("heat kernel needs s > 0")
    out = np.exp(-x * x / (2.0 * s)) / np.sqrt(2.0 * np.pi * s)
    return out[()] if out.ndim == 0 else out


def heat_kernel_chain(times, positions, endpoint=None, start=ORIGIN):
    """rho^k along (s_1, x_1), ..., (s_k, x_k) from ``start``.

    Leading axes broadcast: ``times`` and ``positions`` have shape (..., k).
    With an endpoint (T, X) the factor rho(T - s_k, X - x_k) is appended.
    """
    times = np.asarray(times, dtype=float)
    positions = np.asarray(positions, dtype=float)
    if times.shape != positions.shape:
        raise DomainError("times and positions must have the same shape")
    k = times.shape[-1] if times.ndim else 0
    s_prev = np.concatenate([np.full(times.shape[:-1] + (1,), start.s), times], axis=-1) if k else None
    if k:
        ds = np.diff(s_prev, axis=-1)
        if np.any(ds <= 0):
            raise DomainError("chain times must be strictly increasing and after the start")
        x_prev = np.concatenate([np.full(positions.shape[:-1] + (1,), start.x), positions], axis=-1)
        out = np.prod(heat_kernel(ds, np.diff(x_prev, axis=-1)), axis=-1)
    else:
        out = np.ones(times.shape[:-1]) if times.ndim > 1 else np.float64(1.0)
    if endpoint is not None:
        T, X = endpoint
        last_s = times[..., -1] if k else start.s
        last_x = positions[..., -1] if k else start.x
        if np.any(T - last_s <= 0):
            raise DomainError("endpoint time must exceed the last chain time")
        out = out * heat_kernel(T - last_s, X - last_x)
    return out


def _gaussian_increments(rng, times, start, n_paths, antithetic):
    dt = np.diff(np.concatenate([[start.s], times]))
    if n_paths is None:
        z = rng.standard_normal(times.size)
    elif antithetic:
        if n_paths % 2:
            raise DomainError("antithetic sampling needs an even number of paths")
        half = rng.standard_normal((n_paths // 2, times.size))
        z = np.concatenate([half, -half], axis=0)
    else:
        z = rng.standard_normal((n_paths, times.size))
    return z * np.sqrt(dt)


def sample_brownian_at(times, stream: RandomStream, n_paths=None, antithetic=False,
                       start: SpaceTimePoint = ORIGIN) -> PathSample:
    """Exact Brownian values at ``times`` (no time grid, no interpolation).

    With ``antithetic`` the second half of the batch uses negated increments
    of the first half; row i pairs with row i + n_paths/2.
    """
    times = _check_times(times, lower=start.s)
    rng = stream.generator()
    inc = _gaussian_increments(rng, times, start, n_paths, antithetic)
    values = start.x + np.cumsum(inc, axis=-1)
    return PathSample(times, values, start, None, antithetic and n_paths is not None)


def sample_bridge_at(times, endpoint, stream: RandomStream, n_paths=None, antithetic=False,
                     start: SpaceTimePoint = ORIGIN) -> PathSample:
    """Brownian bridge from ``start`` to ``endpoint`` = (t, x) at interior times.

    Uses B_s = W_s - (s - s0)/(t - s0) * (W_t - x) for a free motion W.
    """
    t, x_end = float(endpoint[0]), float(endpoint[1])
    times = _check_times(times)
    if times.size and (times[0] <= start.s or times[-1] >= t):
        raise DomainError("bridge times must lie strictly inside (start, t)")
    if t <= start.s:
        raise DomainError("bridge endpoint must come after the start")
    full = np.concatenate([times, [t]])
    rng = stream.generator()
    inc = _gaussian_increments(rng, full, start, n_paths, antithetic)
    w = start.x + np.cumsum(inc, axis=-1)
    frac = (times - start.s) / (t - start.s)
    w_t = w[..., -1:]
    values = w[..., :-1] - frac * (w_t - x_end)
    return PathSample(times, values, start, SpaceTimePoint(t, x_end), antithetic and n_paths is not None)


def sample_poisson_points(box: SpaceTimeBox, intensity: float, stream: RandomStream) -> np.ndarray:
    """Poisson points of intensity nu ds dx on ``box``, shape (n, 2), sorted by time."""
    if intensity < 0 or not math.isfinite(intensity):
        raise DomainError("intensity must be a finite non-negative number")
    rng = stream.generator()
    n = int(rng.poisson(intensity * box.area)) if intensity > 0 else 0
    s = rng.uniform(box.t_min, box.t_max, n)
    x = rng.uniform(box.x_min, box.x_max, n)
    order = np.argsort(s, kind="stable")
    return np.column_stack([s[order], x[order]])


def noise_shape(dt: float, dx: float, box: SpaceTimeBox) -> tuple[int, int]:
    n_t = int(math.floor(box.duration / dt + 1e-9))
    n_x = int(math.floor(box.width / dx + 1e-9))
    if n_t < 1 or n_x < 1:
        raise DomainError("box smaller than a single noise cell")
    return n_t, n_x


def noise_rows(gen: np.random.Generator, n_rows: int, n_x: int, dt: float, dx: float) -> np.ndarray:
    """Next ``n_rows`` rows of cell masses from ``gen``.

    Drawing rows in chunks yields the same cells as one large draw, which is
    what lets batched solvers stream noise without storing the whole grid.
    """
    return gen.standard_normal((n_rows, n_x)) * math.sqrt(dt * dx)


def sample_white_noise_grid(dt: float, dx: float, box: SpaceTimeBox, stream: RandomStream) -> WhiteNoiseGrid:
    """Independent N(0, dt*dx) masses on the cells tiling ``box``."""
    if not (dt > 0 and dx > 0):
        raise DomainError("noise steps must be positive")
    n_t, n_x = noise_shape(dt, dx, box)
    cells = noise_rows(stream.generator(), n_t, n_x, dt, dx)
    return WhiteNoiseGrid(dt, dx, box, cells)


def dirichlet_simplex_constant(k: int) -> float:
    """Integral over the unit simplex of prod (s_j - s_{j-1})^(-1/2)."""
    if int(k) != k or k < 1:
        raise DomainError("k must be a positive integer")
    return math.exp(0.5 * k * math.log(math.pi) - special.gammaln(0.5 * k + 1.0))


def quad_1d(f, a, b, atol=1e-9, limit=200, points=None):
    """Adaptive Gauss-Kronrod integral (QUADPACK) with at most ``limit`` subintervals.

    Raises ToleranceError when the reported error exceeds ``atol``.
    """
    kw = {"epsabs": atol, "epsrel": 0.0, "limit": limit}
    if points is not None and math.isfinite(a) and math.isfinite(b):
        kw["points"] = points
    val, err = integrate.quad(f, a, b, **kw)
    if err > atol:
        raise ToleranceError("quadrature did not reach its tolerance", err)
    return val
