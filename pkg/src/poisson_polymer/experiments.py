"""Named experiments behind the command-line runner.

An experiment is a *computation* (a fixed list of independent tasks plus a
worker function) and a *reduction* into long-format rows.  Verdicts are
computed by ``checks`` from rows alone, so they can be re-derived from
results.csv.  Experiments that name the same computation and agree on its
configuration share one pass over the tasks.

Task lists and chunk sizes never depend on the worker count, and every random
draw is keyed by (seed, computation id, cell, index), so the rows are
bit-identical for any number of workers.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .chaos import (BoxIndicatorKernel, MAX_CHAOS_ORDER, chaos_reconstruct_W, chaos_tail_bound,
                    fock_norm_rho, fock_term, inner_product, rho_k_kernel, simplex_l2_norm_sq,
                    wiener_ito_integral)
from .core import PathSample, RandomStream, SpaceTimeBox, heat_kernel
from .errors import ConfigError
from .polymer import (Environment, PolymerParams, ScalingSchedule, gaussian_bump, p2p_W, partition_Z,
                      polymer_window, renormalized_W, scaling_ratios, scaling_schedule_eval, tube_energy,
                      verify_poisson_she)
from .she import default_dt, heat_pairing, second_moment_closed_form, solve_she_fd_batch
from .stats import (chi_square_poisson, kendall_tau, ks_critical, ks_two_sample, mean_stderr,
                    moment_compare, trend_test)
from .transfer import BATCH, transfer_solve

CSV_COLUMNS = ("experiment", "t", "statistic", "value", "stderr", "n")
SCHEMA_VERSION = "1"


@dataclass(frozen=True)
class Row:
    experiment: str
    t: float | None
    statistic: str
    value: float
    stderr: float = 0.0
    n: int = 0


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class Param:
    kind: str  # "int", "float", "str", "floats", "ints"
    default: Any
    minimum: float | None = None
    choices: tuple | None = None

    def parse(self, key: str, text):
        try:
            if self.kind == "int":
                v = int(float(text)) if isinstance(text, str) else int(text)
                if isinstance(text, str) and float(text) != v:
                    raise ValueError
            elif self.kind == "float":
                v = float(text)
            elif self.kind == "str":
                v = str(text).strip()
            elif self.kind in ("floats", "ints"):
                items = [p for p in str(text).replace(";", ",").split(",") if p.strip()] \
                    if isinstance(text, str) else list(text)
                conv = float if self.kind == "floats" else int
                v = tuple(conv(float(p)) if conv is int else conv(p) for p in items)
                if not v:
                    raise ValueError
            else:
                raise ValueError
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: cannot parse {text!r} as {self.kind}") from None
        vals = v if isinstance(v, tuple) else (v,)
        if self.minimum is not None and any(not (x >= self.minimum) for x in vals):
            raise ConfigError(f"{key}: values must be >= {self.minimum}")
        if self.choices is not None and v not in self.choices:
            raise ConfigError(f"{key}: must be one of {', '.join(map(str, self.choices))}")
        return v


@dataclass(frozen=True)
class Computation:
    name: str
    tasks: Callable[[dict], list]
    work: Callable[[dict, int, tuple], Any]

    @property
    def stream_id(self) -> int:
        return zlib.crc32(self.name.encode())


@dataclass(frozen=True)
class Experiment:
    name: str
    computation: Computation
    params: dict
    reduce: Callable[[dict, list], list]
    checks: Callable[[dict, list], list]
    description: str = ""
    t_grid_key: str | None = None


def _tag(name: str, **kw) -> str:
    if not kw:
        return name
    return name + "[" + ",".join(f"{k}={_fmt(v)}" for k, v in kw.items()) + "]"


def _fmt(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def _chunks(n: int, size: int):
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def _z(value, target, stderr):
    if stderr == 0:
        return 0.0 if value == target else math.copysign(math.inf, value - target)
    return (value - target) / stderr


def _find(rows, stat, t=None, experiment=None):
    for r in rows:
        if r.statistic == stat and (t is None or r.t == t) and (experiment is None or r.experiment == experiment):
            return r
    raise KeyError(stat)


def _zcheck(name, row: Row, target: float, k: float = 3.0, slack: float = 0.0) -> Check:
    tol = k * row.stderr + slack
    ok = abs(row.value - target) <= tol
    return Check(name, ok, f"{row.value:.6g} vs {target:.6g} (tol {tol:.3g}, z={_z(row.value, target, row.stderr):+.2f})")


def _trend_check(name, values, want_decreasing=True) -> Check:
    res = trend_test(values)
    ok = res.decreasing if want_decreasing else not res.decreasing
    vals = ", ".join(f"{v:.4g}" for v in values)
    return Check(name, ok, f"tau={res.tau:+.3f} ({res.verdict}) over [{vals}]")


# --- env-check --------------------------------------------------------------------------


def _env_tasks(cfg):
    return _chunks(cfg["n_envs"], 1000)


def _env_work(cfg, comp_id, task):
    a, b = task
    nu, r, t = cfg["nu"], cfg["r"], cfg["t"]
    box = polymer_window(t, r)
    base = RandomStream(cfg["seed"], comp_id, (0,))
    out = np.empty(b - a, dtype=np.int64)
    for j, i in enumerate(range(a, b)):
        env = Environment.sample(box, nu, base.substream(i))
        s, _ = env.up_to(t)
        out[j] = tube_energy(PathSample(s, np.zeros(s.size)), env, r, t)
    return out


def _env_reduce(cfg, payloads):
    e = cfg["_name"]
    c = np.concatenate(payloads)
    n = c.size
    mu = cfg["nu"] * cfg["r"] * cfg["t"]
    m = mean_stderr(c.astype(float))
    dev = c - c.mean()
    var = float(np.var(c, ddof=1))
    m4 = float(np.mean(dev ** 4))
    var_se = math.sqrt(max(m4 - var * var, 0.0) / n)
    chi = chi_square_poisson(c, mu)
    return [
        Row(e, cfg["t"], "energy_mean", m.value, m.stderr, n),
        Row(e, cfg["t"], "energy_var", var, var_se, n),
        Row(e, cfg["t"], "poisson_mean", mu),
        Row(e, cfg["t"], "chi2_stat", chi.statistic, 0.0, n),
        Row(e, cfg["t"], "chi2_dof", float(chi.dof), 0.0, n),
        Row(e, cfg["t"], "chi2_pvalue", chi.p_value, 0.0, n),
    ]


def _env_checks(cfg, rows):
    mu = _find(rows, "poisson_mean").value
    p = _find(rows, "chi2_pvalue").value
    return [
        _zcheck("energy mean = nu r t", _find(rows, "energy_mean"), mu),
        _zcheck("energy variance = nu r t", _find(rows, "energy_var"), mu),
        Check("chi-square Poisson fit at level 0.01", p > cfg["alpha"], f"p={p:.4g}"),
    ]


# --- wt-mean / zt-mean --------------------------------------------------------------------


def _grid_cells(cfg):
    return [(b, nu, t) for t in cfg["t_grid"] for b in cfg["betas"] for nu in cfg["nus"]]


def _grid_tasks(cfg):
    return [(c,) + ch for c in range(len(_grid_cells(cfg))) for ch in _chunks(cfg["n_envs"], 500)]


def _grid_work(cfg, comp_id, task):
    c, a, b = task
    beta, nu, t = _grid_cells(cfg)[c]
    p = PolymerParams(beta, nu, cfg["r"], t)
    base = RandomStream(cfg["seed"], comp_id, (c,))
    W = np.empty(b - a)
    Z = np.empty(b - a)
    for j, i in enumerate(range(a, b)):
        sub = base.substream(i)
        env = Environment.for_params(p, sub.substream(0))
        W[j] = renormalized_W(env, p, cfg["n_paths"], sub.substream(1)).value
        Z[j] = partition_Z(env, p, cfg["n_paths"], sub.substream(1)).value
    return c, W, Z


def _grid_collect(cfg, payloads, which):
    cells = _grid_cells(cfg)
    vals = [[] for _ in cells]
    for c, W, Z in payloads:
        vals[c].append(W if which == "W" else Z)
    return cells, [np.concatenate(v) for v in vals]


def _wt_reduce(cfg, payloads):
    e = cfg["_name"]
    cells, vals = _grid_collect(cfg, payloads, "W")
    rows = []
    for (beta, nu, t), v in zip(cells, vals):
        m = mean_stderr(v)
        rows.append(Row(e, t, _tag("W_mean", beta=beta, nu=nu), m.value, m.stderr, m.n))
        rows.append(Row(e, t, _tag("W_min", beta=beta, nu=nu), float(v.min()), 0.0, m.n))
    return rows


def _wt_checks(cfg, rows):
    out = []
    for beta, nu, t in _grid_cells(cfg):
        out.append(_zcheck(f"mean W = 1 at beta={beta:g}, nu={nu:g}, t={t:g}",
                           _find(rows, _tag("W_mean", beta=beta, nu=nu), t), 1.0))
    mins = [_find(rows, _tag("W_min", beta=b, nu=nu), t).value for b, nu, t in _grid_cells(cfg)]
    out.append(Check("W > 0 on every environment", min(mins) > 0, f"min W = {min(mins):.4g}"))
    return out


def _zt_reduce(cfg, payloads):
    e = cfg["_name"]
    cells, vals = _grid_collect(cfg, payloads, "Z")
    rows = []
    for (beta, nu, t), v in zip(cells, vals):
        m = mean_stderr(v)
        target = math.exp(math.expm1(beta) * nu * cfg["r"] * t)
        rows.append(Row(e, t, _tag("Z_mean", beta=beta, nu=nu), m.value, m.stderr, m.n))
        rows.append(Row(e, t, _tag("Z_target", beta=beta, nu=nu), target))
    return rows


def _zt_checks(cfg, rows):
    return [_zcheck(f"mean Z = exp(lambda nu r t) at beta={beta:g}, nu={nu:g}, t={t:g}",
                    _find(rows, _tag("Z_mean", beta=beta, nu=nu), t),
                    _find(rows, _tag("Z_target", beta=beta, nu=nu), t).value)
            for beta, nu, t in _grid_cells(cfg)]


# --- p2p-mean -------------------------------------------------------------------------------


def _p2p_mean_cells(cfg):
    return [(b, x) for b in cfg["betas"] for x in cfg["xs"]]


def _p2p_mean_tasks(cfg):
    return [(c,) + ch for c in range(len(_p2p_mean_cells(cfg))) for ch in _chunks(cfg["n_envs"], 500)]


def _p2p_mean_work(cfg, comp_id, task):
    c, a, b = task
    beta, x = _p2p_mean_cells(cfg)[c]
    p = PolymerParams(beta, cfg["nu"], cfg["r"], cfg["t"])
    base = RandomStream(cfg["seed"], comp_id, (c,))
    out = np.empty(b - a)
    for j, i in enumerate(range(a, b)):
        sub = base.substream(i)
        env = Environment.for_params(p, sub.substream(0), x_end=x)
        out[j] = p2p_W(env, p, (p.t, x), cfg["n_paths"], sub.substream(1)).value
    return c, out


def _p2p_mean_reduce(cfg, payloads):
    e = cfg["_name"]
    cells = _p2p_mean_cells(cfg)
    vals = [[] for _ in cells]
    for c, v in payloads:
        vals[c].append(v)
    rows = []
    for (beta, x), v in zip(cells, vals):
        m = mean_stderr(np.concatenate(v))
        rows.append(Row(e, cfg["t"], _tag("P2P_mean", beta=beta, x=x), m.value, m.stderr, m.n))
        rows.append(Row(e, cfg["t"], _tag("rho", x=x), float(heat_kernel(cfg["t"], x))))
    return rows


def _p2p_mean_checks(cfg, rows):
    return [_zcheck(f"mean P2P = rho(t, x) at beta={beta:g}, x={x:g}",
                    _find(rows, _tag("P2P_mean", beta=beta, x=x)), _find(rows, _tag("rho", x=x)).value)
            for beta, x in _p2p_mean_cells(cfg)]


# --- chaos-vs-direct ----------------------------------------------------------------------


def _chaos_params(cfg):
    return PolymerParams(cfg["beta"], cfg["nu"], cfg["r"], cfg["t"])


def _chaos_tasks(cfg):
    return [(j,) for j in range(cfg["n_seeds"])]


def _chaos_work(cfg, comp_id, task):
    (j,) = task
    p = _chaos_params(cfg)
    env = Environment.for_params(p, RandomStream(cfg["seed"], comp_id, (j, 0)))
    direct = renormalized_W(env, p, cfg["direct_paths"], RandomStream(cfg["seed"], comp_id, (j, 1)))
    rec = chaos_reconstruct_W(env, p, cfg["K"])
    return j, len(env.up_to(p.t)[0]), direct, rec


def _chaos_reduce(cfg, payloads):
    e = cfg["_name"]
    p = _chaos_params(cfg)
    rows = [Row(e, p.t, _tag("tail_bound", K=K), chaos_tail_bound(p, K)) for K in range(1, cfg["K"] + 1)]
    for j, n_pts, direct, rec in payloads:
        rows.append(Row(e, p.t, _tag("direct_W", env=j), direct.value, direct.stderr, direct.n))
        rows.append(Row(e, p.t, _tag("n_points", env=j), float(n_pts)))
        rows.append(Row(e, p.t, _tag("quadrature_error", env=j), rec.quadrature_error))
        for K in range(1, len(rec.terms)):
            partial = math.fsum(rec.terms[:K + 1])
            rows.append(Row(e, p.t, _tag("chaos_W", env=j, K=K), partial))
            rows.append(Row(e, p.t, _tag("gap", env=j, K=K), abs(partial - direct.value), direct.stderr))
    return rows


def _chaos_checks(cfg, rows):
    out = []
    K = cfg["K"]
    for j in range(cfg["n_seeds"]):
        gaps = [_find(rows, _tag("gap", env=j, K=k)) for k in range(1, K + 1)]
        tail = _find(rows, _tag("tail_bound", K=K)).value
        budget = tail + cfg["quadrature_budget"] + gaps[-1].stderr
        qerr = _find(rows, _tag("quadrature_error", env=j)).value
        out.append(Check(f"env {j}: |chaos(K={K}) - direct| < budget", gaps[-1].value < budget,
                         f"gap {gaps[-1].value:.3g} vs budget {budget:.3g}"))
        out.append(Check(f"env {j}: quadrature error within its budget", qerr <= cfg["quadrature_budget"],
                         f"{qerr:.3g}"))
        g = [r.value for r in gaps]
        out.append(Check(f"env {j}: gap shrinks with K", all(a > b for a, b in zip(g, g[1:])),
                         " > ".join(f"{v:.3g}" for v in g)))
    return out


# --- covariance ---------------------------------------------------------------------------

# hand-chosen indicator kernels on the box [0, 1] x [-1, 1]
COV_BOX = SpaceTimeBox(0.0, 1.0, -1.0, 1.0)
COV_KERNELS = {
    1: (BoxIndicatorKernel([SpaceTimeBox(0.0, 0.6, -0.5, 0.5)]),
        BoxIndicatorKernel([SpaceTimeBox(0.3, 1.0, -1.0, 0.2)])),
    2: (BoxIndicatorKernel([SpaceTimeBox(0.0, 0.5, -1.0, 0.0), SpaceTimeBox(0.4, 1.0, -0.5, 1.0)]),
        BoxIndicatorKernel([SpaceTimeBox(0.2, 0.9, -0.8, 0.3), SpaceTimeBox(0.0, 0.7, 0.0, 1.0)])),
}


def _cov_tasks(cfg):
    return _chunks(cfg["n_envs"], 1000)


def _cov_work(cfg, comp_id, task):
    a, b = task
    base = RandomStream(cfg["seed"], comp_id, (0,))
    out = np.empty((b - a, 4))
    for j, i in enumerate(range(a, b)):
        env = Environment.sample(COV_BOX, cfg["nu"], base.substream(i))
        out[j] = [wiener_ito_integral(env, cfg["nu"], k, g) for k in (1, 2) for g in COV_KERNELS[k]]
    return out


def _cov_reduce(cfg, payloads):
    e = cfg["_name"]
    v = np.concatenate(payloads)
    nu = cfg["nu"]
    col = {(1, "g"): 0, (1, "h"): 1, (2, "g"): 2, (2, "h"): 3}
    rows = []
    for k in (1, 2):
        for l in (1, 2):
            prod = v[:, col[(k, "g")]] * v[:, col[(l, "h")]]
            m = mean_stderr(prod)
            g, h = COV_KERNELS[k][0], COV_KERNELS[l][1]
            theo = math.factorial(k) * nu ** k * inner_product(g, h, COV_BOX) if k == l else 0.0
            rows.append(Row(e, None, _tag("cov", k=k, l=l), m.value, m.stderr, m.n))
            rows.append(Row(e, None, _tag("cov_target", k=k, l=l), theo))
    return rows


def _cov_checks(cfg, rows):
    return [_zcheck(f"E[I_{k}(g) I_{l}(h)] = delta k! nu^k <Sym g, Sym h>", _find(rows, _tag("cov", k=k, l=l)),
                    _find(rows, _tag("cov_target", k=k, l=l)).value)
            for k in (1, 2) for l in (1, 2)]


# --- fock-norms ---------------------------------------------------------------------------


def _fock_tasks(cfg):
    return [(k,) for k in range(1, cfg["k_max"] + 1)]


def _fock_work(cfg, comp_id, task):
    (k,) = task
    g = rho_k_kernel(k, 1.0)
    return k, simplex_l2_norm_sq(g.func, k, 1.0, cfg["n_qmc"], cfg["n_rep"], cfg["seed"])


def _fock_reduce(cfg, payloads):
    e = cfg["_name"]
    rows = []
    for k, est in payloads:
        rows.append(Row(e, None, _tag("rho_norm_sq_qmc", k=k), est.value, est.stderr, est.n))
        rows.append(Row(e, None, _tag("rho_norm_sq_exact", k=k), fock_term(k)))
    partial, tail = fock_norm_rho(cfg["beta"], cfg["K"])
    rows.append(Row(e, None, _tag("R_norm_sq_partial", beta=cfg["beta"], K=cfg["K"]), partial))
    rows.append(Row(e, None, _tag("R_norm_sq_tail", beta=cfg["beta"], K=cfg["K"]), tail))
    return rows


def _fock_checks(cfg, rows):
    out = [_zcheck(f"QMC ||rho^{k}||^2 = 2^-k / Gamma(k/2 + 1)", _find(rows, _tag("rho_norm_sq_qmc", k=k)),
                   _find(rows, _tag("rho_norm_sq_exact", k=k)).value)
           for k in range(1, cfg["k_max"] + 1)]
    tail = _find(rows, _tag("R_norm_sq_tail", beta=cfg["beta"], K=cfg["K"])).value
    out.append(Check(f"certified tail at K={cfg['K']} below {cfg['tail_tol']:g}", tail < cfg["tail_tol"],
                     f"tail {tail:.3g}"))
    return out


# --- she-moments --------------------------------------------------------------------------


def _she_dt(cfg):
    return default_dt(cfg["dx"])


def _she_tasks(cfg):
    return _chunks(cfg["n_draws"], cfg["she_chunk"])


def _she_work(cfg, comp_id, task):
    a, b = task
    base = RandomStream(cfg["seed"], comp_id, (0,))
    betas = list(cfg["betas"])
    dx = cfg["dx"]
    rec, _ = solve_she_fd_batch(betas, [base.substream(i) for i in range(a, b)], _she_dt(cfg), dx,
                                1.0, cfg["X_max"], record_times=[1.0])
    J = rec.shape[-1] // 2
    fields = rec[:, :, 0, :]
    return fields[:, :, J].copy(), fields.sum(axis=-1) * dx


def _she_reduce(cfg, payloads):
    e = cfg["_name"]
    z0 = np.concatenate([p[0] for p in payloads])
    p2l = np.concatenate([p[1] for p in payloads])
    rows = [Row(e, None, "rho_1_0", float(heat_kernel(1.0, 0.0)))]
    for j, beta in enumerate(cfg["betas"]):
        m = mean_stderr(z0[:, j])
        rows.append(Row(e, None, _tag("Z_1_0_mean", beta=beta), m.value, m.stderr, m.n))
        mp = mean_stderr(p2l[:, j])
        rows.append(Row(e, None, _tag("P2L_mean", beta=beta), mp.value, mp.stderr, mp.n))
        mc = moment_compare(p2l[:, j], second_moment_closed_form(beta), 2,
                            stream=RandomStream(cfg["seed"], 7, (j,)))
        rows.append(Row(e, None, _tag("P2L_m2", beta=beta), mc.moment, mc.stderr, p2l.shape[0]))
        rows.append(Row(e, None, _tag("P2L_m2_closed_form", beta=beta), second_moment_closed_form(beta)))
    return rows


def _she_checks(cfg, rows):
    rho = _find(rows, "rho_1_0").value
    out = []
    for beta in cfg["betas"]:
        out.append(_zcheck(f"E[Z(1,0)] = rho(1,0) at beta={beta:g}", _find(rows, _tag("Z_1_0_mean", beta=beta)),
                           rho, slack=cfg["mean_rel_tol"] * rho))
        target = _find(rows, _tag("P2L_m2_closed_form", beta=beta)).value
        out.append(_zcheck(f"E[Z_beta^2] = closed-form series at beta={beta:g}",
                           _find(rows, _tag("P2L_m2", beta=beta)), target, slack=cfg["m2_rel_tol"] * target))
    return out


# --- intermediate disorder: convergence, p2p-convergence, field-marginal --------------------


def schedule_from(cfg) -> ScalingSchedule:
    return ScalingSchedule(cfg["beta_star"], cfg["family"], cfg["nu0"], cfg["r0"], cfg["beta0"],
                           cfg["nu_exp"], cfg["r_exp"])


def _field_phi(cfg):
    return gaussian_bump(cfg["phi_center"], cfg["phi_sigma"])


def _disorder_tasks(cfg):
    tasks = [("polymer", j) + ch for j in range(len(cfg["t_grid"])) for ch in _chunks(cfg["n_envs"], BATCH)]
    return tasks + [("she",) + ch for ch in _chunks(cfg["n_draws"], cfg["she_chunk"])]


def _disorder_work(cfg, comp_id, task):
    phi = _field_phi(cfg)
    X = cfg["X"]
    field_T = list(cfg["field_times"])
    if task[0] == "she":
        _, a, b = task
        base = RandomStream(cfg["seed"], comp_id, (2,))
        rts = sorted(set(field_T) | {1.0})
        dx = cfg["dx"]
        rec, _ = solve_she_fd_batch(cfg["beta_star"], [base.substream(i) for i in range(a, b)], _she_dt(cfg),
                                    dx, 1.0, cfg["X_max"], record_times=rts)
        J = rec.shape[-1] // 2
        xs = (np.arange(rec.shape[-1]) - J) * dx
        last = rec[:, rts.index(1.0)]
        p2l = last.sum(axis=-1) * dx
        p2p = np.array([np.interp(X, xs, row) for row in last])
        w = phi(xs)
        pair = np.stack([rec[:, rts.index(T)] @ w * dx for T in field_T], axis=1)
        return ("she", a, p2l, p2p, pair)
    _, j, a, b = task
    t = cfg["t_grid"][j]
    params = scaling_schedule_eval(schedule_from(cfg), t)
    base = RandomStream(cfg["seed"], comp_id, (1, j))
    envs = [Environment.for_params(params, base.substream(i)) for i in range(a, b)]
    rts = sorted(set(T * t for T in field_T) | {t})
    probes = [np.array([math.sqrt(t) * X]) if rt == t else np.empty(0) for rt in rts]
    sq = math.sqrt(t)
    field_rts = {T * t for T in field_T}
    tests = [[lambda x: phi(x / sq)] if rt in field_rts else [] for rt in rts]
    res = transfer_solve(envs, params, record_times=rts, probes=probes, test_functions=tests,
                         cells_per_tube=cfg["cells_per_tube"], batch=BATCH)
    k = rts.index(t)
    W = res.mass[:, k].copy()
    Y = sq * res.probes[k][:, 0]
    pair = np.stack([res.pairings[rts.index(T * t)][:, 0] for T in field_T], axis=1)
    return ("polymer", j, a, W, Y, pair)


def _disorder_collect(cfg, payloads):
    n_t = len(cfg["t_grid"])
    pol = [[] for _ in range(n_t)]
    she = []
    for p in payloads:
        if p[0] == "she":
            she.append(p)
        else:
            pol[p[1]].append(p)
    she.sort(key=lambda p: p[1])
    S = {"P2L": np.concatenate([p[2] for p in she]), "P2P": np.concatenate([p[3] for p in she]),
         "pair": np.concatenate([p[4] for p in she])}
    P = []
    for lst in pol:
        lst.sort(key=lambda p: p[2])
        P.append({"W": np.concatenate([p[3] for p in lst]), "Y": np.concatenate([p[4] for p in lst]),
                  "pair": np.concatenate([p[5] for p in lst])})
    return S, P


def _convergence_reduce(cfg, payloads):
    e = cfg["_name"]
    S, P = _disorder_collect(cfg, payloads)
    target = second_moment_closed_form(cfg["beta_star"])
    n_s = S["P2L"].size
    ms = mean_stderr(S["P2L"])
    rows = [Row(e, None, "R_norm_sq", target),
            Row(e, None, "she_P2L_mean", ms.value, ms.stderr, n_s)]
    mc = moment_compare(S["P2L"], target, 2, stream=RandomStream(cfg["seed"], 7, (0,)))
    rows.append(Row(e, None, "she_P2L_m2", mc.moment, mc.stderr, n_s))
    for j, t in enumerate(cfg["t_grid"]):
        W = P[j]["W"]
        m = mean_stderr(W)
        mc = moment_compare(W, target, 2, stream=RandomStream(cfg["seed"], 7, (1, j)))
        rows += [
            Row(e, t, "W_mean", m.value, m.stderr, m.n),
            Row(e, t, "W_m2", mc.moment, mc.stderr, m.n),
            Row(e, t, "KS_W_vs_P2L", ks_two_sample(W, S["P2L"]), 0.0, m.n),
            Row(e, t, "KS_critical_1pct", ks_critical(m.n, n_s, 0.01), 0.0, m.n),
        ]
    return rows


def _convergence_checks(cfg, rows):
    ts = cfg["t_grid"]
    ks = [_find(rows, "KS_W_vs_P2L", t).value for t in ts]
    target = _find(rows, "R_norm_sq").value
    out = [_trend_check("KS(W_t, Z_beta* P2L) decreases in t", ks)]
    out.append(_zcheck(f"mean W = 1 at t={ts[-1]:g}", _find(rows, "W_mean", ts[-1]), 1.0))
    out.append(_zcheck(f"E[W^2] = ||R||^2 at t={ts[-1]:g}", _find(rows, "W_m2", ts[-1]), target))
    return out


def _p2p_reduce(cfg, payloads):
    e = cfg["_name"]
    S, P = _disorder_collect(cfg, payloads)
    X = cfg["X"]
    rho = float(heat_kernel(1.0, X))
    ms = mean_stderr(S["P2P"])
    rows = [Row(e, None, _tag("rho", T=1.0, X=X), rho),
            Row(e, None, _tag("she_P2P_mean", X=X), ms.value, ms.stderr, ms.n)]
    for j, t in enumerate(cfg["t_grid"]):
        Y = P[j]["Y"]
        m = mean_stderr(Y)
        rows += [Row(e, t, _tag("Y_mean", T=1.0, X=X), m.value, m.stderr, m.n),
                 Row(e, t, _tag("KS_Y_vs_P2P", X=X), ks_two_sample(Y, S["P2P"]), 0.0, m.n)]
    return rows


def _p2p_checks(cfg, rows):
    X = cfg["X"]
    rho = _find(rows, _tag("rho", T=1.0, X=X)).value
    out = [_zcheck(f"mean sqrt(t) W(t, sqrt(t) X) = rho(1, X) at t={t:g}",
                   _find(rows, _tag("Y_mean", T=1.0, X=X), t), rho) for t in cfg["t_grid"]]
    ks = [_find(rows, _tag("KS_Y_vs_P2P", X=X), t).value for t in cfg["t_grid"]]
    out.append(_trend_check("KS(rescaled P2P, SHE P2P) decreases in t", ks))
    return out


def _field_reduce(cfg, payloads):
    e = cfg["_name"]
    S, P = _disorder_collect(cfg, payloads)
    phi = _field_phi(cfg)
    rows = []
    for i, T in enumerate(cfg["field_times"]):
        rows.append(Row(e, None, _tag("heat_pairing", T=T), heat_pairing(phi, T)))
        m = mean_stderr(S["pair"][:, i])
        rows.append(Row(e, None, _tag("she_pairing_mean", T=T), m.value, m.stderr, m.n))
        for j, t in enumerate(cfg["t_grid"]):
            v = P[j]["pair"][:, i]
            m = mean_stderr(v)
            rows.append(Row(e, t, _tag("pairing_mean", T=T), m.value, m.stderr, m.n))
            rows.append(Row(e, t, _tag("KS_pairing", T=T), ks_two_sample(v, S["pair"][:, i]), 0.0, m.n))
    return rows


def _field_checks(cfg, rows):
    out = []
    for T in cfg["field_times"]:
        target = _find(rows, _tag("heat_pairing", T=T)).value
        for t in cfg["t_grid"]:
            out.append(_zcheck(f"mean <Y_t(T), phi> = <rho(T), phi> at T={T:g}, t={t:g}",
                               _find(rows, _tag("pairing_mean", T=T), t), target))
        ks = [_find(rows, _tag("KS_pairing", T=T), t).value for t in cfg["t_grid"]]
        out.append(_trend_check(f"KS of the T={T:g} marginal decreases in t", ks))
    return out


# --- poisson-she-residual ------------------------------------------------------------------


def _resid_tasks(cfg):
    return [(j,) for j in range(cfg["n_seeds"])]


def _resid_work(cfg, comp_id, task):
    (j,) = task
    p = PolymerParams(cfg["beta"], cfg["nu"], cfg["r"], cfg["t"])
    env = Environment.for_params(p, RandomStream(cfg["seed"], comp_id, (j, 0)))
    phi = gaussian_bump(cfg["phi_center"], cfg["phi_sigma"])
    return j, verify_poisson_she(env, p, phi, cfg["n_paths"], RandomStream(cfg["seed"], comp_id, (j, 1)),
                                 cfg["dt_grid"])


def _resid_reduce(cfg, payloads):
    e = cfg["_name"]
    rows = []
    for j, res in payloads:
        rows.append(Row(e, cfg["t"], _tag("residual", env=j), res.residual, res.error, res.n_paths))
        rows.append(Row(e, cfg["t"], _tag("quadrature_error", env=j), res.quadrature_error))
    return rows


def _resid_checks(cfg, rows):
    out = []
    for j in range(cfg["n_seeds"]):
        r = _find(rows, _tag("residual", env=j))
        out.append(Check(f"env {j}: |residual| within 3x propagated error", abs(r.value) <= 3 * r.stderr,
                         f"{r.value:+.3g} vs {3 * r.stderr:.3g}"))
    return out


# --- scaling-audit --------------------------------------------------------------------------


def _audit_schedules(cfg):
    bs = cfg["beta_star"]
    return {
        "fixed-nu-r": ScalingSchedule(bs, "fixed-nu-r", cfg["nu0"], cfg["r0"]),
        "fixed-beta": ScalingSchedule(bs, "fixed-beta", r0=cfg["r0"], beta0=cfg["beta0"]),
        "custom": ScalingSchedule(bs, "custom", cfg["nu0"], cfg["r0"], nu_exp=cfg["nu_exp"], r_exp=cfg["r_exp"]),
    }


def _audit_tasks(cfg):
    return [("all",)]


def _audit_work(cfg, comp_id, task):
    return {fam: [scaling_ratios(s(t), cfg["beta_star"]) for t in cfg["t_grid"]]
            for fam, s in _audit_schedules(cfg).items()}


def _audit_reduce(cfg, payloads):
    e = cfg["_name"]
    rows = []
    for fam, per_t in payloads[0].items():
        for t, q in zip(cfg["t_grid"], per_t):
            for key in ("a_ratio", "b", "c", "gamma", "nu_t32_gamma2"):
                rows.append(Row(e, t, _tag(key, family=fam), q[key]))
    return rows


def _audit_checks(cfg, rows):
    out = []
    ts = cfg["t_grid"]
    for fam in _audit_schedules(cfg):
        a = [_find(rows, _tag("a_ratio", family=fam), t).value for t in ts]
        out.append(Check(f"{fam}: relation (a) ratio equals 1", max(abs(v - 1) for v in a) < 1e-12,
                         f"max |ratio - 1| = {max(abs(v - 1) for v in a):.2g}"))
        for key in ("b", "c", "gamma"):
            v = [_find(rows, _tag(key, family=fam), t).value for t in ts]
            out.append(Check(f"{fam}: {key} decays monotonically", all(x > y > 0 for x, y in zip(v, v[1:])),
                             " > ".join(f"{x:.3g}" for x in v)))
        g = [_find(rows, _tag("nu_t32_gamma2", family=fam), t).value for t in ts]
        out.append(Check(f"{fam}: nu_t t^(3/2) gamma_t^2 = 1", abs(g[-1] - 1) < 1e-12,
                         f"{g[-1]!r} at t={ts[-1]:g}"))
    return out


# --- moment-bound ---------------------------------------------------------------------------


def _mb_points(cfg):
    return [(T, X) for T in cfg["T_grid"] for X in cfg["X_grid"]]


def _mb_tasks(cfg):
    return [(j,) + ch for j in range(len(cfg["t_grid"])) for ch in _chunks(cfg["n_envs"], BATCH)]


def _mb_work(cfg, comp_id, task):
    j, a, b = task
    t = cfg["t_grid"][j]
    params = scaling_schedule_eval(schedule_from(cfg), t)
    base = RandomStream(cfg["seed"], comp_id, (j,))
    envs = [Environment.for_params(params, base.substream(i)) for i in range(a, b)]
    Ts = sorted(cfg["T_grid"])
    sq = math.sqrt(t)
    probes = [sq * np.asarray(cfg["X_grid"], dtype=float) for _ in Ts]
    res = transfer_solve(envs, params, record_times=[T * t for T in Ts], probes=probes,
                         cells_per_tube=cfg["cells_per_tube"], batch=BATCH)
    Y = np.concatenate([sq * res.probes[Ts.index(T)] for T in cfg["T_grid"]], axis=1)
    return j, a, Y


def _mb_reduce(cfg, payloads):
    e = cfg["_name"]
    pts = _mb_points(cfg)
    rows = []
    for j, t in enumerate(cfg["t_grid"]):
        Y = np.concatenate([p[2] for p in sorted((p for p in payloads if p[0] == j), key=lambda p: p[1])])
        best = None
        for i, (T, X) in enumerate(pts):
            rho = float(heat_kernel(T, X))
            m1 = mean_stderr(Y[:, i] / rho)
            m2 = mean_stderr((Y[:, i] / rho) ** 2)
            rows.append(Row(e, t, _tag("Y_over_rho_mean", T=T, X=X), m1.value, m1.stderr, m1.n))
            rows.append(Row(e, t, _tag("Y2_over_rho2", T=T, X=X), m2.value, m2.stderr, m2.n))
            if best is None or m2.value > best.value:
                best = m2
        rows.append(Row(e, t, "sup_Y2_over_rho2", best.value, best.stderr, best.n))
    return rows


def _mb_checks(cfg, rows):
    sups = [_find(rows, "sup_Y2_over_rho2", t).value for t in cfg["t_grid"]]
    tau = kendall_tau(sups)
    vals = ", ".join(f"{v:.4g}" for v in sups)
    return [Check("sup E[Y^2]/rho^2 shows no trend in t (-0.5 < tau < 0.5)", -0.5 < tau < 0.5,
                  f"tau={tau:+.3f} over [{vals}]")]


# --- registry -------------------------------------------------------------------------------

COMPUTATIONS = {c.name: c for c in [
    Computation("env-check", _env_tasks, _env_work),
    Computation("partition-grid", _grid_tasks, _grid_work),
    Computation("p2p-mean", _p2p_mean_tasks, _p2p_mean_work),
    Computation("chaos-vs-direct", _chaos_tasks, _chaos_work),
    Computation("covariance", _cov_tasks, _cov_work),
    Computation("fock-norms", _fock_tasks, _fock_work),
    Computation("she-moments", _she_tasks, _she_work),
    Computation("intermediate-disorder", _disorder_tasks, _disorder_work),
    Computation("poisson-she-residual", _resid_tasks, _resid_work),
    Computation("scaling-audit", _audit_tasks, _audit_work),
    Computation("moment-bound", _mb_tasks, _mb_work),
]}

_GRID = {
    "betas": Param("floats", (-0.5, 0.5, 1.0)),
    "nus": Param("floats", (0.5, 1.0, 2.0), 0.0),
    "r": Param("float", 0.5, 1e-12),
    "t_grid": Param("floats", (1.0,), 1e-12),
    "n_envs": Param("int", 10_000, 100),
    "n_paths": Param("int", 64, 2),
}

_SCHEDULE = {
    "beta_star": Param("float", 1.0),
    "family": Param("str", "fixed-nu-r", choices=("fixed-nu-r", "fixed-beta", "custom")),
    "nu0": Param("float", 0.01, 1e-300),
    "r0": Param("float", 1.0, 1e-300),
    "beta0": Param("float", 1.0),
    "nu_exp": Param("float", 0.0),
    "r_exp": Param("float", 0.0),
}

_DISORDER = dict(_SCHEDULE, **{
    "t_grid": Param("floats", (10.0, 100.0, 1000.0), 1e-12),
    "n_envs": Param("int", 2000, 100),
    "n_draws": Param("int", 2000, 100),
    "cells_per_tube": Param("int", 4, 1),
    "dx": Param("float", 0.02, 1e-6),
    "X_max": Param("float", 6.0, 0.0),
    "she_chunk": Param("int", 25, 1),
    "X": Param("float", 0.5),
    "field_times": Param("floats", (0.5, 1.0), 1e-12),
    "phi_center": Param("float", 0.0),
    "phi_sigma": Param("float", 0.5, 1e-6),
})

EXPERIMENTS = {e.name: e for e in [
    Experiment("env-check", COMPUTATIONS["env-check"], {
        "nu": Param("float", 2.0, 0.0), "r": Param("float", 1.0, 1e-12), "t": Param("float", 3.0, 1e-12),
        "n_envs": Param("int", 10_000, 100), "alpha": Param("float", 0.01, 0.0)},
        _env_reduce, _env_checks, "tube energy of a frozen path is Poisson(nu r t)"),
    Experiment("wt-mean", COMPUTATIONS["partition-grid"], _GRID, _wt_reduce, _wt_checks,
               "E[W_t] = 1 on a (beta, nu) grid", "t_grid"),
    Experiment("zt-mean", COMPUTATIONS["partition-grid"], _GRID, _zt_reduce, _zt_checks,
               "E[Z_t] = exp(lambda nu r t) on a (beta, nu) grid", "t_grid"),
    Experiment("p2p-mean", COMPUTATIONS["p2p-mean"], {
        "betas": Param("floats", (0.5, 1.0)), "xs": Param("floats", (0.0, 0.5, 1.0)),
        "nu": Param("float", 1.0, 0.0), "r": Param("float", 0.5, 1e-12), "t": Param("float", 1.0, 1e-12),
        "n_envs": Param("int", 4000, 100), "n_paths": Param("int", 64, 2)},
        _p2p_mean_reduce, _p2p_mean_checks, "E[P2P W_t(x)] = rho(t, x)"),
    Experiment("chaos-vs-direct", COMPUTATIONS["chaos-vs-direct"], {
        "beta": Param("float", 0.3), "nu": Param("float", 0.5, 0.0), "r": Param("float", 0.5, 1e-12),
        "t": Param("float", 1.0, 1e-12), "n_seeds": Param("int", 5, 1),
        "direct_paths": Param("int", 1 << 24, 2), "K": Param("int", 3, 2),
        "quadrature_budget": Param("float", 1e-4, 0.0)},
        _chaos_reduce, _chaos_checks, "chaos truncation vs direct Monte Carlo"),
    Experiment("covariance", COMPUTATIONS["covariance"], {
        "nu": Param("float", 2.0, 1e-12), "n_envs": Param("int", 10_000, 100)},
        _cov_reduce, _cov_checks, "Wiener-Ito covariance structure"),
    Experiment("fock-norms", COMPUTATIONS["fock-norms"], {
        "k_max": Param("int", 3, 1), "n_qmc": Param("int", 1 << 14, 16), "n_rep": Param("int", 8, 2),
        "beta": Param("float", 1.0), "K": Param("int", 30, 0), "tail_tol": Param("float", 1e-12, 0.0)},
        _fock_reduce, _fock_checks, "Fock norms of rho^k"),
    Experiment("she-moments", COMPUTATIONS["she-moments"], {
        "betas": Param("floats", (0.5, 1.0)), "n_draws": Param("int", 200, 100),
        "dx": Param("float", 0.02, 1e-6), "X_max": Param("float", 6.0, 0.0), "she_chunk": Param("int", 25, 1),
        "mean_rel_tol": Param("float", 0.02, 0.0), "m2_rel_tol": Param("float", 0.05, 0.0)},
        _she_reduce, _she_checks, "SHE first and second moments"),
    Experiment("convergence", COMPUTATIONS["intermediate-disorder"], _DISORDER, _convergence_reduce,
               _convergence_checks, "W_t vs SHE point-to-line law along the schedule", "t_grid"),
    Experiment("p2p-convergence", COMPUTATIONS["intermediate-disorder"], _DISORDER, _p2p_reduce,
               _p2p_checks, "rescaled point-to-point W vs SHE", "t_grid"),
    Experiment("field-marginal", COMPUTATIONS["intermediate-disorder"], _DISORDER, _field_reduce,
               _field_checks, "fixed-(T, phi) marginals of the rescaled field", "t_grid"),
    Experiment("poisson-she-residual", COMPUTATIONS["poisson-she-residual"], {
        "beta": Param("float", 0.5), "nu": Param("float", 1.0, 0.0), "r": Param("float", 0.5, 1e-12),
        "t": Param("float", 1.0, 1e-12), "n_seeds": Param("int", 3, 1), "n_paths": Param("int", 1 << 16, 2),
        "phi_center": Param("float", 0.0), "phi_sigma": Param("float", 0.5, 1e-6),
        "dt_grid": Param("float", 1e-3, 1e-9)},
        _resid_reduce, _resid_checks, "weak Poisson-SHE identity on fixed environments"),
    Experiment("scaling-audit", COMPUTATIONS["scaling-audit"], {
        "beta_star": Param("float", 1.0), "nu0": Param("float", 1.0, 1e-300), "r0": Param("float", 1.0, 1e-300),
        "beta0": Param("float", 1.0), "nu_exp": Param("float", -1.0), "r_exp": Param("float", 0.25),
        "t_grid": Param("floats", (1e2, 1e3, 1e4, 1e5, 1e6), 1e-12)},
        _audit_reduce, _audit_checks, "scaling relations along the three families", "t_grid"),
    Experiment("moment-bound", COMPUTATIONS["moment-bound"], dict(_SCHEDULE, **{
        "family": Param("str", "custom", choices=("fixed-nu-r", "fixed-beta", "custom")),
        "nu0": Param("float", 1.0, 1e-300), "nu_exp": Param("float", -1.0), "r_exp": Param("float", 0.25),
        "t_grid": Param("floats", (1e2, 1e3, 1e4), 1e-12), "n_envs": Param("int", 2000, 100),
        "cells_per_tube": Param("int", 4, 1),
        "T_grid": Param("floats", (0.25, 0.5, 0.75, 1.0), 1e-12),
        "X_grid": Param("floats", (-1.0, 0.0, 0.5, 1.5))}),
        _mb_reduce, _mb_checks, "uniform bound on E[Y_t^2]/rho^2", "t_grid"),
]}

RUN_KEYS = {
    "experiment": Param("str", ""),
    "seed": Param("int", 0, 0),
    "threads": Param("int", 1, 1),
    "out": Param("str", ""),
    "budget_seconds": Param("float", math.inf, 0.0),
}


def resolve_config(name: str, section: dict, seed: int) -> dict:
    """Typed config for one experiment: defaults overridden by ``section``."""
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}")
    exp = EXPERIMENTS[name]
    unknown = sorted(set(section) - set(exp.params))
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(unknown)}")
    cfg = {k: p.default for k, p in exp.params.items()}
    for k, v in section.items():
        cfg[k] = exp.params[k].parse(f"{name}.{k}", v)
    if exp.t_grid_key and list(cfg[exp.t_grid_key]) != sorted(set(cfg[exp.t_grid_key])):
        raise ConfigError(f"{name}.{exp.t_grid_key} must be strictly increasing")
    _validate(name, cfg)
    cfg["seed"] = seed
    return cfg


def _validate(name, cfg):
    if name in ("convergence", "p2p-convergence", "field-marginal", "moment-bound"):
        try:
            schedule_from(cfg)
        except Exception as exc:
            raise ConfigError(f"{name}: {exc}") from None
    if name == "moment-bound" and any(not 0 < T <= 1 for T in cfg["T_grid"]):
        raise ConfigError("moment-bound.T_grid must lie in (0, 1]")
    if name in ("convergence", "p2p-convergence", "field-marginal") and any(
            not 0 < T <= 1 for T in cfg["field_times"]):
        raise ConfigError(f"{name}.field_times must lie in (0, 1]")
    if name == "chaos-vs-direct" and cfg["K"] > MAX_CHAOS_ORDER:
        raise ConfigError(f"chaos-vs-direct.K is limited to {MAX_CHAOS_ORDER}")
    if name in ("wt-mean", "zt-mean", "p2p-mean"):
        if cfg["n_paths"] % 2:
            raise ConfigError(f"{name}.n_paths must be even (antithetic pairs)")


def computation_key(name: str, cfg: dict):
    """Experiments with equal keys share one pass over the computation's tasks."""
    items = tuple(sorted((k, v) for k, v in cfg.items() if not k.startswith("_")))
    return EXPERIMENTS[name].computation.name, items


def run_task(comp_name: str, cfg: dict, task: tuple):
    comp = COMPUTATIONS[comp_name]
    return comp.work(cfg, comp.stream_id, task)


__all__ = ["CSV_COLUMNS", "COMPUTATIONS", "EXPERIMENTS", "Check", "Experiment", "Param", "Row",
           "SCHEMA_VERSION", "computation_key", "resolve_config", "run_task", "schedule_from"]
