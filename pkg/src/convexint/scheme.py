"""Starting data, single steps and the iteration of the convex-integration scheme."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .defect import (
    PART_NAMES,
    DiffOperator,
    cell_operator_norms,
    combine_parts,
    defect_slice,
    substituted_slice_norms,
    variant_operator,
)
from .errors import (
    BudgetExhausted,
    ConcentrationTooSmall,
    InadmissibleExponents,
    MeanDrift,
    ResolutionTooCoarse,
)
from .mikado import ExponentConfig, build_blocks
from .perturbation import BlockContext, SpaceCutoff, TimeCutoff, perturbation_slice, smoothstep, smoothstep_derivative
from .spectral_calculus import std_antidivergence
from .torus_field import GridSpec, alloc_series, lp_norm, time_derivative_at
from .verify import EstimateReport, check_step_estimates

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# targets


@dataclass
class Target:
    """A smooth space-time density ``rho_bar(t, x)``.

    ``func(t, coords)`` takes a scalar time and sparse coordinate arrays.
    ``dt`` is its time derivative; when omitted, fourth-order central
    differences with step ``h`` are used.
    """

    func: Callable
    dt: Optional[Callable] = None
    name: str = "custom"
    h: float = 1e-3

    def __call__(self, t: float, coords) -> np.ndarray:
        return self.func(t, coords)

    def time_derivative(self, t: float, coords) -> np.ndarray:
        if self.dt is not None:
            return self.dt(t, coords)
        h = self.h
        f = self.func
        return (f(t - 2 * h, coords) - 8 * f(t - h, coords) + 8 * f(t + h, coords)
                - f(t + 2 * h, coords)) / (12 * h)

    def sample(self, t: float, grid: GridSpec) -> np.ndarray:
        return np.broadcast_to(self(t, grid.coords()), grid.shape).astype(float)

    def sample_dt(self, t: float, grid: GridSpec) -> np.ndarray:
        return np.broadcast_to(self.time_derivative(t, grid.coords()), grid.shape).astype(float)


def default_target() -> Target:
    """``(1 - t) sin(2 pi x1) + t sin(2 pi x2) + 2``: mean 2, time-varying L^p norms."""

    def func(t, x):
        return (1 - t) * np.sin(2 * np.pi * x[0]) + t * np.sin(2 * np.pi * x[1]) + 2.0

    def dt(t, x):
        return -np.sin(2 * np.pi * x[0]) + np.sin(2 * np.pi * x[1]) + 0.0 * x[0]

    return Target(func, dt, name="default")


# ---------------------------------------------------------------------------
# configuration and state


NORM_MODES = ("auto", "grid", "substituted")


@dataclass
class SchemeConfig:
    """Everything a run needs besides the starting state.

    ``norm_mode`` selects how step certificates are evaluated: ``"grid"``
    requires the grid to resolve the pipes (``N >= resolution_factor lam mu``)
    and raises ResolutionTooCoarse otherwise; ``"substituted"`` always uses the
    improved-Hoelder substitution; ``"auto"`` substitutes only when unresolved.
    """

    exponents: ExponentConfig
    grid: GridSpec
    target: Target = field(default_factory=default_target)
    eps: float = 0.1
    eps_tilde: float = 0.05
    eta: float = 0.5
    Q: int = 2
    c: Optional[float] = None
    lam_policy: Union[str, Sequence[int]] = "auto"
    lam_seed: int = 4
    lam_budget: int = 6
    resolution_factor: float = 8.0
    norm_mode: str = "auto"
    operator: Optional[DiffOperator] = None
    workdir: Optional[str] = None

    def __post_init__(self):
        if self.c is None:
            self.c = self.default_c()
        if self.eps_tilde <= 0 or self.eps_tilde >= 0.25:
            raise ValueError("eps_tilde must lie in (0, 1/4)")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")

    def default_c(self) -> float:
        """Twice the smallest admissible exponent, so ``lam mu^-gamma = lam^-1``."""
        return 2.0 * self.c_min

    @property
    def c_min(self) -> float:
        e = self.exponents
        if e.variant == "higher_order":
            return (e.k - 1) / e.gamma
        return 1.0 / e.gamma

    @property
    def variant(self) -> str:
        return self.exponents.variant

    @property
    def diff_operator(self) -> Optional[DiffOperator]:
        return variant_operator(self.variant, self.grid.d, self.exponents.k, self.operator)


@dataclass
class SchemeState:
    """``(rho_q, u_q, R_q)`` on the time grid plus the parameters that built it.

    ``u`` is None for the identically zero field.  ``dR`` optionally holds
    the exact time derivative of ``R`` (otherwise differences are used).
    """

    q: int
    grid: GridSpec
    times: np.ndarray
    rho: np.ndarray
    u: Optional[np.ndarray]
    R: np.ndarray
    dR: Optional[np.ndarray] = None
    params: dict = field(default_factory=dict)
    report: Optional[EstimateReport] = None
    part_norms: dict = field(default_factory=dict)

    def R_norms(self) -> np.ndarray:
        return np.array([lp_norm(np.asarray(r), 1) for r in self.R])


# ---------------------------------------------------------------------------
# starting data


def time_partition(t, eps_tilde: float):
    """``(phi0, phi, phi1)`` and their derivatives at times ``t``."""
    e = eps_tilde
    a = (np.asarray(t, dtype=float) - e) / e
    b = (np.asarray(t, dtype=float) - (1 - 2 * e)) / e
    phi0 = 1.0 - smoothstep(a)
    phi1 = smoothstep(b)
    dphi0 = -smoothstep_derivative(a) / e
    dphi1 = smoothstep_derivative(b) / e
    return (phi0, 1.0 - phi0 - phi1, phi1), (dphi0, -dphi0 - dphi1, dphi1)


def check_mean(target: Target, grid: GridSpec, tol: float = 1e-10, samples: int = 33) -> float:
    """The (time-independent) mean of the target; raises MeanDrift otherwise."""
    ts = np.linspace(0, 1, samples)
    means = np.array([np.mean(target.sample(t, grid)) for t in ts])
    drift = float(np.max(np.abs(means - means[0])))
    if drift > tol * max(1.0, abs(means[0])):
        raise MeanDrift(f"target mean varies by {drift:.3e} over [0, 1]")
    return float(means[0])


def initial_data(target: Target, grid: GridSpec, eps_tilde: float = 0.05,
                 operator: Optional[DiffOperator] = None,
                 workdir: Optional[str] = None) -> SchemeState:
    """``rho0 = phi0 rho_bar(0) + phi rho_bar(t) + phi1 rho_bar(1)``, ``u0 = 0``,
    ``R0 = -grad Delta^-1 (d_t rho0 - L rho0)`` (``L = 0`` for pure transport)."""
    if not 0 < eps_tilde < 0.25:
        raise ValueError("eps_tilde must lie in (0, 1/4)")
    check_mean(target, grid)
    times = grid.times()
    start = target.sample(0.0, grid)
    end = target.sample(1.0, grid)
    rho = alloc_series((grid.n_t,) + grid.shape, workdir)
    R = alloc_series((grid.n_t, grid.d) + grid.shape, workdir)
    dR = alloc_series((grid.n_t, grid.d) + grid.shape, workdir)

    def drho_dt(t):
        (p0, p, p1), (dp0, dp, dp1) = time_partition(t, eps_tilde)
        out = dp0 * start + dp1 * end
        if p != 0.0 or dp != 0.0:
            out = out + dp * target.sample(t, grid) + p * target.sample_dt(t, grid)
        return out

    def defect_source(t, value, rate):
        src = rate
        if operator is not None:
            src = src - operator.apply(value)
        return -std_antidivergence(src - np.mean(src), mean_tol=np.inf)

    h = 1e-3
    for i, t in enumerate(times):
        (p0, p, p1), _ = time_partition(t, eps_tilde)
        r = p0 * start + p1 * end
        if p != 0.0:
            r = r + p * target.sample(t, grid)
        rho[i] = r
        rate = drho_dt(t)
        R[i] = defect_source(t, r, rate)
        # d/dt R0 by fourth-order differences of the exact d_t rho0
        ts = [t - 2 * h, t - h, t + h, t + 2 * h]
        d2 = (drho_dt(ts[0]) - 8 * drho_dt(ts[1]) + 8 * drho_dt(ts[2]) - drho_dt(ts[3])) / (12 * h)
        drate = d2
        if operator is not None:
            drate = d2 - operator.apply(rate)
        dR[i] = -std_antidivergence(drate - np.mean(drate), mean_tol=np.inf)
    return SchemeState(0, grid, times, rho, None, R, dR,
                       params={"eps_tilde": eps_tilde, "target": target.name})


# ---------------------------------------------------------------------------
# one step


def concentration(lam: int, c: float) -> int:
    return int(math.ceil(lam ** c - 1e-9))


def _step_slice(rho0, u0, R0, dR0, psi, dpsi, eta, ctx, chi, exps, op):
    """New ``(rho, u, R)`` at one time sample and the L^1 norms of the defect parts.

    Kept separate so the large per-slice temporaries are released on return.
    """
    sl = perturbation_slice(R0, dR0, psi, dpsi, eta, ctx, chi, exps.rho_exponent, exps.u_exponent)
    parts = defect_slice(rho0, u0, R0, psi, sl, ctx, chi, op)
    norms = {name: lp_norm(parts[name], 1) for name in PART_NAMES}
    R1 = combine_parts(parts)
    del parts
    rho1 = rho0 + sl.theta + sl.theta_c
    u1 = sl.w
    u1 += sl.w_c
    if u0 is not None:
        u1 += u0
    return rho1, u1, R1, norms


def step(state: SchemeState, eta: float, delta: float, sigma: float, lam: int,
         c: float, config: SchemeConfig) -> SchemeState:
    """One application of the perturbation scheme, with its estimate report."""
    exps = config.exponents
    d = state.grid.d
    if c <= config.c_min:
        raise InadmissibleExponents(f"c={c} must exceed {config.c_min:.4g}", inequality="c > 1/gamma")
    mu = concentration(lam, c)
    if mu <= 2 * d:
        raise ConcentrationTooSmall(f"mu = ceil(lam^c) = {mu} must exceed 2d = {2 * d}")
    N = state.grid.N
    need = config.resolution_factor * lam * mu
    resolved = N >= need
    if not resolved and config.norm_mode == "grid":
        raise ResolutionTooCoarse(f"N={N} < {config.resolution_factor:g}*lam*mu = {need:g} "
                                  f"(lam={lam}, mu={mu})")
    if state.params.get("grid_resolved") is False:
        raise ResolutionTooCoarse(
            "the input defect comes from an unresolved step; its grid samples are not the "
            "smooth outer factor the improved-Hoelder substitution needs")
    reduced = state.grid.reduced_axes
    for j in range(d):
        if any(a != j for a in reduced) and np.any(np.asarray(state.R[:, j])):
            raise ResolutionTooCoarse(
                f"block {j + 1} is active but its pipes cross reduced axes {reduced}")
    blocks = build_blocks(mu, exps)
    ctx = BlockContext(blocks, N, lam)
    psi = TimeCutoff(sigma)
    chi = SpaceCutoff(delta, d)
    op = config.diff_operator
    dt = state.times[1] - state.times[0]

    def dR_at(i):
        if state.dR is not None:
            return np.asarray(state.dR[i])
        return time_derivative_at(state.R, i, dt)
    n_t = len(state.times)
    rho1 = alloc_series(state.rho.shape, config.workdir)
    u1 = alloc_series(state.R.shape, config.workdir)
    R1 = alloc_series(state.R.shape, config.workdir)
    norms = {name: np.zeros(n_t) for name in PART_NAMES}
    substitute = config.norm_mode == "substituted" or not resolved
    subst = [None] * n_t
    cells = None
    if substitute:
        pr = exps.rho_exponent
        rs = {1.0, pr, exps.u_exponent, exps.p_tilde, 1.0 / (1.0 - 1.0 / pr) if pr > 1 else np.inf}
        cells = cell_operator_norms(exps, mu, sorted(rs))
    for i, t in enumerate(state.times):
        rho0 = np.asarray(state.rho[i])
        R0 = np.asarray(state.R[i])
        u0 = None if state.u is None else np.asarray(state.u[i])
        p, dp = float(psi(t)), float(psi.derivative(t))
        if p == 0.0 and dp == 0.0:
            rho1[i] = rho0
            u1[i] = 0.0 if u0 is None else u0
            R1[i] = R0
            norms["R_psi"][i] = lp_norm(R0, 1)
            continue
        dR0 = dR_at(i)
        rho1[i], u1[i], R1[i], part = _step_slice(rho0, u0, R0, dR0, p, dp, eta,
                                                  ctx, chi, exps, op)
        if substitute:
            part = substituted_slice_norms(rho0, u0, R0, dR0, p, dp, eta, blocks, lam, chi,
                                           exps, cells, op)
            subst[i] = part
        for name in PART_NAMES:
            norms[name][i] = part[name]
        log.debug("step slice t=%.4f done", t)
    params = {"eta": eta, "delta": delta, "sigma": sigma, "lam": int(lam), "mu": int(mu),
              "c": float(c), "cell": ctx.cell, "cell_resolved": bool(ctx.cell_resolved),
              "grid_resolved": bool(resolved), "substituted": bool(substitute)}
    if cells is not None:
        params.update(mu_eff=cells.mu_eff, mu_eff_cell=cells.cell)
    new = SchemeState(state.q + 1, state.grid, state.times, rho1, u1, R1, None, params,
                      part_norms=norms)
    new.report = step_report(state, new, config, params, subst if substitute else None)
    return new


def estimate_params(config: SchemeConfig, eta: float, delta: float, sigma: float) -> dict:
    e = config.exponents
    return {"eta": eta, "delta": delta, "sigma": sigma, "M": e.M, "p_rho": e.rho_exponent,
            "p_u": e.u_exponent, "p_tilde": e.p_tilde}


def step_report(before: SchemeState, after: SchemeState, config: SchemeConfig,
                params: dict, substituted=None) -> EstimateReport:
    rep = check_step_estimates(before, after, estimate_params(
        config, params["eta"], params["delta"], params["sigma"]), substituted)
    if substituted is not None:
        rep.add("pipes resolved by grid", f"lam={params['lam']},mu={params['mu']}",
                config.resolution_factor * params["lam"] * params["mu"], before.grid.N,
                info=True, note=f"improved-Hoelder substitution; cell norms at "
                                f"mu_eff={params.get('mu_eff')}")
    for i, t in enumerate(after.times):
        for name in PART_NAMES:
            rep.add(f"{name} L1", f"t={t:.6g}", after.part_norms[name][i], np.inf, info=True)
        rep.add("R_chi <= delta/2", f"t={t:.6g}", after.part_norms["R_chi"][i],
                params["delta"] / 2)
    return rep


def step_auto(state: SchemeState, eta: float, delta: float, sigma: float, c: float,
              config: SchemeConfig) -> SchemeState:
    """Double lam from ``config.lam_seed`` until the step report passes.

    Raises BudgetExhausted (carrying the best failing state/report) when the
    budget runs out, and ResolutionTooCoarse when not even the first candidate
    fits on the grid.
    """
    best = None
    lam = int(config.lam_seed)
    for attempt in range(config.lam_budget + 1):
        try:
            new = step(state, eta, delta, sigma, lam, c, config)
        except ResolutionTooCoarse as exc:
            if best is None:
                raise
            log.info("search stopped at lam=%d: %s", lam, exc)
            break
        if new.report.passed:
            return new
        if best is None or len(new.report.failures()) < len(best.report.failures()):
            best = new
        lam *= 2
    raise BudgetExhausted(
        f"no passing step for lam in {config.lam_seed}..{lam}",
        report=None if best is None else best.report, state=best,
    )


# ---------------------------------------------------------------------------
# iteration


def step_parameters(q: int) -> tuple:
    """``(delta, sigma) = (delta_{q+2}, sigma_{q+1})`` for the step from q to q + 1."""
    return 2.0 ** -(q + 2), 2.0 ** -(q + 1)


def interval(sigma: float, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return (t > sigma) & (t < 1 - sigma)


def inductive_report(traj: Sequence[SchemeState], config: SchemeConfig) -> EstimateReport:
    """Inductive estimates on the nested intervals ``I_q = (2^-q, 1 - 2^-q)``."""
    e = config.exponents
    M, eta = e.M, config.eta
    pr, pu = e.rho_exponent, e.u_exponent
    inv_u = 0.0 if math.isinf(pu) else 1.0 / pu
    R0n = traj[0].R_norms()
    times = traj[0].times
    rep = EstimateReport()
    for q, st in enumerate(traj):
        Rn = st.R_norms()
        dq1 = 2.0 ** -(q + 1)
        for i, t in enumerate(times):
            tag = f"q={q},t={t:.6g}"
            if interval(2.0 ** -q, t):
                rep.add("inductive defect", tag, Rn[i], dq1, tolerance=1e-12)
            elif interval(2.0 ** -(q + 1), t):
                rep.add("inductive defect", tag, Rn[i], R0n[i] + dq1, tolerance=1e-12)
            else:
                rep.add("inductive defect", tag, Rn[i], R0n[i], tolerance=1e-12)
        if q == 0:
            continue
        prev = traj[q - 1]
        dq = 2.0 ** -q
        for i, t in enumerate(times):
            tag = f"q={q},t={t:.6g}"
            drho = lp_norm(np.asarray(st.rho[i]) - np.asarray(prev.rho[i]), pr)
            u_prev = 0.0 if prev.u is None else np.asarray(prev.u[i])
            du = lp_norm(np.asarray(st.u[i]) - u_prev, pu)
            if interval(2.0 ** -(q - 1), t):
                base = dq
            elif interval(dq, t):
                base = R0n[i] + dq
            elif interval(2.0 ** -(q + 1), t):
                base = R0n[i]
            else:
                base = 0.0
            rep.add("inductive rho distance", tag, drho, M * eta * base ** (1 / pr), tolerance=1e-12)
            rep.add("inductive u distance", tag, du, M / eta * base ** inv_u if base > 0 else 0.0,
                    tolerance=1e-12)
    return rep


def closeness_report(traj: Sequence[SchemeState], config: SchemeConfig) -> EstimateReport:
    """Endpoint pinning and eps-closeness of every iterate to the target."""
    p = config.exponents.rho_exponent
    grid = traj[0].grid
    rep = EstimateReport()
    start = config.target.sample(0.0, grid)
    end = config.target.sample(1.0, grid)
    for st in traj:
        tag = f"q={st.q}"
        rep.add("endpoint t=0", tag, float(np.max(np.abs(np.asarray(st.rho[0]) - start))), 0.0,
                note="grid-exact")
        rep.add("endpoint t=1", tag, float(np.max(np.abs(np.asarray(st.rho[-1]) - end))), 0.0,
                note="grid-exact")
        dist = max(lp_norm(np.asarray(st.rho[i]) - config.target.sample(t, grid), p)
                   for i, t in enumerate(st.times))
        rep.add("sup_t distance to target", tag, dist, config.eps)
    return rep


def telescoping_bound(traj: Sequence[SchemeState], config: SchemeConfig, terms: int = 60) -> float:
    """``M eta [max ||R0||^{1/p} + (max ||R0|| + 1)^{1/p} + sum_j delta_j^{1/p}]``."""
    e = config.exponents
    p = e.rho_exponent
    r0 = float(np.max(traj[0].R_norms()))
    tail = sum((2.0 ** -j) ** (1 / p) for j in range(1, terms))
    return e.M * config.eta * (r0 ** (1 / p) + (r0 + 1) ** (1 / p) + tail)


def iterate(config: SchemeConfig, on_step: Optional[Callable] = None,
            start: Optional[SchemeState] = None) -> List[SchemeState]:
    """Starting data (or ``start``) followed by ``config.Q`` steps; returns the trajectory."""
    state = start
    if state is None:
        state = initial_data(config.target, config.grid, config.eps_tilde,
                             operator=config.diff_operator, workdir=config.workdir)
    traj = [state]
    for q in range(config.Q):
        delta, sigma = step_parameters(q)
        if config.lam_policy == "auto":
            state = step_auto(state, config.eta, delta, sigma, config.c, config)
        else:
            lam = int(list(config.lam_policy)[q])
            state = step(state, config.eta, delta, sigma, lam, config.c, config)
        traj.append(state)
        if on_step is not None:
            on_step(state)
    return traj
