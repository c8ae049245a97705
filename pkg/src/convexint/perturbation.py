"""Cutoffs and the density/velocity perturbations of one convex-integration step.

For one time slice with old defect ``R0`` the perturbations are

    theta   = eta   sum_j psi A_j (Theta^j)_lam,     A_j = chi_j sign(R0_j) |R0_j|^{1/p}
    theta_c = -mean(theta)
    w       = 1/eta sum_j psi B_j (W^j)_lam,         B_j = chi_j |R0_j|^{1/p'}
    w_c     = -1/eta sum_j R(d_j(psi B_j) (W^j_j)_lam)

where ``R`` is the improved antidivergence.  The corrector is built in its
grid-consistent form with target ``d_j(psi B_j (W^j_j)_lam)``, so
``div(w + w_c) = 0`` holds to rounding error on any grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import InvalidSigma
from .mikado import MikadoBlock, cell_resolution
from .spectral_calculus import improved_antidivergence, partial
from .torus_field import alloc_series

# ---------------------------------------------------------------------------
# smoothstep


def smoothstep(t) -> np.ndarray:
    """``S(t) = B(t) / (B(t) + B(1-t))`` with ``B(t) = exp(-1/t)`` for t > 0.

    S is 0 for t <= 0, 1 for t >= 1 and C^infinity.
    """
    t = np.asarray(t, dtype=float)
    inside = (t > 0.0) & (t < 1.0)
    ti = np.where(inside, t, 0.5)
    val = expit(1.0 / (1.0 - ti) - 1.0 / ti)
    return np.where(t >= 1.0, 1.0, np.where(inside, val, 0.0))


def smoothstep_derivative(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    inside = (t > 0.0) & (t < 1.0)
    ti = np.where(inside, t, 0.5)
    s = expit(1.0 / (1.0 - ti) - 1.0 / ti)
    val = s * (1.0 - s) * (1.0 / ti ** 2 + 1.0 / (1.0 - ti) ** 2)
    return np.where(inside, val, 0.0)


# ---------------------------------------------------------------------------
# cutoffs


@dataclass(frozen=True)
class TimeCutoff:
    """psi: 0 on [0, sigma/2] and [1 - sigma/2, 1], 1 on [sigma, 1 - sigma]."""

    sigma: float

    def __post_init__(self):
        if not 0.0 < self.sigma <= 0.5:
            raise InvalidSigma(f"sigma must lie in (0, 1/2], got {self.sigma}")

    def _args(self, t):
        h = 0.5 * self.sigma
        t = np.asarray(t, dtype=float)
        return (t - h) / h, (1.0 - h - t) / h, h

    def __call__(self, t) -> np.ndarray:
        up, down, _ = self._args(t)
        return smoothstep(up) * smoothstep(down)

    def derivative(self, t) -> np.ndarray:
        up, down, h = self._args(t)
        return (smoothstep_derivative(up) * smoothstep(down)
                - smoothstep(up) * smoothstep_derivative(down)) / h

    def support_mask(self, t) -> np.ndarray:
        """True where t lies in ``I_{sigma/2} = (sigma/2, 1 - sigma/2)``."""
        t = np.asarray(t, dtype=float)
        return (t > 0.5 * self.sigma) & (t < 1.0 - 0.5 * self.sigma)


def make_time_cutoff(sigma: float) -> TimeCutoff:
    return TimeCutoff(float(sigma))


@dataclass(frozen=True)
class SpaceCutoff:
    """chi_j = S((|R0_j| - delta/(4d)) / (delta/(4d))): 0 below delta/(4d), 1 above delta/(2d)."""

    delta: float
    d: int

    def __post_init__(self):
        if not self.delta > 0.0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    @property
    def lower(self) -> float:
        return self.delta / (4 * self.d)

    @property
    def upper(self) -> float:
        return self.delta / (2 * self.d)

    def __call__(self, r) -> np.ndarray:
        return smoothstep((np.abs(r) - self.lower) / self.lower)

    def derivative(self, r) -> np.ndarray:
        """d chi / d r."""
        r = np.asarray(r, dtype=float)
        return smoothstep_derivative((np.abs(r) - self.lower) / self.lower) * np.sign(r) / self.lower

    def values(self, R0: np.ndarray) -> np.ndarray:
        """``chi_j(R0_j)`` stacked over components of a vector slice."""
        return np.stack([self(c) for c in R0])

    def amplitude(self, r, exponent: float, signed: bool) -> np.ndarray:
        """``chi(r) sign(r)^signed |r|^(1/exponent)``; exactly zero where chi vanishes."""
        r = np.asarray(r, dtype=float)
        chi = self(r)
        live = chi > 0.0
        mag = np.abs(np.where(live, r, 1.0)) ** (0.0 if math.isinf(exponent) else 1.0 / exponent)
        out = np.where(live, chi * mag, 0.0)
        return out * np.sign(r) if signed else out

    def amplitude_derivative(self, r, exponent: float, signed: bool) -> np.ndarray:
        """Derivative in r of :meth:`amplitude`."""
        r = np.asarray(r, dtype=float)
        inv = 0.0 if math.isinf(exponent) else 1.0 / exponent
        chi = self(r)
        live = chi > 0.0
        absr = np.abs(np.where(live, r, 1.0))
        sgn = np.sign(r) if signed else 1.0
        dmag = inv * absr ** (inv - 1.0) * (np.sign(r) if not signed else 1.0)
        val = self.derivative(r) * sgn * absr ** inv + chi * dmag
        return np.where(live, val, 0.0)


def make_space_cutoff(R0, delta: float) -> SpaceCutoff:
    """Space cutoff for a defect field ``R0`` (vector slice or series; only d is read)."""
    R0 = np.asarray(R0)
    d = R0.shape[0] if R0.ndim == R0.shape[0] + 1 else R0.shape[1]
    return SpaceCutoff(float(delta), int(d))


# ---------------------------------------------------------------------------
# block samples shared by every slice of a step


class _CellSamples:
    """Mean-free cell samples of one kind, computed on first access per block."""

    def __init__(self, blocks, cell: int, kind: str):
        self._blocks = blocks
        self._cell = cell
        self._kind = kind
        self._cache = {}

    def __len__(self) -> int:
        return len(self._blocks)

    def __getitem__(self, j: int) -> np.ndarray:
        if j not in self._cache:
            arr = self._blocks[j].sample(self._cell, 1, kind=self._kind)
            self._cache[j] = arr - arr.mean()
        return self._cache[j]

    def __iter__(self):
        return (self[j] for j in range(len(self)))


@dataclass
class BlockContext:
    """Samples of the blocks at ``lam x`` on the coarse grid and on their cells.

    Cell samples (used by the improved antidivergence) are built lazily, so
    blocks that never become active cost nothing.
    """

    blocks: Sequence[MikadoBlock]
    N: int
    lam: int
    cell: int = 0
    max_cell_points: int = 2 ** 22
    theta: list = field(init=False, repr=False)
    field_: list = field(init=False, repr=False)
    product: list = field(init=False, repr=False)
    cell_field: _CellSamples = field(init=False, repr=False)
    cell_product: _CellSamples = field(init=False, repr=False)
    cell_resolved: bool = field(init=False)

    def __post_init__(self):
        d = self.blocks[0].d
        mu = self.blocks[0].mu
        wanted = self.cell or cell_resolution(mu)
        floor = max(self.N // self.lam, 8)
        cell = max(wanted, floor)
        while cell ** (d - 1) > self.max_cell_points and cell > floor:
            cell //= 2
        self.cell = cell
        self.cell_resolved = cell >= cell_resolution(mu, points_per_pipe=8, minimum=8)
        self.theta = [b.sample(self.N, self.lam, kind="density") for b in self.blocks]
        self.field_ = [b.sample(self.N, self.lam, kind="field") for b in self.blocks]
        self.product = [b.sample(self.N, self.lam, kind="product") for b in self.blocks]
        self.cell_field = _CellSamples(self.blocks, cell, "field")
        self.cell_product = _CellSamples(self.blocks, cell, "product")

    @property
    def resolved(self) -> bool:
        """Whether the coarse grid itself resolves the pipes (8 points per width)."""
        return self.N >= 8 * self.lam * self.blocks[0].mu


# ---------------------------------------------------------------------------
# perturbations


@dataclass
class PerturbationSlice:
    theta: np.ndarray
    theta_c: float
    w: np.ndarray
    w_c: np.ndarray
    dtheta: np.ndarray
    F2: list


def perturbation_slice(R0: np.ndarray, dR0: Optional[np.ndarray], psi: float, dpsi: float,
                       eta: float, ctx: BlockContext, chi: SpaceCutoff,
                       rho_exp: float, u_exp: float) -> PerturbationSlice:
    """Perturbations at one time sample.

    ``dtheta`` is the time derivative of ``theta + theta_c`` by the chain rule,
    from ``psi'`` and ``dR0`` (zero where both psi and psi' vanish).
    ``F2[j] = psi^2 chi_j^2 R0_j`` feeds the quadratic defect.
    """
    d = R0.shape[0]
    shape = R0.shape[1:]
    theta = np.zeros(shape)
    dtheta = np.zeros(shape)
    w = np.zeros((d,) + shape)
    w_c = np.zeros((d,) + shape)
    F2 = []
    if psi == 0.0 and dpsi == 0.0:
        return PerturbationSlice(theta, 0.0, w, w_c, dtheta, [np.zeros(shape)] * d)
    for j, block in enumerate(ctx.blocks):
        Rj = R0[j]
        chi_j = chi(Rj)
        F2.append(psi ** 2 * chi_j ** 2 * Rj)
        if not np.any(chi_j):
            continue
        A = chi.amplitude(Rj, rho_exp, signed=True)
        theta += eta * psi * A * ctx.theta[j]
        dA = dpsi * A
        if dR0 is not None and psi != 0.0:
            dA = dA + psi * chi.amplitude_derivative(Rj, rho_exp, signed=True) * dR0[j]
        dtheta += eta * dA * ctx.theta[j]
        if psi == 0.0:
            continue
        B = psi * chi.amplitude(Rj, u_exp, signed=False)
        flux = B * ctx.field_[j]
        w[j] += flux / eta
        target = partial(flux, j)
        if np.any(target):
            w_c -= improved_antidivergence(partial(B, j), ctx.cell_field[j], ctx.lam,
                                           target=target, strict=False) / eta
    theta_c = -float(np.mean(theta))
    dtheta -= np.mean(dtheta)
    return PerturbationSlice(theta, theta_c, w, w_c, dtheta, F2)


@dataclass
class PerturbationSet:
    """Time series of the perturbations of one step."""

    theta: np.ndarray
    theta_c: np.ndarray
    w: np.ndarray
    w_c: np.ndarray
    dtheta: np.ndarray
    eta: float
    lam: int
    mu: float
    blocks: Sequence[MikadoBlock]
    psi: TimeCutoff
    chi: SpaceCutoff


def build_perturbations(rho0, u0, R0, eta: float, lam: int, blocks: Sequence[MikadoBlock],
                        psi: TimeCutoff, chi: SpaceCutoff, times: Optional[np.ndarray] = None,
                        dR0: Optional[np.ndarray] = None, workdir: Optional[str] = None,
                        ctx: Optional[BlockContext] = None) -> PerturbationSet:
    """Perturbations for a whole time series ``R0`` of shape ``(n_t, d, N, ..., N)``.

    ``rho0`` and ``u0`` are accepted for interface symmetry; the perturbations
    depend only on ``R0``.  ``dR0`` defaults to fourth-order differences of R0.
    """
    from .torus_field import time_derivative

    R0 = np.asarray(R0) if not isinstance(R0, np.memmap) else R0
    n_t = R0.shape[0]
    if times is None:
        times = np.linspace(0.0, 1.0, n_t)
    if dR0 is None and n_t > 1:
        dR0 = time_derivative(R0, times[1] - times[0])
    N = R0.shape[-1]
    ctx = ctx or BlockContext(blocks, N, lam)
    cfg = blocks[0].config
    shape = R0.shape[2:]
    d = R0.shape[1]
    theta = alloc_series((n_t,) + shape, workdir)
    dtheta = alloc_series((n_t,) + shape, workdir)
    w = alloc_series((n_t, d) + shape, workdir)
    w_c = alloc_series((n_t, d) + shape, workdir)
    theta_c = np.zeros(n_t)
    for i, t in enumerate(times):
        sl = perturbation_slice(np.asarray(R0[i]), None if dR0 is None else np.asarray(dR0[i]),
                                float(psi(t)), float(psi.derivative(t)), eta, ctx, chi,
                                cfg.rho_exponent, cfg.u_exponent)
        theta[i] = sl.theta
        theta_c[i] = sl.theta_c
        w[i] = sl.w
        w_c[i] = sl.w_c
        dtheta[i] = sl.dtheta
    return PerturbationSet(theta, theta_c, w, w_c, dtheta, eta, lam, blocks[0].mu,
                           blocks, psi, chi)
