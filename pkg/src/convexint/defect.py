"""The new defect field of a step and its five constituent parts.

With ``F2_j = psi^2 chi_j^2 R0_j`` and ``P_j = (Theta^j W^j_j)_lam``:

    R_quadr  = sum_j R(d_j F2_j (P_j - 1))                 (grid-consistent target)
    R_chi    = psi^2 sum_j (chi_j^2 - 1) R0_j e_j
    R_psi    = (psi^2 - 1) R0
    R_linear = grad Delta^-1 d_t(theta + theta_c) + theta u0 + rho0 w  [+ variant term]
    R_corr   = rho0 w_c + theta_c u0 + theta w_c + theta_c w + theta_c w_c
    R1       = -(R_quadr + R_chi + R_psi + R_linear + R_corr)

The variant term makes ``-div R1`` absorb the extra operator: ``-grad theta``
for the diffusion variant (equation ``d_t rho + div(rho u) - Lap rho = -div R``)
and ``-Ltilde theta`` with ``div Ltilde = L`` for a higher-order operator L.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .perturbation import BlockContext, PerturbationSet, PerturbationSlice
from .spectral_calculus import gradient, improved_antidivergence, partial, std_antidivergence
from .torus_field import alloc_series, lp_norm

PART_NAMES = ("R_quadr", "R_chi", "R_psi", "R_linear", "R_corr")


@dataclass(frozen=True)
class DiffOperator:
    """Constant-coefficient operator ``L = sum_alpha c_alpha d^alpha`` of order k."""

    terms: tuple  # ((alpha, coeff), ...)

    @classmethod
    def laplacian(cls, d: int) -> "DiffOperator":
        return cls(tuple((tuple(2 if i == l else 0 for i in range(d)), 1.0) for l in range(d)))

    @classmethod
    def pure_powers(cls, d: int, k: int) -> "DiffOperator":
        """``sum_i d_i^k``."""
        return cls(tuple((tuple(k if i == l else 0 for i in range(d)), 1.0) for l in range(d)))

    @property
    def order(self) -> int:
        return max(sum(a) for a, _ in self.terms)

    def apply(self, f: np.ndarray) -> np.ndarray:
        out = np.zeros(f.shape)
        for alpha, c in self.terms:
            out += c * _derive(f, alpha)
        return out

    def adjoint_apply(self, f: np.ndarray) -> np.ndarray:
        """``L^* f = sum_alpha (-1)^{|alpha|} c_alpha d^alpha f``."""
        out = np.zeros(f.shape)
        for alpha, c in self.terms:
            out += (-1) ** sum(alpha) * c * _derive(f, alpha)
        return out

    def split(self, f: np.ndarray) -> np.ndarray:
        """``Ltilde f`` with ``div Ltilde f = L f``.

        Each ``d^alpha`` gives up one derivative on its first nonzero index i,
        contributing ``c_alpha d^{alpha - e_i} f`` to component i.
        """
        d = f.ndim
        out = np.zeros((d,) + f.shape)
        for alpha, c in self.terms:
            i = next(n for n, a in enumerate(alpha) if a)
            reduced = list(alpha)
            reduced[i] -= 1
            out[i] += c * _derive(f, reduced)
        return out


def _derive(f: np.ndarray, alpha: Sequence[int]) -> np.ndarray:
    out = f
    for axis, n in enumerate(alpha):
        if n:
            out = partial(out, axis, n)
    return out


def variant_operator(variant: str, d: int, k: int = 0,
                     operator: Optional[DiffOperator] = None) -> Optional[DiffOperator]:
    """The extra operator L of a variant (None for transport and strong)."""
    if variant == "diffusion":
        return operator or DiffOperator.laplacian(d)
    if variant == "higher_order":
        return operator or DiffOperator.pure_powers(d, k)
    return None


def quadratic_defect(F2: Sequence[np.ndarray], ctx: BlockContext) -> np.ndarray:
    """``R_quadr = sum_j R(d_j F2_j (P_j - 1))`` with the grid-consistent target."""
    d = len(F2)
    shape = np.broadcast_shapes(*(np.shape(f) for f in F2))
    quadr = np.zeros((d,) + shape)
    for j in range(d):
        F2j = F2[j]
        if not np.any(F2j):
            continue
        target = partial(F2j * (ctx.product[j] - 1.0), j)
        quadr += improved_antidivergence(partial(F2j, j), ctx.cell_product[j], ctx.lam,
                                         target=target, strict=False)
    return quadr


def linear_defect(rho0: np.ndarray, u0: Optional[np.ndarray], theta: np.ndarray, w: np.ndarray,
                  dtheta: np.ndarray, operator: Optional[DiffOperator] = None):
    """``R_linear`` and the variant term it contains (None when absent)."""
    d = w.shape[0]
    if np.any(dtheta):
        lin = std_antidivergence(dtheta, mean_tol=np.inf)
    else:
        lin = np.zeros(w.shape)
    lin += rho0 * w
    if u0 is not None:
        lin += theta * u0
    variant_term = None
    if operator is not None and np.any(theta):
        if operator.terms == DiffOperator.laplacian(d).terms:
            variant_term = -gradient(theta)
        else:
            variant_term = -operator.split(theta)
        lin += variant_term
    return lin, variant_term


def defect_slice(rho0: np.ndarray, u0: Optional[np.ndarray], R0: np.ndarray, psi: float,
                 sl: PerturbationSlice, ctx: BlockContext, chi,
                 operator: Optional[DiffOperator] = None) -> Dict[str, np.ndarray]:
    """The five defect parts at one time sample (plus ``R_variant`` when present)."""
    d = R0.shape[0]
    shape = R0.shape[1:]
    theta, tc, w, w_c = sl.theta, sl.theta_c, sl.w, sl.w_c
    parts = {}

    parts["R_quadr"] = quadratic_defect(sl.F2, ctx)

    chi_part = np.zeros((d,) + shape)
    if psi != 0.0:
        for j in range(d):
            chi_part[j] = psi ** 2 * (chi(R0[j]) ** 2 - 1.0) * R0[j]
    parts["R_chi"] = chi_part
    parts["R_psi"] = (psi ** 2 - 1.0) * R0

    lin, variant_term = linear_defect(rho0, u0, theta, w, sl.dtheta, operator)
    parts["R_linear"] = lin

    # accumulate in place: these are the largest arrays of a step
    corr = w_c * (rho0 + theta + tc)
    corr += tc * w
    if u0 is not None:
        corr += tc * u0
    parts["R_corr"] = corr
    if variant_term is not None:
        parts["R_variant"] = variant_term
    return parts


def combine_parts(parts: Dict[str, np.ndarray]) -> np.ndarray:
    """``R1 = -(sum of the five parts)``."""
    out = -np.asarray(parts[PART_NAMES[0]], dtype=float)
    for name in PART_NAMES[1:]:
        out -= parts[name]
    return out


@dataclass
class DefectParts:
    """Per-part time series (when kept) and their L^1 norm histories."""

    times: np.ndarray
    norms: Dict[str, np.ndarray]
    fields: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getattr__(self, name):
        fields = self.__dict__.get("fields", {})
        if name in fields:
            return fields[name]
        raise AttributeError(name)


def assemble_defect(state0, pert: PerturbationSet, variant: str = "transport",
                    operator: Optional[DiffOperator] = None, keep_parts: bool = True,
                    workdir: Optional[str] = None, ctx: Optional[BlockContext] = None):
    """New defect series ``R1`` and its parts for a previously built perturbation set.

    ``state0`` needs ``rho``, ``u`` (or None for zero), ``R`` and ``times``.
    """
    from .perturbation import PerturbationSlice

    R0 = state0.R
    n_t, d = R0.shape[:2]
    ctx = ctx or BlockContext(pert.blocks, R0.shape[-1], pert.lam)
    op = variant_operator(variant, d, pert.blocks[0].config.k, operator)
    R1 = alloc_series(R0.shape, workdir)
    norms = {name: np.zeros(n_t) for name in PART_NAMES}
    fields = {}
    if keep_parts:
        fields = {name: alloc_series(R0.shape, workdir) for name in PART_NAMES}
    for i, t in enumerate(state0.times):
        psi = float(pert.psi(t))
        R0i = np.asarray(R0[i])
        F2 = [psi ** 2 * pert.chi(R0i[j]) ** 2 * R0i[j] for j in range(d)]
        sl = PerturbationSlice(np.asarray(pert.theta[i]), float(pert.theta_c[i]),
                               np.asarray(pert.w[i]), np.asarray(pert.w_c[i]),
                               np.asarray(pert.dtheta[i]), F2)
        u0 = None if state0.u is None else np.asarray(state0.u[i])
        parts = defect_slice(np.asarray(state0.rho[i]), u0, R0i, psi, sl, ctx, pert.chi, op)
        R1[i] = combine_parts(parts)
        for name in PART_NAMES:
            norms[name][i] = lp_norm(parts[name], 1)
            if keep_parts:
                fields[name][i] = parts[name]
    return R1, DefectParts(np.asarray(state0.times), norms, fields)


def part_norms(parts: DefectParts, delta: float, sigma: float, R0_norms: np.ndarray):
    """Estimate report for the per-part bounds that carry explicit constants.

    ``R_chi <= delta/2`` everywhere; ``R_psi = 0`` on ``I_sigma`` and
    ``<= ||R0||_1`` off it.  The rate-type bounds (``R_quadr``, ``R_corr`` ~ 1/lam,
    ``R_linear`` ~ mu^-gamma) are recorded as information rows; their exponents
    are checked by rate fits across several steps.
    """
    from .verify import EstimateReport

    rep = EstimateReport()
    for i, t in enumerate(parts.times):
        in_sigma = sigma < t < 1 - sigma
        rep.add("R_chi <= delta/2", f"t={t:.6g}", parts.norms["R_chi"][i], delta / 2)
        if in_sigma:
            rep.add("R_psi = 0 on I_sigma", f"t={t:.6g}", parts.norms["R_psi"][i], 0.0)
        else:
            rep.add("R_psi <= ||R0||_1", f"t={t:.6g}", parts.norms["R_psi"][i],
                    float(R0_norms[i]), tolerance=1e-12)
        for name in ("R_quadr", "R_linear", "R_corr"):
            rep.add(f"{name} (L1)", f"t={t:.6g}", parts.norms[name][i], np.inf, info=True)
    return rep


# ---------------------------------------------------------------------------
# norms under the improved-Hoelder substitution
#
# When the grid does not resolve the pipes (N < 8 lam mu), grid norms of
# composite fields are meaningless even though the grid identities stay exact.
# The certificates then use the product structure of every term: a smooth
# factor evaluated on the base grid times an exact block norm (scaling law),
# or, for antidivergence terms, the leading term lam^-1 ||f|| ||grad Delta^-1 g||
# of the improved antidivergence with the cell norm computed at a capped
# concentration mu_eff and rescaled by the block-norm ratio.


@dataclass
class CellOperatorNorms:
    """``||grad Delta^-1 g||_r`` style norms of the block profiles on their cell.

    Computed once at ``mu_eff`` (small enough for the cell grid to resolve the
    pipe) and rescaled to the actual ``mu`` by the ratio of the input norms.
    """

    mu: float
    mu_eff: int
    cell: int
    values: Dict[tuple, float]

    @property
    def extrapolated(self) -> bool:
        return self.mu_eff < self.mu

    def get(self, what: str, r: float) -> float:
        return self.values[(what, float(r))]


def cell_operator_norms(config, mu: float, rs: Sequence[float], points_per_pipe: int = 8,
                        max_cell_points: int = 2 ** 22) -> CellOperatorNorms:
    """Cell norms of ``grad Delta^-1 (W - mean)``, its Jacobian, ``grad Delta^-1 Theta``
    and ``grad Delta^-1 (Theta W - 1)`` for block 1 (all blocks are congruent).
    """
    from .mikado import build_block, cell_resolution
    from .spectral_calculus import _std_antidiv

    d = config.d
    n = cell_resolution(mu, points_per_pipe, minimum=16)
    while n ** (d - 1) > max_cell_points and n > 16:
        n //= 2
    mu_eff = int(min(mu, n // points_per_pipe))
    mu_eff = max(mu_eff, 2 * d + 1)
    block = build_block(1, mu_eff, config)
    field = block.sample(n, 1, kind="field")
    dens = block.sample(n, 1, kind="density")
    prod = block.sample(n, 1, kind="product")
    G_W = _std_antidiv(field - field.mean())
    G_T = _std_antidiv(dens - dens.mean())
    G_P = _std_antidiv(prod - prod.mean())
    values = {}
    for r in rs:
        r = float(r)
        ratio_W = (mu / mu_eff) ** (config.b - (0.0 if np.isinf(r) else (d - 1) / r))
        ratio_T = (mu / mu_eff) ** (config.a - (0.0 if np.isinf(r) else (d - 1) / r))
        ratio_P = (mu / mu_eff) ** (config.a + config.b - (0.0 if np.isinf(r) else (d - 1) / r))
        values[("antidiv_field", r)] = lp_norm(G_W, r) * ratio_W
        values[("antidiv_density", r)] = lp_norm(G_T, r) * ratio_T
        values[("antidiv_product", r)] = lp_norm(G_P, r) * ratio_P
        jac = 0.0
        for comp in G_W:
            for axis in range(d):
                D = np.abs(partial(comp, axis))
                jac = max(jac, float(D.max())) if np.isinf(r) else jac + float(np.mean(D ** r))
        jac = jac if np.isinf(r) else jac ** (1.0 / r)
        values[("grad_antidiv_field", r)] = jac * ratio_W
    return CellOperatorNorms(float(mu), mu_eff, n, values)


def _grad_norm(f: np.ndarray, r: float) -> float:
    """Entrywise ``||grad f||_{L^r}``."""
    acc = 0.0
    for axis in range(f.ndim):
        D = np.abs(partial(f, axis))
        acc = max(acc, float(D.max())) if np.isinf(r) else acc + float(np.mean(D ** r))
    return acc if np.isinf(r) else acc ** (1.0 / r)


def _lp_sum(terms: Sequence[float], r: float) -> float:
    """``(sum t^r)^{1/r}`` (max for r = inf): the norm of a sum of disjointly supported pieces."""
    terms = [float(t) for t in terms]
    if not terms:
        return 0.0
    if np.isinf(r):
        return max(terms)
    return float(sum(t ** r for t in terms) ** (1.0 / r))


def substituted_slice_norms(rho0: np.ndarray, u0: Optional[np.ndarray], R0: np.ndarray,
                            dR0: Optional[np.ndarray], psi: float, dpsi: float, eta: float,
                            blocks, lam: int, chi, config, cells: CellOperatorNorms,
                            operator: Optional[DiffOperator] = None) -> Dict[str, float]:
    """Step quantities at one time sample from the product structure.

    Returns the distances (``rho``, ``u``, ``u_sobolev``), the five part norms
    and ``R1_bound`` (their sum, a triangle-inequality bound for ``||R1||_1``).
    """
    from .torus_field import ck_norm

    d = R0.shape[0]
    pr, pu, pt = config.rho_exponent, config.u_exponent, config.p_tilde
    pc = 1.0 / (1.0 - 1.0 / pr) if pr > 1 else np.inf  # Hoelder partner of pr
    out = {name: 0.0 for name in PART_NAMES}
    theta_pieces, w_pieces, w1_pieces = [], [], []
    theta_c = 0.0
    w_c = {pu: 0.0, pt: 0.0, 1.0: 0.0, pc: 0.0}
    sob = 0.0
    lin = 0.0
    quadr = 0.0
    for j, block in enumerate(blocks):
        Rj = R0[j]
        chi_j = chi(Rj)
        if not np.any(chi_j):
            continue
        A = eta * psi * chi.amplitude(Rj, pr, signed=True)
        B = psi * chi.amplitude(Rj, pu, signed=False) / eta
        nT = lambda r: block_norm_cached(block, 0, r, "density")
        nW = lambda r: block_norm_cached(block, 0, r, "field")
        theta_pieces.append(lp_norm(A, pr) * nT(pr))
        w_pieces.append(lp_norm(B, pu) * nW(pu))
        w1_pieces.append(lp_norm(B, 1) * nW(1.0))
        if np.any(A):
            theta_c += np.sqrt(d) * ck_norm(A, 1) * nT(1.0) / lam
        dB = partial(B, j)
        for r in w_c:
            w_c[r] += lp_norm(dB, r) * cells.get("antidiv_field", r) / lam
        # W^{1,pt}: w = B W_lam / eta, grad w = grad B W_lam + lam B (grad W)_lam
        sob += lp_norm(B, pt) * nW(pt) + _grad_norm(B, pt) * nW(pt)
        sob += lam * lp_norm(B, pt) * block_norm_cached(block, 1, pt, "field")
        sob += lp_norm(dB, pt) * cells.get("grad_antidiv_field", pt)
        # R_quadr: lam^-1 ||d_j F2_j|| ||grad Delta^-1 (P - 1)||
        F2 = psi ** 2 * chi_j ** 2 * Rj
        quadr += lp_norm(partial(F2, j), 1) * cells.get("antidiv_product", 1.0) / lam
        # R_linear
        dA = eta * dpsi * chi.amplitude(Rj, pr, signed=True)
        if dR0 is not None and psi != 0.0:
            dA = dA + eta * psi * chi.amplitude_derivative(Rj, pr, signed=True) * dR0[j]
        lin += lp_norm(dA, 1) * cells.get("antidiv_density", 1.0) / lam
        lin += lp_norm(rho0 * B, 1) * nW(1.0)
        if u0 is not None:
            lin += lp_norm(A * np.sqrt(np.sum(u0 ** 2, axis=0)), 1) * nT(1.0)
        if operator is not None:
            k = operator.order
            coeff = sum(abs(c) for _, c in operator.terms)
            if k == 2 and operator.terms == DiffOperator.laplacian(d).terms:
                lin += _grad_norm(A, 1.0) * nT(1.0) + lam * lp_norm(A, 1) * block_norm_cached(
                    block, 1, 1.0, "density")
            else:
                lin += coeff * lam ** (k - 1) * lp_norm(A, 1) * block_norm_cached(
                    block, k - 1, 1.0, "density")
    theta_n = _lp_sum(theta_pieces, pr)
    w_n = _lp_sum(w_pieces, pu)
    out["rho"] = theta_n + theta_c
    out["u"] = w_n + w_c[pu]
    out["u_sobolev"] = sob + w_c[pt]
    out["R_quadr"] = quadr
    out["R_chi"] = lp_norm(np.stack([psi ** 2 * (chi(R0[j]) ** 2 - 1.0) * R0[j]
                                     for j in range(d)]), 1)
    out["R_psi"] = abs(psi ** 2 - 1.0) * lp_norm(R0, 1)
    out["R_linear"] = lin
    u0_n = 0.0 if u0 is None else lp_norm(u0, 1)
    out["R_corr"] = (float(np.max(np.abs(rho0))) * w_c[1.0] + theta_n * w_c[pc]
                     + theta_c * (_lp_sum(w1_pieces, 1.0) + w_c[1.0] + u0_n))
    out["R1_bound"] = sum(out[name] for name in PART_NAMES)
    return out


_BLOCK_NORMS: Dict[tuple, float] = {}


def block_norm_cached(block, k: int, r: float, kind: str) -> float:
    from .mikado import block_norm

    cfg = block.config
    key = (block.j, block.mu, cfg.d, cfg.a, cfg.b, id(block.profile), k, float(r), kind)
    if key not in _BLOCK_NORMS:
        _BLOCK_NORMS[key] = block_norm(block, k, r, kind)
    return _BLOCK_NORMS[key]
