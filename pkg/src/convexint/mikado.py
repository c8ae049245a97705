"""Mikado densities and fields, and the choice of their concentration exponents.

The profile is ``Phi(y) = c * b'(y_1) * b(y_2) * ... * b(y_{d-1})`` where ``b`` is a
C^infinity bump supported in ``[delta0, 1 - delta0]``.  Because ``Phi`` is a
tensor product, every partial derivative of ``Phi`` is again a tensor product
of 1-D functions.  The norm table and the grid samples of a block are therefore
built from 1-D pieces, which keeps all of them exact and cheap in any dimension.

Derivative norms use the entrywise convention
``|D^k f|_r = (sum over ordered index tuples |d_{i1..ik} f|^r)^{1/r}`` (max over
entries for ``r = inf``), which makes ``||D^k f||_{L^r}`` separable.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, optimize

from .errors import (
    ConcentrationTooSmall,
    DimensionTooSmall,
    InadmissibleExponents,
    InvalidExponent,
)
from .torus_field import GridSpec

VARIANTS = ("transport", "strong", "diffusion", "higher_order")
DELTA0 = 0.05
K_MAX = 4


# ---------------------------------------------------------------------------
# 1-D bump and its derivatives

def _bump_derivatives(t: np.ndarray, n_max: int) -> np.ndarray:
    """``beta^(n)(t)`` for n = 0..n_max, with ``beta = exp(-1/(t(1-t)))`` on (0,1).

    Uses ``beta' = -s' beta`` with ``s = 1/t + 1/(1-t)`` and Leibniz's rule
    ``beta^(n+1) = -sum_k C(n,k) s^(k+1) beta^(n-k)``.
    """
    t = np.asarray(t, dtype=float)
    out = np.zeros((n_max + 1,) + t.shape)
    inside = (t > 0.0) & (t < 1.0)
    ti = t[inside]
    s = 1.0 / ti + 1.0 / (1.0 - ti)
    live = s < 700.0
    ti = ti[live]
    ds = [None] + [
        ((-1) ** m) * math.factorial(m) / ti ** (m + 1) + math.factorial(m) / (1.0 - ti) ** (m + 1)
        for m in range(1, n_max + 1)
    ]
    vals = [np.exp(-(1.0 / ti + 1.0 / (1.0 - ti)))]
    for n in range(n_max):
        acc = np.zeros_like(ti)
        for k in range(n + 1):
            acc -= math.comb(n, k) * ds[k + 1] * vals[n - k]
        vals.append(acc)
    idx = np.flatnonzero(inside.ravel())[live]
    flat = out.reshape(n_max + 1, -1)
    for n in range(n_max + 1):
        flat[n, idx] = vals[n]
    return out


def _rescaled_bump(delta0: float, n: int, y: np.ndarray) -> np.ndarray:
    """n-th derivative of ``b(y) = beta((y - delta0)/(1 - 2 delta0))``."""
    w = 1.0 - 2.0 * delta0
    t = (np.asarray(y, dtype=float) - delta0) / w
    return _bump_derivatives(t, n)[n] / w ** n


def _bump_at(delta0: float, n: int, s: float) -> float:
    return float(_rescaled_bump(delta0, n, np.array([s]))[0])


# The 1-D integrals and sups below do not depend on the dimension; caching
# them makes a profile for a new d cost only a few products.

@lru_cache(maxsize=None)
def _bump_zeros(delta0: float, n: int) -> tuple:
    y = np.linspace(delta0, 1.0 - delta0, 4001)[1:-1]
    v = _rescaled_bump(delta0, n, y)
    roots = []
    for i in np.flatnonzero(np.sign(v[:-1]) * np.sign(v[1:]) < 0):
        roots.append(optimize.brentq(lambda s: _bump_at(delta0, n, s), y[i], y[i + 1], xtol=1e-15))
    return tuple(roots)


@lru_cache(maxsize=None)
def _bump_lp(delta0: float, n: int, r: float) -> float:
    """``int |b^(n)|^r`` over the support, split at the sign changes."""
    pts = list(_bump_zeros(delta0, n)) or None
    val, _ = integrate.quad(lambda s: abs(_bump_at(delta0, n, s)) ** r, delta0, 1.0 - delta0,
                            points=pts, limit=400, epsabs=0.0, epsrel=1e-13)
    return val


@lru_cache(maxsize=None)
def _bump_sup(delta0: float, n: int) -> float:
    y = np.linspace(delta0, 1.0 - delta0, 20001)
    v = np.abs(_rescaled_bump(delta0, n, y))
    i = int(np.argmax(v))
    a, b = y[max(i - 1, 0)], y[min(i + 1, y.size - 1)]
    res = optimize.minimize_scalar(lambda s: -abs(_bump_at(delta0, n, s)), bounds=(a, b),
                                   method="bounded", options={"xatol": 1e-14})
    return max(float(v[i]), -float(res.fun))


@dataclass
class BumpProfile:
    """The Mikado profile Phi on R^{d-1} together with its norm table."""

    d: int
    delta0: float = DELTA0
    c: float = field(init=False)
    _norms: dict = field(init=False, default_factory=dict, repr=False)

    def __post_init__(self):
        if self.d < 3:
            raise DimensionTooSmall(f"the construction needs d >= 3, got d={self.d}")
        if not 0.0 < self.delta0 < 0.5:
            raise ValueError("delta0 must lie in (0, 1/2)")
        self.c = 1.0
        i1 = self._bump_integral(1, 2.0)
        i0 = self._bump_integral(0, 2.0)
        self.c = 1.0 / math.sqrt(i1 * i0 ** (self.d - 2))
        for k in range(3):
            for r in (1.0, 2.0, math.inf):
                self.norm(k, r)

    # -- 1-D pieces -----------------------------------------------------------
    @property
    def support(self) -> tuple:
        return (self.delta0, 1.0 - self.delta0)

    def bump(self, n: int, y: np.ndarray) -> np.ndarray:
        """n-th derivative of the rescaled bump ``b(y) = beta((y - delta0)/(1 - 2 delta0))``."""
        return _rescaled_bump(self.delta0, n, y)

    def factor(self, position: int, n: int, y: np.ndarray) -> np.ndarray:
        """The 1-D factor of ``d^n Phi`` along the ``position``-th argument of Phi."""
        if position == 0:
            return self.c * self.bump(n + 1, y)
        return self.bump(n, y)

    def _bump_integral(self, n: int, r: float) -> float:
        """``int |b^(n)|^r`` over the support."""
        return _bump_lp(self.delta0, n, r)

    def _factor_sup(self, position: int, n: int) -> float:
        if position == 0:
            return self.c * _bump_sup(self.delta0, n + 1)
        return _bump_sup(self.delta0, n)

    # -- Phi and its norms ----------------------------------------------------
    def evaluate(self, y: np.ndarray, alpha: Optional[Sequence[int]] = None) -> np.ndarray:
        """``d^alpha Phi`` at points ``y`` of shape ``(..., d-1)``."""
        y = np.asarray(y, dtype=float)
        alpha = alpha or (0,) * (self.d - 1)
        out = np.ones(y.shape[:-1])
        for q in range(self.d - 1):
            out = out * self.factor(q, alpha[q], y[..., q])
        return out

    def _multi_indices(self, k: int):
        for alpha in itertools.product(range(k + 1), repeat=self.d - 1):
            if sum(alpha) == k:
                weight = math.factorial(k)
                for a in alpha:
                    weight //= math.factorial(a)
                yield alpha, weight

    def norm(self, k: int, r: float) -> float:
        """``||D^k Phi||_{L^r(R^{d-1})}`` (entrywise convention), tabulated."""
        r = float(r)
        if r < 1.0:
            raise InvalidExponent(f"exponent must lie in [1, inf], got {r}")
        if k > K_MAX:
            raise ValueError(f"derivative order above the table maximum {K_MAX}")
        key = (k, r)
        if key not in self._norms:
            if math.isinf(r):
                self._norms[key] = max(
                    math.prod(self._factor_sup(q, alpha[q]) for q in range(self.d - 1))
                    for alpha, _ in self._multi_indices(k)
                )
            else:
                total = 0.0
                for alpha, weight in self._multi_indices(k):
                    total += weight * math.prod(
                        self._factor_integral(q, alpha[q], r) for q in range(self.d - 1)
                    )
                self._norms[key] = total ** (1.0 / r)
        return self._norms[key]

    def _factor_integral(self, position: int, n: int, r: float) -> float:
        if position == 0:
            return self.c ** r * _bump_lp(self.delta0, n + 1, r)
        return _bump_lp(self.delta0, n, r)

    @property
    def table(self) -> dict:
        """Tabulated ``{(k, r): ||D^k Phi||_{L^r}}``."""
        return dict(self._norms)

    def integral(self) -> float:
        """``int Phi`` (zero by the derivative structure)."""
        lo, hi = self.support
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            first, _ = integrate.quad(lambda s: float(self.factor(0, 0, np.array([s]))[0]),
                                      lo, hi, limit=200, epsabs=1e-16)
        rest, _ = integrate.quad(lambda s: float(self.bump(0, np.array([s]))[0]), lo, hi, limit=200)
        return first * rest ** (self.d - 2)

    def square_integral(self) -> float:
        """``int Phi^2``, from the tabulated L^2 norm."""
        return self.norm(0, 2.0) ** 2


@lru_cache(maxsize=16)
def build_profile(d: int, delta0: float = DELTA0) -> BumpProfile:
    """The Mikado profile for dimension ``d`` (cached; profiles are immutable in use)."""
    return BumpProfile(d, delta0)


# ---------------------------------------------------------------------------
# exponents

def _conj(p: float) -> float:
    return math.inf if p == 1.0 else p / (p - 1.0)


def _inv(p: float) -> float:
    return 0.0 if math.isinf(p) else 1.0 / p


@dataclass(frozen=True)
class ExponentConfig:
    """Exponents of one theorem variant and the derived concentration rates."""

    d: int
    p: float
    p_tilde: float
    m: int
    m_tilde: int
    k: int
    variant: str
    a: float
    b: float
    gamma: float
    gammas: dict
    s: float
    s_prime: float
    M: float

    @property
    def p_prime(self) -> float:
        return _conj(self.p)

    @property
    def rho_exponent(self) -> float:
        """Integrability exponent of the density perturbation (p, or s)."""
        return self.s if self.variant in ("strong", "higher_order") else self.p

    @property
    def u_exponent(self) -> float:
        """Integrability exponent of the velocity perturbation (p', or s')."""
        return self.s_prime if self.variant in ("strong", "higher_order") else self.p_prime

    def as_dict(self) -> dict:
        out = {
            "d": self.d, "p": self.p, "p_tilde": self.p_tilde, "m": self.m,
            "m_tilde": self.m_tilde, "k": self.k, "variant": self.variant,
            "a": self.a, "b": self.b, "gamma": self.gamma, "s": self.s,
            "s_prime": self.s_prime, "M": self.M,
        }
        out.update({name: val for name, val in self.gammas.items()})
        return out


def admissibility_conditions(d, p, p_tilde, m=0, m_tilde=0, k=0, variant="transport") -> dict:
    """The inequalities a variant requires, evaluated directly: ``{name: holds}``."""
    ip, ipt = _inv(p), _inv(p_tilde)
    conds = {}
    if variant in ("transport", "diffusion"):
        conds["p in (1, inf)"] = 1.0 < p < math.inf
        conds["p_tilde in [1, inf)"] = 1.0 <= p_tilde < math.inf
        conds["1/p + 1/p~ > 1 + 1/(d-1)"] = ip + ipt > 1.0 + 1.0 / (d - 1)
        if variant == "diffusion":
            conds["p' < d-1"] = _conj(p) < d - 1
    else:
        conds["p in [1, inf)"] = 1.0 <= p < math.inf
        conds["p_tilde in [1, inf)"] = 1.0 <= p_tilde < math.inf
        conds["m, m~ >= 0"] = m >= 0 and m_tilde >= 0
        conds["1/p + 1/p~ > 1 + (m + m~)/(d-1)"] = ip + ipt > 1.0 + (m + m_tilde) / (d - 1)
        if variant == "higher_order":
            conds["k >= 2"] = k >= 2
            conds["p~ < (d-1)/(m~ + k - 1)"] = (
                k >= 2 and p_tilde < (d - 1) / (m_tilde + k - 1)
            )
    return conds


def choose_exponents(
    d: int,
    p: float,
    p_tilde: float,
    m: int = 0,
    m_tilde: int = 0,
    k: int = 0,
    variant: str = "transport",
    profile: Optional[BumpProfile] = None,
) -> ExponentConfig:
    """Concentration exponents ``a, b`` and rates ``gamma`` for a theorem variant.

    * transport / diffusion: ``a = (d-1)/p``, ``b = (d-1)/p'``;
    * strong / higher_order: ``a`` is the midpoint of the open interval of
      admissible values, ``s = (d-1)/a`` and ``s' = (d-1)/b``.
    """
    variant = variant.replace("-", "_")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if d < 3:
        raise DimensionTooSmall(f"the construction needs d >= 3, got d={d}")
    if p < 1.0 or p_tilde < 1.0:
        raise InvalidExponent(f"exponents must be >= 1, got p={p}, p~={p_tilde}")
    conds = admissibility_conditions(d, p, p_tilde, m, m_tilde, k, variant)
    for name, ok in conds.items():
        if not ok:
            raise InadmissibleExponents(
                f"{variant} variant: inequality '{name}' fails for "
                f"d={d}, p={p}, p~={p_tilde}, m={m}, m~={m_tilde}, k={k}",
                inequality=name,
            )
    ip, ipt = _inv(p), _inv(p_tilde)
    pp = _conj(p)
    gammas = {}
    if variant in ("transport", "diffusion"):
        a = (d - 1) * ip
        b = (d - 1) * _inv(pp)
        gammas["gamma1"] = (d - 1) * (1.0 - ip)
        gammas["gamma2"] = (d - 1) * (1.0 - _inv(pp))
        gammas["gamma3"] = (d - 1) * (ip + ipt - 1.0 - 1.0 / (d - 1))
        if variant == "diffusion":
            gammas["gamma4"] = (d - 1) * _inv(pp) - 1.0
        s, s_prime = p, pp
    else:
        lo = max(0.0, (d - 1) * (1.0 - ipt) + m_tilde)
        hi = min(d - 1.0, (d - 1) * ip - m)
        if variant == "higher_order":
            hi = min(hi, d - float(k))
        a = 0.5 * (lo + hi)
        b = (d - 1) - a
        gammas["gamma_rho"] = (d - 1) * ip - a - m
        gammas["gamma_u"] = (d - 1) * ipt - b - m_tilde
        gammas["gamma_L1_rho"] = (d - 1) - a
        gammas["gamma_L1_u"] = (d - 1) - b
        if variant == "higher_order":
            gammas["gamma_k"] = d - k - a
        s, s_prime = (d - 1) / a, (d - 1) / b
    gamma = min(gammas.values())
    if not gamma > 0.0:
        raise InadmissibleExponents(f"no positive rate: gammas={gammas}", inequality="gamma > 0")
    profile = profile or build_profile(d)
    sup0 = profile.norm(0, math.inf)
    M = 2 * d * max(sup0, sup0 ** 2, profile.norm(1, math.inf))
    return ExponentConfig(d, float(p), float(p_tilde), int(m), int(m_tilde), int(k), variant,
                          a, b, gamma, gammas, s, s_prime, M)


# ---------------------------------------------------------------------------
# blocks

@dataclass(frozen=True)
class MikadoBlock:
    """One Mikado pair ``(Theta^j_mu, W^j_mu)`` as an analytic object.

    ``j`` is 1-based.  ``Theta(x) = mu^a Phi(mu (x_{!=j} - c_j))`` and
    ``W(x) = mu^b Phi(mu (x_{!=j} - c_j)) e_j``, extended periodically.
    """

    j: int
    mu: float
    config: ExponentConfig
    profile: BumpProfile

    @property
    def d(self) -> int:
        return self.config.d

    @property
    def center(self) -> np.ndarray:
        return np.full(self.d, (2 * self.j - 1) / (2 * self.d))

    @property
    def axis(self) -> int:
        """0-based index of the pipe direction."""
        return self.j - 1

    @property
    def transverse_axes(self) -> list:
        return [i for i in range(self.d) if i != self.axis]

    def amplitude(self, kind: str = "density") -> float:
        return self.mu ** (self.config.a if kind == "density" else self.config.b)

    def factors(self, N: int, lam: int = 1, alpha: Optional[Sequence[int]] = None,
                kind: str = "density") -> list:
        """1-D factors whose tensor product samples ``d^alpha X(lam x)`` on an N-grid.

        ``X`` is Theta (``kind='density'``), the nonzero component of W
        (``'field'``) or their product ``Theta W_j`` (``'product'``, no
        derivatives).  ``alpha`` is a full d-dimensional multi-index; the
        factor along the pipe axis has length 1.
        """
        alpha = tuple(alpha) if alpha is not None else (0,) * self.d
        if alpha[self.axis]:
            return [np.zeros(1) for _ in range(self.d)]
        c = (2 * self.j - 1) / (2 * self.d)
        x = np.arange(N) / N
        y = self.mu * np.mod(lam * x - c, 1.0)
        out = []
        for q, i in enumerate(self.transverse_axes):
            n = alpha[i]
            if kind == "product":
                f = self.profile.factor(q, 0, y) ** 2
            else:
                f = self.profile.factor(q, n, y) * (lam * self.mu) ** n
            out.append(f)
        if kind == "product":
            amp = self.mu ** (self.d - 1)
        else:
            amp = self.amplitude(kind)
        out[0] = out[0] * amp
        out.insert(self.axis, np.ones(1))
        return out

    def sample(self, N: int, lam: int = 1, alpha: Optional[Sequence[int]] = None,
               kind: str = "density") -> np.ndarray:
        """Broadcast samples (length 1 along the pipe axis) of the block at ``lam x``."""
        out = None
        for axis, f in enumerate(self.factors(N, lam, alpha, kind)):
            shape = [1] * self.d
            shape[axis] = f.size
            f = f.reshape(shape)
            out = f if out is None else out * f
        return out

    def field_sample(self, N: int, lam: int = 1) -> np.ndarray:
        """Broadcast samples of the vector field ``W(lam x)`` (all d components)."""
        w = self.sample(N, lam, kind="field")
        out = np.zeros((self.d,) + w.shape)
        out[self.axis] = w
        return out

    def evaluate(self, x: np.ndarray, kind: str = "density") -> np.ndarray:
        """Closed-form values at points ``x`` of shape ``(..., d)``."""
        x = np.asarray(x, dtype=float)
        y = self.mu * np.mod(x[..., self.transverse_axes] - (2 * self.j - 1) / (2 * self.d), 1.0)
        return self.amplitude(kind) * self.profile.evaluate(y)

    def norm(self, k: int, r: float, kind: str = "density") -> float:
        return block_norm(self, k, r, kind)


def build_block(j: int, mu: float, config: ExponentConfig,
                profile: Optional[BumpProfile] = None) -> MikadoBlock:
    """Mikado block in direction ``j`` (1-based) with concentration ``mu > 2d``."""
    d = config.d
    if not 1 <= j <= d:
        raise ValueError(f"direction index must lie in 1..{d}, got {j}")
    if not mu > 2 * d:
        raise ConcentrationTooSmall(f"mu={mu} must exceed 2d={2 * d} for disjoint supports")
    profile = profile or build_profile(d)
    if profile.d != d:
        raise ValueError("profile dimension does not match the exponent config")
    return MikadoBlock(j, float(mu), config, profile)


def build_blocks(mu: float, config: ExponentConfig,
                 profile: Optional[BumpProfile] = None) -> list:
    return [build_block(j, mu, config, profile) for j in range(1, config.d + 1)]


def block_norm(block: MikadoBlock, k: int, r: float, kind: str = "density") -> float:
    """``||D^k X||_{L^r(T^d)}`` from the scaling law ``mu^{e + k - (d-1)/r} ||D^k Phi||_r``.

    ``e`` is ``a`` for the density and ``b`` for the field.
    """
    r = float(r)
    e = block.config.a if kind == "density" else block.config.b
    rate = e + k - (0.0 if math.isinf(r) else (block.d - 1) / r)
    return block.mu ** rate * block.profile.norm(k, r)


def cell_resolution(mu: float, points_per_pipe: int = 32, minimum: int = 64) -> int:
    """Power-of-two cell grid size resolving a pipe of width ``1/mu``."""
    n = minimum
    while n < points_per_pipe * mu:
        n *= 2
    return n


def grid_for(d: int, N: int) -> GridSpec:
    return GridSpec(d, N)
