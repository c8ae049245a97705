"""Pseudo-spectral calculus on the torus.

All operators act on one time slice.  Derivatives use the Fourier symbol
``2 pi i k``; the Nyquist mode (present for even N) is given derivative
zero, since its sampled derivative vanishes on the grid.  The Laplacian symbol
is defined as the sum of squared derivative symbols, so that on the grid

    divergence(gradient(f)) == laplacian(f)                       (exactly)
    divergence(std_antidivergence(g)) == g - mean(g)              (for g in the range of div)

hold to rounding error.  This discrete consistency is what lets the
construction reproduce its algebraic identities (divergence-free velocities,
the defect equation) at grid level, independently of resolution.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import fft as sfft

from .errors import NonZeroMean, ResolutionTooCoarse
from .torus_field import FieldLike, active_frequency, as_array, is_vector, sample_rescaled

MEAN_TOL = 1e-10

_workers = 1


def set_workers(n: int) -> None:
    """Thread count used by the FFT backend."""
    global _workers
    _workers = max(1, int(n))


def _rfft(f: np.ndarray) -> np.ndarray:
    return sfft.rfftn(f, axes=tuple(range(f.ndim)), workers=_workers)


def _irfft(c: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    return sfft.irfftn(c, s=tuple(shape), axes=tuple(range(len(shape))), workers=_workers)


@lru_cache(maxsize=64)
def _symbols(shape: tuple):
    """Derivative symbols per axis and the Laplacian symbol, rfft layout."""
    ndim = len(shape)
    derivs = []
    lap = 0.0
    for axis, n in enumerate(shape):
        if axis == ndim - 1:
            k = np.fft.rfftfreq(n, 1.0 / n)
        else:
            k = np.fft.fftfreq(n, 1.0 / n)
        k = k.copy()
        if n % 2 == 0:
            k[np.abs(k) == n // 2] = 0.0
        view = [1] * ndim
        view[axis] = k.size
        kk = (2.0 * np.pi * k).reshape(view)
        derivs.append(1j * kk)
        lap = lap - kk * kk
    lap = np.asarray(lap)
    with np.errstate(divide="ignore"):
        inv_lap = np.where(lap != 0.0, 1.0 / np.where(lap != 0.0, lap, 1.0), 0.0)
    return tuple(derivs), lap, inv_lap


def _check_mean(g: np.ndarray, mean_tol: float, what: str = "input") -> float:
    m = float(np.mean(g))
    scale = float(np.sqrt(np.mean(g * g)))
    if abs(m) > mean_tol * max(scale, 1e-300):
        raise NonZeroMean(f"{what} has mean {m:.3e} (L2 norm {scale:.3e})")
    return m


def partial(f: FieldLike, axis: int, order: int = 1) -> np.ndarray:
    """Spectral partial derivative of a scalar slice along ``axis``."""
    f = as_array(f)
    if f.shape[axis] == 1:
        return np.zeros_like(f, dtype=float)
    derivs, _, _ = _symbols(f.shape)
    return _irfft(_rfft(f) * derivs[axis] ** order, f.shape)


def gradient(f: FieldLike) -> np.ndarray:
    """Spectral gradient of a scalar slice; components stacked on axis 0."""
    f = as_array(f)
    derivs, _, _ = _symbols(f.shape)
    c = _rfft(f)
    return np.stack([_irfft(c * k, f.shape) for k in derivs])


def divergence(v: FieldLike) -> np.ndarray:
    """Spectral divergence of a vector slice (zero mean by construction)."""
    v = as_array(v)
    shape = v.shape[1:]
    derivs, _, _ = _symbols(shape)
    acc = 0.0
    for comp, k in zip(v, derivs):
        if comp.shape != shape:
            comp = np.broadcast_to(comp, shape)
        acc = acc + _rfft(comp) * k
    return _irfft(acc, shape)


def jacobian(v: FieldLike) -> np.ndarray:
    """All first partials ``out[i, l] = d_i v_l`` of a vector slice."""
    v = as_array(v)
    return np.stack([gradient(c) for c in v], axis=1)


def laplacian(f: FieldLike) -> np.ndarray:
    f = as_array(f)
    _, lap, _ = _symbols(f.shape)
    return _irfft(_rfft(f) * lap, f.shape)


def inverse_laplacian(g: FieldLike, mean_tol: float = MEAN_TOL) -> np.ndarray:
    """Zero-mean solution h of ``laplacian(h) = g`` for zero-mean g."""
    g = as_array(g)
    _check_mean(g, mean_tol)
    _, _, inv = _symbols(g.shape)
    return _irfft(_rfft(g) * inv, g.shape)


def std_antidivergence(g: FieldLike, mean_tol: float = MEAN_TOL) -> np.ndarray:
    """The standard antidivergence ``grad inverse_laplacian(g)``."""
    g = as_array(g)
    _check_mean(g, mean_tol)
    return _std_antidiv(g)


def _std_antidiv(g: np.ndarray) -> np.ndarray:
    derivs, _, inv = _symbols(g.shape)
    c = _rfft(g) * inv
    out = np.empty((len(derivs),) + g.shape)
    for i, k in enumerate(derivs):
        out[i] = _irfft(c * k, g.shape)
    return out


def _pairs(f: np.ndarray, g: np.ndarray):
    if f.ndim == g.ndim and is_vector(f) and is_vector(g):
        if f.shape[0] != g.shape[0]:
            raise ValueError("vector f and g must have the same number of components")
        return list(zip(f, g))
    return [(f, g)]


def improved_antidivergence(
    f: FieldLike,
    g: FieldLike,
    lam: int,
    target: Optional[np.ndarray] = None,
    mean_tol: float = MEAN_TOL,
    strict: bool = True,
) -> np.ndarray:
    """Antidivergence of ``f * g_lam`` that gains a factor ``1/lam``.

    ``f`` lives on the output grid; ``g`` is given by samples on its own
    period cell (any resolution, length-1 axes allowed).  With
    ``V = lam^-1 (grad Delta^-1 g)(lam x)``, computed on g's cell and composed
    with ``lam x`` exactly, the output is

        u = f V + grad Delta^-1 (T - div(f V)),   T = f g_lam,

    which has ``div u = T`` on the grid.  In the continuum
    ``div(f V) = grad f . V + f g_lam``, so ``u`` coincides with the classical
    ``f V - grad Delta^-1(grad f . V)``.  When ``target`` is given it replaces
    ``T``; it must itself be a grid divergence (used when ``f g_lam`` is known
    in divergence form).  Vector ``f, g`` are paired componentwise (dot
    product).  ``strict`` enforces that the output grid resolves ``g_lam``.
    """
    f = as_array(f)
    g = as_array(g)
    lam = int(lam)
    if lam < 1:
        raise ValueError("lam must be a positive integer")
    pairs = _pairs(f, g)
    shape = pairs[0][0].shape
    n_out = max(shape)
    fV = np.zeros((len(shape),) + shape)
    T = np.zeros(shape) if target is None else np.asarray(target, dtype=float)
    for fi, gi in pairs:
        gm = _check_mean(gi, mean_tol, "cell profile g")
        if strict:
            kmax = active_frequency(gi, 1e-10)
            if 2 * lam * kmax >= n_out:
                raise ResolutionTooCoarse(
                    f"lam * k_max = {lam * kmax} not below Nyquist {n_out // 2}"
                )
        H = _std_antidiv(gi - gm)
        for comp in range(len(shape)):
            fV[comp] += fi * sample_rescaled(H[comp], lam, shape) / lam
        if target is None:
            T = T + fi * sample_rescaled(gi - gm, lam, shape)
    _check_mean(T, mean_tol, "f * g_lam")
    rhs = T - np.mean(T) - divergence(fV)
    fV += _std_antidiv(rhs)
    return fV
