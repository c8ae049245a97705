"""Periodic fields on the flat torus T^d = [0, 1)^d and their norms.

Fields are stored as plain numpy arrays on a uniform ``N^d`` grid:

* a scalar slice has shape ``(N,) * d``;
* a vector slice has shape ``(d,) + (N,) * d`` (component axis first);
* a time-dependent field adds a leading time axis of length ``n_t``.

Any spatial axis may have length 1, meaning the field is constant along that
axis.  Such *broadcast* arrays are valid everywhere a full array is: grid
averages over a broadcast array coincide with averages over the full grid, and
the spectral operators treat a length-1 axis as carrying only the zero mode.
Mikado blocks exploit this, since they are constant along their own direction.

The :class:`ScalarField` and :class:`VectorField` containers pair an array with
its :class:`GridSpec` (and optionally a closed-form evaluator) for I/O and for
callers that want the grid carried along; the numerical routines accept either
containers or bare arrays.
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidExponent, ResolutionTooCoarse

MAGIC = b"TORF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s5I")


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on T^d with ``N`` points per axis and ``n_t`` time samples.

    ``sizes`` optionally reduces individual axes (each 1 or a power of two in
    [8, N]); fields that vary slowly along an axis can then be stored coarsely
    there.  Sizes 2 and 4 are excluded so that scalar and vector slices stay
    distinguishable by shape (see ``is_vector``).
    """

    d: int
    N: int
    n_t: int = 2
    sizes: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.d < 2:
            raise ValueError(f"dimension must be >= 2, got {self.d}")
        if self.N < 8 or self.N & (self.N - 1):
            raise ValueError(f"N must be a power of two >= 8, got {self.N}")
        if self.n_t < 2:
            raise ValueError(f"n_t must be >= 2, got {self.n_t}")
        if self.sizes is not None:
            sizes = tuple(int(n) for n in self.sizes)
            if len(sizes) != self.d or any(
                    n < 1 or n > self.N or n & (n - 1) or 1 < n < 8 for n in sizes):
                raise ValueError(f"sizes must be {self.d} values in {{1}} or powers of two "
                                 f"in [8, N], got {self.sizes}")
            object.__setattr__(self, "sizes", None if set(sizes) == {self.N} else sizes)

    @property
    def shape(self) -> tuple:
        return self.sizes if self.sizes is not None else (self.N,) * self.d

    @property
    def vector_shape(self) -> tuple:
        return (self.d,) + self.shape

    @property
    def is_cubic(self) -> bool:
        return self.sizes is None

    @property
    def reduced_axes(self) -> tuple:
        return tuple(i for i, n in enumerate(self.shape) if n < self.N)

    @property
    def h(self) -> float:
        return 1.0 / self.N

    def axis_points(self, axis: int = 0) -> np.ndarray:
        """The 1-D grid ``i / n`` along ``axis``."""
        n = self.shape[axis]
        return np.arange(n) / n

    def coords(self) -> list:
        """Sparse (open-mesh) coordinate arrays, one per axis."""
        out = []
        for axis in range(self.d):
            shape = [1] * self.d
            shape[axis] = self.shape[axis]
            out.append(self.axis_points(axis).reshape(shape))
        return out

    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_t)

    def with_time(self, n_t: int) -> "GridSpec":
        return GridSpec(self.d, self.N, n_t, self.sizes)


@dataclass
class ScalarField:
    """Samples of a scalar function, optionally with a closed-form evaluator.

    ``evaluator`` maps a list of ``d`` broadcastable coordinate arrays to values.
    """

    grid: GridSpec
    values: np.ndarray
    evaluator: Optional[Callable] = field(default=None, repr=False)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    @classmethod
    def from_function(cls, func: Callable, grid: GridSpec) -> "ScalarField":
        values = np.broadcast_to(func(grid.coords()), grid.shape).astype(float)
        return cls(grid, values, func)


@dataclass
class VectorField:
    """Samples of a vector field; ``values`` has the component axis first."""

    grid: GridSpec
    values: np.ndarray
    evaluator: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        if self.values.shape[0] != self.grid.d:
            raise ValueError("vector field must have d components")

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    @property
    def components(self) -> list:
        return [ScalarField(self.grid, c) for c in self.values]


FieldLike = Union[np.ndarray, ScalarField, VectorField]


def as_array(f: FieldLike) -> np.ndarray:
    if isinstance(f, (ScalarField, VectorField)):
        return np.asarray(f.values)
    return np.asarray(f)


def is_vector(arr: np.ndarray) -> bool:
    """Whether ``arr`` is a vector slice (leading component axis of length d).

    A vector slice in dimension d has ``d + 1`` axes with ``shape[0] == d``.
    Scalars always have ``N >= 8`` or a broadcast length 1 on their first axis,
    so the rule is unambiguous for the grids used here.
    """
    return arr.ndim >= 3 and arr.shape[0] == arr.ndim - 1


def pointwise_magnitude(arr: np.ndarray) -> np.ndarray:
    """|f| for scalars, Euclidean magnitude for vectors."""
    if is_vector(arr):
        return np.sqrt(np.sum(arr * arr, axis=0))
    return np.abs(arr)


def _check_exponent(p: float) -> float:
    p = float(p)
    if not (p >= 1.0):
        raise InvalidExponent(f"exponent must lie in [1, inf], got {p}")
    return p


def lp_norm(f: FieldLike, p: float) -> float:
    """Grid-quadrature L^p norm of one time slice.

    Vector fields use the Euclidean pointwise magnitude.
    """
    p = _check_exponent(p)
    mag = pointwise_magnitude(as_array(f))
    if np.isinf(p):
        return float(np.max(mag))
    if p == 1.0:
        return float(np.mean(mag))
    scale = float(np.max(mag))
    if scale == 0.0:
        return 0.0
    return scale * float(np.mean((mag / scale) ** p)) ** (1.0 / p)


def separable_lp_norm(factors: Sequence[np.ndarray], p: float) -> float:
    """L^p norm of the tensor product of 1-D factors, by factorization.

    The grid average of ``prod_i f_i(x_i)`` over a tensor grid is the product
    of the 1-D averages, so this equals :func:`lp_norm` of the materialized
    product exactly while costing only ``O(sum N_i)``.
    """
    p = _check_exponent(p)
    if np.isinf(p):
        return float(np.prod([np.max(np.abs(f)) for f in factors]))
    return float(np.prod([np.mean(np.abs(f) ** p) for f in factors])) ** (1.0 / p)


def mean(f: FieldLike) -> float:
    """Grid average of a scalar slice."""
    return float(np.mean(as_array(f)))


def ck_norm(f: FieldLike, k: int, max_order: int = 6) -> float:
    """max over orders ``0..k`` of the sup of all spectral partial derivatives."""
    from .spectral_calculus import partial

    if k < 0 or k > max_order:
        raise ValueError(f"derivative order must lie in [0, {max_order}], got {k}")
    arr = as_array(f)
    best = float(np.max(np.abs(arr)))
    layer = [arr]
    for _ in range(k):
        nxt = []
        for g in layer:
            for axis in range(g.ndim):
                nxt.append(partial(g, axis))
        layer = nxt
        best = max(best, max(float(np.max(np.abs(g))) for g in layer))
    return best


def active_frequency(arr: np.ndarray, rel_tol: float = 1e-12) -> int:
    """Largest |k|_inf among Fourier modes above ``rel_tol`` times the peak."""
    coeffs = np.abs(np.fft.fftn(arr))
    peak = coeffs.max()
    if peak == 0.0:
        return 0
    active = coeffs > rel_tol * peak
    kmax = 0
    for axis, n in enumerate(arr.shape):
        k = np.abs(np.fft.fftfreq(n, 1.0 / n)).astype(int)
        shape = [1] * arr.ndim
        shape[axis] = n
        kk = np.broadcast_to(k.reshape(shape), arr.shape)
        if active.any():
            kmax = max(kmax, int(kk[active].max()))
    return kmax


def periodic_indices(n_in: int, n_out: int, lam: int) -> np.ndarray:
    """Indices into an ``n_in`` grid of the points ``lam * i / n_out mod 1``.

    Requires ``lam * n_in`` to be divisible by ``n_out`` so every sample point
    is a grid point of the input.
    """
    if (lam * n_in) % n_out:
        raise ValueError(
            f"points lam*i/{n_out} do not lie on a grid of size {n_in} (lam={lam})"
        )
    return (np.arange(n_out) * (lam * n_in // n_out)) % n_in


def sample_rescaled(arr: np.ndarray, lam: int, out_shape: Sequence[int]) -> np.ndarray:
    """Sample ``x -> g(lam x)`` on a grid of ``out_shape`` from samples of g.

    ``arr`` holds g on its own grid (length-1 axes mean "constant along this
    axis" and stay length 1).  When the sampling points fall between grid
    points of g, g is first refined by Fourier zero-padding along that axis.
    """
    out = arr
    for axis, n_out in enumerate(out_shape):
        n_in = out.shape[axis]
        if n_in == 1:
            continue
        if (lam * n_in) % n_out:
            target = n_in
            while (lam * target) % n_out:
                target *= 2
            out = fourier_refine(out, axis, target)
            n_in = target
        idx = periodic_indices(n_in, n_out, lam)
        out = np.take(out, idx, axis=axis)
    return out


def fourier_refine(arr: np.ndarray, axis: int, n_new: int) -> np.ndarray:
    """Trigonometric interpolation of real samples onto a finer grid along ``axis``."""
    n = arr.shape[axis]
    coeffs = np.fft.rfft(arr, axis=axis)
    if n % 2 == 0:
        nyq = [slice(None)] * arr.ndim
        nyq[axis] = n // 2
        coeffs[tuple(nyq)] *= 0.5
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (0, n_new // 2 + 1 - coeffs.shape[axis])
    coeffs = np.pad(coeffs, pad)
    return np.fft.irfft(coeffs, n=n_new, axis=axis) * (n_new / n)


def rescale(
    g: Union[FieldLike, Callable],
    lam: int,
    grid: Optional[GridSpec] = None,
    max_frequency: Optional[int] = None,
) -> np.ndarray:
    """Samples of ``g_lam(x) = g(lam x mod 1)``.

    ``g`` is either grid samples (output on the same grid unless ``grid`` is
    given) or a callable taking sparse coordinates (then ``grid`` is required).
    Raises :class:`ResolutionTooCoarse` unless ``N >= 4 lam k_max`` where
    ``k_max`` is the largest active frequency of g.
    """
    if int(lam) != lam or lam < 1:
        raise ValueError(f"lam must be a positive integer, got {lam}")
    lam = int(lam)
    if callable(g) and not isinstance(g, (np.ndarray, ScalarField, VectorField)):
        if grid is None:
            raise ValueError("a grid is required to rescale a callable")
        if max_frequency is not None and grid.N < 4 * lam * max_frequency:
            raise ResolutionTooCoarse(
                f"N={grid.N} < 4*lam*k_max = {4 * lam * max_frequency}"
            )
        x = [np.mod(lam * c, 1.0) for c in grid.coords()]
        return np.broadcast_to(g(x), grid.shape).astype(float)
    arr = as_array(g)
    n_out = grid.N if grid is not None else max(arr.shape)
    vec = is_vector(arr)
    if max_frequency is not None:
        kmax = max_frequency
    elif vec:
        kmax = max(active_frequency(c) for c in arr)
    else:
        kmax = active_frequency(arr)
    if n_out < 4 * lam * kmax:
        raise ResolutionTooCoarse(f"N={n_out} < 4*lam*k_max = {4 * lam * kmax}")
    spatial = arr.shape[1:] if vec else arr.shape
    out_shape = [n_out if n > 1 else 1 for n in spatial]
    if vec:
        return np.stack([sample_rescaled(c, lam, out_shape) for c in arr])
    return sample_rescaled(arr, lam, out_shape)


# ---------------------------------------------------------------------------
# time series storage

def alloc_series(shape: Sequence[int], workdir: Optional[str] = None,
                 in_memory_limit: int = 512 * 2**20) -> np.ndarray:
    """Zero-initialized float64 array, disk-backed when it would be large.

    Without a ``workdir`` the backing file is anonymous scratch: it is
    unlinked right after mapping, so the space is returned once the array is
    garbage collected.  Files in an explicit ``workdir`` are kept.
    """
    shape = tuple(int(s) for s in shape)
    nbytes = 8 * int(np.prod(shape))
    if nbytes <= in_memory_limit:
        return np.zeros(shape)
    scratch = workdir is None
    if scratch:
        workdir = os.environ.get("CONVEXINT_SCRATCH") or tempfile.gettempdir()
    os.makedirs(workdir, exist_ok=True)
    fd, path = tempfile.mkstemp(prefix="convexint-", suffix=".npy", dir=workdir)
    os.close(fd)
    arr = np.lib.format.open_memmap(path, mode="w+", dtype=np.float64, shape=shape)
    if scratch:
        os.unlink(path)
    return arr


def time_derivative(series: np.ndarray, dt: float, periodic: bool = False) -> np.ndarray:
    """d/dt along axis 0 of uniformly sampled slices.

    ``periodic=True`` uses spectral differentiation over the samples
    ``t_0 .. t_{n-2}`` (the last sample duplicates the first); otherwise
    fourth-order central differences with one-sided fourth-order stencils at
    the two ends.
    """
    n = series.shape[0]
    if periodic:
        m = n - 1
        coeffs = np.fft.rfft(np.asarray(series[:m]), axis=0)
        k = np.fft.rfftfreq(m, 1.0 / m)
        if m % 2 == 0:
            k[-1] = 0.0
        shape = (-1,) + (1,) * (series.ndim - 1)
        period = m * dt
        out = np.fft.irfft(coeffs * (2j * np.pi * k / period).reshape(shape), n=m, axis=0)
        return np.concatenate([out, out[:1]], axis=0)
    if n < 5:
        return np.gradient(np.asarray(series), dt, axis=0)
    out = np.empty(series.shape)
    s = series
    out[2:-2] = (s[:-4] - 8 * s[1:-3] + 8 * s[3:-1] - s[4:]) / (12 * dt)
    out[0] = (-25 * s[0] + 48 * s[1] - 36 * s[2] + 16 * s[3] - 3 * s[4]) / (12 * dt)
    out[1] = (-3 * s[0] - 10 * s[1] + 18 * s[2] - 6 * s[3] + s[4]) / (12 * dt)
    out[-1] = (25 * s[-1] - 48 * s[-2] + 36 * s[-3] - 16 * s[-4] + 3 * s[-5]) / (12 * dt)
    out[-2] = (3 * s[-1] + 10 * s[-2] - 18 * s[-3] + 6 * s[-4] - s[-5]) / (12 * dt)
    return out


_FD4 = {
    0: (0, (-25, 48, -36, 16, -3)),
    1: (-1, (-3, -10, 18, -6, 1)),
    2: (-2, (1, -8, 0, 8, -1)),
}


def time_derivative_at(series: np.ndarray, i: int, dt: float) -> np.ndarray:
    """d/dt of ``series`` at sample ``i`` only; the stencils of ``time_derivative``.

    Reads at most five slices, so it works on disk-backed series of any length.
    """
    n = series.shape[0]
    if n < 5:
        return np.asarray(time_derivative(np.asarray(series), dt)[i])
    if i < 0:
        i += n
    if 2 <= i < n - 2:
        offset, coeffs = _FD4[2]
        sign = 1.0
    elif i < 2:
        offset, coeffs = _FD4[i]
        sign = 1.0
    else:
        # mirror the forward stencils for the last two samples
        offset, coeffs = _FD4[n - 1 - i]
        sign = -1.0
    out = np.zeros(series.shape[1:])
    for m, c in enumerate(coeffs):
        if c:
            j = i + offset + m if sign > 0 else i - offset - m
            out += c * np.asarray(series[j])
    return sign * out / (12 * dt)


# ---------------------------------------------------------------------------
# binary dumps and CSV reports

def dump_fields(path: str, values: np.ndarray, grid: GridSpec,
                n_components: int = 1, n_t: int = 1) -> None:
    """Write a field in the little-endian ``TORF`` format.

    ``values`` must have ``n_t * n_components * N^d`` entries laid out as
    ``(n_t, n_components, N, ..., N)`` in row-major order; broadcast arrays
    are expanded first.  The format stores one N, so the grid must be cubic.
    """
    if not grid.is_cubic:
        raise ValueError("TORF dumps need a cubic grid (no reduced axes)")
    full = (n_t, n_components) + grid.shape
    arr = np.asarray(values, dtype="<f8")
    if arr.size == int(np.prod(full)):
        arr = arr.reshape(full)
    else:
        arr = np.broadcast_to(arr.reshape(_expand_shape(arr.shape, full)), full)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, grid.d, grid.N, n_components, n_t))
        for slab in arr:
            fh.write(np.ascontiguousarray(slab, dtype="<f8").tobytes())


def _expand_shape(shape, full):
    # Left-pad with singleton axes so a broadcast slice maps onto (n_t, n_comp, ...).
    return (1,) * (len(full) - len(shape)) + tuple(shape)


def load_fields(path: str):
    """Read a ``TORF`` dump; returns ``(values, grid, n_components, n_t)``."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        magic, version, d, N, n_comp, n_t = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a TORF file")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    shape = (n_t, n_comp) + (N,) * d
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: truncated payload")
    return data.reshape(shape).astype(float), GridSpec(d, N, max(n_t, 2)), n_comp, n_t


def write_norm_report(path: str, rows: Iterable[tuple]) -> None:
    """CSV with columns ``t, name, p, value`` (floats printed with repr)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "name", "p", "value"])
        for t, name, p, value in rows:
            writer.writerow([repr(float(t)), name, _fmt_p(p), repr(float(value))])


def read_norm_report(path: str) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [(float(r["t"]), r["name"], float(r["p"]), float(r["value"])) for r in reader]


def _fmt_p(p) -> str:
    p = float(p)
    return "inf" if np.isinf(p) else repr(p)
