"""B-spline bases on per-channel grids, the silu function, and grid construction.

Every basis vanishes outside the extended knot range, so a spline activation is
bounded and inputs far outside the grid pass through the silu term only. For
``k >= 1`` the bases are already zero at the outer knots, so this stays continuous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

DEFAULT_BLEND = 0.98
MARGIN = 0.01


@dataclass(frozen=True, eq=False)
class SplineGrid:
    """Knot vector for one channel.

    Attributes:
        base_knots: ``G + 1`` strictly ascending knots spanning the grid range.
        spline_order: Polynomial degree ``k``.
    """

    base_knots: np.ndarray
    spline_order: int

    def __post_init__(self):
        base = np.array(self.base_knots, dtype=np.float64).ravel()
        if base.size < 2:
            raise ValueError("a grid needs at least two base knots")
        if not np.all(np.isfinite(base)) or np.any(np.diff(base) <= 0):
            raise ValueError("base knots must be finite and strictly ascending")
        if self.spline_order < 0:
            raise ValueError("spline order must be >= 0")
        base.flags.writeable = False
        object.__setattr__(self, "base_knots", base)
        object.__setattr__(self, "spline_order", int(self.spline_order))

    @property
    def grid_intervals(self) -> int:
        return self.base_knots.size - 1

    @property
    def num_basis(self) -> int:
        return self.grid_intervals + self.spline_order

    @property
    def extended_knots(self) -> np.ndarray:
        """``G + 2k + 1`` knots: base knots plus ``k`` uniform continuations on each side."""
        t, k = self.base_knots, self.spline_order
        steps = np.arange(1, k + 1)
        left = t[0] - (t[1] - t[0]) * steps[::-1]
        right = t[-1] + (t[-1] - t[-2]) * steps
        return np.concatenate([left, t, right])

    def __eq__(self, other):
        return (
            isinstance(other, SplineGrid)
            and self.spline_order == other.spline_order
            and np.array_equal(self.base_knots, other.base_knots)
        )

    __hash__ = None


def uniform_grid(grid_intervals: int, spline_order: int, lo: float = -1.0, hi: float = 1.0) -> SplineGrid:
    return SplineGrid(np.linspace(lo, hi, grid_intervals + 1), spline_order)


def bspline_basis(x: np.ndarray, knots: np.ndarray, order: int, with_derivative: bool = False):
    """Batched B-spline basis on per-channel extended knot vectors.

    Args:
        x: Inputs of shape ``(N, C)``.
        knots: Extended knots of shape ``(C, G + 2k + 1)``.
        order: Spline degree ``k``.
        with_derivative: Also return ``dB/dx``.

    Returns:
        Basis values ``(N, C, G + k)``, and their derivatives when requested.
    """
    x = np.asarray(x, dtype=np.float64)
    knots = np.asarray(knots, dtype=np.float64)
    if _basis_kernel is None:
        return _bspline_numpy(x, knots, order, with_derivative)
    return _bspline_compiled(x, knots, order, with_derivative, 0)


def _bspline_compiled(x, knots, order, with_derivative, extra):
    # Output has ``extra`` trailing zero columns left for the caller to fill.
    c = knots.shape[0]
    n_bases = knots.shape[1] - 1 - order
    flat = np.ascontiguousarray(x.reshape(-1, c))
    out = np.zeros(flat.shape + (n_bases + extra,))
    dout = np.zeros(flat.shape + (n_bases + extra,)) if with_derivative else np.zeros((0, 0, 0))
    _basis_kernel(flat, _pad_knots(knots, order), order, n_bases, out, dout, with_derivative)
    out = out.reshape(x.shape + (n_bases + extra,))
    return (out, dout.reshape(x.shape + (n_bases + extra,))) if with_derivative else out


def spline_activations(z: np.ndarray, knots: np.ndarray, order: int, with_derivative: bool = False):
    """``[B_0(z) .. B_{G+k-1}(z), silu(z)]`` along a new last axis, with derivatives on request."""
    z = np.asarray(z, dtype=np.float64)
    knots = np.asarray(knots, dtype=np.float64)
    if _basis_kernel is None:
        acts = _bspline_numpy(z, knots, order, with_derivative)
        if not with_derivative:
            return np.concatenate([acts, silu(z)[..., None]], axis=-1)
        return (np.concatenate([acts[0], silu(z)[..., None]], axis=-1),
                np.concatenate([acts[1], silu_derivative(z)[..., None]], axis=-1))
    acts = _bspline_compiled(z, knots, order, with_derivative, 1)
    if not with_derivative:
        acts[..., -1] = silu(z)
        return acts
    acts[0][..., -1] = silu(z)
    acts[1][..., -1] = silu_derivative(z)
    return acts


def _pad_knots(knots: np.ndarray, order: int) -> np.ndarray:
    # k extra knots at each end, continuing the boundary spacing
    lo_step = knots[:, 1:2] - knots[:, :1]
    hi_step = knots[:, -1:] - knots[:, -2:-1]
    steps = np.arange(1, order + 1)
    return np.concatenate([knots[:, :1] - lo_step * steps[::-1], knots, knots[:, -1:] + hi_step * steps], axis=1)


def _bspline_numpy(x: np.ndarray, knots: np.ndarray, order: int, with_derivative: bool = False):
    """Vectorized reference implementation of :func:`bspline_basis`."""
    c, n_knots = knots.shape
    n_int = n_knots - 1
    n_bases = n_int - order
    idx = np.empty(x.shape, dtype=np.intp)
    for ch in range(c):
        idx[..., ch] = np.searchsorted(knots[ch], x[..., ch], side="right") - 1
    inside = (idx >= 0) & (idx < n_int)
    np.clip(idx, 0, n_int - 1, out=idx)
    nan = np.isnan(x)
    if order == 0:
        basis = ((idx[..., None] == np.arange(n_bases)) & inside[..., None]).astype(np.float64)
        basis[nan] = np.nan
        return (basis, np.zeros_like(basis)) if with_derivative else basis
    # Local de Boor: only B_{idx-k} .. B_{idx} are nonzero on interval idx. Pad k
    # knots at each end so every gather is in range; padded bases are dropped below.
    padded = _pad_knots(knots, order)
    base = (np.arange(c) * padded.shape[1]) + idx + order
    # win[s + k - 1] = t_{idx + s} for s = 1 - k .. k
    win = padded.ravel()[base[None] + np.arange(1 - order, order + 1).reshape((-1,) + (1,) * base.ndim)]

    def t(s):
        return win[s + order - 1]

    left = [None] + [x - t(1 - r) for r in range(1, order + 1)]
    right = [None] + [t(r) - x for r in range(1, order + 1)]
    local = [inside.astype(np.float64)]
    lower = local
    for p in range(1, order + 1):
        if p == order:
            lower = local
        nxt, saved = [], 0.0
        for r in range(p):
            temp = local[r] / (right[r + 1] + left[p - r])
            nxt.append(saved + right[r + 1] * temp)
            saved = left[p - r] * temp
        nxt.append(saved)
        local = nxt
    width = n_bases + 2 * order
    cols = (np.arange(idx.size) * width).reshape(idx.shape) + idx

    def scatter(values):
        out = np.zeros(x.shape + (width,))
        for r, v in enumerate(values):
            np.put(out, cols + r, v)
        out = out[..., order : order + n_bases]
        out[nan] = np.nan
        return out

    basis = scatter(local)
    if not with_derivative:
        return basis
    # dB_{i,k} = k B_{i,k-1} / (t_{i+k} - t_i) - k B_{i+1,k-1} / (t_{i+k+1} - t_{i+1}),
    # with lower-degree pieces B_{idx-k+1} .. B_{idx} held in ``lower``.
    scaled = [order * lower[r] / (t(r + 1) - t(r + 1 - order)) for r in range(order)]
    deriv = [-scaled[0]] + [scaled[r - 1] - scaled[r] for r in range(1, order)] + [scaled[-1]]
    return basis, scatter(deriv)


def _basis_kernel_py(x, padded, order, n_bases, out, dout, with_derivative):
    """Per-point local de Boor; compiled with numba when it is installed."""
    m_pts, n_ch = x.shape
    n_int = padded.shape[1] - 2 * order - 1
    local = np.empty(order + 1)
    lower = np.empty(order + 1)
    left = np.empty(order + 1)
    right = np.empty(order + 1)
    for m in range(m_pts):
        for c in range(n_ch):
            xv = x[m, c]
            if xv != xv:  # NaN propagates, as in the vectorized path
                out[m, c, :n_bases] = xv
                if with_derivative and order > 0:
                    dout[m, c, :n_bases] = xv
                continue
            if not (padded[c, order] <= xv < padded[c, order + n_int]):
                continue
            # largest j with t_j <= x
            lo, hi = 0, n_int - 1
            while lo < hi:
                mid = (lo + hi + 1) // 2
                if padded[c, order + mid] <= xv:
                    lo = mid
                else:
                    hi = mid - 1
            j = lo + order  # index of t_j in the padded row
            local[0] = 1.0
            lower[0] = 1.0
            for p in range(1, order + 1):
                if p == order:
                    for r in range(order):
                        lower[r] = local[r]
                left[p] = xv - padded[c, j + 1 - p]
                right[p] = padded[c, j + p] - xv
                saved = 0.0
                for r in range(p):
                    temp = local[r] / (right[r + 1] + left[p - r])
                    local[r] = saved + right[r + 1] * temp
                    saved = left[p - r] * temp
                local[p] = saved
            first = lo - order
            for r in range(order + 1):
                b = first + r
                if 0 <= b < n_bases:
                    out[m, c, b] = local[r]
            if with_derivative and order > 0:
                prev = 0.0
                for r in range(order + 1):
                    cur = 0.0
                    if r < order:
                        cur = order * lower[r] / (padded[c, j + r + 1] - padded[c, j + r + 1 - order])
                    b = first + r
                    if 0 <= b < n_bases:
                        dout[m, c, b] = prev - cur
                    prev = cur


try:
    from numba import njit
except ImportError:  # numpy fallback
    _basis_kernel = None
else:
    _basis_kernel = njit(cache=True, nogil=True)(_basis_kernel_py)


def basis_values(grid: SplineGrid, x) -> np.ndarray:
    """Values ``B_0(x) .. B_{G+k-1}(x)``; shape ``x.shape + (G + k,)``."""
    x = np.asarray(x, dtype=np.float64)
    out = bspline_basis(x.reshape(-1, 1), grid.extended_knots[None], grid.spline_order)
    return out.reshape(x.shape + (grid.num_basis,))


def basis_derivatives(grid: SplineGrid, x) -> np.ndarray:
    """Derivatives ``dB_b/dx``; shape ``x.shape + (G + k,)``."""
    x = np.asarray(x, dtype=np.float64)
    _, d = bspline_basis(x.reshape(-1, 1), grid.extended_knots[None], grid.spline_order, True)
    return d.reshape(x.shape + (grid.num_basis,))


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * expit(x)


def silu_derivative(x):
    x = np.asarray(x, dtype=np.float64)
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def grid_from_samples(samples, grid_intervals: int, spline_order: int, blend: float = DEFAULT_BLEND) -> SplineGrid:
    """Grid adapted to ``samples``.

    Base knots are ``blend * uniform + (1 - blend) * quantile``, where the uniform
    knots cover ``[min, max]`` widened by 1% of the range on each side and the
    quantile knots sit at the empirical levels ``j / G``. A constant sample set gets
    a range of width 1e-3 around its value.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("grid_from_samples needs at least two samples")
    if not 0.0 <= blend <= 1.0:
        raise ValueError("blend must lie in [0, 1]")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-12 * max(1.0, abs(lo)):
        lo, hi = lo - 5e-4, hi + 5e-4
    pad = MARGIN * (hi - lo)
    uniform = np.linspace(lo - pad, hi + pad, grid_intervals + 1)
    quantile = np.quantile(x, np.linspace(0.0, 1.0, grid_intervals + 1))
    knots = blend * uniform + (1.0 - blend) * quantile
    # keep the knots strictly ascending
    gap = 1e-6 * (uniform[-1] - uniform[0]) / grid_intervals
    for j in range(1, knots.size):
        if knots[j] < knots[j - 1] + gap:
            knots[j] = knots[j - 1] + gap
    return SplineGrid(knots, spline_order)
