"""EKAN, lift and baseline layers with explicit forward/backward passes.

Every layer keeps its trainable arrays in ``params`` and writes matching arrays into
``grads`` during :meth:`backward`. ``forward`` caches what ``backward`` needs, so a
backward call always refers to the most recent forward batch.

Equivariant layers store *unconstrained* weights and project them onto the solved
equivariant subspace on every forward pass. The projection is an orthogonal
projector, so the gradient with respect to the stored weights is the projected
gradient of the effective weights.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .linalg import DEFAULT_TOL, pinv
from .reps import RepSpec, layout, tensor_square_layout
from .solver import EquivariantSolution, solve, solve_layouts
from .splines import (
    DEFAULT_BLEND,
    SplineGrid,
    grid_from_samples,
    silu,
    silu_derivative,
    spline_activations,
    uniform_grid,
)


def init_equivariant(solution: EquivariantSolution, shape: tuple, std: float, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. ``N(0, std^2)`` draw projected onto the equivariant subspace, then rescaled
    to the Frobenius norm of the unprojected draw so projection does not shrink it."""
    raw = rng.normal(0.0, std, size=shape)
    w = solution.project(raw)
    norm = np.linalg.norm(w)
    return w * (np.linalg.norm(raw) / norm) if norm > 0 else w


class Layer:
    params: dict
    grads: dict

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grads(self) -> None:
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)


def _gate_layout(rep_in: RepSpec):
    """Scalar coordinates of ``rep_in`` and the gate channel of every coordinate.

    Channels are numbered scalars first (in layout order), then one per non-scalar
    instance, matching the trailing gate scalars of the gated space.
    """
    scalar_idx, gate_of = [], np.empty(rep_in.dim, dtype=int)
    n_scalar = rep_in.scalar_count
    nonscalar = 0
    for w, sl in zip(rep_in.instances, rep_in.instance_slices()):
        if not w:
            gate_of[sl] = len(scalar_idx)
            scalar_idx.append(sl.start)
        else:
            gate_of[sl] = n_scalar + nonscalar
            nonscalar += 1
    return np.array(scalar_idx, dtype=int), gate_of


class _SplineActivations:
    """Shared machinery for layers that evaluate ``[B_0..B_{G+k-1}, silu]`` per channel."""

    grid_intervals: int
    spline_order: int
    _knots: np.ndarray

    def _init_grids(self, channels: int, grid_intervals: int, spline_order: int):
        self.grid_intervals = grid_intervals
        self.spline_order = spline_order
        self.grids = [uniform_grid(grid_intervals, spline_order)] * channels

    @property
    def num_bases(self) -> int:
        return self.grid_intervals + self.spline_order + 1

    @property
    def grids(self) -> list:
        return list(self._grids)

    @grids.setter
    def grids(self, grids):
        grids = list(grids)
        for g in grids:
            if g.grid_intervals != self.grid_intervals or g.spline_order != self.spline_order:
                raise ValueError("grid does not match the layer's G and k")
        self._grids = tuple(grids)
        self._knots = np.stack([g.extended_knots for g in grids]) if grids else np.zeros((0, 1))

    def activations(self, z: np.ndarray, with_derivative: bool = False):
        """``phi[n, c, b]`` = ``B_b(z[n, c])`` for ``b < G + k`` and ``silu(z[n, c])`` at ``b = G + k``."""
        return spline_activations(z, self._knots, self.spline_order, with_derivative)


class EkanLayer(_SplineActivations, Layer):
    """Gated basis functions followed by equivariant linear weight blocks.

    Maps the gated input space ``U_gi`` to the gated output space ``U_go`` through the
    post-activation space ``U_m = (G + k + 1) U_i``.
    """

    def __init__(self, rep_in: RepSpec, rep_out: RepSpec, grid_intervals: int = 3, spline_order: int = 3,
                 rng: np.random.Generator | None = None, tol: float = DEFAULT_TOL):
        if rep_in.group != rep_out.group:
            raise ValueError("input and output spaces live over different groups")
        rng = np.random.default_rng() if rng is None else rng
        self.rep_in = rep_in
        self.rep_out = rep_out
        self.rep_gin = rep_in.gated()
        self.rep_gout = rep_out.gated()
        self.d_in = rep_in.dim
        self.d_gout = self.rep_gout.dim
        self.scalar_idx, self.gate_of = _gate_layout(rep_in)
        channels = len(self.scalar_idx) + rep_in.num_nonscalar
        self._init_grids(channels, grid_intervals, spline_order)
        self._channel_map = np.zeros((self.d_in, channels))
        self._channel_map[np.arange(self.d_in), self.gate_of] = 1.0
        self.solution: EquivariantSolution = solve(self.rep_gout, rep_in, tol)
        self._tol = tol
        self._stacked = None
        k = self.num_bases
        std = 1.0 / np.sqrt(k * self.d_in)
        self.params = {"weight": init_equivariant(self.solution, (k, self.d_gout, self.d_in), std, rng)}
        self.grads = {}
        self.zero_grads()
        self._cache = None

    @property
    def channels(self) -> int:
        return len(self._grids)

    def gate_inputs(self, v_gi: np.ndarray) -> np.ndarray:
        """Per-channel gate values: each scalar gates itself, each term uses its trailing gate."""
        return np.concatenate([v_gi[:, self.scalar_idx], v_gi[:, self.d_in:]], axis=1)

    def gated_basis(self, v_gi: np.ndarray, with_derivative: bool = False):
        """Post-activation values ``v_m`` of shape ``(N, G + k + 1, d_i)``."""
        v_gi = np.atleast_2d(np.asarray(v_gi, dtype=np.float64))
        z = self.gate_inputs(v_gi)
        acts = self.activations(z, with_derivative)
        phi = acts[0] if with_derivative else acts
        x = v_gi[:, : self.d_in]
        v_m = x[:, None, :] * phi[:, self.gate_of, :].transpose(0, 2, 1)
        if with_derivative:
            return v_m, phi, acts[1]
        return v_m

    post_activation = gated_basis

    def effective_weight(self) -> np.ndarray:
        return self.solution.project(self.params["weight"])

    def set_effective_weight(self, w: np.ndarray) -> None:
        # the projector is orthogonal, so P^+ = P
        self.params["weight"] = self.solution.project(w)

    def fit_effective_weight(self, v_m: np.ndarray, v_go: np.ndarray, tol: float = DEFAULT_TOL) -> np.ndarray:
        """Least-squares effective weight within the equivariant subspace, ``(K, d_go, d_i)``."""
        if self._stacked is None:
            stacked = self.rep_in.post_activation(self.grid_intervals, self.spline_order)
            self._stacked = solve(self.rep_gout, stacked, self._tol)
        n, k, d_in = v_m.shape
        w = self._stacked.fit(v_m.reshape(n, k * d_in), v_go, tol)
        return w.reshape(self.d_gout, k, d_in).transpose(1, 0, 2)

    def forward(self, v_gi: np.ndarray) -> np.ndarray:
        v_gi = np.atleast_2d(np.asarray(v_gi, dtype=np.float64))
        v_m, phi, dphi = self.gated_basis(v_gi, with_derivative=True)
        w = self.effective_weight()
        n, k = v_m.shape[0], self.num_bases
        w_flat = w.transpose(1, 0, 2).reshape(self.d_gout, k * self.d_in)
        self._cache = (v_gi, v_m, phi, dphi, w_flat)
        return v_m.reshape(n, -1) @ w_flat.T

    def backward(self, grad: np.ndarray) -> np.ndarray:
        v_gi, v_m, phi, dphi, w_flat = self._cache
        n, k, d_in = v_m.shape
        dw = (grad.T @ v_m.reshape(n, -1)).reshape(self.d_gout, k, d_in).transpose(1, 0, 2)
        self.grads["weight"] = self.solution.project(dw)
        dv_m = (grad @ w_flat).reshape(n, k, d_in)
        x = v_gi[:, :d_in]
        dx = np.einsum("nbi,nbi->ni", dv_m, phi[:, self.gate_of, :].transpose(0, 2, 1))
        dphi_ch = ((dv_m * x[:, None, :]).reshape(n * k, d_in) @ self._channel_map).reshape(n, k, -1)
        dz = np.einsum("nbc,ncb->nc", dphi_ch, dphi)
        out = np.zeros_like(v_gi)
        out[:, :d_in] = dx
        n_s = len(self.scalar_idx)
        out[:, self.scalar_idx] += dz[:, :n_s]
        out[:, d_in:] += dz[:, n_s:]
        return out


class LiftLayer(Layer):
    """Equivariant map from the dataset feature space into the first gated input space.

    The linear part is an equivariant ``d_gi x d_data`` matrix. With ``quadratic``
    enabled, the scalar channels of the target additionally receive invariant
    quadratic features: the input is first compressed by an equivariant linear map
    into ``U_c`` (``rank`` copies of every non-scalar term type of the feature space),
    and an equivariant linear map from ``U_c ⊗ U_c`` feeds the scalars.
    """

    def __init__(self, rep_data: RepSpec, rep_target: RepSpec, rng: np.random.Generator | None = None,
                 quadratic: bool = False, rank: int = 4, tol: float = DEFAULT_TOL):
        rng = np.random.default_rng() if rng is None else rng
        self.rep_data = rep_data
        self.rep_target = rep_target
        self.d_data = rep_data.dim
        self.d_target = rep_target.dim
        self.solution = solve(rep_target, rep_data, tol)
        self.params = {"weight": init_equivariant(self.solution, (self.d_target, self.d_data), 1.0 / np.sqrt(self.d_data), rng)}
        self.quadratic = bool(quadratic)
        self.rank = int(rank)
        if self.quadratic:
            types = sorted({(p, q) for p, q, _ in rep_data.terms})
            if not types or self.rank < 1:
                raise ValueError("a quadratic lift needs non-scalar feature terms and rank >= 1")
            group = rep_data.group
            self.rep_c = RepSpec(group, tuple((p, q, self.rank) for p, q in types))
            self.d_c = self.rep_c.dim
            self.solution_c = solve(self.rep_c, rep_data, tol)
            self.scalar_idx = np.array(
                [sl.start for w, sl in zip(rep_target.instances, rep_target.instance_slices()) if not w], dtype=int
            )
            rep_s = RepSpec(group, ((0, 0, len(self.scalar_idx)),))
            self.solution_q = solve_layouts(
                group, layout(rep_s), tensor_square_layout(self.rep_c), len(self.scalar_idx), self.d_c**2, tol
            )
            self.params["compress"] = init_equivariant(self.solution_c, (self.d_c, self.d_data), 1.0 / np.sqrt(self.d_data), rng)
            self.params["quadratic"] = init_equivariant(
                self.solution_q, (len(self.scalar_idx), self.d_c**2), 1.0 / self.d_c, rng
            )
        self.grads = {}
        self.zero_grads()
        self._cache = None

    def effective_weights(self) -> dict:
        out = {"weight": self.solution.project(self.params["weight"])}
        if self.quadratic:
            out["compress"] = self.solution_c.project(self.params["compress"])
            out["quadratic"] = self.solution_q.project(self.params["quadratic"])
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        w = self.effective_weights()
        out = x @ w["weight"].T
        z = zz = None
        if self.quadratic:
            z = x @ w["compress"].T
            zz = (z[:, :, None] * z[:, None, :]).reshape(len(x), -1)
            out[:, self.scalar_idx] += zz @ w["quadratic"].T
        self._cache = (x, z, zz, w)
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x, z, zz, w = self._cache
        self.grads["weight"] = self.solution.project(grad.T @ x)
        dx = grad @ w["weight"]
        if self.quadratic:
            gs = grad[:, self.scalar_idx]
            self.grads["quadratic"] = self.solution_q.project(gs.T @ zz)
            dzz = (gs @ w["quadratic"]).reshape(len(x), self.d_c, self.d_c)
            dz = np.einsum("nij,nj->ni", dzz, z) + np.einsum("nij,ni->nj", dzz, z)
            self.grads["compress"] = self.solution_c.project(dz.T @ x)
            dx = dx + dz @ w["compress"]
        return dx


class KanLayer(_SplineActivations, Layer):
    """Plain KAN layer in its basis-plus-linear form.

    ``x_out[j] = sum_i sum_b W[b, j, i] B_b(x_i) + W[G+k, j, i] silu(x_i)``
    """

    def __init__(self, d_in: int, d_out: int, grid_intervals: int = 3, spline_order: int = 3,
                 rng: np.random.Generator | None = None):
        rng = np.random.default_rng() if rng is None else rng
        self.d_in, self.d_out = d_in, d_out
        self._init_grids(d_in, grid_intervals, spline_order)
        k = self.num_bases
        self.params = {"weight": rng.normal(0.0, 1.0 / np.sqrt(k * d_in), (k, d_out, d_in))}
        self.grads = {}
        self.zero_grads()
        self._cache = None

    def gate_inputs(self, x: np.ndarray) -> np.ndarray:
        return x

    def post_activation(self, x: np.ndarray) -> np.ndarray:
        return self.activations(np.atleast_2d(x)).transpose(0, 2, 1)

    def effective_weight(self) -> np.ndarray:
        return self.params["weight"]

    def set_effective_weight(self, w: np.ndarray) -> None:
        self.params["weight"] = np.array(w, dtype=np.float64)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        phi, dphi = self.activations(x, with_derivative=True)
        n, k = len(x), self.num_bases
        w_flat = self.params["weight"].transpose(1, 0, 2).reshape(self.d_out, k * self.d_in)
        v_m = phi.transpose(0, 2, 1).reshape(n, -1)
        self._cache = (v_m, dphi, w_flat)
        return v_m @ w_flat.T

    def backward(self, grad: np.ndarray) -> np.ndarray:
        v_m, dphi, w_flat = self._cache
        n, k = len(grad), self.num_bases
        dw = (grad.T @ v_m).reshape(self.d_out, k, self.d_in).transpose(1, 0, 2)
        self.grads["weight"] = dw
        dv_m = (grad @ w_flat).reshape(n, k, self.d_in)
        return np.einsum("nbi,nib->ni", dv_m, dphi)

    def forward_per_edge(self, x: np.ndarray) -> np.ndarray:
        """Sum of per-edge activations ``phi_{j,i}(x_i)``, evaluated one edge at a time."""
        from .splines import basis_values

        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        w = self.params["weight"]
        out = np.zeros((len(x), self.d_out))
        for i, grid in enumerate(self._grids):
            b = basis_values(grid, x[:, i])
            s = silu(x[:, i])
            for j in range(self.d_out):
                out[:, j] += b @ w[:-1, j, i] + w[-1, j, i] * s
        return out


class Dense(Layer):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None, bias: bool = True):
        rng = np.random.default_rng() if rng is None else rng
        self.params = {"weight": rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_out, d_in))}
        if bias:
            self.params["bias"] = np.zeros(d_out)
        self.grads = {}
        self.zero_grads()
        self._x = None

    def forward(self, x):
        self._x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = self._x @ self.params["weight"].T
        if "bias" in self.params:
            out = out + self.params["bias"]
        return out

    def backward(self, grad):
        self.grads["weight"] = grad.T @ self._x
        if "bias" in self.params:
            self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"]


class Activation(Layer):
    """Elementwise ``silu`` or identity."""

    def __init__(self, kind: str = "silu"):
        if kind not in ("silu", "identity"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self.params, self.grads = {}, {}
        self._x = None

    def forward(self, x):
        self._x = x
        return silu(x) if self.kind == "silu" else x

    def backward(self, grad):
        return grad * silu_derivative(self._x) if self.kind == "silu" else grad


class EquivariantLinear(Layer):
    """Bias-free linear map whose weight is projected onto the equivariant subspace."""

    def __init__(self, rep_in: RepSpec, rep_out: RepSpec, rng: np.random.Generator | None = None,
                 tol: float = DEFAULT_TOL):
        rng = np.random.default_rng() if rng is None else rng
        self.rep_in, self.rep_out = rep_in, rep_out
        self.solution = solve(rep_out, rep_in, tol)
        self.params = {"weight": init_equivariant(self.solution, (rep_out.dim, rep_in.dim), 1.0 / np.sqrt(rep_in.dim), rng)}
        self.grads = {}
        self.zero_grads()
        self._x = None
        self._w = None

    def forward(self, x):
        self._x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self._w = self.solution.project(self.params["weight"])
        return self._x @ self._w.T

    def backward(self, grad):
        self.grads["weight"] = self.solution.project(grad.T @ self._x)
        return grad @ self._w


class GatedNonlinearity(Layer):
    """``silu`` on scalars, ``sigmoid(gate) * v`` on every non-scalar term; drops the gates."""

    def __init__(self, rep: RepSpec):
        self.rep = rep
        self.scalar_idx, gate_of = _gate_layout(rep)
        n_s = len(self.scalar_idx)
        mask = np.ones(rep.dim, dtype=bool)
        mask[self.scalar_idx] = False
        self.term_idx = np.flatnonzero(mask)
        self.term_gate = rep.dim + gate_of[mask] - n_s
        self.params, self.grads = {}, {}
        self._h = None

    def forward(self, h):
        self._h = h
        d = self.rep.dim
        out = np.empty((len(h), d))
        out[:, self.scalar_idx] = silu(h[:, self.scalar_idx])
        out[:, self.term_idx] = h[:, self.term_idx] * expit(h[:, self.term_gate])
        return out

    def backward(self, grad):
        h = self._h
        out = np.zeros_like(h)
        out[:, self.scalar_idx] = grad[:, self.scalar_idx] * silu_derivative(h[:, self.scalar_idx])
        sig = expit(h[:, self.term_gate])
        out[:, self.term_idx] = grad[:, self.term_idx] * sig
        np.add.at(out, (slice(None), self.term_gate), grad[:, self.term_idx] * h[:, self.term_idx] * sig * (1 - sig))
        return out


class EmlpLayer(Layer):
    """Equivariant linear map into the gated output space followed by gated nonlinearities."""

    def __init__(self, rep_in: RepSpec, rep_out: RepSpec, rng: np.random.Generator | None = None,
                 tol: float = DEFAULT_TOL):
        self.rep_in, self.rep_out = rep_in, rep_out
        self.linear = EquivariantLinear(rep_in, rep_out.gated(), rng, tol)
        self.gate = GatedNonlinearity(rep_out)
        self.params = self.linear.params
        self.grads = self.linear.grads

    @property
    def solution(self):
        return self.linear.solution

    def forward(self, x):
        return self.gate.forward(self.linear.forward(x))

    def backward(self, grad):
        out = self.linear.backward(self.gate.backward(grad))
        self.grads = self.linear.grads
        return out


class TakeFirst(Layer):
    """Keep the first ``d`` coordinates (drops trailing gate scalars)."""

    def __init__(self, d: int):
        self.d = d
        self.params, self.grads = {}, {}
        self._width = None

    def forward(self, x):
        self._width = x.shape[1]
        return x[:, : self.d]

    def backward(self, grad):
        out = np.zeros((len(grad), self._width))
        out[:, : self.d] = grad
        return out


GRID_FIT_METHODS = ("constrained", "projected")


def grid_update(layer, batch: np.ndarray, blend: float = DEFAULT_BLEND, new_grids=None,
                tol: float = DEFAULT_TOL, method: str = "constrained") -> dict:
    """Refit a spline layer's grids to ``batch`` while preserving its outputs.

    Computes the outputs ``V_go`` under the current grids, swaps in grids built from
    the batch's gate values (or ``new_grids``), and re-solves the effective weights
    by least squares against ``V_go``.

    Args:
        method: ``"projected"`` takes the unconstrained solution
            ``W' = V_go^T (V_m'^T)^+`` and projects it back onto the equivariant
            subspace. ``"constrained"`` (default) minimizes the same residual over
            the equivariant subspace directly, which stays exact when the batch has
            fewer rows than ``V_m'`` has columns. Plain KAN layers always use the
            unconstrained solution.

    Returns:
        Diagnostics with the relative Frobenius change of the batch outputs.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if len(batch) < 2:
        raise ValueError("grid update needs at least two samples")
    v_m = layer.post_activation(batch)
    n, k, d_in = v_m.shape
    w = layer.effective_weight()
    w_flat = w.transpose(1, 0, 2).reshape(w.shape[1], k * d_in)
    v_go = v_m.reshape(n, -1) @ w_flat.T
    if new_grids is None:
        z = layer.gate_inputs(batch)
        new_grids = [grid_from_samples(z[:, c], layer.grid_intervals, layer.spline_order, blend)
                     for c in range(z.shape[1])]
    if method not in GRID_FIT_METHODS:
        raise ValueError(f"unknown grid fit method {method!r}")
    layer.grids = new_grids
    v_m_new = layer.post_activation(batch)
    if method == "constrained" and hasattr(layer, "fit_effective_weight"):
        layer.set_effective_weight(layer.fit_effective_weight(v_m_new, v_go, tol))
    else:
        w_new = (pinv(v_m_new.reshape(n, -1), tol) @ v_go).T
        layer.set_effective_weight(w_new.reshape(-1, k, d_in).transpose(1, 0, 2))
    v_m_new = v_m_new.reshape(n, -1)
    w_after = layer.effective_weight().transpose(1, 0, 2).reshape(w_flat.shape)
    v_after = v_m_new @ w_after.T
    denom = np.linalg.norm(v_go)
    return {"relative_change": float(np.linalg.norm(v_after - v_go) / denom) if denom > 0 else 0.0}
