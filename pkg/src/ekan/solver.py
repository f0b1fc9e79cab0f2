"""Equivariance constraints and their SVD nullspace solutions.

Weight matrices ``W`` (``d_out x d_in``) are vectorized by column stacking, so the
constraint ``rho_out(g) W rho_in(g)^{-1} = W`` reads
``(rho_in(g)^{-T} ⊗ rho_out(g)) vec(W) = vec(W)``; the algebra version is
``(-drho_in(A)^T ⊞ drho_out(A)) vec(W) = 0``.

Because every representation here is block-diagonal over term instances, the
constraint splits into independent pieces, one per (output instance, input instance)
pair, and identical word pairs share one solution. :func:`solve` uses that split;
:func:`solve_dense` stacks the full constraint matrix and is kept as an
independent reference route.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .groups import GroupSpec
from .linalg import DEFAULT_TOL, kron, kron_sum, pinv, svd_nullspace
from .reps import RepSpec, layout, word_drho, word_rho


def _generator_images(group: GroupSpec, rho_in, drho_in, rho_out, drho_out, d_in: int, d_out: int):
    """Rows of the constraint for one (output, input) representation pair."""
    rows = []
    for a in group.lie_generators:
        rows.append(kron_sum(-drho_in(a).T, drho_out(a)))
    for h in group.discrete_generators:
        r_in = rho_in(h)
        rows.append(kron(np.linalg.inv(r_in).T, rho_out(h)) - np.eye(d_in * d_out))
    if not rows:
        return np.zeros((0, d_in * d_out))
    return np.vstack(rows)


def constraint_matrix(rep_out: RepSpec, rep_in: RepSpec) -> np.ndarray:
    """Dense stacked constraint ``C`` with ``C vec(W) = 0`` for equivariant ``W``.

    Shape is ``((D + M) * d_out * d_in, d_out * d_in)``.
    """
    if rep_out.group != rep_in.group:
        raise ValueError(f"group mismatch: {rep_out.group!r} vs {rep_in.group!r}")
    return _generator_images(
        rep_out.group, rep_in.rho, rep_in.drho, rep_out.rho, rep_out.drho, rep_in.dim, rep_out.dim
    )


def word_constraint(group: GroupSpec, word_out, word_in) -> np.ndarray:
    n = group.n
    return _generator_images(
        group,
        lambda g: word_rho(word_in, g),
        lambda a: word_drho(word_in, a),
        lambda g: word_rho(word_out, g),
        lambda a: word_drho(word_out, a),
        n ** len(word_in),
        n ** len(word_out),
    )


@dataclass(frozen=True)
class _BlockPair:
    rows: np.ndarray  # (n_out, d_wo) output coordinate indices
    cols: np.ndarray  # (n_in, d_wi) input coordinate indices
    q: np.ndarray  # (d_wo * d_wi, r) local orthonormal basis
    flat: np.ndarray  # (n_out, n_in, d_wi * d_wo) flat indices into W, column-stacked order

    @property
    def rank(self) -> int:
        return self.q.shape[1] * self.rows.shape[0] * self.cols.shape[0]


class EquivariantSolution:
    """Orthonormal equivariant basis ``Q`` and projector ``P = Q Q^T`` for ``vec(W)``.

    The basis is stored as local bases for groups of instance blocks, so
    :meth:`project` never materializes ``P``. :attr:`q_basis` and :attr:`projector`
    assemble the dense matrices on demand.
    """

    def __init__(self, d_out: int, d_in: int, pairs: list):
        self.d_out = d_out
        self.d_in = d_in
        self.pairs = [p for p in pairs if p.q.shape[1] > 0]
        self._local_p = [p.q @ p.q.T for p in self.pairs]

    @property
    def rank(self) -> int:
        return sum(p.rank for p in self.pairs)

    @property
    def shape(self) -> tuple:
        return (self.d_out, self.d_in)

    def project(self, w: np.ndarray) -> np.ndarray:
        """Orthogonal projection of weight matrices (last two axes) onto the equivariant subspace."""
        w = np.asarray(w, dtype=np.float64)
        if w.shape[-2:] != self.shape:
            raise ValueError(f"weight shape {w.shape[-2:]} does not match solution {self.shape}")
        lead = w.shape[:-2]
        flat_w = w.reshape(lead + (self.d_out * self.d_in,))
        out = np.zeros_like(flat_w)
        for pair, p_loc in zip(self.pairs, self._local_p):
            vec = flat_w[..., pair.flat]
            out[..., pair.flat] = vec @ p_loc
        return out.reshape(w.shape)

    def fit(self, x: np.ndarray, y: np.ndarray, tol: float = DEFAULT_TOL) -> np.ndarray:
        """Least-squares ``W`` in the equivariant subspace minimizing ``||x W^T - y||_F``.

        The problem separates by output instance, and all output instances of one
        word share a design matrix, so one pseudo-inverse per output word suffices.

        Args:
            x: Inputs ``(N, d_in)``.
            y: Targets ``(N, d_out)``.

        Returns:
            Equivariant weight ``(d_out, d_in)``.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        n = len(x)
        w = np.zeros(self.shape)
        by_rows: dict = {}
        for pair in self.pairs:
            by_rows.setdefault(id(pair.rows), []).append(pair)
        for pairs in by_rows.values():
            rows = pairs[0].rows
            d_wo = rows.shape[1]
            blocks, shapes = [], []
            for pair in pairs:
                n_in, d_wi = pair.cols.shape
                r = pair.q.shape[1]
                basis = pair.q.reshape(d_wi, d_wo, r)  # basis[j, i, r] = B_r[i, j]
                design = np.einsum("nbj,jir->nibr", x[:, pair.cols], basis)
                blocks.append(design.reshape(n * d_wo, n_in * r))
                shapes.append((n_in, r, basis))
            targets = y[:, rows].transpose(0, 2, 1).reshape(n * d_wo, rows.shape[0])
            coef = pinv(np.concatenate(blocks, axis=1), tol) @ targets
            start = 0
            for pair, (n_in, r, basis) in zip(pairs, shapes):
                c = coef[start : start + n_in * r].reshape(n_in, r, -1)
                start += n_in * r
                blk = np.einsum("jir,bra->aibj", basis, c)  # (n_out, d_wo, n_in, d_wi)
                w[rows[:, :, None, None], pair.cols[None, None, :, :]] = blk
        return w

    def _columns(self):
        for pair in self.pairs:
            d_wo, d_wi = pair.rows.shape[1], pair.cols.shape[1]
            for ro in pair.rows:
                for ci in pair.cols:
                    # column-stacked vec index of W[ro[i], ci[j]] is ci[j] * d_out + ro[i]
                    idx = (ci[:, None] * self.d_out + ro[None, :]).ravel()
                    yield idx, pair.q, d_wo, d_wi

    @cached_property
    def q_basis(self) -> np.ndarray:
        q = np.zeros((self.d_out * self.d_in, self.rank))
        col = 0
        for idx, q_loc, _, _ in self._columns():
            r = q_loc.shape[1]
            q[idx, col : col + r] = q_loc
            col += r
        return q

    @cached_property
    def projector(self) -> np.ndarray:
        q = self.q_basis
        return q @ q.T

    def basis_matrices(self) -> np.ndarray:
        """Basis elements reshaped to ``(rank, d_out, d_in)`` weight matrices."""
        q = self.q_basis
        return q.T.reshape(-1, self.d_in, self.d_out).transpose(0, 2, 1)


def _flat_indices(rows: np.ndarray, cols: np.ndarray, d_in: int) -> np.ndarray:
    # Row-major flat index of W[rows[a, i], cols[b, j]], ordered with i fastest (column stacking).
    return rows[:, None, None, :] * d_in + cols[None, :, :, None]


_cache: dict = {}
_cache_lock = threading.Lock()


def _word_basis(group: GroupSpec, word_out, word_in, tol: float) -> np.ndarray:
    key = (group.key, word_out, word_in, tol)
    with _cache_lock:
        hit = _cache.get(key)
    if hit is not None:
        return hit
    c = word_constraint(group, word_out, word_in)
    q = svd_nullspace(c, tol)
    q.flags.writeable = False
    with _cache_lock:
        return _cache.setdefault(key, q)


def solve_layouts(group: GroupSpec, out_layout: dict, in_layout: dict, d_out: int, d_in: int,
                  tol: float = DEFAULT_TOL) -> EquivariantSolution:
    """Solve the blockwise constraint between two instance layouts (``word -> indices``)."""
    pairs = []
    for wo, rows in out_layout.items():
        for wi, cols in in_layout.items():
            q = _word_basis(group, wo, wi, tol)
            n_flat = _flat_indices(rows, cols, d_in)
            flat = n_flat.reshape(rows.shape[0], cols.shape[0], -1)
            pairs.append(_BlockPair(rows, cols, q, flat))
    return EquivariantSolution(d_out, d_in, pairs)


def solve(rep_out: RepSpec, rep_in: RepSpec, tol: float = DEFAULT_TOL) -> EquivariantSolution:
    """Equivariant basis for linear maps ``rep_in -> rep_out`` via blockwise SVD nullspaces."""
    if rep_out.group != rep_in.group:
        raise ValueError(f"group mismatch: {rep_out.group!r} vs {rep_in.group!r}")
    return solve_layouts(rep_out.group, layout(rep_out), layout(rep_in), rep_out.dim, rep_in.dim, tol)


def solve_dense(rep_out: RepSpec, rep_in: RepSpec, tol: float = DEFAULT_TOL) -> EquivariantSolution:
    """Same subspace as :func:`solve`, from one SVD of the full stacked constraint matrix."""
    q = svd_nullspace(constraint_matrix(rep_out, rep_in), tol)
    rows = np.arange(rep_out.dim)[None, :]
    cols = np.arange(rep_in.dim)[None, :]
    flat = _flat_indices(rows, cols, rep_in.dim).reshape(1, 1, -1)
    return EquivariantSolution(rep_out.dim, rep_in.dim, [_BlockPair(rows, cols, q, flat)])


def project_weights(sol: EquivariantSolution, w: np.ndarray) -> np.ndarray:
    return sol.project(w)


def clear_cache() -> None:
    with _cache_lock:
        _cache.clear()
