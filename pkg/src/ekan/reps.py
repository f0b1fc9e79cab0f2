"""Space structures ``U = c*T0 + sum_a T(p_a, q_a)`` and their (Lie algebra) representations.

A :class:`RepSpec` is an ordered list of blocks ``(p, q, multiplicity)``. Canonical
feature spaces put scalars first and non-scalar terms after them in declaration
order; gated spaces append one trailing gate scalar per non-scalar term instance.

Each tensor term is described internally by its *word*, a tuple of factor signs
(``+1`` for ``V``, ``-1`` for ``V*``), so ``T(2, 1)`` is ``(1, 1, -1)`` and the scalar
``T0`` is the empty word. Representations of a word are Kronecker products of its
factors; those of a space are block-diagonal over its term instances.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .groups import GroupSpec
from .linalg import kron, kron_sum

MAX_RANK = 3

Word = tuple


def term_word(p: int, q: int) -> Word:
    return (1,) * p + (-1,) * q


def word_dim(word: Word, n: int) -> int:
    return n ** len(word)


def word_rho(word: Word, g: np.ndarray, g_inv_t: np.ndarray | None = None) -> np.ndarray:
    """Representation of a tensor word at group element ``g``."""
    if not word:
        return np.ones((1, 1))
    if g_inv_t is None and -1 in word:
        g_inv_t = np.linalg.inv(g).T
    out = None
    for sign in word:
        f = g if sign > 0 else g_inv_t
        out = f if out is None else kron(out, f)
    return out


def word_drho(word: Word, a: np.ndarray) -> np.ndarray:
    """Lie algebra representation of a tensor word at algebra element ``a``."""
    if not word:
        return np.zeros((1, 1))
    out = None
    for sign in word:
        f = a if sign > 0 else -a.T
        out = f if out is None else kron_sum(out, f)
    return out


@dataclass(frozen=True)
class RepSpec:
    """Ordered direct sum of tensor blocks over a matrix group.

    Attributes:
        group: The acting matrix group.
        blocks: Tuples ``(p, q, multiplicity)``; ``(0, 0, m)`` is ``m`` scalars.
    """

    group: GroupSpec
    blocks: tuple = ()

    def __post_init__(self):
        blocks = []
        for blk in self.blocks:
            p, q, m = (int(v) for v in blk)
            if p < 0 or q < 0 or m < 0:
                raise ValueError(f"invalid block {blk}")
            if p + q > MAX_RANK:
                raise ValueError(f"T({p},{q}) exceeds the supported tensor rank {MAX_RANK}")
            if m:
                blocks.append((p, q, m))
        object.__setattr__(self, "blocks", tuple(blocks))

    @classmethod
    def canonical(cls, group: GroupSpec, scalar_count: int = 0, terms=()) -> RepSpec:
        """Build ``scalar_count*T0 + terms`` with scalars first."""
        for p, q, _ in terms:
            if p * p + q * q == 0:
                raise ValueError("non-scalar terms must have p^2 + q^2 > 0")
        return cls(group, ((0, 0, scalar_count),) + tuple(terms))

    # -- structure ----------------------------------------------------------

    @cached_property
    def instances(self) -> tuple:
        """Word of every term instance, in layout order."""
        out = []
        for p, q, m in self.blocks:
            out.extend([term_word(p, q)] * m)
        return tuple(out)

    @cached_property
    def offsets(self) -> np.ndarray:
        sizes = [word_dim(w, self.group.n) for w in self.instances]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    @property
    def dim(self) -> int:
        return int(self.offsets[-1])

    @property
    def scalar_count(self) -> int:
        """Number of scalar instances anywhere in the layout."""
        return sum(1 for w in self.instances if not w)

    @property
    def leading_scalars(self) -> int:
        n = 0
        for w in self.instances:
            if w:
                break
            n += 1
        return n

    @property
    def terms(self) -> tuple:
        """Non-scalar blocks ``(p, q, multiplicity)``."""
        return tuple(b for b in self.blocks if b[0] + b[1] > 0)

    @property
    def num_nonscalar(self) -> int:
        return sum(1 for w in self.instances if w)

    def is_canonical(self) -> bool:
        """True when all scalars precede every non-scalar term."""
        return self.leading_scalars == self.scalar_count

    def instance_slices(self) -> list:
        return [slice(int(a), int(b)) for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    # -- derived spaces -----------------------------------------------------

    def gated(self) -> RepSpec:
        """Append one gate scalar per non-scalar term instance."""
        return RepSpec(self.group, self.blocks + ((0, 0, self.num_nonscalar),))

    def post_activation(self, grid_intervals: int, spline_order: int) -> RepSpec:
        """``(G + k + 1)`` stacked copies of this space."""
        if grid_intervals < 1 or spline_order < 0:
            raise ValueError("need G >= 1 and k >= 0")
        return RepSpec(self.group, self.blocks * (grid_intervals + spline_order + 1))

    # -- representations ----------------------------------------------------

    def rho(self, g: np.ndarray) -> np.ndarray:
        """Block-diagonal group representation at ``g``."""
        g = np.asarray(g, dtype=np.float64)
        n = self.group.n
        if g.shape != (n, n):
            raise ValueError(f"expected a {n}x{n} group element, got {g.shape}")
        if abs(np.linalg.det(g)) <= 1e-12:
            raise ValueError("group element is singular")
        g_inv_t = np.linalg.inv(g).T
        return self._blockdiag(lambda w: word_rho(w, g, g_inv_t))

    def drho(self, a: np.ndarray) -> np.ndarray:
        """Block-diagonal Lie algebra representation at ``a``."""
        a = np.asarray(a, dtype=np.float64)
        n = self.group.n
        if a.shape != (n, n):
            raise ValueError(f"expected a {n}x{n} algebra element, got {a.shape}")
        return self._blockdiag(lambda w: word_drho(w, a))

    def _blockdiag(self, make) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        cache = {}
        for w, sl in zip(self.instances, self.instance_slices()):
            if w not in cache:
                cache[w] = make(w)
            out[sl, sl] = cache[w]
        return out

    # -- text ---------------------------------------------------------------

    def __str__(self):
        parts = []
        for p, q, m in self.blocks:
            t = "T0" if p + q == 0 else (f"T{p}" if q == 0 else f"T({p},{q})")
            parts.append(t if m == 1 else f"{m}*{t}")
        return "+".join(parts) if parts else "0"

    def __repr__(self):
        return f"RepSpec({self.group.name}, {self})"


def dim(spec: RepSpec) -> int:
    return spec.dim


def rho(spec: RepSpec, g) -> np.ndarray:
    return spec.rho(g)


def drho(spec: RepSpec, a) -> np.ndarray:
    return spec.drho(a)


def gated(spec: RepSpec) -> RepSpec:
    return spec.gated()


def post_activation(spec: RepSpec, grid_intervals: int, spline_order: int) -> RepSpec:
    return spec.post_activation(grid_intervals, spline_order)


class RepParseError(ValueError):
    """Malformed representation string; ``position`` is the 0-based offending column."""

    def __init__(self, text: str, position: int, reason: str):
        super().__init__(f"{reason} at position {position} in {text!r}")
        self.position = position


_TERM = re.compile(r"\s*(?:(\d+)\s*\*?\s*)?T(?:(\d+)|\(\s*(\d+)\s*,\s*(\d+)\s*\))\s*")


def parse_rep(text: str, group: GroupSpec) -> RepSpec:
    """Parse strings like ``"3*T0+2*T(1,0)"``, ``"4T1"`` or ``"T0+T1+T0"``.

    ``Tp`` abbreviates ``T(p,0)``. Block order is kept exactly as written.
    """
    blocks = []
    pos = 0
    if not text.strip():
        raise RepParseError(text, 0, "empty representation")
    while True:
        m = _TERM.match(text, pos)
        if not m or m.end() == pos:
            raise RepParseError(text, pos, "expected a term like 2*T1 or T(1,1)")
        mult = int(m.group(1)) if m.group(1) else 1
        if m.group(2) is not None:
            p, q = int(m.group(2)), 0
        else:
            p, q = int(m.group(3)), int(m.group(4))
        if p + q > MAX_RANK:
            raise RepParseError(text, m.start(), f"tensor rank {p + q} exceeds {MAX_RANK}")
        blocks.append((p, q, mult))
        pos = m.end()
        if pos == len(text):
            break
        if text[pos] != "+":
            raise RepParseError(text, pos, "expected '+'")
        pos += 1
    return RepSpec(group, tuple(blocks))


def tensor_square_layout(spec: RepSpec) -> dict:
    """Instance layout of ``spec ⊗ spec`` under the Kronecker ordering.

    Coordinate ``i * d + j`` of ``x ⊗ x`` is ``x_i x_j``. Each pair of instances
    ``(a, b)`` is a block with word ``w_a + w_b`` on the coordinates
    ``{i * d + j : i in a, j in b}`` (``a``-major), where the representation acts as
    ``rho_a ⊗ rho_b``.

    Returns:
        Mapping ``word -> index array (num_instances, word_dim)``.
    """
    d = spec.dim
    groups: dict = {}
    slices = spec.instance_slices()
    for wa, sa in zip(spec.instances, slices):
        ia = np.arange(sa.start, sa.stop)
        for wb, sb in zip(spec.instances, slices):
            ib = np.arange(sb.start, sb.stop)
            groups.setdefault(wa + wb, []).append((ia[:, None] * d + ib[None, :]).ravel())
    return {w: np.stack(v) for w, v in groups.items()}


def layout(spec: RepSpec) -> dict:
    """Mapping ``word -> index array (num_instances, word_dim)`` for a direct sum."""
    groups: dict = {}
    for w, sl in zip(spec.instances, spec.instance_slices()):
        groups.setdefault(w, []).append(np.arange(sl.start, sl.stop))
    return {w: np.stack(v) for w, v in groups.items()}
