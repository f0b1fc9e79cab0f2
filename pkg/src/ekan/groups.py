"""Matrix groups described by infinitesimal (Lie algebra) and discrete generators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import expm

MINKOWSKI = np.diag([1.0, -1.0, -1.0, -1.0])


@dataclass(frozen=True, eq=False)
class GroupSpec:
    """A matrix group ``g = exp(sum_i alpha_i A_i) * prod_j h_{k_j}``.

    Attributes:
        n: Base dimension; group elements are ``n x n``.
        lie_generators: Infinitesimal generators ``A_i``, shape ``(D, n, n)``.
        discrete_generators: Discrete generators ``h_i``, shape ``(M, n, n)``.
        name: Identifier used in checkpoints and on the command line.
        alpha_scales: Default half-width of the uniform distribution of each
            ``alpha_i`` when sampling elements.
    """

    n: int
    lie_generators: np.ndarray
    discrete_generators: np.ndarray
    name: str
    alpha_scales: np.ndarray = field(default=None)

    def __post_init__(self):
        n = int(self.n)
        lie = np.asarray(self.lie_generators, dtype=np.float64).reshape(-1, n, n)
        disc = np.asarray(self.discrete_generators, dtype=np.float64).reshape(-1, n, n)
        if not (np.all(np.isfinite(lie)) and np.all(np.isfinite(disc))):
            raise ValueError(f"group {self.name!r}: generators must be finite")
        for i, h in enumerate(disc):
            if abs(np.linalg.det(h)) <= 1e-8:
                raise ValueError(f"group {self.name!r}: discrete generator {i} is singular")
        scales = self.alpha_scales
        scales = np.ones(len(lie)) if scales is None else np.asarray(scales, dtype=np.float64)
        if scales.shape != (len(lie),):
            raise ValueError("alpha_scales must have one entry per Lie generator")
        lie.flags.writeable = False
        disc.flags.writeable = False
        scales.flags.writeable = False
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "lie_generators", lie)
        object.__setattr__(self, "discrete_generators", disc)
        object.__setattr__(self, "alpha_scales", scales)

    @property
    def num_lie(self) -> int:
        return len(self.lie_generators)

    @property
    def num_discrete(self) -> int:
        return len(self.discrete_generators)

    @property
    def key(self) -> tuple:
        """Hashable identity used for caching solved bases."""
        return (self.name, self.n, self.lie_generators.tobytes(), self.discrete_generators.tobytes())

    def __eq__(self, other):
        return isinstance(other, GroupSpec) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def __repr__(self):
        return f"GroupSpec({self.name!r}, n={self.n}, D={self.num_lie}, M={self.num_discrete})"


def _unit(n: int, i: int, j: int) -> np.ndarray:
    m = np.zeros((n, n))
    m[i, j] = 1.0
    return m


def _lorentz_generators() -> np.ndarray:
    boosts = [_unit(4, 0, i) + _unit(4, i, 0) for i in (1, 2, 3)]
    rotations = [_unit(4, i, j) - _unit(4, j, i) for i, j in ((1, 2), (1, 3), (2, 3))]
    return np.stack(boosts + rotations)


_BOOST_SCALES = np.array([0.5, 0.5, 0.5, 1.0, 1.0, 1.0])
SO2_GENERATOR = np.array([[0.0, -1.0], [1.0, 0.0]])


def trivial(n: int = 1) -> GroupSpec:
    """The trivial group acting on ``R^n`` (no generators at all)."""
    return GroupSpec(n, np.zeros((0, n, n)), np.zeros((0, n, n)), "trivial")


def builtin(name: str) -> GroupSpec:
    """Look up one of the predefined groups.

    Accepted names (case-insensitive): ``so2``, ``o2``, ``so13p``, ``so13``, ``o13``,
    and ``trivial`` (the one-dimensional trivial group).
    """
    key = name.lower().replace("(", "").replace(")", "").replace(",", "").replace("+", "p")
    if key == "so2":
        return GroupSpec(2, SO2_GENERATOR[None], np.zeros((0, 2, 2)), "so2")
    if key == "o2":
        return GroupSpec(2, SO2_GENERATOR[None], np.diag([1.0, -1.0])[None], "o2")
    if key in ("so13p", "so13"):
        lie = _lorentz_generators()
        disc = np.zeros((0, 4, 4)) if key == "so13p" else -np.eye(4)[None]
        return GroupSpec(4, lie, disc, key, alpha_scales=_BOOST_SCALES)
    if key == "o13":
        disc = np.stack([-np.eye(4), np.diag([-1.0, 1.0, 1.0, 1.0])])
        return GroupSpec(4, _lorentz_generators(), disc, "o13", alpha_scales=_BOOST_SCALES)
    if key == "trivial":
        return trivial(1)
    raise ValueError(f"unknown group {name!r}; expected one of so2, o2, so13p, so13, o13, trivial")


BUILTIN_NAMES = ("so2", "o2", "so13p", "so13", "o13")


def element(spec: GroupSpec, alphas, word=()) -> np.ndarray:
    """Group element ``exp(sum alphas_i A_i) * prod h_{k}`` for a word of signed indices.

    Word letters are 1-based; a negative letter ``-k`` stands for ``h_k^{-1}``.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.shape != (spec.num_lie,):
        raise ValueError(f"expected {spec.num_lie} Lie coefficients, got {alphas.shape}")
    g = expm(np.tensordot(alphas, spec.lie_generators, axes=1)) if spec.num_lie else np.eye(spec.n)
    for letter in word:
        h = spec.discrete_generators[abs(letter) - 1]
        g = g @ (h if letter > 0 else np.linalg.inv(h))
    return g


def sample_element(spec: GroupSpec, rng: np.random.Generator, scale: float | None = None) -> np.ndarray:
    """Draw a random group element.

    Each ``alpha_i`` is uniform on ``[-s_i, s_i]`` where ``s_i`` is ``scale`` if given,
    otherwise the group's default per-generator scale (0.5 for Lorentz boosts, 1.0
    elsewhere). A word of 0 to 3 letters is drawn uniformly over the discrete
    generators and their inverses.
    """
    if scale is not None and scale <= 0:
        raise ValueError("scale must be positive")
    scales = spec.alpha_scales if scale is None else np.full(spec.num_lie, float(scale))
    alphas = rng.uniform(-1.0, 1.0, size=spec.num_lie) * scales
    word = ()
    if spec.num_discrete:
        length = int(rng.integers(0, 4))
        letters = np.concatenate([np.arange(1, spec.num_discrete + 1), -np.arange(1, spec.num_discrete + 1)])
        word = tuple(int(x) for x in rng.choice(letters, size=length))
    return element(spec, alphas, word)
