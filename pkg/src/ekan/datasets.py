"""Synthetic datasets (particle scattering, planar three-body), a text format and symmetry audits."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .groups import MINKOWSKI, GroupSpec, builtin, sample_element
from .reps import RepSpec, parse_rep

SCATTERING_STD = 0.25
SOFTENING = 0.1
BLOWUP = 1e6


@dataclass
class RegressionDataset:
    """Features ``(N, d_i)`` and labels ``(N, d_o)`` with their space signatures.

    ``label_fn`` (optional) regenerates labels from features; it powers
    :func:`check_label_symmetry` for generator-backed datasets.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_rep: RepSpec
    label_rep: RepSpec
    label_fn: Callable | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.float64)
        self.labels = labels.reshape(len(labels), -1)
        if len(self.features) == 0:
            raise ValueError("dataset is empty")
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.labels)} label rows")
        if self.features.shape[1] != self.feature_rep.dim:
            raise ValueError(f"feature width {self.features.shape[1]} != dim({self.feature_rep}) = {self.feature_rep.dim}")
        if self.labels.shape[1] != self.label_rep.dim:
            raise ValueError(f"label width {self.labels.shape[1]} != dim({self.label_rep}) = {self.label_rep.dim}")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.labels))):
            raise ValueError("dataset contains non-finite values")

    def __len__(self):
        return len(self.features)

    def subset(self, idx) -> RegressionDataset:
        return RegressionDataset(self.features[idx], self.labels[idx], self.feature_rep, self.label_rep, self.label_fn)

    def split(self, n_train: int) -> tuple:
        if not 0 < n_train < len(self):
            raise ValueError(f"cannot split {len(self)} rows at {n_train}")
        return self.subset(slice(0, n_train)), self.subset(slice(n_train, None))


# -- particle scattering ---------------------------------------------------------


def scattering_label(features: np.ndarray) -> np.ndarray:
    """``[p^m pt^n - (p.pt - p.p) g^mn][q_m qt_n - (q.qt - q.q) g_mn]`` per row.

    Feature columns are ``q, p, qt, pt`` (four components each, upper indices).
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64)).reshape(-1, 4, 4)
    g = MINKOWSKI
    q, p, qt, pt = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    dot = lambda a, b: np.einsum("nm,mv,nv->n", a, g, b)
    upper = np.einsum("nm,nv->nmv", p, pt) - (dot(p, pt) - dot(p, p))[:, None, None] * g
    ql, qtl = q @ g, qt @ g
    lower = np.einsum("nm,nv->nmv", ql, qtl) - (dot(q, qt) - dot(q, q))[:, None, None] * g
    return np.einsum("nmv,nmv->n", upper, lower)[:, None]


def gen_particle_scattering(n: int, rng: np.random.Generator, group: GroupSpec | str = "o13") -> RegressionDataset:
    """``n`` samples of four normal four-momenta (std 1/4) and their scalar matrix element."""
    if n < 1:
        raise ValueError("n must be >= 1")
    group = builtin(group) if isinstance(group, str) else group
    if group.n != 4:
        raise ValueError(f"scattering needs a group acting on R^4, got n={group.n}")
    x = rng.normal(0.0, SCATTERING_STD, size=(n, 16))
    return RegressionDataset(x, scattering_label(x), parse_rep("4T1", group), parse_rep("T0", group), scattering_label)


# -- planar three-body -----------------------------------------------------------


def _accelerations(pos: np.ndarray, softening: float) -> np.ndarray:
    # pos: (..., 3, 2); unit masses and unit gravitational constant
    diff = pos[..., None, :, :] - pos[..., :, None, :]  # r_j - r_i at [i, j]
    dist2 = np.sum(diff**2, axis=-1) + softening**2
    inv3 = dist2 ** -1.5
    idx = np.arange(3)
    inv3[..., idx, idx] = 0.0
    return np.sum(diff * inv3[..., None], axis=-2)


def _rk4(state: np.ndarray, dt: float, softening: float) -> np.ndarray:
    # state: (..., 2, 3, 2) stacking positions and momenta
    def f(s):
        return np.stack([s[..., 1, :, :], _accelerations(s[..., 0, :, :], softening)], axis=-3)

    k1 = f(state)
    k2 = f(state + 0.5 * dt * k1)
    k3 = f(state + 0.5 * dt * k2)
    k4 = f(state + dt * k3)
    return state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def three_body_energy(state: np.ndarray, softening: float = SOFTENING) -> np.ndarray:
    """Total energy of ``(..., 2, 3, 2)`` states under the softened potential."""
    pos, mom = state[..., 0, :, :], state[..., 1, :, :]
    kinetic = 0.5 * np.sum(mom**2, axis=(-1, -2))
    potential = 0.0
    for i, j in ((0, 1), (0, 2), (1, 2)):
        r2 = np.sum((pos[..., i, :] - pos[..., j, :]) ** 2, axis=-1)
        potential = potential - 1.0 / np.sqrt(r2 + softening**2)
    return kinetic + potential


def simulate_three_body(state0: np.ndarray, steps: int, dt: float = 0.01, substeps: int = 1,
                        softening: float = SOFTENING) -> np.ndarray:
    """Integrate ``(..., 2, 3, 2)`` initial states; returns ``(steps + 1, ..., 2, 3, 2)``.

    Each recorded step of length ``dt`` is split into ``substeps`` RK4 steps.
    """
    out = [np.asarray(state0, dtype=np.float64)]
    h = dt / substeps
    s = out[0]
    for _ in range(steps):
        for _ in range(substeps):
            s = _rk4(s, h, softening)
        out.append(s)
    return np.stack(out)


def _initial_states(n: int, rng: np.random.Generator) -> np.ndarray:
    radius = np.sqrt(rng.uniform(0.5**2, 1.5**2, size=(n, 3)))
    angle = rng.uniform(0.0, 2 * np.pi, size=(n, 3))
    pos = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)
    pos -= pos.mean(axis=1, keepdims=True)
    mom = rng.normal(0.0, 0.1, size=(n, 3, 2))
    mom -= mom.mean(axis=1, keepdims=True)
    return np.stack([pos, mom], axis=1)


def _flatten_state(s: np.ndarray) -> np.ndarray:
    # (..., 2, 3, 2) -> (..., 12) ordered q1, q2, q3, p1, p2, p3; each a T1 block
    return s.reshape(s.shape[:-3] + (12,))


def _unflatten_state(v: np.ndarray) -> np.ndarray:
    return v.reshape(v.shape[:-1] + (2, 3, 2))


WINDOW = 4


def gen_three_body(n_trajectories: int, steps_per_trajectory: int, dt: float = 0.01,
                   rng: np.random.Generator | None = None, group: GroupSpec | str = "o2",
                   substeps: int = 10, softening: float = SOFTENING) -> RegressionDataset:
    """Sliding windows of four states (``24T1``) labelled with the next state (``6T1``).

    Each state holds the three positions followed by the three momenta. Trajectories
    that leave the ``|coord| <= 1e6`` box are discarded and resampled.
    """
    if steps_per_trajectory < WINDOW + 1:
        raise ValueError(f"steps_per_trajectory must be >= {WINDOW + 1}")
    if dt <= 0:
        raise ValueError("dt must be positive")
    rng = np.random.default_rng() if rng is None else rng
    group = builtin(group) if isinstance(group, str) else group
    if group.n != 2:
        raise ValueError(f"three-body data needs a group acting on R^2, got n={group.n}")
    steps = steps_per_trajectory - 1
    trajs = []
    need = n_trajectories
    while need > 0:
        traj = simulate_three_body(_initial_states(need, rng), steps, dt, substeps, softening)
        ok = np.all(np.isfinite(traj) & (np.abs(traj) <= BLOWUP), axis=(0, 2, 3, 4))
        trajs.append(traj[:, ok])
        need -= int(ok.sum())
    traj = _flatten_state(np.concatenate(trajs, axis=1))  # (T, n, 12)
    t_len = traj.shape[0]
    feats, labels = [], []
    for t in range(t_len - WINDOW):
        feats.append(traj[t : t + WINDOW].transpose(1, 0, 2).reshape(-1, WINDOW * 12))
        labels.append(traj[t + WINDOW])
    # trajectory-major row order
    x = np.stack(feats, axis=1).reshape(-1, WINDOW * 12)
    y = np.stack(labels, axis=1).reshape(-1, 12)

    def label_fn(features):
        last = _unflatten_state(np.asarray(features)[:, -12:])
        return _flatten_state(simulate_three_body(last, 1, dt, substeps, softening)[-1])

    return RegressionDataset(x, y, parse_rep("24T1", group), parse_rep("6T1", group), label_fn)


# -- text format -------------------------------------------------------------------


def save_dataset(dataset: RegressionDataset, path) -> None:
    """Write ``# group features labels`` then one whitespace-separated row per sample.

    Floats are written with ``repr`` so a round trip is bit-exact.
    """
    lines = [f"# {dataset.feature_rep.group.name} {dataset.feature_rep} {dataset.label_rep}"]
    for f, l in zip(dataset.features, dataset.labels):
        lines.append(" ".join(repr(float(v)) for v in np.concatenate([f, l])))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_rows(path, width: int | None) -> tuple:
    header, rows = None, []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                if header is None and not rows:
                    header = text[1:].split()
                continue
            parts = text.split()
            if width is not None and len(parts) != width:
                raise ValueError(f"{path}:{lineno}: expected {width} numbers, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if width is None:
                width = len(parts)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return header, np.array(rows)


def load_dataset(path) -> RegressionDataset:
    """Read a file written by :func:`save_dataset`; the header fixes group and spaces."""
    with open(path) as fh:
        first = fh.readline().strip()
    if not first.startswith("#") or len(first[1:].split()) != 3:
        raise ValueError(f"{path}:1: expected header '# <group> <feature_rep> <label_rep>'")
    gname, frep, lrep = first[1:].split()
    group = builtin(gname)
    feature_rep, label_rep = parse_rep(frep, group), parse_rep(lrep, group)
    _, data = _parse_rows(path, feature_rep.dim + label_rep.dim)
    return RegressionDataset(data[:, : feature_rep.dim], data[:, feature_rep.dim :], feature_rep, label_rep)


def load_top_tagging(path, group: GroupSpec | str = "o13") -> RegressionDataset:
    """Events with three constituent four-momenta ``(E, px, py, pz)`` and a 0/1 label.

    One event per line, 13 whitespace-separated numbers; ``#`` lines are ignored.
    """
    group = builtin(group) if isinstance(group, str) else group
    _, data = _parse_rows(path, 13)
    labels = data[:, 12]
    bad = np.flatnonzero((labels != 0.0) & (labels != 1.0))
    if bad.size:
        raise ValueError(f"{path}: label {labels[bad[0]]!r} in data row {bad[0] + 1} is not 0 or 1")
    return RegressionDataset(data[:, :12], labels[:, None], parse_rep("3T1", group), parse_rep("T0", group))


def save_top_tagging(dataset: RegressionDataset, path) -> None:
    rows = np.concatenate([dataset.features, dataset.labels], axis=1)
    Path(path).write_text("".join(" ".join(repr(float(v)) for v in r) + "\n" for r in rows))


# -- symmetry audit ----------------------------------------------------------------


def check_label_symmetry(dataset: RegressionDataset, group: GroupSpec | None = None, n_samples: int = 100,
                         n_group_elems: int = 10, rng: np.random.Generator | None = None,
                         scale: float | None = None, elements=None) -> float:
    """Max relative deviation ``|label_fn(rho_i(g) x) - rho_o(g) y| / (1 + |y|)``.

    Args:
        elements: Explicit group elements; sampled from ``group`` when omitted.
    """
    if dataset.label_fn is None:
        raise ValueError("dataset has no label generator")
    rng = np.random.default_rng(0) if rng is None else rng
    group = dataset.feature_rep.group if group is None else group
    feature_rep = RepSpec(group, dataset.feature_rep.blocks)
    label_rep = RepSpec(group, dataset.label_rep.blocks)
    sub = dataset.subset(slice(0, n_samples))
    y = sub.label_fn(sub.features)
    if elements is None:
        elements = [sample_element(group, rng, scale) for _ in range(n_group_elems)]
    worst = 0.0
    for g in elements:
        y_t = sub.label_fn(sub.features @ feature_rep.rho(g).T)
        expect = y @ label_rep.rho(g).T
        err = np.linalg.norm(y_t - expect, axis=1) / (1.0 + np.linalg.norm(expect, axis=1))
        worst = max(worst, float(err.max()))
    return worst


# -- named generators --------------------------------------------------------------

GENERATORS = ("scattering", "three-body")
THREE_BODY_STEPS = 54


def generate(name: str, n: int, rng: np.random.Generator, group: GroupSpec | str | None = None,
             steps_per_trajectory: int = THREE_BODY_STEPS, dt: float = 0.01) -> RegressionDataset:
    """``n`` rows from a named generator.

    Three-body rows come from whole trajectories of ``steps_per_trajectory`` states,
    each contributing ``steps_per_trajectory - 4`` windows; the last trajectory is
    truncated to reach exactly ``n`` rows.
    """
    if name == "scattering":
        return gen_particle_scattering(n, rng, group or "o13")
    if name == "three-body":
        per = steps_per_trajectory - WINDOW
        n_traj = -(-n // per)
        ds = gen_three_body(n_traj, steps_per_trajectory, dt, rng, group or "o2")
        return ds.subset(slice(0, n))
    raise ValueError(f"unknown generator {name!r}; choose from {GENERATORS}")
