"""Model assembly (EKAN, KAN, MLP, EMLP), latent-space allocation and checkpoints."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .groups import GroupSpec, builtin, sample_element
from .layers import (
    Activation,
    Dense,
    EkanLayer,
    EmlpLayer,
    EquivariantLinear,
    KanLayer,
    LiftLayer,
    TakeFirst,
    grid_update,
)
from .linalg import DEFAULT_TOL
from .reps import RepSpec, parse_rep
from .splines import DEFAULT_BLEND, SplineGrid

MODEL_KINDS = ("ekan", "kan", "mlp", "emlp")
CHECKPOINT_FORMAT = "ekan-checkpoint/1"


def allocate_latent(group: GroupSpec, d: int) -> RepSpec:
    """Split a requested width ``d`` into ``c0*T0 + c1*T1 + c2*T2``.

    Dimensions are shared roughly ``d/4 : d/2 : d/4``. ``c1`` and ``c2`` are rounded
    down (``c1`` is at least 1) and ``T0`` takes the remainder, so the total is exactly
    ``d``.
    """
    n = group.n
    c1 = max(1, d // (2 * n))
    c2 = d // (4 * n * n)
    c0 = d - n * c1 - n * n * c2
    if c0 < 1:
        raise ValueError(
            f"hidden width {d} cannot hold one scalar and one base vector of dimension {n} "
            f"(need at least {n + 1})"
        )
    terms = [(1, 0, c1)] + ([(2, 0, c2)] if c2 else [])
    return RepSpec.canonical(group, c0, terms)


class Model:
    """Ordered stack of layers with a model-level configuration for checkpoints."""

    def __init__(self, layers: list, config: dict, rep_in: RepSpec | None = None, rep_out: RepSpec | None = None):
        self.layers = list(layers)
        self.config = dict(config)
        self.rep_in = rep_in
        self.rep_out = rep_out

    @property
    def kind(self) -> str:
        return self.config["kind"]

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        for layer in self.layers:
            h = layer.forward(h)
        return h

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield f"{i}.{name}", layer.params[name]

    def named_gradients(self):
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield f"{i}.{name}", layer.grads[name]

    def set_parameter(self, key: str, value: np.ndarray) -> None:
        i, name = key.split(".", 1)
        layer = self.layers[int(i)]
        if layer.params[name].shape != value.shape:
            raise ValueError(f"shape mismatch for {key}: {layer.params[name].shape} vs {value.shape}")
        layer.params[name][...] = value

    @property
    def num_parameters(self) -> int:
        """Count of stored (unconstrained) weight entries."""
        return int(sum(p.size for _, p in self.named_parameters()))

    def spline_layers(self) -> list:
        return [(i, l) for i, l in enumerate(self.layers) if hasattr(l, "grids")]

    def update_grids(self, batch: np.ndarray, blend: float = DEFAULT_BLEND, tol: float = DEFAULT_TOL,
                     method: str = "constrained") -> list:
        """Grid update for every spline layer, feeding each the (updated) outputs of its predecessors.

        Returns:
            Relative output change of each spline layer on its batch.
        """
        h = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        report = []
        for layer in self.layers:
            if hasattr(layer, "grids"):
                report.append(grid_update(layer, h, blend, tol=tol, method=method)["relative_change"])
            h = layer.forward(h)
        return report

    def state(self) -> dict:
        params = {k: v.copy() for k, v in self.named_parameters()}
        grids = {str(i): np.stack([g.base_knots for g in l.grids]) for i, l in self.spline_layers()}
        return {"params": params, "grids": grids}

    def load_state(self, state: dict) -> None:
        for key, value in state["params"].items():
            self.set_parameter(key, np.asarray(value, dtype=np.float64))
        for i, l in self.spline_layers():
            knots = np.asarray(state["grids"][str(i)], dtype=np.float64)
            l.grids = [SplineGrid(row, l.spline_order) for row in knots]


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def build_model(group: GroupSpec | str, feature_rep: RepSpec | str, label_rep: RepSpec | str, hidden_dims,
                grid_intervals: int = 3, spline_order: int = 3, rng=0, lift: str = "quadratic",
                lift_rank: int = 4, lift_scalars: int | None = None, tol: float = DEFAULT_TOL) -> Model:
    """Assemble an EKAN: lift layer, ``len(hidden_dims) + 1`` EKAN layers, gate-scalar drop.

    Args:
        group: Group or builtin group name.
        feature_rep, label_rep: Dataset feature and label spaces (objects or strings).
        hidden_dims: Requested latent widths, each split by :func:`allocate_latent`.
        lift: ``"linear"`` lifts with a single equivariant linear map into the gated
            input space of the first layer, whose input space is the feature space.
            ``"quadratic"`` (default) widens the first input space with
            ``lift_scalars`` extra scalars and feeds every scalar channel with invariant
            quadratic features of the input; see :class:`~ekan.layers.LiftLayer`.
        lift_rank: Copies of each term type in the quadratic compression space.
        lift_scalars: Extra first-layer scalars; defaults to ``dim(U_c)``.
    """
    group = builtin(group) if isinstance(group, str) else group
    feature_rep = parse_rep(feature_rep, group) if isinstance(feature_rep, str) else feature_rep
    label_rep = parse_rep(label_rep, group) if isinstance(label_rep, str) else label_rep
    hidden_dims = [int(h) for h in hidden_dims]
    if not hidden_dims:
        raise ValueError("need at least one hidden width")
    if lift not in ("linear", "quadratic"):
        raise ValueError(f"unknown lift {lift!r}")
    rng = _rng(rng)
    quadratic = lift == "quadratic" and bool(feature_rep.terms)
    first = feature_rep
    extra = 0
    if quadratic:
        types = {(p, q) for p, q, _ in feature_rep.terms}
        d_c = lift_rank * sum(group.n ** (p + q) for p, q in types)
        extra = d_c if lift_scalars is None else int(lift_scalars)
        first = RepSpec(group, ((0, 0, extra),) + feature_rep.blocks)
    spaces = [first] + [allocate_latent(group, h) for h in hidden_dims] + [label_rep]
    lift_layer = LiftLayer(feature_rep, first.gated(), rng, quadratic=quadratic, rank=lift_rank, tol=tol)
    layers = [lift_layer]
    for rep_in, rep_out in zip(spaces[:-1], spaces[1:]):
        layers.append(EkanLayer(rep_in, rep_out, grid_intervals, spline_order, rng, tol))
    layers.append(TakeFirst(label_rep.dim))
    config = {
        "kind": "ekan",
        "group": group.name,
        "feature_rep": str(feature_rep),
        "label_rep": str(label_rep),
        "hidden": hidden_dims,
        "grid_intervals": grid_intervals,
        "spline_order": spline_order,
        "lift": lift,
        "lift_rank": lift_rank,
        "lift_scalars": extra,
        "tol": tol,
    }
    model = Model(layers, config, feature_rep, label_rep)
    model.spaces = spaces
    return model


def build_kan(shape, grid_intervals: int = 3, spline_order: int = 3, rng=0) -> Model:
    shape = [int(s) for s in shape]
    rng = _rng(rng)
    layers = [KanLayer(a, b, grid_intervals, spline_order, rng) for a, b in zip(shape[:-1], shape[1:])]
    config = {"kind": "kan", "shape": shape, "grid_intervals": grid_intervals, "spline_order": spline_order}
    return Model(layers, config)


def build_mlp(shape, rng=0, activation: str = "silu") -> Model:
    shape = [int(s) for s in shape]
    rng = _rng(rng)
    layers = []
    for i, (a, b) in enumerate(zip(shape[:-1], shape[1:])):
        layers.append(Dense(a, b, rng))
        if i < len(shape) - 2:
            layers.append(Activation(activation))
    return Model(layers, {"kind": "mlp", "shape": shape, "activation": activation})


def build_emlp(group: GroupSpec | str, feature_rep, label_rep, hidden_dims, rng=0, tol: float = DEFAULT_TOL) -> Model:
    group = builtin(group) if isinstance(group, str) else group
    feature_rep = parse_rep(feature_rep, group) if isinstance(feature_rep, str) else feature_rep
    label_rep = parse_rep(label_rep, group) if isinstance(label_rep, str) else label_rep
    hidden_dims = [int(h) for h in hidden_dims]
    rng = _rng(rng)
    spaces = [feature_rep] + [allocate_latent(group, h) for h in hidden_dims]
    layers = [EmlpLayer(a, b, rng, tol) for a, b in zip(spaces[:-1], spaces[1:])]
    layers.append(EquivariantLinear(spaces[-1], label_rep, rng, tol))
    config = {"kind": "emlp", "group": group.name, "feature_rep": str(feature_rep), "label_rep": str(label_rep),
              "hidden": hidden_dims, "tol": tol}
    return Model(layers, config, feature_rep, label_rep)


def build_from_config(config: dict, rng=0) -> Model:
    """Rebuild a model (fresh weights) from its ``config``."""
    model = _build_from_config(config, rng)
    if model.rep_in is None and "feature_rep" in config:
        attach_reps(model, config["group"], config["feature_rep"], config["label_rep"])
    return model


def _build_from_config(config: dict, rng) -> Model:
    kind = config["kind"]
    if kind == "ekan":
        return build_model(config["group"], config["feature_rep"], config["label_rep"], config["hidden"],
                           config["grid_intervals"], config["spline_order"], rng, config["lift"],
                           config["lift_rank"], config["lift_scalars"], config["tol"])
    if kind == "kan":
        return build_kan(config["shape"], config["grid_intervals"], config["spline_order"], rng)
    if kind == "mlp":
        return build_mlp(config["shape"], rng, config.get("activation", "silu"))
    if kind == "emlp":
        return build_emlp(config["group"], config["feature_rep"], config["label_rep"], config["hidden"], rng,
                          config["tol"])
    raise ValueError(f"unknown model kind {kind!r}")


def kan_parameter_count(shape, grid_intervals: int = 3, spline_order: int = 3) -> int:
    """``sum_l (G + k + 1) * n_l * n_{l+1}``."""
    k = grid_intervals + spline_order + 1
    return int(sum(k * a * b for a, b in zip(shape[:-1], shape[1:])))


def mlp_parameter_count(shape) -> int:
    return int(sum(a * b + b for a, b in zip(shape[:-1], shape[1:])))


def matched_width(count_for_width, target: int, lo: int = 1, hi: int = 100_000) -> int:
    """Width whose parameter count is closest to ``target`` (counts must grow with width)."""
    while lo < hi:
        mid = (lo + hi) // 2
        if count_for_width(mid) < target:
            lo = mid + 1
        else:
            hi = mid
    if lo > 1 and abs(count_for_width(lo - 1) - target) <= abs(count_for_width(lo) - target):
        return lo - 1
    return lo


# -- checkpoints ---------------------------------------------------------------


def _encode(state: dict) -> dict:
    def arr(a):
        a = np.asarray(a, dtype=np.float64)
        return {"shape": list(a.shape), "data": [float(v).hex() for v in a.ravel()]}

    return {
        "params": {k: arr(v) for k, v in sorted(state["params"].items())},
        "grids": {k: arr(v) for k, v in sorted(state["grids"].items())},
    }


def _decode(blob: dict) -> dict:
    def arr(d):
        return np.array([float.fromhex(v) for v in d["data"]], dtype=np.float64).reshape(d["shape"])

    return {
        "params": {k: arr(v) for k, v in blob["params"].items()},
        "grids": {k: arr(v) for k, v in blob["grids"].items()},
    }


def checkpoint_text(model: Model, extra: dict | None = None) -> str:
    doc = {"format": CHECKPOINT_FORMAT, "config": model.config, "state": _encode(model.state())}
    if extra:
        doc["extra"] = extra
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Write a JSON checkpoint; floats are stored as hex strings so round trips are bit-exact."""
    Path(path).write_text(checkpoint_text(model, extra))


def load_checkpoint(path) -> tuple:
    """Rebuild a model from a checkpoint; returns ``(model, extra)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an EKAN checkpoint (format {doc.get('format')!r})")
    model = build_from_config(doc["config"], rng=0)
    model.load_state(_decode(doc["state"]))
    return model, doc.get("extra", {})


# -- equivariance audit ------------------------------------------------------------


def attach_reps(model: Model, group: GroupSpec | str, feature_rep, label_rep) -> Model:
    """Record data spaces on a baseline model so it can be audited and checkpointed with them."""
    group = builtin(group) if isinstance(group, str) else group
    model.rep_in = parse_rep(feature_rep, group) if isinstance(feature_rep, str) else feature_rep
    model.rep_out = parse_rep(label_rep, group) if isinstance(label_rep, str) else label_rep
    model.config.update(group=group.name, feature_rep=str(model.rep_in), label_rep=str(model.rep_out))
    return model


def equivariance_residual(model: Model, rng=0, n_elements: int = 20, n_inputs: int = 10, scale: float | None = None,
                          input_std: float = 0.5, identity_only: bool = False, group: GroupSpec | None = None) -> float:
    """Max of ``|rho_o(g) f(x) - f(rho_i(g) x)| / (1 + |f(x)|)`` over sampled ``g`` and ``x``.

    Args:
        scale: Algebra coefficient range for sampling; group default when ``None``.
        identity_only: Use ``g = I`` only (a sanity floor for the audit itself).
        group: Audit under this group instead of the model's own.
    """
    if model.rep_in is None or model.rep_out is None:
        raise ValueError("model has no recorded input/output spaces")
    rng = _rng(rng)
    group = model.rep_in.group if group is None else group
    rep_in = RepSpec(group, model.rep_in.blocks)
    rep_out = RepSpec(group, model.rep_out.blocks)
    x = rng.normal(0.0, input_std, size=(n_inputs, rep_in.dim))
    fx = model.forward(x)
    ref = 1.0 + np.linalg.norm(fx, axis=1)
    worst = 0.0
    for _ in range(n_elements):
        g = np.eye(group.n) if identity_only else sample_element(group, rng, scale)
        err = np.linalg.norm(fx @ rep_out.rho(g).T - model.forward(x @ rep_in.rho(g).T), axis=1) / ref
        worst = max(worst, float(err.max()))
    return worst
