"""Command-line interface: ``ekan generate | solve-basis | train | eval | check-equivariance``.

Every command accepts ``--config FILE`` with flat ``key = value`` lines (lists as
``[a,b,c]``, ``#`` comments). Keys use the long flag names with dashes or
underscores, and explicit flags override the file. Failures exit with status 1 and
print one JSON line ``{"error": <class>, "message": ...}`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datasets, models
from .groups import BUILTIN_NAMES, builtin
from .reps import parse_rep
from .solver import solve
from .train import TrainConfig, evaluate, fit


class ConfigError(ValueError):
    """Bad configuration file or inconsistent settings."""


class GroupMismatchError(ValueError):
    """Requested group differs from the one stored in a checkpoint."""


def parse_value(text: str):
    """``[a,b]`` -> list, integers and floats -> numbers, anything else -> string."""
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        return [parse_value(v) for v in inner.split(",")] if inner else []
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config(path) -> dict:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = text.split("=", 1)
        out[key.strip().replace("-", "_")] = parse_value(value)
    return out


def _int_list(value) -> list:
    if isinstance(value, list):
        return [int(v) for v in value]
    if isinstance(value, int):
        return [value]
    return [int(v) for v in str(value).strip("[]").split(",") if v.strip()]


# Defaults applied after merging the config file; flags default to None so that an
# unset flag never masks a config value.
DEFAULTS = {
    "group": None,
    "feature_rep": None,
    "label_rep": None,
    "model": "ekan",
    "shape": None,
    "grid_intervals": 3,
    "spline_order": 3,
    "lift": "quadratic",
    "lift_rank": 4,
    "lift_scalars": None,
    "lr": 3e-3,
    "batch_size": 500,
    "epochs": 100,
    "grid_update_every": 5,
    "grid_update_stop": 50,
    "loss": "mse",
    "seed": 0,
    "seeds": None,
    "data": None,
    "test_data": None,
    "dataset": None,
    "n": 1000,
    "n_train": 1000,
    "n_test": 1000,
    "data_seed": 0,
    "steps": datasets.THREE_BODY_STEPS,
    "dt": 0.01,
    "out": None,
    "rep_in": None,
    "rep_out": None,
    "checkpoint": None,
    "n_elems": 20,
    "n_inputs": 10,
    "scale": None,
    "identity_only": False,
}


def _settings(args) -> dict:
    merged = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg = read_config(args.config)
        unknown = sorted(set(cfg) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(cfg)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None and value is not False:
            merged[key] = value
    return merged


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


# -- data ----------------------------------------------------------------------


def _load_data(s: dict) -> tuple:
    """``(train, test, spec)``; ``spec`` is enough to rebuild both splits later."""
    if s["data"]:
        data = datasets.load_dataset(s["data"])
        if s["test_data"]:
            test = datasets.load_dataset(s["test_data"])
            spec = {"data": str(s["data"]), "test_data": str(s["test_data"])}
            return data, test, spec
        n_train = int(s["n_train"])
        train, test = data.split(n_train)
        return train, test, {"data": str(s["data"]), "n_train": n_train}
    if not s["dataset"]:
        raise ConfigError("give --data FILE or --dataset {scattering,three-body}")
    spec = {"dataset": s["dataset"], "n_train": int(s["n_train"]), "n_test": int(s["n_test"]),
            "data_seed": int(s["data_seed"]), "group": s["group"], "steps": int(s["steps"]), "dt": float(s["dt"])}
    return _generate_split(spec) + (spec,)


def _generate_split(spec: dict) -> tuple:
    rng = np.random.default_rng(spec["data_seed"])
    kw = {"steps_per_trajectory": spec["steps"], "dt": spec["dt"]}
    train = datasets.generate(spec["dataset"], spec["n_train"], rng, spec["group"], **kw)
    test = datasets.generate(spec["dataset"], spec["n_test"], rng, spec["group"], **kw)
    return train, test


def _data_from_spec(spec: dict) -> tuple:
    if "dataset" in spec:
        return _generate_split(spec)
    data = datasets.load_dataset(spec["data"])
    if "test_data" in spec:
        return data, datasets.load_dataset(spec["test_data"])
    return data.split(spec["n_train"])


# -- commands --------------------------------------------------------------------


def cmd_generate(s: dict) -> None:
    if not s["dataset"] or not s["out"]:
        raise ConfigError("generate needs --dataset and --out")
    rng = np.random.default_rng(int(s["seed"]))
    ds = datasets.generate(s["dataset"], int(s["n"]), rng, s["group"], int(s["steps"]), float(s["dt"]))
    try:
        datasets.save_dataset(ds, s["out"])
    except OSError as exc:
        raise OSError(f"cannot write {s['out']}: {exc.strerror}") from None
    _emit({"command": "generate", "rows": len(ds), "feature_dim": ds.feature_rep.dim,
           "label_dim": ds.label_rep.dim, "feature_rep": str(ds.feature_rep), "label_rep": str(ds.label_rep),
           "group": ds.feature_rep.group.name, "path": str(s["out"])})


def cmd_solve_basis(s: dict) -> None:
    if not (s["group"] and s["rep_in"] and s["rep_out"]):
        raise ConfigError("solve-basis needs --group, --rep-in and --rep-out")
    group = builtin(s["group"])
    rep_in, rep_out = parse_rep(s["rep_in"], group), parse_rep(s["rep_out"], group)
    sol = solve(rep_out, rep_in)
    record = {"command": "solve-basis", "group": group.name, "rep_in": str(rep_in), "rep_out": str(rep_out),
              "nullity": sol.rank, "shape": [rep_out.dim, rep_in.dim]}
    if s["out"]:
        np.savetxt(s["out"], sol.q_basis, fmt="%.17g")
        record["path"] = str(s["out"])
    _emit(record)


def _build(s: dict, train, seed: int):
    kind = s["model"]
    shape = _int_list(s["shape"]) if s["shape"] is not None else None
    if not shape or len(shape) < 2:
        raise ConfigError("--shape needs at least two entries, e.g. [16,64,1]")
    fdim, ldim = train.feature_rep.dim, train.label_rep.dim
    if shape[0] != fdim or shape[-1] != ldim:
        raise ConfigError(f"shape {shape} does not match data widths {fdim} -> {ldim}")
    group = train.feature_rep.group
    if kind == "ekan":
        return models.build_model(group, train.feature_rep, train.label_rep, shape[1:-1], int(s["grid_intervals"]),
                                  int(s["spline_order"]), seed, s["lift"], int(s["lift_rank"]),
                                  None if s["lift_scalars"] is None else int(s["lift_scalars"]))
    if kind == "emlp":
        return models.build_emlp(group, train.feature_rep, train.label_rep, shape[1:-1], seed)
    if kind == "kan":
        model = models.build_kan(shape, int(s["grid_intervals"]), int(s["spline_order"]), seed)
    elif kind == "mlp":
        model = models.build_mlp(shape, seed)
    else:
        raise ConfigError(f"unknown model kind {kind!r}; choose from {models.MODEL_KINDS}")
    return models.attach_reps(model, group, train.feature_rep, train.label_rep)


def _regroup(ds, group_name):
    if not group_name or group_name == ds.feature_rep.group.name:
        return ds
    group = builtin(group_name)
    return datasets.RegressionDataset(ds.features, ds.labels, parse_rep(str(ds.feature_rep), group),
                                      parse_rep(str(ds.label_rep), group), ds.label_fn)


def cmd_train(s: dict) -> None:
    train, test, spec = _load_data(s)
    train, test = _regroup(train, s["group"]), _regroup(test, s["group"])
    spec["group"] = train.feature_rep.group.name
    seeds = _int_list(s["seeds"]) if s["seeds"] is not None else [int(s["seed"])]
    out = Path(s["out"]) if s["out"] else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    results = []
    for seed in seeds:
        model = _build(s, train, seed)
        config = TrainConfig(epochs=int(s["epochs"]), learning_rate=float(s["lr"]), batch_size=int(s["batch_size"]),
                             grid_update_every=int(s["grid_update_every"]),
                             grid_update_stop=int(s["grid_update_stop"]), seed=seed, loss=s["loss"])
        log = open(out / f"log-seed{seed}.jsonl", "w") if out else None
        try:
            _, metrics = fit(model, train, config, test, log)
        finally:
            if log:
                log.close()
        record = {"command": "train", "model": s["model"], "seed": seed, **metrics.summary()}
        if out:
            path = out / f"checkpoint-seed{seed}.json"
            models.save_checkpoint(model, path, {"data": spec, "loss": s["loss"], "seed": seed,
                                                 "test_loss": metrics.test_loss})
            record["checkpoint"] = str(path)
        results.append(record)
        _emit(record)
    if len(seeds) > 1:
        values = np.array([r["test_loss"] for r in results])
        _emit({"command": "train-summary", "model": s["model"], "seeds": seeds, "metric": s["loss"],
               "mean": float(values.mean()), "std": float(values.std()), "num_parameters": results[0]["num_parameters"]})


def cmd_eval(s: dict) -> None:
    if not s["checkpoint"]:
        raise ConfigError("eval needs --checkpoint")
    model, extra = models.load_checkpoint(s["checkpoint"])
    loss = extra.get("loss", s["loss"])
    if s["data"]:
        test = datasets.load_dataset(s["data"])
    elif "data" in extra:
        _, test = _data_from_spec(extra["data"])
    else:
        raise ConfigError("checkpoint records no dataset; pass --data")
    result = evaluate(model, test, loss)
    record = {"command": "eval", "checkpoint": str(s["checkpoint"]), "test_loss": result["loss"], **result}
    if "test_loss" in extra:
        record["matches_training_record"] = result["loss"] == extra["test_loss"]
    _emit(record)


def cmd_check_equivariance(s: dict) -> None:
    if s["checkpoint"]:
        model, _ = models.load_checkpoint(s["checkpoint"])
        stored = model.config.get("group")
        if s["group"] and stored and s["group"] != stored:
            raise GroupMismatchError(f"checkpoint was built for {stored}, not {s['group']}")
    else:
        if not (s["group"] and s["feature_rep"] and s["label_rep"] and s["shape"]):
            raise ConfigError("check-equivariance needs --checkpoint, or --group/--feature-rep/--label-rep/--shape")
        group = builtin(s["group"])
        dummy = datasets.RegressionDataset(
            np.zeros((1, parse_rep(s["feature_rep"], group).dim)), np.zeros((1, parse_rep(s["label_rep"], group).dim)),
            parse_rep(s["feature_rep"], group), parse_rep(s["label_rep"], group))
        model = _build(s, dummy, int(s["seed"]))
    residual = models.equivariance_residual(model, int(s["seed"]), int(s["n_elems"]), int(s["n_inputs"]),
                                            None if s["scale"] is None else float(s["scale"]),
                                            identity_only=bool(s["identity_only"]))
    _emit({"command": "check-equivariance", "model": model.kind, "group": model.rep_in.group.name,
           "residual": residual, "n_elems": int(s["n_elems"]), "n_inputs": int(s["n_inputs"])})


COMMANDS = {
    "generate": cmd_generate,
    "solve-basis": cmd_solve_basis,
    "train": cmd_train,
    "eval": cmd_eval,
    "check-equivariance": cmd_check_equivariance,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ekan", description="Equivariant KAN toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--group", choices=BUILTIN_NAMES)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    def model_flags(p):
        p.add_argument("--model", choices=models.MODEL_KINDS)
        p.add_argument("--shape", help="layer widths, e.g. [16,64,1]")
        p.add_argument("--grid-intervals", type=int)
        p.add_argument("--spline-order", type=int)
        p.add_argument("--lift", choices=("linear", "quadratic"))
        p.add_argument("--lift-rank", type=int)
        p.add_argument("--lift-scalars", type=int)

    def data_flags(p):
        p.add_argument("--dataset", choices=datasets.GENERATORS)
        p.add_argument("--steps", type=int, help="states per three-body trajectory")
        p.add_argument("--dt", type=float)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p)
    data_flags(p)
    p.add_argument("--n", type=int, help="number of rows")

    p = sub.add_parser("solve-basis", help="print the nullity of an equivariance constraint")
    common(p)
    p.add_argument("--rep-in")
    p.add_argument("--rep-out")

    p = sub.add_parser("train", help="train a model and write checkpoints")
    common(p)
    model_flags(p)
    data_flags(p)
    p.add_argument("--seeds", help="comma-separated seeds; reports mean and std")
    p.add_argument("--data", help="dataset file (training rows first)")
    p.add_argument("--test-data")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--grid-update-every", type=int)
    p.add_argument("--grid-update-stop", type=int)
    p.add_argument("--loss", choices=("mse", "bce_with_logits"))

    p = sub.add_parser("eval", help="evaluate a checkpoint on its test split or a given file")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--loss", choices=("mse", "bce_with_logits"))

    p = sub.add_parser("check-equivariance", help="measure the equivariance residual of a model")
    common(p)
    model_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--feature-rep")
    p.add_argument("--label-rep")
    p.add_argument("--n-elems", type=int)
    p.add_argument("--n-inputs", type=int)
    p.add_argument("--scale", type=float, help="algebra coefficient range for sampled elements")
    p.add_argument("--identity-only", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](_settings(args))
    except Exception as exc:  # noqa: BLE001 - single-line report for every failure
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
