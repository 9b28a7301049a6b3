"""Command-line entry point: train, eval, baseline, sweep, report.

Run configuration is a flat ``key = value`` file with ``#`` comments. Flags
override environment variables (``SEQENS_<FLAG>``), which override the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import platform
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, datahub, evalkit
from .baselines import THRESHOLD_GRID, threshold_grid_search
from .datahub import Dataset
from .evalkit import CalibrationError, UtilityConfig
from .halting import write_traces
from .training import TrainConfig, TrainingDiverged, random_search, train_pool, train_sequential

log = logging.getLogger("seqens")

ENV_PREFIX = "SEQENS_"
METHODS = ("selector", "single", "average", "woc")
_DATA_KEYS = {
    "dataset",
    "data.n_per_tier",
    "data.tiers",
    "data.classes",
    "data.dim",
    "data.modes_per_class",
    "data.split_sizes",
    "data.path",
    "data.header",
    "data.images",
    "data.labels",
}
_RUN_KEYS = {"seed", "out", "tau_c"}


class ConfigError(ValueError):
    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class RunConfig:
    command: str
    train: TrainConfig
    data: dict = field(default_factory=dict)
    tau_c: float = 0.01
    out: Path = Path("runs/latest")
    seed: int = 0
    source_text: str = ""


def parse_kv(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    errors = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            errors.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        values[key.strip()] = value.strip()
    if errors:
        raise ConfigError(errors)
    return values


def _coerce(kind, text: str):
    if kind is bool:
        lowered = text.lower()
        if lowered not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return lowered in ("1", "true", "yes")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


_TRAIN_TYPES = {
    "stages": int,
    "epochs": int,
    "batch_size": int,
    "selector_hidden": int,
    "nesterov": bool,
    "halt_sampling": str,
    "seed": int,
}


def build_run_config(command: str, values: dict[str, str], source_text: str = "") -> RunConfig:
    """Validate every key and collect all problems before failing."""
    errors = []
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    train_kwargs: dict = {}
    data: dict = {}
    run: dict = {}
    for key, text in values.items():
        try:
            if key in train_fields and key != "seed":
                if key in ("hidden", "milestones"):
                    kind = int if key == "hidden" else float
                    train_kwargs[key] = tuple(kind(v) for v in text.split(",") if v.strip())
                elif key == "temperature_final":
                    train_kwargs[key] = None if text.lower() in ("", "none") else float(text)
                else:
                    train_kwargs[key] = _coerce(_TRAIN_TYPES.get(key, float), text)
            elif key in _DATA_KEYS:
                data[key] = text
            elif key == "seed":
                run["seed"] = int(text)
            elif key == "tau_c":
                run["tau_c"] = float(text)
            elif key == "out":
                run["out"] = Path(text)
            else:
                errors.append(f"unknown key {key!r}")
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
    seed = run.get("seed", 0)
    probe = TrainConfig.__new__(TrainConfig)
    for f in dataclasses.fields(TrainConfig):
        setattr(probe, f.name, train_kwargs.get(f.name, f.default))
    probe.seed = seed
    errors += probe.validation_errors()
    errors += _data_errors(data)
    if run.get("tau_c", 0.01) <= 0:
        errors.append(f"tau_c must be > 0, got {run['tau_c']}")
    if errors:
        raise ConfigError(errors)
    return RunConfig(
        command=command,
        train=TrainConfig(**train_kwargs, seed=seed),
        data=data,
        tau_c=run.get("tau_c", 0.01),
        out=run.get("out", Path("runs") / command),
        seed=seed,
        source_text=source_text,
    )


def _data_errors(data: dict) -> list[str]:
    kind = data.get("dataset", "tiered")
    errors = []
    if kind == "tiered":
        for key in ("data.n_per_tier", "data.tiers", "data.classes", "data.dim", "data.modes_per_class"):
            if key in data:
                try:
                    if int(data[key]) <= 0:
                        errors.append(f"{key} must be positive")
                except ValueError:
                    errors.append(f"{key}: not an integer: {data[key]!r}")
    elif kind == "csv":
        path = data.get("data.path")
        if not path:
            errors.append("dataset = csv needs data.path")
        elif not Path(path).is_file():
            errors.append(f"data.path: file not found: {path}")
    elif kind == "idx":
        for key in ("data.images", "data.labels"):
            path = data.get(key)
            if not path:
                errors.append(f"dataset = idx needs {key}")
            elif not Path(path).is_file():
                errors.append(f"{key}: file not found: {path}")
    else:
        errors.append(f"dataset must be tiered, csv or idx, got {kind!r}")
    if "data.split_sizes" in data:
        try:
            sizes = [int(v) for v in data["data.split_sizes"].split(",")]
            if len(sizes) != 3 or min(sizes) < 0:
                errors.append("data.split_sizes needs three non-negative counts (train,val,test)")
        except ValueError:
            errors.append(f"data.split_sizes: not integers: {data['data.split_sizes']!r}")
    return errors


def load_dataset(run: RunConfig) -> Dataset:
    data = run.data
    kind = data.get("dataset", "tiered")
    sizes = tuple(int(v) for v in data["data.split_sizes"].split(",")) if "data.split_sizes" in data else None
    if kind == "tiered":
        return datahub.gen_tiered(
            int(data.get("data.n_per_tier", 1500)),
            tiers=int(data.get("data.tiers", 3)),
            classes=int(data.get("data.classes", 3)),
            dim=int(data.get("data.dim", 16)),
            modes_per_class=int(data.get("data.modes_per_class", 6)),
            seed=run.seed,
            split_sizes=sizes,
        )
    if kind == "csv":
        ds = datahub.load_csv(data["data.path"], header=_coerce(bool, data.get("data.header", "false")))
    else:
        ds = datahub.load_idx(data["data.images"], data["data.labels"])
    return datahub.with_splits(ds, sizes, run.seed)


# provenance helpers


def git_blob_digest(path: Path) -> str:
    body = path.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def write_manifest(run: RunConfig, argv: Sequence[str], dataset: Dataset | None, extra: dict | None = None) -> None:
    outputs = {}
    for p in sorted(run.out.rglob("*")):
        if p.is_file() and p.name != "run_manifest.json":
            outputs[str(p.relative_to(run.out))] = git_blob_digest(p)
    manifest = {
        "command": run.command,
        "argv": list(argv),
        "seed": run.seed,
        "config_digest": hashlib.sha1(run.source_text.encode()).hexdigest(),
        "train_config": run.train.as_dict(),
        "data": run.data,
        "dataset_provenance": dataset.provenance if dataset is not None else None,
        "versions": {"seqens": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "outputs": outputs,
        **(extra or {}),
    }
    (run.out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _echo_config(run: RunConfig) -> None:
    (run.out / "config.txt").write_text(run.source_text)


def _calibrate(single_top1: float, full_top1: float, stages: int, tau_c: float) -> UtilityConfig | None:
    try:
        return UtilityConfig.calibrated(single_top1, full_top1, stages, tau_c)
    except CalibrationError as exc:
        log.warning("utility not reported: %s", exc)
        return None


def anchors(pool, x, y, tau_c: float) -> tuple[UtilityConfig | None, evalkit.EvalRecord, evalkit.EvalRecord]:
    """Single-model and full-average records on (x, y) plus the utility calibrated from them."""
    single = evalkit.evaluate("single", evalkit.single_method(pool[0]), x, y)
    full = evalkit.evaluate("average", evalkit.average_method(pool), x, y)
    cfg = _calibrate(single.top1, full.top1, len(pool), tau_c) if len(pool) > 1 else None
    return cfg, single.with_utility(cfg), full.with_utility(cfg)


def _woc_threshold(pool, dataset: Dataset, utility: UtilityConfig | None, out: Path | None = None) -> float:
    xv, yv = dataset.subset("val")
    if len(yv) == 0:
        xv, yv = dataset.subset("train")
    if utility is None:
        # without a calibrated utility fall back to accuracy per unit cost
        def score(top1, cost):
            return top1 / cost

    else:

        def score(top1, cost):
            return evalkit.raw_utility(top1, cost, utility)

    best, rows = threshold_grid_search(pool, xv, yv, score)
    if out is not None:
        evalkit.write_table(
            [{"threshold": t, "top1": a, "cost": c, "score": u} for t, a, c, u in rows], out / "woc_grid.tsv"
        )
    return best


def _print_table(rows: Sequence[dict]) -> None:
    print(f"{'method':<14}{'Top-1 (%)':>10}{'Cost':>8}{'Utility':>10}")
    for r in rows:
        util = r["utility"]
        util_s = f"{util:10.3f}" if isinstance(util, float) and math.isfinite(util) else f"{'n/a':>10}"
        print(f"{r['method']:<14}{r['top1']:10.2f}{r['cost']:8.2f}{util_s}")


# commands


def cmd_train(run: RunConfig, argv) -> int:
    dataset = load_dataset(run)
    run.out.mkdir(parents=True, exist_ok=True)
    _echo_config(run)
    curve = []
    result = train_sequential(run.train, dataset, on_epoch=curve.append)
    for m in result.models:
        m.round_to_float32()
    result.selector.round_to_float32()
    datahub.save_checkpoint(
        run.out / "checkpoint",
        result.models,
        result.selector,
        seed=run.seed,
        stage=run.train.stages,
        hyperparameters={k: v for k, v in run.train.as_dict().items() if k != "seed"},
    )
    evalkit.write_table(curve, run.out / "learning_curve.tsv")
    xv, yv = dataset.subset("val")
    rows = []
    if len(yv):
        utility, single, full = anchors(result.models, xv, yv, run.tau_c)
        rec = evalkit.evaluate("selector", evalkit.selector_method(result.models, result.selector), xv, yv, utility)
        rows = [single.row(), full.row(), rec.row()]
        evalkit.write_table(rows, run.out / "val_eval.tsv")
        _print_table(rows)
    write_manifest(run, argv, dataset)
    return 0


def cmd_eval(run: RunConfig, args, argv) -> int:
    if not args.checkpoint:
        raise ConfigError(["eval needs --checkpoint"])
    models, selector, _ = datahub.load_checkpoint(args.checkpoint)
    dataset = load_dataset(run)
    x, y = dataset.subset(args.split)
    if len(y) == 0:
        raise ConfigError([f"split {args.split!r} is empty"])
    run.out.mkdir(parents=True, exist_ok=True)
    _echo_config(run)
    ref_models = models
    if args.reference:
        ref_models, _, _ = datahub.load_checkpoint(args.reference)
    utility, single, full = anchors(ref_models, x, y, run.tau_c)
    rows = [single.row(), full.row()]
    method = args.method or ("selector" if selector is not None else "average")
    if method == "selector":
        if selector is None and len(models) > 1:
            raise ConfigError([f"{args.checkpoint} has no selector; use --method single/average/woc"])
        rec = evalkit.evaluate("selector", evalkit.selector_method(models, selector), x, y, utility)
    elif method == "single":
        rec = evalkit.evaluate("single", evalkit.single_method(models[0]), x, y, utility)
    elif method == "average":
        rec = evalkit.evaluate("average", evalkit.average_method(models), x, y, utility)
    else:
        thr = args.threshold if args.threshold is not None else _woc_threshold(models, dataset, utility, run.out)
        rec = evalkit.evaluate("woc", evalkit.threshold_method(models, thr), x, y, utility)
        rec.method = f"woc@{thr:.2f}"
    if method not in ("single", "average") or args.reference:
        rows.append(rec.row())
    evalkit.write_table(rows, run.out / "eval.tsv")
    if rec.trace is not None:
        with open(run.out / "traces.jsonl", "w") as fh:
            write_traces(rec.trace, fh, {"label": y, "pred": rec.predictions})
    else:
        with open(run.out / "steps.jsonl", "w") as fh:
            for s, yy, pp in zip(rec.steps, y, rec.predictions):
                fh.write(json.dumps({"z": int(s), "label": int(yy), "pred": int(pp)}) + "\n")
    _print_table(rows)
    write_manifest(run, argv, dataset, {"checkpoint": str(args.checkpoint), "method": method})
    return 0


def cmd_baseline(run: RunConfig, args, argv) -> int:
    dataset = load_dataset(run)
    run.out.mkdir(parents=True, exist_ok=True)
    _echo_config(run)
    pool = train_pool(run.train, dataset)
    for m in pool:
        m.round_to_float32()
    datahub.save_checkpoint(run.out / "pool", pool, seed=run.seed)
    xt, yt = dataset.subset("test")
    utility, single, full = anchors(pool, xt, yt, run.tau_c)
    thr = args.threshold if args.threshold is not None else _woc_threshold(pool, dataset, utility, run.out)
    woc = evalkit.evaluate(f"woc@{thr:.2f}", evalkit.threshold_method(pool, thr), xt, yt, utility)
    rows = [single.row(), full.row(), woc.row()]
    evalkit.write_table(rows, run.out / "baseline.tsv")
    hist = evalkit.min_ensemble_size_histogram(pool, xt, yt)
    evalkit.write_table([{"size": k, "count": v} for k, v in hist.items()], run.out / "min_ensemble_size.tsv")
    _print_table(rows)
    write_manifest(run, argv, dataset, {"woc_threshold": thr})
    return 0


def parse_grid(text: str) -> tuple[str, list]:
    key, sep, values = text.partition("=")
    key = key.strip()
    if key == "threshold" and not sep:
        return key, [float(t) for t in THRESHOLD_GRID]
    if key == "search":
        return key, [int(values or 24)]
    if not sep:
        raise ConfigError([f"--grid expects key=v1,v2,... (or 'threshold' / 'search=N'), got {text!r}"])
    if key == "threshold":
        return key, [float(v) for v in values.split(",")]
    if key == "stages":
        return key, [int(v) for v in values.split(",")]
    if key not in {f.name for f in dataclasses.fields(TrainConfig)}:
        raise ConfigError([f"--grid key {key!r} is not a training setting"])
    return key, [float(v) for v in values.split(",")]


def cmd_sweep(run: RunConfig, args, argv) -> int:
    if not args.grid:
        raise ConfigError(["sweep needs --grid"])
    key, grid = parse_grid(args.grid)
    dataset = load_dataset(run)
    run.out.mkdir(parents=True, exist_ok=True)
    _echo_config(run)
    xt, yt = dataset.subset("test")
    extra = {"grid": args.grid}

    if key == "stages":
        rows = _stage_sweep(run, dataset, grid)
        evalkit.write_table(rows, run.out / "utility_vs_stages.tsv")
    elif key == "search":
        pool = train_pool(run.train, dataset)
        xv, yv = dataset.subset("val")
        utility, _, _ = anchors(pool, xv, yv, run.tau_c)
        if utility is None:
            raise CalibrationError("search needs an ensemble that beats the single model on the validation split")

        def objective(result):
            rec = evalkit.evaluate("selector", evalkit.selector_method(result.models, result.selector), xv, yv, utility)
            return rec.raw_utility

        best, history = random_search(run.train, dataset, objective, trials=grid[0])
        rows = [{**params, "val_raw_utility": score} for params, score in history]
        evalkit.write_table(rows, run.out / "search.tsv")
        extra["best"] = best
        print("best:", json.dumps(best))
    else:
        pool = train_pool(run.train, dataset)
        utility, single, full = anchors(pool, xt, yt, run.tau_c)
        if key == "threshold":

            def point(thr):
                return evalkit.evaluate("woc", evalkit.threshold_method(pool, thr), xt, yt, utility)

        else:

            def point(value):
                cfg = replace(run.train, **{key: type(getattr(run.train, key))(value)})
                result = train_sequential(cfg, dataset)
                return evalkit.evaluate("selector", evalkit.selector_method(result.models, result.selector), xt, yt, utility)

        rows = evalkit.pareto_sweep(point, grid, label=key)
        evalkit.write_table(rows, run.out / "frontier.tsv")
        evalkit.write_table([single.row(), full.row()], run.out / "anchors.tsv")
    _render(run.out)
    write_manifest(run, argv, dataset, extra)
    print(f"wrote {len(rows)} rows to {run.out}")
    return 0


def _stage_sweep(run: RunConfig, dataset: Dataset, stages: Sequence[int]) -> list[dict]:
    """Utility of average ensemble, WoC and the learned cascade for each ensemble size."""
    xt, yt = dataset.subset("test")
    biggest = train_pool(replace(run.train, stages=max(stages)), dataset)
    # one calibration for every size: single model against the default-size average
    ref_size = min(run.train.stages, len(biggest))
    utility, _, _ = anchors(biggest[:ref_size], xt, yt, run.tau_c)
    rows = []
    for T in stages:
        pool = biggest[:T]
        recs = [evalkit.evaluate("average", evalkit.average_method(pool), xt, yt, utility)]
        thr = _woc_threshold(pool, dataset, utility)
        recs.append(evalkit.evaluate("woc", evalkit.threshold_method(pool, thr), xt, yt, utility))
        result = train_sequential(replace(run.train, stages=T), dataset)
        recs.append(evalkit.evaluate("selector", evalkit.selector_method(result.models, result.selector), xt, yt, utility))
        rows += [{"stages": T, **r.row()} for r in recs]
    return rows


def cmd_report(run: RunConfig, args, argv) -> int:
    target = run.out
    if not target.is_dir():
        raise ConfigError([f"report: no such output directory {target}"])
    made = _render(target)
    for p in made:
        print(p)
    return 0


def _render(folder: Path) -> list[Path]:
    from . import report

    return report.render_folder(folder)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqens", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "baseline", "sweep", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--stages", type=int)
        if name in ("eval", "baseline", "sweep"):
            p.add_argument("--method", choices=METHODS)
            p.add_argument("--threshold", type=float)
        if name == "sweep":
            p.add_argument("--grid")
        if name == "eval":
            p.add_argument("--checkpoint")
            p.add_argument("--reference", help="pool checkpoint supplying the utility anchors")
            p.add_argument("--split", default="test", choices=datahub.SPLITS)
    return parser


def _env_defaults(args: argparse.Namespace) -> None:
    for name in ("config", "seed", "out", "stages", "method", "threshold", "grid", "checkpoint"):
        if getattr(args, name, None) is None and (ENV_PREFIX + name.upper()) in os.environ:
            value = os.environ[ENV_PREFIX + name.upper()]
            if name in ("seed", "stages"):
                value = int(value)
            elif name == "threshold":
                value = float(value)
            setattr(args, name, value)


def resolve(args: argparse.Namespace) -> RunConfig:
    _env_defaults(args)
    text = ""
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError([f"config file not found: {path}"])
        text = path.read_text()
    values = parse_kv(text)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.stages is not None:
        values["stages"] = str(args.stages)
    if args.out is not None:
        values["out"] = args.out
    return build_run_config(args.command, values, text)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if getattr(args, "threshold", None) is not None and not 0 <= args.threshold <= 1:
        print(f"error: --threshold must be in [0, 1], got {args.threshold}", file=sys.stderr)
        return 2
    try:
        run = resolve(args)
        handler = {
            "train": lambda: cmd_train(run, argv),
            "eval": lambda: cmd_eval(run, args, argv),
            "baseline": lambda: cmd_baseline(run, args, argv),
            "sweep": lambda: cmd_sweep(run, args, argv),
            "report": lambda: cmd_report(run, args, argv),
        }[args.command]
        return handler()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
