"""Command-line workflow: synthesize data, inspect, train, evaluate.

Exit codes are a stable scripting contract: 0 success, 2 usage or
configuration errors, 3 I/O failures, 4 numeric failures. The
VOLNET_THREADS environment variable caps the BLAS worker threads
(default 1, which makes runs bit-deterministic); it must be applied
before numpy is first imported, which is why the heavy imports in this
module all live inside functions.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

CONFIG_KEYS = {
    "manifest": str,
    "task": str,
    "preset": str,
    "tau": int,
    "eta": int,
    "lr0": float,
    "eta0": int,
    "max_epochs": int,
    "plateau_factor": float,
    "patience": int,
    "min_delta": float,
    "lr_min": float,
    "rho": float,
    "epsilon": float,
    "keep_prob": float,
    "seed": int,
    "f0": int,
    "plateau_monitor": str,
}
REQUIRED_CONFIG_KEYS = ("manifest", "task", "preset", "seed")


def _apply_thread_cap() -> None:
    threads = os.environ.get("VOLNET_THREADS", "1")
    try:
        n = max(1, int(threads))
    except ValueError:
        n = 1
    for var in _THREAD_VARS:
        os.environ.setdefault(var, str(n))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volnet",
        description="3D Inception-based volumetric classifier: data synthesis, "
        "training, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--classes", type=int, default=2, help="number of classes (2 or 3)")
    p.add_argument("--per-class", type=int, default=40, help="subjects per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.1, help="gaussian noise sigma")

    p = sub.add_parser("train", help="train a network from a JSON run config")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--out", required=True, help="output directory for artifacts")

    p = sub.add_parser("inspect", help="print architecture shapes and parameter counts")
    p.add_argument("--preset", required=True, nargs="+", help="one or two preset names")
    p.add_argument("--f0", type=int, default=None, help="override the leading filter count")
    p.add_argument("--classes", type=int, default=2, help="output class count")
    p.add_argument("--json", action="store_true", help="emit JSON instead of text")

    p = sub.add_parser("ci", help="confidence interval for a metric value")
    p.add_argument("--value", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--theta", type=float, default=1.96)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset subset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True, help="frozen split JSON file")
    p.add_argument("--subset", default="test", help="train | validation | test")
    p.add_argument("--out", default=None, help="optional path for the report JSON")

    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from . import data as vdata

    if args.per_class < vdata.TEST_PER_CLASS + 1:
        print(
            f"error: --per-class must be >= {vdata.TEST_PER_CLASS + 1} "
            f"(15 test subjects plus at least one for training)",
            file=sys.stderr,
        )
        return EXIT_USAGE
    if args.classes not in (2, 3):
        print("error: --classes must be 2 or 3", file=sys.stderr)
        return EXIT_USAGE
    if args.noise < 0:
        print("error: --noise must be >= 0", file=sys.stderr)
        return EXIT_USAGE
    specs = vdata.default_class_specs(args.classes)
    manifest_path = vdata.generate_phantoms(
        specs, args.per_class, args.seed, args.out, args.noise
    )
    print(f"manifest: {manifest_path}")
    for s in specs:
        print(f"  {s.label}: {args.per_class} subjects")
    return EXIT_OK


def _load_run_config(path: Path):
    from .errors import InvalidConfig
    from .training import TrainConfig

    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise InvalidConfig(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise InvalidConfig(f"{path}: config must be a JSON object")
    unknown = set(raw) - set(CONFIG_KEYS)
    if unknown:
        raise InvalidConfig(f"{path}: unknown config keys: {sorted(unknown)}")
    missing = [k for k in REQUIRED_CONFIG_KEYS if k not in raw]
    if missing:
        raise InvalidConfig(f"{path}: missing config keys: {missing}")
    values = {}
    for key, val in raw.items():
        want = CONFIG_KEYS[key]
        if want is float and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if not isinstance(val, want) or isinstance(val, bool):
            raise InvalidConfig(f"{path}: key {key!r} must be {want.__name__}")
        values[key] = val
    manifest = values.pop("manifest")
    return manifest, TrainConfig(**values)


def _frozen_split(manifest, split_path: Path, seed: int):
    from . import data as vdata

    if split_path.exists():
        frozen = json.loads(split_path.read_text(encoding="utf-8"))
        return vdata.split_from_frozen_test(manifest, frozen["test"], seed), False
    split = vdata.split_dataset(manifest, seed)
    split_path.write_text(
        json.dumps({"seed": seed, "test": split.test}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return split, True


def cmd_train(args) -> int:
    from . import data as vdata
    from .evaluation import evaluate
    from .network import Network
    from .training import (
        PlateauScheduler,
        history_to_csv,
        save_checkpoint,
        train_loop,
    )

    config_path = Path(args.config)
    if not config_path.exists():
        raise FileNotFoundError(f"config file not found: {config_path}")
    manifest_rel, config = _load_run_config(config_path)
    manifest_path = Path(manifest_rel)
    if not manifest_path.is_absolute():
        manifest_path = config_path.parent / manifest_path
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    manifest = vdata.load_manifest(manifest_path)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    split, fresh = _frozen_split(manifest, out_dir / "split.json", config.seed)
    print(f"split: {'created' if fresh else 'reused'} {out_dir / 'split.json'}")

    spec = config.build_spec()
    result = train_loop(spec, manifest, split, config)

    (out_dir / "history.csv").write_text(history_to_csv(result.history), encoding="utf-8")

    best_net = Network(spec, result.best_params)
    store = vdata.RoiStore(manifest)
    report = evaluate(
        best_net, store, split.test, config.classes, config.task, "test"
    )
    (out_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")

    sched = PlateauScheduler(lr=result.history[-1].lr if result.history else config.lr0)
    save_checkpoint(
        out_dir / "best.ckpt",
        config,
        epoch=len(result.history),
        params=result.best_params,
        optimizer={},
        scheduler=sched,
        history=result.history,
        best_epoch=result.best_epoch,
    )
    print(f"best epoch: {result.best_epoch}")
    print(report.summary_line())
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .errors import InvalidConfig
    from .network import build_preset, describe, describe_json

    if len(args.preset) > 2:
        raise InvalidConfig("--preset takes one or two names")
    specs = [
        build_preset(name, class_count=args.classes, f0=args.f0)
        for name in args.preset
    ]
    if args.json:
        if len(specs) == 1:
            print(describe_json(specs[0]))
        else:
            payload = [json.loads(describe_json(s)) for s in specs]
            print(json.dumps(payload, indent=2))
    else:
        for spec in specs:
            d = describe(spec)
            print(f"preset {d['preset']} ({d['family']}, {len(d['pipelines'])} pipelines, "
                  f"K={d['class_count']})")
            pipe = d["pipelines"][0]
            print(f"  pipeline x{len(d['pipelines'])} (shown once; siamese):")
            for row in pipe["layers"]:
                shape = "x".join(str(v) for v in row["output_shape"])
                print(f"    {row['name']:<16} {row['kind']:<16} out {shape:<14} "
                      f"params {row['parameters'] * len(d['pipelines'])}"
                      f" ({row['parameters']} each)")
            for row in d["tail"]:
                shape = "x".join(str(v) for v in row["output_shape"])
                print(f"    {row['name']:<16} {row['kind']:<16} out {shape:<14} "
                      f"params {row['parameters']}")
            print(f"  total parameters: {d['total_parameters']}")
    if len(specs) == 2:
        from .network import count_parameters

        t0 = count_parameters(specs[0]).total
        t1 = count_parameters(specs[1]).total
        big, small = max(t0, t1), min(t0, t1)
        print(f"parameter ratio: {big}/{small} = {big / small:.2f}")
    return EXIT_OK


def cmd_ci(args) -> int:
    from .evaluation import confidence_interval

    half = confidence_interval(args.value, args.n, args.theta)
    lo, hi = args.value - half, args.value + half
    print(f"{args.value:.3f} ±{half:.3f} [{lo:.3f}, {hi:.3f}]")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import data as vdata
    from .errors import InvalidConfig
    from .evaluation import evaluate
    from .network import Network
    from .training import TASKS, load_checkpoint, restore_params, xavier_init, TrainConfig

    subset = args.subset
    if subset not in ("train", "validation", "test"):
        raise InvalidConfig(f"unknown subset {args.subset!r}")
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    split_path = Path(args.split)
    if not split_path.exists():
        raise FileNotFoundError(f"split file not found: {split_path}")

    ckpt = load_checkpoint(ckpt_path)
    task = ckpt.meta["task"]
    if task not in TASKS:
        raise InvalidConfig(f"checkpoint has unknown task {task!r}")
    config = TrainConfig(
        task=task,
        preset=ckpt.meta["preset"],
        keep_prob=ckpt.meta.get("keep_prob", 0.5),
        f0=ckpt.meta.get("f0"),
    )
    spec = config.build_spec()
    params = xavier_init(spec, 0)
    restore_params(params, ckpt.params)
    net = Network(spec, params)

    manifest = vdata.load_manifest(manifest_path)
    frozen = json.loads(split_path.read_text(encoding="utf-8"))
    split = vdata.split_from_frozen_test(manifest, frozen["test"], frozen.get("seed", 0))
    ids = {"train": split.train, "validation": split.validation, "test": split.test}[subset]
    store = vdata.RoiStore(manifest)
    report = evaluate(net, store, ids, config.classes, task, subset)
    text = report.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    print(report.summary_line(), file=sys.stderr)
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "inspect": cmd_inspect,
    "ci": cmd_ci,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    parser = _build_parser()
    args = parser.parse_args(argv)

    from .errors import IoError, NumericError, VolnetError

    try:
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IoError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except VolnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
