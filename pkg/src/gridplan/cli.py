"""Command-line interface: generate, train, eval, sweep, heuristic, selfcheck, export.

Option precedence is CLI flag > config file (--config, TOML or JSON) >
built-in default. Human-readable output goes to stdout; machine-readable
artifacts are written under --out, along with a manifest.json capturing the
fully resolved configuration so any run can be reproduced from its outputs.

Exit codes: 0 success, 1 internal error, 2 usage error, 3 check failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._binio import FormatError
from .checkpoint import load_model, save_model
from .dataset import DatasetManifest, build_dataset, load_dataset
from .evaluation import SweepSpec, evaluate, run_sweep, sweep_summary, write_sweep_csv
from .gridworld import GenerationError
from .models import (
    ModelConfig,
    REFERENCE_F_VALUES,
    REFERENCE_K_32X32,
    REFERENCE_KPRIME_VALUES,
    heuristic_k,
    iteration_table,
    scaled_k,
)
from .selfcheck import run_selfcheck
from .training import TrainConfig, train

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CHECK = 3


class CheckFailure(Exception):
    """A verification subcommand found a mismatch."""


def _load_config_file(path: str) -> dict:
    text = Path(path).read_bytes()
    if path.endswith(".toml"):
        return tomllib.loads(text.decode("utf-8"))
    return json.loads(text.decode("utf-8"))


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults, config-file values, and explicit flags (in that order)."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        file_values = _load_config_file(args.config)
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ValueError(f"config file sets unknown options: {sorted(unknown)}")
        resolved.update(file_values)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _write_manifest(out_dir: Path, command: str, resolved: dict) -> None:
    payload = {"command": command, "package_version": __version__, "resolved": resolved}
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _parse_float_list(text: str) -> tuple:
    return tuple(float(v) for v in text.split(","))


def _parse_int_list(text: str) -> tuple:
    return tuple(int(v) for v in text.split(","))


# ---------------------------------------------------------------------------
# subcommands


GENERATE_DEFAULTS = {"size": 8, "maps": 100, "pairs": 6, "density": (0.1, 0.3),
                     "split": 0.8, "seed": 0}


def cmd_generate(args) -> int:
    cfg = _resolve(args, GENERATE_DEFAULTS)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(
        seed=cfg["seed"], map_height=cfg["size"], map_width=cfg["size"],
        num_maps=cfg["maps"], pairs_per_map=cfg["pairs"],
        density_range=tuple(cfg["density"]), split_ratio=cfg["split"],
    )
    train_path, test_path = build_dataset(manifest, out_dir)
    _, train_samples = load_dataset(train_path)
    _, test_samples = load_dataset(test_path)
    _write_manifest(out_dir, "generate", cfg)
    print(f"wrote {train_path} ({len(train_samples)} samples)")
    print(f"wrote {test_path} ({len(test_samples)} samples)")
    return EXIT_OK


TRAIN_DEFAULTS = {
    "variant": "GSVIN", "f": 7, "kprime": 1.0, "k": 0, "hidden": 150, "gs_f": 3,
    "epochs": 30, "batch_size": 256, "lr": 0.002, "seed": 0, "checkpoint_every": 0,
}


def _load_split(data_dir: str):
    data = Path(data_dir)
    train_file = data / "train.gwds" if data.is_dir() else data
    test_file = data / "test.gwds" if data.is_dir() else data
    _, train_samples = load_dataset(train_file)
    _, test_samples = load_dataset(test_file)
    return train_samples, test_samples


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_samples, test_samples = _load_split(args.data)
    m, n = train_samples[0].grid.m, train_samples[0].grid.n
    k = cfg["k"] or scaled_k(m, n, cfg["f"], cfg["kprime"])
    model_config = ModelConfig(cfg["variant"], cfg["f"], k,
                               reward_hidden_channels=cfg["hidden"],
                               gs_kernel_size=cfg["gs_f"])
    train_config = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                               learning_rate=cfg["lr"], seed=cfg["seed"],
                               checkpoint_every=cfg["checkpoint_every"])
    _write_manifest(out_dir, "train",
                    {**cfg, "k": k, "data": str(args.data), "map": [m, n]})

    record_path = out_dir / "run_record.jsonl"
    checkpoint_path = out_dir / "checkpoint.ckpt"
    model, record = train(
        model_config, train_samples, test_samples, train_config,
        checkpoint_path=checkpoint_path if cfg["checkpoint_every"] else None,
        log=lambda e: print(f"epoch {e.epoch:3d}  train loss {e.train_loss:.4f} "
                            f"acc {e.train_accuracy:.4f}  val loss {e.val_loss:.4f} "
                            f"acc {e.val_accuracy:.4f}"),
    )
    record_path.write_text("\n".join(record.epoch_lines()) + "\n")
    (out_dir / "summary.json").write_text(json.dumps(record.summary(), indent=2, sort_keys=True))
    save_model(checkpoint_path, model, extra_config={"train": train_config.to_dict()})
    print(f"status: {record.status}"
          + (f" ({record.divergence_trigger} at epoch {record.divergence_epoch})"
             if record.status == "diverged" else ""))
    print(f"wrote {checkpoint_path}")
    return EXIT_OK


EVAL_DEFAULTS = {"episodes": 512, "budget": 0}


def cmd_eval(args) -> int:
    cfg = _resolve(args, EVAL_DEFAULTS)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, _, _ = load_model(args.checkpoint)
    _, samples = load_dataset(args.data)
    report = evaluate(model, samples,
                      step_budget=cfg["budget"] or None,
                      max_episodes=cfg["episodes"] or None)
    _write_manifest(out_dir, "eval",
                    {**cfg, "checkpoint": str(args.checkpoint), "data": str(args.data)})
    (out_dir / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    print(f"accuracy      {report.accuracy:.4f}  ({report.n_samples} samples)")
    print(f"success rate  {report.success_rate:.4f}  ({report.n_episodes} episodes)")
    print(f"traj diff     {report.traj_diff if report.traj_diff is not None else 'undefined'}")
    print(f"wrote {out_dir / 'eval_report.json'}")
    return EXIT_OK


SWEEP_DEFAULTS = {
    "variant": "GSVIN", "f_list": (3, 5, 7), "kprime_list": (0.5, 1.0),
    "replicates": 1, "epochs": 30, "batch_size": 256, "lr": 0.002,
    "seed": 0, "episodes": 256, "hidden": 150,
}


def cmd_sweep(args) -> int:
    cfg = _resolve(args, SWEEP_DEFAULTS)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_samples, test_samples = _load_split(args.data)
    m, n = train_samples[0].grid.m, train_samples[0].grid.n
    spec = SweepSpec(
        variant=cfg["variant"], map_height=m, map_width=n,
        f_values=tuple(cfg["f_list"]), kprime_values=tuple(cfg["kprime_list"]),
        train_config=TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                                 learning_rate=cfg["lr"]),
        replicates=cfg["replicates"], base_seed=cfg["seed"],
        eval_episodes=cfg["episodes"] or None,
        reward_hidden_channels=cfg["hidden"],
    )
    _write_manifest(out_dir, "sweep", {**cfg, "data": str(args.data), "map": [m, n]})
    cells = run_sweep(spec, train_samples, test_samples,
                      log=lambda c: print(f"f={c.f} k'={c.k_prime} k={c.k} seed={c.seed}: "
                                          + (f"accuracy {c.accuracy:.4f}"
                                             if c.status == "completed" else "*")))
    write_sweep_csv(out_dir / "sweep.csv", cells)
    (out_dir / "sweep_summary.json").write_text(
        json.dumps(sweep_summary(spec, cells), indent=2, sort_keys=True))
    print(f"wrote {out_dir / 'sweep.csv'}")
    return EXIT_OK


HEURISTIC_DEFAULTS = {"size": 32, "f": 0,
                      "f_list": REFERENCE_F_VALUES,
                      "kprime_list": REFERENCE_KPRIME_VALUES}


def cmd_heuristic(args) -> int:
    cfg = _resolve(args, HEURISTIC_DEFAULTS)
    size = cfg["size"]
    if cfg["f"]:
        print(heuristic_k(size, size, cfg["f"]))
        return EXIT_OK
    f_values = tuple(cfg["f_list"])
    kprime_values = tuple(cfg["kprime_list"])
    table = iteration_table(size, size, f_values, kprime_values)
    header = "k'\\f " + " ".join(f"{f:>4d}" for f in f_values)
    print(f"iteration counts for a {size}x{size} map")
    print(header)
    for kp in kprime_values:
        print(f"{kp:<5g}" + " ".join(f"{table[(f, kp)]:>4d}" for f in f_values))
    if args.verify_table4:
        if size != 32:
            raise ValueError("--verify-table4 applies to the 32x32 reference grid")
        mismatches = []
        for kp, row in REFERENCE_K_32X32.items():
            for f, expected in zip(REFERENCE_F_VALUES, row):
                got = scaled_k(32, 32, f, kp)
                if got != expected:
                    mismatches.append(f"f={f}, k'={kp}: computed {got}, reference {expected}")
        if mismatches:
            raise CheckFailure("reference grid mismatches:\n  " + "\n  ".join(mismatches))
        print(f"verified: all {sum(len(r) for r in REFERENCE_K_32X32.values())} "
              "reference iteration counts reproduced")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    results = run_selfcheck(seed=args.seed, full=args.full)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    failed = [r for r in results if not r.passed]
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        out_dir.joinpath("selfcheck.json").write_text(json.dumps(
            [dataclasses.asdict(r) for r in results], indent=2))
    if failed:
        raise CheckFailure(f"{len(failed)} of {len(results)} checks failed")
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_export(args) -> int:
    runs_dir = Path(args.runs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"runs": [], "sweeps": [], "evals": []}
    lines = ["# Consolidated run report", ""]

    for summary_path in sorted(runs_dir.glob("**/summary.json")):
        summary = json.loads(summary_path.read_text())
        summary["path"] = str(summary_path.parent)
        report["runs"].append(summary)
        lines.append(f"- run `{summary_path.parent.name}`: status {summary.get('status')}, "
                     f"final accuracy {summary.get('final_accuracy')}")
    for eval_path in sorted(runs_dir.glob("**/eval_report.json")):
        data = json.loads(eval_path.read_text())
        data["path"] = str(eval_path.parent)
        report["evals"].append(data)
        lines.append(f"- eval `{eval_path.parent.name}`: accuracy {data.get('accuracy'):.4f}")
    for csv_path in sorted(runs_dir.glob("**/sweep.csv")):
        target = out_dir / f"{csv_path.parent.name}_sweep.csv"
        shutil.copyfile(csv_path, target)
        with open(csv_path, newline="") as handle:
            rows = list(csv.DictReader(handle))
        report["sweeps"].append({"path": str(csv_path.parent), "rows": rows})
        diverged = sum(r["status"] == "diverged" for r in rows)
        lines.append(f"- sweep `{csv_path.parent.name}`: {len(rows)} cells, {diverged} diverged "
                     f"(copied to {target.name})")

    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (out_dir / "report.md").write_text("\n".join(lines) + "\n")
    _write_manifest(out_dir, "export", {"runs": str(runs_dir)})
    print(f"wrote {out_dir / 'report.json'} ({len(report['runs'])} runs, "
          f"{len(report['sweeps'])} sweeps, {len(report['evals'])} evals)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridplan",
        description="Differentiable grid-world planners: datasets, training, evaluation, sweeps.",
    )
    parser.add_argument("--version", action="version", version=f"gridplan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate and serialize a labelled dataset")
    p.add_argument("--size", type=int, help="square map side length")
    p.add_argument("--maps", type=int, help="number of obstacle layouts")
    p.add_argument("--pairs", type=int, help="agent/goal pairs per layout")
    p.add_argument("--density", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--split", type=float, help="train fraction of maps")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one planner on a dataset")
    p.add_argument("--data", required=True, help="dataset directory (train.gwds/test.gwds)")
    p.add_argument("--variant", choices=("VIN", "VIRN", "GSVIN"))
    p.add_argument("--f", type=int, help="value-iteration kernel size")
    p.add_argument("--kprime", type=float, help="iteration coefficient")
    p.add_argument("--k", type=int, help="explicit iteration count (overrides --kprime)")
    p.add_argument("--hidden", type=int, help="reward head hidden channels")
    p.add_argument("--gs-f", dest="gs_f", type=int, help="gate kernel size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file (e.g. test.gwds)")
    p.add_argument("--episodes", type=int, help="rollout episodes (0 = accuracy only)")
    p.add_argument("--budget", type=int, help="step budget (default m*n)")
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train across a kernel-size x coefficient grid")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=("VIN", "VIRN", "GSVIN"))
    p.add_argument("--f-list", dest="f_list", type=_parse_int_list, metavar="3,5,7")
    p.add_argument("--kprime-list", dest="kprime_list", type=_parse_float_list,
                   metavar="0.5,1.0")
    p.add_argument("--replicates", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("heuristic", help="print adaptive iteration counts")
    p.add_argument("--size", type=int, help="square map side length (default 32)")
    p.add_argument("--f", type=int, help="print the count for one kernel size")
    p.add_argument("--f-list", dest="f_list", type=_parse_int_list, metavar="3,5,...")
    p.add_argument("--kprime-list", dest="kprime_list", type=_parse_float_list,
                   metavar="0.5,...")
    p.add_argument("--verify-table4", action="store_true",
                   help="check the 32x32 grid against the embedded reference values")
    p.add_argument("--config", help="TOML or JSON config file")
    p.set_defaults(func=cmd_heuristic)

    p = sub.add_parser("selfcheck", help="run gradient, oracle, and determinism suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full", action="store_true", help="run the larger acceptance-sized suites")
    p.add_argument("--out", help="optionally write selfcheck.json here")
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("export", help="consolidate run records and sweep tables")
    p.add_argument("--runs", required=True, help="directory tree containing run outputs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (GenerationError, FormatError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
