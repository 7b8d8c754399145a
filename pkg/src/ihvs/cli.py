"""Command-line entry point: ``ihvs <command> [options]``.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__

ARTIFACTS = {
    "dataset": "dataset.ihvs",
    "checkpoint": "checkpoint.ihvsm",
    "latmap": "latmap.csv",
    "pos_stats": "pos_stats.json",
    "pack_reports": "pack_reports.json",
    "success_curve": "success_curve.csv",
    "manifest": "manifest.json",
}

log = logging.getLogger("ihvs")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("IHVS_THREADS", "1")))
    except ValueError:
        return 1


def _parse_set(items: List[str]) -> Dict[str, object]:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("--preset", choices=["wide", "tight"], help="geometry preset")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                        help="override any config key (value parsed as JSON)")
    common.add_argument("--no-plots", action="store_true", help="skip matplotlib figures")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ihvs", description="In-hand-view-sensitive NVAE pipeline")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    c = sub.add_parser("collect", parents=[common], help="collect the random-walk dataset")
    c.add_argument("--episodes", type=int, dest="n_episodes")
    c.add_argument("--T", type=int, dest="T")

    c = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    c.add_argument("--dataset", help="dataset file (default: OUT/dataset.ihvs)")
    c.add_argument("--epochs", type=int)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    c.add_argument("--checkpoint", help="model to check (default: freshly initialised)")
    c.add_argument("--dataset", help="dataset to draw the batch from (default: 2 fresh episodes)")
    c.add_argument("--epsilon", type=float, default=1e-5)
    c.add_argument("--per-group", type=int, default=200)
    c.add_argument("--batch", type=int, default=2)
    c.add_argument("--threshold", type=float, default=1e-4)

    c = sub.add_parser("latmap", parents=[common], help="latent map and affine-fit R^2")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--grid", type=int)

    c = sub.add_parser("eval-pos", parents=[common], help="positioning accuracy trials")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--trials", type=int, dest="n_trials")

    c = sub.add_parser("pack", parents=[common], help="sequential packing trials")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--trials", type=int, dest="n_pack_trials")
    c.add_argument("--stages", type=int, dest="n_stages")

    c = sub.add_parser("eval-seq", parents=[common], help="success curve from pack reports")
    c.add_argument("--reports", help="pack_reports.json (default: OUT/pack_reports.json)")
    c.add_argument("--conditional", action="store_true", default=None)
    return p


def _flag_overrides(args) -> Dict[str, object]:
    out = _parse_set(args.set)
    for key in ("seed", "preset", "n_episodes", "T", "epochs", "grid", "n_trials",
                "n_pack_trials", "n_stages", "conditional"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _versions() -> dict:
    import torch

    return {"ihvs": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "torch": torch.__version__}


def _write_manifest(out: Path, args, argv, rc, outputs: Dict[str, str]) -> None:
    from .sim import sim_version_hash

    manifest = {
        "command": args.command,
        "argv": list(argv),
        "seed": rc["seed"],
        "resolved": rc.values,
        "provenance": rc.provenance,
        "versions": _versions(),
        "sim_version": sim_version_hash(),
        "outputs": outputs,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out / ARTIFACTS["manifest"]).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _run(args, rc, out: Path) -> Dict[str, str]:
    from . import checkpoint as ckpt
    from . import control, dataset, evaluation, train

    plots = not args.no_plots
    outputs: Dict[str, str] = {}
    sim_cfg = rc.sim_config()
    seed = int(rc["seed"])

    def emit(key: str, name: str, text: str):
        (out / name).write_text(text)
        outputs[key] = name

    if args.command == "collect":
        ds = dataset.collect_dataset(sim_cfg, int(rc["n_episodes"]), seed, int(rc["T"]),
                                     stages=list(rc["collect_stages"]))
        dataset.write_dataset(ds, out / ARTIFACTS["dataset"])
        outputs["dataset"] = ARTIFACTS["dataset"]
        print(f"collected {len(ds.episodes)} episodes, {ds.n_transitions} transitions "
              f"-> {out / ARTIFACTS['dataset']}")

    elif args.command == "train":
        ds = dataset.read_dataset(args.dataset or out / ARTIFACTS["dataset"])
        model, report = train.train(ds, rc.train_config(), progress=args.verbose)
        ckpt.save_checkpoint(model, out / ARTIFACTS["checkpoint"], step=report.steps,
                             extra={"train": rc.train_config().to_dict(),
                                    "preset": rc["preset"], "seed": seed})
        outputs["checkpoint"] = ARTIFACTS["checkpoint"]
        emit("train_report", "train_report.csv", report.to_csv())
        if plots:
            from .plotting import plot_training
            outputs["train_plot"] = plot_training(report, out / "train_curve.png").name
        last = report.records[-1] if report.records else report.initial
        print(f"trained {report.steps} steps in {report.wall_clock:.0f}s; "
              f"loss {report.initial.total:.1f} -> {last.total:.1f}")

    elif args.command == "gradcheck":
        from .model import build_model
        if args.checkpoint:
            model, _ = ckpt.load_checkpoint(args.checkpoint)
        else:
            model = build_model(rc.model_config(), seed=seed)
        ds = (dataset.read_dataset(args.dataset) if args.dataset
              else dataset.collect_dataset(sim_cfg, 2, seed, int(rc["T"])))
        data = train.DatasetTensors(ds)
        idx = np.random.default_rng(seed).choice(len(data.triples), size=args.batch, replace=False)
        res = train.grad_check(model, data.batch(idx), args.epsilon, n_per_group=args.per_group,
                               seed=seed, cfg=rc.train_config())
        body = {"epsilon": args.epsilon, "max_rel_error": res.max_rel_error,
                "per_group": res.per_group, "n_checked": res.n_checked,
                "threshold": args.threshold, "passed": res.max_rel_error < args.threshold}
        emit("gradcheck", "gradcheck.json", json.dumps(body, indent=1, sort_keys=True) + "\n")
        print(f"max relative error {res.max_rel_error:.3e} "
              f"({'PASS' if body['passed'] else 'FAIL'} at {args.threshold:g})")
        if not body["passed"]:
            outputs["_exit"] = "1"

    elif args.command == "latmap":
        model, _ = ckpt.load_checkpoint(args.checkpoint)
        table = evaluation.latent_map(model, sim_cfg, int(rc["grid"]), float(rc["walk_half"]))
        emit("latmap", ARTIFACTS["latmap"], table.to_csv())
        fit = evaluation.affine_fit_r2(table)
        emit("latmap_fit", "latmap_fit.json", json.dumps(
            {"r2": list(fit.r2), "matrix": fit.matrix.tolist(), "offset": fit.offset.tolist()},
            indent=1) + "\n")
        if plots:
            from .plotting import plot_latent_map
            outputs["latmap_plot"] = plot_latent_map(table, out / "latmap.png").name
        print(f"affine fit R^2: x={fit.r2[0]:.4f} y={fit.r2[1]:.4f}")

    elif args.command == "eval-pos":
        model, _ = ckpt.load_checkpoint(args.checkpoint)
        stats = evaluation.positioning_trials(model, sim_cfg, rc.controller_config(),
                                              int(rc["n_trials"]), seed, float(rc["walk_half"]))
        emit("pos_stats", ARTIFACTS["pos_stats"], stats.to_json() + "\n")
        if plots:
            from .plotting import plot_errors
            outputs["pos_plot"] = plot_errors(stats, out / "pos_errors.png").name
        print(f"positioning error {stats.mean_error * 1e3:.2f} +- {stats.std_error * 1e3:.2f} mm "
              f"over {stats.n_trials} trials")

    elif args.command == "pack":
        model, _ = ckpt.load_checkpoint(args.checkpoint)
        cfg = rc.controller_config()
        reports = [control.pack_sequence(sim_cfg, model, cfg, int(rc["n_stages"]),
                                         control.pack_trial_rng(seed, i), seed=seed)
                   for i in range(int(rc["n_pack_trials"]))]
        emit("pack_reports", ARTIFACTS["pack_reports"], control.reports_to_json(reports) + "\n")
        emit("pack_trials", "pack_trials.csv", control.reports_to_csv(reports))
        ok = sum(r.success for r in reports)
        print(f"{ok}/{len(reports)} trials fully successful")

    elif args.command == "eval-seq":
        from .control import PackReport, StageRecord
        src = Path(args.reports) if args.reports else out / ARTIFACTS["pack_reports"]
        raw = json.loads(src.read_text())
        reports = [PackReport([StageRecord(s["stage"], s["success"], s["final_tcp_error"],
                                           s["steps_used"], s["delta"], tuple(s["landing"]),
                                           s["collision"]) for s in r["stages"]], r.get("seed"))
                   for r in raw]
        rates = evaluation.success_curve(reports, conditional=bool(rc["conditional"]))
        emit("success_curve", ARTIFACTS["success_curve"], evaluation.success_curve_csv(rates))
        if plots:
            from .plotting import plot_success_curve
            outputs["success_plot"] = plot_success_curve(
                rates, out / "success_curve.png", label=rc["preset"]).name
        print("success rate per stage: " + ", ".join(f"{r:.2f}" for r in rates))
    return outputs


def main(argv: Optional[List[str]] = None) -> int:
    from .checkpoint import CheckpointError
    from .config import load_config
    from .dataset import DatasetFormatError
    from .evaluation import DegenerateFitError
    from .sim import ConfigError, StateError
    from .train import TrainingDivergedError

    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    import torch

    torch.set_num_threads(_threads())
    try:
        overrides = _flag_overrides(args)
        rc = load_config(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        outputs = _run(args, rc, out)
        code = int(outputs.pop("_exit", 0))
        _write_manifest(out, args, argv, rc, outputs)
        return code
    except argparse.ArgumentTypeError as exc:
        parser.print_usage(sys.stderr)
        print(f"ihvs: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, StateError, DatasetFormatError, CheckpointError, TrainingDivergedError,
            DegenerateFitError, FileNotFoundError, ValueError) as exc:
        print(f"ihvs: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
