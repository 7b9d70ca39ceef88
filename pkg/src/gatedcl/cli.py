"""Command-line entry point.

Subcommands: prepare-data, train, evaluate, analyze, inspect-checkpoint.
Usage/configuration problems exit 2, runtime failures exit 1, both with a
machine-readable JSON error record on stderr. Input data directories are
never written to.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import torch

from . import data as data_mod
from .analysis import (AccuracyMatrix, RunArtifacts, gate_firing_report,
                       mac_count, emit_reports)
from .backbone import ArchSpec, ContinualGatedNet
from .checkpointing import load_checkpoint
from .config import TrainConfig, profile_config
from .consolidation import RelevanceTable, capacity_report
from .errors import ConfigError, DataError, GatedCLError
from .replay import EpisodicBuffer
from .trainer import ContinualTrainer, evaluate, rebuild_model, setup_determinism

DATA_DIR_ENV = "GATEDCL_DATA_DIR"


def _data_dir(value: str | None) -> str:
    path = value or os.environ.get(DATA_DIR_ENV)
    if not path:
        raise ConfigError(
            f"no data directory: pass --data or set {DATA_DIR_ENV}")
    return path


def _build_stream(args, config: TrainConfig):
    if getattr(args, "synthetic", False):
        return data_mod.synthetic_stream(seed=config.seed)
    return data_mod.load_split_mnist(_data_dir(args.data),
                                     val_fraction=config.val_fraction,
                                     seed=config.seed)


def stream_from_manifest(manifest: dict, data_dir: str | None):
    if manifest["source"] == "synthetic":
        return data_mod.synthetic_stream(
            num_tasks=manifest["num_tasks"],
            classes_per_task=manifest["classes_per_task"],
            image_size=manifest["image_size"],
            seed=manifest["seed"])
    if manifest["source"] == "split_mnist":
        return data_mod.load_split_mnist(
            _data_dir(data_dir), order=manifest.get("order"),
            val_fraction=manifest["val_fraction"], seed=manifest["seed"])
    raise DataError(f"cannot rebuild stream of source {manifest['source']!r}")


def cmd_prepare_data(args) -> int:
    data_dir = _data_dir(args.data)
    paths = data_mod.mnist_paths(data_dir)
    train_x, train_y = data_mod.load_idx_dataset(paths["train_images"],
                                                 paths["train_labels"])
    test_x, test_y = data_mod.load_idx_dataset(paths["test_images"],
                                               paths["test_labels"])
    stream = data_mod.build_split_stream(train_x, train_y, test_x, test_y,
                                         seed=args.seed, source="split_mnist")
    manifest = stream.manifest()
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


def _train_config(args) -> TrainConfig:
    overrides = {}
    if args.config:
        config = TrainConfig.from_file(args.config)
        base = config.to_dict()
    else:
        base = dict()
    for key, value in (("seed", args.seed), ("buffer_capacity", args.buffer),
                       ("mode", args.mode), ("threads", args.threads)):
        if value is not None:
            overrides[key] = value
    if args.config:
        base.update(overrides)
        return TrainConfig.from_dict(base)
    return profile_config(args.profile, **overrides)


def cmd_train(args) -> int:
    config = _train_config(args)
    flags = setup_determinism(config.seed, config.threads)
    stream = _build_stream(args, config)
    generator = torch.Generator().manual_seed(config.seed)
    model = ContinualGatedNet(_arch_for_stream(stream), generator)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    trainer = ContinualTrainer(model, stream, config, run_dir=args.out)
    start = time.time()
    trainer.run()
    wall = time.time() - start
    with open(os.path.join(args.out, "timing.json"), "w") as f:
        json.dump({"wall_seconds": round(wall, 3), **flags}, f, indent=2,
                  sort_keys=True)
    final = trainer.outcomes[-1]
    print(json.dumps({"completed_tasks": trainer.completed_tasks,
                      "ti": final.ti_eval, "ci": final.ci_eval,
                      "run_dir": args.out}, indent=2, sort_keys=True))
    return 0


def _arch_for_stream(stream) -> ArchSpec:
    td = stream.tasks[0]
    c, h, w = td.train_x.shape[1:]
    arch = ArchSpec.simple_cnn()
    arch.in_channels = int(c)
    arch.image_hw = (int(h), int(w))
    return arch


def cmd_evaluate(args) -> int:
    tensors, meta = load_checkpoint(args.checkpoint)
    config = TrainConfig.from_dict(meta["config"])
    setup_determinism(config.seed, config.threads)
    model = rebuild_model(tensors, meta)
    stream = stream_from_manifest(meta["stream_manifest"], args.data)
    result = evaluate(model, stream, args.mode,
                      strict_mask=config.strict_mask)
    payload = result.summary()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, f"eval_{args.mode}.json"), "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_analyze(args) -> int:
    run_dir = args.run
    ckpt = os.path.join(run_dir, "final.ckpt")
    if not os.path.exists(ckpt):
        raise DataError(f"no final checkpoint under {run_dir}")
    tensors, meta = load_checkpoint(ckpt)
    config = TrainConfig.from_dict(meta["config"])
    setup_determinism(config.seed, config.threads)
    model = rebuild_model(tensors, meta)
    stream = stream_from_manifest(meta["stream_manifest"], args.data)
    buffer = EpisodicBuffer(config.buffer_capacity)
    buffer.load_state_tensors(tensors)
    relevance = RelevanceTable()
    for name, val in tensors.items():
        if name.startswith("relevance.site"):
            body = name[len("relevance.site"):]
            site_s, task_s = body.split(".task")
            relevance.put(int(site_s), int(task_s), val)
    generator = torch.Generator().manual_seed(config.seed)
    mac_reports = {"dense": mac_count(model, None, "dense")}
    mac_reports["ti"] = mac_count(model, stream, "ti",
                                  strict_mask=config.strict_mask)
    if meta.get("has_task_classifier"):
        mac_reports["ci"] = mac_count(model, stream, "ci",
                                      strict_mask=config.strict_mask)
    firing = gate_firing_report(
        model, stream, samples_per_input=config.relevance_samples_per_input,
        stochastic=config.relevance_stochastic, generator=generator)
    accuracy = AccuracyMatrix.from_rows(meta["acc_rows"])
    ci_by_cap = {}
    final_ci = [o["ci_eval"] for o in meta["outcomes"] if o["ci_eval"]]
    if final_ci:
        ci_by_cap[config.buffer_capacity] = final_ci[-1]["average"]
    artifacts = RunArtifacts(manifest=meta, accuracy=accuracy,
                             mac_reports=mac_reports, firing=firing,
                             relevance=relevance, buffer_stats=buffer.stats(),
                             ci_accuracy_by_capacity=ci_by_cap)
    written = emit_reports(artifacts, args.out)
    print(json.dumps({"written": written}, indent=2))
    return 0


def cmd_inspect(args) -> int:
    tensors, meta = load_checkpoint(args.checkpoint)
    model = rebuild_model(tensors, meta)
    report = capacity_report(model)
    payload = {
        "arch": meta["arch"],
        "config_hash": meta["config_hash"],
        "seed": meta["config"]["seed"],
        "completed_tasks": meta["completed_tasks"],
        "consolidated": meta["consolidated"],
        "capacity": report.to_dict(),
        "sections": len(tensors),
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gatedcl",
        description="Channel-gated continual learning: train, evaluate, analyze.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="validate a data directory and "
                       "emit the task-stream manifest")
    p.add_argument("--data", help=f"dataset directory (or ${DATA_DIR_ENV})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the manifest JSON here")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="run the sequential training protocol")
    p.add_argument("--config", help="JSON/YAML config file")
    p.add_argument("--profile", default="desk", choices=["paper", "desk"])
    p.add_argument("--data", help=f"dataset directory (or ${DATA_DIR_ENV})")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--mode", choices=["ti", "ci"])
    p.add_argument("--buffer", type=int, help="episodic buffer capacity")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--synthetic", action="store_true",
                   help="use the procedural stream instead of dataset files")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--mode", required=True, choices=["ti", "ci"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="emit reports and plots for a run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("inspect-checkpoint",
                       help="print capacity and ownership summaries")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError) as e:
        json.dump({"error": type(e).__name__, "message": str(e)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except GatedCLError as e:
        json.dump({"error": type(e).__name__, "message": str(e)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
