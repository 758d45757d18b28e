"""Command-line interface.

Commands: synth | train | eval | ensemble | gradcheck.  Exit codes are a
stable contract: 0 success, 1 usage, 2 I/O or file-format failure, 3 numeric
failure.  Every command is deterministic given config + seed.  Report paths
write delimited text (key=value metrics, CSV consensus grids) with matching
PNG figures rendered alongside unless figures are disabled in the config.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Sequence

import numpy as np

from .binio import FormatError
from .checkpoint import load_params, save_params
from .config import RunConfig, UsageError, load_config
from .gradcheck import run_gradcheck
from .harness import (
    MetricsReport,
    NumericError,
    TrainResult,
    build_params,
    dims_for,
    evaluate_full,
    evaluate_ensemble,
    train,
)
from .synthdata import generate, read_split, write_split

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="m3em", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the run config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override both the data and training seeds")

    p_synth = sub.add_parser("synth", help="generate the synthetic feature files")
    common(p_synth)

    p_train = sub.add_parser("train", help="train a model on the generated features")
    common(p_train)
    p_train.add_argument("--checkpoint", default=None, help="checkpoint output path")
    p_train.add_argument("--ablation", choices=("baseline", "smr", "cmc", "full"),
                         default=None, help="override the configured ablation")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the configured split")
    common(p_eval)
    p_eval.add_argument("--checkpoint", default=None, help="checkpoint to evaluate")
    p_eval.add_argument("--ablation", choices=("baseline", "smr", "cmc", "full"),
                        default=None)
    p_eval.add_argument("--dump-consensus", action="store_true",
                        help="write one consensus-map CSV per sample")

    p_ens = sub.add_parser("ensemble", help="evaluate a weighted model ensemble")
    common(p_ens)
    p_ens.add_argument("--checkpoint", action="append", default=None,
                       help="checkpoint path (repeatable)")
    p_ens.add_argument("--weights", default=None,
                       help="comma-separated non-negative weights, one per checkpoint")
    p_ens.add_argument("--ablation", choices=("baseline", "smr", "cmc", "full"),
                       default=None)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of every op")
    common(p_grad)
    p_grad.add_argument("--corrupt-op", default=None,
                        help="testing hook: corrupt the named op's gradient")
    return parser


def _threads_from_env() -> int:
    raw = os.environ.get("M3EM_THREADS")
    if raw is None:
        return 1
    try:
        threads = int(raw)
    except ValueError as exc:
        raise UsageError(f"M3EM_THREADS must be an integer, got {raw!r}") from exc
    if threads < 1:
        raise UsageError(f"M3EM_THREADS must be >= 1, got {threads}")
    return threads


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config.data = dataclasses.replace(config.data, seed=args.seed)
        config.train = dataclasses.replace(config.train, seed=args.seed)
    if getattr(args, "ablation", None):
        config.train = dataclasses.replace(config.train, ablation=args.ablation)
    return config


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_kv(path: str, pairs: list[tuple[str, object]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in pairs:
            fh.write(f"{key}={_format_value(value)}\n")


def _write_json(path: str, pairs: list[tuple[str, object]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dict(pairs), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _config_header(config: RunConfig, command: str) -> list[tuple[str, object]]:
    t = config.train
    return [
        ("command", command),
        ("ablation", t.ablation),
        ("pearson_mode", t.pearson_mode),
        ("epochs", t.epochs),
        ("batch_size", t.batch_size),
        ("learning_rate", t.learning_rate),
        ("momentum", t.momentum),
        ("lambda_y", t.lambda_y),
        ("lambda_d", t.lambda_d),
        ("bottleneck_ratio", t.bottleneck_ratio),
        ("pyramid_levels", t.pyramid_levels),
        ("train_seed", t.seed),
        ("data_seed", config.data.seed),
    ]


def _report_pairs(report: MetricsReport, prefix: str = "") -> list[tuple[str, object]]:
    return list(report.as_dict(prefix).items())


def _checkpoint_path(args, config: RunConfig) -> str:
    if getattr(args, "checkpoint", None):
        return args.checkpoint
    return os.path.join(config.out_dir, "checkpoint.m3em")


def _load_splits(config: RunConfig, names: Sequence[str]):
    return {name: read_split(config.data_dir, name) for name in names}


def cmd_synth(args) -> int:
    config = _load_run_config(args)
    source, target = generate(config.data)
    os.makedirs(config.data_dir, exist_ok=True)
    paths = write_split(config.data_dir, "source", source)
    paths += write_split(config.data_dir, "target", target)
    for path in paths:
        print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_run_config(args)
    splits = _load_splits(config, ("source", "target"))
    result: TrainResult = train(config.train, splits["source"], splits["target"],
                                config.data.verb_classes, config.data.noun_classes)
    os.makedirs(config.out_dir, exist_ok=True)
    ckpt_path = _checkpoint_path(args, config)
    os.makedirs(os.path.dirname(ckpt_path) or ".", exist_ok=True)
    save_params(ckpt_path, result.params)

    pairs = _config_header(config, "train")
    if result.source_report:
        pairs += _report_pairs(result.source_report, "source_")
    if result.target_report:
        pairs += _report_pairs(result.target_report, "target_")
    if result.domain_disc_accuracy is not None:
        pairs.append(("domain_disc_accuracy", result.domain_disc_accuracy))
    for i, epoch in enumerate(result.epoch_losses, start=1):
        pairs.append((f"epoch_{i:03d}_loss_y", epoch.loss_y))
        pairs.append((f"epoch_{i:03d}_loss_d", epoch.loss_d))
        pairs.append((f"epoch_{i:03d}_loss", epoch.loss_total))
    txt = os.path.join(config.out_dir, "train_metrics.txt")
    _write_kv(txt, pairs)
    _write_json(os.path.join(config.out_dir, "train_metrics.json"), pairs)
    if config.figures:
        from . import figures
        if result.epoch_losses:
            figures.save_loss_curves(result.epoch_losses,
                                     os.path.join(config.out_dir, "loss_curves.png"))
        if result.target_report:
            figures.save_metrics_bars(result.target_report,
                                      os.path.join(config.out_dir, "train_target_metrics.png"),
                                      title="target split")
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics: {txt}")
    return EXIT_OK


def _load_checkpoint_into(config: RunConfig, split, path: str):
    dims = dims_for(split, config.data.verb_classes, config.data.noun_classes)
    template = build_params(config.train, dims)
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing checkpoint file: {path}")
    return load_params(path, template)


def cmd_eval(args) -> int:
    config = _load_run_config(args)
    split_name = config.eval_split
    split = _load_splits(config, (split_name,))[split_name]
    params = _load_checkpoint_into(config, split, _checkpoint_path(args, config))
    threads = _threads_from_env()
    domain = 0 if split_name == "source" else 1
    output = evaluate_full(params, split, config.train, domain=domain,
                           threads=threads, collect_consensus=args.dump_consensus)

    os.makedirs(config.out_dir, exist_ok=True)
    pairs = _config_header(config, "eval")
    pairs.append(("split", split_name))
    pairs += _report_pairs(output.report)
    txt = os.path.join(config.out_dir, "eval_metrics.txt")
    _write_kv(txt, pairs)
    _write_json(os.path.join(config.out_dir, "eval_metrics.json"), pairs)
    if config.figures:
        from . import figures
        figures.save_metrics_bars(output.report,
                                  os.path.join(config.out_dir, "eval_metrics.png"),
                                  title=f"{split_name} split")
    if args.dump_consensus:
        cdir = os.path.join(config.out_dir, "consensus")
        os.makedirs(cdir, exist_ok=True)
        for i, cmap in enumerate(output.consensus_maps):
            rows = "\n".join(",".join(repr(float(v)) for v in row) for row in cmap)
            with open(os.path.join(cdir, f"sample_{i:05d}.csv"), "w",
                      encoding="utf-8") as fh:
                fh.write(rows + "\n")
        if config.figures:
            from . import figures
            figures.save_consensus_grid(output.consensus_maps,
                                        os.path.join(config.out_dir, "consensus_grid.png"))
        print(f"consensus maps: {cdir}")
    print(f"metrics: {txt}")
    return EXIT_OK


def cmd_ensemble(args) -> int:
    config = _load_run_config(args)
    if not args.checkpoint:
        raise UsageError("ensemble requires at least one --checkpoint")
    if args.weights is None:
        weights = [1.0] * len(args.checkpoint)
    else:
        try:
            weights = [float(w) for w in args.weights.split(",")]
        except ValueError as exc:
            raise UsageError(f"bad --weights value: {exc}") from exc
    if len(weights) != len(args.checkpoint):
        raise UsageError(
            f"{len(args.checkpoint)} checkpoints but {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise UsageError("ensemble weights must be non-negative")
    if sum(weights) <= 0:
        raise UsageError("ensemble weights must not all be zero")

    split_name = config.eval_split
    split = _load_splits(config, (split_name,))[split_name]
    params_list = [_load_checkpoint_into(config, split, path) for path in args.checkpoint]
    threads = _threads_from_env()
    report = evaluate_ensemble(params_list, weights, split, config.train, threads=threads)

    os.makedirs(config.out_dir, exist_ok=True)
    pairs = _config_header(config, "ensemble")
    pairs.append(("split", split_name))
    pairs.append(("models", len(params_list)))
    pairs.append(("weights", ",".join(repr(w) for w in weights)))
    pairs += _report_pairs(report)
    txt = os.path.join(config.out_dir, "ensemble_metrics.txt")
    _write_kv(txt, pairs)
    _write_json(os.path.join(config.out_dir, "ensemble_metrics.json"), pairs)
    if config.figures:
        from . import figures
        figures.save_metrics_bars(report,
                                  os.path.join(config.out_dir, "ensemble_metrics.png"),
                                  title=f"ensemble of {len(params_list)}")
    print(f"metrics: {txt}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = _load_run_config(args)
    report = run_gradcheck(seed=config.train.seed, corrupt_op=args.corrupt_op)
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "gradcheck.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(report.lines()) + "\n")
    if config.figures:
        from . import figures
        figures.save_gradcheck_bars([c.name for c in report.checks],
                                    [c.max_err for c in report.checks], 1e-4,
                                    os.path.join(config.out_dir, "gradcheck.png"))
    for line in report.lines():
        print(line)
    if not report.all_passed:
        raise NumericError("gradient check failed; see report above")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "synth": cmd_synth,
            "train": cmd_train,
            "eval": cmd_eval,
            "ensemble": cmd_ensemble,
            "gradcheck": cmd_gradcheck,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
