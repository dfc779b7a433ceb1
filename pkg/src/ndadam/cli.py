"""Command-line entry points: run, compare, probe-softmax."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    DEFAULT_ETAS,
    ConfigError,
    ExperimentConfig,
    NanLossError,
    compare,
    probe_softmax,
    run,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NAN = 3


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    log = run(config)
    final = log.final
    print(f"run complete: {len(log.epochs)} epochs, outputs in {log.output_dir}")
    print(
        f"final train loss {final.train_loss:.4f}, train acc {final.train_accuracy:.4f}, "
        f"test loss {final.test_loss:.4f}, test acc {final.test_accuracy:.4f}"
    )
    return EXIT_OK


def _cmd_compare(args) -> int:
    with open(args.config) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    if not isinstance(data, dict) or "experiments" not in data:
        raise ConfigError('compare config must be an object with an "experiments" list')
    stray = set(data) - {"experiments", "output_dir"}
    if stray:
        raise ConfigError(f"compare config: unknown keys {sorted(stray)}")
    configs = [ExperimentConfig.from_dict(entry) for entry in data["experiments"]]
    seeds = _parse_seeds(args.seeds)
    result = compare(
        configs,
        seeds,
        allow_model_mismatch=args.allow_model_mismatch,
        output_dir=data.get("output_dir"),
    )
    print(result["table"])
    return EXIT_OK


def _cmd_probe(args) -> int:
    etas = _parse_floats(args.etas) if args.etas else list(DEFAULT_ETAS)
    logits = _parse_floats(args.logits) if args.logits else None
    output = Path(args.output) if args.output else None
    rows = probe_softmax(
        num_classes=args.classes,
        etas=etas,
        target=args.target,
        seed=args.seed,
        logits=logits,
        output_path=output,
    )
    if output is None:
        print("eta,class,ratio")
        for eta, c, ratio in rows:
            print(f"{eta!r},{c},{ratio!r}")
    else:
        print(f"wrote {len(rows)} rows to {output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ndadam",
        description="Train and compare sphere-constrained Adam against SGD and Adam baselines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one experiment from a JSON config")
    p_run.add_argument("--config", required=True, help="path to the experiment config")
    p_run.set_defaults(func=_cmd_run)

    p_cmp = sub.add_parser("compare", help="run several configs over seeds and tabulate")
    p_cmp.add_argument("--config", required=True, help='JSON with an "experiments" list')
    p_cmp.add_argument("--seeds", required=True, help="comma-separated seeds, e.g. 0,1,2")
    p_cmp.add_argument("--allow-model-mismatch", action="store_true",
                       help="permit configs that differ beyond optimizer/head")
    p_cmp.set_defaults(func=_cmd_compare)

    p_probe = sub.add_parser("probe-softmax", help="logit-gradient ratio sweep")
    p_probe.add_argument("--classes", type=int, default=None)
    p_probe.add_argument("--etas", default=None, help="comma-separated scaling factors")
    p_probe.add_argument("--target", type=int, default=0)
    p_probe.add_argument("--seed", type=int, default=0)
    p_probe.add_argument("--logits", default=None, help="explicit comma-separated logits")
    p_probe.add_argument("--output", default=None, help="CSV output path")
    p_probe.set_defaults(func=_cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NanLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
