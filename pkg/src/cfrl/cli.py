"""Command-line entry point: ``cfrl <command> --config run.json [options]``.

Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 numeric failure.
On failure one line ``cfrl-error {json}`` is written to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import harness
from .config import ConfigError, RunConfig, load_config
from .numkit import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("pretrain", "train-csp", "train", "eval", "compare", "sweep")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cfrl", description="Counterfactual replay augmentation experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run config (absent keys take defaults)")
    p.add_argument("--seed", type=int, help="run a single seed instead of the config's seeds")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--augment", choices=("on", "off"), help="override augment.enabled")
    p.add_argument("--kind", choices=harness.AGENT_KINDS, help="agent kind for train")
    p.add_argument("--checkpoint", help="agent checkpoint directory for eval")
    p.add_argument("--values", help="comma-separated hidden sizes for sweep (default 64,128,256)")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    kw = {}
    if args.seed is not None:
        kw["seeds"] = (args.seed,)
    if args.out:
        kw["output_dir"] = args.out
    if args.kind:
        kw["kind"] = args.kind
    if args.augment:
        kw["augment"] = replace(cfg.augment, enabled=args.augment == "on")
    return replace(cfg, **kw)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def run(args) -> int:
    cfg = resolve_config(args)
    seeds = cfg.seeds
    cmd = args.command
    if cmd == "pretrain":
        _emit(harness.cmd_pretrain(cfg, seeds[0]))
    elif cmd == "train-csp":
        _emit(harness.cmd_train_csp(cfg, seeds[0]))
    elif cmd == "train":
        for seed in seeds:
            _emit(harness.cmd_train(cfg, seed))
    elif cmd == "eval":
        if not args.checkpoint:
            raise ConfigError("eval requires --checkpoint")
        for seed in seeds:
            r = harness.cmd_eval(cfg, args.checkpoint, seed)
            print(f"eval seed={seed} episodes={r['episodes']} avg_reward={r['eval_avg_reward']!r} ctr={r['eval_ctr']!r}")
    elif cmd == "compare":
        report = harness.cmd_compare(cfg)
        print(harness.format_table(report))
        if report["failures"]:
            raise RuntimeError(f"{len(report['failures'])} compare cells failed; see failures.json")
    elif cmd == "sweep":
        values = harness.SWEEP_VALUES
        if args.values:
            try:
                values = tuple(int(v) for v in args.values.split(","))
            except ValueError:
                raise ConfigError(f"--values must be comma-separated integers, got {args.values!r}") from None
        res = harness.cmd_sweep(cfg, values)
        for row in res["rows"]:
            _emit(row)
    return EXIT_OK


def _fail(code: int, kind: str, message: str) -> int:
    print("cfrl-error " + json.dumps({"code": code, "kind": kind, "message": message}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return run(args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", str(e))
    except FileNotFoundError as e:
        return _fail(EXIT_MISSING, "missing_artifact", str(e))
    except (NumericError, FloatingPointError) as e:
        return _fail(EXIT_NUMERIC, "numeric", str(e))
    except Exception as e:
        return _fail(1, "error", f"{type(e).__name__}: {e}")


if __name__ == "__main__":
    sys.exit(main())
