"""Command-line entry point: ``prslab {train,attack,analyze,regress}``.

Exit codes: 0 success, 2 validation error, 3 data error (unreadable or mismatched
inputs, degenerate regression), 4 runtime error.
Failures print one line to stderr: ``error: <ErrorClass>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import nullcontext
from pathlib import Path

from . import experiment as E
from .data import DataConsistencyError, DataFormatError
from .nn import CheckpointError, load_checkpoint
from .stats import DegenerateRegressionError

EXIT_OK, EXIT_VALIDATION, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


class UsageError(ValueError):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prslab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True):
        sp.add_argument("--config", help="config JSON, run directory, or recipe name")
        if checkpoint:
            sp.add_argument("--checkpoint", help="checkpoint file or run directory")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, help="BLAS thread limit")
        sp.add_argument("--quiet", action="store_true")

    common(sub.add_parser("train", help="train a model (or a sweep) into a run directory"), checkpoint=False)
    common(sub.add_parser("attack", help="robust accuracy over an attack x epsilon grid"))
    common(sub.add_parser("analyze", help="region and similarity reports for a checkpoint"))
    r = sub.add_parser("regress", help="OLS of PRS ratio against robustness properties")
    r.add_argument("reports", nargs="+", help="report.json files or directories to search")
    r.add_argument("--out", help="output directory")
    r.add_argument("--threads", type=int)
    r.add_argument("--quiet", action="store_true")
    return p


def _find_config(checkpoint: Path) -> Path:
    for d in [checkpoint.parent, *checkpoint.parents]:
        if (d / "config.json").exists():
            return d / "config.json"
    raise UsageError("--config not given and no config.json found above the checkpoint")


def _resolve(args) -> tuple:
    ck = None
    if getattr(args, "checkpoint", None):
        ck = Path(args.checkpoint)
        if ck.is_dir():
            ck = ck / "checkpoints" / "final.ckpt"
        if not ck.exists():
            raise UsageError(f"checkpoint not found: {ck}")
    ref = args.config or (str(_find_config(ck)) if ck is not None else None)
    if ref is None:
        raise UsageError("--config is required")
    cfg = E.load_config(ref)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return E.validate_config(cfg), ck


def _load_model(ck: Path, cfg: dict):
    model, _ = load_checkpoint(ck)
    train, _ = E.load_datasets(cfg)
    if tuple(model.input_shape) != tuple(train.input_shape):
        raise CheckpointError(f"checkpoint expects inputs {tuple(model.input_shape)}, "
                              f"dataset provides {tuple(train.input_shape)}")
    if model.num_classes != train.num_classes:
        raise CheckpointError(f"checkpoint has {model.num_classes} classes, dataset {train.num_classes}")
    return model


def _out(args, cfg, default: str) -> Path:
    return Path(args.out or cfg.get("out") or default)


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    log = (lambda *a, **k: None) if args.quiet else print
    try:
        from threadpoolctl import threadpool_limits
        limits = threadpool_limits(args.threads) if args.threads else nullcontext()
        with limits:
            if args.command == "regress":
                reports = E.collect_reports(args.reports)
                out = Path(args.out or "regression")
                E.run_regress(reports, out)
                log((out / "regression.txt").read_text(), end="")
                return EXIT_OK
            cfg, ck = _resolve(args)
            if args.command == "train":
                out = _out(args, cfg, f"runs/{cfg['name']}")
                reports = E.run_train(cfg, out, log=log)
                log(f"wrote {len(reports)} report(s) under {out}")
            elif args.command == "attack":
                if ck is None:
                    raise UsageError("--checkpoint is required")
                out = _out(args, {}, str(ck.parent.parent / "attack"))
                rows = E.run_attack_cmd(_load_model(ck, cfg), cfg, out, log=log)
                if not rows:
                    log("no attacks configured")
            else:
                if ck is None:
                    raise UsageError("--checkpoint is required")
                out = _out(args, {}, str(ck.parent.parent / "analysis"))
                summary = E.run_analyze(_load_model(ck, cfg), cfg, out, log=log)
                log(json.dumps({k: v for k, v in summary.items() if k != "prs"}, sort_keys=True))
        return EXIT_OK
    except (E.ConfigError, UsageError) as e:
        return _fail(EXIT_VALIDATION, e)
    except (DataFormatError, DataConsistencyError, CheckpointError, DegenerateRegressionError,
            FileNotFoundError) as e:
        return _fail(EXIT_DATA, e)
    except Exception as e:  # noqa: BLE001 - every failure maps to an exit code
        return _fail(EXIT_RUNTIME, e)


def _fail(code: int, exc: Exception) -> int:
    msg = " ".join(str(exc).split())
    print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
