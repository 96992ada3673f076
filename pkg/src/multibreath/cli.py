"""``multibreath`` command line: prepare, synth, train, evaluate, predict, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Any ``RunConfig`` key can be given as ``--key value`` (dashes or underscores);
such overrides win over ``--config file.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import FIELD_TYPES, normalize_key, resolve_config
from .errors import CheckpointError, ConfigError, DataError, MultibreathError, NumericalError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
COMMANDS = ("prepare", "synth", "train", "evaluate", "predict", "gradcheck")

# command-specific spellings that map onto config keys
ALIASES = {"per_class": "synth_per_class", "test_per_class": "synth_test_per_class"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="multibreath", description="Multi-label respiratory sound classification")
    p.add_argument("--quiet", action="store_true", help="only print errors")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="flat JSON config file")
        return sp

    sp = add("prepare", "scan a dataset directory into a manifest, summary and spectrogram cache")
    sp.add_argument("--data", required=True, help="directory of <stem>.wav / <stem>.txt pairs")
    sp.add_argument("--out", required=True, help="work directory to write")
    sp.add_argument("--no-spectrograms", action="store_true", help="only write manifest and summary")

    sp = add("synth", "generate a labeled synthetic dataset and prepare it")
    sp.add_argument("--out", required=True)

    sp = add("train", "train a model from a prepared work directory")
    sp.add_argument("--work", required=True, help="directory written by prepare or synth")
    sp.add_argument("--out", help="output directory (default: the work directory)")
    sp.epilog = "Settings from the work directory's prepare_config.json are the base layer."

    sp = add("evaluate", "ICBHI metrics of a checkpoint on one split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--work", required=True)
    sp.add_argument("--split", dest="eval_split", default="test", choices=("train", "test"))
    sp.add_argument("--out", help="directory for metrics.txt (default: next to the checkpoint)")

    sp = add("predict", "per-cycle predictions for one recording")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--audio", required=True)
    sp.add_argument("--annotations", help="ICBHI annotation file; omitted = whole file is one cycle")
    sp.add_argument("--out", help="write JSON here instead of stdout")

    sp = add("gradcheck", "run the finite-difference gradient suite")
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    return p


def _split_overrides(rest: list) -> dict:
    """``--key value`` / ``--key=value`` pairs into a dict; bare flags mean true."""
    out, i = {}, 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok.split("=", 1)
            i += 1
        elif i + 1 < len(rest) and not rest[i + 1].startswith("--"):
            key, value = tok, rest[i + 1]
            i += 2
        else:
            key, value = tok, "true"
            i += 1
        key = normalize_key(key)
        key = ALIASES.get(key, key)
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown option or config key --{key.replace('_', '-')}")
        out[key] = value
    return out


def _run(args, overrides) -> int:
    cmd = args.command
    if cmd == "gradcheck":
        from .gradcheck import run_gradient_suite
        failures = []

        def show(res):
            if not res.passed:
                failures.append(res)
                print(f"FAIL {res.case} seed={res.seed} max_rel_error={res.worst:.3e}", flush=True)

        results = run_gradient_suite(range(args.seeds), args.tolerance, progress=show)
        worst = max(results, key=lambda r: r.worst)
        print(f"gradcheck: {len(results) - len(failures)}/{len(results)} cases passed; "
              f"worst {worst.case} seed={worst.seed} max_rel_error={worst.worst:.3e}")
        return EXIT_NUMERICAL if failures else EXIT_OK

    if cmd == "predict":
        results = pipeline.predict(args.checkpoint, args.audio, args.annotations,
                                   threshold=float(overrides["threshold"]) if "threshold" in overrides else None)
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in results)
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK

    if cmd == "evaluate":
        extra = set(overrides) - {"threshold", "plots"}
        if extra:
            raise ConfigError(f"evaluate does not accept config keys {sorted(extra)}")
        cfg = resolve_config(None, overrides)
        out = args.out or str(Path(args.checkpoint).resolve().parent)
        report = pipeline.evaluate(args.checkpoint, args.work, out, args.eval_split, plots=cfg.plots,
                                   threshold=cfg.threshold if "threshold" in overrides else None)
        print(f"score = {report.score:.4f}  (specificity {report.sp:.4f}, sensitivity {report.se:.4f}); "
              f"metrics written to {Path(out) / 'metrics.txt'}")
        return EXIT_OK

    base = None
    if cmd == "train" and (Path(args.work) / "prepare_config.json").exists():
        base = Path(args.work) / "prepare_config.json"
    cfg = resolve_config(args.config, overrides, base)
    logging.getLogger("multibreath").info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    if cmd == "prepare":
        man = pipeline.prepare(args.data, args.out, cfg, spectrograms=not args.no_spectrograms)
        print(json.dumps(man.summary, sort_keys=True))
    elif cmd == "synth":
        man = pipeline.synth(args.out, cfg)
        print(json.dumps(man.summary, sort_keys=True))
    elif cmd == "train":
        paths = pipeline.train(args.work, args.out or args.work, cfg)
        print(f"checkpoint written to {paths['checkpoint']}")
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _parser()
    try:
        args, rest = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError(f"missing command; choose one of {', '.join(COMMANDS)}")
        overrides = _split_overrides(rest)
        if args.command in ("gradcheck",) and overrides:
            raise UsageError(f"gradcheck takes no config keys, got {sorted(overrides)}")
        if getattr(args, "config", None) and not Path(args.config).exists():
            raise ConfigError(f"config file not found: {args.config}")
    except (UsageError, ConfigError) as exc:
        print(f"multibreath: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return _run(args, overrides)
    except ConfigError as exc:
        print(f"multibreath: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"multibreath: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, CheckpointError, ShapeError, OSError) as exc:
        print(f"multibreath: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MultibreathError as exc:
        print(f"multibreath: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
