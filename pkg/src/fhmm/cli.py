"""``fhmm`` command line: one subcommand per pipeline stage.

Exit status is 0 on success, 1 for invalid configuration or missing inputs and
2 for runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import fields

from .labels import LabelError
from .io import FormatError
from .pipeline import ConfigError, PipelineError, load_config
from .pipeline.common import log_kv

COMMANDS = ("synth", "train-fullsum", "align", "train-viterbi", "estimate-priors", "tune", "decode", "wer")


def _synth(cfg):
    from .pipeline.synth import SynthSpec, synthesize

    spec = SynthSpec(**{f.name: cfg["synth"][f.name] for f in fields(SynthSpec)})
    try:
        counts = synthesize(spec, cfg["paths"]["corpus_dir"])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    log_kv("synth", out=cfg["paths"]["corpus_dir"], **counts)


def _run(command: str, cfg: dict) -> None:
    from .pipeline import align, decode, priors, train, tune

    handlers = {
        "synth": _synth,
        "train-fullsum": train.train_fullsum,
        "align": align.align,
        "train-viterbi": train.train_viterbi,
        "estimate-priors": priors.estimate,
        "tune": tune.tune,
        "decode": decode.decode,
        "wer": decode.wer_report,
    }
    handlers[command](cfg)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fhmm", description="Factored hybrid HMM pipeline without state tying.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON configuration file (defaults apply to missing keys)")
    ap.add_argument("overrides", nargs="*", metavar="key=value", help="e.g. viterbi.epochs=5 decode.set=dev")
    ap.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr, force=True
    )
    start = time.perf_counter()
    try:
        cfg = load_config(args.config, args.overrides)
        _run(args.command, cfg)
    except (ConfigError, LabelError, FormatError) as e:
        log_kv("error", command=args.command, kind="validation", message=str(e))
        return 1
    except PipelineError as e:
        log_kv("error", command=args.command, kind="runtime", message=str(e))
        return 2
    except Exception as e:  # anything unexpected is a runtime failure, not a crash
        log_kv("error", command=args.command, kind="runtime", message=f"{type(e).__name__}: {e}")
        return 2
    log_kv("done", command=args.command, seconds=round(time.perf_counter() - start, 2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
