"""Logging and checkpoint helpers shared by the pipeline commands."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from ..io import read_checkpoint, write_checkpoint
from ..model import FactoredScorer, ScorerConfig, make_optimizer
from ..topology import TdpModel
from .config import ConfigError

log = logging.getLogger("fhmm")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    s = str(v)
    return s if s and not any(c.isspace() for c in s) else repr(s)


def log_kv(event: str, **fields) -> None:
    """One machine-parseable ``key=value`` line."""
    log.info(" ".join([f"event={event}"] + [f"{k}={_fmt(v)}" for k, v in fields.items()]))


def tdp_from_config(cfg: dict, silence_exit: float | None = None) -> TdpModel:
    t = dict(cfg["tdp"])
    if silence_exit is not None:
        t["silence_exit_penalty"] = silence_exit
    return TdpModel(**t)


def scorer_config(cfg: dict, input_dim: int, num_phonemes: int, order: str | None = None) -> ScorerConfig:
    m = cfg["model"]
    return ScorerConfig(
        input_dim,
        num_phonemes,
        order or m["order"],
        m["hidden"],
        m["layers"],
        m["embed"],
        m["multitask"],
        tuple(m["aux_layers"]),
        m["aux_schedule"],
    )


def save_training_state(path: Path, scorer: FactoredScorer, optimizer, meta: dict, extra: dict | None = None) -> None:
    tensors = scorer.to_tensors()
    tensors.update(optimizer.to_tensors())
    tensors.update(extra or {})
    meta = dict(meta, scorer=scorer.config.to_json(), steps=optimizer.steps)
    write_checkpoint(path, tensors, meta)


def load_scorer(path: str | Path, inventory_digest: int | None = None) -> tuple[FactoredScorer, dict, dict]:
    """Scorer, metadata and raw tensors of a checkpoint; checks the inventory digest."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing checkpoint: {path}")
    tensors, meta = read_checkpoint(path)
    if inventory_digest is not None and int(meta.get("inventory_digest", -1)) != inventory_digest:
        raise ConfigError(f"{path}: checkpoint was trained on a different phoneme inventory")
    sc = dict(meta["scorer"])
    sc["aux_layers"] = tuple(sc["aux_layers"])
    return FactoredScorer.from_tensors(ScorerConfig(**sc), tensors), meta, tensors


def restore_optimizer(name: str, tensors: dict, steps: int):
    opt = make_optimizer(name)
    opt.load_tensors(tensors, steps)
    return opt


def write_tsv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def read_tsv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f, delimiter="\t"))


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Per-epoch generator, so resumed runs shuffle exactly like uninterrupted ones."""
    return np.random.default_rng([seed, epoch])
