"""Full-sum monophone training and chunked Viterbi training of factored models."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..dp import chunk, derive_frame_targets
from ..io import read_alignment
from ..labels import word_seq_to_segments
from ..model import (
    Batch,
    FactoredScorer,
    LossSpec,
    ModelOrder,
    ScorerConfig,
    TrainingError,
    factor_log_probs,
    make_optimizer,
    one_cycle_lr,
    train_step,
)
from ..topology import TyingLevel, TyingScheme, build_alignment_fsa
from . import plots
from .common import (
    epoch_rng,
    load_scorer,
    log_kv,
    read_tsv,
    restore_optimizer,
    save_training_state,
    scorer_config,
    tdp_from_config,
    write_tsv,
)
from .config import ConfigError, work_path
from .corpus import Resources


class PipelineError(RuntimeError):
    """Runtime failure of a pipeline command; the CLI exits with status 2."""


def _resume_or_init(cfg, section, out_dir: Path, scorer: FactoredScorer, digest: int):
    """Return ``(scorer, optimizer, start epoch, loss rows, tensors)``, resuming from ``last.ckpt`` if asked."""
    sec = cfg[section]
    last = out_dir / "last.ckpt"
    if sec["resume"] and last.exists():
        loaded, meta, tensors = load_scorer(last, digest)
        if loaded.config != scorer.config:
            raise ConfigError(f"{last}: model configuration differs from the config file")
        opt = restore_optimizer(sec["optimizer"], tensors, int(meta["steps"]))
        start = int(meta["epoch"])
        loss_file = out_dir / "loss.tsv"
        rows = [r for r in read_tsv(loss_file) if int(r["epoch"]) <= start] if loss_file.exists() else []
        log_kv("resume", section=section, epoch=start, steps=opt.steps)
        return loaded, opt, start, rows, tensors
    return scorer, make_optimizer(sec["optimizer"]), 0, [], {}


def _run_epochs(cfg, section, scorer, opt, start, rows, steps_per_epoch, make_batches, spec, out_dir, meta, extra=None):
    """Epoch loop with checkpointing; ``extra`` (optional) has ``before_step(batch)`` and ``tensors()``."""
    sec = cfg[section]

    def save(path, m):
        save_training_state(path, scorer, opt, m, extra.tensors() if extra else None)

    epochs = sec["epochs"]
    total = max(1, epochs * steps_per_epoch)
    for epoch in range(start, epochs):
        sums = {"main": 0.0, "multitask": 0.0, "aux": 0.0, "total": 0.0}
        frames = 0
        for batch in make_batches(epoch):
            lr = one_cycle_lr(opt.steps, total, sec["lr"])
            if extra:
                extra.before_step(batch)
            try:
                rep = train_step(scorer, opt, batch, spec, lr)
            except TrainingError as e:
                save(out_dir / "last.ckpt", dict(meta, epoch=epoch, diverged=True))
                raise PipelineError(f"{section} training diverged in epoch {epoch + 1}: {e}") from e
            for k in sums:
                sums[k] += rep[k] * rep["frames"]
            frames += rep["frames"]
        row = {"epoch": epoch + 1, "steps": opt.steps, "lr": lr}
        row.update({k: v / frames for k, v in sums.items()})
        rows.append(row)
        log_kv("epoch", section=section, **row)
        state_meta = dict(meta, epoch=epoch + 1)
        if (epoch + 1) % sec["checkpoint_every"] == 0 or epoch + 1 == epochs:
            save(out_dir / f"epoch-{epoch + 1:03d}.ckpt", state_meta)
        save(out_dir / "last.ckpt", state_meta)
        write_tsv(out_dir / "loss.tsv", rows)
    if start >= epochs:
        # nothing to train: the checkpoint holds the initialization (or the resumed state)
        save(out_dir / "last.ckpt", dict(meta, epoch=start))
    write_tsv(out_dir / "loss.tsv", rows)
    if rows:
        plots.loss_curve(rows, out_dir / "loss.png", title=f"{section} training")
    return scorer


def train_fullsum(cfg: dict) -> Path:
    res = Resources(cfg)
    inv, lex = res.inventory, res.lexicon
    utts = res.corpus("train")
    sec = cfg["fullsum"]
    out_dir = work_path(cfg, sec["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    feats = [u.load() for u in utts]
    tying = TyingScheme(inv, TyingLevel.MONOPHONE_STATE)
    fsas = [build_alignment_fsa(word_seq_to_segments(u.words, lex), True, tying) for u in utts]
    too_short = [u.utt_id for u, f, x in zip(utts, fsas, feats) if len(x) < f.min_length]
    if too_short:
        raise ConfigError(f"utterances shorter than their transcripts: {' '.join(too_short)}")

    m = cfg["model"]
    # the alignment model is a plain monophone scorer: no multi-task or auxiliary heads
    config = ScorerConfig(feats[0].shape[1], inv.size, ModelOrder.MONO, m["hidden"], m["layers"], m["embed"])
    scorer = FactoredScorer(config, seed=sec["seed"])
    scorer.set_normalization(feats)
    scorer, opt, start, rows, tensors = _resume_or_init(cfg, "fullsum", out_dir, scorer, inv.digest())
    tdp = tdp_from_config(cfg)
    meta = {"kind": "fullsum", "inventory_digest": str(inv.digest()), "seed": sec["seed"]}

    B = sec["batch_utts"]

    def make_batches(epoch):
        order = epoch_rng(sec["seed"], epoch).permutation(len(utts))
        return [
            Batch([feats[i] for i in order[k : k + B]], fsas=[fsas[i] for i in order[k : k + B]])
            for k in range(0, len(order), B)
        ]

    running = None
    if sec["prior_scale"] > 0:
        running = RunningPrior(scorer, sec["prior_momentum"], tensors.get("prior/running"))
    spec = LossSpec("fullsum", prior_scale=sec["prior_scale"], tdp=tdp)
    steps = -(-len(utts) // B)
    _run_epochs(cfg, "fullsum", scorer, opt, start, rows, steps, make_batches, spec, out_dir, meta, running)
    return out_dir / "last.ckpt"


class RunningPrior:
    """Center-state prior as a moving average of the model's batch posteriors.

    Updated before every full-sum step, so the prior tracks the model closely
    enough to counter the early drift towards silence.
    """

    def __init__(self, scorer: FactoredScorer, momentum: float, state: np.ndarray | None = None):
        self.scorer = scorer
        self.momentum = momentum
        C = scorer.config.num_centers
        # float32 like the checkpoint, so resumed runs continue bit-identically
        self.prior = np.full(C, 1.0 / C, dtype=np.float32) if state is None else np.asarray(state, dtype=np.float32)

    def before_step(self, batch: Batch) -> None:
        x = np.concatenate(batch.features)
        post = np.exp(factor_log_probs(self.scorer.context_logits(x)).center.astype(np.float64))
        self.prior = (self.momentum * self.prior + (1.0 - self.momentum) * post.mean(0)).astype(np.float32)
        batch.log_prior = np.log(self.prior.astype(np.float64))

    def tensors(self) -> dict:
        return {"prior/running": self.prior}


def load_alignment_cache(align_dir: Path, set_name: str, utts, inventory) -> dict[str, np.ndarray]:
    """Allophone index sequences per utterance; inventory mismatch is a hard error."""
    manifest_path = align_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"missing alignment manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    entries = manifest.get("sets", {}).get(set_name)
    if entries is None:
        raise ConfigError(f"{manifest_path}: no alignments for the {set_name} set")
    digest = inventory.digest()
    out = {}
    for u in utts:
        rel = entries["files"].get(u.utt_id)
        if rel is None:
            continue  # skipped at alignment time
        labels, d = read_alignment(align_dir / rel)
        if d != digest:
            raise ConfigError(f"{align_dir / rel}: alignment inventory hash does not match the phoneme inventory")
        out[u.utt_id] = labels
    if not out:
        raise ConfigError(f"{manifest_path}: no usable alignments")
    return out


def train_viterbi(cfg: dict) -> Path:
    res = Resources(cfg)
    inv = res.inventory
    utts = res.corpus("train")
    sec = cfg["viterbi"]
    out_dir = work_path(cfg, sec["out"])
    cache = load_alignment_cache(work_path(cfg, sec["alignments"]), "train", utts, inv)
    utts = [u for u in utts if u.utt_id in cache]
    feats = [u.load() for u in utts]
    targets = []
    for u, x in zip(utts, feats):
        labels = cache[u.utt_id]
        if len(labels) != len(x):
            raise ConfigError(f"{u.utt_id}: alignment has {len(labels)} frames, features have {len(x)}")
        targets.append(derive_frame_targets([inv.allophone_state(int(i)) for i in labels], inv))
    out_dir.mkdir(parents=True, exist_ok=True)

    config = scorer_config(cfg, feats[0].shape[1], inv.size)
    scorer = FactoredScorer(config, seed=sec["seed"])
    scorer.set_normalization(feats)
    scorer, opt, start, rows, _ = _resume_or_init(cfg, "viterbi", out_dir, scorer, inv.digest())
    windows = [(i, s, e) for i, x in enumerate(feats) for s, e in chunk(len(x), sec["chunk_size"], sec["chunk_shift"])]
    spec = LossSpec(
        "viterbi",
        smoothing=sec["smoothing"],
        focal=sec["focal"],
        multitask_weight=sec["multitask_weight"],
        aux_weight=sec["aux_weight"],
    )
    meta = {"kind": "viterbi", "inventory_digest": str(inv.digest()), "seed": sec["seed"]}

    def make_batches(epoch):
        order = epoch_rng(sec["seed"], epoch).permutation(len(windows))
        B = sec["batch_chunks"]
        batches = []
        for k in range(0, len(order), B):
            sel = [windows[j] for j in order[k : k + B]]
            batches.append(Batch([feats[i][s:e] for i, s, e in sel], [targets[i].slice(s, e) for i, s, e in sel]))
        return batches

    steps = -(-len(windows) // sec["batch_chunks"])
    _run_epochs(cfg, "viterbi", scorer, opt, start, rows, steps, make_batches, spec, out_dir, meta)
    log_kv("viterbi-data", utterances=len(utts), chunks=len(windows), frames=sum(len(x) for x in feats))
    return out_dir / "last.ckpt"
