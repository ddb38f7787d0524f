"""Two-stage tuning of decoder scales on the dev set.

Stage 1 grids prior scale, tdp scale and silence exit penalty with a small
beam and a strong acoustic lookahead, at a fixed LM scale. Stage 2 decodes once
with the winner at the final beam and picks the LM scale by lattice rescoring.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

from ..decoder import BeamConfig, lattice_best_path
from ..model import ScaleSet
from . import plots
from .common import log_kv, write_tsv
from .config import ConfigError, require_files, work_path
from .corpus import Resources
from .decode import DecodeRun, beam_from_config, decode_corpus, score


@dataclass
class TuneResult:
    scales: ScaleSet
    silence_exit: float
    dev_wer: float
    stage1: list[dict] = field(default_factory=list)
    stage2: list[dict] = field(default_factory=list)
    num_decodes: int = 0
    num_rescores: int = 0


def rescore(lattices: dict, lm_scale: float) -> dict[str, list[str]]:
    """First-best words of every lattice at ``lm_scale``; missing lattices give no words."""
    return {utt: lattice_best_path(lat, lm_scale)[0] for utt, lat in lattices.items() if lat is not None}


def _row(report, **keys) -> dict:
    return {
        **keys,
        "wer": report.wer,
        "sub": report.substitutions,
        "del": report.deletions,
        "ins": report.insertions,
        "ref_words": report.ref_words,
    }


def tune(cfg: dict) -> TuneResult:
    t, d = cfg["tune"], cfg["decode"]
    res = Resources(cfg)
    utts = res.corpus(t["set"])
    ckpt = work_path(cfg, d["checkpoint"])
    priors = work_path(cfg, d["priors"])
    if any(p > 0 for p in t["prior_scales"]):
        require_files(priors)
    require_files(ckpt)
    grid = sorted(itertools.product(t["prior_scales"], t["tdp_scales"], t["silence_exits"]))
    if not grid or not t["lm_scales"]:
        raise ConfigError("empty tuning grid")
    am = d["am_scale"]
    out_dir = work_path(cfg, t["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    result = TuneResult(ScaleSet(), 0.0, 0.0)
    priors_arg = priors if priors.exists() else None

    # stage 1: small beam, strong lookahead, fixed LM scale
    winner = grid[0]
    if len(grid) > 1:
        beam = BeamConfig(
            t["stage1_beam_limit"], d["score_threshold"], True, t["stage1_lookahead_scale"], d["lookahead_frames"]
        )
        runs = [DecodeRun(ScaleSet(am, p, s, t["stage1_lm_scale"]), x, beam) for p, s, x in grid]
        all_hyps = decode_corpus(cfg, utts, runs, ckpt, priors_arg, d["workers"])
        result.num_decodes += len(runs)
        best = None
        for (p, s, x), hyps in zip(grid, all_hyps):
            report, _ = score(utts, {h.utt_id: h.words for h in hyps if not h.failed})
            row = _row(report, prior_scale=p, tdp_scale=s, silence_exit=x)
            row["failed"] = sum(h.failed for h in hyps)
            result.stage1.append(row)
            log_kv("tune-stage1", **row)
            if best is None or report.wer < best:  # strict: ties keep the earlier grid point
                best, winner = report.wer, (p, s, x)

    # stage 2: one decode at the final beam, LM scale by lattice rescoring
    p, s, x = winner
    run = DecodeRun(ScaleSet(am, p, s, t["stage1_lm_scale"]), x, beam_from_config(cfg), lattice=True)
    hyps = decode_corpus(cfg, utts, [run], ckpt, priors_arg, d["workers"])[0]
    result.num_decodes += 1
    lattices = {h.utt_id: h.lattice for h in hyps}
    lat_dir = out_dir / "lattices"
    lat_dir.mkdir(exist_ok=True)
    for h in hyps:
        if h.lattice is not None:
            h.lattice.save(lat_dir / f"{h.utt_id}.lat")
    best = None
    for lm_scale in sorted(t["lm_scales"]):
        report, _ = score(utts, rescore(lattices, lm_scale))
        result.num_rescores += 1
        row = _row(report, lm_scale=lm_scale)
        result.stage2.append(row)
        log_kv("tune-stage2", **row)
        if best is None or report.wer < best:  # ascending scales: ties keep the smaller one
            best, best_lm = report.wer, lm_scale
    result.scales = ScaleSet(am, p, s, best_lm)
    result.silence_exit = x
    result.dev_wer = best

    write_tsv(out_dir / "stage1.tsv", result.stage1)
    write_tsv(out_dir / "stage2.tsv", result.stage2)
    plots.tuning_report(result.stage1, result.stage2, out_dir / "tuning.png")
    summary = {
        "am_scale": am,
        "prior_scale": p,
        "tdp_scale": s,
        "lm_scale": best_lm,
        "silence_exit": x,
        "dev_wer": best,
        "num_decodes": result.num_decodes,
        "num_rescores": result.num_rescores,
    }
    (out_dir / "best.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    log_kv("tune-done", **summary)
    return result
