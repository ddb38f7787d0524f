"""Prior estimation command: count mode from alignments or model marginals."""

from __future__ import annotations

from pathlib import Path

from ..dp import derive_frame_targets
from ..model import estimate_priors
from .common import load_scorer, log_kv
from .config import work_path
from .corpus import Resources
from .train import load_alignment_cache


def estimate(cfg: dict) -> Path:
    res = Resources(cfg)
    inv = res.inventory
    sec = cfg["priors"]
    utts = res.corpus("train")
    if sec["mode"] == "count":
        cache = load_alignment_cache(work_path(cfg, sec["alignments"]), "train", utts, inv)
        targets = [derive_frame_targets([inv.allophone_state(int(i)) for i in cache[k]], inv) for k in sorted(cache)]
        priors = estimate_priors(targets, inv.size, mode="count", floor=sec["floor"])
    else:
        scorer, _, _ = load_scorer(work_path(cfg, sec["checkpoint"]), inv.digest())
        priors = estimate_priors(mode="model-marginal", floor=sec["floor"], scorer=scorer, features=[u.load() for u in utts])
    out = work_path(cfg, sec["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    priors.save(out)
    log_kv("priors", mode=sec["mode"], floor=sec["floor"], silence=float(priors.p_center[-1]), out=out)
    return out
