"""Dump Viterbi alignments of a monophone model into an alignment cache."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..dp import EmptyLatticeError, linear_alignment, viterbi_align
from ..io import read_alignment, read_features, write_alignment
from ..labels import Lexicon, PhonemeInventory, word_seq_to_segments
from ..model import ModelOrder, ScaleSet, emission_matrix, estimate_priors
from ..topology import TdpModel, TyingLevel, TyingScheme, build_alignment_fsa
from .common import load_scorer, log_kv, tdp_from_config
from .config import ConfigError, work_path
from .corpus import Resources
from .workers import map_ordered


def _setup(method, ckpt, inventory: PhonemeInventory, lexicon: Lexicon, tdp: TdpModel, scales: ScaleSet, priors):
    scorer = None
    if method == "viterbi":
        scorer, _, _ = load_scorer(ckpt, inventory.digest())
    return {
        "method": method,
        "scorer": scorer,
        "inventory": inventory,
        "lexicon": lexicon,
        "tying": TyingScheme(inventory, TyingLevel.MONOPHONE_STATE),
        "tdp": tdp,
        "scales": scales,
        "priors": priors,
    }


def _align_one(state, item):
    utt_id, feat_path, words = item
    inv = state["inventory"]
    x = read_features(feat_path)
    fsa = build_alignment_fsa(word_seq_to_segments(words, state["lexicon"]), True, state["tying"])
    try:
        if state["method"] == "linear":
            al = linear_alignment(fsa, len(x))
        else:
            fl = state["scorer"].context_logits(x)
            em = emission_matrix(fl, state["priors"], state["scales"], inv, TyingLevel.MONOPHONE_STATE)
            al = viterbi_align(fsa, em, state["tdp"])
    except EmptyLatticeError as e:
        return utt_id, None, str(e)
    return utt_id, np.array([inv.allophone_index(s) for s in al.frame_labels], dtype=np.int64), None


def align(cfg: dict) -> Path:
    res = Resources(cfg)
    inv, lex = res.inventory, res.lexicon
    sec = cfg["align"]
    out_dir = work_path(cfg, sec["out"])
    ckpt = work_path(cfg, sec["checkpoint"])
    scorer = None
    if sec["method"] == "viterbi":
        scorer, _, _ = load_scorer(ckpt, inv.digest())
        if scorer.config.order is not ModelOrder.MONO:
            raise ConfigError(f"{ckpt}: alignments come from a monophone model, got {scorer.config.order.value}")
    scales = ScaleSet(am_scale=sec["am_scale"], prior_scale=sec["prior_scale"])
    tdp = tdp_from_config(cfg).scaled(sec["tdp_scale"])
    manifest = {"inventory_digest": str(inv.digest()), "method": sec["method"], "sets": {}}
    gold_dir = Path(cfg["paths"]["corpus_dir"]) / "gold"
    for name in sec["sets"]:
        utts = res.corpus(name)
        priors = None
        if scorer is not None and sec["prior_scale"] > 0:
            priors = estimate_priors(mode="model-marginal", scorer=scorer, features=[u.load() for u in utts])
        (out_dir / name).mkdir(parents=True, exist_ok=True)
        items = [(u.utt_id, str(u.features), u.words) for u in utts]
        results = map_ordered(
            _align_one, items, sec["workers"], _setup, (sec["method"], str(ckpt), inv, lex, tdp, scales, priors)
        )
        files, skipped = {}, []
        agree = total = 0
        for utt_id, labels, err in results:
            if labels is None:
                skipped.append({"utt_id": utt_id, "reason": err})
                log_kv("align-skip", set=name, utt=utt_id, reason=err)
                continue
            rel = f"{name}/{utt_id}.algn"
            write_alignment(out_dir / rel, labels, inv.digest())
            files[utt_id] = rel
            gold = gold_dir / f"{utt_id}.algn"
            if gold.exists():
                ref, _ = read_alignment(gold)
                if len(ref) == len(labels):
                    agree += int(np.sum(ref == labels))
                    total += len(ref)
        entry = {"files": files, "skipped": skipped}
        fields = {"set": name, "aligned": len(files), "skipped": len(skipped)}
        if total:
            entry["gold_agreement"] = agree / total
            fields["gold_agreement"] = agree / total
        manifest["sets"][name] = entry
        log_kv("align", **fields)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out_dir
