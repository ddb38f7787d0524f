"""Corpus decoding and WER scoring commands."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from ..decoder import BeamConfig, Lattice, SearchError, SearchNetwork, beam_search, build_prefix_tree, edit_counts
from ..decoder.lm import load_arpa
from ..decoder.wer import WerReport
from ..io import read_features
from ..labels import Lexicon, PhonemeInventory
from ..model import Priors, ScaleSet, emission_matrix
from ..topology import TdpModel
from .common import load_scorer, log_kv, tdp_from_config, write_tsv
from .config import ConfigError, require_files, work_path
from .corpus import Resources, Utterance
from .workers import map_ordered


@dataclass(frozen=True)
class DecodeRun:
    """One decoder setting: scales, silence exit penalty, beam."""

    scales: ScaleSet
    silence_exit: float
    beam: BeamConfig
    lattice: bool = False


@dataclass
class Hypothesis:
    utt_id: str
    words: list[str]
    failed: bool
    lattice: Lattice | None = None


def _setup(ckpt: str, priors_path: str | None, inventory: PhonemeInventory, lexicon: Lexicon, lm_path: str, tdp: TdpModel):
    scorer, _, _ = load_scorer(ckpt, inventory.digest())
    tree = build_prefix_tree(lexicon)
    return {
        "scorer": scorer,
        "priors": Priors.load(priors_path) if priors_path else None,
        "inventory": inventory,
        "tree": tree,
        "network": SearchNetwork(tree, inventory),
        "lm": load_arpa(lm_path),
        "tdp": tdp,
    }


def _decode_job(state, item) -> list[Hypothesis]:
    """Decode one utterance under several settings, sharing its network outputs."""
    utt_id, feat_path, runs = item
    fl = state["scorer"].context_logits(read_features(feat_path))
    out = []
    for run in runs:
        em = emission_matrix(fl, state["priors"], run.scales, state["inventory"])
        tdp = TdpModel(**{**asdict(state["tdp"]), "silence_exit_penalty": run.silence_exit})
        try:
            res = beam_search(
                em, state["lm"], state["tree"], tdp, run.scales, run.beam, network=state["network"], lattice=run.lattice
            )
            out.append(Hypothesis(utt_id, res.words, False, res.lattice))
        except SearchError:
            out.append(Hypothesis(utt_id, [], True, None))
    return out


def decode_corpus(cfg: dict, utts: list[Utterance], runs: list[DecodeRun], ckpt: Path, priors: Path | None, workers: int):
    """Hypotheses per run, each in corpus order."""
    res = Resources(cfg)
    if any(r.scales.prior_scale > 0 for r in runs) and priors is None:
        raise ConfigError("a prior scale > 0 needs a priors file")
    items = [(u.utt_id, str(u.features), runs) for u in utts]
    args = (str(ckpt), str(priors) if priors else None, res.inventory, res.lexicon, cfg["paths"]["lm"], tdp_from_config(cfg))
    per_utt = map_ordered(_decode_job, items, workers, _setup, args)
    return [[hyps[k] for hyps in per_utt] for k in range(len(runs))]


def score(utts: list[Utterance], hyps: dict[str, list[str]]) -> tuple[WerReport, list[dict]]:
    """Corpus WER; utterances without a hypothesis count as all deletions."""
    total = WerReport(0, 0, 0, 0)
    rows = []
    for u in utts:
        r = edit_counts(list(u.words), hyps.get(u.utt_id, []))
        total = total + r
        rows.append(
            {"utt_id": u.utt_id, "ref_words": r.ref_words, "sub": r.substitutions, "del": r.deletions, "ins": r.insertions}
        )
    if total.ref_words == 0:
        raise ConfigError("empty reference corpus")
    return total, rows


def decode_settings(cfg: dict) -> tuple[ScaleSet, float, str]:
    """Scales and silence exit penalty for the final decode: tuned if available, else the config."""
    d = cfg["decode"]
    best = work_path(cfg, cfg["tune"]["out"]) / "best.json"
    if d["use_tuned"] and best.exists():
        b = json.loads(best.read_text())
        source = str(Path(cfg["tune"]["out"]) / "best.json")  # relative to the work dir
        return ScaleSet(b["am_scale"], b["prior_scale"], b["tdp_scale"], b["lm_scale"]), b["silence_exit"], source
    scales = ScaleSet(d["am_scale"], d["prior_scale"], d["tdp_scale"], d["lm_scale"])
    return scales, cfg["tdp"]["silence_exit_penalty"], "config"


def beam_from_config(cfg: dict) -> BeamConfig:
    d = cfg["decode"]
    return BeamConfig(d["beam_limit"], d["score_threshold"], d["lookahead"], d["lookahead_scale"], d["lookahead_frames"])


def write_hyps(path: Path, hyps: list[Hypothesis]) -> None:
    path.write_text("".join(f"{h.utt_id}\t{' '.join(h.words)}\n" for h in hyps))


def read_hyps(path: Path) -> dict[str, list[str]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            utt, _, words = line.partition("\t")
            out[utt] = words.split()
    return out


def decode(cfg: dict) -> Path:
    d = cfg["decode"]
    res = Resources(cfg)
    utts = res.corpus(d["set"])
    ckpt = work_path(cfg, d["checkpoint"])
    priors = work_path(cfg, d["priors"])
    scales, sil_exit, source = decode_settings(cfg)
    if scales.prior_scale > 0:
        require_files(priors)
    out_dir = work_path(cfg, d["out"]) / d["set"]
    out_dir.mkdir(parents=True, exist_ok=True)
    run = DecodeRun(scales, sil_exit, beam_from_config(cfg), d["lattices"])
    hyps = decode_corpus(cfg, utts, [run], ckpt, priors if priors.exists() else None, d["workers"])[0]
    if d["lattices"]:
        (out_dir / "lattices").mkdir(exist_ok=True)
    failed = []
    for h in hyps:
        log_kv("decode", utt=h.utt_id, words=len(h.words), failed=int(h.failed))
        if h.failed:
            failed.append(h.utt_id)
        elif h.lattice is not None:
            h.lattice.save(out_dir / "lattices" / f"{h.utt_id}.lat")
    write_hyps(out_dir / "hyps.txt", hyps)
    (out_dir / "failures.txt").write_text("".join(f"{u}\n" for u in failed))
    settings = {**asdict(scales), "silence_exit": sil_exit, "source": source, "beam": asdict(run.beam)}
    (out_dir / "settings.json").write_text(json.dumps(settings, indent=1, sort_keys=True) + "\n")
    log_kv("decode-done", set=d["set"], utterances=len(hyps), failed=len(failed), scales=source)
    return out_dir / "hyps.txt"


def wer_report(cfg: dict) -> dict:
    w = cfg["wer"]
    res = Resources(cfg)
    utts = res.corpus(w["set"])
    hyp_path = Path(w["hyps"]) if w["hyps"] else work_path(cfg, cfg["decode"]["out"]) / w["set"] / "hyps.txt"
    require_files(hyp_path)
    hyps = read_hyps(hyp_path)
    unknown = sorted(set(hyps) - {u.utt_id for u in utts})
    if unknown:
        raise ConfigError(f"{hyp_path}: hypotheses for unknown utterances: {' '.join(unknown[:5])}")
    total, rows = score(utts, hyps)
    report = {
        "set": w["set"],
        "wer": total.wer,
        "substitutions": total.substitutions,
        "deletions": total.deletions,
        "insertions": total.insertions,
        "ref_words": total.ref_words,
        "missing": sum(1 for u in utts if u.utt_id not in hyps),
    }
    out_dir = hyp_path.parent
    (out_dir / "wer.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    write_tsv(out_dir / "wer_utts.tsv", rows)
    log_kv("wer", **report)
    return report
