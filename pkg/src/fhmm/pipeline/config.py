"""Declarative JSON pipeline configuration with ``section.key=value`` overrides."""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration or missing input; the CLI exits with status 1."""


DEFAULTS: dict = {
    "paths": {
        "work_dir": "work",
        # corpus files default to <work_dir>/corpus/...
        "corpus_dir": None,
        "phonemes": None,
        "lexicon": None,
        "lm": None,
        "train": None,
        "dev": None,
        "test": None,
    },
    "synth": {
        "seed": 1,
        "num_phonemes": 5,
        "num_words": 50,
        "min_pron": 2,
        "max_pron": 4,
        "feature_dim": 12,
        "num_train": 500,
        "num_dev": 50,
        "num_test": 50,
        "min_words": 1,
        "max_words": 4,
        "mean_spread": 3.0,
        "noise": 1.2,
        "context_shift": 0.6,
        "speech_duration": 3.0,
        "silence_duration": 5.0,
        "pause_prob": 0.3,
        "lm_bigram_mass": 0.8,
    },
    "model": {
        "order": "di",
        "hidden": 64,
        "layers": 3,
        "embed": 16,
        "multitask": False,
        "aux_layers": [],
        "aux_schedule": "bottom-up",
    },
    "tdp": {
        "speech_loop": math.log(0.5),
        "speech_forward": math.log(0.5),
        "silence_loop": math.log(0.9),
        "silence_forward": math.log(0.1),
        "silence_exit_penalty": 0.0,
    },
    "fullsum": {
        "out": "fullsum",
        "seed": 0,
        "epochs": 20,
        "batch_utts": 8,
        "optimizer": "nadam",
        "lr": 3e-3,
        # running prior during full-sum training; without it silence absorbs the utterance
        "prior_scale": 0.9,
        "prior_momentum": 0.9,
        "checkpoint_every": 1,
        "resume": False,
    },
    "align": {
        "out": "align",
        "checkpoint": "fullsum/last.ckpt",
        "method": "viterbi",
        "sets": ["train"],
        "am_scale": 1.0,
        "prior_scale": 0.0,
        "tdp_scale": 1.0,
        "workers": 1,
    },
    "viterbi": {
        "out": "viterbi",
        "alignments": "align",
        "seed": 0,
        "epochs": 20,
        "chunk_size": 64,
        "chunk_shift": 32,
        "batch_chunks": 16,
        "optimizer": "nadam",
        "lr": 3e-3,
        "smoothing": 0.2,
        "focal": 2.0,
        "multitask_weight": 0.0,
        "aux_weight": 0.0,
        "checkpoint_every": 1,
        "resume": False,
    },
    "priors": {
        "out": "priors.json",
        "checkpoint": "viterbi/last.ckpt",
        "alignments": "align",
        "mode": "count",
        "floor": 1e-5,
    },
    "decode": {
        "out": "decode",
        "checkpoint": "viterbi/last.ckpt",
        "priors": "priors.json",
        "set": "test",
        # use <work_dir>/tune/best.json when present
        "use_tuned": True,
        "am_scale": 1.0,
        "prior_scale": 0.3,
        "tdp_scale": 1.0,
        "lm_scale": 3.0,
        "beam_limit": 256,
        "score_threshold": 30.0,
        "lookahead": False,
        "lookahead_scale": 1.0,
        "lookahead_frames": 5,
        "lattices": True,
        "workers": 1,
    },
    "tune": {
        "out": "tune",
        "set": "dev",
        "prior_scales": [0.0, 0.3, 0.6],
        "tdp_scales": [0.5, 1.0],
        "silence_exits": [0.0, -2.0],
        "lm_scales": [1.0, 2.0, 3.0, 4.0, 6.0, 8.0],
        "stage1_lm_scale": 3.0,
        "stage1_beam_limit": 32,
        "stage1_lookahead_scale": 1.0,
    },
    "wer": {
        "set": "test",
        "hyps": None,
    },
}

_INT_KEYS = {
    "synth": ("seed", "num_phonemes", "num_words", "min_pron", "max_pron", "feature_dim", "num_train", "num_dev", "num_test", "min_words", "max_words"),
    "model": ("hidden", "layers", "embed"),
    "fullsum": ("seed", "epochs", "batch_utts", "checkpoint_every"),
    "align": ("workers",),
    "viterbi": ("seed", "epochs", "chunk_size", "chunk_shift", "batch_chunks", "checkpoint_every"),
    "decode": ("lookahead_frames", "workers"),
}


def _merge(base: dict, update: dict, where: str = "") -> None:
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}{k} must be an object")
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # bare strings need no quoting


def apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key}")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(f"unknown config key {key}")
    node[parts[-1]] = _parse_value(value)


def load_config(path: str | Path | None, overrides: list[str] = ()) -> dict:
    """Defaults, updated by the JSON file, updated by overrides; paths made absolute.

    Relative paths in the file resolve against the file's directory.
    """
    cfg = copy.deepcopy(DEFAULTS)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(cfg, data)
        base = path.resolve().parent
    for item in overrides:
        apply_override(cfg, item)
    validate(cfg)
    resolve_paths(cfg, base)
    return cfg


def resolve_paths(cfg: dict, base: Path) -> None:
    p = cfg["paths"]
    work = (base / p["work_dir"]).resolve()
    p["work_dir"] = str(work)
    corpus = Path(p["corpus_dir"]) if p["corpus_dir"] else work / "corpus"
    corpus = (base / corpus).resolve()
    p["corpus_dir"] = str(corpus)
    defaults = {
        "phonemes": "phonemes.txt",
        "lexicon": "lexicon.txt",
        "lm": "lm.arpa",
        "train": "train.json",
        "dev": "dev.json",
        "test": "test.json",
    }
    for k, name in defaults.items():
        p[k] = str((base / p[k]).resolve()) if p[k] else str(corpus / name)


def validate(cfg: dict) -> None:
    for section, keys in _INT_KEYS.items():
        for k in keys:
            v = cfg[section][k]
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{section}.{k} must be an integer, got {v!r}")
    s = cfg["synth"]
    _require(s["num_phonemes"] >= 1, "synth.num_phonemes must be >= 1")
    _require(1 <= s["min_pron"] <= s["max_pron"], "synth pronunciation lengths must satisfy 1 <= min <= max")
    _require(s["num_words"] >= 1 and s["feature_dim"] >= 1, "synth sizes must be positive")
    _require(min(s["num_train"], s["num_dev"], s["num_test"]) >= 1, "synth set sizes must be positive")
    _require(1 <= s["min_words"] <= s["max_words"], "synth words per utterance must satisfy 1 <= min <= max")
    _require(s["speech_duration"] >= 1 and s["silence_duration"] >= 1, "mean durations must be >= 1 frame")
    _require(0 <= s["pause_prob"] <= 1 and 0 <= s["lm_bigram_mass"] < 1, "probabilities out of range")
    _require(s["noise"] > 0, "synth.noise must be > 0")
    m = cfg["model"]
    _require(m["order"] in ("mono", "di", "tri"), "model.order must be mono, di or tri")
    _require(m["aux_schedule"] in ("bottom-up", "top-down"), "model.aux_schedule must be bottom-up or top-down")
    _require(
        isinstance(m["aux_layers"], list) and all(isinstance(i, int) and 1 <= i <= m["layers"] for i in m["aux_layers"]),
        "model.aux_layers must list encoder layers",
    )
    for k, v in cfg["tdp"].items():
        _require(_number(v) and v <= 0, f"tdp.{k} must be a log-score <= 0")
    for section in ("fullsum", "viterbi"):
        c = cfg[section]
        _require(c["optimizer"] in ("sgd", "nadam"), f"{section}.optimizer must be sgd or nadam")
        _require(_number(c["lr"]) and c["lr"] > 0, f"{section}.lr must be > 0")
        _require(c["epochs"] >= 0 and c["checkpoint_every"] >= 1, f"{section}.epochs/checkpoint_every out of range")
    _require(cfg["fullsum"]["batch_utts"] >= 1, "fullsum.batch_utts must be >= 1")
    _require(0 <= cfg["fullsum"]["prior_momentum"] < 1, "fullsum.prior_momentum must be in [0, 1)")
    _require(cfg["fullsum"]["prior_scale"] >= 0, "fullsum.prior_scale must be >= 0")
    v = cfg["viterbi"]
    _require(v["chunk_size"] >= v["chunk_shift"] >= 1, "viterbi chunks need size >= shift >= 1")
    _require(v["batch_chunks"] >= 1, "viterbi.batch_chunks must be >= 1")
    _require(0 <= v["smoothing"] < 1 and v["focal"] >= 0, "viterbi smoothing/focal out of range")
    _require(v["multitask_weight"] >= 0 and v["aux_weight"] >= 0, "loss weights must be >= 0")
    a = cfg["align"]
    _require(a["method"] in ("viterbi", "linear"), "align.method must be viterbi or linear")
    _require(all(x in ("train", "dev", "test") for x in a["sets"]), "align.sets must name train/dev/test")
    _require(cfg["priors"]["mode"] in ("count", "model-marginal"), "priors.mode must be count or model-marginal")
    _require(0 < cfg["priors"]["floor"] < 1e-2, "priors.floor must be in (0, 0.01)")
    d = cfg["decode"]
    for k in ("am_scale", "prior_scale", "tdp_scale", "lm_scale", "lookahead_scale", "score_threshold"):
        _require(_number(d[k]) and d[k] >= 0, f"decode.{k} must be >= 0")
    _require(_number(d["beam_limit"]) and d["beam_limit"] >= 1, "decode.beam_limit must be >= 1")
    _require(d["set"] in ("train", "dev", "test"), "decode.set must be train, dev or test")
    t = cfg["tune"]
    for k in ("prior_scales", "tdp_scales", "silence_exits", "lm_scales"):
        _require(isinstance(t[k], list) and len(t[k]) > 0, f"tune.{k} must be a non-empty list")
        _require(all(_number(x) for x in t[k]), f"tune.{k} must hold numbers")
    _require(all(x >= 0 for k in ("prior_scales", "tdp_scales", "lm_scales") for x in t[k]), "tune scales must be >= 0")
    _require(all(x <= 0 for x in t["silence_exits"]), "tune.silence_exits are log-scores <= 0")
    _require(t["stage1_beam_limit"] >= 1, "tune.stage1_beam_limit must be >= 1")
    _require(t["set"] in ("train", "dev", "test") and cfg["wer"]["set"] in ("train", "dev", "test"), "unknown corpus set")


def _number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def require_files(*paths) -> None:
    """Validation-time existence check for command inputs."""
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise ConfigError("missing input: " + ", ".join(missing))


def work_path(cfg: dict, rel: str) -> Path:
    return Path(cfg["paths"]["work_dir"]) / rel
