"""Corpus manifests and shared resources for pipeline commands."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..decoder.lm import NGramLM, load_arpa
from ..io import read_features
from ..labels import Lexicon, PhonemeInventory, read_lexicon, read_phonemes
from .config import ConfigError, require_files


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    features: Path
    words: tuple[str, ...]

    def load(self) -> np.ndarray:
        return read_features(self.features)


def write_manifest(path: str | Path, entries: list[tuple[str, str, str]]) -> None:
    """Manifest: JSON list of ``[utt_id, feature path relative to the manifest, transcript]``."""
    Path(path).write_text(json.dumps([list(e) for e in entries], indent=1) + "\n")


def read_manifest(path: str | Path) -> list[Utterance]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read manifest {path}: {e}") from e
    utts, seen = [], set()
    for entry in data:
        if not (isinstance(entry, list) and len(entry) == 3 and all(isinstance(x, str) for x in entry)):
            raise ConfigError(f"{path}: malformed manifest entry {entry!r}")
        utt_id, feats, text = entry
        if utt_id in seen:
            raise ConfigError(f"{path}: duplicate utterance id {utt_id}")
        seen.add(utt_id)
        utts.append(Utterance(utt_id, path.parent / feats, tuple(text.split())))
    return utts


class Resources:
    """Lazily loaded inventory, lexicon, LM and manifests of one configuration."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.paths = cfg["paths"]
        self._cache: dict = {}

    def _get(self, key, make):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    @property
    def inventory(self) -> PhonemeInventory:
        require_files(self.paths["phonemes"])
        return self._get("inv", lambda: read_phonemes(self.paths["phonemes"]))

    @property
    def lexicon(self) -> Lexicon:
        require_files(self.paths["lexicon"])
        return self._get("lex", lambda: read_lexicon(self.paths["lexicon"], self.inventory))

    @property
    def lm(self) -> NGramLM:
        require_files(self.paths["lm"])
        return self._get("lm", lambda: load_arpa(self.paths["lm"]))

    def corpus(self, name: str) -> list[Utterance]:
        require_files(self.paths[name])

        def make():
            utts = read_manifest(self.paths[name])
            require_files(*(u.features for u in utts))
            lex = self.lexicon
            for u in utts:
                oov = [w for w in u.words if w not in lex.entries]
                if oov:
                    raise ConfigError(f"{u.utt_id}: words not in the lexicon: {' '.join(oov)}")
            return utts

        return self._get(("corpus", name), make)
