"""ARPA back-off n-gram language models."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

LN10 = math.log(10.0)
BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"


class ArpaError(ValueError):
    pass


@dataclass
class NGramLM:
    """Katz back-off model; stored scores are log10, :meth:`score` returns natural log."""

    order: int
    probs: dict[tuple[str, ...], float]
    backoffs: dict[tuple[str, ...], float]
    unk: str = "error"  # or "map" to score OOVs as <unk>
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def vocab(self) -> set[str]:
        return {k[0] for k in self.probs if len(k) == 1}

    def truncate(self, history: tuple[str, ...]) -> tuple[str, ...]:
        return history[len(history) - (self.order - 1):] if self.order > 1 else ()

    def log10_prob(self, history: tuple[str, ...], word: str) -> float:
        if (word,) not in self.probs:
            if self.unk == "map" and (UNK,) in self.probs:
                word = UNK
            else:
                raise KeyError(f"word {word!r} not in language model")
        history = self.truncate(tuple(history))
        backoff = 0.0
        while True:
            p = self.probs.get(history + (word,))
            if p is not None:
                return p + backoff
            backoff += self.backoffs.get(history, 0.0)
            history = history[1:]

    def score(self, history: tuple[str, ...], word: str) -> float:
        key = (history, word)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._cache[key] = self.log10_prob(history, word) * LN10
        return hit

    def sentence_score(self, words) -> float:
        hist: tuple[str, ...] = (BOS,)
        total = 0.0
        for w in list(words) + [EOS]:
            total += self.score(hist, w)
            hist = self.truncate(hist + (w,))
        return total


def lm_score(lm: NGramLM, history, word: str) -> float:
    return lm.score(lm.truncate(tuple(history)), word)


_SECTION = re.compile(r"^\\(\d+)-grams:$")


def load_arpa(path: str | Path, unk: str = "error") -> NGramLM:
    counts: dict[int, int] = {}
    probs: dict[tuple[str, ...], float] = {}
    backoffs: dict[tuple[str, ...], float] = {}
    section = None
    seen_data = False
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line:
                continue
            if line == "\\data\\":
                section, seen_data = "data", True
                continue
            if line == "\\end\\":
                section = "end"
                break
            m = _SECTION.match(line)
            if m:
                section = int(m.group(1))
                continue
            if section == "data":
                m = re.match(r"ngram\s+(\d+)\s*=\s*(\d+)", line)
                if not m:
                    raise ArpaError(f"{path}:{lineno}: bad data line {line!r}")
                counts[int(m.group(1))] = int(m.group(2))
            elif isinstance(section, int):
                parts = line.split()
                n = section
                if len(parts) not in (n + 1, n + 2):
                    raise ArpaError(f"{path}:{lineno}: expected {n}-gram entry, got {line!r}")
                try:
                    prob = float(parts[0])
                    bow = float(parts[n + 1]) if len(parts) == n + 2 else None
                except ValueError:
                    raise ArpaError(f"{path}:{lineno}: bad number in {line!r}") from None
                if prob > 0:
                    raise ArpaError(f"{path}:{lineno}: log10 probability > 0")
                key = tuple(parts[1 : n + 1])
                probs[key] = prob
                if bow is not None:
                    backoffs[key] = bow
            elif section is None:
                continue  # header text before \data\
    if not seen_data or section != "end":
        raise ArpaError(f"{path}: missing \\data\\ or \\end\\ marker")
    if not counts:
        raise ArpaError(f"{path}: no n-gram counts")
    for n, c in counts.items():
        found = sum(1 for k in probs if len(k) == n)
        if found != c:
            raise ArpaError(f"{path}: header says {c} {n}-grams, found {found}")
    if unk not in ("error", "map"):
        raise ValueError("unk must be 'error' or 'map'")
    return NGramLM(max(counts), probs, backoffs, unk)


def write_arpa(path: str | Path, probs: dict[tuple[str, ...], float], backoffs: dict[tuple[str, ...], float]) -> None:
    """Write log10 n-gram probabilities and back-off weights in ARPA format."""
    order = max(len(k) for k in probs)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\\data\\\n")
        for n in range(1, order + 1):
            f.write(f"ngram {n}={sum(1 for k in probs if len(k) == n)}\n")
        for n in range(1, order + 1):
            f.write(f"\n\\{n}-grams:\n")
            for key in sorted(k for k in probs if len(k) == n):
                line = f"{probs[key]:.6f}\t{' '.join(key)}"
                if n < order and key in backoffs:
                    line += f"\t{backoffs[key]:.6f}"
                f.write(line + "\n")
        f.write("\n\\end\\\n")
