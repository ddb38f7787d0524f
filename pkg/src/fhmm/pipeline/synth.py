"""Synthetic corpus sampled from a known HMM with Gaussian emissions.

Each center-state class has a Gaussian mean; the left context adds a per-class
offset so that context-dependent models have something to learn. State
durations are geometric, silence surrounds every utterance and optionally sits
between words. Transcripts come from a random bigram LM, written as ARPA.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..decoder.lm import BOS, EOS, write_arpa
from ..io import write_alignment, write_features
from ..labels import (
    SILENCE_STATE,
    Lexicon,
    PhonemeInventory,
    build_inventory,
    make_lexicon,
    word_seq_to_segments,
    write_lexicon,
    write_phonemes,
)
from .corpus import write_manifest

SETS = ("train", "dev", "test")


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 1
    num_phonemes: int = 5
    num_words: int = 50
    min_pron: int = 2
    max_pron: int = 4
    feature_dim: int = 12
    num_train: int = 500
    num_dev: int = 50
    num_test: int = 50
    min_words: int = 1
    max_words: int = 4
    mean_spread: float = 3.0
    noise: float = 1.2
    context_shift: float = 0.6
    speech_duration: float = 3.0
    silence_duration: float = 5.0
    pause_prob: float = 0.3
    lm_bigram_mass: float = 0.8

    def sizes(self) -> dict[str, int]:
        return {"train": self.num_train, "dev": self.num_dev, "test": self.num_test}


@dataclass
class Generator:
    """Emission parameters of the generating HMM."""

    means: np.ndarray  # (6P+1) x D, by center-state class
    context_offsets: np.ndarray  # (P+1) x D, by left context class
    noise: float

    def frame_means(self, labels: np.ndarray, inventory: PhonemeInventory) -> np.ndarray:
        rows = []
        for i in labels:
            s = inventory.allophone_state(int(i))
            mu = self.means[inventory.center_index(s)]
            if s != SILENCE_STATE:
                mu = mu + self.context_offsets[inventory.context_index(s.left)]
            rows.append(mu)
        return np.array(rows)

    def log_likelihoods(self, features: np.ndarray, inventory: PhonemeInventory) -> np.ndarray:
        """T x L Gaussian log-likelihoods (up to a constant) over the untied label space."""
        mus = self.frame_means(np.arange(inventory.num_allophones), inventory)
        x = np.asarray(features, dtype=np.float64)
        d2 = (x * x).sum(1)[:, None] - 2 * x @ mus.T + (mus * mus).sum(1)[None]
        return -0.5 * d2 / self.noise**2

    def to_json(self) -> dict:
        return {"means": self.means.tolist(), "context_offsets": self.context_offsets.tolist(), "noise": self.noise}

    @classmethod
    def from_json(cls, d: dict) -> "Generator":
        return cls(np.array(d["means"]), np.array(d["context_offsets"]), float(d["noise"]))


def _lexicon(spec: SynthSpec, rng: np.random.Generator) -> tuple[PhonemeInventory, Lexicon]:
    inv = build_inventory(f"p{i}" for i in range(spec.num_phonemes))
    capacity = sum(spec.num_phonemes**n for n in range(spec.min_pron, spec.max_pron + 1))
    if spec.num_words > capacity:
        raise ValueError(f"cannot draw {spec.num_words} unique pronunciations")
    prons: list[tuple[str, ...]] = []
    seen = set()
    while len(prons) < spec.num_words:
        n = int(rng.integers(spec.min_pron, spec.max_pron + 1))
        pron = tuple(inv.phonemes[i] for i in rng.integers(0, spec.num_phonemes, n))
        if pron not in seen:
            seen.add(pron)
            prons.append(pron)
    width = len(str(spec.num_words - 1))
    return inv, make_lexicon(inv, {f"w{i:0{width}d}": [p] for i, p in enumerate(prons)})


def _bigram_lm(spec: SynthSpec, words: list[str], rng: np.random.Generator):
    """Random Katz-style bigram: a few explicit successors per history, rest backed off."""
    vocab = words + [EOS]
    uni = rng.dirichlet(np.ones(len(vocab)))
    probs = {(BOS,): -99.0}
    backoffs = {}
    for w, p in zip(vocab, uni):
        probs[(w,)] = math.log10(p)
    cond = {}
    k = min(5, len(words))
    for h in [BOS] + words:
        succ = rng.choice(len(words), size=k, replace=False)
        weights = rng.dirichlet(np.ones(k))
        dist = (1 - spec.lm_bigram_mass) * uni.copy()
        dist[succ] += spec.lm_bigram_mass * weights
        explicit = set(succ.tolist())
        if h != BOS:
            explicit.add(len(vocab) - 1)  # </s> always explicit after a word
        for j in sorted(explicit):
            probs[(h, vocab[j])] = math.log10(dist[j])
        kept = sorted(explicit)
        rest = 1.0 - dist[kept].sum()
        backoffs[(h,)] = math.log10(rest / (1.0 - uni[kept].sum()))
        cond[h] = dist[:-1] / dist[:-1].sum()  # sentences are sampled without </s>
    return probs, backoffs, cond


def _sample_utterance(spec, lexicon, inv, cond, rng):
    n = int(rng.integers(spec.min_words, spec.max_words + 1))
    words, h = [], BOS
    names = lexicon.words
    for _ in range(n):
        w = names[int(rng.choice(len(names), p=cond[h]))]
        words.append(w)
        h = w
    segs = word_seq_to_segments(words, lexicon)
    sil = inv.silence_index
    p_speech, p_sil = 1.0 / spec.speech_duration, 1.0 / spec.silence_duration
    labels: list[int] = [sil] * int(rng.geometric(p_sil))
    start = 0
    for i, end in enumerate(segs.word_bounds):
        for s in segs.segments[start:end]:
            labels += [inv.allophone_index(s)] * int(rng.geometric(p_speech))
        start = end
        if i + 1 < len(segs.word_bounds) and rng.random() < spec.pause_prob:
            labels += [sil] * int(rng.geometric(p_sil))
    labels += [sil] * int(rng.geometric(p_sil))
    return words, np.array(labels, dtype=np.int64)


def synthesize(spec: SynthSpec, out_dir: str | Path) -> dict:
    """Write phonemes, lexicon, LM, manifests, features and generating alignments."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    (out / "gold").mkdir(exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    inv, lex = _lexicon(spec, rng)
    probs, backoffs, cond = _bigram_lm(spec, lex.words, rng)
    C, D = 6 * inv.size + 1, spec.feature_dim
    gen = Generator(
        # norms of class means and context offsets are about mean_spread and context_shift
        rng.normal(0.0, spec.mean_spread / math.sqrt(D), size=(C, D)),
        rng.normal(0.0, spec.context_shift / math.sqrt(D), size=(inv.num_contexts, D)),
        spec.noise,
    )
    write_phonemes(inv, out / "phonemes.txt")
    write_lexicon(lex, out / "lexicon.txt")
    write_arpa(out / "lm.arpa", probs, backoffs)
    (out / "generator.json").write_text(json.dumps(gen.to_json()))
    digest = inv.digest()
    counts = {}
    for name in SETS:
        entries = []
        for i in range(spec.sizes()[name]):
            utt = f"{name}-{i:04d}"
            words, labels = _sample_utterance(spec, lex, inv, cond, rng)
            x = gen.frame_means(labels, inv) + spec.noise * rng.standard_normal((len(labels), D))
            write_features(out / "feats" / f"{utt}.feat", x.astype(np.float32))
            write_alignment(out / "gold" / f"{utt}.algn", labels, digest)
            entries.append((utt, f"feats/{utt}.feat", " ".join(words)))
        write_manifest(out / f"{name}.json", entries)
        counts[name] = len(entries)
    return counts


def load_generator(corpus_dir: str | Path) -> Generator:
    return Generator.from_json(json.loads((Path(corpus_dir) / "generator.json").read_text()))
