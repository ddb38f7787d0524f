"""Phoneme inventories, lexicons and the untied allophone-state label space.

Index layout
------------
Context symbols (left/right factor classes) are the ``P`` phonemes followed by
one extra class shared by the word boundary ``#`` and silence, so there are
``P + 1`` context classes.

Center-state classes enumerate ``(phoneme, substate, word_end)`` as
``(phoneme * 3 + substate) * 2 + word_end`` for ``6P`` speech classes, with
silence as the last class ``6P``.

The untied allophone index of a speech state is
``(left * 6P + center) * (P + 1) + right``. Silence is the single index
``(P + 1) ** 2 * 6P`` right after the last speech state, giving
``(P + 1) ** 2 * 6P + 1`` labels in total.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

BOUNDARY = "#"
SILENCE = "[sil]"
NUM_SUBSTATES = 3
RESERVED = (BOUNDARY, SILENCE)


class LabelError(ValueError):
    """Invalid inventory, lexicon or label."""


class OovError(LabelError):
    """A word is not in the lexicon."""


@dataclass(frozen=True)
class AllophoneState:
    """A phoneme substate in left/right context, or the silence state.

    Silence is normalised on construction so that every silence query maps to
    one canonical value (``substate=0``, ``word_end=False``, no contexts).
    """

    center: str
    substate: int = 0
    word_end: bool = False
    left: str | None = BOUNDARY
    right: str | None = BOUNDARY

    def __post_init__(self):
        if self.center == SILENCE:
            object.__setattr__(self, "substate", 0)
            object.__setattr__(self, "word_end", False)
            object.__setattr__(self, "left", None)
            object.__setattr__(self, "right", None)
            return
        if self.center == BOUNDARY:
            raise LabelError("'#' cannot be a center phoneme")
        if self.substate not in range(NUM_SUBSTATES):
            raise LabelError(f"substate must be 0..2, got {self.substate}")
        object.__setattr__(self, "word_end", bool(self.word_end))

    @classmethod
    def silence(cls) -> "AllophoneState":
        return cls(SILENCE)

    @property
    def is_silence(self) -> bool:
        return self.center == SILENCE

    def __str__(self):
        if self.is_silence:
            return SILENCE
        we = "@we" if self.word_end else ""
        return f"{self.left}-{self.center}.{self.substate}{we}+{self.right}"


SILENCE_STATE = AllophoneState.silence()


@dataclass(frozen=True)
class PhonemeInventory:
    phonemes: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.phonemes:
            raise LabelError("phoneme inventory is empty")
        index = {}
        for i, p in enumerate(self.phonemes):
            if p in RESERVED:
                raise LabelError(f"reserved symbol {p!r} used as a phoneme")
            if not p or any(c.isspace() for c in p):
                raise LabelError(f"invalid phoneme symbol {p!r}")
            if p in index:
                raise LabelError(f"duplicate phoneme {p!r}")
            index[p] = i
        object.__setattr__(self, "_index", index)

    boundary_symbol = BOUNDARY
    silence_symbol = SILENCE

    @property
    def size(self) -> int:
        return len(self.phonemes)

    def __len__(self):
        return len(self.phonemes)

    def __iter__(self):
        return iter(self.phonemes)

    def __contains__(self, symbol):
        return symbol in self._index

    def index(self, phoneme: str) -> int:
        try:
            return self._index[phoneme]
        except KeyError:
            raise LabelError(f"unknown phoneme {phoneme!r}") from None

    # context classes: phonemes, then '#'/silence
    @property
    def num_contexts(self) -> int:
        return self.size + 1

    @property
    def boundary_context(self) -> int:
        return self.size

    def context_index(self, symbol: str | None) -> int:
        if symbol is None or symbol in RESERVED:
            return self.size
        return self.index(symbol)

    def context_symbol(self, index: int) -> str:
        if index == self.size:
            return BOUNDARY
        return self.phonemes[index]

    # center-state classes
    @property
    def num_center_states(self) -> int:
        return center_state_count(self)

    @property
    def silence_center(self) -> int:
        return 6 * self.size

    def center_index(self, state: AllophoneState) -> int:
        if state.is_silence:
            return self.silence_center
        return (self.index(state.center) * NUM_SUBSTATES + state.substate) * 2 + int(state.word_end)

    def center_phoneme(self, center: int) -> int:
        """Phoneme class (``P`` for silence) of a center-state class."""
        return center // 6 if center < self.silence_center else self.size

    # untied allophone states
    @property
    def num_allophones(self) -> int:
        return self.num_contexts**2 * 6 * self.size + 1

    @property
    def silence_index(self) -> int:
        return self.num_allophones - 1

    def allophone_index(self, state: AllophoneState) -> int:
        if state.is_silence:
            return self.silence_index
        left = self.context_index(state.left)
        right = self.context_index(state.right)
        return (left * 6 * self.size + self.center_index(state)) * self.num_contexts + right

    def allophone_state(self, index: int) -> AllophoneState:
        if not 0 <= index < self.num_allophones:
            raise LabelError(f"allophone index {index} out of range")
        if index == self.silence_index:
            return SILENCE_STATE
        rest, right = divmod(index, self.num_contexts)
        left, center = divmod(rest, 6 * self.size)
        rest, word_end = divmod(center, 2)
        phoneme, substate = divmod(rest, NUM_SUBSTATES)
        return AllophoneState(
            self.phonemes[phoneme],
            substate,
            bool(word_end),
            self.context_symbol(left),
            self.context_symbol(right),
        )

    def digest(self) -> int:
        """64-bit hash identifying the inventory (stored in alignment caches)."""
        h = hashlib.sha1("\n".join(self.phonemes).encode("utf-8")).digest()
        return int.from_bytes(h[:8], "little")


def build_inventory(symbols: Iterable[str]) -> PhonemeInventory:
    return PhonemeInventory(tuple(symbols))


def center_state_count(inventory: PhonemeInventory) -> int:
    """Three substates times two word-end classes per phoneme, plus silence."""
    return 6 * inventory.size + 1


@dataclass(frozen=True)
class Lexicon:
    inventory: PhonemeInventory
    entries: dict[str, tuple[tuple[str, ...], ...]]

    def __post_init__(self):
        for word, prons in self.entries.items():
            if not prons:
                raise LabelError(f"word {word!r} has no pronunciation")
            for pron in prons:
                if not pron:
                    raise LabelError(f"empty pronunciation for {word!r}")
                for p in pron:
                    if p not in self.inventory:
                        raise LabelError(f"word {word!r} uses unknown phoneme {p!r}")

    @property
    def words(self) -> list[str]:
        return list(self.entries)

    def __contains__(self, word):
        return word in self.entries

    def __len__(self):
        return len(self.entries)

    def pronunciations(self, word: str) -> tuple[tuple[str, ...], ...]:
        try:
            return self.entries[word]
        except KeyError:
            raise OovError(f"out-of-vocabulary word {word!r}") from None


def make_lexicon(inventory: PhonemeInventory, entries: dict[str, Sequence]) -> Lexicon:
    """Build a lexicon from ``word -> pronunciation(s)``.

    A value is either one whitespace-separated pronunciation string or a list
    of variants, each a string or a phoneme sequence.
    """
    norm = {}
    for word, prons in entries.items():
        if isinstance(prons, str):
            prons = [prons]
        norm[word] = tuple(tuple(p.split()) if isinstance(p, str) else tuple(p) for p in prons)
    return Lexicon(inventory, norm)


def read_phonemes(path: str | Path) -> PhonemeInventory:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return build_inventory(line.strip() for line in lines if line.strip())


def write_phonemes(inventory: PhonemeInventory, path: str | Path) -> None:
    Path(path).write_text("".join(p + "\n" for p in inventory), encoding="utf-8")


def read_lexicon(path: str | Path, inventory: PhonemeInventory) -> Lexicon:
    entries: dict[str, list[tuple[str, ...]]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        if "\t" not in line:
            raise LabelError(f"{path}:{lineno}: expected WORD<TAB>phonemes")
        word, pron = line.split("\t", 1)
        entries.setdefault(word.strip(), []).append(tuple(pron.split()))
    return Lexicon(inventory, {w: tuple(p) for w, p in entries.items()})


def write_lexicon(lexicon: Lexicon, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for word, prons in lexicon.entries.items():
            for pron in prons:
                f.write(f"{word}\t{' '.join(pron)}\n")


@dataclass(frozen=True)
class SegmentSequence:
    """Per-phoneme, per-substate expansion of an utterance.

    ``word_bounds[i]`` is the segment index one past the last segment of word i.
    """

    segments: tuple[AllophoneState, ...]
    word_bounds: tuple[int, ...]

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def __getitem__(self, i):
        return self.segments[i]


def word_seq_to_segments(
    words: Sequence[str],
    lexicon: Lexicon,
    pronunciation_choice: Sequence[int] | None = None,
) -> SegmentSequence:
    """Expand words into allophone segments with within-word triphone contexts.

    Word-boundary phonemes see ``#`` as their outer context; all substates of a
    word-final phoneme carry ``word_end``.
    """
    if pronunciation_choice is not None and len(pronunciation_choice) != len(words):
        raise LabelError("one pronunciation index per word required")
    segments: list[AllophoneState] = []
    bounds: list[int] = []
    for i, word in enumerate(words):
        prons = lexicon.pronunciations(word)
        k = 0 if pronunciation_choice is None else pronunciation_choice[i]
        if not 0 <= k < len(prons):
            raise LabelError(f"pronunciation index {k} out of range for {word!r}")
        pron = prons[k]
        for j, ph in enumerate(pron):
            left = pron[j - 1] if j > 0 else BOUNDARY
            right = pron[j + 1] if j + 1 < len(pron) else BOUNDARY
            last = j == len(pron) - 1
            segments.extend(AllophoneState(ph, s, last, left, right) for s in range(NUM_SUBSTATES))
        bounds.append(len(segments))
    return SegmentSequence(tuple(segments), tuple(bounds))
