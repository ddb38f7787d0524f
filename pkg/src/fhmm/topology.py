"""Alignment acceptors over the 0-1 HMM topology.

Every FSA node emits one label per frame it is occupied. Arcs are either the
node's self-loop or a forward arc to a later node; the emission label of an arc
is that of its target node. A path starts in an initial node (the first frame
pays no transition score) and must end in a final node.
"""

from __future__ import annotations

import enum
import math
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .labels import SILENCE_STATE, AllophoneState, PhonemeInventory, SegmentSequence

LOOP = 0
FORWARD = 1


@dataclass(frozen=True)
class TdpModel:
    """Transition log-scores (natural log). Defaults are normalised pairs."""

    speech_loop: float = math.log(0.5)
    speech_forward: float = math.log(0.5)
    silence_loop: float = math.log(0.9)
    silence_forward: float = math.log(0.1)
    silence_exit_penalty: float = 0.0

    def __post_init__(self):
        for name in ("speech_loop", "speech_forward", "silence_loop", "silence_forward", "silence_exit_penalty"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"tdp {name} must be finite")

    def scaled(self, scale: float) -> "TdpModel":
        return TdpModel(
            self.speech_loop * scale,
            self.speech_forward * scale,
            self.silence_loop * scale,
            self.silence_forward * scale,
            self.silence_exit_penalty * scale,
        )


class TyingLevel(str, enum.Enum):
    NONE = "none"
    MONOPHONE_STATE = "monophone-state"
    CENTER_ONLY = "center-only"


@dataclass(frozen=True)
class TyingScheme:
    """Maps allophone states onto the emission classes of an alignment model.

    ``none`` keeps the untied allophone index, ``monophone-state`` collapses to
    the ``6P + 1`` center-state classes and ``center-only`` to the ``P + 1``
    phoneme classes. Silence always keeps a class of its own.
    """

    inventory: PhonemeInventory
    level: TyingLevel = TyingLevel.NONE

    def __post_init__(self):
        object.__setattr__(self, "level", TyingLevel(self.level))

    @property
    def num_classes(self) -> int:
        inv = self.inventory
        if self.level is TyingLevel.NONE:
            return inv.num_allophones
        if self.level is TyingLevel.MONOPHONE_STATE:
            return inv.num_center_states
        return inv.num_contexts

    def class_of(self, state: AllophoneState) -> int:
        inv = self.inventory
        if self.level is TyingLevel.NONE:
            return inv.allophone_index(state)
        center = inv.center_index(state)
        if self.level is TyingLevel.MONOPHONE_STATE:
            return center
        return inv.center_phoneme(center)


class FsaError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AlignmentFsa:
    states: tuple[AllophoneState, ...]
    labels: np.ndarray  # tied emission class per node
    arc_src: np.ndarray
    arc_dst: np.ndarray
    arc_kind: np.ndarray
    initial: tuple[int, ...]
    final: tuple[int, ...]
    num_classes: int

    @property
    def num_nodes(self) -> int:
        return len(self.states)

    @property
    def num_arcs(self) -> int:
        return len(self.arc_src)

    @cached_property
    def is_silence(self) -> np.ndarray:
        return np.array([s.is_silence for s in self.states], dtype=bool)

    def arc_scores(self, tdp: TdpModel, silence_exit: bool = False) -> np.ndarray:
        """Transition log-score of every arc.

        Loop and forward scores come from the source node type; with
        ``silence_exit`` the lemma-level penalty is added to silence -> speech arcs.
        """
        sil_src = self.is_silence[self.arc_src]
        loop = self.arc_kind == LOOP
        scores = np.where(
            sil_src,
            np.where(loop, tdp.silence_loop, tdp.silence_forward),
            np.where(loop, tdp.speech_loop, tdp.speech_forward),
        ).astype(np.float64)
        if silence_exit:
            exits = sil_src & ~loop & ~self.is_silence[self.arc_dst]
            scores[exits] += tdp.silence_exit_penalty
        return scores

    @cached_property
    def predecessors(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded incoming-arc table ``(src, arc)`` of shape ``(N, K)``, ``-1`` padded.

        Columns are ordered by Viterbi tie preference: forward arcs first by
        source label then source node, the self-loop last.
        """
        incoming = defaultdict(list)
        for a in range(self.num_arcs):
            src, dst, kind = int(self.arc_src[a]), int(self.arc_dst[a]), int(self.arc_kind[a])
            incoming[dst].append((kind == LOOP, int(self.labels[src]), src, a))
        return _pad_table(incoming, self.num_nodes)

    @cached_property
    def successors(self) -> tuple[np.ndarray, np.ndarray]:
        outgoing = defaultdict(list)
        for a in range(self.num_arcs):
            outgoing[int(self.arc_src[a])].append((int(self.arc_dst[a]), a))
        table = {n: [(0, 0, d, a) for d, a in arcs] for n, arcs in outgoing.items()}
        return _pad_table(table, self.num_nodes)

    @cached_property
    def min_length(self) -> int:
        """Fewest frames on any accepted path (``0`` if nothing is accepted)."""
        dist = {n: 1 for n in self.initial}
        for n in range(self.num_nodes):  # nodes are topologically numbered
            if n not in dist:
                continue
            for a in np.flatnonzero(self.arc_src == n):
                d = int(self.arc_dst[a])
                if d != n and dist.get(d, math.inf) > dist[n] + 1:
                    dist[d] = dist[n] + 1
        lengths = [dist[n] for n in self.final if n in dist]
        return min(lengths) if lengths else 0

    def dump(self) -> str:
        """Stable text dump: ``from to label kind`` per arc, final arcs to a virtual end node."""
        kinds = {LOOP: "loop", FORWARD: "forward"}
        lines = [f"initial: {' '.join(map(str, self.initial))}"]
        for s, d, k in zip(self.arc_src, self.arc_dst, self.arc_kind):
            lines.append(f"{s} {d} {self.labels[d]} {kinds[int(k)]}")
        for n in self.final:
            lines.append(f"{n} {self.num_nodes} -1 final")
        lines.append(f"final: {' '.join(map(str, self.final))}")
        return "\n".join(lines) + "\n"


def _pad_table(table: dict, n: int) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(v) for v in table.values()), default=1)
    nodes = np.full((n, width), -1, dtype=np.int64)
    arcs = np.full((n, width), -1, dtype=np.int64)
    for node, entries in table.items():
        for j, entry in enumerate(sorted(entries)):
            nodes[node, j] = entry[2]
            arcs[node, j] = entry[3]
    return nodes, arcs


def build_alignment_fsa(
    segments: SegmentSequence,
    allow_optional_silence: bool = True,
    tying: TyingScheme | None = None,
    *,
    inventory: PhonemeInventory | None = None,
) -> AlignmentFsa:
    """Linear 0-1 chain over the segments, optionally with skippable silences.

    Silence nodes sit before the first word, between words and after the last
    word; each can be looped or bypassed by a direct forward arc. Nodes are
    numbered in segment order.
    """
    if len(segments) == 0:
        raise FsaError("empty segment sequence")
    if tying is None:
        if inventory is None:
            raise FsaError("either a tying scheme or an inventory is required")
        tying = TyingScheme(inventory)

    states: list[AllophoneState] = []
    src: list[int] = []
    dst: list[int] = []
    kind: list[int] = []

    def node(state):
        states.append(state)
        n = len(states) - 1
        src.append(n), dst.append(n), kind.append(LOOP)
        return n

    def forward(a, b):
        src.append(a), dst.append(b), kind.append(FORWARD)

    bounds = set(segments.word_bounds[:-1]) if allow_optional_silence else set()
    initial: list[int] = []
    pending: list[int] = []  # nodes with a forward arc into the next speech node
    if allow_optional_silence:
        sil = node(SILENCE_STATE)
        initial.append(sil)
        pending.append(sil)
    for i, seg in enumerate(segments):
        n = node(seg)
        if i == 0:
            initial.append(n)
        for p in pending:
            forward(p, n)
        pending = [n]
        if i + 1 in bounds:
            sil = node(SILENCE_STATE)
            forward(n, sil)
            pending.append(sil)
    last = pending[0]
    final = [last]
    if allow_optional_silence:
        sil = node(SILENCE_STATE)
        forward(last, sil)
        final.append(sil)

    order = np.lexsort((np.array(dst), np.array(kind), np.array(src)))
    return AlignmentFsa(
        states=tuple(states),
        labels=np.array([tying.class_of(s) for s in states], dtype=np.int64),
        arc_src=np.array(src, dtype=np.int64)[order],
        arc_dst=np.array(dst, dtype=np.int64)[order],
        arc_kind=np.array(kind, dtype=np.int8)[order],
        initial=tuple(initial),
        final=tuple(sorted(final)),
        num_classes=tying.num_classes,
    )


def count_paths(fsa: AlignmentFsa, T: int) -> int:
    """Number of distinct length-``T`` label sequences the FSA accepts.

    Runs a subset construction on the fly so that different node paths emitting
    the same labels are counted once.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    succ = defaultdict(list)
    for s, d in zip(fsa.arc_src, fsa.arc_dst):
        succ[int(s)].append(int(d))

    def split(nodes):
        by_label = defaultdict(set)
        for n in nodes:
            by_label[int(fsa.labels[n])].add(n)
        return [frozenset(v) for v in by_label.values()]

    counts: dict[frozenset, int] = defaultdict(int)
    for subset in split(fsa.initial):
        counts[subset] += 1
    for _ in range(T - 1):
        nxt: dict[frozenset, int] = defaultdict(int)
        for subset, c in counts.items():
            reach = {d for n in subset for d in succ[n]}
            for sub in split(reach):
                nxt[sub] += c
        counts = nxt
    final = set(fsa.final)
    return sum(c for subset, c in counts.items() if subset & final)


def plain_chain(labels: Sequence[AllophoneState], inventory: PhonemeInventory) -> AlignmentFsa:
    """Silence-free chain over explicit states (test and oracle helper)."""
    seq = SegmentSequence(tuple(labels), (len(labels),))
    return build_alignment_fsa(seq, allow_optional_silence=False, inventory=inventory)
