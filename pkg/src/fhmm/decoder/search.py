"""Time-synchronous beam search over a lexical prefix tree.

Search states are tree nodes split by substate and by the branch taken after
the node (a child phoneme, or the word end). The branch fixes the right context
and the word-end flag of the allophone state, so every search state has one
emission label. Hypotheses recombine per (search state, truncated LM history).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import count

import numpy as np

from ..labels import BOUNDARY, NUM_SUBSTATES, AllophoneState, PhonemeInventory
from ..model import ScaleSet
from ..topology import TdpModel
from .lattice import Lattice, LatticeArc
from .lm import BOS, EOS, NGramLM
from .tree import PrefixTree

WORD_END = -1


class SearchError(RuntimeError):
    """All hypotheses were pruned, or none reached a final state."""


@dataclass(frozen=True)
class BeamConfig:
    beam_limit: float = math.inf
    score_threshold: float = math.inf
    lookahead: bool = False
    lookahead_scale: float = 1.0
    lookahead_frames: int = 5
    recombine: bool = True

    def __post_init__(self):
        if self.beam_limit < 1:
            raise ValueError("beam_limit must be >= 1")
        if self.score_threshold < 0 or self.lookahead_scale < 0 or self.lookahead_frames < 0:
            raise ValueError("pruning thresholds must be >= 0")


@dataclass
class DecodeResult:
    words: list[str]
    score: float
    am: float
    lm: float
    lattice: Lattice | None


class SearchNetwork:
    """Static expansion of a prefix tree into HMM search states."""

    def __init__(self, tree: PrefixTree, inventory: PhonemeInventory):
        self.tree = tree
        self.inventory = inventory
        labels, nodes, fwd, word_end = [], [], [], []
        entry: dict[int, list[int]] = {}
        index: dict[tuple[int, int, int], int] = {}
        for n in range(1, tree.num_nodes):
            branches = list(tree.children[n].values()) + ([WORD_END] if tree.word_ends[n] else [])
            entry[n] = []
            for b in branches:
                for s in range(NUM_SUBSTATES):
                    index[n, b, s] = len(labels)
                    if s == 0:
                        entry[n].append(len(labels))
                    parent = tree.parent[n]
                    state = AllophoneState(
                        tree.phoneme[n],
                        s,
                        b == WORD_END,
                        tree.phoneme[parent] if parent else BOUNDARY,
                        BOUNDARY if b == WORD_END else tree.phoneme[b],
                    )
                    labels.append(inventory.allophone_index(state))
                    nodes.append(n)
                    word_end.append(n if (b == WORD_END and s == NUM_SUBSTATES - 1) else -1)
        for (n, b, s), i in index.items():
            if s < NUM_SUBSTATES - 1:
                fwd.append((i, [index[n, b, s + 1]]))
            elif b != WORD_END:
                fwd.append((i, entry[b]))
            else:
                fwd.append((i, []))
        fwd.sort()
        self.num_states = len(labels)
        self.silence = self.num_states
        self.labels = np.array(labels + [inventory.silence_index], dtype=np.int64)
        self.node = np.array(nodes + [0], dtype=np.int64)
        self.forward = [succ for _, succ in fwd]
        self.word_end = word_end
        self.root_entries = [i for c in tree.children[0].values() for i in entry[c]]

    def state(self, i: int) -> AllophoneState:
        return self.inventory.allophone_state(int(self.labels[i]))

    def lookahead_masks(self) -> np.ndarray:
        """Tree node x phoneme-class mask of the phonemes in each node's subtree.

        The root (used for silence) allows every phoneme and silence.
        """
        P = self.inventory.size
        masks = np.zeros((self.tree.num_nodes, P + 1), dtype=bool)
        for n in range(self.tree.num_nodes):
            for ph in self.tree.subtree_phonemes(n):
                masks[n, self.inventory.index(ph)] = True
        masks[0, :] = True
        return masks


def lookahead_table(em: np.ndarray) -> np.ndarray:
    """``LA[t]``: sum over frames after ``t`` of the best emission score of that frame."""
    best = np.max(np.asarray(em, dtype=np.float64), axis=1)
    la = np.zeros(len(best))
    la[:-1] = np.cumsum(best[::-1])[::-1][1:]
    return la


def node_lookahead(em: np.ndarray, network: SearchNetwork, window: int) -> np.ndarray:
    """Tree node x frame lookahead over the next ``window`` frames.

    Each frame contributes its best emission over labels whose center phoneme
    is reachable in the node's subtree (context-free: label continuity and
    contexts are ignored).
    """
    inv = network.inventory
    P, P1 = inv.size, inv.num_contexts
    T = len(em)
    speech = em[:, :-1].reshape(T, P1, P, 6, P1).max(axis=(1, 3, 4))
    per_phone = np.concatenate([speech, em[:, -1:]], axis=1)  # T x (P+1)
    masks = network.lookahead_masks()
    best = np.where(masks[None], per_phone[:, None, :], -np.inf).max(-1)  # T x nodes
    csum = np.vstack([np.zeros((1, best.shape[1])), np.cumsum(best, axis=0)])
    t = np.arange(T)
    hi = np.minimum(t + window, T - 1)
    return (csum[hi + 1] - csum[t + 1]).T


def beam_search(
    em: np.ndarray,
    lm: NGramLM,
    tree: PrefixTree,
    tdp: TdpModel,
    scales: ScaleSet,
    config: BeamConfig = BeamConfig(),
    *,
    inventory: PhonemeInventory | None = None,
    network: SearchNetwork | None = None,
    lattice: bool = True,
) -> DecodeResult:
    """Decode one utterance from its (already AM/prior scaled) emission matrix.

    ``em`` is T x L over the untied allophone index space. Transition scores are
    multiplied by ``scales.tdp_scale`` and LM scores by ``scales.lm_scale``.
    """
    if network is None:
        if inventory is None:
            raise ValueError("need an inventory or a prebuilt search network")
        network = SearchNetwork(tree, inventory)
    em = np.asarray(em, dtype=np.float64)
    T = len(em)
    if T == 0:
        raise SearchError("empty utterance")
    tdp = tdp.scaled(scales.tdp_scale)
    lm_scale = scales.lm_scale
    sp_loop, sp_fwd = tdp.speech_loop, tdp.speech_forward
    sil_loop, sil_exit = tdp.silence_loop, tdp.silence_forward + tdp.silence_exit_penalty
    SIL = network.silence
    fwd, word_end, roots = network.forward, network.word_end, network.root_entries
    word_ends, words = tree.word_ends, tree.words

    la = None
    if config.lookahead and config.lookahead_scale > 0 and config.lookahead_frames > 0:
        la = (config.lookahead_scale * node_lookahead(em, network, config.lookahead_frames)).tolist()
        la_node = network.node.tolist()

    lm_cache: dict = {}

    def lm_step(hist, word):
        hit = lm_cache.get((hist, word))
        if hit is None:
            hit = lm_cache[hist, word] = (lm.truncate(hist + (word,)), lm.score(hist, word))
        return hit

    # lattice bookkeeping
    times: list[int] = [0]
    arcs: list[LatticeArc] = []

    def lat_node(t, hist):
        key = (t, hist)
        n = node_ids.get(key)
        if n is None:
            n = node_ids[key] = len(times)
            times.append(t)
        return n

    uid = count()
    # hyp: (score, am, lm, origin, origin_am, origin_lm, trace, origin_time)
    active: dict = {}

    def relax(table, state, hist, hyp, e):
        key = (state, hist) if config.recombine else (state, hist, next(uid))
        old = table.get(key)
        if old is None or hyp[0] + e > old[0]:
            table[key] = (hyp[0] + e, hyp[1] + e) + hyp[2:]

    start_hist = lm.truncate((BOS,))
    node_ids: dict = {(0, start_hist): 0}
    e0 = em[0, network.labels].tolist()
    root = (0.0, 0.0, 0.0, 0, 0.0, 0.0, None, 0)
    relax(active, SIL, start_hist, root, e0[SIL])
    for r in roots:
        relax(active, r, start_hist, root, e0[r])
    active = _prune(active, config, la, la_node if la else None, 0)

    for t in range(1, T):
        e = em[t, network.labels].tolist()
        new: dict = {}
        for key, hyp in active.items():
            state, hist = key[0], key[1]
            score, am, lmsc, org, org_am, org_lm, trace, org_t = hyp
            if state == SIL:
                relax(new, SIL, hist, (score + sil_loop, am + sil_loop) + hyp[2:], e[SIL])
                moved = (score + sil_exit, am + sil_exit) + hyp[2:]
                for r in roots:
                    relax(new, r, hist, moved, e[r])
                continue
            relax(new, state, hist, (score + sp_loop, am + sp_loop) + hyp[2:], e[state])
            nxt = fwd[state]
            if nxt:
                moved = (score + sp_fwd, am + sp_fwd) + hyp[2:]
                for s2 in nxt:
                    relax(new, s2, hist, moved, e[s2])
            node = word_end[state]
            if node >= 0:
                for wid in word_ends[node]:
                    word = words[wid]
                    new_hist, w_lm = lm_step(hist, word)
                    dst = lat_node(t, new_hist)
                    if lattice:
                        arcs.append(LatticeArc(org, dst, word, org_t, t, am - org_am, w_lm))
                    total = score + lm_scale * w_lm + sp_fwd
                    moved = (total, am + sp_fwd, lmsc + w_lm, dst, am, lmsc + w_lm, (word, trace), t)
                    relax(new, SIL, new_hist, moved, e[SIL])
                    for r in roots:
                        relax(new, r, new_hist, moved, e[r])
        if not new:
            raise SearchError(f"no hypothesis survived at frame {t}")
        active = _prune(new, config, la, la_node if la else None, t)

    # sentence end: word-end states close their word, silence after a word closes as is
    final_node = len(times)
    times.append(T)
    best = None
    end_arcs = set()
    for key, hyp in active.items():
        state, hist = key[0], key[1]
        score, am, lmsc, org, org_am, org_lm, trace, org_t = hyp
        if state == SIL:
            if trace is None:
                continue  # at least one word per utterance
            end_lm = lm.score(hist, EOS)
            if lattice:
                arcs.append(LatticeArc(org, final_node, EOS, org_t, T, am - org_am, end_lm))
            cand = (score + lm_scale * end_lm, am, lmsc + end_lm, trace)
        else:
            node = word_end[state]
            if node < 0:
                continue
            cand = None
            for wid in word_ends[node]:
                word = words[wid]
                new_hist, w_lm = lm_step(hist, word)
                end_lm = lm.score(new_hist, EOS)
                if lattice:
                    dst = lat_node(T, new_hist)
                    arcs.append(LatticeArc(org, dst, word, org_t, T, am - org_am, w_lm))
                    if dst not in end_arcs:
                        end_arcs.add(dst)
                        arcs.append(LatticeArc(dst, final_node, EOS, T, T, 0.0, end_lm))
                c = (score + lm_scale * (w_lm + end_lm), am, lmsc + w_lm + end_lm, (word, trace))
                if cand is None or c[0] > cand[0]:
                    cand = c
        if cand is not None and (best is None or cand[0] > best[0]):
            best = cand
    if best is None:
        raise SearchError("no hypothesis ended in a word-end or silence state")

    out, trace = [], best[3]
    while trace is not None:
        out.append(trace[0])
        trace = trace[1]
    lat = None
    if lattice:
        lat = Lattice(times, arcs, 0, [final_node]).connect()
    return DecodeResult(out[::-1], best[0], best[1], best[2], lat)


def _prune(hyps: dict, config: BeamConfig, la, la_node, t: int) -> dict:
    if config.score_threshold == math.inf and config.beam_limit >= len(hyps):
        return hyps
    if la is None:
        cmp = {k: h[0] for k, h in hyps.items()}
    else:
        cmp = {k: h[0] + la[la_node[k[0]]][t] for k, h in hyps.items()}
    if config.score_threshold < math.inf:
        cutoff = max(cmp.values()) - config.score_threshold
        hyps = {k: h for k, h in hyps.items() if cmp[k] >= cutoff}
    if len(hyps) > config.beam_limit:
        keep = sorted(hyps, key=lambda k: -cmp[k])[: int(config.beam_limit)]
        keep_set = set(keep)
        hyps = {k: h for k, h in hyps.items() if k in keep_set}
    return hyps
