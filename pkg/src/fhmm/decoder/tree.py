"""Lexical prefix tree over pronunciations."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from ..labels import Lexicon


@dataclass(frozen=True)
class PrefixTree:
    """Trie with BFS node numbering; children are visited in phoneme order.

    Node 0 is the root. ``word_ends[n]`` lists the word ids (indices into
    ``words``) whose pronunciation ends at node ``n``.
    """

    words: tuple[str, ...]
    phoneme: tuple[str | None, ...]
    parent: tuple[int, ...]
    children: tuple[dict[str, int], ...]
    word_ends: tuple[tuple[int, ...], ...]

    @property
    def num_nodes(self) -> int:
        return len(self.phoneme)

    @property
    def num_arcs(self) -> int:
        return self.num_nodes - 1

    def arcs(self) -> list[tuple[int, int, str]]:
        return [(self.parent[n], n, self.phoneme[n]) for n in range(1, self.num_nodes)]

    def lookup(self, pron) -> int | None:
        node = 0
        for ph in pron:
            node = self.children[node].get(ph)
            if node is None:
                return None
        return node

    def subtree_phonemes(self, node: int) -> set[str]:
        out, stack = set(), [node]
        while stack:
            n = stack.pop()
            if self.phoneme[n] is not None:
                out.add(self.phoneme[n])
            stack.extend(self.children[n].values())
        return out


def build_prefix_tree(lexicon: Lexicon) -> PrefixTree:
    if len(lexicon) == 0:
        raise ValueError("empty lexicon")
    words = tuple(lexicon.words)
    trie: dict = {}
    for wid, word in enumerate(words):
        for pron in lexicon.pronunciations(word):
            node = trie
            for ph in pron:
                node = node.setdefault(ph, {})
            node.setdefault(None, []).append(wid)

    phoneme, parent, children, word_ends = [None], [0], [], []
    queue = deque([trie])
    while queue:
        node = queue.popleft()
        n = len(children)
        kids = {}
        for ph in sorted(k for k in node if k is not None):
            kids[ph] = len(phoneme)
            phoneme.append(ph)
            parent.append(n)
            queue.append(node[ph])
        children.append(kids)
        word_ends.append(tuple(sorted(set(node.get(None, ())))))
    return PrefixTree(words, tuple(phoneme), tuple(parent), tuple(children), tuple(word_ends))
