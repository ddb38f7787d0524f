"""Word error rate by Levenshtein alignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class WerReport:
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        """Word error rate in percent."""
        return 100.0 * self.errors / self.ref_words if self.ref_words else 0.0

    def __add__(self, other: "WerReport") -> "WerReport":
        return WerReport(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_words + other.ref_words,
        )


def edit_counts(ref: Sequence[str], hyp: Sequence[str]) -> WerReport:
    """Minimum-cost alignment counts; ties prefer substitution, then deletion."""
    n, m = len(ref), len(hyp)
    # cost[i][j] = (errors, subs, dels, ins) for ref[:i] vs hyp[:j]
    prev = [(j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        for j in range(1, m + 1):
            d = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = d
            else:
                diag = (d[0] + 1, d[1] + 1, d[2], d[3])
            up, left = prev[j], cur[j - 1]
            dele = (up[0] + 1, up[1], up[2] + 1, up[3])
            ins = (left[0] + 1, left[1], left[2], left[3] + 1)
            cur.append(min((diag, dele, ins), key=lambda c: c[0]))
        prev = cur
    _, s, d, i = prev[m]
    return WerReport(s, d, i, n)


def wer(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]]) -> WerReport:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if not refs or sum(len(r) for r in refs) == 0:
        raise ValueError("empty reference corpus")
    total = WerReport(0, 0, 0, 0)
    for r, h in zip(refs, hyps):
        total = total + edit_counts(list(r), list(h))
    return total
