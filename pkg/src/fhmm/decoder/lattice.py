"""Word lattices with separate acoustic and LM scores."""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path

from .lm import EOS


class LatticeError(ValueError):
    pass


@dataclass(frozen=True)
class LatticeArc:
    src: int
    dst: int
    word: str
    start: int
    end: int
    am: float  # scaled acoustic + transition score of the span
    lm: float  # unscaled LM log-score (natural log)


@dataclass
class Lattice:
    times: list[int] = field(default_factory=list)
    arcs: list[LatticeArc] = field(default_factory=list)
    initial: int = 0
    finals: list[int] = field(default_factory=list)
    frame_shift: float = 0.01

    @property
    def num_nodes(self) -> int:
        return len(self.times)

    def topological_order(self) -> list[int]:
        indeg = [0] * self.num_nodes
        out = defaultdict(list)
        for a in self.arcs:
            indeg[a.dst] += 1
            out[a.src].append(a.dst)
        queue = deque(sorted(n for n in range(self.num_nodes) if indeg[n] == 0))
        order = []
        while queue:
            n = queue.popleft()
            order.append(n)
            for d in out[n]:
                indeg[d] -= 1
                if indeg[d] == 0:
                    queue.append(d)
        if len(order) != self.num_nodes:
            raise LatticeError("lattice has a cycle")
        return order

    def connect(self) -> "Lattice":
        """Drop nodes and arcs not on an initial -> final path; renumber by time."""
        fwd, bwd = defaultdict(list), defaultdict(list)
        for a in self.arcs:
            fwd[a.src].append(a.dst)
            bwd[a.dst].append(a.src)

        def reach(starts, graph):
            seen, stack = set(starts), list(starts)
            while stack:
                for m in graph[stack.pop()]:
                    if m not in seen:
                        seen.add(m)
                        stack.append(m)
            return seen

        keep = reach([self.initial], fwd) & reach(self.finals, bwd)
        if self.initial not in keep:
            raise LatticeError("no path from the initial to a final node")
        order = sorted(keep, key=lambda n: (self.times[n], n not in self.finals, n))
        new = {n: i for i, n in enumerate(order)}
        arcs = [
            LatticeArc(new[a.src], new[a.dst], a.word, a.start, a.end, a.am, a.lm)
            for a in self.arcs
            if a.src in keep and a.dst in keep
        ]
        arcs.sort(key=lambda a: (a.src, a.dst, a.word, a.start))
        return Lattice(
            [self.times[n] for n in order],
            arcs,
            new[self.initial],
            sorted(new[n] for n in self.finals if n in keep),
            self.frame_shift,
        )

    def dump(self) -> str:
        lines = [
            f"# lattice frame_shift={self.frame_shift} nodes={self.num_nodes} "
            f"initial={self.initial} final={','.join(map(str, self.finals))}"
        ]
        for a in self.arcs:
            lines.append(f"{a.src} {a.dst} {a.word} {a.start} {a.end} {a.am!r} {a.lm!r}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")

    @classmethod
    def parse(cls, text: str) -> "Lattice":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# lattice"):
            raise LatticeError("missing lattice header")
        header = dict(kv.split("=", 1) for kv in lines[0].split()[2:])
        n = int(header["nodes"])
        times = [0] * n
        arcs = []
        for ln in lines[1:]:
            src, dst, word, start, end, am, lm = ln.split()
            arc = LatticeArc(int(src), int(dst), word, int(start), int(end), float(am), float(lm))
            arcs.append(arc)
            times[arc.src], times[arc.dst] = arc.start, arc.end
        finals = [int(x) for x in header["final"].split(",") if x]
        return cls(times, arcs, int(header["initial"]), finals, float(header["frame_shift"]))

    @classmethod
    def load(cls, path: str | Path) -> "Lattice":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


def lattice_best_path(lat: Lattice, lm_scale: float) -> tuple[list[str], float]:
    """Best word sequence under ``am + lm_scale * lm`` and its score.

    Ties between equally scored arcs keep the arc that comes first in the
    lattice's arc order.
    """
    if not lat.arcs or not lat.finals:
        raise LatticeError("empty lattice")
    out = defaultdict(list)
    for a in lat.arcs:
        out[a.src].append(a)
    best = {lat.initial: (0.0, None)}
    for n in lat.topological_order():
        if n not in best:
            continue
        base = best[n][0]
        for a in out[n]:
            s = base + a.am + lm_scale * a.lm
            if a.dst not in best or s > best[a.dst][0]:
                best[a.dst] = (s, a)
    reached = [f for f in lat.finals if f in best]
    if not reached:
        raise LatticeError("no final node reachable")
    end = max(reached, key=lambda f: best[f][0])
    score = best[end][0]
    words = []
    node = end
    while best[node][1] is not None:
        arc = best[node][1]
        if arc.word != EOS:
            words.append(arc.word)
        node = arc.src
    return words[::-1], score
