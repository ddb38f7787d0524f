"""Independent brute-force references used by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np


def enumerate_paths(fsa, T):
    """All accepted node paths of length T, by explicit walking of the arc list."""
    succ = {}
    for s, d, k in zip(fsa.arc_src, fsa.arc_dst, fsa.arc_kind):
        succ.setdefault(int(s), []).append((int(d), int(k)))
    paths = [[n] for n in fsa.initial]
    for _ in range(T - 1):
        paths = [p + [d] for p in paths for d, _ in succ.get(p[-1], [])]
    final = set(fsa.final)
    return [p for p in paths if p[-1] in final]


def path_score(fsa, path, em, tdp, silence_exit=False):
    score = em[0, fsa.labels[path[0]]]
    for t in range(1, len(path)):
        a, b = path[t - 1], path[t]
        sil = fsa.states[a].is_silence
        if a == b:
            tr = tdp.silence_loop if sil else tdp.speech_loop
        else:
            tr = tdp.silence_forward if sil else tdp.speech_forward
            if silence_exit and sil and not fsa.states[b].is_silence:
                tr += tdp.silence_exit_penalty
        score += tr + em[t, fsa.labels[b]]
    return score


def brute_force(fsa, em, tdp, silence_exit=False):
    """(log-sum, max score, argmax path, all scores) over enumerated paths."""
    paths = enumerate_paths(fsa, len(em))
    scores = [path_score(fsa, p, em, tdp, silence_exit) for p in paths]
    m = max(scores)
    logsum = m + math.log(sum(math.exp(s - m) for s in scores))
    return logsum, m, paths[int(np.argmax(scores))], scores


def finite_difference(f, x, eps=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = f(x)
        x[idx] = old - eps
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def levenshtein_table(ref, hyp):
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i, j in itertools.product(range(1, n + 1), range(1, m + 1)):
        d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]))
    return d[n][m]
