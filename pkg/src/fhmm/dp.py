"""Log-space dynamic programming over alignment FSAs, plus frame-level losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labels import AllophoneState, PhonemeInventory
from .topology import AlignmentFsa, TdpModel

NEG_INF = -np.inf


class EmptyLatticeError(RuntimeError):
    """No accepted path of the requested length."""


@dataclass(frozen=True)
class Alignment:
    frame_labels: tuple[AllophoneState, ...]
    score: float
    nodes: np.ndarray | None = None

    def __len__(self):
        return len(self.frame_labels)


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _check(fsa: AlignmentFsa, em: np.ndarray) -> np.ndarray:
    em = np.asarray(em, dtype=np.float64)
    if em.ndim != 2 or em.shape[1] != fsa.num_classes:
        raise ValueError(f"emission matrix must be T x {fsa.num_classes}, got {em.shape}")
    if len(em) < max(fsa.min_length, 1):
        raise EmptyLatticeError(f"no path of {len(em)} frames (minimum {fsa.min_length})")
    return em


def _tables(fsa, tdp, silence_exit, reverse=False):
    nodes, arcs = fsa.successors if reverse else fsa.predecessors
    scores = np.append(fsa.arc_scores(tdp, silence_exit), NEG_INF)
    return np.where(nodes >= 0, nodes, 0), scores[arcs]  # arcs == -1 picks -inf


def forward_backward(
    fsa: AlignmentFsa,
    em: np.ndarray,
    tdp: TdpModel,
    *,
    silence_exit: bool = False,
) -> tuple[float, np.ndarray]:
    """Full-sum log-likelihood and per-frame class occupancies ``gamma`` (T x L)."""
    em = _check(fsa, em)
    T, N = len(em), fsa.num_nodes
    e = em[:, fsa.labels]
    init = np.full(N, NEG_INF)
    init[list(fsa.initial)] = 0.0
    final = np.full(N, NEG_INF)
    final[list(fsa.final)] = 0.0

    pred, pscore = _tables(fsa, tdp, silence_exit)
    alpha = np.empty((T, N))
    alpha[0] = init + e[0]
    for t in range(1, T):
        alpha[t] = logsumexp(alpha[t - 1][pred] + pscore) + e[t]

    succ, sscore = _tables(fsa, tdp, silence_exit, reverse=True)
    beta = np.empty((T, N))
    beta[T - 1] = final
    for t in range(T - 2, -1, -1):
        nxt = e[t + 1] + beta[t + 1]
        beta[t] = logsumexp(nxt[succ] + sscore)

    loglik = float(logsumexp(alpha[T - 1] + final, axis=0))
    if not np.isfinite(loglik):
        raise EmptyLatticeError("no accepted path has finite score")
    node_post = np.exp(alpha + beta - loglik)
    gamma = np.zeros((T, fsa.num_classes))
    np.add.at(gamma.T, fsa.labels, node_post.T)
    return loglik, gamma


def viterbi_align(
    fsa: AlignmentFsa,
    em: np.ndarray,
    tdp: TdpModel,
    *,
    silence_exit: bool = False,
) -> Alignment:
    """Best accepted path. Ties prefer forward over loop arcs, then lower labels."""
    em = _check(fsa, em)
    T, N = len(em), fsa.num_nodes
    e = em[:, fsa.labels]
    pred, pscore = _tables(fsa, tdp, silence_exit)
    delta = np.full(N, NEG_INF)
    delta[list(fsa.initial)] = 0.0
    delta = delta + e[0]
    back = np.empty((T, N), dtype=np.int64)
    rows = np.arange(N)
    for t in range(1, T):
        cand = delta[pred] + pscore
        best = np.argmax(cand, axis=1)
        back[t] = pred[rows, best]
        delta = cand[rows, best] + e[t]

    finals = sorted(fsa.final, key=lambda n: (int(fsa.labels[n]), n))
    end = max(finals, key=lambda n: delta[n])  # max keeps the first of equal scores
    score = float(delta[end])
    if not np.isfinite(score):
        raise EmptyLatticeError("no accepted path has finite score")
    path = np.empty(T, dtype=np.int64)
    path[-1] = end
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return Alignment(tuple(fsa.states[n] for n in path), score, path)


def fullsum_loss_grad(
    fsa: AlignmentFsa,
    em: np.ndarray,
    tdp: TdpModel,
    *,
    silence_exit: bool = False,
) -> tuple[float, np.ndarray]:
    """Negative full-sum log-likelihood and its gradient ``-gamma`` w.r.t. ``em``."""
    loglik, gamma = forward_backward(fsa, em, tdp, silence_exit=silence_exit)
    return -loglik, -gamma


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def frame_ce_loss(
    logits: np.ndarray,
    target,
    smoothing: float = 0.0,
    focal: float = 0.0,
) -> tuple:
    """Focal-weighted, label-smoothed cross-entropy and its gradient w.r.t. ``logits``.

    ``loss = (1 - p[target]) ** focal * sum_k -q[k] log p[k]`` with
    ``q = (1 - smoothing) * onehot + smoothing / K``. Works on one logit vector
    or on a batch (``logits[..., K]``, ``target[...]``); a batch returns
    per-frame losses.
    """
    logits = np.asarray(logits)
    K = logits.shape[-1]
    if K < 2:
        raise ValueError("need at least two classes")
    if not 0.0 <= smoothing < 1.0 or focal < 0.0:
        raise ValueError("smoothing must be in [0, 1) and focal >= 0")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    target = np.asarray(target)
    logp = log_softmax(logits)
    p = np.exp(logp)
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    q = (1.0 - smoothing) * onehot + smoothing / K
    ce = -np.sum(q * logp, axis=-1)
    grad = p - q
    if focal > 0.0:
        p_t = np.take_along_axis(p, target[..., None], axis=-1)[..., 0]
        rest = np.clip(1.0 - p_t, 0.0, 1.0)
        weight = rest**focal
        # d weight / d logits = -focal * rest^(focal-1) * p_t * (onehot - p)
        with np.errstate(divide="ignore", invalid="ignore"):
            dw_scale = np.where(rest > 0, focal * rest ** (focal - 1.0), 0.0) * p_t
        grad = weight[..., None] * grad - (ce * dw_scale)[..., None] * (onehot - p)
        loss = weight * ce
    else:
        loss = ce
    if loss.ndim == 0:
        return float(loss), grad
    return loss, grad


@dataclass(frozen=True)
class FrameTargets:
    """Per-frame factor targets: context class, center-state class, context class."""

    left: np.ndarray
    center: np.ndarray
    right: np.ndarray

    def __len__(self):
        return len(self.center)

    def slice(self, start: int, end: int) -> "FrameTargets":
        return FrameTargets(self.left[start:end], self.center[start:end], self.right[start:end])


def derive_frame_targets(al: Alignment | list, inventory: PhonemeInventory) -> FrameTargets:
    """Project untied frame labels onto the three factor streams.

    Silence maps to the silence class in every stream; for the context streams
    that class is shared with the word boundary ``#``.
    """
    labels = al.frame_labels if isinstance(al, Alignment) else al
    left = np.array([inventory.context_index(s.left) for s in labels], dtype=np.int64)
    center = np.array([inventory.center_index(s) for s in labels], dtype=np.int64)
    right = np.array([inventory.context_index(s.right) for s in labels], dtype=np.int64)
    return FrameTargets(left, center, right)


def chunk(T: int, size: int = 64, shift: int = 32) -> list[tuple[int, int]]:
    """Overlapping ``[start, end)`` windows covering ``T`` frames.

    Windowing stops once a window reaches ``T``. A final window shorter than
    ``shift / 2`` frames is merged into its predecessor.
    """
    if not size >= shift >= 1:
        raise ValueError("require size >= shift >= 1")
    windows: list[tuple[int, int]] = []
    start = 0
    while start < T:
        end = min(start + size, T)
        if windows and end - start < shift / 2:
            windows[-1] = (windows[-1][0], end)
        else:
            windows.append((start, end))
        if end == T:
            break
        start += shift
    return windows


def linear_alignment(fsa: AlignmentFsa, T: int) -> Alignment:
    """Uniformly spaced alignment over the speech nodes of a chain, ignoring acoustics.

    Used as a deliberately degraded alignment; optional silence is never visited.
    """
    speech = [n for n in range(fsa.num_nodes) if not fsa.is_silence[n]]
    if T < len(speech):
        raise EmptyLatticeError(f"{T} frames cannot cover {len(speech)} segments")
    idx = (np.arange(T) * len(speech)) // T
    path = np.array(speech, dtype=np.int64)[idx]
    return Alignment(tuple(fsa.states[n] for n in path), float("nan"), path)
