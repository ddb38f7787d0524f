"""Factored mono/di/triphone posterior model on a small feed-forward encoder.

The joint label posterior is factored as
``P(l | h) * P(c | l, h) * P(r | c, l, h)``: a left-context head, a center-state
head conditioned on an embedding of the left context, and a right-context head
conditioned on embeddings of both. Monophone models only have the center head,
diphone models add the left head.

Gradients are written out by hand; parameters live in a flat ``name -> array``
dict so they can be checkpointed and finite-difference checked directly.
"""

from __future__ import annotations

import enum
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dp import FrameTargets, frame_ce_loss, fullsum_loss_grad, log_softmax
from .labels import PhonemeInventory
from .topology import AlignmentFsa, TdpModel, TyingLevel


class ModelOrder(str, enum.Enum):
    MONO = "mono"
    DI = "di"
    TRI = "tri"

    @property
    def rank(self) -> int:
        return ("mono", "di", "tri").index(self.value)


STREAMS_BY_ORDER = {
    ModelOrder.MONO: ("center",),
    ModelOrder.DI: ("center", "left"),
    ModelOrder.TRI: ("center", "left", "right"),
}


class TrainingError(RuntimeError):
    """Raised when a step produces a non-finite loss; parameters are left untouched."""


@dataclass(frozen=True)
class ScaleSet:
    am_scale: float = 1.0
    prior_scale: float = 0.0
    tdp_scale: float = 1.0
    lm_scale: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be finite and >= 0, got {v}")

    def replace(self, **kw) -> "ScaleSet":
        return ScaleSet(**{**asdict(self), **kw})


@dataclass(frozen=True)
class ScorerConfig:
    input_dim: int
    num_phonemes: int
    order: ModelOrder = ModelOrder.MONO
    hidden: int = 64
    layers: int = 3
    embed: int = 16
    multitask: bool = False
    aux_layers: tuple[int, ...] = ()
    aux_schedule: str = "bottom-up"

    def __post_init__(self):
        object.__setattr__(self, "order", ModelOrder(self.order))
        object.__setattr__(self, "aux_layers", tuple(sorted(self.aux_layers)))
        if self.aux_schedule not in ("bottom-up", "top-down"):
            raise ValueError("aux_schedule must be bottom-up or top-down")
        if len(self.aux_layers) > 3 or any(not 1 <= i <= self.layers for i in self.aux_layers):
            raise ValueError(f"aux layers must be up to three of 1..{self.layers}")

    @property
    def num_contexts(self) -> int:
        return self.num_phonemes + 1

    @property
    def num_centers(self) -> int:
        return 6 * self.num_phonemes + 1

    def aux_streams(self) -> dict[int, tuple[str, ...]]:
        """Layer -> phoneme streams of its auxiliary loss.

        Context order grows mono -> di -> tri along the layer set, from the
        bottom layer up or from the top layer down.
        """
        layers = self.aux_layers if self.aux_schedule == "bottom-up" else self.aux_layers[::-1]
        orders = (ModelOrder.MONO, ModelOrder.DI, ModelOrder.TRI)
        return {layer: STREAMS_BY_ORDER[o] for layer, o in zip(layers, orders)}

    def multitask_streams(self) -> tuple[str, ...]:
        """Phoneme-level targets not used in decoding: tied center phoneme plus missing contexts."""
        if not self.multitask:
            return ()
        return tuple(s for s in ("center", "left", "right") if s == "center" or s not in STREAMS_BY_ORDER[self.order])

    def to_json(self) -> dict:
        d = asdict(self)
        d["order"] = self.order.value
        d["aux_layers"] = list(self.aux_layers)
        return d


@dataclass(frozen=True)
class _Head:
    name: str
    layer: int  # encoder activation index (0 = input)
    out: int
    contexts: tuple[tuple[str, int], ...] = ()
    hidden: bool = True


@dataclass
class FactorLogits:
    """Raw factor logits.

    Teacher-forced form (from :meth:`FactoredScorer.forward`): ``left`` T x (P+1),
    ``center`` T x C, ``right`` T x (P+1). All-context form (from
    :meth:`FactoredScorer.context_logits`): ``center`` is T x (P+1) x C and
    ``right`` T x (P+1) x C x (P+1) for di/triphone models.
    """

    order: ModelOrder
    center: np.ndarray
    left: np.ndarray | None = None
    right: np.ndarray | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return len(self.center)


@dataclass
class _Cache:
    acts: list
    head_inputs: dict
    head_hidden: dict
    contexts: dict


class FactoredScorer:
    def __init__(self, config: ScorerConfig, params: dict | None = None, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.heads = self._head_specs()
        self.params = params if params is not None else self._init_params(seed)
        self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in self.params.items()}
        if "norm.mean" not in self.params:
            self.params["norm.mean"] = np.zeros(config.input_dim, dtype=self.dtype)
            self.params["norm.scale"] = np.ones(config.input_dim, dtype=self.dtype)

    # construction --------------------------------------------------------
    def _head_specs(self) -> list[_Head]:
        c = self.config
        L, P1, C = c.layers, c.num_contexts, c.num_centers
        heads = []
        if c.order is ModelOrder.MONO:
            heads.append(_Head("center", L, C))
        else:
            heads.append(_Head("left", L, P1))
            heads.append(_Head("center", L, C, (("left", P1),)))
        if c.order is ModelOrder.TRI:
            heads.append(_Head("right", L, P1, (("left", P1), ("center", C))))
        for stream in c.multitask_streams():
            heads.append(_Head(f"mt.{stream}", L, P1, hidden=False))
        for layer, streams in c.aux_streams().items():
            for stream in streams:
                heads.append(_Head(f"aux{layer}.{stream}", layer, P1, hidden=False))
        return heads

    def _init_params(self, seed: int) -> dict:
        c = self.config
        shapes: dict[str, tuple[tuple[int, ...], str]] = {}
        dims = [c.input_dim] + [c.hidden] * c.layers
        for i in range(c.layers):
            shapes[f"enc{i + 1}.w"] = ((dims[i], dims[i + 1]), "glorot")
            shapes[f"enc{i + 1}.b"] = ((dims[i + 1],), "zero")
        for h in self.heads:
            if h.hidden:
                shapes[f"{h.name}.w_in"] = ((c.hidden, c.hidden), "glorot")
                shapes[f"{h.name}.b_in"] = ((c.hidden,), "zero")
                for ctx, vocab in h.contexts:
                    shapes[f"{h.name}.emb_{ctx}"] = ((vocab, c.embed), "normal")
                    shapes[f"{h.name}.proj_{ctx}"] = ((c.embed, c.hidden), "glorot")
                shapes[f"{h.name}.w_out"] = ((c.hidden, h.out), "zero")
            else:
                shapes[f"{h.name}.w_out"] = ((c.hidden, h.out), "zero")
            shapes[f"{h.name}.b_out"] = ((h.out,), "zero")
        params = {}
        for name, (shape, kind) in shapes.items():
            # one generator per tensor: adding heads never perturbs the others
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            if kind == "zero":
                params[name] = np.zeros(shape)
            elif kind == "normal":
                params[name] = rng.normal(0.0, 1.0, shape)
            else:
                params[name] = rng.normal(0.0, math.sqrt(2.0 / sum(shape)), shape)
        return params

    def set_normalization(self, features: Sequence[np.ndarray]) -> None:
        x = np.concatenate([np.asarray(f, dtype=np.float64) for f in features])
        self.params["norm.mean"] = x.mean(0).astype(self.dtype)
        self.params["norm.scale"] = (1.0 / np.maximum(x.std(0), 1e-5)).astype(self.dtype)

    def trainable(self) -> list[str]:
        return sorted(k for k in self.params if not k.startswith("norm."))

    def astype(self, dtype) -> "FactoredScorer":
        return FactoredScorer(self.config, {k: v.astype(dtype) for k, v in self.params.items()}, dtype=dtype)

    # forward / backward --------------------------------------------------
    def _encode(self, features: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(features, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ValueError(f"features must be T x {self.config.input_dim}, got {x.shape}")
        p = self.params
        acts = [(x - p["norm.mean"]) * p["norm.scale"]]
        for i in range(1, self.config.layers + 1):
            acts.append(np.tanh(acts[-1] @ p[f"enc{i}.w"] + p[f"enc{i}.b"]))
        return acts

    def forward(self, features: np.ndarray, contexts: FrameTargets | dict | None = None) -> tuple[FactorLogits, _Cache]:
        """Teacher-forced logits of every head.

        ``contexts`` supplies the per-frame left-context and center-state labels
        that condition the center and right heads (required for di/tri).
        """
        p = self.params
        acts = self._encode(features)
        ctx = _context_dict(contexts)
        if self.config.order is not ModelOrder.MONO and "left" not in ctx:
            raise ValueError(f"{self.config.order.value}phone model needs left-context inputs")
        if self.config.order is ModelOrder.TRI and "center" not in ctx:
            raise ValueError("triphone model needs center-state inputs")
        out, inputs, hidden = {}, {}, {}
        for h in self.heads:
            inp = acts[h.layer]
            inputs[h.name] = inp
            if h.hidden:
                pre = inp @ p[f"{h.name}.w_in"] + p[f"{h.name}.b_in"]
                for name, _ in h.contexts:
                    pre = pre + (p[f"{h.name}.emb_{name}"] @ p[f"{h.name}.proj_{name}"])[ctx[name]]
                u = np.tanh(pre)
                hidden[h.name] = u
                out[h.name] = u @ p[f"{h.name}.w_out"] + p[f"{h.name}.b_out"]
            else:
                out[h.name] = inp @ p[f"{h.name}.w_out"] + p[f"{h.name}.b_out"]
        fl = FactorLogits(
            self.config.order,
            out.pop("center"),
            out.pop("left", None),
            out.pop("right", None),
            out,
        )
        return fl, _Cache(acts, inputs, hidden, ctx)

    def backward(self, cache: _Cache | None, head_grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Parameter gradients given d(loss)/d(logits) per head name."""
        if cache is None:
            raise ValueError("backward needs the cache of a forward pass")
        p = self.params
        grads = {k: np.zeros_like(p[k]) for k in self.trainable()}
        d_acts = [None] * len(cache.acts)
        for h in self.heads:
            g = head_grads.get(h.name)
            if g is None:
                continue
            g = np.asarray(g, dtype=self.dtype)
            inp = cache.head_inputs[h.name]
            if h.hidden:
                u = cache.head_hidden[h.name]
                grads[f"{h.name}.w_out"] += u.T @ g
                grads[f"{h.name}.b_out"] += g.sum(0)
                d_pre = (g @ p[f"{h.name}.w_out"].T) * (1.0 - u * u)
                grads[f"{h.name}.w_in"] += inp.T @ d_pre
                grads[f"{h.name}.b_in"] += d_pre.sum(0)
                for name, vocab in h.contexts:
                    d_proj_rows = np.zeros((vocab, d_pre.shape[1]), dtype=self.dtype)
                    np.add.at(d_proj_rows, cache.contexts[name], d_pre)
                    emb, proj = p[f"{h.name}.emb_{name}"], p[f"{h.name}.proj_{name}"]
                    grads[f"{h.name}.emb_{name}"] += d_proj_rows @ proj.T
                    grads[f"{h.name}.proj_{name}"] += emb.T @ d_proj_rows
                d_inp = d_pre @ p[f"{h.name}.w_in"].T
            else:
                grads[f"{h.name}.w_out"] += inp.T @ g
                grads[f"{h.name}.b_out"] += g.sum(0)
                d_inp = g @ p[f"{h.name}.w_out"].T
            d_acts[h.layer] = d_inp if d_acts[h.layer] is None else d_acts[h.layer] + d_inp
        carry = None
        for i in range(self.config.layers, 0, -1):
            d = d_acts[i] if carry is None else (carry if d_acts[i] is None else carry + d_acts[i])
            if d is None:
                continue
            a = cache.acts[i]
            d_pre = d * (1.0 - a * a)
            grads[f"enc{i}.w"] += cache.acts[i - 1].T @ d_pre
            grads[f"enc{i}.b"] += d_pre.sum(0)
            carry = d_pre @ p[f"enc{i}.w"].T
        return grads

    def context_logits(self, features: np.ndarray) -> FactorLogits:
        """Logits of the main factors for every conditioning context."""
        p = self.params
        h = self._encode(features)[-1]
        order = self.config.order

        def hidden_pre(name):
            return h @ p[f"{name}.w_in"] + p[f"{name}.b_in"]

        def ctx_proj(head, name):
            return p[f"{head}.emb_{name}"] @ p[f"{head}.proj_{name}"]

        if order is ModelOrder.MONO:
            u = np.tanh(hidden_pre("center"))
            return FactorLogits(order, u @ p["center.w_out"] + p["center.b_out"])
        left = np.tanh(hidden_pre("left")) @ p["left.w_out"] + p["left.b_out"]
        u = np.tanh(hidden_pre("center")[:, None, :] + ctx_proj("center", "left")[None])
        center = u @ p["center.w_out"] + p["center.b_out"]
        right = None
        if order is ModelOrder.TRI:
            pre = (
                hidden_pre("right")[:, None, None, :]
                + ctx_proj("right", "left")[None, :, None, :]
                + ctx_proj("right", "center")[None, None, :, :]
            )
            right = np.tanh(pre) @ p["right.w_out"] + p["right.b_out"]
        return FactorLogits(order, center, left, right)

    # persistence -----------------------------------------------------------
    def to_tensors(self, prefix: str = "model/") -> dict[str, np.ndarray]:
        return {prefix + k: v for k, v in self.params.items()}

    @classmethod
    def from_tensors(cls, config: ScorerConfig, tensors: dict, prefix: str = "model/") -> "FactoredScorer":
        params = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        return cls(config, params)


def _context_dict(contexts) -> dict:
    if contexts is None:
        return {}
    if isinstance(contexts, FrameTargets):
        return {"left": contexts.left, "center": contexts.center}
    return dict(contexts)


def scorer_forward(scorer: FactoredScorer, features, contexts=None):
    return scorer.forward(features, contexts)


def scorer_backward(scorer: FactoredScorer, cache, head_grads):
    return scorer.backward(cache, head_grads)


# posteriors, priors, emissions ---------------------------------------------


def factor_log_probs(fl: FactorLogits) -> FactorLogits:
    """Normalise each factor of an all-context :class:`FactorLogits`."""
    return FactorLogits(
        fl.order,
        log_softmax(fl.center),
        None if fl.left is None else log_softmax(fl.left),
        None if fl.right is None else log_softmax(fl.right),
    )


def joint_log_posterior(fl: FactorLogits, t: int | None = None, *, normalized: bool = False) -> np.ndarray:
    """``log P(l, c, r | h_t)`` over all label tuples of the model order.

    Shapes: mono ``(C,)``, di ``(P+1, C)``, tri ``(P+1, C, P+1)``; with ``t=None``
    a leading frame axis is kept.
    """
    lp = fl if normalized else factor_log_probs(fl)
    sel = slice(None) if t is None else t
    center = lp.center[sel]
    if fl.order is ModelOrder.MONO:
        return center
    if lp.left is None:
        raise ValueError("missing left factor")
    joint = lp.left[sel][..., :, None] + center
    if fl.order is ModelOrder.TRI:
        if lp.right is None:
            raise ValueError("missing right factor")
        joint = joint[..., None] + lp.right[sel]
    return joint


@dataclass
class Priors:
    p_left: np.ndarray
    p_center: np.ndarray
    p_center_given_left: np.ndarray
    p_right_given_center_left: np.ndarray
    floor: float

    def log_prior(self, order: ModelOrder) -> np.ndarray:
        """Log prior with the same shape as :func:`joint_log_posterior` for ``order``."""
        order = ModelOrder(order)
        if order is ModelOrder.MONO:
            return np.log(self.p_center)
        joint = np.log(self.p_left)[:, None] + np.log(self.p_center_given_left)
        if order is ModelOrder.TRI:
            joint = joint[..., None] + np.log(self.p_right_given_center_left)
        return joint

    def to_json(self) -> dict:
        return {
            "floor": self.floor,
            "p_left": self.p_left.tolist(),
            "p_center": self.p_center.tolist(),
            "p_center_given_left": self.p_center_given_left.tolist(),
            "p_right_given_center_left": self.p_right_given_center_left.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Priors":
        return cls(
            np.array(d["p_left"]),
            np.array(d["p_center"]),
            np.array(d["p_center_given_left"]),
            np.array(d["p_right_given_center_left"]),
            float(d["floor"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "Priors":
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def uniform(cls, num_phonemes: int, floor: float = 1e-6) -> "Priors":
        P1, C = num_phonemes + 1, 6 * num_phonemes + 1
        return cls(np.full(P1, 1 / P1), np.full(C, 1 / C), np.full((P1, C), 1 / C), np.full((P1, C, P1), 1 / P1), floor)


def floor_normalize(weights: np.ndarray, floor: float) -> np.ndarray:
    """Normalise along the last axis so that every entry is at least ``floor``.

    Entries below the floor are raised to it and the remaining mass is rescaled
    over the rest; all-zero rows become uniform.
    """
    w = np.array(weights, dtype=np.float64)
    K = w.shape[-1]
    if not 0 <= floor * K < 1:
        raise ValueError(f"floor {floor} too large for {K} classes")
    total = w.sum(-1, keepdims=True)
    p = np.where(total > 0, w / np.where(total > 0, total, 1), 1.0 / K)
    fixed = np.zeros(p.shape, dtype=bool)
    for _ in range(K):
        low = (p < floor) & ~fixed
        if not low.any():
            break
        fixed |= low
        free_mass = 1.0 - floor * fixed.sum(-1, keepdims=True)
        free_sum = np.where(fixed, 0.0, p).sum(-1, keepdims=True)
        p = np.where(fixed, floor, p * free_mass / np.where(free_sum > 0, free_sum, 1))
    return p


def estimate_priors(
    targets: Sequence[FrameTargets] | None = None,
    num_phonemes: int | None = None,
    *,
    mode: str = "count",
    floor: float = 1e-5,
    scorer: FactoredScorer | None = None,
    features: Sequence[np.ndarray] | None = None,
) -> Priors:
    """Context-dependent priors from aligned targets or from model outputs.

    ``count`` uses relative frequencies of the per-frame factor targets.
    ``model-marginal`` averages the model's softmax outputs over ``features``;
    the conditionals are proper marginals, weighted by the posterior of the
    conditioning context.
    """
    if mode == "count":
        if not targets:
            raise ValueError("empty alignment corpus")
        P1 = num_phonemes + 1
        C = 6 * num_phonemes + 1
        left = np.zeros(P1)
        center = np.zeros(C)
        c_l = np.zeros((P1, C))
        r_cl = np.zeros((P1, C, P1))
        for tg in targets:
            np.add.at(left, tg.left, 1)
            np.add.at(center, tg.center, 1)
            np.add.at(c_l, (tg.left, tg.center), 1)
            np.add.at(r_cl, (tg.left, tg.center, tg.right), 1)
        if left.sum() == 0:
            raise ValueError("empty alignment corpus")
        weights = (left, center, c_l, r_cl)
    elif mode == "model-marginal":
        if scorer is None or not features:
            raise ValueError("model-marginal priors need a scorer and a feature corpus")
        cfg = scorer.config
        P1, C = cfg.num_contexts, cfg.num_centers
        left, center = np.zeros(P1), np.zeros(C)
        c_l, r_cl = np.zeros((P1, C)), np.zeros((P1, C, P1))
        for x in features:
            lp = factor_log_probs(scorer.context_logits(x))
            pc = np.exp(lp.center.astype(np.float64))
            if cfg.order is ModelOrder.MONO:
                center += pc.sum(0)
                continue
            pl = np.exp(lp.left.astype(np.float64))
            plc = pl[:, :, None] * pc
            left += pl.sum(0)
            c_l += plc.sum(0)
            center += plc.sum((0, 1))
            if cfg.order is ModelOrder.TRI:
                r_cl += (plc[..., None] * np.exp(lp.right.astype(np.float64))).sum(0)
        if cfg.order is ModelOrder.MONO:
            c_l = np.broadcast_to(center, (P1, C))
        weights = (left, center, c_l, r_cl)
    else:
        raise ValueError(f"unknown prior mode {mode!r}")
    p_left, p_center, p_cl, p_rcl = (floor_normalize(w, floor) for w in weights)
    return Priors(p_left, p_center, p_cl, p_rcl, floor)


def emission_score(joint_log_post, log_prior, scales: ScaleSet):
    """``am_scale * log P(l,c,r | h) - prior_scale * log P_prior(l,c,r)``."""
    return scales.am_scale * joint_log_post - scales.prior_scale * log_prior


def emission_matrix(
    fl: FactorLogits,
    priors: Priors | None,
    scales: ScaleSet,
    inventory: PhonemeInventory,
    tying: TyingLevel | str = TyingLevel.NONE,
) -> np.ndarray:
    """Scaled per-frame emission scores (T x L) for DP and decoding.

    ``tying='none'`` gives scores over the untied allophone index space (lower
    order models simply ignore the contexts they do not model);
    ``monophone-state`` needs a monophone model and gives the 6P+1 center classes.
    """
    tying = TyingLevel(tying)
    joint = joint_log_posterior(fl).astype(np.float64)
    if priors is not None and scales.prior_scale != 0.0:
        score = emission_score(joint, priors.log_prior(fl.order), scales)
    else:
        score = scales.am_scale * joint
    if tying is TyingLevel.MONOPHONE_STATE:
        if fl.order is not ModelOrder.MONO:
            raise ValueError("monophone-state emissions need a monophone model")
        return score
    if tying is not TyingLevel.NONE:
        raise ValueError(f"unsupported emission tying {tying.value}")
    T = len(score)
    P1, C = inventory.num_contexts, inventory.num_center_states
    S = C - 1
    if fl.order is ModelOrder.MONO:
        full = np.broadcast_to(score[:, None, :, None], (T, P1, C, P1))
    elif fl.order is ModelOrder.DI:
        full = np.broadcast_to(score[..., None], (T, P1, C, P1))
    else:
        full = score
    sil = inventory.boundary_context
    speech = full[:, :, :S, :].reshape(T, -1)
    return np.concatenate([speech, full[:, sil, S, sil][:, None]], axis=1)


# optimisation ----------------------------------------------------------------


class Sgd:
    """Gradient descent with heavy-ball momentum."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.state: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        for k, g in grads.items():
            v = self.state.get(k)
            v = -lr * g if v is None else self.momentum * v - lr * g
            self.state[k] = v.astype(params[k].dtype)
            params[k] += self.state[k]
        self.steps += 1

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {f"opt/{k}": v for k, v in self.state.items()}

    def load_tensors(self, tensors: dict, steps: int) -> None:
        self.state = {k[4:]: v.copy() for k, v in tensors.items() if k.startswith("opt/")}
        self.steps = steps


class Nadam:
    """Adam with Nesterov momentum."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.steps += 1
        t, b1, b2 = self.steps, self.beta1, self.beta2
        for k, g in grads.items():
            m = self.state.get(f"m.{k}", np.zeros_like(g))
            v = self.state.get(f"v.{k}", np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = b1 * m / (1 - b1 ** (t + 1)) + (1 - b1) * g / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            params[k] -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(params[k].dtype)
            self.state[f"m.{k}"], self.state[f"v.{k}"] = m, v

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {f"opt/{k}": v for k, v in self.state.items()}

    def load_tensors(self, tensors: dict, steps: int) -> None:
        self.state = {k[4:]: v.copy() for k, v in tensors.items() if k.startswith("opt/")}
        self.steps = steps


def make_optimizer(name: str, momentum: float = 0.9, eps: float = 1e-8):
    if name == "sgd":
        return Sgd(momentum)
    if name == "nadam":
        return Nadam(eps=eps)
    raise ValueError(f"unknown optimizer {name!r}")


def one_cycle_lr(step: int, total: int, peak: float, initial: float | None = None, final: float | None = None) -> float:
    """One-cycle schedule: 45% linear warmup, 45% linear decay, 10% linear anneal to ``final``."""
    initial = peak / 10 if initial is None else initial
    final = initial / 100 if final is None else final
    if total <= 1:
        return peak
    x = step / (total - 1)
    if x <= 0.45:
        return initial + (peak - initial) * x / 0.45
    if x <= 0.9:
        return peak - (peak - initial) * (x - 0.45) / 0.45
    return initial - (initial - final) * (x - 0.9) / 0.1


@dataclass(frozen=True)
class LossSpec:
    criterion: str = "viterbi"  # or "fullsum"
    smoothing: float = 0.0
    focal: float = 0.0
    multitask_weight: float = 0.0
    aux_weight: float = 0.0
    # full-sum only
    prior_scale: float = 0.0
    tdp: TdpModel = TdpModel()


@dataclass
class Batch:
    """Training chunks: features with frame targets (Viterbi) or with FSAs (full-sum)."""

    features: list[np.ndarray]
    targets: list[FrameTargets] | None = None
    fsas: list[AlignmentFsa] | None = None
    log_prior: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return sum(len(x) for x in self.features)


def phoneme_stream_targets(tg: FrameTargets, num_phonemes: int) -> dict[str, np.ndarray]:
    center_ph = np.where(tg.center < 6 * num_phonemes, tg.center // 6, num_phonemes)
    return {"center": center_ph, "left": tg.left, "right": tg.right}


def batch_loss_and_grads(scorer: FactoredScorer, batch: Batch, spec: LossSpec) -> tuple[dict, dict]:
    """Loss report and parameter gradients of the frame-averaged batch loss."""
    cfg = scorer.config
    x = np.concatenate(batch.features)
    n = len(x)
    if spec.criterion == "fullsum":
        if cfg.order is not ModelOrder.MONO:
            raise ValueError("full-sum training is implemented for monophone models")
        fl, cache = scorer.forward(x)
        logp = log_softmax(fl.center.astype(np.float64))
        em = logp
        if batch.log_prior is not None and spec.prior_scale:
            em = logp - spec.prior_scale * batch.log_prior
        g_center = np.zeros_like(logp)
        total, start = 0.0, 0
        for feats, fsa in zip(batch.features, batch.fsas):
            end = start + len(feats)
            loss, grad_em = fullsum_loss_grad(fsa, em[start:end], spec.tdp)
            total += loss
            # d em / d logits is the log-softmax Jacobian
            g_center[start:end] = grad_em - np.exp(logp[start:end]) * grad_em.sum(1, keepdims=True)
            start = end
        report = {"main": total / n, "multitask": 0.0, "aux": 0.0, "total": total / n, "frames": n}
        grads = scorer.backward(cache, {"center": g_center / n})
        return report, grads

    tg = FrameTargets(*(np.concatenate([getattr(t, f) for t in batch.targets]) for f in ("left", "center", "right")))
    fl, cache = scorer.forward(x, tg)
    head_grads: dict[str, np.ndarray] = {}
    main = 0.0
    for name, logits, target in (("left", fl.left, tg.left), ("center", fl.center, tg.center), ("right", fl.right, tg.right)):
        if logits is None:
            continue
        loss, g = frame_ce_loss(logits.astype(np.float64), target, spec.smoothing, spec.focal)
        main += loss.sum() / n
        head_grads[name] = g / n
    streams = phoneme_stream_targets(tg, cfg.num_phonemes)
    extra = {"multitask": 0.0, "aux": 0.0}
    for name, logits in fl.extra.items():
        kind, weight = ("multitask", spec.multitask_weight) if name.startswith("mt.") else ("aux", spec.aux_weight)
        loss, g = frame_ce_loss(logits.astype(np.float64), streams[name.split(".")[-1]], spec.smoothing, spec.focal)
        extra[kind] += loss.sum() / n
        head_grads[name] = weight * g / n
    total = main + spec.multitask_weight * extra["multitask"] + spec.aux_weight * extra["aux"]
    report = {"main": main, **extra, "total": total, "frames": n}
    return report, scorer.backward(cache, head_grads)


def train_step(scorer: FactoredScorer, optimizer, batch: Batch, spec: LossSpec, lr: float) -> dict:
    """One gradient step on ``batch``; returns the itemised loss report."""
    report, grads = batch_loss_and_grads(scorer, batch, spec)
    if not all(math.isfinite(report[k]) for k in ("main", "multitask", "aux", "total")):
        raise TrainingError(f"non-finite loss: {report}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingError("non-finite gradient")
    optimizer.step(scorer.params, grads, lr)
    report["lr"] = lr
    return report
