import math
import zlib

import numpy as np
import pytest

from fhmm.dp import FrameTargets
from fhmm.labels import build_inventory, make_lexicon, word_seq_to_segments
from fhmm.model import (
    Batch,
    FactoredScorer,
    FactorLogits,
    LossSpec,
    ModelOrder,
    Priors,
    ScaleSet,
    ScorerConfig,
    Sgd,
    batch_loss_and_grads,
    emission_matrix,
    emission_score,
    estimate_priors,
    floor_normalize,
    joint_log_posterior,
    one_cycle_lr,
    train_step,
)
from fhmm.topology import TdpModel, TyingScheme, build_alignment_fsa
from oracles import finite_difference

P = 2
INV = build_inventory(["a", "b"])


def tiny(order, multitask=False, aux=(), schedule="bottom-up", seed=0):
    cfg = ScorerConfig(4, P, order, hidden=8, layers=3, embed=3, multitask=multitask, aux_layers=aux, aux_schedule=schedule)
    scorer = FactoredScorer(cfg, seed=seed, dtype=np.float64)
    for k in scorer.trainable():  # break the zero-initialised output layers
        rng = np.random.default_rng([seed + 1, zlib.crc32(k.encode())])
        scorer.params[k] = scorer.params[k] + rng.normal(0, 0.3, scorer.params[k].shape)
    return scorer


def random_targets(rng, T):
    C = 6 * P + 1
    return FrameTargets(rng.integers(0, P + 1, T), rng.integers(0, C, T), rng.integers(0, P + 1, T))


def check_param_grads(scorer, batch, spec, rtol=1e-4):
    _, grads = batch_loss_and_grads(scorer, batch, spec)
    for name in scorer.trainable():
        original = scorer.params[name].copy()

        def f(v, name=name):
            scorer.params[name] = v
            return batch_loss_and_grads(scorer, batch, spec)[0]["total"]

        fd = finite_difference(f, original, eps=1e-6)
        scorer.params[name] = original
        assert np.allclose(grads[name], fd, rtol=rtol, atol=1e-8), name


@pytest.mark.parametrize(
    "order,multitask,aux,schedule",
    [
        ("mono", True, (1, 2, 3), "bottom-up"),
        ("di", False, (2,), "top-down"),
        ("tri", True, (1, 2, 3), "top-down"),
    ],
)
def test_scorer_backward_matches_fd(order, multitask, aux, schedule):
    rng = np.random.default_rng(0)
    scorer = tiny(order, multitask, aux, schedule)
    batch = Batch([rng.normal(size=(5, 4)), rng.normal(size=(3, 4))], [random_targets(rng, 5), random_targets(rng, 3)])
    spec = LossSpec(smoothing=0.2, focal=2.0, multitask_weight=0.5, aux_weight=0.3)
    check_param_grads(scorer, batch, spec)


def test_fullsum_param_grads_match_fd():
    rng = np.random.default_rng(1)
    scorer = tiny("mono")
    lex = make_lexicon(INV, {"X": "a b", "Y": "b"})
    tying = TyingScheme(INV, "monophone-state")
    fsas = [build_alignment_fsa(word_seq_to_segments(w, lex), True, tying) for w in (["X"], ["Y", "X"])]
    feats = [rng.normal(size=(8, 4)), rng.normal(size=(12, 4))]
    log_prior = np.log(floor_normalize(rng.random(6 * P + 1), 1e-3))
    spec = LossSpec(criterion="fullsum", prior_scale=0.5, tdp=TdpModel())
    check_param_grads(scorer, Batch(feats, fsas=fsas, log_prior=log_prior), spec)


def test_zero_heads_uniform_and_mono_contract():
    cfg = ScorerConfig(4, P, "mono", hidden=8)
    scorer = FactoredScorer(cfg, seed=3)
    fl, _ = scorer.forward(np.ones((2, 4)))
    assert np.all(fl.center == 0) and fl.left is None and fl.right is None


def test_forward_deterministic():
    x = np.random.default_rng(0).normal(size=(6, 4))
    tg = random_targets(np.random.default_rng(1), 6)
    a, _ = tiny("tri", seed=5).forward(x, tg)
    b, _ = tiny("tri", seed=5).forward(x, tg)
    assert np.array_equal(a.center, b.center) and np.array_equal(a.right, b.right)


def test_forward_requires_contexts():
    with pytest.raises(ValueError):
        tiny("di").forward(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        tiny("mono").forward(np.zeros((2, 5)))


def test_backward_zero_signal_and_missing_cache():
    scorer = tiny("tri")
    _, cache = scorer.forward(np.ones((3, 4)), random_targets(np.random.default_rng(0), 3))
    grads = scorer.backward(cache, {})
    assert all(np.all(g == 0) for g in grads.values())
    with pytest.raises(ValueError):
        scorer.backward(None, {})


def test_aux_weight_zero_equals_main_only():
    rng = np.random.default_rng(2)
    batch = Batch([rng.normal(size=(6, 4))], [random_targets(rng, 6)])
    with_aux = tiny("di", aux=(1, 2, 3))
    plain = tiny("di")
    _, g_aux = batch_loss_and_grads(with_aux, batch, LossSpec(aux_weight=0.0))
    _, g_plain = batch_loss_and_grads(plain, batch, LossSpec())
    for k, g in g_plain.items():
        assert np.array_equal(g, g_aux[k]), k


def test_aux_streams_schedule():
    cfg = ScorerConfig(4, P, aux_layers=(1, 2, 3), aux_schedule="bottom-up")
    assert cfg.aux_streams() == {1: ("center",), 2: ("center", "left"), 3: ("center", "left", "right")}
    cfg = ScorerConfig(4, P, aux_layers=(1, 2, 3), aux_schedule="top-down")
    assert cfg.aux_streams()[1] == ("center", "left", "right")


def all_context_logits(order, rng, T=3):
    P1, C = P + 1, 6 * P + 1
    left = rng.normal(size=(T, P1)) if order != "mono" else None
    center = rng.normal(size=(T, C)) if order == "mono" else rng.normal(size=(T, P1, C))
    right = rng.normal(size=(T, P1, C, P1)) if order == "tri" else None
    return FactorLogits(ModelOrder(order), center, left, right)


@pytest.mark.parametrize("order", ["mono", "di", "tri"])
def test_joint_normalised(order):
    rng = np.random.default_rng(0)
    for _ in range(10):
        fl = all_context_logits(order, rng)
        for t in range(3):
            assert abs(np.exp(joint_log_posterior(fl, t)).sum() - 1) < 1e-8


def test_joint_uniform_value():
    fl = FactorLogits(ModelOrder.TRI, np.zeros((1, 4, 19)), np.zeros((1, 4)), np.zeros((1, 4, 19, 4)))
    assert np.allclose(joint_log_posterior(fl, 0), math.log(1 / 4) + math.log(1 / 19) + math.log(1 / 4))


def test_joint_shift_invariance():
    rng = np.random.default_rng(1)
    fl = all_context_logits("tri", rng)
    shifted = FactorLogits(fl.order, fl.center + 3.7, fl.left - 1.0, fl.right + 0.5)
    assert np.allclose(joint_log_posterior(fl), joint_log_posterior(shifted), atol=1e-12)


def test_joint_missing_factor():
    fl = all_context_logits("tri", np.random.default_rng(0))
    fl.right = None
    with pytest.raises(ValueError):
        joint_log_posterior(fl, 0)


def test_priors_count_mode():
    C = 6 * P + 1
    tg = FrameTargets(np.array([2, 2, 2, 2]), np.array([4, 4, 4, 7]), np.array([0, 0, 0, 0]))
    pri = estimate_priors([tg], P, floor=1e-12)
    assert pri.p_center_given_left[2, 4] == pytest.approx(0.75)
    assert pri.p_center_given_left[2, 7] == pytest.approx(0.25)
    assert pri.p_center.shape == (C,)


def test_priors_all_silence():
    C, floor = 6 * P + 1, 1e-3
    tg = FrameTargets(np.full(5, P), np.full(5, C - 1), np.full(5, P))
    pri = estimate_priors([tg], P, floor=floor)
    assert pri.p_center[C - 1] == pytest.approx(1 - (C - 1) * floor)
    assert np.allclose(pri.p_center[: C - 1], floor)


def test_priors_normalised_and_floored():
    rng = np.random.default_rng(0)
    pri = estimate_priors([random_targets(rng, 50) for _ in range(3)], P, floor=1e-4)
    for table in (pri.p_left, pri.p_center, pri.p_center_given_left, pri.p_right_given_center_left):
        assert np.allclose(table.sum(-1), 1, atol=1e-8)
        assert table.min() >= 1e-4 - 1e-15
    with pytest.raises(ValueError):
        estimate_priors([], P)


def test_priors_json_roundtrip(tmp_path):
    pri = estimate_priors([random_targets(np.random.default_rng(0), 20)], P)
    pri.save(tmp_path / "p.json")
    back = Priors.load(tmp_path / "p.json")
    assert np.array_equal(back.p_right_given_center_left, pri.p_right_given_center_left)


def test_priors_count_vs_marginal_on_model_samples():
    """Labels sampled from the model's own joint give count priors close to the marginals."""
    scorer = tiny("tri", seed=4)
    rng = np.random.default_rng(9)
    feats = [rng.normal(size=(8000, 4)) for _ in range(8)]
    marginal = estimate_priors(scorer=scorer, features=feats, mode="model-marginal", floor=1e-9)
    from fhmm.model import factor_log_probs

    samples = []
    for x in feats:
        lp = factor_log_probs(scorer.context_logits(x))
        joint = np.exp(joint_log_posterior(lp, normalized=True)).reshape(len(x), -1)
        cum = joint.cumsum(1)
        idx = (cum < rng.random((len(x), 1)) * cum[:, -1:]).sum(1)
        l, c, r = np.unravel_index(idx, lp.right.shape[1:])
        samples.append(FrameTargets(l, c, r))
    count = estimate_priors(samples, P, floor=1e-9)
    assert np.abs(count.p_left - marginal.p_left).sum() < 0.05
    assert np.abs(count.p_center - marginal.p_center).sum() < 0.05
    n_l = np.bincount(np.concatenate([s.left for s in samples]), minlength=P + 1)
    for l in np.flatnonzero(n_l > 10000):
        assert np.abs(count.p_center_given_left[l] - marginal.p_center_given_left[l]).sum() < 0.05


def test_emission_scale_identity_and_hand_value():
    rng = np.random.default_rng(0)
    joint = rng.normal(size=5)
    log_prior = rng.normal(size=5)
    assert np.array_equal(emission_score(joint, log_prior, ScaleSet(1.0, 0.0)), joint)
    pri = Priors(
        np.array([0.2, 0.3, 0.5]),
        np.full(13, 1 / 13),
        np.tile(np.linspace(1, 2, 13) / np.linspace(1, 2, 13).sum(), (3, 1)),
        np.full((3, 13, 3), 1 / 3),
        1e-6,
    )
    # (l, c, r) = (1, 4, 2), posteriors 0.4 * 0.1 * 0.25
    joint_val = math.log(0.4) + math.log(0.1) + math.log(0.25)
    prior_val = math.log(0.3) + math.log(pri.p_center_given_left[1, 4]) + math.log(1 / 3)
    got = emission_score(joint_val, pri.log_prior("tri")[1, 4, 2], ScaleSet(0.7, 0.4))
    assert got == pytest.approx(0.7 * joint_val - 0.4 * prior_val, abs=1e-10)


def test_emission_uniform_prior_keeps_argmax():
    rng = np.random.default_rng(2)
    fl = all_context_logits("di", rng, T=4)
    pri = Priors.uniform(P)
    a = emission_matrix(fl, None, ScaleSet(1.0, 0.0), INV)
    b = emission_matrix(fl, pri, ScaleSet(1.0, 1.0), INV)
    assert np.array_equal(a.argmax(1), b.argmax(1))


def test_emission_matrix_untied_layout():
    rng = np.random.default_rng(3)
    fl = all_context_logits("tri", rng, T=2)
    em = emission_matrix(fl, None, ScaleSet(), INV)
    assert em.shape == (2, INV.num_allophones)
    joint = joint_log_posterior(fl)
    for idx in rng.integers(0, INV.num_allophones, 20).tolist() + [INV.silence_index]:
        s = INV.allophone_state(idx)
        l, c, r = INV.context_index(s.left), INV.center_index(s), INV.context_index(s.right)
        assert em[1, idx] == pytest.approx(joint[1, l, c, r])


def test_train_step_lr_zero_is_noop_and_loss_decreases():
    rng = np.random.default_rng(0)
    scorer = tiny("di")
    x = rng.normal(size=(40, 4))
    tg = random_targets(rng, 40)
    before = {k: v.copy() for k, v in scorer.params.items()}
    opt = Sgd()
    train_step(scorer, opt, Batch([x], [tg]), LossSpec(), 0.0)
    train_step(scorer, opt, Batch([x], [tg]), LossSpec(), 0.0)
    assert all(np.array_equal(before[k], scorer.params[k]) for k in before)
    losses = [train_step(scorer, opt, Batch([x], [tg]), LossSpec(), 0.05)["total"] for _ in range(100)]
    assert losses[-1] < losses[0]


def test_one_cycle_shape():
    lrs = [one_cycle_lr(s, 101, 1.0, 0.1, 0.001) for s in range(101)]
    assert lrs[0] == pytest.approx(0.1)
    assert lrs[45] == pytest.approx(1.0)
    assert lrs[90] == pytest.approx(0.1)
    assert lrs[100] == pytest.approx(0.001)
    assert all(a <= b for a, b in zip(lrs[:45], lrs[1:46]))


def test_checkpoint_tensor_roundtrip(tmp_path):
    from fhmm.io import read_checkpoint, write_checkpoint

    cfg = ScorerConfig(4, P, "tri", hidden=8, multitask=True, aux_layers=(2,))
    scorer = FactoredScorer(cfg, seed=1)
    write_checkpoint(tmp_path / "m.ckpt", scorer.to_tensors(), {"config": cfg.to_json()})
    tensors, meta = read_checkpoint(tmp_path / "m.ckpt")
    back = FactoredScorer.from_tensors(ScorerConfig(**meta["config"]), tensors)
    assert all(np.array_equal(back.params[k], scorer.params[k]) for k in scorer.params)
