"""Distillation losses, auxiliary router losses, and the combined objective."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from elasticlab import distill as dl
from elasticlab import numerics as nx
from elasticlab.config import ConfigError, DistillConfig
from elasticlab.numerics import Tensor
from elasticlab.routing import token_budget, topk_mask

FWD = DistillConfig(direction="forward", top_k_vocab=0)
REV = DistillConfig(direction="reverse", top_k_vocab=0)


def np_softmax(x, tau=1.0):
    z = np.exp((x - x.max(-1, keepdims=True)) / tau)
    return z / z.sum(-1, keepdims=True)


def brute_kl(p, q):
    return float(np.sum(p * (np.log(p) - np.log(q))))


# ---------------------------------------------------------------- KL

def test_kl_self_is_exactly_zero(rng):
    logits = rng.standard_normal((2, 5, 11)).astype(np.float32)
    for cfg in (FWD, REV, DistillConfig(temperature=3.0, top_k_vocab=0)):
        assert float(dl.kl_loss(Tensor(logits), logits, cfg).data) == 0.0


def test_temperature_softens():
    s, t = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    hot = float(dl.kl_loss(Tensor(s), t, DistillConfig(temperature=100.0, top_k_vocab=0)).data)
    cold = float(dl.kl_loss(Tensor(s), t, DistillConfig(temperature=1.0, top_k_vocab=0)).data)
    assert hot < cold


def test_kl_matches_brute_force(rng):
    s, t = rng.standard_normal(6), rng.standard_normal(6)
    ps, pt = np_softmax(s, 2.0), np_softmax(t, 2.0)
    cfg = DistillConfig(temperature=2.0, top_k_vocab=0)
    assert float(dl.kl_loss(Tensor(s[None]), t[None], cfg).data) == pytest.approx(brute_kl(ps, pt), abs=1e-12)
    cfg = DistillConfig(temperature=2.0, top_k_vocab=0, direction="reverse")
    assert float(dl.kl_loss(Tensor(s[None]), t[None], cfg).data) == pytest.approx(brute_kl(pt, ps), abs=1e-12)


def test_forward_kl_nonnegative_on_1000_pairs():
    rng = np.random.default_rng(7)
    s, t = rng.standard_normal((1000, 8)) * 3, rng.standard_normal((1000, 8)) * 3
    ls = s - np.log(np.exp(s).sum(-1, keepdims=True))
    lt = t - np.log(np.exp(t).sum(-1, keepdims=True))
    per_pair = (np.exp(ls) * (ls - lt)).sum(-1)
    assert np.all(per_pair >= -1e-12)
    assert float(dl.kl_loss(Tensor(s), t, FWD).data) >= 0


def test_shape_mismatch():
    with pytest.raises(ConfigError):
        dl.kl_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 4)), FWD)


def test_bad_temperature():
    with pytest.raises(ConfigError):
        dl.kl_loss(Tensor(np.zeros((1, 3))), np.zeros((1, 3)), DistillConfig.model_construct(temperature=0.0,
                                                                                              direction="forward"))


# ---------------------------------------------------------------- top-K KL

def test_topk_identical_is_zero():
    t = np.log(np.array([[0.5, 0.3, 0.2]]))
    assert float(dl.topk_kl_loss(Tensor(t.copy()), t, 2, FWD).data) == 0.0


def bucketed(p, idx):
    top = p[idx]
    return np.concatenate([top, [1.0 - top.sum()]])


@pytest.mark.parametrize("direction", ["forward", "reverse"])
def test_topk_full_vocab_reduces_to_kl(direction):
    rng = np.random.default_rng(3)
    cfg = DistillConfig(direction=direction, top_k_vocab=0)
    for _ in range(50):
        s, t = rng.standard_normal(4) * 2, rng.standard_normal(4) * 2
        ps, pt = np_softmax(s), np_softmax(t)
        idx = np.argsort(-pt, kind="stable")[:3]
        a, b = (bucketed(ps, idx), bucketed(pt, idx)) if direction == "forward" else (bucketed(pt, idx), bucketed(ps, idx))
        oracle = brute_kl(np.maximum(a, 1e-300), np.maximum(b, 1e-300))
        got = float(dl.topk_kl_loss(Tensor(s[None]), t[None], 3, cfg).data)
        full = float(dl.kl_loss(Tensor(s[None]), t[None], cfg).data)
        assert got == pytest.approx(oracle, abs=1e-9)
        assert abs(got - full) <= 1e-6


def test_student_in_residual_bucket():
    t = np.log(np.array([[0.5, 0.3, 0.2]]))
    s = np.array([[-30.0, -30.0, 0.0]])
    r_t = 0.2
    fwd = float(dl.topk_kl_loss(Tensor(s), t, 2, FWD).data)
    rev = float(dl.topk_kl_loss(Tensor(s), t, 2, REV).data)
    ps = np_softmax(s[0])
    expected_fwd = brute_kl(ps, np.array([0.5, 0.3, 0.2]))
    assert fwd == pytest.approx(expected_fwd, rel=1e-9)
    assert fwd == pytest.approx(math.log(1 / r_t), abs=1e-9)
    assert rev > math.log(1 / r_t)


def test_topk_range_check():
    with pytest.raises(ConfigError):
        dl.topk_kl_loss(Tensor(np.zeros((1, 4))), np.zeros((1, 4)), 4, FWD)


# ---------------------------------------------------------------- cosine

def test_cosine_cases():
    a = np.array([[[1.0, 0.0]]])
    assert float(dl.cosine_distance_loss(Tensor(a), a).data) == 0.0
    assert float(dl.cosine_distance_loss(Tensor(a), np.array([[[0.0, 3.0]]])).data) == pytest.approx(1.0)
    assert float(dl.cosine_distance_loss(Tensor(a), -2 * a).data) == pytest.approx(2.0)


def test_cosine_zero_norm_raises():
    with pytest.raises(nx.NumericError):
        dl.cosine_distance_loss(Tensor(np.zeros((1, 1, 3))), np.ones((1, 1, 3)))


# ---------------------------------------------------------------- load balance

@pytest.mark.parametrize("M,k", [(4, 1), (4, 2), (8, 3), (2, 2)])
def test_uniform_load_is_k_over_M(M, k):
    f = np.full(M, k / M)
    P = Tensor(np.full(M, 1.0 / M))
    assert abs(float(dl.load_balance_loss(f, P).data) - k / M) <= 1e-12


def test_collapse_value():
    f = np.array([1.0, 0, 0, 0])
    assert float(dl.load_balance_loss(f, Tensor(f.copy())).data) == 1.0


@given(arrays(np.float64, 4, elements=st.floats(-2, 2)), st.integers(1, 3))
def test_uniform_is_minimum_when_f_follows_P(noise, k):
    """f is the top-k indicator of the same probability vector P."""
    M = 4
    P = np_softmax(noise)
    f = topk_mask(P, k).astype(float)
    assert float(dl.load_balance_loss(f, Tensor(P)).data) >= k / M - 1e-12


def test_load_from_decisions_uses_frequencies(rng):
    from elasticlab.routing import ParamRouter, param_route
    dec = param_route(ParamRouter(Tensor(rng.standard_normal((4, 5))), 2), Tensor(rng.standard_normal((3, 7, 5))))
    load, bce = dl.auxiliary_terms([dec], causal=True)
    f = dec.selected.reshape(-1, 4).mean(0)
    P = dec.probs.data.reshape(-1, 4).mean(0)
    assert float(load[0].data) == pytest.approx(float(f @ P), rel=1e-12)
    assert f.sum() == pytest.approx(2.0) and bce == []


# ---------------------------------------------------------------- top-k BCE

def test_bce_saturated():
    logits = np.array([10.0, -10.0, 10.0, -10.0])
    assert float(dl.topk_bce_loss(Tensor(logits), 0.5).data) < 1e-4


def test_bce_uncertain_is_ln2():
    assert float(dl.topk_bce_loss(Tensor(np.zeros(8)), 0.5).data) == pytest.approx(math.log(2), abs=1e-12)


@given(st.integers(1, 30), st.floats(0.05, 1.0))
def test_bce_target_count(T, c):
    rng = np.random.default_rng(T)
    targets = topk_mask(rng.standard_normal(T), token_budget(c, T))
    assert targets.sum() == math.ceil(c * T - 1e-9)


# ---------------------------------------------------------------- objective

def test_zero_lambdas_give_distill_only(rng):
    d = Tensor(np.array(0.7))
    cfg = DistillConfig(lambda_load=0.0, lambda_topk=0.0)
    total = dl.total_objective(d, [Tensor(np.array(5.0))], [Tensor(np.array(3.0))], cfg)
    assert float(total.data) == 0.7


def test_fixed_point_total_is_zero(rng):
    logits = rng.standard_normal((2, 4, 9))
    d = dl.distill_loss(Tensor(logits), logits, DistillConfig(top_k_vocab=4), causal=True)
    total = dl.total_objective(d, [Tensor(np.array(0.0))], [Tensor(np.array(0.0))], DistillConfig())
    assert float(total.data) == 0.0


def test_bce_rejected_for_encoder():
    with pytest.raises(ConfigError):
        dl.total_objective(Tensor(np.array(0.1)), [], [Tensor(np.array(0.1))], DistillConfig(), causal=False)


def test_objective_averages_layers():
    terms = [Tensor(np.array(v)) for v in (1.0, 3.0)]
    total = dl.total_objective(Tensor(np.array(0.0)), terms, [], DistillConfig(lambda_load=0.5))
    assert float(total.data) == 1.0


@given(arrays(np.float64, (3, 6), elements=st.floats(-5, 5)), arrays(np.float64, (3, 6), elements=st.floats(-5, 5)))
def test_losses_nonnegative(s, t):
    assert float(dl.kl_loss(Tensor(s), t, FWD).data) >= -1e-12
    assert float(dl.kl_loss(Tensor(s), t, REV).data) >= -1e-12
    assert float(dl.topk_kl_loss(Tensor(s), t, 3, FWD).data) >= -1e-12
    assert float(dl.topk_kl_loss(Tensor(s), t, 3, REV).data) >= -1e-12


# ---------------------------------------------------------------- gradients

LOSSES = {
    "kl_forward": lambda s, t: dl.kl_loss(s, t, DistillConfig(temperature=1.5, top_k_vocab=0)),
    "kl_reverse": lambda s, t: dl.kl_loss(s, t, DistillConfig(temperature=0.7, top_k_vocab=0, direction="reverse")),
    "topk_forward": lambda s, t: dl.topk_kl_loss(s, t, 3, DistillConfig(temperature=2.0)),
    "topk_reverse": lambda s, t: dl.topk_kl_loss(s, t, 3, DistillConfig(direction="reverse")),
    "cosine": lambda s, t: dl.cosine_distance_loss(s, t),
}


@pytest.mark.parametrize("name", sorted(LOSSES))
@pytest.mark.parametrize("seed", range(10))
def test_loss_gradients(name, seed):
    rng = np.random.default_rng(seed)
    s, t = rng.standard_normal((2, 3, 7)), rng.standard_normal((2, 3, 7))
    x = Tensor(s, requires_grad=True)
    LOSSES[name](x, t).backward()
    numeric = nx.finite_diff_grad(lambda z: LOSSES[name](z, t), Tensor(s))
    assert nx.rel_error(x.grad, numeric) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_load_balance_gradient_through_probs(seed):
    rng = np.random.default_rng(seed)
    f = topk_mask(rng.standard_normal((20, 4)), 2).mean(0)

    def loss(logits):
        return dl.load_balance_loss(f, nx.softmax(logits, axis=-1).mean(axis=0))

    z = rng.standard_normal((20, 4))
    x = Tensor(z, requires_grad=True)
    loss(x).backward()
    assert nx.rel_error(x.grad, nx.finite_diff_grad(loss, Tensor(z))) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_bce_gradient(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(12)
    targets = topk_mask(z, token_budget(0.25, 12)).astype(float)
    loss = lambda x: nx.bce_with_logits(x, targets)
    x = Tensor(z, requires_grad=True)
    dl.topk_bce_loss(x, 0.25).backward()
    assert nx.rel_error(x.grad, nx.finite_diff_grad(loss, Tensor(z))) < 1e-4


def test_teacher_receives_no_gradient(rng):
    teacher = Tensor(rng.standard_normal((2, 3, 6)), requires_grad=True)
    student = Tensor(rng.standard_normal((2, 3, 6)), requires_grad=True)
    for fn in LOSSES.values():
        fn(student, teacher).backward()
    assert teacher.grad is None and student.grad is not None
