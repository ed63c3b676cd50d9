import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moie.elen import (DistillConfig, ElenExpert, distill_grad, distill_loss, distill_losses,
                       elen_forward, entropy_reg, expert_sample_loss, top_concepts,
                       top_from_attention)
from moie.errors import ContractError, NumericError
from moie.numcore import cross_entropy, grad_check

from . import oracles


def expert_with_gamma(gamma, hidden=1, t_lens=0.7):
    """Expert whose relevance matrix is exactly ``gamma`` (one hidden unit)."""
    g = np.asarray(gamma, dtype=np.float64)
    C, N = g.shape
    w1 = np.repeat(g[:, None, :] / hidden, hidden, axis=1)
    return ElenExpert(w1, np.zeros((C, hidden)), np.ones((C, hidden)), np.zeros(C), t_lens=t_lens)


def test_uniform_gamma_uniform_attention():
    e = expert_with_gamma(np.full((2, 4), 0.3))
    np.testing.assert_allclose(e.attention(), 0.25)


def test_peaked_gamma_one_hot():
    e = expert_with_gamma([[10.0, 0.0, 0.0, 0.0]])
    assert e.attention()[0, 0] > 0.999


def test_zero_input_zero_logits():
    e = expert_with_gamma(np.ones((3, 4)), hidden=2)
    logits, att = elen_forward(e, np.zeros(4))
    np.testing.assert_array_equal(logits, 0.0)
    assert att.shape == (3, 4)


def test_entropy_examples():
    assert entropy_reg(expert_with_gamma(np.ones((1, 4)))) == pytest.approx(math.log(4))
    assert entropy_reg(expert_with_gamma([[200.0, 0.0, 0.0]])) == pytest.approx(0.0, abs=1e-12)
    assert entropy_reg(expert_with_gamma([[1.0, 1.0]])) == pytest.approx(math.log(2))
    assert entropy_reg(expert_with_gamma([[1.0, 1.0], [2.0, 2.0]])) == pytest.approx(2 * math.log(2))


def test_distill_examples():
    cfg = DistillConfig(alpha_kd=1.0, t_kd=1.0)
    assert distill_loss([0.3, -1.0], [0.3, -1.0], 0, cfg) == pytest.approx(0.0, abs=1e-15)
    kl = 0.75 * math.log(0.75 / 0.5) + 0.25 * math.log(0.25 / 0.5)
    assert distill_loss([0.0, 0.0], [math.log(3), 0.0], 0, cfg) == pytest.approx(kl, rel=1e-12)
    assert kl == pytest.approx(0.130812, abs=1e-6)
    ce_cfg = DistillConfig(alpha_kd=0.0, t_kd=10.0)
    s = np.array([1.0, -0.5, 2.0])
    assert distill_loss(s, [9.0, 0.0, 0.0], 2, ce_cfg) == pytest.approx(cross_entropy(s, [2])[0])


def test_distill_config_ranges():
    with pytest.raises(ContractError):
        DistillConfig(alpha_kd=1.5)
    with pytest.raises(ContractError):
        DistillConfig(t_kd=0.0)


def test_distill_rejects_non_finite():
    with pytest.raises(NumericError):
        distill_losses([[np.nan, 0.0]], [[0.0, 0.0]], [0], DistillConfig())


def test_sample_loss_examples():
    e = expert_with_gamma(np.ones((1, 4)))
    x, t = np.array([1.0, 0.0, 1.0, 0.0]), np.array([0.4])
    cfg = DistillConfig()
    base = distill_loss(e.logits(x)[0], t, 0, cfg)
    e.lambda_lens = 0.0
    assert expert_sample_loss(e, t, x, 0, cfg) == base
    e.lambda_lens = 1e-4
    assert expert_sample_loss(e, t, x, 0, cfg) == pytest.approx(base + 1e-4 * math.log(4), rel=1e-12)


def test_all_zero_components():
    e = expert_with_gamma([[300.0, 0.0]])
    x = np.array([1.0, 0.0])
    t = e.logits(x)[0]
    assert expert_sample_loss(e, t, x, 0, DistillConfig(1.0, 10.0)) == pytest.approx(0.0, abs=1e-12)


def test_top_concepts_examples():
    row = np.log([0.1, 0.7, 0.2]) * 0.7
    e = expert_with_gamma([row - row.min() + 0.01])
    assert top_concepts(e, 0, 1).tolist() == [1]
    assert sorted(top_concepts(e, 0, 3).tolist()) == [0, 1, 2]
    assert top_from_attention([0.4, 0.4, 0.2], 1).tolist() == [0]
    with pytest.raises(ContractError):
        top_concepts(e, 0, 4)


@given(st.lists(st.floats(0.01, 5.0), min_size=3, max_size=6), st.floats(0.0, 3.0))
def test_top_concepts_shift_invariant(row, shift):
    a = expert_with_gamma([row])
    b = expert_with_gamma([[r + shift for r in row]])
    np.testing.assert_allclose(a.attention(), b.attention(), atol=1e-12)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=5),
       st.lists(st.floats(-5, 5), min_size=2, max_size=5),
       st.floats(0, 1), st.floats(0.5, 20))
def test_distill_non_negative(s, t, alpha, T):
    n = min(len(s), len(t))
    v = distill_loss(np.array(s[:n]), np.array(t[:n]), 0, DistillConfig(alpha, T))
    assert v >= -1e-12
    assert v == pytest.approx(oracles.distill(s[:n], t[:n], 0, alpha, T), rel=1e-9, abs=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_entropy_maximal_at_uniform(seed):
    r = np.random.default_rng(seed)
    e = expert_with_gamma(np.ones((1, 5)))
    p = expert_with_gamma(np.abs(1 + 0.3 * r.standard_normal((1, 5))) + 1e-3)
    assert entropy_reg(p) < entropy_reg(e)


def expert_loss_fn(e, x, t, y, cfg):
    def fn():
        out = e.forward_train(x)
        ell = distill_losses(out, t, y, cfg)
        grads = e.backward(distill_grad(out, t, y, cfg) / x.shape[0])
        grads = [g + e.lambda_lens * h for g, h in zip(grads, e.entropy_grad())]
        return float(ell.mean()) + e.lambda_lens * e.entropy(), grads
    return fn


def random_expert(r, nc=5, C=3, hidden=4):
    e = ElenExpert.create(nc, C, hidden, t_lens=0.7, lambda_lens=0.05, rng=r)
    # keep weights away from the |w| kink
    e.w1[np.abs(e.w1) < 0.05] += 0.1
    return e


def test_expert_gradients(rng):
    for _ in range(3):
        e = random_expert(rng)
        x = rng.random((5, 5))
        t = 3 * rng.standard_normal((5, 3))
        y = rng.integers(0, 3, 5)
        assert grad_check(expert_loss_fn(e, x, t, y, DistillConfig(0.9, 2.0)), e.params()) < 1e-4


def test_expert_serialization(rng):
    e = random_expert(rng)
    back = ElenExpert.from_dict(e.to_dict())
    x = rng.random((4, 5))
    np.testing.assert_array_equal(e.logits(x), back.logits(x))


def test_expert_logits_match_oracle(rng):
    e = random_expert(rng)
    x = rng.random((3, 5))
    got = e.logits(x)
    for j in range(3):
        want = oracles.expert_logits(x[j].tolist(), *(oracles.tolist(p) for p in e.params()),
                                     e.t_lens)
        np.testing.assert_allclose(got[j], want, rtol=1e-10, atol=1e-12)


def test_bad_input_width(rng):
    with pytest.raises(ContractError):
        random_expert(rng).logits(np.ones((2, 4)))
