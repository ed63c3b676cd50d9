import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moie.concepts import (ConceptBank, cav_score, cav_train, concept_view, filter_concepts,
                           hinge_loss, learn_concepts, train_cavs, train_probes)
from moie.data import Dataset
from moie.errors import ContractError, InputError, PipelineError


def toy(seed, m=600, l=6):
    r = np.random.default_rng(seed)
    e = r.standard_normal((m, l))
    c = np.stack([
        (e[:, 0] > 0),  # separable by the first coordinate
        r.random(m) < 0.5,  # noise
        (e[:, 0] > 0),  # duplicate of concept 0
    ], axis=1).astype(float)
    return Dataset(e, np.zeros(m, int), c, 2)


def bank(scores, dim=2):
    n = len(scores)
    return ConceptBank([f"c{i}" for i in range(n)], np.eye(n, dim) + 0.1, np.zeros(n), scores)


def test_probe_examples():
    b = train_probes(toy(0), toy(1), seed=0)
    assert b.scores[0] >= 0.95
    assert abs(b.scores[1] - 0.5) <= 0.1
    assert b.scores[2] == pytest.approx(b.scores[0], abs=1e-12)


def test_probe_column_order_invariant():
    tr, va = toy(0), toy(1)
    perm = [2, 0, 1]
    a = train_probes(tr, va, seed=3)
    b = train_probes(tr.replace(concepts=tr.concepts[:, perm], concept_names=None),
                     va.replace(concepts=va.concepts[:, perm], concept_names=None), seed=3)
    np.testing.assert_allclose(a.scores[perm], b.scores, atol=1e-12)


def test_cav_two_clusters():
    r = np.random.default_rng(0)
    pos = np.array([1.0, 0.0]) + 0.1 * r.standard_normal((100, 2))
    neg = np.array([-1.0, 0.0]) + 0.1 * r.standard_normal((100, 2))
    w, b = cav_train(pos, neg)
    assert w[0] / np.linalg.norm(w) >= 0.99
    w, b = cav_train(pos, neg, l2=0.0, epochs=2000)
    assert hinge_loss(w, b, pos, neg) == pytest.approx(0.0, abs=1e-3)


def test_cav_indistinguishable():
    r = np.random.default_rng(0)
    m = 800
    e = r.standard_normal((m, 4))
    c = (r.random((m, 1)) < 0.5).astype(float)
    tr = Dataset(e[:400], np.zeros(400, int), c[:400], 1)
    va = Dataset(e[400:], np.zeros(400, int), c[400:], 1)
    assert abs(train_cavs(tr, va).scores[0] - 0.5) <= 0.1


def test_cav_score_examples():
    b = ConceptBank(["a", "b"], np.array([[1.0, 0.0], [0.0, 2.0]]), np.zeros(2), [1.0, 1.0], "cav")
    assert cav_score(np.array([1.0, 0.0]), b)[0] == 1.0
    assert cav_score(np.array([0.0, 3.0]), b)[0] == 0.0
    assert cav_score(np.array([2.0, 0.0]), b)[0] == 2.0


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
@settings(max_examples=50)
def test_cav_score_linear(a, c, seed):
    r = np.random.default_rng(seed)
    b = ConceptBank(["x", "y", "z"], r.standard_normal((3, 5)), np.zeros(3), [0.9] * 3, "cav")
    u, v = r.standard_normal(5), r.standard_normal(5)
    lhs = cav_score(a * u + c * v, b)
    rhs = a * cav_score(u, b) + c * cav_score(v, b)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_filter_examples():
    assert filter_concepts(bank([0.95, 0.69, 0.71])).tolist() == [0, 2]
    assert filter_concepts(bank([1.0, 1.0])).tolist() == [0, 1]
    with pytest.raises(PipelineError, match="no usable concepts"):
        filter_concepts(bank([0.5, 0.5]))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.floats(0, 0.99), st.floats(0, 0.5))
def test_filter_monotone(scores, t, dt):
    b = ConceptBank([f"c{i}" for i in range(len(scores))], np.ones((len(scores), 2)),
                    np.zeros(len(scores)), scores)
    try:
        hi = set(filter_concepts(b, min(t + dt, 0.999)).tolist())
    except PipelineError:
        hi = set()
    try:
        lo = set(filter_concepts(b, t).tolist())
    except PipelineError:
        lo = set()
    assert hi <= lo


def test_bank_validation():
    with pytest.raises(ContractError):
        ConceptBank(["a"], np.zeros((1, 2)), np.zeros(1), [0.9])
    with pytest.raises(ContractError):
        ConceptBank(["a", "a"], np.ones((2, 2)), np.zeros(2), [0.9, 0.9])
    with pytest.raises(ContractError):
        bank([0.9]).predict(np.ones((1, 3)))


def test_bank_round_trip():
    b = train_probes(toy(0), toy(1))
    back = ConceptBank.from_dict(b.to_dict())
    e = toy(2).embeddings
    np.testing.assert_array_equal(b.predict(e), back.predict(e))


def test_learn_and_view():
    tr, va = toy(0), toy(1)
    with pytest.raises(InputError):
        learn_concepts(tr, va, "nope")
    b = learn_concepts(tr, va, "cav")
    assert b.mode == "cav"
    v = concept_view(tr, b, [0, 2])
    assert v.n_concepts == 2 and v.concept_names == ["c0", "c2"]
