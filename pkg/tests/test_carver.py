import json
import math

import numpy as np
import pytest

from moie import carver
from moie.carver import (Blackbox, CarveHyper, CarveSchedule, MoIE, coverage_report,
                         gated_residual_target, moie_predict, residual_loss, residual_loss_grad,
                         residual_target)
from moie.data import Dataset
from moie.elen import ElenExpert
from moie.errors import ContractError, InputError
from moie.numcore import DenseNet, Layer, grad_check
from moie.selector import Selector


def const_selector(nc, p):
    gate = DenseNet([Layer(np.zeros((1, nc)), np.array([math.log(p / (1 - p))]), "sigmoid")])
    return Selector(gate, 0.2)


def const_expert(nc, C, cls):
    b2 = np.full(C, -5.0)
    b2[cls] = 5.0
    return ElenExpert(np.ones((C, 1, nc)), np.zeros((C, 1)), np.zeros((C, 1)), b2)


def const_blackbox(dim, C, cls):
    b = np.zeros(C)
    b[cls] = 1.0
    return Blackbox(DenseNet([Layer(np.zeros((C, dim)), b, "identity")]))


def test_residual_target_examples():
    np.testing.assert_allclose(residual_target([[2.0, -1.0, 0.5]], [[0.5, 0.5, 0.5]]),
                               [[1.5, -1.5, 0.0]])
    np.testing.assert_array_equal(residual_target([[1.0, 2.0]], [[1.0, 2.0]]), [[0.0, 0.0]])
    with pytest.raises(ContractError):
        residual_target([[1.0, 2.0]], [[1.0, 2.0, 3.0]])


def test_gated_target_endpoints():
    f = np.array([[2.0, -1.0], [0.0, 3.0]])
    g = np.array([[1.0, 1.0], [4.0, -4.0]])
    np.testing.assert_array_equal(gated_residual_target(f, g, [1.0, 1.0]), f - g)
    np.testing.assert_array_equal(gated_residual_target(f, g, [0.0, 0.0]), f)


def test_predict_routing():
    nc, C = 3, 2
    moie = MoIE([const_selector(nc, 0.2), const_selector(nc, 0.9)],
                [const_expert(nc, C, 0), const_expert(nc, C, 1)], const_blackbox(4, C, 0))
    labels, routes = moie_predict(moie, np.zeros((5, nc)), np.zeros((5, 4)))
    assert routes.tolist() == [1] * 5 and labels.tolist() == [1] * 5
    moie = MoIE([const_selector(nc, 0.2), const_selector(nc, 0.3)],
                [const_expert(nc, C, 0), const_expert(nc, C, 1)], const_blackbox(4, C, 0))
    labels, routes = moie_predict(moie, np.zeros((2, nc)), np.zeros((2, 4)))
    assert routes.tolist() == [2, 2] and labels.tolist() == [0, 0]


def test_mixture_validation():
    with pytest.raises(ContractError):
        MoIE([], [], const_blackbox(2, 2, 0))
    with pytest.raises(ContractError):
        MoIE([const_selector(3, 0.5)], [const_expert(4, 2, 0)], const_blackbox(2, 2, 0))
    with pytest.raises(InputError):
        CarveSchedule(taus=[0.0])


def test_proportional_accuracy_example():
    # half the samples go to an expert that is right 90% of the time,
    # half to a residual right 70% of the time
    nc, C, m = 1, 2, 20
    x = np.r_[np.ones(10), np.zeros(10)][:, None]
    gate = DenseNet([Layer(np.array([[40.0]]), np.array([-20.0]), "sigmoid")])
    moie = MoIE([Selector(gate, 0.5)], [const_expert(nc, C, 1)], const_blackbox(2, C, 0))
    y = np.r_[np.ones(9), 0, np.zeros(7), 1, 1, 1].astype(int)
    rep = coverage_report(moie, Dataset(np.zeros((m, 2)), y, x, C))
    accs = [b["accuracy"] for b in rep["buckets"]]
    assert accs == pytest.approx([0.9, 0.7])
    assert rep["cascade_accuracy"] == pytest.approx(0.8)
    assert sum(b["proportional_accuracy"] for b in rep["buckets"]) == pytest.approx(0.8, abs=1e-12)


def test_residual_loss_gradients(rng):
    for _ in range(3):
        net = DenseNet.create([4, 6, 3], ["relu", "identity"], rng)
        e = rng.standard_normal((7, 4))
        target, w = 3 * rng.standard_normal((7, 3)), rng.random(7)

        def fn():
            out = net.forward_train(e)
            grads, _ = net.backward(residual_loss_grad(out, target, w, 10.0))
            return residual_loss(out, target, w, 10.0), grads

        assert grad_check(fn, net.params()) < 1e-4


def test_residual_loss_zero_at_target(rng):
    t = rng.standard_normal((4, 3))
    assert residual_loss(t, t, np.ones(4), 2.0) == pytest.approx(0.0, abs=1e-15)
    assert residual_loss(t, t + 1.0, np.ones(4), 2.0) == pytest.approx(0.0, abs=1e-14)


def test_carved_records(carved):
    recs = carved.moie.records
    assert len(recs) == carved.moie.K >= 1
    cums = [r.cum_coverage for r in recs]
    assert all(b >= a for a, b in zip(cums, cums[1:]))
    assert all(r.covered >= 0 for r in recs)


def test_carved_accounting(carved):
    rep = coverage_report(carved.moie, carved.te, carved.f0)
    total = sum(b["proportional_accuracy"] for b in rep["buckets"])
    assert abs(total - rep["cascade_accuracy"]) <= 1e-12
    assert sum(b["n"] for b in rep["buckets"]) == len(carved.te)


def test_save_load_round_trip(carved, tmp_path):
    carved.moie.save(tmp_path / "m")
    back = MoIE.load(tmp_path / "m")
    a = moie_predict(carved.moie, carved.te.concepts, carved.te.embeddings)
    b = moie_predict(back, carved.te.concepts, carved.te.embeddings)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    assert carver.records_json(back) == carver.records_json(carved.moie)
    man = json.loads((tmp_path / "m" / "manifest.json").read_text())
    man["schema_version"] = 99
    (tmp_path / "m" / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(InputError):
        MoIE.load(tmp_path / "m")


def test_earlier_experts_frozen(carved):
    seen = {}

    def hook(k, sels, exps, _res):
        for i, (s, e) in enumerate(zip(sels, exps)):
            pair = (carver.checksum(s), carver.checksum(e))
            assert seen.setdefault(i, pair) == pair

    tr = carved.tr.subset(np.arange(400))
    fast = CarveHyper(seed=1, expert_epochs=6, warmup_epochs=2, residual_epochs=3)
    carver.carve(carved.f0, tr, carved.va, CarveSchedule([0.2] * 3, cum_coverage_stop=1.0,
                 residual_acc_stop=0.0, min_covered=1), fast, carved.keep, on_iteration=hook)
    assert len(seen) >= 2


def test_single_full_coverage_expert(carved):
    tr = carved.tr.subset(np.arange(300))
    fast = CarveHyper(seed=0, expert_epochs=10, warmup_epochs=2, residual_epochs=2)
    moie = carver.carve(carved.f0, tr, carved.va, CarveSchedule([1.0]), fast, carved.keep)
    assert moie.K == 1
    assert moie.records[0].coverage_full >= 0.9
