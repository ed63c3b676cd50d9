import numpy as np
import pytest

from moie import data
from moie.data import Dataset, GenSpec, SpuriousSpec
from moie.errors import InputError, ParseError


def test_generate_deterministic():
    spec = GenSpec(n_samples=500)
    a, b = data.generate(spec, 3), data.generate(spec, 3)
    for x, y in zip(a, b):
        assert x.embeddings.tobytes() == y.embeddings.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()


def test_linear_readout_single_rule():
    spec = GenSpec(num_classes=2, n_subgroups=1, rule_blocks=[[0]], rho=0.0, concept_noise=0.0,
                   jitter=0.0, emb_noise=0.0, n_samples=1000)
    tr, _, te = data.generate(spec, 0)
    # label = c0 exactly; least squares on embeddings recovers it
    X = np.hstack([tr.embeddings, np.ones((len(tr), 1))])
    beta, *_ = np.linalg.lstsq(X, tr.labels.astype(float), rcond=None)
    pred = np.hstack([te.embeddings, np.ones((len(te), 1))]) @ beta > 0.5
    assert np.mean(pred == te.labels) >= 0.99


def test_rho_one_concepts_useless():
    spec = GenSpec(num_classes=2, rho=0.999, n_samples=2000)
    tr, _, te = data.generate(spec, 0)
    # best single-concept rule on train, applied to test, stays near chance
    accs = [max(np.mean((te.gt_concepts[:, i] > 0.5) == te.labels),
                np.mean((te.gt_concepts[:, i] <= 0.5) == te.labels)) for i in range(16)]
    assert max(accs) < 0.6


def test_spurious_train_correlation():
    spec = GenSpec(num_classes=2, spurious=SpuriousSpec(15, 0.95, 0.5), n_samples=3000)
    tr, va, te = data.generate(spec, 0)
    corr = np.mean(tr.gt_concepts[:, 15] == tr.labels)
    assert abs(corr - 0.95) <= 0.02
    assert abs(np.mean(te.gt_concepts[:, 15] == te.labels) - 0.5) <= 0.02
    np.testing.assert_array_equal(tr.metadata[:, 0], tr.gt_concepts[:, 15])


def test_rules_reproduce_labels():
    spec = GenSpec(n_samples=800)
    rules = data.ground_truth_rules(spec)
    for ds in data.generate(spec, 1):
        for s in range(spec.n_subgroups):
            rows = ds.subgroups == s
            for k, f in enumerate(rules[s]):
                fires = f.evaluate_batch(ds.gt_concepts[rows] > 0.5)
                np.testing.assert_array_equal(fires, ds.labels[rows] == k)


def test_mixed_polarity_rule():
    rule = data.block_rule(2)
    assert rule(np.array([1, 1, 1, 0, 0])) == 1
    assert rule(np.array([0, 0, 0, 1, 1])) == 0
    # all zero: only the two negated literals hold, 2 of 5
    assert rule(np.zeros(5)) == 0
    assert rule(np.array([1, 0, 0, 0, 0])) == 1


def test_context_concepts():
    spec = GenSpec(n_samples=600)
    tr, _, _ = data.generate(spec, 0)
    ctx = spec.context_concepts
    for s in range(spec.n_subgroups):
        np.testing.assert_array_equal(tr.gt_concepts[:, ctx[s]], (tr.subgroups == s).astype(float))


@pytest.mark.parametrize("kw", [
    dict(rho=1.0), dict(rule_blocks=[[0, 1], [1, 2]]), dict(context_concepts=[0, 12]),
    dict(spurious=SpuriousSpec(3, 0.9, 0.5)), dict(spurious=SpuriousSpec(15, 1.5, 0.5)),
    dict(concept_noise=0.6), dict(split_ratios=(0.8, 0.3, 0.1)),
])
def test_spec_validation(kw):
    with pytest.raises(InputError):
        GenSpec(**kw)


def test_split_sizes_and_determinism():
    r = np.random.default_rng(0)
    ds = Dataset(r.standard_normal((100, 3)), r.integers(0, 3, 100), r.random((100, 2)), 3)
    a = data.split(ds, (0.6, 0.2, 0.2), seed=5)
    b = data.split(ds, (0.6, 0.2, 0.2), seed=5)
    assert [len(p) for p in a] == [60, 20, 20]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.embeddings, y.embeddings)
    rows = np.concatenate([p.embeddings for p in a])
    assert np.unique(rows, axis=0).shape[0] == 100  # disjoint and exhaustive
    glob = np.bincount(ds.labels, minlength=3) / 100
    for p in a:
        counts = np.bincount(p.labels, minlength=3)
        assert np.all(np.abs(counts - glob * len(p)) <= 1 + 1e-9)


def test_csv_round_trip(tmp_path):
    tr, _, _ = data.generate(GenSpec(n_samples=200, spurious=SpuriousSpec()), 0)
    data.save_csv(tr, tmp_path / "d.csv")
    back = data.load_csv(tmp_path / "d.csv", num_classes=tr.num_classes)
    for f in ("embeddings", "labels", "concepts", "gt_concepts", "subgroups", "metadata"):
        np.testing.assert_array_equal(getattr(tr, f), getattr(back, f))
    assert back.concept_names == tr.concept_names


def test_csv_small_and_errors(tmp_path):
    p = tmp_path / "ok.csv"
    p.write_text("emb_0,emb_1,concept_a,label\n0.1,0.2,1,0\n0.3,0.1,0,1\n1,2,0.5,1\n")
    assert len(data.load_csv(p)) == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("emb_0,concept_a,y\n0.1,1,0\n")
    with pytest.raises(ParseError, match="label"):
        data.load_csv(bad)
    short = tmp_path / "short.csv"
    short.write_text("emb_0,concept_a,label\n0.1,1\n")
    with pytest.raises(ParseError, match="row 2"):
        data.load_csv(short)
    text = tmp_path / "text.csv"
    text.write_text("emb_0,concept_a,label\n0.1,yes,1\n")
    with pytest.raises(ParseError, match="non-numeric"):
        data.load_csv(text)


def test_jsonl_round_trip(tmp_path):
    spec = GenSpec(n_samples=200)
    sets = dict(zip(("train", "val", "test"), data.generate(spec, 0)))
    data.save_jsonl(sets, tmp_path, spec, 0)
    back = data.load_jsonl(tmp_path)
    for k in sets:
        np.testing.assert_array_equal(sets[k].embeddings, back[k].embeddings)
        np.testing.assert_array_equal(sets[k].subgroups, back[k].subgroups)
