"""Concept validation: completeness, zero-out ablation, test-time intervention."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .carver import Blackbox, MoIE, moie_predict
from .concepts import ConceptBank
from .data import Dataset
from .errors import ContractError, InputError, NumericError
from .numcore import DenseNet, Optimizer, softmax

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# rankings
# ---------------------------------------------------------------------------

def global_concept_ranking(moie: MoIE) -> np.ndarray:
    """Bank indices of the experts' concepts ordered by mean attention over
    every expert and class (descending, lower index on ties)."""
    att = np.mean([e.attention() for e in moie.experts], axis=(0, 1))
    order = np.argsort(-att, kind="stable")
    return moie.concept_idx[order]


def expert_usage(moie: MoIE, concepts) -> dict[int, np.ndarray]:
    """Per expert: mean attention row of the predicted class over the samples
    routed to it (expert-local concept order)."""
    x = np.atleast_2d(concepts)
    routes = moie.routes(x)
    out = {}
    for k, e in enumerate(moie.experts):
        rows = routes == k
        if not rows.any():
            continue
        pred = e.predict(x[rows])
        out[k] = e.attention()[pred].mean(axis=0)
    return out


# ---------------------------------------------------------------------------
# completeness
# ---------------------------------------------------------------------------

def concept_scores(embeddings, bank: ConceptBank | np.ndarray, top_idx=None) -> np.ndarray:
    """Projections of embeddings on the selected concept directions, scaled to
    unit L2 norm per sample.  All-zero rows stay zero."""
    q = bank.directions if isinstance(bank, ConceptBank) else np.asarray(bank, dtype=np.float64)
    if top_idx is not None:
        q = q[np.asarray(top_idx, dtype=np.int64)]
    v = np.atleast_2d(np.asarray(embeddings, dtype=np.float64)) @ q.T
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    zero = norm[:, 0] == 0
    if zero.any():
        log.warning("%d samples project to zero on every selected concept", int(zero.sum()))
    norm[zero] = 1.0
    return v / norm


@dataclass
class CompletenessResult:
    eta: float
    accuracy: float  # best Gamma restart, on val
    f0_accuracy: float
    a_r: float
    restarts: list[float]


def _train_gamma(v_tr, y_tr, head: DenseNet, emb_dim, hidden, epochs, lr, batch, rng):
    gamma = DenseNet.create([v_tr.shape[1], hidden, emb_dim], ["relu", "identity"], rng)
    opt = Optimizer(gamma.params(), lr=lr, kind="adam")
    m = v_tr.shape[0]
    for _ in range(epochs):
        order = rng.permutation(m)
        for s in range(0, m, batch):
            idx = order[s:s + batch]
            z = gamma.forward_train(v_tr[idx])
            out = head.forward_train(z)
            p = softmax(out, axis=1)
            p[np.arange(idx.size), y_tr[idx]] -= 1.0
            _, dz = head.backward(p / idx.size)
            grads, _ = gamma.backward(dz)
            opt.step(grads)
    return gamma


def completeness_from_scores(f0: Blackbox, v_train, y_train, v_val, y_val, f0_val_accuracy,
                             num_classes, a_r=None, hidden=128, restarts=3, epochs=60,
                             lr=0.01, batch=128, seed=0) -> CompletenessResult:
    """Completeness for arbitrary concept scores (used for the chance control)."""
    a_r = 1.0 / num_classes if a_r is None else float(a_r)
    if not 0.0 < a_r < 1.0:
        raise ContractError("random accuracy must lie in (0, 1)")
    denom = f0_val_accuracy - a_r
    if denom <= 0:
        raise NumericError("blackbox is at chance: completeness undefined")
    head = f0.head.copy()
    emb_dim = head.input_dim
    accs = []
    for r in range(restarts):
        rng = np.random.default_rng([seed, r, 0xC0])
        gamma = _train_gamma(np.asarray(v_train), np.asarray(y_train), head, emb_dim, hidden,
                             epochs, lr, batch, rng)
        pred = np.argmax(head.forward(gamma.forward(np.asarray(v_val))), axis=1)
        accs.append(float(np.mean(pred == y_val)))
    best = max(accs)
    return CompletenessResult((best - a_r) / denom, best, f0_val_accuracy, a_r, accs)


def completeness(f0: Blackbox, bank: ConceptBank, top_idx, train: Dataset, val: Dataset,
                 num_classes=None, **kw) -> CompletenessResult:
    """``eta = (acc(h0(Gamma(v))) - a_r) / (acc(f0) - a_r)`` on ``val``."""
    num_classes = num_classes or train.num_classes
    v_tr = concept_scores(train.embeddings, bank, top_idx)
    v_va = concept_scores(val.embeddings, bank, top_idx)
    f0_acc = float(np.mean(f0.predict(val.embeddings) == val.labels))
    return completeness_from_scores(f0, v_tr, train.labels, v_va, val.labels, f0_acc,
                                    num_classes, **kw)


def chance_completeness(f0: Blackbox, n_scores: int, train: Dataset, val: Dataset,
                        seed=0, **kw) -> CompletenessResult:
    """Control: concept scores replaced by Gaussian noise."""
    rng = np.random.default_rng([seed, 0xCA])
    v_tr = rng.standard_normal((len(train), n_scores))
    v_va = rng.standard_normal((len(val), n_scores))
    v_tr /= np.linalg.norm(v_tr, axis=1, keepdims=True)
    v_va /= np.linalg.norm(v_va, axis=1, keepdims=True)
    f0_acc = float(np.mean(f0.predict(val.embeddings) == val.labels))
    return completeness_from_scores(f0, v_tr, train.labels, v_va, val.labels, f0_acc,
                                    train.num_classes, seed=seed, **kw)


# ---------------------------------------------------------------------------
# zero-out ablation
# ---------------------------------------------------------------------------

def _expert_rows(moie: MoIE, x):
    routes = moie.routes(x)
    return routes, [np.nonzero(routes == k)[0] for k in range(moie.K)]


def zero_out_ablation(moie: MoIE, concepts, labels, n_list, mode: str = "attention",
                      seed: int = 0) -> list[dict]:
    """Accuracy drop on expert-routed samples when ``N`` concepts are zeroed.

    ``mode="attention"`` zeroes the top-``N`` attention concepts of the
    sample's expert for its predicted class; ``mode="random"`` zeroes ``N``
    concepts drawn uniformly per sample.  Routes are kept fixed.
    """
    x = np.atleast_2d(np.asarray(concepts, dtype=np.float64))
    y = np.asarray(labels)
    nc = x.shape[1]
    if any(n < 0 or n > nc for n in n_list):
        raise InputError(f"N must lie in [0, {nc}]")
    if mode not in ("attention", "random"):
        raise InputError(f"unknown ablation mode {mode!r}")
    _, groups = _expert_rows(moie, x)
    covered = np.concatenate(groups) if groups else np.array([], dtype=np.int64)
    if covered.size == 0:
        return [{"N": int(n), "accuracy": None, "drop": 0.0} for n in n_list]
    base = np.empty(x.shape[0], dtype=np.int64)
    for k, rows in enumerate(groups):
        if rows.size:
            base[rows] = moie.experts[k].predict(x[rows])
    base_acc = float(np.mean(base[covered] == y[covered]))
    rng = np.random.default_rng([seed, 0x2E])
    out = []
    for n in n_list:
        pred = base.copy()
        for k, rows in enumerate(groups):
            if rows.size == 0 or n == 0:
                continue
            e = moie.experts[k]
            xk = x[rows].copy()
            if mode == "attention":
                ranks = np.argsort(-e.attention(), axis=1, kind="stable")[:, :n]
                cols = ranks[base[rows]]
            else:
                cols = np.argsort(rng.random((rows.size, nc)), axis=1)[:, :n]
            np.put_along_axis(xk, cols, 0.0, axis=1)
            pred[rows] = e.predict(xk)
        acc = float(np.mean(pred[covered] == y[covered]))
        out.append({"N": int(n), "accuracy": acc, "drop": base_acc - acc})
    return out


# ---------------------------------------------------------------------------
# test-time intervention
# ---------------------------------------------------------------------------

def hard_scope(moie: MoIE, routes) -> np.ndarray:
    """Samples covered by the final two experts."""
    last = {moie.K - 1, moie.K - 2} - {-1}
    return np.isin(routes, sorted(last))


def intervene(moie: MoIE, concepts, embeddings, labels, oracle, n: int,
              scope: str = "all") -> dict:
    """Replace each expert-routed sample's top-``n`` attention concepts (for
    its predicted class) by ``oracle`` values and re-predict along the same
    route.  Returns accuracy before and after on the scope."""
    if oracle is None:
        raise InputError("intervention needs ground-truth concepts")
    x = np.atleast_2d(np.asarray(concepts, dtype=np.float64))
    o = np.atleast_2d(np.asarray(oracle, dtype=np.float64))
    if o.shape != x.shape:
        raise ContractError("oracle concepts do not match the expert concept set")
    nc = x.shape[1]
    if not 0 <= n <= nc:
        raise InputError(f"N must lie in [0, {nc}]")
    if scope not in ("all", "hard"):
        raise InputError(f"unknown scope {scope!r}")
    y = np.asarray(labels)
    base, routes = moie_predict(moie, x, embeddings)
    pred = base.copy()
    if n > 0:
        for k, e in enumerate(moie.experts):
            rows = np.nonzero(routes == k)[0]
            if rows.size == 0:
                continue
            ranks = np.argsort(-e.attention(), axis=1, kind="stable")[:, :n]
            cols = ranks[base[rows]]
            xk = x[rows].copy()
            np.put_along_axis(xk, cols, np.take_along_axis(o[rows], cols, axis=1), axis=1)
            pred[rows] = e.predict(xk)
    mask = np.ones(x.shape[0], dtype=bool) if scope == "all" else hard_scope(moie, routes)
    if not mask.any():
        return {"N": n, "scope": scope, "n": 0, "before": None, "after": None, "gain": 0.0}
    before = float(np.mean(base[mask] == y[mask]))
    after = float(np.mean(pred[mask] == y[mask]))
    return {"N": n, "scope": scope, "n": int(mask.sum()), "before": before, "after": after,
            "gain": after - before, "predictions": pred}


def flip_concepts(values, rate: float, seed: int = 0) -> np.ndarray:
    """Binary concept values with a fraction ``rate`` flipped at random."""
    rng = np.random.default_rng([seed, 0xF1])
    b = np.asarray(values, dtype=np.float64) > 0.5
    flips = rng.random(b.shape) < rate
    return np.where(flips, ~b, b).astype(np.float64)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def write_curve(rows, path, metric: str, seed: int | None = None) -> None:
    """Curve rows ``{N, value}`` as CSV with columns ``N,metric,value,seed``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "metric", "value", "seed"])
        for r in rows:
            w.writerow([r["N"], metric, repr(float(r["value"])), "" if seed is None else seed])
