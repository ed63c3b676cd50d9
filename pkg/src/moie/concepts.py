"""Concept learning from embeddings.

Two modes share one :class:`ConceptBank`:

``probe``
    one logistic probe per annotated concept; concept value is the
    probe's sigmoid output.
``cav``
    one hinge-loss linear separator per concept (an SVM trained by
    subgradient descent); concept value is the projection
    ``<emb, q> / ||q||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import Dataset
from .errors import ContractError, InputError, PipelineError
from .numcore import Optimizer, sigmoid

SCHEMA_VERSION = 1


@dataclass
class ConceptBank:
    names: list[str]
    directions: np.ndarray  # [Nc, l]
    biases: np.ndarray  # [Nc]
    scores: np.ndarray  # [Nc] validation accuracy or AUROC
    mode: str = "probe"
    degenerate: np.ndarray | None = None

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        n = self.directions.shape[0]
        if self.degenerate is None:
            self.degenerate = np.zeros(n, dtype=bool)
        if len(self.names) != n or self.biases.size != n or self.scores.size != n:
            raise ContractError("concept bank fields disagree on the concept count")
        if len(set(self.names)) != n:
            raise ContractError("concept names must be unique")
        if np.any(np.linalg.norm(self.directions, axis=1) == 0):
            raise ContractError("concept direction with zero norm")
        if np.any((self.scores < 0) | (self.scores > 1)):
            raise ContractError("validation scores must lie in [0, 1]")
        if self.mode not in ("probe", "cav"):
            raise ContractError(f"unknown concept mode {self.mode!r}")

    @property
    def n_concepts(self) -> int:
        return self.directions.shape[0]

    @property
    def emb_dim(self) -> int:
        return self.directions.shape[1]

    def predict(self, embeddings) -> np.ndarray:
        """Concept values for a batch of embeddings."""
        e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if e.shape[1] != self.emb_dim:
            raise ContractError(f"embedding dim {e.shape[1]} != bank dim {self.emb_dim}")
        if self.mode == "probe":
            return sigmoid(e @ self.directions.T + self.biases)
        return cav_score(e, self)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "names": list(self.names),
            "directions": self.directions.ravel().tolist(),
            "shape": list(self.directions.shape),
            "biases": self.biases.tolist(),
            "scores": self.scores.tolist(),
            "degenerate": [bool(x) for x in self.degenerate],
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptBank":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise InputError("unsupported concept bank schema_version")
        return cls(
            names=list(d["names"]),
            directions=np.asarray(d["directions"], dtype=np.float64).reshape(d["shape"]),
            biases=np.asarray(d["biases"]),
            scores=np.asarray(d["scores"]),
            mode=d["mode"],
            degenerate=np.asarray(d["degenerate"], dtype=bool),
        )


def auroc(y_true, score) -> float:
    y = np.asarray(y_true, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = rankdata(score)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _validation_score(y_true, score, threshold) -> float:
    y = np.asarray(y_true, dtype=bool)
    prevalence = y.mean() if y.size else 0.5
    if min(prevalence, 1 - prevalence) < 0.2:
        return auroc(y, score)
    return float(np.mean((score > threshold) == y))


def _fit_logistic(x, y, l2, lr, epochs, seed):
    """Independent logistic regressions, one per column of ``y``.

    Zero initialisation and full-batch Adam make every column's trajectory
    independent of the others, so results do not depend on column order.
    """
    m, l = x.shape
    k = y.shape[1]
    w = np.zeros((k, l))
    b = np.zeros(k)
    opt = Optimizer([w, b], lr=lr, kind="adam", seed=seed)
    for _ in range(epochs):
        p = sigmoid(x @ w.T + b)
        g = (p - y) / m
        opt.step([g.T @ x + l2 * w, g.sum(axis=0)])
    return w, b


def train_probes(train: Dataset, val: Dataset, l2: float = 1e-3, lr: float = 0.05,
                 epochs: int = 300, seed: int = 0) -> ConceptBank:
    """One linear probe per annotated concept, scored on ``val``."""
    if train.emb_dim != val.emb_dim or train.n_concepts != val.n_concepts:
        raise ContractError("train and val disagree on embedding or concept dimensions")
    y = (train.concepts > 0.5).astype(np.float64)
    w, b = _fit_logistic(train.embeddings, y, l2, lr, epochs, seed)
    degenerate = (y.min(axis=0) == y.max(axis=0))
    zero = np.linalg.norm(w, axis=1) == 0
    w[zero, 0] = 1e-12
    p_val = sigmoid(val.embeddings @ w.T + b)
    yv = val.concepts > 0.5
    scores = np.array([
        0.5 if degenerate[i] else _validation_score(yv[:, i], p_val[:, i], 0.5)
        for i in range(train.n_concepts)
    ])
    return ConceptBank(list(train.concept_names), w, b, scores, "probe", degenerate)


def cav_train(pos, neg, l2: float = 1e-3, lr: float = 0.05, epochs: int = 300, seed: int = 0):
    """Linear separator by hinge loss + L2 penalty; returns ``(direction, bias)``."""
    pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(neg, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise InputError("cav_train needs non-empty positive and negative sets")
    x = np.vstack([pos, neg])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    m = x.shape[0]
    w = np.zeros(x.shape[1])
    b = np.zeros(1)
    opt = Optimizer([w, b], lr=lr, kind="adam", seed=seed)
    for _ in range(epochs):
        margin = y * (x @ w + b[0])
        active = margin < 1.0
        gw = -(y[active, None] * x[active]).sum(axis=0) / m + l2 * w
        gb = np.array([-y[active].sum() / m])
        opt.step([gw, gb])
    return w, float(b[0])


def hinge_loss(w, b, pos, neg) -> float:
    x = np.vstack([pos, neg])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    return float(np.mean(np.maximum(0.0, 1.0 - y * (x @ w + b))))


def train_cavs(train: Dataset, val: Dataset, **kw) -> ConceptBank:
    """Concept-activation directions from annotated presence/absence sets."""
    n = train.n_concepts
    q = np.zeros((n, train.emb_dim))
    b = np.zeros(n)
    scores = np.zeros(n)
    degenerate = np.zeros(n, dtype=bool)
    on = train.concepts > 0.5
    von = val.concepts > 0.5
    for i in range(n):
        if on[:, i].all() or not on[:, i].any():
            degenerate[i] = True
            q[i, 0] = 1e-12
            scores[i] = 0.5
            continue
        q[i], b[i] = cav_train(train.embeddings[on[:, i]], train.embeddings[~on[:, i]], **kw)
        if np.linalg.norm(q[i]) == 0:
            q[i, 0] = 1e-12
        margin = val.embeddings @ q[i] + b[i]
        scores[i] = _validation_score(von[:, i], margin, 0.0)
    return ConceptBank(list(train.concept_names), q, b, scores, "cav", degenerate)


def cav_score(embedding, bank: ConceptBank) -> np.ndarray:
    """``<emb, q_i> / ||q_i||^2`` for every concept direction."""
    e = np.asarray(embedding, dtype=np.float64)
    if e.shape[-1] != bank.emb_dim:
        raise ContractError(f"embedding dim {e.shape[-1]} != bank dim {bank.emb_dim}")
    sq = np.einsum("ij,ij->i", bank.directions, bank.directions)
    if np.any(sq == 0):
        raise ContractError("concept direction with zero norm")
    return (e @ bank.directions.T) / sq


def filter_concepts(bank: ConceptBank, threshold: float = 0.7) -> np.ndarray:
    """Indices of concepts whose validation score exceeds ``threshold``."""
    keep = np.nonzero(bank.scores > threshold)[0]
    if keep.size == 0:
        raise PipelineError("no usable concepts")
    return keep


def learn_concepts(train: Dataset, val: Dataset, mode: str = "probe", seed: int = 0,
                   **kw) -> ConceptBank:
    if mode == "probe":
        return train_probes(train, val, seed=seed, **kw)
    if mode == "cav":
        return train_cavs(train, val, seed=seed, **kw)
    raise InputError(f"unknown concept mode {mode!r}")


def concept_view(ds: Dataset, bank: ConceptBank, keep) -> Dataset:
    """``ds`` with its concept columns replaced by the bank's predictions for
    the kept concepts (ground truth, when present, is restricted likewise)."""
    keep = np.asarray(keep, dtype=np.int64)
    gt = None if ds.gt_concepts is None else ds.gt_concepts[:, keep]
    return ds.replace(concepts=bank.predict(ds.embeddings)[:, keep], gt_concepts=gt,
                      concept_names=[bank.names[i] for i in keep])
