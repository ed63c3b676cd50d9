"""Shortcut detection from explanations and removal by metadata residualization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import carver, concepts, fol
from .data import Dataset
from .errors import ContractError, InputError

log = logging.getLogger(__name__)

RIDGE = 1e-6


@dataclass
class MetadataSpec:
    concepts: list[int]  # bank indices of the metadata (spurious) concepts
    causal: list[int] = field(default_factory=list)

    def __post_init__(self):
        if set(self.concepts) & set(self.causal):
            raise InputError("metadata concepts overlap task-causal concepts")


@dataclass
class MdnFit:
    beta: np.ndarray  # [d, l] metadata coefficients
    meta_mean: np.ndarray  # [d]


def _design(metadata, protect):
    M = np.asarray(metadata, dtype=np.float64)
    if M.ndim == 1:
        M = M[:, None]
    cols = [np.ones((M.shape[0], 1)), M]
    if protect is not None:
        P = np.asarray(protect, dtype=np.float64)
        cols.append(P[:, None] if P.ndim == 1 else P)
    return M, np.hstack(cols)


def mdn_fit(features, metadata, protect=None) -> MdnFit:
    """Least-squares fit ``f ~ b0 + M beta (+ P gamma)`` for every column.

    ``protect`` holds covariates that enter the fit but are not removed (for
    example the label), so the metadata coefficient is estimated with the
    protected signal held fixed.
    """
    F = np.asarray(features, dtype=np.float64)
    M, X = _design(metadata, protect)
    m = F.shape[0]
    if m <= X.shape[1]:
        raise InputError(f"need more rows ({m}) than regressors ({X.shape[1]})")
    if F.shape[0] != M.shape[0]:
        raise ContractError("features and metadata disagree on the row count")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        log.warning("rank-deficient metadata design; using ridge %.0e", RIDGE)
        coef = np.linalg.solve(X.T @ X + RIDGE * np.eye(X.shape[1]), X.T @ F)
    else:
        coef, *_ = np.linalg.lstsq(X, F, rcond=None)
    d = M.shape[1]
    return MdnFit(beta=coef[1:1 + d], meta_mean=M.mean(axis=0))


def mdn_apply(fit: MdnFit, features, metadata) -> np.ndarray:
    F = np.asarray(features, dtype=np.float64)
    M = np.asarray(metadata, dtype=np.float64)
    if M.ndim == 1:
        M = M[:, None]
    return F - (M - fit.meta_mean) @ fit.beta


def mdn_residualize(features, metadata, protect=None) -> np.ndarray:
    """Remove the metadata's linear effect from every feature column, keeping
    the column mean."""
    return mdn_apply(mdn_fit(features, metadata, protect), features, metadata)


@dataclass
class SpuriousReport:
    fractions: dict  # (expert, class) -> fraction of conjunctions with a metadata literal
    counts: dict  # (expert, class) -> (hits, total)
    flagged: list  # (expert, class) pairs at or above the threshold
    threshold: float

    def to_dict(self) -> dict:
        key = lambda k: f"expert_{k[0]}/class_{k[1]}"  # noqa: E731
        return {
            "threshold": self.threshold,
            "fractions": {key(k): v for k, v in sorted(self.fractions.items(), key=_sort_key)},
            "counts": {key(k): list(v) for k, v in sorted(self.counts.items(), key=_sort_key)},
            "flagged": [key(k) for k in self.flagged],
        }


def _sort_key(item):
    (e, c), _ = item
    return (-1 if e is None else e, c)


def detect_spurious(formulas, spec: MetadataSpec, threshold: float = 0.3) -> SpuriousReport:
    """Fraction of each (expert, class) DNF's conjunctions that mention a
    metadata concept.  ``formulas`` is a list of DNFs (or a dict of lists
    keyed by expert) whose literal indices are bank indices."""
    if isinstance(formulas, dict):
        formulas = [f for fs in formulas.values() for f in fs]
    meta = set(spec.concepts)
    fractions, counts, flagged = {}, {}, []
    for f in formulas:
        if not f.conjunctions:
            continue
        hits = sum(1 for c in f.conjunctions if meta & {l.index for l in c.literals})
        total = len(f.conjunctions)
        key = (f.expert_id, f.class_id)
        counts[key] = (hits, total)
        fractions[key] = hits / total
        if hits / total >= threshold:
            flagged.append(key)
    flagged.sort(key=lambda k: (-1 if k[0] is None else k[0], k[1]))
    return SpuriousReport(fractions, counts, flagged, threshold)


def subgroup_gap(pred, labels, spurious_values) -> dict:
    """Accuracy where the spurious concept agrees with the (binary) label vs
    where it disagrees; the gap is in points."""
    pred = np.asarray(pred)
    y = np.asarray(labels)
    s = np.asarray(spurious_values) > 0.5
    agree = s == (y > 0)
    acc_a = float(np.mean(pred[agree] == y[agree])) if agree.any() else None
    acc_d = float(np.mean(pred[~agree] == y[~agree])) if (~agree).any() else None
    gap = None if acc_a is None or acc_d is None else 100.0 * (acc_a - acc_d)
    return {"agree_accuracy": acc_a, "disagree_accuracy": acc_d, "gap_points": gap,
            "n_agree": int(agree.sum()), "n_disagree": int((~agree).sum())}


# ---------------------------------------------------------------------------
# the full removal experiment
# ---------------------------------------------------------------------------

def metadata_of(ds: Dataset, spec: MetadataSpec) -> np.ndarray:
    """Metadata columns of ``ds``; falls back to the ground-truth values of
    the metadata concepts when the dataset carries no metadata tags."""
    if ds.metadata is not None:
        return ds.metadata
    if ds.gt_concepts is None:
        raise InputError(f"dataset {ds.name!r} has neither metadata nor ground-truth concepts")
    return ds.gt_concepts[:, spec.concepts]


@dataclass
class StageReport:
    moie: carver.MoIE
    f0: carver.Blackbox
    bank: concepts.ConceptBank
    keep: np.ndarray
    gap: dict  # cascade subgroup gap on test
    f0_gap: dict
    accuracy: float
    spurious: SpuriousReport
    probe_scores: dict  # metadata concept -> validation score

    def summary(self) -> dict:
        return {
            "K": self.moie.K,
            "cascade_accuracy": self.accuracy,
            "gap": self.gap,
            "f0_gap": self.f0_gap,
            "kept_concepts": [int(i) for i in self.keep],
            "probe_scores": {str(k): v for k, v in self.probe_scores.items()},
            "spurious": self.spurious.to_dict(),
        }


def _stage(f0, train, val, test, spec, schedule, hyper, concept_mode, concept_threshold,
           flag_threshold, seed) -> StageReport:
    bank = concepts.learn_concepts(train, val, concept_mode, seed=seed)
    keep = concepts.filter_concepts(bank, concept_threshold)
    tr, va, te = (concepts.concept_view(d, bank, keep) for d in (train, val, test))
    moie = carver.carve(f0, tr, va, schedule, hyper, concept_idx=keep)
    pred, _ = carver.moie_predict(moie, te.concepts, te.embeddings)
    meta = metadata_of(test, spec)[:, 0]
    expl = fol.explain_mixture(moie, te.concepts)
    return StageReport(
        moie=moie, f0=f0, bank=bank, keep=keep,
        gap=subgroup_gap(pred, test.labels, meta),
        f0_gap=subgroup_gap(f0.predict(test.embeddings), test.labels, meta),
        accuracy=float(np.mean(pred == test.labels)),
        spurious=detect_spurious(expl.bank_formulas(keep), spec, flag_threshold),
        probe_scores={int(i): float(bank.scores[i]) for i in spec.concepts},
    )


def fix_shortcut(f0_biased: carver.Blackbox, data, spec: MetadataSpec,
                 schedule: carver.CarveSchedule | None = None,
                 hyper: carver.CarveHyper | None = None, blackbox_kw: dict | None = None,
                 concept_mode: str = "probe", concept_threshold: float = 0.7,
                 flag_threshold: float = 0.3, protect_label: bool = True, seed: int = 0) -> dict:
    """Carve the biased blackbox, look for metadata concepts in the
    explanations, residualize the embeddings on the metadata, retrain the
    head and the concepts, and carve again.

    ``protect_label`` keeps the label as a covariate in the residualization
    fit so the removed direction is the metadata's effect beyond the label.
    """
    train, val, test = data
    hyper = hyper or carver.CarveHyper(seed=seed)
    before = _stage(f0_biased, train, val, test, spec, schedule, hyper, concept_mode,
                    concept_threshold, flag_threshold, seed)
    protect = np.eye(train.num_classes)[train.labels][:, 1:] if protect_label else None
    fit = mdn_fit(train.embeddings, metadata_of(train, spec), protect)
    clean = [d.replace(embeddings=mdn_apply(fit, d.embeddings, metadata_of(d, spec)))
             for d in (train, val, test)]
    f0_clean = carver.train_blackbox(clean[0], seed=seed, **(blackbox_kw or {}))
    after = _stage(f0_clean, *clean, spec, schedule, hyper, concept_mode,
                   concept_threshold, flag_threshold, seed)
    return {
        "before": before,
        "after": after,
        "excluded": [int(i) for i in spec.concepts if i not in set(after.keep.tolist())],
        "flagged_before": bool(before.spurious.flagged),
    }


def fix_report(result: dict) -> dict:
    """JSON-ready before/after summary of :func:`fix_shortcut`."""
    return {
        "before": result["before"].summary(),
        "after": result["after"].summary(),
        "excluded": result["excluded"],
        "flagged_before": result["flagged_before"],
    }
