"""Concept-level logic explanations.

Literals, conjunctions and DNF formulas over concept indices; the
percentile-descent search that turns one routed sample into a local
conjunction; aggregation into per-class DNFs and a class-consistency
fidelity score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, InputError


@dataclass(frozen=True, order=True)
class Literal:
    index: int
    negated: bool = False

    def holds(self, bools) -> bool:
        return bool(bools[self.index]) != self.negated

    def to_dict(self):
        return {"idx": int(self.index), "neg": bool(self.negated)}


@dataclass(frozen=True)
class Conjunction:
    literals: tuple[Literal, ...]
    sample_id: int | None = None
    expert_id: int | None = None
    predicted_class: int | None = None
    compressed: bool = True

    def __post_init__(self):
        if not self.literals:
            raise ContractError("a conjunction needs at least one literal")
        idx = [l.index for l in self.literals]
        if len(set(idx)) != len(idx):
            raise ContractError(f"concept repeated in conjunction: {idx}")
        object.__setattr__(self, "literals", tuple(sorted(self.literals)))

    @property
    def key(self) -> tuple[tuple[int, bool], ...]:
        return tuple((l.index, l.negated) for l in self.literals)

    def holds(self, bools) -> bool:
        return all(l.holds(bools) for l in self.literals)

    def __len__(self):
        return len(self.literals)

    def text(self, names: Sequence[str] | None = None) -> str:
        parts = []
        for l in self.literals:
            name = names[l.index] if names is not None else f"c{l.index}"
            parts.append(("¬" if l.negated else "") + name)
        return "(" + " ∧ ".join(parts) + ")"


@dataclass
class DnfFormula:
    """OR of conjunctions for one (class, expert) pair."""

    class_id: int
    expert_id: int | None
    conjunctions: list[Conjunction] = field(default_factory=list)

    def evaluate(self, bools) -> bool:
        return any(c.holds(bools) for c in self.conjunctions)

    def evaluate_batch(self, bools) -> np.ndarray:
        bools = np.atleast_2d(np.asarray(bools, dtype=bool))
        if not self.conjunctions:
            return np.zeros(bools.shape[0], dtype=bool)
        lit_idx, lit_neg, ptr = self._flat()
        return kernels.dnf_eval(lit_idx, lit_neg, ptr, bools)

    def _flat(self):
        lit_idx, lit_neg, ptr = [], [], [0]
        for c in self.conjunctions:
            for l in c.literals:
                lit_idx.append(l.index)
                lit_neg.append(l.negated)
            ptr.append(len(lit_idx))
        return (np.asarray(lit_idx, dtype=np.int64), np.asarray(lit_neg, dtype=bool),
                np.asarray(ptr, dtype=np.int64))

    def concepts(self) -> set[int]:
        return {l.index for c in self.conjunctions for l in c.literals}

    def text(self, names: Sequence[str] | None = None, class_names: Sequence[str] | None = None) -> str:
        head = class_names[self.class_id] if class_names else f"class_{self.class_id}"
        if not self.conjunctions:
            return f"{head} ⇐ ⊥"
        body = " ∨ ".join(c.text(names) for c in self.conjunctions)
        return f"{head} ⇐ {body}"

    def to_dict(self) -> dict:
        return {
            "class": int(self.class_id),
            "expert": None if self.expert_id is None else int(self.expert_id),
            "conjunctions": [[l.to_dict() for l in c.literals] for c in self.conjunctions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DnfFormula":
        try:
            conj = [
                Conjunction(tuple(Literal(int(l["idx"]), bool(l["neg"])) for l in lits),
                            expert_id=d.get("expert"), predicted_class=d["class"])
                for lits in d["conjunctions"]
            ]
            return cls(int(d["class"]), d.get("expert"), conj)
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed formula JSON: {exc}") from exc


def binarize(values, threshold: float = 0.5) -> np.ndarray:
    """Concept presence: strictly above ``threshold``."""
    return np.asarray(values, dtype=np.float64) > threshold


def evaluate(formula: DnfFormula, bools) -> bool:
    return formula.evaluate(np.asarray(bools, dtype=bool))


def aggregate(conjunctions: Iterable[Conjunction], class_id=None, expert_id=None) -> DnfFormula:
    """Deduplicate, drop absorbed conjunctions, order by (length, literals)."""
    conjunctions = list(conjunctions)
    classes = {c.predicted_class for c in conjunctions}
    experts = {c.expert_id for c in conjunctions}
    if len(classes) > 1:
        raise ContractError(f"conjunctions mix classes {sorted(map(str, classes))}")
    if len(experts) > 1:
        raise ContractError(f"conjunctions mix experts {sorted(map(str, experts))}")
    if class_id is None:
        class_id = next(iter(classes)) if classes else None
    if expert_id is None and experts:
        expert_id = next(iter(experts))
    unique: dict[tuple, Conjunction] = {}
    for c in conjunctions:
        unique.setdefault(c.key, c)
    ordered = sorted(unique.values(), key=lambda c: (len(c), c.key))
    kept: list[Conjunction] = []
    kept_sets: list[frozenset] = []
    for c in ordered:
        s = frozenset(c.key)
        # shorter conjunctions come first, so only they can absorb c
        if any(k <= s for k in kept_sets):
            continue
        kept.append(c)
        kept_sets.append(s)
    return DnfFormula(class_id, expert_id, kept)


def minterm_dnf(class_id: int, concept_idx: Sequence[int], rule) -> DnfFormula:
    """DNF (one minterm per satisfying assignment) of ``rule(bits) == class_id``."""
    n = len(concept_idx)
    conj = []
    for code in range(2**n):
        bits = [(code >> i) & 1 for i in range(n)]
        if rule(np.asarray(bits)) == class_id:
            lits = tuple(Literal(int(ci), not b) for ci, b in zip(concept_idx, bits))
            conj.append(Conjunction(lits, predicted_class=class_id))
    return aggregate(conj, class_id=class_id)


# ---------------------------------------------------------------------------
# local explanation search
# ---------------------------------------------------------------------------

@dataclass
class LocalExplanation:
    conjunction: Conjunction
    percentile: int
    steps: int
    mask: np.ndarray


def extract_local_fol_batch(expert, concepts, sample_ids=None, expert_id=None,
                            threshold: float = 0.5) -> list[LocalExplanation]:
    """Percentile-descent explanations for a batch of routed samples.

    For each sample the predicted class's max-normalised attention row is
    thresholded at its 99th, 98th, ... nearest-rank percentile; concepts
    below the threshold are zeroed and the expert re-run.  The first mask
    that reproduces the original prediction wins.  Literal polarity comes
    from ``binarize(concepts, threshold)``.
    """
    x = np.atleast_2d(np.asarray(concepts, dtype=np.float64))
    if x.shape[1] != expert.n_concepts:
        raise ContractError(f"expected {expert.n_concepts} concepts, got {x.shape[1]}")
    if sample_ids is None:
        sample_ids = range(x.shape[0])
    sample_ids = list(sample_ids)
    pred = expert.predict(x)
    masks, pct, steps, exhausted = kernels.percentile_descent(
        x, pred, expert.attention_tilde(), expert.w1, expert.b1, expert.w2, expert.b2
    )
    bools = binarize(x, threshold)
    out = []
    for j in range(x.shape[0]):
        idx = np.nonzero(masks[j])[0]
        lits = tuple(Literal(int(i), not bools[j, i]) for i in idx)
        conj = Conjunction(lits, sample_id=sample_ids[j], expert_id=expert_id,
                           predicted_class=int(pred[j]), compressed=not bool(exhausted[j]))
        out.append(LocalExplanation(conj, int(pct[j]), int(steps[j]), masks[j].copy()))
    return out


def extract_local_fol(expert, concept_vector, sample_id=None, expert_id=None,
                      threshold: float = 0.5) -> Conjunction:
    ex = extract_local_fol_batch(expert, np.asarray(concept_vector)[None, :],
                                 [sample_id], expert_id, threshold)
    return ex[0].conjunction


def class_formulas(conjunctions: Iterable[Conjunction], num_classes: int,
                   expert_id=None) -> list[DnfFormula]:
    by_class: dict[int, list[Conjunction]] = {c: [] for c in range(num_classes)}
    for c in conjunctions:
        by_class[c.predicted_class].append(c)
    return [aggregate(by_class[c], class_id=c, expert_id=expert_id) for c in range(num_classes)]


def fidelity(formulas_by_expert: dict, routed: dict, threshold: float = 0.5) -> dict:
    """Class-consistency of aggregated explanations.

    ``formulas_by_expert`` maps expert id to a list of per-class
    :class:`DnfFormula`; ``routed`` maps expert id to ``(concepts,
    predicted_classes)`` for the samples that expert covers.  A sample counts
    when its predicted class's DNF fires and no other class's DNF of the same
    expert does.
    """
    per_expert = {}
    hits = total = 0
    for k, (concepts, pred) in routed.items():
        concepts = np.atleast_2d(concepts)
        n = concepts.shape[0]
        formulas = formulas_by_expert.get(k) or []
        if n == 0:
            continue
        if not formulas:
            per_expert[k] = 0.0
            total += n
            continue
        bools = binarize(concepts, threshold)
        fires = np.stack([f.evaluate_batch(bools) for f in formulas], axis=1)  # [n, C]
        pred = np.asarray(pred, dtype=np.int64)
        own = fires[np.arange(n), pred]
        others = fires.sum(axis=1) - own.astype(np.int64)
        ok = own & (others == 0)
        per_expert[k] = float(ok.mean())
        hits += int(ok.sum())
        total += n
    return {"per_expert": per_expert, "overall": hits / total if total else 0.0}


def formulas_to_json(formulas: Sequence[DnfFormula]) -> str:
    return json.dumps([f.to_dict() for f in formulas], sort_keys=True)


def formulas_from_json(text: str) -> list[DnfFormula]:
    return [DnfFormula.from_dict(d) for d in json.loads(text)]


def remap(formula: DnfFormula, index_map: Sequence[int]) -> DnfFormula:
    """Same formula with literal ``i`` renamed to ``index_map[i]`` (expert
    positions to concept-bank indices)."""
    conj = [
        Conjunction(tuple(Literal(int(index_map[l.index]), l.negated) for l in c.literals),
                    sample_id=c.sample_id, expert_id=c.expert_id,
                    predicted_class=c.predicted_class, compressed=c.compressed)
        for c in formula.conjunctions
    ]
    return DnfFormula(formula.class_id, formula.expert_id, conj)


@dataclass
class MixtureExplanation:
    formulas: dict  # expert id -> per-class DNFs over expert positions
    routed: dict  # expert id -> (concepts, predictions)
    local: dict  # expert id -> list[LocalExplanation]

    def preserved_fraction(self, experts) -> float:
        """Share of covered samples whose masked input keeps the prediction."""
        hits = total = 0
        for k, exps in self.local.items():
            x, pred = self.routed[k]
            for j, ex in enumerate(exps):
                total += 1
                hits += int(experts[k].predict((x[j] * ex.mask)[None, :])[0] == pred[j])
        return hits / total if total else 1.0

    def fidelity(self, threshold: float = 0.5) -> dict:
        return fidelity(self.formulas, self.routed, threshold)

    def bank_formulas(self, concept_idx) -> list[DnfFormula]:
        return [remap(f, concept_idx) for k in sorted(self.formulas) for f in self.formulas[k]]


def explain_mixture(moie, concepts, threshold: float = 0.5) -> MixtureExplanation:
    """Local explanations for every expert-routed sample and per-class DNFs
    per expert (residual samples are not explained)."""
    x = np.atleast_2d(np.asarray(concepts, dtype=np.float64))
    routes = moie.routes(x)
    formulas, routed, local = {}, {}, {}
    for k, e in enumerate(moie.experts):
        rows = np.nonzero(routes == k)[0]
        if rows.size == 0:
            continue
        ex = extract_local_fol_batch(e, x[rows], rows.tolist(), expert_id=k, threshold=threshold)
        local[k] = ex
        routed[k] = (x[rows], e.predict(x[rows]))
        formulas[k] = class_formulas([z.conjunction for z in ex], e.num_classes, expert_id=k)
    return MixtureExplanation(formulas, routed, local)
