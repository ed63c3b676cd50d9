"""Synthetic concept datasets, CSV / JSON-lines persistence and splits.

The generator plants everything the experiments need to observe:

* ``n_subgroups`` interpretable subgroups, each labelled by its own DNF rule
  over a disjoint block of concepts (and, when the classes split evenly,
  over its own range of classes);
* a hard subgroup (fraction ``rho``) whose labels ignore the concepts.  The
  embedding carries a hidden label code for these samples; in the training
  split the label follows the code with probability ``hidden_reliability``,
  in val/test with ``hidden_reliability_eval``.  A blackbox fitted on train
  therefore leans on a signal that concepts cannot express and that does
  not transfer;
* one *context* concept per interpretable subgroup that is on exactly for
  that subgroup, so routing is possible from concepts alone (hard samples
  have every context concept off, unless an extra one is listed for them);
* optionally a spurious concept that agrees with the label at a chosen
  rate, separately for train and for val/test.

Embeddings are a fixed random linear map of ``[concepts, subgroup one-hot,
hidden label code]`` plus isotropic Gaussian noise.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import fol
from .errors import ContractError, InputError, ParseError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class Dataset:
    embeddings: np.ndarray  # [m, l]
    labels: np.ndarray  # [m] int
    concepts: np.ndarray  # [m, Nc] observed values in [0, 1]
    num_classes: int
    gt_concepts: np.ndarray | None = None  # [m, Nc] binary ground truth
    subgroups: np.ndarray | None = None
    metadata: np.ndarray | None = None  # [m, d]
    name: str = "dataset"
    seed: int | None = None
    concept_names: list[str] | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.concepts = np.asarray(self.concepts, dtype=np.float64)
        m = self.labels.shape[0]
        for fname in ("embeddings", "concepts", "gt_concepts", "subgroups", "metadata"):
            arr = getattr(self, fname)
            if arr is None:
                continue
            if fname == "subgroups":
                arr = np.asarray(arr, dtype=np.int64).reshape(-1)
            elif fname == "metadata":
                arr = np.asarray(arr, dtype=np.float64)
                if arr.ndim == 1:
                    arr = arr[:, None]
            else:
                arr = np.asarray(arr, dtype=np.float64)
            setattr(self, fname, arr)
            if arr.shape[0] != m:
                raise ContractError(f"{fname} has {arr.shape[0]} rows, labels have {m}")
            if np.isnan(arr).any():
                raise ContractError(f"{fname} contains NaN")
        if np.isnan(self.embeddings).any() or np.isnan(self.concepts).any():
            raise ContractError("NaN in dataset")
        if m and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError("label out of range")
        if self.concept_names is None:
            self.concept_names = [f"c{i}" for i in range(self.n_concepts)]

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_concepts(self) -> int:
        return self.concepts.shape[1]

    @property
    def emb_dim(self) -> int:
        return self.embeddings.shape[1]

    def subset(self, idx, name=None) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Dataset(
            self.embeddings[idx], self.labels[idx], self.concepts[idx], self.num_classes,
            pick(self.gt_concepts), pick(self.subgroups), pick(self.metadata),
            name or self.name, self.seed, list(self.concept_names),
        )

    def replace(self, **changes) -> "Dataset":
        fields = dict(
            embeddings=self.embeddings, labels=self.labels, concepts=self.concepts,
            num_classes=self.num_classes, gt_concepts=self.gt_concepts,
            subgroups=self.subgroups, metadata=self.metadata, name=self.name,
            seed=self.seed, concept_names=list(self.concept_names),
        )
        fields.update(changes)
        return Dataset(**fields)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

@dataclass
class SpuriousSpec:
    concept: int = 15
    train_corr: float = 0.95
    test_corr: float = 0.5
    val_corr: float | None = None  # defaults to test_corr (balanced validation)


@dataclass
class GenSpec:
    num_classes: int = 4
    n_concepts: int = 16
    n_subgroups: int = 2
    rule_blocks: list[list[int]] | None = None  # default: consecutive blocks of 5
    rho: float = 0.15
    concept_noise: float = 0.1
    jitter: float = 0.1
    emb_dim: int = 32
    emb_noise: float = 0.5
    hidden_reliability: float = 1.0
    hidden_reliability_eval: float = 0.0
    context_concepts: list[int] | None = None  # one per subgroup, optional extra for the hard group
    spurious: SpuriousSpec | None = None
    n_samples: int = 3000
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if isinstance(self.spurious, dict):
            self.spurious = SpuriousSpec(**self.spurious)
        self.split_ratios = tuple(self.split_ratios)
        if self.rule_blocks is None:
            self.rule_blocks = [list(range(5 * s, 5 * s + 5)) for s in range(self.n_subgroups)]
        if self.context_concepts is None:
            start = max((max(b) for b in self.rule_blocks), default=-1) + 1
            self.context_concepts = list(range(start, start + self.n_subgroups))
        self.validate()

    def validate(self):
        if not 0.0 <= self.rho < 1.0:
            raise InputError("rho must lie in [0, 1)")
        if len(self.rule_blocks) != self.n_subgroups:
            raise InputError("need one rule block per subgroup")
        used = [i for b in self.rule_blocks for i in b]
        if len(set(used)) != len(used):
            raise InputError("rule blocks must be disjoint")
        if len(self.context_concepts) not in (self.n_subgroups, self.n_subgroups + 1):
            raise InputError("need one context concept per subgroup (plus optionally one for the hard group)")
        reserved = set(used) | set(self.context_concepts)
        if len(reserved) != len(used) + len(self.context_concepts):
            raise InputError("context concepts overlap rule blocks")
        if max(reserved) >= self.n_concepts:
            raise InputError("concept index beyond n_concepts")
        if self.spurious is not None:
            sp = self.spurious
            if sp.concept in reserved or not 0 <= sp.concept < self.n_concepts:
                raise InputError("spurious concept must be a free concept index")
            for c in (sp.train_corr, sp.test_corr, sp.val_corr):
                if c is not None and not 0.0 <= c <= 1.0:
                    raise InputError(f"infeasible spurious correlation {c}")
        for r in (self.hidden_reliability, self.hidden_reliability_eval):
            if not 0.0 <= r <= 1.0:
                raise InputError("hidden reliabilities must lie in [0, 1]")
        if not 0.0 <= self.concept_noise < 0.5:
            raise InputError("concept_noise must lie in [0, 0.5)")
        if any(r <= 0 for r in self.split_ratios) or sum(self.split_ratios) > 1 + 1e-12:
            raise InputError("split ratios must be positive and sum to at most 1")

    def to_dict(self):
        return asdict(self)


def classes_per_subgroup(spec: "GenSpec") -> int:
    """Subgroups own disjoint class ranges when the classes split evenly into
    at least two per subgroup; otherwise every subgroup shares all classes."""
    C, S = spec.num_classes, spec.n_subgroups
    if S > 0 and C % S == 0 and C // S >= 2 and S > 1:
        return C // S
    return C


def class_offset(spec: "GenSpec", subgroup: int) -> int:
    cps = classes_per_subgroup(spec)
    return subgroup * cps if cps != spec.num_classes else 0


def block_rule(num_classes: int) -> Callable[[np.ndarray], int]:
    """Label function over one subgroup's concept block.

    Two classes: majority vote of the literals ``b_0 .. b_{n-h-1}`` and
    ``not b_{n-h} .. not b_{n-1}`` with ``h = n // 2``, so setting concepts
    to zero pushes toward both classes depending on which ones.  Four classes:
    ``2 * majority(b0, b1, b2) + xor(b3, b4)``.  Otherwise the block read as a
    binary number modulo the class count.
    """
    def rule(bits):
        bits = np.asarray(bits, dtype=np.int64)
        if num_classes == 2:
            lits = bits.copy()
            h = bits.size // 2
            if h:
                lits[-h:] = 1 - lits[-h:]
            return int(lits.sum() * 2 > bits.size)
        if num_classes == 4 and bits.size == 5:
            return int(2 * (bits[:3].sum() >= 2) + (bits[3] ^ bits[4]))
        return int(sum(int(b) << i for i, b in enumerate(bits)) % num_classes)

    return rule


def ground_truth_rules(spec: GenSpec) -> list[list[fol.DnfFormula]]:
    """Per subgroup, one minterm DNF per class (empty for classes the
    subgroup never produces)."""
    cps = classes_per_subgroup(spec)
    rule = block_rule(cps)
    out = []
    for s, block in enumerate(spec.rule_blocks):
        off = class_offset(spec, s)
        out.append([
            fol.minterm_dnf(c, block, lambda b, off=off: rule(b) + off)
            if off <= c < off + cps else fol.DnfFormula(c, None, [])
            for c in range(spec.num_classes)
        ])
    return out


def rule_concepts(spec: GenSpec) -> list[list[int]]:
    return [list(b) for b in spec.rule_blocks]


def _mixing_matrix(spec: GenSpec, rng) -> np.ndarray:
    d_in = spec.n_concepts + spec.n_subgroups + 1 + spec.num_classes
    return rng.standard_normal((spec.emb_dim, d_in))


def _generate_split(spec: GenSpec, W, rules, m, corr, rng, name, seed, reliability) -> Dataset:
    S, C, Nc = spec.n_subgroups, spec.num_classes, spec.n_concepts
    hard = rng.random(m) < spec.rho
    sub = np.where(hard, S, rng.integers(0, S, size=m))
    c = (rng.random((m, Nc)) < 0.5).astype(np.float64)
    ctx = np.asarray(spec.context_concepts)
    c[:, ctx] = 0.0
    has = sub < ctx.size
    c[np.nonzero(has)[0], ctx[sub[has]]] = 1.0

    rule = block_rule(classes_per_subgroup(spec))
    labels = np.empty(m, dtype=np.int64)
    for j in range(m):
        if hard[j]:
            labels[j] = rng.integers(0, C)
        else:
            labels[j] = class_offset(spec, sub[j]) + rule(c[j, spec.rule_blocks[sub[j]]])
    # self-check against the DNF form of the rules
    bools = c.astype(bool)
    for s in range(S):
        rows = np.nonzero(sub == s)[0]
        if rows.size == 0:
            continue
        for k, formula in enumerate(rules[s]):
            fires = formula.evaluate_batch(bools[rows])
            if not np.array_equal(fires, labels[rows] == k):
                raise AssertionError("generated labels disagree with ground-truth rules")

    metadata = None
    if spec.spurious is not None:
        sp = spec.spurious
        target = (labels >= C / 2).astype(np.float64) if C > 2 else labels.astype(np.float64)
        n_agree = int(round(corr * m))
        agree = np.zeros(m, dtype=bool)
        agree[rng.permutation(m)[:n_agree]] = True
        c[:, sp.concept] = np.where(agree, target, 1.0 - target)
        metadata = c[:, [sp.concept]].copy()

    # the code is uniform and concept-free, so labels stay uniform either way
    code = np.where(rng.random(m) < reliability, labels, rng.integers(0, C, size=m))
    hidden = np.zeros((m, C))
    hidden[np.arange(m), code] = 1.0
    hidden[~hard] = 0.0
    onehot = np.zeros((m, S + 1))
    onehot[np.arange(m), sub] = 1.0
    latent = np.concatenate([c, onehot, hidden], axis=1)
    emb = latent @ W.T + spec.emb_noise * rng.standard_normal((m, spec.emb_dim))

    flips = rng.random((m, Nc)) < spec.concept_noise
    observed = np.where(flips, 1.0 - c, c)
    u = rng.uniform(0.0, spec.jitter, size=(m, Nc))
    observed = observed * (1.0 - u) + (1.0 - observed) * u

    return Dataset(emb, labels, observed, C, gt_concepts=c, subgroups=sub,
                   metadata=metadata, name=name, seed=seed)


def generate(spec: GenSpec, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic (train, val, test) triple for ``(spec, seed)``."""
    spec.validate()
    ss = np.random.SeedSequence(seed)
    mix_seq, *split_seqs = ss.spawn(4)
    W = _mixing_matrix(spec, np.random.default_rng(mix_seq))
    rules = ground_truth_rules(spec)
    sizes = _split_sizes(spec.n_samples, spec.split_ratios)
    corrs = [None, None, None]
    if spec.spurious is not None:
        sp = spec.spurious
        corrs = [sp.train_corr, sp.test_corr if sp.val_corr is None else sp.val_corr, sp.test_corr]
    out = []
    rel = [spec.hidden_reliability, spec.hidden_reliability_eval, spec.hidden_reliability_eval]
    for name, m, corr, seq, r in zip(("train", "val", "test"), sizes, corrs, split_seqs, rel):
        out.append(_generate_split(spec, W, rules, m, corr, np.random.default_rng(seq), name, seed, r))
    return tuple(out)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def _split_sizes(m: int, ratios: Sequence[float]) -> list[int]:
    sizes = [int(np.floor(round(r * m, 9))) for r in ratios]
    if any(s == 0 for s in sizes):
        raise InputError(f"split ratios {tuple(ratios)} leave an empty split for {m} rows")
    return sizes


def split(dataset: Dataset, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> tuple[Dataset, ...]:
    """Stratified, deterministic partition into ``len(ratios)`` parts."""
    if any(r <= 0 for r in ratios) or sum(ratios) > 1 + 1e-12:
        raise InputError("split ratios must be positive and sum to at most 1")
    m = len(dataset)
    sizes = _split_sizes(m, ratios)
    rng = np.random.default_rng(seed)
    position = np.empty(m)
    tiebreak = np.empty(m)
    for c in np.unique(dataset.labels):
        idx = np.nonzero(dataset.labels == c)[0]
        idx = idx[rng.permutation(idx.size)]
        position[idx] = (np.arange(idx.size) + 0.5) / idx.size
        tiebreak[idx] = c
    order = np.lexsort((tiebreak, position))
    parts, start = [], 0
    names = ("train", "val", "test") if len(sizes) == 3 else tuple(f"part{i}" for i in range(len(sizes)))
    for size, name in zip(sizes, names):
        parts.append(dataset.subset(np.sort(order[start:start + size]), name=name))
        start += size
    return tuple(parts)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def save_csv(dataset: Dataset, path) -> None:
    path = Path(path)
    header = [f"emb_{i}" for i in range(dataset.emb_dim)]
    header += [f"concept_{n}" for n in dataset.concept_names]
    if dataset.gt_concepts is not None:
        header += [f"gt_{n}" for n in dataset.concept_names]
    header.append("label")
    if dataset.subgroups is not None:
        header.append("subgroup")
    if dataset.metadata is not None:
        header += [f"meta_{i}" for i in range(dataset.metadata.shape[1])]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for j in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.embeddings[j]]
            row += [repr(float(v)) for v in dataset.concepts[j]]
            if dataset.gt_concepts is not None:
                row += [repr(float(v)) for v in dataset.gt_concepts[j]]
            row.append(str(int(dataset.labels[j])))
            if dataset.subgroups is not None:
                row.append(str(int(dataset.subgroups[j])))
            if dataset.metadata is not None:
                row += [repr(float(v)) for v in dataset.metadata[j]]
            w.writerow(row)


def load_csv(path, num_classes: int | None = None, name: str | None = None) -> Dataset:
    """Read a dataset whose header uses the ``emb_``/``concept_``/``gt_``/``meta_``
    prefixes plus ``label`` and optional ``subgroup`` columns."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file (row 1)") from None
        header = [h.strip() for h in header]
        if "label" not in header:
            raise ParseError(f"{path}: missing required column 'label' (row 1)")
        cols = {
            "emb": [i for i, h in enumerate(header) if h.startswith("emb_")],
            "concept": [i for i, h in enumerate(header) if h.startswith("concept_")],
            "gt": [i for i, h in enumerate(header) if h.startswith("gt_")],
            "meta": [i for i, h in enumerate(header) if h.startswith("meta_")],
        }
        if not cols["emb"]:
            raise ParseError(f"{path}: no emb_ columns (row 1)")
        if not cols["concept"]:
            raise ParseError(f"{path}: no concept_ columns (row 1)")
        label_col = header.index("label")
        sub_col = header.index("subgroup") if "subgroup" in header else None
        rows = []
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: row {rownum} has {len(row)} fields, header has {len(header)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                bad = next(v for v in row if not _is_float(v))
                raise ParseError(f"{path}: row {rownum}: non-numeric cell {bad!r}") from None
    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))
    labels = data[:, label_col]
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise ParseError(f"{path}: labels must be non-negative integers")
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    names = [header[i][len("concept_"):] for i in cols["concept"]]
    ds = Dataset(
        embeddings=data[:, cols["emb"]],
        labels=labels,
        concepts=data[:, cols["concept"]],
        num_classes=num_classes,
        gt_concepts=data[:, cols["gt"]] if cols["gt"] else None,
        subgroups=data[:, sub_col].astype(np.int64) if sub_col is not None else None,
        metadata=data[:, cols["meta"]] if cols["meta"] else None,
        name=name or path.stem,
        concept_names=names,
    )
    log.info("loaded %s: m=%d emb=%d concepts=%d gt=%s subgroup=%s meta=%d", path, len(ds),
             ds.emb_dim, ds.n_concepts, bool(cols["gt"]), sub_col is not None, len(cols["meta"]))
    return ds


def _is_float(v: str) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# JSON lines
# ---------------------------------------------------------------------------

def save_jsonl(datasets: dict[str, Dataset], directory, spec: GenSpec | None = None,
               seed: int | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "spec": spec.to_dict() if spec is not None else None,
        "splits": {},
    }
    for split_name, ds in datasets.items():
        with (directory / f"{split_name}.jsonl").open("w") as fh:
            for j in range(len(ds)):
                rec = {"emb": ds.embeddings[j].tolist(), "concepts": ds.concepts[j].tolist(),
                       "label": int(ds.labels[j])}
                if ds.gt_concepts is not None:
                    rec["gt"] = ds.gt_concepts[j].tolist()
                if ds.subgroups is not None:
                    rec["subgroup"] = int(ds.subgroups[j])
                if ds.metadata is not None:
                    rec["meta"] = ds.metadata[j].tolist()
                fh.write(json.dumps(rec) + "\n")
        manifest["splits"][split_name] = {
            "rows": len(ds), "num_classes": ds.num_classes, "concept_names": ds.concept_names,
        }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_jsonl(directory) -> dict[str, Dataset]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise InputError(f"unsupported dataset schema_version {manifest.get('schema_version')!r}")
    out = {}
    for split_name, info in manifest["splits"].items():
        recs = [json.loads(line) for line in (directory / f"{split_name}.jsonl").open()]
        get = lambda key: np.asarray([r[key] for r in recs]) if recs and key in recs[0] else None  # noqa: E731
        out[split_name] = Dataset(
            embeddings=np.asarray([r["emb"] for r in recs], dtype=np.float64),
            labels=np.asarray([r["label"] for r in recs], dtype=np.int64),
            concepts=np.asarray([r["concepts"] for r in recs], dtype=np.float64),
            num_classes=info["num_classes"],
            gt_concepts=get("gt"), subgroups=get("subgroup"), metadata=get("meta"),
            name=split_name, seed=manifest.get("seed"), concept_names=info["concept_names"],
        )
    return out
