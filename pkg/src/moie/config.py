"""Run configuration: JSON with a ``schema_version``, validated field by field.

Unknown keys and out-of-range values raise :class:`InputError` naming the
offending field (``section.field``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .carver import CarveHyper, CarveSchedule
from .data import GenSpec
from .errors import InputError, MoieError

SCHEMA_VERSION = 1


@dataclass
class DataCfg:
    source: str = "generate"  # generate | csv
    gen: dict = field(default_factory=dict)  # GenSpec overrides
    csv: str | None = None  # single file, split by ``split``
    csv_splits: dict | None = None  # {"train": path, "val": path, "test": path}
    split: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    num_classes: int | None = None


@dataclass
class BlackboxCfg:
    hidden: int = 64
    epochs: int = 60
    lr: float = 0.01
    batch_size: int = 128
    weight_decay: float = 1e-4


@dataclass
class ConceptCfg:
    mode: str = "probe"
    threshold: float = 0.7


@dataclass
class AnalysisCfg:
    completeness_hidden: int = 128
    completeness_restarts: int = 3
    completeness_epochs: int = 60
    completeness_fractions: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0])
    a_r: float | None = None  # default 1 / num_classes
    ablate_n: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 5, 8, 10])
    random_repeats: int = 5
    intervene_n: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 5, 8, 10, 16])
    intervene_noise: float = 0.2
    fol_threshold: float = 0.5


@dataclass
class ShortcutCfg:
    gen: dict = field(default_factory=lambda: {
        "num_classes": 2, "spurious": {"concept": 15, "train_corr": 0.95, "test_corr": 0.5}})
    metadata_concepts: list[int] = field(default_factory=lambda: [15])
    flag_threshold: float = 0.3
    protect_label: bool = True


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    data: DataCfg = field(default_factory=DataCfg)
    blackbox: BlackboxCfg = field(default_factory=BlackboxCfg)
    concepts: ConceptCfg = field(default_factory=ConceptCfg)
    schedule: dict = field(default_factory=dict)  # CarveSchedule overrides
    hyper: dict = field(default_factory=dict)  # CarveHyper overrides (seed comes from ``seed``)
    analysis: AnalysisCfg = field(default_factory=AnalysisCfg)
    shortcut: ShortcutCfg = field(default_factory=ShortcutCfg)

    # -- derived objects ---------------------------------------------------
    def gen_spec(self) -> GenSpec:
        return GenSpec(**self.data.gen)

    def shortcut_spec(self) -> GenSpec:
        return GenSpec(**self.shortcut.gen)

    def carve_schedule(self) -> CarveSchedule:
        return CarveSchedule(**self.schedule)

    def carve_hyper(self) -> CarveHyper:
        return CarveHyper(**{**self.hyper, "seed": self.seed})

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self, *sections: str) -> str:
        """Digest of the seed plus the named sections (all when none given)."""
        d = self.to_dict()
        keys = sections or tuple(sorted(d))
        blob = json.dumps({"seed": self.seed, **{k: d[k] for k in keys}}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {"data": DataCfg, "blackbox": BlackboxCfg, "concepts": ConceptCfg,
             "analysis": AnalysisCfg, "shortcut": ShortcutCfg}


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise InputError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for k in d:
        if k not in names:
            raise InputError(f"{where}.{k}: unknown field")
    return cls(**d)


def _check(cond, name, msg):
    if not cond:
        raise InputError(f"{name}: {msg}")


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise InputError("config: expected a JSON object")
    version = d.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise InputError(f"schema_version: unsupported value {version!r}")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    for k in d:
        if k not in top:
            raise InputError(f"{k}: unknown field")
    kw = {k: v for k, v in d.items() if k not in _SECTIONS}
    for name, cls in _SECTIONS.items():
        if name in d:
            kw[name] = _build(cls, d[name], name)
    cfg = RunConfig(**kw)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    _check(isinstance(cfg.seed, int) and cfg.seed >= 0, "seed", "must be a non-negative integer")
    dc = cfg.data
    _check(dc.source in ("generate", "csv"), "data.source", "must be 'generate' or 'csv'")
    if dc.source == "csv":
        _check(dc.csv or dc.csv_splits, "data.csv", "csv source needs 'csv' or 'csv_splits'")
        paths = [dc.csv] if dc.csv else []
        if dc.csv_splits:
            _check(set(dc.csv_splits) == {"train", "val", "test"}, "data.csv_splits",
                   "needs exactly train, val and test")
            paths += list(dc.csv_splits.values())
        for p in paths:
            _check(Path(p).is_file(), "data.csv", f"file not found: {p}")
    _check(len(dc.split) == 3 and all(r > 0 for r in dc.split) and sum(dc.split) <= 1 + 1e-9,
           "data.split", "three positive ratios summing to at most 1")
    bb = cfg.blackbox
    _check(bb.hidden >= 1, "blackbox.hidden", "must be >= 1")
    _check(bb.epochs >= 1, "blackbox.epochs", "must be >= 1")
    _check(bb.lr > 0, "blackbox.lr", "must be positive")
    _check(bb.batch_size >= 1, "blackbox.batch_size", "must be >= 1")
    _check(bb.weight_decay >= 0, "blackbox.weight_decay", "must be >= 0")
    _check(cfg.concepts.mode in ("probe", "cav"), "concepts.mode", "must be 'probe' or 'cav'")
    _check(0 <= cfg.concepts.threshold < 1, "concepts.threshold", "must lie in [0, 1)")
    an = cfg.analysis
    _check(an.completeness_hidden >= 1, "analysis.completeness_hidden", "must be >= 1")
    _check(an.completeness_restarts >= 1, "analysis.completeness_restarts", "must be >= 1")
    _check(all(0 < f <= 1 for f in an.completeness_fractions), "analysis.completeness_fractions",
           "fractions must lie in (0, 1]")
    _check(an.a_r is None or 0 < an.a_r < 1, "analysis.a_r", "must lie in (0, 1)")
    _check(all(n >= 0 for n in an.ablate_n), "analysis.ablate_n", "N must be >= 0")
    _check(all(n >= 0 for n in an.intervene_n), "analysis.intervene_n", "N must be >= 0")
    _check(0 <= an.intervene_noise < 1, "analysis.intervene_noise", "must lie in [0, 1)")
    _check(an.random_repeats >= 1, "analysis.random_repeats", "must be >= 1")
    _check(0 < cfg.shortcut.flag_threshold <= 1, "shortcut.flag_threshold", "must lie in (0, 1]")
    # sub-objects validate their own ranges
    for name, build in (("data.gen", cfg.gen_spec), ("schedule", cfg.carve_schedule),
                        ("hyper", cfg.carve_hyper), ("shortcut.gen", cfg.shortcut_spec)):
        try:
            build()
        except TypeError as exc:
            raise InputError(f"{name}: {exc}") from exc
        except MoieError as exc:
            raise InputError(f"{name}: {exc}") from exc
    hp = cfg.carve_hyper()
    for f in ("hidden", "selector_hidden", "batch_size", "expert_epochs", "residual_epochs", "retries"):
        _check(getattr(hp, f) >= 1, f"hyper.{f}", "must be >= 1")
    for f in ("t_lens", "t_kd", "lr"):
        _check(getattr(hp, f) > 0, f"hyper.{f}", "must be positive")
    for f in ("lambda_lens", "lambda_s", "expert_weight_decay", "expert_l1"):
        _check(getattr(hp, f) >= 0, f"hyper.{f}", "must be >= 0")
    for f in ("alpha_kd", "alpha_mix"):
        _check(0 <= getattr(hp, f) <= 1, f"hyper.{f}", "must lie in [0, 1]")
    _check(0 <= hp.warmup_epochs <= hp.expert_epochs, "hyper.warmup_epochs",
           "must lie in [0, expert_epochs]")


def load(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return from_dict(d)


def default() -> RunConfig:
    cfg = RunConfig()
    validate(cfg)
    return cfg
