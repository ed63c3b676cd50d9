"""Stage orchestration behind the command line.

A :class:`Run` owns one output directory.  Each stage (data, blackbox,
concept bank, carved mixture) is loaded from disk when its artifact exists
and was produced by the same configuration, and recomputed otherwise.
Command functions return a JSON-ready ``results`` dict; :meth:`Run.summarize`
wraps it with the command name, seed and configuration fingerprint and writes
``summary_<command>.json`` with sorted keys, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import analysis, carver, concepts, data, fol, shortcut
from .config import SCHEMA_VERSION, RunConfig
from .errors import InputError
from .numcore import load_json, save_json

log = logging.getLogger(__name__)

COMMANDS = ("gen-data", "train-blackbox", "learn-concepts", "carve", "explain",
            "completeness", "ablate", "intervene", "shortcut", "report")

_STAGE_SECTIONS = {
    "data": ("data",),
    "blackbox": ("data", "blackbox"),
    "concepts": ("data", "concepts"),
    "moie": ("data", "blackbox", "concepts", "schedule", "hyper"),
    "moie_noiseless": ("data", "blackbox", "concepts", "schedule", "hyper"),
}


def jsonable(obj):
    """Plain-Python copy of ``obj`` (numpy scalars and arrays, tuples, dict keys)."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n"


def _write_rows(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in r])


class Run:
    def __init__(self, cfg: RunConfig, out, quiet: bool = False):
        self.cfg = cfg
        self.out = Path(out)
        self.quiet = quiet
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "reports").mkdir(exist_ok=True)
        self._cache: dict = {}
        save_json(cfg.to_dict(), self.out / "config.json")

    # -- bookkeeping -------------------------------------------------------
    @property
    def seed(self) -> int:
        return self.cfg.seed

    def _stages_path(self) -> Path:
        return self.out / "stages.json"

    def _stage_fresh(self, stage: str, *paths: Path) -> bool:
        p = self._stages_path()
        if not p.is_file() or not all(q.exists() for q in paths):
            return False
        return load_json(p).get(stage) == self.cfg.fingerprint(*_STAGE_SECTIONS[stage])

    def _mark(self, stage: str) -> None:
        p = self._stages_path()
        d = load_json(p) if p.is_file() else {}
        d[stage] = self.cfg.fingerprint(*_STAGE_SECTIONS[stage])
        save_json(d, p)

    def summary_path(self, command: str) -> Path:
        return self.out / f"summary_{command}.json"

    def summarize(self, command: str, results: dict) -> Path:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "seed": self.seed,
            "fingerprint": self.cfg.fingerprint(),
            "results": results,
        }
        path = self.summary_path(command)
        path.write_text(dumps(doc))
        return path

    def cached_results(self, command: str) -> dict | None:
        p = self.summary_path(command)
        if not p.is_file():
            return None
        doc = json.loads(p.read_text())
        if doc.get("fingerprint") != self.cfg.fingerprint():
            return None
        return doc["results"]

    # -- stages ------------------------------------------------------------
    def datasets(self):
        if "data" in self._cache:
            return self._cache["data"]
        d = self.out / "data"
        if self._stage_fresh("data", d / "manifest.json"):
            sets = data.load_jsonl(d)
            out = (sets["train"], sets["val"], sets["test"])
        else:
            out = self._make_data()
            data.save_jsonl(dict(zip(("train", "val", "test"), out)), d,
                            self.cfg.gen_spec() if self.cfg.data.source == "generate" else None,
                            self.seed)
            self._mark("data")
        self._cache["data"] = out
        return out

    def _make_data(self):
        dc = self.cfg.data
        if dc.source == "generate":
            return data.generate(self.cfg.gen_spec(), self.seed)
        if dc.csv_splits:
            return tuple(data.load_csv(dc.csv_splits[s], dc.num_classes, s)
                         for s in ("train", "val", "test"))
        full = data.load_csv(dc.csv, dc.num_classes)
        return data.split(full, dc.split, self.seed)

    def blackbox(self) -> carver.Blackbox:
        if "blackbox" in self._cache:
            return self._cache["blackbox"]
        p = self.out / "blackbox.json"
        if self._stage_fresh("blackbox", p):
            f0 = carver.Blackbox.from_dict(load_json(p))
        else:
            train, _, _ = self.datasets()
            bb = self.cfg.blackbox
            f0 = carver.train_blackbox(train, bb.hidden, bb.epochs, bb.lr, bb.batch_size,
                                       bb.weight_decay, seed=self.seed)
            save_json(f0.to_dict(), p)
            self._mark("blackbox")
        self._cache["blackbox"] = f0
        return f0

    def concept_bank(self):
        """``(bank, keep)``: the learned bank and the indices passing the filter."""
        if "concepts" in self._cache:
            return self._cache["concepts"]
        p = self.out / "concepts.json"
        if self._stage_fresh("concepts", p):
            bank = concepts.ConceptBank.from_dict(load_json(p))
        else:
            train, val, _ = self.datasets()
            bank = concepts.learn_concepts(train, val, self.cfg.concepts.mode, seed=self.seed)
            save_json(bank.to_dict(), p)
            self._mark("concepts")
        keep = concepts.filter_concepts(bank, self.cfg.concepts.threshold)
        self._cache["concepts"] = (bank, keep)
        return bank, keep

    def views(self):
        """Splits with their concept columns replaced by the kept bank predictions."""
        if "views" not in self._cache:
            bank, keep = self.concept_bank()
            self._cache["views"] = tuple(concepts.concept_view(d, bank, keep)
                                         for d in self.datasets())
        return self._cache["views"]

    def noiseless_views(self):
        """Splits whose concept columns are the kept ground-truth concepts."""
        views = self.views()
        if any(v.gt_concepts is None for v in views):
            raise InputError("dataset has no ground-truth concepts")
        return tuple(v.replace(concepts=v.gt_concepts) for v in views)

    def moie(self, noiseless: bool = False) -> carver.MoIE:
        stage = "moie_noiseless" if noiseless else "moie"
        if stage in self._cache:
            return self._cache[stage]
        d = self.out / stage
        if self._stage_fresh(stage, d / "manifest.json"):
            m = carver.MoIE.load(d)
        else:
            train, val, _ = self.noiseless_views() if noiseless else self.views()
            _, keep = self.concept_bank()
            m = carver.carve(self.blackbox(), train, val, self.cfg.carve_schedule(),
                             self.cfg.carve_hyper(), concept_idx=keep)
            m.save(d)
            self._mark(stage)
        self._cache[stage] = m
        return m

    def _check_n(self, ns, field: str, nc: int):
        bad = [n for n in ns if n > nc]
        if bad:
            raise InputError(f"{field}: N={bad[0]} exceeds the {nc} usable concepts")

    # -- commands ----------------------------------------------------------
    def gen_data(self) -> dict:
        splits = self.datasets()
        return {
            "source": self.cfg.data.source,
            "num_classes": splits[0].num_classes,
            "n_concepts": splits[0].n_concepts,
            "emb_dim": splits[0].emb_dim,
            "splits": {d.name: {"rows": len(d),
                                "class_counts": np.bincount(d.labels, minlength=d.num_classes)}
                       for d in splits},
        }

    def train_blackbox(self) -> dict:
        f0 = self.blackbox()
        return {"accuracy": {d.name: float(np.mean(f0.predict(d.embeddings) == d.labels))
                             for d in self.datasets()}}

    def learn_concepts(self) -> dict:
        bank, keep = self.concept_bank()
        return {"mode": bank.mode, "threshold": self.cfg.concepts.threshold,
                "scores": {n: float(s) for n, s in zip(bank.names, bank.scores)},
                "kept": keep, "kept_names": [bank.names[i] for i in keep]}

    def carve(self) -> dict:
        m = self.moie()
        _, _, test = self.views()
        rep = carver.coverage_report(m, test, self.blackbox())
        carver.report_csv(rep, self.out / "reports" / "coverage.csv")
        self._iterations_csv(m)
        return {
            "K": m.K,
            "concept_idx": m.concept_idx,
            "records": [r.__dict__ for r in m.records],
            "coverage_report": rep,
            "checksums": {f"{kind}_{k + 1}": carver.checksum(obj)
                          for k in range(m.K)
                          for kind, obj in (("selector", m.selectors[k]), ("expert", m.experts[k]))},
        }

    def _iterations_csv(self, m):
        cols = ["k", "tau", "coverage", "coverage_full", "covered", "cum_coverage",
                "residual_accuracy"]
        _write_rows(self.out / "reports" / "iterations.csv", cols,
                    [[getattr(r, c) for c in cols] for r in m.records])

    def explain(self) -> dict:
        m = self.moie()
        _, _, test = self.views()
        bank, keep = self.concept_bank()
        thr = self.cfg.analysis.fol_threshold
        expl = fol.explain_mixture(m, test.concepts, thr)
        forms = expl.bank_formulas(keep)
        (self.out / "explanations.json").write_text(fol.formulas_to_json(forms))
        (self.out / "explanations.txt").write_text(
            "".join(f"expert {f.expert_id + 1}: {f.text(bank.names)}\n" for f in forms), encoding="utf-8")
        out = {
            "n_formulas": len(forms),
            "n_conjunctions": sum(len(f.conjunctions) for f in forms),
            "preserved_fraction": expl.preserved_fraction(m.experts),
            "fidelity": expl.fidelity(thr),
        }
        if all(v.gt_concepts is not None for v in self.views()):
            m2 = self.moie(noiseless=True)
            _, _, test2 = self.noiseless_views()
            e2 = fol.explain_mixture(m2, test2.concepts, thr)
            out["noiseless"] = {"K": m2.K, "preserved_fraction": e2.preserved_fraction(m2.experts),
                                "fidelity": e2.fidelity(thr)}
        return out

    def completeness(self) -> dict:
        an = self.cfg.analysis
        m = self.moie()
        f0 = self.blackbox()
        train, val, _ = self.datasets()
        bank, keep = self.concept_bank()
        ranking = analysis.global_concept_ranking(m)
        kw = dict(a_r=an.a_r, hidden=an.completeness_hidden, restarts=an.completeness_restarts,
                  epochs=an.completeness_epochs, seed=self.seed)
        curve = []
        for frac in an.completeness_fractions:
            n = max(1, math.ceil(frac * keep.size))
            top = ranking[:n]
            r = analysis.completeness(f0, bank, top, train, val, **kw)
            curve.append({"fraction": frac, "N": n, "concepts": top, "eta": r.eta,
                          "accuracy": r.accuracy, "restarts": r.restarts})
        every = analysis.completeness(f0, bank, keep, train, val, **kw)
        chance = analysis.chance_completeness(f0, keep.size, train, val, **kw)
        rows = [{"N": c["N"], "value": c["eta"]} for c in curve]
        analysis.write_curve(rows, self.out / "reports" / "completeness.csv", "eta", self.seed)
        return {"f0_val_accuracy": every.f0_accuracy, "a_r": every.a_r, "curve": curve,
                "eta_all": every.eta, "eta_chance": chance.eta}

    def ablate(self) -> dict:
        an = self.cfg.analysis
        m = self.moie()
        _, _, test = self.views()
        nc = test.n_concepts
        self._check_n(an.ablate_n, "analysis.ablate_n", nc)
        att = analysis.zero_out_ablation(m, test.concepts, test.labels, an.ablate_n, "attention")
        reps = [analysis.zero_out_ablation(m, test.concepts, test.labels, an.ablate_n, "random",
                                           seed=self.seed * 1000 + r)
                for r in range(an.random_repeats)]
        rnd = [{"N": a["N"], "drop": float(np.mean([rep[i]["drop"] for rep in reps]))}
               for i, a in enumerate(att)]
        with (self.out / "reports" / "ablation.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "metric", "value", "seed"])
            for a, r in zip(att, rnd):
                w.writerow([a["N"], "drop_attention", repr(float(a["drop"])), self.seed])
                w.writerow([r["N"], "drop_random", repr(r["drop"]), self.seed])
        return {"attention": att, "random": rnd, "n_concepts": nc}

    def intervene(self) -> dict:
        an = self.cfg.analysis
        m = self.moie()
        _, _, test = self.views()
        if test.gt_concepts is None:
            raise InputError("intervention needs ground-truth concepts (gt_ columns)")
        nc = test.n_concepts
        self._check_n(an.intervene_n, "analysis.intervene_n", nc)
        if an.intervene_noise > 0:
            observed = analysis.flip_concepts(test.gt_concepts, an.intervene_noise, self.seed)
        else:
            observed = test.concepts
        ns = sorted(set(an.intervene_n) | {nc})
        out = {"noise": an.intervene_noise, "n_concepts": nc}
        rows = []
        for scope in ("all", "hard"):
            res = []
            for n in ns:
                r = analysis.intervene(m, observed, test.embeddings, test.labels,
                                       test.gt_concepts, n, scope)
                r.pop("predictions", None)
                res.append(r)
                if r["after"] is not None:
                    rows.append((n, f"accuracy_{scope}", r["after"]))
            out[scope] = res
        with (self.out / "reports" / "intervention.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "metric", "value", "seed"])
            for n, metric, v in rows:
                w.writerow([n, metric, repr(float(v)), self.seed])
        return out

    def shortcut(self) -> dict:
        sc = self.cfg.shortcut
        spec = self.cfg.shortcut_spec()
        if spec.spurious is None:
            raise InputError("shortcut.gen: needs a 'spurious' section")
        splits = data.generate(spec, self.seed)
        bb = self.cfg.blackbox
        bkw = dict(hidden=bb.hidden, epochs=bb.epochs, lr=bb.lr, batch_size=bb.batch_size,
                   weight_decay=bb.weight_decay)
        f0 = carver.train_blackbox(splits[0], seed=self.seed, **bkw)
        meta = shortcut.MetadataSpec(list(sc.metadata_concepts))
        res = shortcut.fix_shortcut(
            f0, splits, meta, self.cfg.carve_schedule(), self.cfg.carve_hyper(), bkw,
            self.cfg.concepts.mode, self.cfg.concepts.threshold, sc.flag_threshold,
            sc.protect_label, self.seed)
        d = self.out / "shortcut"
        res["before"].moie.save(d / "before")
        res["after"].moie.save(d / "after")
        rep = shortcut.fix_report(res)
        rows = []
        for stage in ("before", "after"):
            for who in ("cascade", "f0"):
                g = rep[stage]["gap" if who == "cascade" else "f0_gap"]
                rows.append([stage, who, g["agree_accuracy"], g["disagree_accuracy"],
                             g["gap_points"]])
        _write_rows(self.out / "reports" / "shortcut.csv",
                    ["stage", "model", "agree_accuracy", "disagree_accuracy", "gap_points"], rows)
        return rep

    def report(self) -> dict:
        """CSV tables for the coverage/hardness, intervention and
        completeness/ablation views, reusing earlier summaries when fresh."""
        files = {}
        for cmd, names in (("carve", ["coverage.csv", "iterations.csv"]),
                           ("intervene", ["intervention.csv"]),
                           ("completeness", ["completeness.csv"]),
                           ("ablate", ["ablation.csv"])):
            have = all((self.out / "reports" / n).is_file() for n in names)
            if self.cached_results(cmd) is None or not have:
                self.summarize(cmd, jsonable(self.execute(cmd)))
            for n in names:
                files[n] = f"reports/{n}"
        return {"files": files}

    def execute(self, command: str) -> dict:
        if command not in COMMANDS:
            raise InputError(f"unknown command {command!r}")
        return getattr(self, command.replace("-", "_"))()


def run_command(cfg: RunConfig, command: str, out, quiet: bool = False) -> Path:
    """Execute ``command`` and write its summary; returns the summary path."""
    r = Run(cfg, out, quiet)
    results = jsonable(r.execute(command))
    return r.summarize(command, results)
