"""Route, interpret, repeat.

Iteration ``k`` jointly trains a gate ``pi_k`` and an expert ``g_k`` against
the previous blackbox ``f_{k-1}``, forms the residual ``f_{k-1} - g_k`` and
fits a fresh head ``f_k`` to it on the mass every gate so far passed on.
The embedding map stays fixed; only heads are retrained.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .elen import DistillConfig, ElenExpert
from .errors import ContractError, InputError, PipelineError
from .numcore import DenseNet, Optimizer, log_softmax, load_json, save_json, softmax
from .selector import CoverageCollapse, SelectiveLossCfg, Selector, joint_loss, route_batch

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# blackbox
# ---------------------------------------------------------------------------

class Blackbox:
    """Head ``h_k`` over frozen embeddings (the embedding map is the identity
    on the dataset's embedding columns)."""

    def __init__(self, head: DenseNet, k: int = 0):
        self.head = head
        self.k = int(k)

    def logits(self, embeddings) -> np.ndarray:
        return self.head.forward(np.atleast_2d(embeddings))

    def predict(self, embeddings) -> np.ndarray:
        return np.argmax(self.logits(embeddings), axis=1)

    def copy(self, k=None) -> "Blackbox":
        return Blackbox(self.head.copy(), self.k if k is None else k)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "k": self.k, "head": self.head.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Blackbox":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise InputError("unsupported blackbox schema_version")
        return cls(DenseNet.from_dict(d["head"]), d["k"])


def _batches(m, batch_size, rng):
    order = rng.permutation(m)
    for s in range(0, m, batch_size):
        yield order[s:s + batch_size]


def train_blackbox(train: Dataset, hidden: int = 64, epochs: int = 60, lr: float = 0.01,
                   batch_size: int = 128, weight_decay: float = 1e-4, seed: int = 0) -> Blackbox:
    """Cross-entropy MLP ``emb -> hidden (relu) -> classes``."""
    rng = np.random.default_rng([seed, 0xB1AC])
    net = DenseNet.create([train.emb_dim, hidden, train.num_classes], ["relu", "identity"], rng)
    opt = Optimizer(net.params(), lr=lr, kind="adam", weight_decay=weight_decay)
    x, y = train.embeddings, train.labels
    for _ in range(epochs):
        for idx in _batches(len(train), batch_size, rng):
            out = net.forward_train(x[idx])
            p = softmax(out, axis=1)
            p[np.arange(idx.size), y[idx]] -= 1.0
            grads, _ = net.backward(p / idx.size)
            opt.step(grads)
    return Blackbox(net, 0)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class CarveSchedule:
    taus: list[float] = field(default_factory=lambda: [0.2] * 6)
    cum_coverage_stop: float = 0.90
    residual_acc_stop: float = 0.70
    max_iterations: int | None = None
    min_covered: int = 20

    def __post_init__(self):
        if not self.taus or any(not 0.0 < t <= 1.0 for t in self.taus):
            raise InputError("every target coverage must lie in (0, 1]")
        if self.max_iterations is None:
            self.max_iterations = len(self.taus)
        if self.max_iterations < 1:
            raise InputError("max_iterations must be at least 1")

    def tau(self, k: int) -> float:
        return self.taus[min(k, len(self.taus) - 1)]


@dataclass
class CarveHyper:
    hidden: int = 10
    t_lens: float = 0.7
    lambda_lens: float = 1e-4
    expert_weight_decay: float = 0.0
    expert_l1: float = 1e-3  # L1 on the first-layer weights that define attention
    alpha_kd: float = 0.9
    t_kd: float = 10.0
    lambda_s: float = 256.0
    alpha_mix: float = 0.5
    selector_hidden: int = 16
    lr: float = 0.01
    batch_size: int = 128
    expert_epochs: int = 80
    warmup_epochs: int = 20  # expert-only epochs before the gate starts moving
    residual_epochs: int = 40
    retries: int = 3
    seed: int = 0

    def distill(self) -> DistillConfig:
        return DistillConfig(self.alpha_kd, self.t_kd)

    def selective(self) -> SelectiveLossCfg:
        return SelectiveLossCfg(self.lambda_s, self.alpha_mix)


# ---------------------------------------------------------------------------
# one iteration
# ---------------------------------------------------------------------------

def residual_target(f_prev_logits, expert_logits) -> np.ndarray:
    f = np.asarray(f_prev_logits, dtype=np.float64)
    g = np.asarray(expert_logits, dtype=np.float64)
    if f.shape != g.shape:
        raise ContractError("residual operands differ in shape")
    return f - g


def fit_expert_iteration(teacher_logits, concepts, labels, tau, hyper: CarveHyper,
                         prior_weight=None, k: int = 0, num_classes: int | None = None,
                         concept_idx=None, pool_fraction: float = 1.0) -> tuple[Selector, ElenExpert]:
    """Jointly train ``(pi_k, g_k)``; earlier gates enter only via ``prior_weight``.

    A collapsed gate (mean output under the division guard) restarts the
    iteration with a fresh seed, at most ``hyper.retries`` times.
    """
    x = np.asarray(concepts, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    m, nc = x.shape
    if m == 0:
        raise PipelineError("no samples left to fit an expert on")
    C = num_classes or t.shape[1]
    w = np.ones(m) if prior_weight is None else np.asarray(prior_weight, dtype=np.float64)
    cfg, dcfg = hyper.selective(), hyper.distill()
    for attempt in range(hyper.retries):
        rng = np.random.default_rng([hyper.seed, k, attempt, 0xE4])
        expert = ElenExpert.create(nc, C, hyper.hidden, hyper.t_lens, hyper.lambda_lens, rng,
                                   concept_idx=concept_idx)
        sel = Selector.create(nc, tau, hyper.lambda_s, hyper.selector_hidden, rng)
        opt_e = Optimizer(expert.params(), lr=hyper.lr, kind="adam",
                          weight_decay=hyper.expert_weight_decay)
        opt_s = Optimizer(sel.params(), lr=hyper.lr, kind="adam")
        try:
            for epoch in range(hyper.expert_epochs):
                for idx in _batches(m, hyper.batch_size, rng):
                    _, ge, gs = joint_loss(expert, sel, x[idx], t[idx], y[idx], w[idx],
                                           cfg, dcfg, grads=True, pool_fraction=pool_fraction)
                    if hyper.expert_l1:
                        ge[0] = ge[0] + hyper.expert_l1 * np.sign(expert.w1)
                    opt_e.step(ge)
                    if epoch >= hyper.warmup_epochs:
                        opt_s.step(gs)
            if sel.pi(x).mean() < 1e-6:
                raise CoverageCollapse("selector collapsed after training")
            return sel, expert
        except CoverageCollapse as exc:
            log.warning("iteration %d attempt %d: %s; reseeding", k + 1, attempt + 1, exc)
    raise PipelineError(f"selector {k + 1} collapsed in {hyper.retries} attempts")


def gated_residual_target(f_prev_logits, expert_logits, pi) -> np.ndarray:
    """``f_prev - pi * g``: the expert's logits count only as far as the gate
    sends the sample to it, so an ignored sample keeps the teacher's logits."""
    pi = np.asarray(pi, dtype=np.float64).reshape(-1, 1)
    return residual_target(f_prev_logits, pi * np.asarray(expert_logits, dtype=np.float64))


def fit_residual(f_prev: Blackbox, expert_logits, embeddings, weights, hyper: CarveHyper,
                 k: int = 1, pi=None) -> Blackbox:
    """Fit a new head to the residual of ``f_prev`` after the expert, with
    per-sample ``weights`` (the product of ``1 - pi_i`` over every gate so
    far).  ``pi`` (the current gate) selects the gated target; without it
    the plain difference ``f_prev - g`` is used."""
    e = np.asarray(embeddings, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    f_logits = f_prev.logits(e)
    if pi is None:
        target = residual_target(f_logits, expert_logits)
    else:
        target = gated_residual_target(f_logits, expert_logits, pi)
    new = f_prev.copy(k=k)
    if w.sum() < 1e-6:
        log.warning("residual %d: no mass left to fit, keeping previous head", k)
        return new
    m = e.shape[0]
    rng = np.random.default_rng([hyper.seed, k, 0x5E])
    opt = Optimizer(new.head.params(), lr=hyper.lr, kind="adam")
    for _ in range(hyper.residual_epochs):
        for idx in _batches(m, hyper.batch_size, rng):
            out = new.head.forward_train(e[idx])
            grads, _ = new.head.backward(residual_loss_grad(out, target[idx], w[idx], hyper.t_kd))
            opt.step(grads)
    return new


def residual_loss(f_logits, target_logits, weights, t_kd) -> float:
    """Weighted mean of ``T^2 KL(softmax(target/T) || softmax(f/T))``."""
    lp_t = log_softmax(np.asarray(target_logits) / t_kd, axis=1)
    lp_f = log_softmax(np.asarray(f_logits) / t_kd, axis=1)
    kl = (np.exp(lp_t) * (lp_t - lp_f)).sum(axis=1)
    return float(np.mean(np.asarray(weights) * t_kd * t_kd * kl))


def residual_loss_grad(f_logits, target_logits, weights, t_kd) -> np.ndarray:
    """Gradient of :func:`residual_loss` with respect to ``f_logits``."""
    f = np.asarray(f_logits, dtype=np.float64)
    q = softmax(f / t_kd, axis=1) - softmax(np.asarray(target_logits) / t_kd, axis=1)
    return t_kd * q * (np.asarray(weights, dtype=np.float64) / f.shape[0])[:, None]


# ---------------------------------------------------------------------------
# the mixture
# ---------------------------------------------------------------------------

@dataclass
class IterationRecord:
    k: int
    tau: float
    coverage: float  # soft coverage of the training set, earlier experts' samples masked
    coverage_full: float  # same gate over the whole training set, unmasked
    covered: int  # samples hard-routed to this expert from the pool
    cum_coverage: float
    residual_accuracy: float | None


class MoIE:
    def __init__(self, selectors, experts, residual: Blackbox, concept_idx=None,
                 records=None, schedule: CarveSchedule | None = None, seed: int | None = None):
        if not selectors or len(selectors) != len(experts):
            raise ContractError("need K >= 1 (selector, expert) pairs")
        ncs = {e.n_concepts for e in experts} | {s.n_concepts for s in selectors}
        if len(ncs) != 1:
            raise ContractError("experts disagree on the concept set")
        self.selectors = list(selectors)
        self.experts = list(experts)
        self.residual = residual
        self.concept_idx = (np.asarray(concept_idx, dtype=np.int64) if concept_idx is not None
                            else experts[0].concept_idx)
        self.records = list(records or [])
        self.schedule = schedule
        self.seed = seed

    @property
    def K(self) -> int:
        return len(self.experts)

    def pi_matrix(self, concepts) -> np.ndarray:
        x = np.atleast_2d(concepts)
        return np.stack([s.pi(x) for s in self.selectors], axis=1)

    def routes(self, concepts) -> np.ndarray:
        return route_batch(self.pi_matrix(concepts))

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k, (s, e) in enumerate(zip(self.selectors, self.experts), start=1):
            save_json(s.to_dict(), d / f"selector_{k}.json")
            save_json(e.to_dict(), d / f"expert_{k}.json")
        save_json(self.residual.to_dict(), d / "residual.json")
        save_json({
            "schema_version": SCHEMA_VERSION,
            "K": self.K,
            "concept_idx": self.concept_idx.tolist(),
            "schedule": asdict(self.schedule) if self.schedule else None,
            "seed": self.seed,
            "records": [asdict(r) for r in self.records],
        }, d / "manifest.json")

    @classmethod
    def load(cls, directory) -> "MoIE":
        d = Path(directory)
        man = load_json(d / "manifest.json")
        if man.get("schema_version") != SCHEMA_VERSION:
            raise InputError("unsupported MoIE manifest schema_version")
        K = man["K"]
        sels = [Selector.from_dict(load_json(d / f"selector_{k}.json")) for k in range(1, K + 1)]
        exps = [ElenExpert.from_dict(load_json(d / f"expert_{k}.json")) for k in range(1, K + 1)]
        res = Blackbox.from_dict(load_json(d / "residual.json"))
        sched = CarveSchedule(**man["schedule"]) if man.get("schedule") else None
        recs = [IterationRecord(**r) for r in man.get("records", [])]
        return cls(sels, exps, res, man["concept_idx"], recs, sched, man.get("seed"))


def checksum(obj) -> str:
    """Digest of a selector's or expert's parameters."""
    h = hashlib.sha256()
    for p in obj.params():
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def moie_predict(moie: MoIE, concepts, embeddings):
    """Cascade prediction: ``(labels, routes)``; route ``K`` is the residual."""
    x = np.atleast_2d(np.asarray(concepts, dtype=np.float64))
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    routes = moie.routes(x)
    labels = np.empty(x.shape[0], dtype=np.int64)
    for k in range(moie.K + 1):
        rows = np.nonzero(routes == k)[0]
        if rows.size == 0:
            continue
        if k < moie.K:
            labels[rows] = moie.experts[k].predict(x[rows])
        else:
            labels[rows] = moie.residual.predict(e[rows])
    return labels, routes


def _residual_accuracy(sels, residual: Blackbox, data: Dataset):
    pi = np.stack([s.pi(data.concepts) for s in sels], axis=1)
    rows = route_batch(pi) == len(sels)
    if not rows.any():
        return None
    return float(np.mean(residual.predict(data.embeddings[rows]) == data.labels[rows]))


def carve(f0: Blackbox, train: Dataset, val: Dataset, schedule: CarveSchedule | None = None,
          hyper: CarveHyper | None = None, concept_idx=None, on_iteration=None) -> MoIE:
    """Run the route-interpret-repeat loop.

    ``train.concepts`` / ``val.concepts`` must already hold the (filtered)
    concept values the experts consume.  Iteration ``k`` trains on the
    training samples no earlier gate hard-routes; stopping uses hard routing
    on train (cumulative coverage), residual accuracy on val, and the number
    of samples the new expert takes.
    """
    schedule = schedule or CarveSchedule()
    hyper = hyper or CarveHyper()
    if train.n_concepts == 0:
        raise PipelineError("no usable concepts")
    m = len(train)
    selectors: list[Selector] = []
    experts: list[ElenExpert] = []
    records: list[IterationRecord] = []
    f_prev = f0
    covered = np.zeros(m, dtype=bool)
    pass_weight = np.ones(m)  # prod_{i<k} (1 - pi_i) over the full train set
    for k in range(schedule.max_iterations):
        pool = np.nonzero(~covered)[0]
        if pool.size == 0:
            break
        tau = schedule.tau(k)
        teacher = f_prev.logits(train.embeddings[pool])
        sel, exp = fit_expert_iteration(
            teacher, train.concepts[pool], train.labels[pool], tau, hyper,
            prior_weight=pass_weight[pool], k=k, num_classes=train.num_classes,
            concept_idx=concept_idx, pool_fraction=pool.size / m,
        )
        pi_full = sel.pi(train.concepts)
        takes = (pi_full >= 0.5) & ~covered
        if takes.sum() < schedule.min_covered and experts:
            log.info("iteration %d: expert takes %d < %d samples, stopping",
                     k + 1, int(takes.sum()), schedule.min_covered)
            break
        selectors.append(sel)
        experts.append(exp)
        covered |= takes
        pass_weight = pass_weight * (1.0 - pi_full)
        f_prev = fit_residual(f_prev, exp.logits(train.concepts), train.embeddings,
                              pass_weight, hyper, k=k + 1, pi=pi_full)
        res_acc = _residual_accuracy(selectors, f_prev, val)
        rec = IterationRecord(
            k=k + 1, tau=tau,
            coverage=float(pi_full[pool].sum() / m),
            coverage_full=float(pi_full.mean()),
            covered=int(takes.sum()),
            cum_coverage=float(covered.mean()),
            residual_accuracy=res_acc,
        )
        records.append(rec)
        log.info("iteration %d: zeta=%.3f covered=%d cum=%.3f residual_acc=%s", rec.k,
                 rec.coverage, rec.covered, rec.cum_coverage, res_acc)
        if on_iteration is not None:
            on_iteration(k + 1, selectors, experts, f_prev)
        if rec.cum_coverage >= schedule.cum_coverage_stop:
            break
        if res_acc is not None and res_acc < schedule.residual_acc_stop:
            break
        if takes.sum() < schedule.min_covered:
            break
    return MoIE(selectors, experts, f_prev, concept_idx, records, schedule, hyper.seed)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

@dataclass
class BucketRecord:
    route: str
    coverage: float
    accuracy: float | None
    proportional_accuracy: float
    f0_accuracy: float | None
    n: int


def coverage_report(moie: MoIE, test: Dataset, f0: Blackbox | None = None) -> dict:
    labels, routes = moie_predict(moie, test.concepts, test.embeddings)
    m = len(test)
    correct = labels == test.labels
    f0_correct = None if f0 is None else f0.predict(test.embeddings) == test.labels
    buckets = []
    for k in range(moie.K + 1):
        rows = routes == k
        n = int(rows.sum())
        cov = n / m
        acc = float(correct[rows].mean()) if n else None
        buckets.append(BucketRecord(
            route=f"expert_{k + 1}" if k < moie.K else "residual",
            coverage=cov,
            accuracy=acc,
            proportional_accuracy=cov * acc if n else 0.0,
            f0_accuracy=(float(f0_correct[rows].mean()) if n and f0_correct is not None else None),
            n=n,
        ))
    expert_rows = routes < moie.K
    out = {
        "cascade_accuracy": float(correct.mean()),
        "buckets": [asdict(b) for b in buckets],
        "expert_coverage": float(expert_rows.mean()),
    }
    if f0_correct is not None:
        out["f0_accuracy"] = float(f0_correct.mean())
        out["f0_accuracy_experts"] = float(f0_correct[expert_rows].mean()) if expert_rows.any() else None
        res = ~expert_rows
        out["f0_accuracy_residual"] = float(f0_correct[res].mean()) if res.any() else None
    return out


def report_csv(report: dict, path) -> None:
    import csv

    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["route", "n", "coverage", "accuracy", "proportional_accuracy", "f0_accuracy"]
        w.writerow(cols)
        for b in report["buckets"]:
            w.writerow(["" if b[c] is None else b[c] for c in cols])


def records_json(moie: MoIE) -> str:
    return json.dumps([asdict(r) for r in moie.records], sort_keys=True)
