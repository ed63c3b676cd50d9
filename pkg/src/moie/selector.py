"""Sigmoid gate and the selective objective.

For iteration ``k`` with frozen earlier gates, a batch contributes

    L = a * (R + lambda_s * max(0, tau - zeta)^2) + (1 - a) * mean(l)

where ``zeta = mean(pi)``, ``R = mean(l * pi * w_prev) / zeta`` and
``w_prev = prod_{i<k} (1 - pi_i)``.  ``l`` is the expert's per-sample
distillation loss plus its entropy penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .elen import DistillConfig, ElenExpert, distill_grad, distill_losses
from .errors import ContractError, InputError, NumericError
from .numcore import DenseNet

SCHEMA_VERSION = 1
MIN_COVERAGE = 1e-6


class CoverageCollapse(NumericError):
    """Mean selector output fell below the division guard."""


class Selector:
    def __init__(self, gate: DenseNet, tau: float, lambda_s: float = 32.0):
        if gate.output_dim != 1 or gate.layers[-1].activation != "sigmoid":
            raise ContractError("gate must end in a single sigmoid unit")
        if not 0.0 < tau <= 1.0:
            raise ContractError(f"target coverage {tau} outside (0, 1]")
        self.gate = gate
        self.tau = float(tau)
        self.lambda_s = float(lambda_s)

    @classmethod
    def create(cls, n_concepts, tau, lambda_s=32.0, hidden=16, rng=None, bias_init=0.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        gate = DenseNet.create([n_concepts, hidden, 1], ["relu", "sigmoid"], rng)
        gate.layers[-1].bias[:] = bias_init
        return cls(gate, tau, lambda_s)

    @property
    def n_concepts(self) -> int:
        return self.gate.input_dim

    def params(self):
        return self.gate.params()

    def copy(self) -> "Selector":
        return Selector(self.gate.copy(), self.tau, self.lambda_s)

    def pi(self, concepts) -> np.ndarray:
        return self.gate.forward(np.atleast_2d(concepts))[:, 0]

    __call__ = pi

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "gate": self.gate.to_dict(),
                "tau": self.tau, "lambda_s": self.lambda_s}

    @classmethod
    def from_dict(cls, d: dict) -> "Selector":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise InputError("unsupported selector schema_version")
        return cls(DenseNet.from_dict(d["gate"]), d["tau"], d["lambda_s"])


@dataclass
class SelectiveLossCfg:
    lambda_s: float = 32.0
    alpha_mix: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha_mix <= 1.0:
            raise ContractError("alpha_mix must lie in [0, 1]")


def coverage(pi_values) -> float:
    pi = np.asarray(pi_values, dtype=np.float64).reshape(-1)
    if pi.size == 0:
        raise InputError("coverage of an empty batch")
    return float(pi.mean())


def coverage_penalty(tau, zeta, lambda_s) -> float:
    return float(lambda_s * max(0.0, tau - zeta) ** 2)


def routing_weight(pi_history, pi_k) -> float:
    """``pi_k * prod(1 - history)``; the empty product is one."""
    h = np.asarray(pi_history, dtype=np.float64).reshape(-1)
    return float(pi_k * np.prod(1.0 - h))


def residual_weight(pi_history) -> np.ndarray:
    """Mass that passed every gate so far: ``prod(1 - pi_i)`` along the last axis."""
    h = np.asarray(pi_history, dtype=np.float64)
    if h.ndim == 1:
        return np.prod(1.0 - h)
    return np.prod(1.0 - h, axis=1)


def selective_risk(weighted_losses, pi_values) -> float:
    zeta = coverage(pi_values)
    if zeta < MIN_COVERAGE:
        raise CoverageCollapse(f"coverage {zeta:.3g} below guard {MIN_COVERAGE}")
    return float(np.mean(weighted_losses) / zeta)


def route(pi_value, threshold: float = 0.5) -> str:
    return "expert" if pi_value >= threshold else "residual"


def route_batch(pi_matrix, threshold: float = 0.5) -> np.ndarray:
    """Cascade index per row: first column with ``pi >= threshold``, else ``K``."""
    return kernels.cascade_route(pi_matrix, threshold)


# ---------------------------------------------------------------------------
# joint objective
# ---------------------------------------------------------------------------

@dataclass
class JointTerms:
    loss: float
    selective_risk: float
    penalty: float
    aux: float
    coverage: float


def joint_loss(expert: ElenExpert, selector: Selector, concepts, teacher_logits, labels,
               prior_weight=None, cfg: SelectiveLossCfg | None = None,
               distill: DistillConfig | None = None, grads: bool = False,
               pool_fraction: float = 1.0):
    """Value of the joint objective; with ``grads=True`` also the gradients
    ``(expert_grads, selector_grads)`` in each object's ``params()`` order.

    ``pool_fraction`` is the share of the full training set the batch is
    drawn from when samples already claimed by earlier experts are left out
    (they cannot reach this gate in the cascade).  Coverage for the penalty
    is then measured against the full set, ``pool_fraction * mean(pi)``;
    the risk ratio is unaffected.
    """
    cfg = cfg or SelectiveLossCfg(lambda_s=selector.lambda_s)
    distill = distill or DistillConfig()
    x = np.atleast_2d(np.asarray(concepts, dtype=np.float64))
    m = x.shape[0]
    w = np.ones(m) if prior_weight is None else np.asarray(prior_weight, dtype=np.float64)
    a = cfg.alpha_mix

    if grads:
        student = expert.forward_train(x)
        pi = selector.gate.forward_train(x)[:, 0]
    else:
        student = expert.logits(x)
        pi = selector.pi(x)
    H = expert.entropy()
    ell = distill_losses(student, teacher_logits, labels, distill) + expert.lambda_lens * H
    zeta = coverage(pi)
    if zeta < MIN_COVERAGE:
        raise CoverageCollapse(f"coverage {zeta:.3g} below guard {MIN_COVERAGE}")
    risk = float(np.mean(ell * pi * w) / zeta)
    f = float(pool_fraction)
    gap = max(0.0, selector.tau - f * zeta)
    penalty = cfg.lambda_s * gap * gap
    aux = float(ell.mean())
    total = a * (risk + penalty) + (1.0 - a) * aux
    terms = JointTerms(total, risk, penalty, aux, f * zeta)
    if not grads:
        return terms

    d_ell = a * pi * w / (m * zeta) + (1.0 - a) / m
    d_pi = a * (ell * w / (m * zeta) - risk / (m * zeta) - 2.0 * cfg.lambda_s * gap * f / m)
    d_student = distill_grad(student, teacher_logits, labels, distill) * d_ell[:, None]
    g_exp = expert.backward(d_student)
    scale = expert.lambda_lens * d_ell.sum()
    g_exp = [g + scale * ge for g, ge in zip(g_exp, expert.entropy_grad())]
    g_sel, _ = selector.gate.backward(d_pi[:, None])
    return terms, g_exp, g_sel
