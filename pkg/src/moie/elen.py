"""Entropy-layer interpretable expert.

Each class ``i`` owns a two-layer head (``Nc -> hidden -> 1``, relu).  The
relevance of concept ``j`` for class ``i`` is the L1 norm of the head's
first-layer column, ``gamma[i, j] = sum_h |w1[i, h, j]|``; attention is
``softmax(gamma[i] / t_lens)`` and the concept vector is scaled by the
max-normalised attention before entering the head.  Because relevance is
read off the weights, a concept the head ignores cannot carry attention.
The Shannon entropy of each attention row is the sparsity regulariser.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError, InputError, NumericError
from .numcore import DenseNet, Layer, cross_entropy, log_softmax, softmax

SCHEMA_VERSION = 1


@dataclass
class DistillConfig:
    alpha_kd: float = 0.9
    t_kd: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.alpha_kd <= 1.0:
            raise ContractError("alpha_kd must lie in [0, 1]")
        if self.t_kd <= 0:
            raise ContractError("t_kd must be positive")


def attention_from_gamma(gamma, t_lens: float) -> np.ndarray:
    return softmax(np.asarray(gamma, dtype=np.float64) / t_lens, axis=-1)


class ElenExpert:
    def __init__(self, w1, b1, w2, b2, t_lens=0.7, lambda_lens=1e-4,
                 concept_idx=None, class_names=None):
        self.w1 = np.ascontiguousarray(w1, dtype=np.float64)
        self.b1 = np.ascontiguousarray(b1, dtype=np.float64)
        self.w2 = np.ascontiguousarray(w2, dtype=np.float64)
        self.b2 = np.ascontiguousarray(b2, dtype=np.float64)
        if self.w1.ndim != 3:
            raise ContractError("w1 must be [classes, hidden, concepts]")
        C, H, Nc = self.w1.shape
        if self.b1.shape != (C, H) or self.w2.shape != (C, H) or self.b2.shape != (C,):
            raise ContractError("expert parameter shapes disagree")
        if t_lens <= 0:
            raise ContractError("t_lens must be positive")
        self.t_lens = float(t_lens)
        self.lambda_lens = float(lambda_lens)
        self.concept_idx = (np.arange(Nc) if concept_idx is None
                            else np.asarray(concept_idx, dtype=np.int64))
        if self.concept_idx.size != Nc:
            raise ContractError("concept index set does not match the expert's width")
        self.class_names = class_names or [f"class_{i}" for i in range(C)]
        self._cache = None

    @classmethod
    def create(cls, n_concepts, num_classes, hidden=10, t_lens=0.7, lambda_lens=1e-4,
               rng=None, concept_idx=None, class_names=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        lim1 = np.sqrt(6.0 / (n_concepts + hidden))
        lim2 = np.sqrt(6.0 / (hidden + 1))
        return cls(
            w1=rng.uniform(-lim1, lim1, size=(num_classes, hidden, n_concepts)),
            b1=np.zeros((num_classes, hidden)),
            w2=rng.uniform(-lim2, lim2, size=(num_classes, hidden)),
            b2=np.zeros(num_classes),
            t_lens=t_lens, lambda_lens=lambda_lens,
            concept_idx=concept_idx, class_names=class_names,
        )

    # -- shapes -------------------------------------------------------------
    @property
    def num_classes(self) -> int:
        return self.w1.shape[0]

    @property
    def n_concepts(self) -> int:
        return self.w1.shape[2]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def gamma(self) -> np.ndarray:
        """Relevance scores ``[classes, concepts]``."""
        return np.abs(self.w1).sum(axis=1)

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "ElenExpert":
        return ElenExpert(*(p.copy() for p in self.params()), t_lens=self.t_lens,
                          lambda_lens=self.lambda_lens, concept_idx=self.concept_idx.copy(),
                          class_names=list(self.class_names))

    # -- attention ----------------------------------------------------------
    def attention(self) -> np.ndarray:
        """Per-class categorical attention over concepts, rows sum to one."""
        return attention_from_gamma(self.gamma, self.t_lens)

    def attention_tilde(self) -> np.ndarray:
        """Attention rescaled so each row's maximum is one."""
        g = self.gamma / self.t_lens
        return np.exp(g - g.max(axis=1, keepdims=True))

    # -- forward ------------------------------------------------------------
    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_concepts:
            raise ContractError(f"expected {self.n_concepts} concepts, got shape {x.shape}")
        return x

    def logits(self, x) -> np.ndarray:
        x = self._check(x)
        return kernels.elen_logits(x, self.attention_tilde(), self.w1, self.b1, self.w2, self.b2)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def forward_train(self, x) -> np.ndarray:
        x = self._check(x)
        at = self.attention_tilde()
        xmod = x[:, None, :] * at[None]  # [m, C, Nc]
        z = np.einsum("mcn,chn->mch", xmod, self.w1) + self.b1[None]
        h = np.maximum(z, 0.0)
        out = np.einsum("mch,ch->mc", h, self.w2) + self.b2[None]
        self._cache = (x, at, xmod, z, h)
        return out

    def backward(self, dlogits) -> list[np.ndarray]:
        """Gradients of the upstream loss w.r.t. ``params()``."""
        if self._cache is None:
            raise ContractError("backward called before forward_train")
        x, at, xmod, z, h = self._cache
        d = np.asarray(dlogits, dtype=np.float64)
        gw2 = np.einsum("mc,mch->ch", d, h)
        gb2 = d.sum(axis=0)
        dz = d[:, :, None] * self.w2[None] * (z > 0)  # [m, C, H]
        gw1 = np.einsum("mch,mcn->chn", dz, xmod)
        gb1 = dz.sum(axis=0)
        dxmod = np.einsum("mch,chn->mcn", dz, self.w1)
        dat = np.einsum("mcn,mn->cn", dxmod, x)
        gw1 += self.gamma_to_w1(self._tilde_grad(at, dat))
        return [gw1, gb1, gw2, gb2]

    def _tilde_grad(self, at, dat):
        # at_ij = exp((g_ij - g_i,max) / T): the max entry is constant
        s = dat * at / self.t_lens
        grad = s.copy()
        amax = np.argmax(self.gamma, axis=1)
        rows = np.arange(self.num_classes)
        grad[rows, amax] -= s.sum(axis=1)
        return grad

    def gamma_to_w1(self, ggamma) -> np.ndarray:
        """Chain a gradient w.r.t. relevance scores into ``w1``."""
        return ggamma[:, None, :] * np.sign(self.w1)

    # -- regulariser --------------------------------------------------------
    def entropy(self) -> float:
        a = self.attention()
        return float(-(a * np.log(a)).sum())

    def entropy_grad_gamma(self) -> np.ndarray:
        a = self.attention()
        la = np.log(a)
        h = -(a * la).sum(axis=1, keepdims=True)
        return -(a / self.t_lens) * (la + h)

    def entropy_grad(self) -> list[np.ndarray]:
        """Gradient of :meth:`entropy` w.r.t. ``params()``."""
        g = [np.zeros_like(p) for p in self.params()]
        g[0] = self.gamma_to_w1(self.entropy_grad_gamma())
        return g

    # -- exports ------------------------------------------------------------
    def head(self, class_id: int) -> DenseNet:
        """Class head as a standalone DenseNet (input: modulated concepts)."""
        return DenseNet([
            Layer(self.w1[class_id], self.b1[class_id], "relu"),
            Layer(self.w2[class_id][None, :], self.b2[class_id:class_id + 1], "identity"),
        ])

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "gamma": self.gamma.tolist(),  # derived, kept for readers
            "t_lens": self.t_lens,
            "lambda_lens": self.lambda_lens,
            "trunk": [self.head(i).to_dict() for i in range(self.num_classes)],
            "concept_idx": self.concept_idx.tolist(),
            "class_names": list(self.class_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ElenExpert":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise InputError("unsupported expert schema_version")
        heads = [DenseNet.from_dict(h) for h in d["trunk"]]
        return cls(
            w1=np.stack([h.layers[0].weight for h in heads]),
            b1=np.stack([h.layers[0].bias for h in heads]),
            w2=np.stack([h.layers[1].weight[0] for h in heads]),
            b2=np.array([h.layers[1].bias[0] for h in heads]),
            t_lens=d["t_lens"], lambda_lens=d["lambda_lens"],
            concept_idx=d["concept_idx"], class_names=d["class_names"],
        )


def elen_forward(expert: ElenExpert, concepts):
    """``(logits, attention)`` for one concept vector or a batch."""
    x = np.asarray(concepts, dtype=np.float64)
    logits = expert.logits(x)
    return (logits[0] if x.ndim == 1 else logits), expert.attention()


def entropy_reg(expert: ElenExpert) -> float:
    """Sum over classes of the attention entropy, in nats."""
    return expert.entropy()


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------

def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite logits")


def distill_losses(student, teacher, labels, cfg: DistillConfig) -> np.ndarray:
    """Per-sample ``alpha T^2 KL(p_teacher || p_student) + (1 - alpha) CE``."""
    s = np.atleast_2d(np.asarray(student, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher, dtype=np.float64))
    if s.shape != t.shape:
        raise ContractError("student and teacher logits differ in shape")
    _finite(s, t)
    T = cfg.t_kd
    log_pt = log_softmax(t / T, axis=1)
    log_ps = log_softmax(s / T, axis=1)
    kl = (np.exp(log_pt) * (log_pt - log_ps)).sum(axis=1)
    out = cfg.alpha_kd * T * T * kl
    if cfg.alpha_kd < 1.0:
        out = out + (1.0 - cfg.alpha_kd) * cross_entropy(s, labels)
    return out


def distill_grad(student, teacher, labels, cfg: DistillConfig) -> np.ndarray:
    """d(per-sample distill loss) / d(student logits)."""
    s = np.atleast_2d(np.asarray(student, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher, dtype=np.float64))
    T = cfg.t_kd
    g = cfg.alpha_kd * T * (softmax(s / T, axis=1) - softmax(t / T, axis=1))
    if cfg.alpha_kd < 1.0:
        onehot = np.zeros_like(s)
        onehot[np.arange(s.shape[0]), np.asarray(labels, dtype=np.int64)] = 1.0
        g = g + (1.0 - cfg.alpha_kd) * (softmax(s, axis=1) - onehot)
    return g


def distill_loss(student_logits, teacher_logits, label, cfg: DistillConfig) -> float:
    s = np.asarray(student_logits, dtype=np.float64)
    if s.ndim == 1:
        return float(distill_losses(s[None], np.asarray(teacher_logits)[None], [label], cfg)[0])
    return float(distill_losses(s, teacher_logits, label, cfg).mean())


def expert_sample_losses(expert: ElenExpert, teacher_logits, concepts, labels,
                         cfg: DistillConfig) -> np.ndarray:
    logits = expert.logits(concepts)
    return distill_losses(logits, teacher_logits, labels, cfg) + expert.lambda_lens * expert.entropy()


def expert_sample_loss(expert: ElenExpert, teacher_logits, concepts, label,
                       cfg: DistillConfig) -> float:
    c = np.asarray(concepts, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if c.ndim == 1:
        return float(expert_sample_losses(expert, t[None], c[None], [label], cfg)[0])
    return float(expert_sample_losses(expert, t, c, label, cfg).mean())


def top_concepts(expert: ElenExpert, class_id: int, n: int) -> np.ndarray:
    """Indices (into the expert's concept set) of the ``n`` largest attention
    weights for ``class_id``; ties go to the lower index."""
    if n > expert.n_concepts:
        raise ContractError("asked for more concepts than the expert has")
    att = expert.attention()[class_id]
    return np.argsort(-att, kind="stable")[:n]


def top_from_attention(attention_row, n: int) -> np.ndarray:
    return np.argsort(-np.asarray(attention_row), kind="stable")[:n]
