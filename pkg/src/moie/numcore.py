"""Small deterministic dense-network kernel.

Everything trainable in the package (blackbox heads, selectors, expert
trunks, the completeness projection) is built from :class:`DenseNet` plus
the optimizers here.  All arithmetic is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, InputError, NumericError, StateError

SCHEMA_VERSION = 1
ACTIVATIONS = ("identity", "relu", "sigmoid")


# ---------------------------------------------------------------------------
# elementwise helpers
# ---------------------------------------------------------------------------

def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits, labels):
    """Per-sample cross-entropy of integer ``labels`` under ``logits``."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    return -log_softmax(logits, axis=1)[np.arange(labels.size), labels]


def _activate(z, act):
    if act == "identity":
        return z
    if act == "relu":
        return np.maximum(z, 0.0)
    return sigmoid(z)


def _activation_grad(z, a, act):
    if act == "identity":
        return np.ones_like(z)
    if act == "relu":
        return (z > 0).astype(np.float64)
    return a * (1.0 - a)


# ---------------------------------------------------------------------------
# DenseNet
# ---------------------------------------------------------------------------

@dataclass
class Layer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.bias.shape[0] != self.weight.shape[0]:
            raise ContractError(
                f"layer shapes disagree: weight {self.weight.shape}, bias {self.bias.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")


@dataclass
class Tape:
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)


class DenseNet:
    """Stack of fully connected layers.

    ``forward`` is pure.  ``forward_train`` additionally records the
    intermediate activations that ``backward`` consumes.
    """

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ContractError("a DenseNet needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].weight.shape[0] != layers[i + 1].weight.shape[1]:
                raise ContractError(
                    f"layer {i} outputs {layers[i].weight.shape[0]} but layer {i + 1} "
                    f"expects {layers[i + 1].weight.shape[1]}"
                )
        self.layers = list(layers)
        self._tape: Tape | None = None

    @classmethod
    def create(cls, sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator):
        """Glorot-uniform weights, zero biases."""
        if len(activations) != len(sizes) - 1:
            raise ContractError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def _check_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ContractError(
                f"batch has shape {x.shape}, network expects {self.input_dim} columns"
            )
        return x

    def forward(self, x) -> np.ndarray:
        a = self._check_batch(x)
        for layer in self.layers:
            a = _activate(a @ layer.weight.T + layer.bias, layer.activation)
        return a

    __call__ = forward

    def forward_train(self, x) -> np.ndarray:
        a = self._check_batch(x)
        tape = Tape()
        for layer in self.layers:
            tape.inputs.append(a)
            z = a @ layer.weight.T + layer.bias
            a = _activate(z, layer.activation)
            tape.pre.append(z)
            tape.post.append(a)
        self._tape = tape
        return a

    def backward(self, loss_grad) -> tuple[list[np.ndarray], np.ndarray]:
        """Return (parameter gradients in ``params()`` order, input gradient)."""
        if self._tape is None:
            raise StateError("backward called without a recorded forward_train pass")
        tape = self._tape
        g = np.asarray(loss_grad, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != tape.post[-1].shape:
            raise ContractError(
                f"loss gradient shape {g.shape} does not match output {tape.post[-1].shape}"
            )
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))  # type: ignore[list-item]
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            dz = g * _activation_grad(tape.pre[i], tape.post[i], layer.activation)
            grads[2 * i] = dz.T @ tape.inputs[i]
            grads[2 * i + 1] = dz.sum(axis=0)
            g = dz @ layer.weight
        return grads, g

    # -- checkpoints --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "dense_net",
            "dims": [self.input_dim] + [l.weight.shape[0] for l in self.layers],
            "activations": [l.activation for l in self.layers],
            "layers": [
                {"weight": l.weight.ravel().tolist(), "bias": l.bias.tolist()}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNet":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise InputError(f"unsupported checkpoint schema_version {d.get('schema_version')!r}")
        dims = d["dims"]
        layers = []
        for i, (spec, act) in enumerate(zip(d["layers"], d["activations"])):
            w = np.asarray(spec["weight"], dtype=np.float64).reshape(dims[i + 1], dims[i])
            layers.append(Layer(w, np.asarray(spec["bias"], dtype=np.float64), act))
        return cls(layers)


def forward(net: DenseNet, batch) -> np.ndarray:
    return net.forward(batch)


def backward(net: DenseNet, loss_grad):
    return net.backward(loss_grad)


def save_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True))


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Optimizer:
    """In-place first-order optimizer over a list of parameter arrays.

    ``kind`` is one of ``sgd``, ``sgd-momentum`` or ``adam``.  The state is
    fully determined by the sequence of gradients it receives.
    """

    def __init__(
        self,
        params: Sequence[np.ndarray],
        lr: float = 0.01,
        kind: str = "adam",
        momentum: float = 0.9,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        seed: int = 0,
    ):
        if kind not in ("sgd", "sgd-momentum", "adam"):
            raise ContractError(f"unknown optimizer {kind!r}")
        if lr <= 0:
            raise ContractError("learning rate must be positive")
        self.params = list(params)
        self.lr = float(lr)
        self.kind = kind
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.seed = seed
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params] if kind == "adam" else []

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ContractError("gradient list does not match parameter list")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.betas
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.weight_decay:
                g = g + self.weight_decay * p
            if self.kind == "sgd":
                p -= self.lr * g
            elif self.kind == "sgd-momentum":
                self.m[i] = self.momentum * self.m[i] + g
                p -= self.lr * self.m[i]
            else:
                self.m[i] = b1 * self.m[i] + (1 - b1) * g
                self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
                mhat = self.m[i] / (1 - b1**t)
                vhat = self.v[i] / (1 - b2**t)
                p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if not np.all(np.isfinite(p)):
                raise NumericError(f"parameter {i} became non-finite at step {t}")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    loss_fn: Callable[[], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    h: float = 1e-3,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` reads the arrays in ``params`` (which are perturbed in place)
    and returns ``(loss, grads)`` with grads aligned to ``params``.
    Relative error per entry is ``|ga - gn| / max(|ga|, |gn|, 1e-8)``.
    """
    if h <= 0:
        raise ContractError("step h must be positive")
    loss0, analytic = loss_fn()
    if not np.isfinite(loss0):
        raise NumericError("loss is not finite at the check point")
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = ga.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp = loss_fn()[0]
            flat[j] = orig - h
            lm = loss_fn()[0]
            flat[j] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError("loss became non-finite under perturbation")
            gn = (lp - lm) / (2 * h)
            err = abs(gflat[j] - gn) / max(abs(gflat[j]), abs(gn), 1e-8)
            worst = max(worst, err)
    return worst
