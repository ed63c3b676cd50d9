"""Direct scalar evaluations of the objectives, written with plain loops and
``math`` so they share no code with the package."""

import math

import numpy as np


def lse(v):
    m = max(v)
    return m + math.log(sum(math.exp(x - m) for x in v))


def probs(v, T=1.0):
    z = [x / T for x in v]
    s = lse(z)
    return [math.exp(x - s) for x in z]


def distill(student, teacher, label, alpha, T):
    pt = probs(teacher, T)
    ps = probs(student, T)
    kl = sum(a * (math.log(a) - math.log(b)) for a, b in zip(pt, ps) if a > 0)
    ce = -(student[label] - lse(student))
    return alpha * T * T * kl + (1 - alpha) * ce


def gamma(w1):
    C, H, N = len(w1), len(w1[0]), len(w1[0][0])
    return [[sum(abs(w1[c][h][j]) for h in range(H)) for j in range(N)] for c in range(C)]


def attention(w1, t_lens):
    return [probs(row, t_lens) for row in gamma(w1)]


def entropy(w1, t_lens):
    return sum(-sum(a * math.log(a) for a in row) for row in attention(w1, t_lens))


def expert_logits(x, w1, b1, w2, b2, t_lens):
    out = []
    for c, row in enumerate(attention(w1, t_lens)):
        top = max(row)
        scaled = [xi * a / top for xi, a in zip(x, row)]
        hid = [max(0.0, sum(w * s for w, s in zip(w1[c][h], scaled)) + b1[c][h])
               for h in range(len(b1[c]))]
        out.append(sum(w * h for w, h in zip(w2[c], hid)) + b2[c])
    return out


def mlp(x, layers):
    """``layers`` = [(W, b, act)], ``W`` as nested lists [out][in]."""
    v = list(x)
    for W, b, act in layers:
        z = [sum(w * a for w, a in zip(row, v)) + bi for row, bi in zip(W, b)]
        if act == "relu":
            v = [max(0.0, t) for t in z]
        elif act == "sigmoid":
            v = [1 / (1 + math.exp(-t)) for t in z]
        else:
            v = z
    return v


def routing_weight(history, pi_k):
    w = pi_k
    for p in history:
        w *= 1 - p
    return w


def residual_weight(history):
    w = 1.0
    for p in history:
        w *= 1 - p
    return w


def penalty(tau, zeta, lam):
    gap = tau - zeta
    return lam * gap * gap if gap > 0 else 0.0


def selective_risk(losses, pis, weights):
    m = len(losses)
    zeta = sum(pis) / m
    return sum(l * p * w for l, p, w in zip(losses, pis, weights)) / m / zeta


def joint(losses, pis, weights, tau, lam, a, pool_fraction=1.0):
    m = len(losses)
    zeta = sum(pis) / m
    risk = selective_risk(losses, pis, weights)
    pen = penalty(tau, pool_fraction * zeta, lam)
    aux = sum(losses) / m
    return {"risk": risk, "penalty": pen, "L_s": risk + pen, "aux": aux,
            "L": a * (risk + pen) + (1 - a) * aux}


def tolist(a):
    return np.asarray(a).tolist()
