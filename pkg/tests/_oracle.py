"""Scalar-loop reference implementation of the classifier, f64, no numpy math.

Written independently of the package: plain lists and ``math`` only. Takes a
dict of arrays keyed like ``ModelParams`` and optionally separate forward and
backward recurrent matrices, so path-wise gradients can be finite-differenced.
"""

import math


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def _step(h_prev, x, W, b):
    hp = list(h_prev) + list(x)
    return [math.tanh(_dot(W[i], hp) + b[i]) for i in range(len(W))]


def _softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def elman_step(h_prev, x, W, b):
    return _step(h_prev, x, [list(r) for r in W], list(b))


def example_forward(P, ids, W_f=None, W_b=None):
    """Every intermediate quantity for one unpadded id sequence."""
    W = [list(r) for r in P["W"]]
    Wf = [list(r) for r in (W_f if W_f is not None else W)]
    Wb = [list(r) for r in (W_b if W_b is not None else W)]
    h = len(W)
    E = [list(r) for r in P["E"]]
    bf, bb = list(P["b_f"][0]), list(P["b_b"][0])
    L = len(ids)

    Hf, hp = [], [0.0] * h
    for t in range(L):
        hp = _step(hp, E[ids[t]], Wf, bf)
        Hf.append(hp)
    G, hp = [], [0.0] * h
    for s in range(L):
        hp = _step(hp, E[ids[L - 1 - s]], Wb, bb)
        G.append(hp)
    Hb = [G[L - 1 - t] for t in range(L)]

    fused = [Hf[t] + Hb[t] for t in range(L)]
    wa = list(P["W_a"][0])
    alpha = math.exp(P["log_alpha"][0][0])
    zero = [0.0] * (2 * h)
    scores = [alpha * (_dot(wa[:2 * h], fused[t]) + _dot(wa[2 * h:], fused[t - 1] if t else zero))
              for t in range(L)]
    A = _softmax(scores)
    Wd = [list(r) for r in P["W_d"]]
    R = [[math.tanh(_dot(row[:2 * h], fused[t]) + row[2 * h] * A[t]) for row in Wd] for t in range(L)]
    pooled = [sum(A[t] * R[t][i] for t in range(L)) for i in range(len(Wd))]
    glob = Hf[L - 1] + Hb[0]
    feat = glob + pooled
    logits = [_dot(row, feat) + b for row, b in zip(P["W_o"], P["b_o"][0])]
    Y = _softmax(logits)

    rev = ids[::-1]
    ssl = 0.0
    if L >= 2:
        Ws = [list(r) for r in P["W_ssl"]]
        for s in range(L - 1):
            pred = [_dot(row, G[s]) for row in Ws]
            ssl += sum((p - q) ** 2 for p, q in zip(pred, E[rev[s + 1]]))
        ssl /= L - 1
    return {"H_f": Hf, "H_b": Hb, "G": G, "fused": fused, "A": A, "R": R, "H_att": pooled,
            "H_fusion": glob, "Y": Y, "ssl": ssl}


def batch_loss(P, seqs, labels, ssl_weight=0.0, W_f=None, W_b=None):
    """Mean cross-entropy plus ``ssl_weight`` times mean auxiliary loss."""
    ce = ssl = 0.0
    for ids, y in zip(seqs, labels):
        out = example_forward(P, ids, W_f, W_b)
        ce -= math.log(out["Y"][y])
        ssl += out["ssl"]
    n = len(seqs)
    return ce / n + ssl_weight * ssl / n
