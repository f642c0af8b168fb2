"""Independent reference implementations used to pin expected test values.

Everything here is deliberately written against the *definitions* (pure
Python loops, direct enumeration) rather than the library's vectorized
paths, so the two sides of each check stay independent.
"""

from __future__ import annotations

import math

import numpy as np

from chronos.voter import NO_ANSWER


def scalar_forward(params, signal, valid_len: int) -> float:
    """Score one signal with plain Python floats and explicit loops."""
    cfg = params.config
    L = cfg.l_tail
    n_proj = cfg.n_proj
    n_conv = cfg.n_conv
    sig = [float(v) for v in signal]
    assert len(sig) == L

    proj_w = params.proj_w.tolist()
    proj_b = params.proj_b.tolist()
    z = [[proj_w[p] * sig[t] + proj_b[p] for t in range(L)] for p in range(n_proj)]

    def mix(x, w, b):  # 1x1 convolution
        rows = len(w)
        cols = len(x)
        return [[sum(w[o][i] * x[i][t] for i in range(cols)) + b[o] for t in range(L)] for o in range(rows)]

    o = mix(z, params.input_shortcut_w.tolist(), params.input_shortcut_b.tolist())
    acc = [row[:] for row in o]
    for blk in params.blocks:
        bneck = mix(o, blk.bottleneck_w.tolist(), blk.bottleneck_b.tolist())
        banks = []
        for w_arr, b_arr in zip(blk.conv_ws, blk.conv_bs):
            w = w_arr.tolist()
            b = b_arr.tolist()
            l = len(w[0][0])
            pl = (l - 1) // 2
            bank = []
            for oc in range(n_conv):
                row = []
                for t in range(L):
                    total = b[oc]
                    for p in range(n_proj):
                        for dt in range(l):
                            src = t + dt - pl
                            if 0 <= src < L:
                                total += w[oc][p][dt] * bneck[p][src]
                    row.append(total if total > 0.0 else 0.0)
                bank.append(row)
            banks.append(bank)
        m = bneck + [row for bank in banks for row in bank]
        sc = mix(o, blk.shortcut_w.tolist(), blk.shortcut_b.tolist())
        o = [[m[c][t] + sc[c][t] for t in range(L)] for c in range(len(m))]
        acc = [[acc[c][t] + o[c][t] for t in range(L)] for c in range(len(o))]

    start = L - valid_len
    feats = [sum(acc[c][start:]) / valid_len for c in range(len(acc))]
    wh = params.mlp_hidden_w.tolist()
    bh = params.mlp_hidden_b.tolist()
    h = []
    for i in range(len(wh)):
        v = sum(wh[i][c] * feats[c] for c in range(len(feats))) + bh[i]
        h.append(v if v > 0.0 else 0.0)
    wo = params.mlp_out_w.tolist()
    logit = sum(wo[i] * h[i] for i in range(len(h))) + float(params.mlp_out_b[0])
    score = 1.0 / (1.0 + math.exp(-logit))
    return min(max(score, 1e-15), 1.0 - 1e-15)


def brute_force_vote(items) -> tuple[str, dict[str, float]]:
    """Direct evaluation of the weighted vote: for each candidate answer, sum
    the scores of matching items (left to right); the winner is the argmax
    with lexicographic tie-break. Items without an extracted answer are not
    candidates."""
    candidates = []
    for item in items:
        if item.answer != NO_ANSWER and item.answer not in candidates:
            candidates.append(item.answer)
    if not candidates:
        raise ValueError("no candidates")
    totals = {}
    for a in candidates:
        total = 0.0
        for item in items:
            if item.answer == a:
                total += item.score
        totals[a] = total
    best = max(totals.values())
    winner = min(a for a, w in totals.items() if w == best)
    return winner, totals


def pair_count_auc(scores, labels) -> float:
    """Exhaustive enumeration of (positive, negative) pairs; ties count half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        raise ValueError("need both classes")
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def finite_difference_grads(params, signals, valid_lens, labels, step: float = 1e-6) -> dict[str, np.ndarray]:
    """Central-difference gradient of the mean BCE loss for every tensor."""
    from chronos.scorer_net import forward
    from chronos.trainer import bce_loss

    def loss_at() -> float:
        scores, _ = forward(params, signals, valid_lens)
        return bce_loss(scores, labels, reduction="mean")

    fd: dict[str, np.ndarray] = {}
    for name, tensor in params.tensors():
        grad = np.zeros_like(tensor)
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + step
            up = loss_at()
            tensor[idx] = orig - step
            down = loss_at()
            tensor[idx] = orig
            grad[idx] = (up - down) / (2.0 * step)
        fd[name] = grad
    return fd


def tensor_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Relative L2 disagreement between two gradient tensors."""
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return num / den
