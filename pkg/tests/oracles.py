"""Independent reference computations used by the tests.

These deliberately avoid the package's own helpers: loops, explicit pairwise
comparisons and central finite differences.
"""

import math

import numpy as np


def sigmoid_clamped(u):
    p = 1.0 / (1.0 + math.exp(-u)) if u >= 0 else math.exp(u) / (1.0 + math.exp(u))
    return min(max(p, 1e-7), 1.0 - 1e-7)


def central_diff(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d fn / d x for a flat float array ``x`` modified in place and restored."""
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = fn()
        x.flat[i] = old - h
        fm = fn()
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2.0 * h)
    return g


def brute_confusing(scores, labels, anchor):
    out = set()
    for k in range(len(scores)):
        if k == anchor:
            continue
        if labels[anchor] == 1 and labels[k] == 0 and scores[k] >= scores[anchor]:
            out.add(k)
        if labels[anchor] == 0 and labels[k] == 1 and scores[k] <= scores[anchor]:
            out.add(k)
    return out


def brute_ap(scores, labels):
    n = len(scores)

    def ahead(j, i):  # j ranks ahead of i
        return scores[j] > scores[i] or (scores[j] == scores[i] and j < i)

    pos = [i for i in range(n) if labels[i] == 1]
    if not pos:
        return float("nan")
    total = 0.0
    for i in pos:
        rank = 1 + sum(1 for j in range(n) if j != i and ahead(j, i))
        hits = 1 + sum(1 for j in pos if j != i and ahead(j, i))
        total += hits / rank
    return total / len(pos)


def brute_f1(S, Y, thr=0.5):
    vals = []
    for s_row, y_row in zip(S, Y):
        tp = fp = fn = 0
        for s, y in zip(s_row, y_row):
            pred = s >= thr
            if pred and y == 1:
                tp += 1
            elif pred:
                fp += 1
            elif y == 1:
                fn += 1
        vals.append(1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(vals) / len(vals)


def brute_accuracy(S, Y, thr=0.5):
    n = c = 0
    for s_row, y_row in zip(S, Y):
        for s, y in zip(s_row, y_row):
            n += 1
            c += int((s >= thr) == (y == 1))
    return c / n
