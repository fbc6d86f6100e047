"""Shared oracles and helpers for the test suite."""

import numpy as np


def naive_matmul(a, b):
    """Triple-loop matrix product, the oracle matmul is checked against."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def finite_diff(f, x, h=1e-5):
    """Central finite differences of a scalar function of ndarray x.

    f() re-evaluates the forward pass using the current contents of x;
    x is perturbed in place and restored.
    """
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def assert_grads_close(ad, fd, rtol=1e-4, atol=1e-7, what=""):
    ad = np.asarray(ad)
    fd = np.asarray(fd)
    diff = np.abs(ad - fd)
    denom = np.maximum(np.abs(ad), np.abs(fd))
    ok = (diff <= atol) | (diff / np.maximum(denom, 1e-300) <= rtol)
    assert ok.all(), (f"{what} gradient mismatch: max rel err "
                      f"{np.max(diff / np.maximum(denom, 1e-300)):.3g}, "
                      f"max abs err {diff.max():.3g}")


# -- brute-force metric oracles --------------------------------------------


def oracle_macro_f1(pred, truth):
    """Confusion counts by explicit scan, then per-class F1."""
    f1s = []
    for c in (0, 1):
        tp = fp = fn = 0
        for p, t in zip(pred, truth):
            if p == c and t == c:
                tp += 1
            elif p == c and t != c:
                fp += 1
            elif p != c and t == c:
                fn += 1
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    return (f1s[0] + f1s[1]) / 2


def oracle_auc_roc(scores, truth):
    """Exhaustive pair enumeration: wins plus half-ties."""
    pos = [s for s, t in zip(scores, truth) if t == 1]
    neg = [s for s, t in zip(scores, truth) if t == 0]
    wins = ties = 0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1
            elif sp == sn:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def oracle_auc_pr(scores, truth):
    """Average precision by re-scanning at every distinct threshold."""
    scores = list(scores)
    truth = list(truth)
    n_pos = sum(truth)
    thresholds = sorted(set(scores), reverse=True)
    ap = 0.0
    prev_tp = 0
    for theta in thresholds:
        tp = sum(1 for s, t in zip(scores, truth) if s >= theta and t == 1)
        fp = sum(1 for s, t in zip(scores, truth) if s >= theta and t == 0)
        new_tp = tp - prev_tp
        if new_tp:
            ap += (new_tp / n_pos) * (tp / (tp + fp))
        prev_tp = tp
    return ap
