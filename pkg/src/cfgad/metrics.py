"""Binary detection metrics: macro-F1, AUC-ROC, AUC-PR.

AUC-ROC uses midranks (equals the pair-counting probability that an
anomaly outscores a normal node, ties counted half). AUC-PR is average
precision with step-wise interpolation over distinct thresholds,
predicted-positive meaning score >= threshold.
"""

import numpy as np


def _as_binary(y, name):
    arr = np.asarray(y)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1 values")
    return arr.astype(np.int64)


def macro_f1(pred, truth):
    """Unweighted mean of per-class F1; an undefined class F1 counts as 0."""
    pred = _as_binary(pred, "predictions")
    truth = _as_binary(truth, "truth")
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if len(np.unique(truth)) < 2:
        raise ValueError("macro-F1 needs both classes present in the truth labels")
    f1s = []
    for c in (0, 1):
        tp = int(np.sum((pred == c) & (truth == c)))
        fp = int(np.sum((pred == c) & (truth != c)))
        fn = int(np.sum((pred != c) & (truth == c)))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    return (f1s[0] + f1s[1]) / 2


def _midranks(values):
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sv = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0  # 1-based midrank
        i = j + 1
    return ranks


def auc_roc(scores, truth):
    """P(score of random anomaly > score of random normal), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = _as_binary(truth, "truth")
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC-ROC is undefined with a single-class truth")
    ranks = _midranks(scores)
    rank_sum = float(ranks[truth == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_pr(scores, truth):
    """Average precision: sum over thresholds of (delta recall) * precision."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = _as_binary(truth, "truth")
    n_pos = int(truth.sum())
    if n_pos == 0:
        raise ValueError("AUC-PR is undefined without positives")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = truth[order]
    ap = 0.0
    tp = 0
    fp = 0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        grp = y[i:j + 1]
        new_tp = int(grp.sum())
        tp += new_tp
        fp += (j - i + 1) - new_tp
        if new_tp:
            ap += (new_tp / n_pos) * (tp / (tp + fp))
        i = j + 1
    return ap
