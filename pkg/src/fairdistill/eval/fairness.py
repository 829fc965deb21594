"""Group-fairness ratios and downstream utility scores for binary predictions."""
from __future__ import annotations

import numpy as np

from ..exceptions import SingleGroup


def _arrays(*arrs):
    out = [np.asarray(a).ravel() for a in arrs]
    if len({len(a) for a in out}) != 1:
        raise ValueError("inputs have different lengths")
    return out


def _ratio(rates: list[float]) -> tuple[float, bool]:
    """min/max over group rates; (1.0, True) when every rate is zero."""
    hi = max(rates)
    if hi == 0:
        return 1.0, True
    return min(rates) / hi, False


def selection_rates(y_hat, s) -> dict:
    y_hat, s = _arrays(y_hat, s)
    return {g.item(): float(np.mean(y_hat[s == g] == 1)) for g in np.unique(s)}


def fairness_details(y_hat, y, s) -> dict:
    """Per-group rates, both ratios, and degeneracy flags."""
    y_hat, y, s = _arrays(y_hat, y, s)
    groups = np.unique(s)
    if len(groups) < 2:
        raise SingleGroup("at least two groups are required")
    sel = selection_rates(y_hat, s)
    dpr, all_zero = _ratio(list(sel.values()))
    tpr, fpr, excluded = {}, {}, []
    for g in groups:
        g = g.item()
        pos, neg = (s == g) & (y == 1), (s == g) & (y == 0)
        if pos.any():
            tpr[g] = float(np.mean(y_hat[pos] == 1))
        else:
            excluded.append((g, "tpr"))
        if neg.any():
            fpr[g] = float(np.mean(y_hat[neg] == 1))
        else:
            excluded.append((g, "fpr"))
    ratios, degenerate = [], []
    for name, rates in (("tpr", tpr), ("fpr", fpr)):
        if len(rates) < 2:
            degenerate.append(name)
            continue
        r, zero = _ratio(list(rates.values()))
        ratios.append(r)
        if zero:
            degenerate.append(name)
    eor = min(ratios) if ratios else 1.0
    return {"dpr": dpr, "eor": eor, "selection_rate": sel, "tpr": tpr, "fpr": fpr,
            "flags": {"all_zero_selection": all_zero, "excluded_strata": excluded,
                      "degenerate_rates": degenerate}}


def demographic_parity_ratio(y_hat, s) -> float:
    """Smallest group selection rate over the largest; 1.0 if nobody is selected."""
    y_hat, s = _arrays(y_hat, s)
    if len(np.unique(s)) < 2:
        raise SingleGroup("at least two groups are required")
    return _ratio(list(selection_rates(y_hat, s).values()))[0]


def equalized_odds_ratio(y_hat, y, s) -> float:
    """Worse of the TPR ratio and FPR ratio (each min over max across groups)."""
    return fairness_details(y_hat, y, s)["eor"]


def utility_scores(y_hat, y) -> tuple[float, float, float]:
    """(accuracy, recall, F1) with 1 as the positive class."""
    y_hat, y = _arrays(y_hat, y)
    if not len(y):
        raise ValueError("empty input")
    tp = float(np.sum((y_hat == 1) & (y == 1)))
    fp = float(np.sum((y_hat == 1) & (y == 0)))
    fn = float(np.sum((y_hat == 0) & (y == 1)))
    acc = float(np.mean(y_hat == y))
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return acc, recall, f1
