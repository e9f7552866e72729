"""
Imputation metrics
Error metrics over an evaluation mask, exact 2-Wasserstein distance between
equal-size point sets, and ROC-AUC for the recognizer.
"""

import logging
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

SCOPES = ('original_in_sample', 'original_out_of_sample', 'artificial')
W2_MAX_POINTS = 512


class EvaluationError(ValueError):
    """Raised for empty evaluation masks or mismatched inputs"""


class MetricsReport:
    """RMSE, MAE and MRE (percent) over the evaluated entries"""

    def __init__(self, rmse: float, mae: float, mre_percent: Optional[float], eval_entry_count: int,
                 scope: str):
        if scope not in SCOPES:
            raise EvaluationError(f"Unknown scope: {scope}")
        # Jensen; the slack covers rounding when every error is equal
        assert mae <= rmse * (1.0 + 1e-12) + 1e-300, f"MAE {mae} exceeds RMSE {rmse}"
        self.rmse = rmse
        self.mae = mae
        self.mre_percent = mre_percent
        self.eval_entry_count = eval_entry_count
        self.scope = scope

    def to_dict(self) -> Dict[str, Any]:
        return {
            'scope': self.scope,
            'rmse': self.rmse,
            'mae': self.mae,
            'mre_percent': self.mre_percent,
            'eval_entry_count': self.eval_entry_count,
        }

    def __repr__(self) -> str:
        mre = 'undefined' if self.mre_percent is None else f"{self.mre_percent:.2f}%"
        return (f"MetricsReport({self.scope}: rmse={self.rmse:.4f}, mae={self.mae:.4f}, "
                f"mre={mre}, n={self.eval_entry_count})")


def compute_metrics(x_true: np.ndarray, x_hat: np.ndarray, eval_mask: np.ndarray,
                    scope: str = 'original_in_sample') -> MetricsReport:
    """
    Compute RMSE, MAE and MRE on the entries where eval_mask is 1

    MRE = sum|x_hat - x_true| / sum|x_true| * 100, None when the
    denominator is zero.

    Args:
        x_true: Ground truth
        x_hat: Imputation
        eval_mask: Binary evaluation mask
        scope: Label stored on the report

    Returns:
        MetricsReport
    """
    x_true = np.asarray(x_true, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    eval_mask = np.asarray(eval_mask, dtype=np.float64)
    if not x_true.shape == x_hat.shape == eval_mask.shape:
        raise EvaluationError(f"Shapes differ: {x_true.shape}, {x_hat.shape}, {eval_mask.shape}")
    if not np.all((eval_mask == 0.0) | (eval_mask == 1.0)):
        raise EvaluationError("eval_mask must be binary")

    selected = eval_mask == 1.0
    count = int(selected.sum())
    if count == 0:
        raise EvaluationError(f"Empty evaluation mask for scope {scope}")

    err = x_hat[selected] - x_true[selected]
    abs_err = np.abs(err)
    rmse = float(np.sqrt(np.mean(err * err)))
    mae = float(np.mean(abs_err))
    denom = float(np.sum(np.abs(x_true[selected])))
    mre = float(np.sum(abs_err) / denom * 100.0) if denom > 0.0 else None
    return MetricsReport(rmse, mae, mre, count, scope)


def linear_assignment(cost: np.ndarray) -> np.ndarray:
    """
    Minimum-cost perfect matching on a square cost matrix

    Shortest augmenting path with row/column potentials (Jonker-Volgenant
    family), O(n^3).

    Args:
        cost: [n x n] cost matrix

    Returns:
        assignment where row i is matched to column assignment[i]
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise EvaluationError(f"Cost matrix must be square, got {cost.shape}")

    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=int)

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            improve = free & (cur < minv[1:])
            minv[1:][improve] = cur[improve]
            way[1:][improve] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    assignment = np.zeros(n, dtype=int)
    assignment[p[1:] - 1] = np.arange(n)
    return assignment


def wasserstein2_exact(a: np.ndarray, b: np.ndarray, max_points: int = W2_MAX_POINTS) -> float:
    """
    Exact 2-Wasserstein distance between two equal-size point sets

    sqrt(min over matchings of the mean squared Euclidean cost); rows are
    flattened to vectors.

    Args:
        a: [n x ...] points
        b: [n x ...] points
        max_points: Size cap for the cubic solver

    Returns:
        W2 distance
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    if a.shape != b.shape:
        raise EvaluationError(f"Point sets differ in shape: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n == 0:
        raise EvaluationError("Point sets are empty")
    if n > max_points:
        raise EvaluationError(f"{n} points exceed the exact-solver cap of {max_points}")

    cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    assignment = linear_assignment(cost)
    return float(np.sqrt(np.mean(cost[np.arange(n), assignment])))


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """
    Area under the ROC curve via the rank-sum statistic (ties averaged)

    Returns:
        AUC, or None when only one class is present
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if scores.shape != labels.shape:
        raise EvaluationError(f"scores {scores.shape} and labels {labels.shape} differ")
    n_pos = int(np.sum(labels == 1.0))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        logger.warning("[EVAL] ROC-AUC undefined: only one class present")
        return None
    ranks = pd.Series(scores).rank(method='average').to_numpy()
    rank_sum = float(ranks[labels == 1.0].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
