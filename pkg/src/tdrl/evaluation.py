"""Identifiability (MCC) and time-delayed skeleton scores."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .errors import ConfigError

logger = logging.getLogger(__name__)

MODES = ("pearson", "spearman")


@dataclass
class MCCReport:
    corr: np.ndarray  # |corr|, rows = true components, columns = estimated
    assignment: np.ndarray  # assignment[k] = estimated component matched to true k
    mcc: float
    mode: str


@dataclass
class SkeletonReport:
    est_adjacency: np.ndarray  # [n, n, L] bool, same indexing as the generator adjacency
    scores: np.ndarray  # [n, n, L] largest surviving penalty per edge
    threshold: np.ndarray  # [n] per target component
    f1: Optional[float] = None
    path: Optional[np.ndarray] = None
    val_error: Optional[np.ndarray] = None  # [n, len(path)]


def _pooled(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a.reshape(-1, a.shape[-1])


def abs_correlation(z_true, z_est, mode: str = "spearman") -> np.ndarray:
    """Absolute correlations between every true and every estimated column.

    Samples are pooled over all leading axes. Zero-variance columns get
    correlation 0 and a warning.
    """
    if mode not in MODES:
        raise ConfigError(f"mode: expected one of {MODES}, got {mode!r}")
    a, b = _pooled(z_true), _pooled(z_est)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: true {a.shape} vs estimated {b.shape}")
    if mode == "spearman":
        a = rankdata(a, axis=0)
        b = rankdata(b, axis=0)

    def standardize(x, label):
        x = x - x.mean(axis=0)
        sd = x.std(axis=0)
        flat = sd == 0
        if flat.any():
            logger.warning("%s columns %s have zero variance; their correlations are set to 0",
                           label, np.flatnonzero(flat).tolist())
        return np.divide(x, sd, out=np.zeros_like(x), where=~flat)

    return np.abs(standardize(a, "true").T @ standardize(b, "estimated") / a.shape[0])


def mcc(z_true, z_est, mode: str = "spearman") -> MCCReport:
    """Mean correlation after optimal one-to-one matching of components."""
    n = np.shape(z_true)[-1]
    if _pooled(z_true).shape[0] < 10 * n:
        raise ConfigError(f"MCC needs at least 10*n = {10 * n} samples")
    corr = abs_correlation(z_true, z_est, mode)
    rows, cols = linear_sum_assignment(-corr)
    return MCCReport(corr, cols, float(corr[rows, cols].mean()), mode)


def brute_force_mcc(z_true, z_est, mode: str = "spearman") -> float:
    """Exhaustive MCC over all permutations; only for n <= 8."""
    n = np.shape(z_true)[-1]
    if n > 8:
        raise ConfigError(f"brute-force MCC is limited to n <= 8, got n={n}")
    corr = abs_correlation(z_true, z_est, mode)
    rows = np.arange(n)
    return max(float(corr[rows, list(p)].mean()) for p in itertools.permutations(range(n)))


def align_adjacency(est: np.ndarray, assignment: Sequence[int]) -> np.ndarray:
    """Re-index an estimated adjacency into the true component order."""
    a = np.asarray(assignment)
    return np.asarray(est)[np.ix_(a, a)]


def f1_score(est: np.ndarray, truth: np.ndarray) -> float:
    est, truth = np.asarray(est, bool), np.asarray(truth, bool)
    tp = np.sum(est & truth)
    fp = np.sum(est & ~truth)
    fn = np.sum(~est & truth)
    if tp + fp + fn == 0:
        return 1.0
    return float(2 * tp / (2 * tp + fp + fn))


def compare_skeleton(est, truth: np.ndarray, assignment=None) -> float:
    """F1 over lagged edges after mapping estimated components onto true ones.

    ``assignment`` comes from an :class:`MCCReport` (or is the report
    itself); pass ``np.arange(n)`` when the estimates are already aligned.
    """
    if assignment is None:
        raise ConfigError("compare_skeleton needs the component assignment from an MCCReport")
    if isinstance(assignment, MCCReport):
        assignment = assignment.assignment
    adj = est.est_adjacency if isinstance(est, SkeletonReport) else np.asarray(est, bool)
    truth = np.asarray(truth, bool)
    if adj.shape != truth.shape:
        raise ConfigError(f"adjacency shapes differ: {adj.shape} vs {truth.shape}")
    return f1_score(align_adjacency(adj, assignment), truth)


def recover_skeleton(z_est, L: int, path=None, **kwargs) -> SkeletonReport:
    """Lagged skeleton of ``z_est`` from a sparse path regression per component.

    See :func:`tdrl.lassonet.fit_path` for the regression and keyword
    arguments. ``z_est`` is ``[T, n]`` or ``[num_seqs, T, n]``.
    """
    from .lassonet import DEFAULT_PATH, fit_path, lagged_design

    z = np.asarray(z_est, dtype=float)
    if z.ndim == 2:
        z = z[None]
    n = z.shape[-1]
    X, Y = lagged_design(z, L)
    if X.shape[0] < 20 * n * L:
        raise ConfigError(f"skeleton recovery needs at least 20*n*L = {20 * n * L} lagged samples, got {X.shape[0]}")
    if not np.all(np.isfinite(X)) or np.any(Y.std(axis=0) == 0):
        raise ConfigError("skeleton recovery got non-finite or constant latent components")
    path = DEFAULT_PATH if path is None else np.asarray(path, dtype=float)
    fit = fit_path(X, Y, path, **kwargs)
    # features are ordered (tau - 1) * n + j
    scores = fit.scores.reshape(n, L, n).transpose(0, 2, 1)
    est = scores > fit.threshold[:, None, None]
    return SkeletonReport(est, scores, fit.threshold, path=fit.path, val_error=fit.val_error)
