"""Representation and channel-correlation analyses."""

from __future__ import annotations

import numpy as np
import structlog

from plmcast.errors import AnalysisError

logger = structlog.get_logger()

_TOL = 1e-12


def linear_cka(X, Y) -> float:
    """Linear CKA between two (n, d) feature matrices, columns centered internally.

    Uses the feature form when both widths are below ``n`` and the Gram form
    otherwise; the two are algebraically identical.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise AnalysisError(f"CKA needs two (n, d) matrices with equal n, got {X.shape}, {Y.shape}")
    n = X.shape[0]
    if n < 2:
        raise AnalysisError("CKA needs at least two samples")

    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    for name, raw, centered in (("X", X, Xc), ("Y", Y, Yc)):
        if np.linalg.norm(centered) <= _TOL * max(1.0, np.linalg.norm(raw)):
            raise AnalysisError(f"{name} has zero variance; CKA is undefined")

    if max(X.shape[1], Y.shape[1]) < n:
        cross = np.linalg.norm(Yc.T @ Xc) ** 2
        self_x = np.linalg.norm(Xc.T @ Xc)
        self_y = np.linalg.norm(Yc.T @ Yc)
    else:
        Kx, Ky = Xc @ Xc.T, Yc @ Yc.T
        cross = float((Kx * Ky).sum())
        self_x = np.linalg.norm(Kx)
        self_y = np.linalg.norm(Ky)
    return float(cross / (self_x * self_y))


def pearson_corr_map(series) -> np.ndarray:
    """Channel-by-channel Pearson correlation of a (C, F) series.

    Constant channels correlate 0 with everything else and keep 1 on the diagonal.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 2:
        raise AnalysisError(f"Expected a (C, F) series, got shape {x.shape}")
    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=1))
    constant = norms <= _TOL * (1.0 + np.abs(x).max(axis=1))
    if constant.any():
        logger.warning("constant_channels_in_correlation", channels=np.flatnonzero(constant).tolist())

    safe = np.where(constant, 1.0, norms)
    corr = (centered @ centered.T) / np.outer(safe, safe)
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)


def minmax_normalize(matrix) -> np.ndarray:
    """Rescale to [0, 1]; a flat matrix maps to zeros."""
    m = np.asarray(matrix, dtype=np.float64)
    low, high = m.min(), m.max()
    if high - low <= 0:
        return np.zeros_like(m)
    return (m - low) / (high - low)


def strongest_pair(corr) -> tuple[int, int]:
    """Off-diagonal (i, j) with i < j holding the largest correlation."""
    m = np.asarray(corr, dtype=np.float64)
    if m.shape[0] < 2:
        raise AnalysisError("Need at least two channels to pick a pair")
    upper = np.triu_indices(m.shape[0], k=1)
    k = int(np.argmax(m[upper]))
    return int(upper[0][k]), int(upper[1][k])
