"""Subspace, sparsity and run-length summaries used by the experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import InputError

ZERO_THRESHOLD = 1e-5


class RankDeficientError(InputError):
    pass


def _orthonormal_basis(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    tol = max(a.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    if s.size == 0 or s[-1] <= tol:
        raise RankDeficientError(f"{name} is rank deficient (singular values {s})")
    return u


def principal_angles(A_est, A_true) -> np.ndarray:
    """Principal angles in radians, largest first.

    Cosines come from the singular values of Qe^T Qt and sines from those of
    the part of Qt outside span(Qe); pairing them through arctan2 keeps full
    accuracy for both small and near-right angles.
    """
    ue = _orthonormal_basis(A_est, "A_est")
    ut = _orthonormal_basis(A_true, "A_true")
    if ue.shape[1] < ut.shape[1]:
        ue, ut = ut, ue
    k = ut.shape[1]
    cos = np.linalg.svd(ue.T @ ut, compute_uv=False)[:k]  # descending
    sin = np.linalg.svd(ut - ue @ (ue.T @ ut), compute_uv=False)[:k][::-1]  # ascending
    angles = np.arctan2(np.minimum(sin, 1.0), np.minimum(cos, 1.0))
    return np.sort(angles)[::-1]


def deviation_angle(A_est, A_true, how: str = "mean") -> float:
    """Average (or maximal) principal angle between the column spans, over pi/2."""
    angles = principal_angles(A_est, A_true)
    if how == "mean":
        value = float(np.mean(angles))
    elif how == "max":
        value = float(np.max(angles))
    else:
        raise InputError(f"unknown aggregation {how!r}")
    return min(max(value / (math.pi / 2), 0.0), 1.0)


def zero_measure(est_mask, true_mask) -> float:
    """Fraction of entries whose zero / nonzero status agrees."""
    est = np.asarray(est_mask, dtype=bool)
    true = np.asarray(true_mask, dtype=bool)
    if est.shape != true.shape:
        raise InputError(f"mask shapes differ: {est.shape} vs {true.shape}")
    return float(np.mean(est == true))


def threshold_mask(loadings, threshold: float = ZERO_THRESHOLD) -> np.ndarray:
    return np.abs(np.asarray(loadings)) > threshold


def match_columns(A_est, A_true) -> np.ndarray:
    """For each true column, the estimated column with the largest |cosine|.

    Greedy assignment in order of decreasing cosine; returns an index array
    of length ``A_true.shape[1]``.
    """
    A_est = np.asarray(A_est, dtype=float)
    A_true = np.asarray(A_true, dtype=float)
    ne = np.linalg.norm(A_est, axis=0)
    nt = np.linalg.norm(A_true, axis=0)
    cos = np.abs(A_est.T @ A_true) / np.maximum(np.outer(ne, nt), 1e-300)
    k = A_true.shape[1]
    if A_est.shape[1] < k:
        raise InputError("fewer estimated columns than true columns")
    out = np.full(k, -1)
    used = set()
    for flat in np.argsort(-cos, axis=None):
        e, t = np.unravel_index(flat, cos.shape)
        if out[t] >= 0 or e in used:
            continue
        out[t] = e
        used.add(e)
        if len(used) == k:
            break
    return out


def f1_score(est: set, true: set) -> float:
    est, true = set(est), set(true)
    if not est and not true:
        return 1.0
    tp = len(est & true)
    if tp == 0:
        return 0.0
    precision = tp / len(est)
    recall = tp / len(true)
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class Censored:
    """Run that ended without an alarm after ``length`` samples."""

    length: int

    def __repr__(self):
        return f"censored({self.length})"


@dataclass(frozen=True)
class DelaySummary:
    mean: float
    std: float
    censored_count: int
    count: int

    @property
    def all_censored(self) -> bool:
        return self.count == self.censored_count


def summarize_delays(delays) -> DelaySummary:
    """Mean and sample std of the uncensored run lengths; censored runs are counted."""
    delays = list(delays)
    if not delays:
        raise InputError("no run lengths to summarize")
    values = np.array([d for d in delays if not isinstance(d, Censored)], dtype=float)
    censored = len(delays) - values.size
    if values.size == 0:
        return DelaySummary(math.nan, math.nan, censored, len(delays))
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return DelaySummary(float(values.mean()), std, censored, len(delays))


@dataclass(frozen=True)
class ExperimentResult:
    setting: dict
    replicate_values: tuple
    mean: float
    std: float

    @classmethod
    def from_values(cls, setting: dict, values) -> "ExperimentResult":
        vals = tuple(float(v) for v in values)
        arr = np.asarray(vals)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return cls(dict(setting), vals, float(arr.mean()), std)

    def cell(self, digits: int = 2) -> str:
        return f"{self.mean:.{digits}f} ({self.std:.{digits}f})"
