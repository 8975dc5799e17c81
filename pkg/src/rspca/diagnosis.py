"""Post-alarm fault isolation.

Two steps: find the latent component that went out of control (an MTY-style
per-component test on the posterior mean of z), then find the observed
variables whose loading on that component is significantly nonzero.

Indices are 0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import InputError
from .monitoring import score_batch
from .vi import FittedModel


@dataclass(frozen=True)
class DiagnosisReport:
    latent_index: int | None
    latent_scores: np.ndarray
    contributor_set: frozenset
    alpha: float


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")


def mty_threshold(alpha: float, phase1_n: int) -> float:
    """((n+1)/n) F_{1-alpha}(1, n-1)."""
    _check_alpha(alpha)
    if phase1_n < 3:
        raise InputError("phase1_n must be at least 3")
    n = phase1_n
    return (n + 1) / n * float(stats.f.ppf(1 - alpha, 1, n - 1))


def latent_scores(model: FittedModel, x, inner_iters: int = 10) -> np.ndarray:
    """(<z_j>)^2 / (Sigma_z)_jj for one raw sample."""
    b = score_batch(model, np.asarray(x, dtype=float)[None], inner_iters=inner_iters)
    m = b.latent_mean[0]
    return m**2 / np.diag(b.latent_cov[0])


def isolate_latent(model: FittedModel, x, alpha: float = 0.01, phase1_n: int | None = None):
    """Return (index or None, scores).

    Only one component is assumed faulty, so the largest score among those
    above the threshold is reported.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.p,):
        raise InputError(f"expected a length-{model.p} sample")
    phase1_n = model.n if phase1_n is None else int(phase1_n)
    thr = mty_threshold(alpha, phase1_n)
    scores = latent_scores(model, x)
    flagged = np.flatnonzero(scores > thr)
    if flagged.size == 0:
        return None, scores
    return int(flagged[np.argmax(scores[flagged])]), scores


def loading_t_stats(model: FittedModel) -> np.ndarray:
    """<A_ij> / sqrt((Sigma_{A_i})_jj) for all entries."""
    M = model.state.loading.mean_rows
    var = np.einsum("ijj->ij", model.state.loading.row_covariance)
    return M / np.sqrt(var)


def loading_mask(model: FittedModel, alpha: float = 0.01, phase1_n: int | None = None) -> np.ndarray:
    """Two-sided t-test of A_ij = 0 for every entry; True where rejected."""
    _check_alpha(alpha)
    phase1_n = model.n if phase1_n is None else int(phase1_n)
    if phase1_n < 2:
        raise InputError("phase1_n must be at least 2")
    crit = float(stats.t.ppf(1 - alpha / 2, phase1_n - 1))
    return np.abs(loading_t_stats(model)) > crit


def test_loading_zero(model: FittedModel, i: int, j: int, alpha: float = 0.01, phase1_n: int | None = None) -> bool:
    """True when the loading of variable i on component j is significantly nonzero."""
    if not (0 <= i < model.p and 0 <= j < model.q):
        raise InputError(f"index ({i}, {j}) out of range for a {model.p} x {model.q} loading")
    _check_alpha(alpha)
    phase1_n = model.n if phase1_n is None else int(phase1_n)
    crit = float(stats.t.ppf(1 - alpha / 2, phase1_n - 1))
    M = model.state.loading.mean_rows[i, j]
    sd = np.sqrt(model.state.loading.row_covariance[i, j, j])
    return bool(abs(M) / sd > crit)


# keep pytest from collecting the function above as a test
test_loading_zero.__test__ = False


def contributors(model: FittedModel, j: int, alpha: float = 0.01, phase1_n: int | None = None) -> frozenset:
    if not 0 <= j < model.q:
        raise InputError(f"component {j} out of range")
    mask = loading_mask(model, alpha, phase1_n)[:, j]
    return frozenset(int(i) for i in np.flatnonzero(mask))


def diagnose(model: FittedModel, x, alpha: float = 0.01, phase1_n: int | None = None) -> DiagnosisReport:
    idx, scores = isolate_latent(model, x, alpha, phase1_n)
    contrib = frozenset() if idx is None else contributors(model, idx, alpha, phase1_n)
    return DiagnosisReport(idx, scores, contrib, alpha)
