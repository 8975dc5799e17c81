"""Online scoring of new samples against a fitted model.

Each sample gets two Shewhart-type statistics: a latent statistic on the
posterior mean of z (the T^2 analogue) and a precision-weighted residual
statistic (the Q / SPE analogue).  An alarm is raised when either exceeds
its limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .core import DomainError, InputError, NumericError
from .metrics import Censored
from .vi import FittedModel


class CalibrationError(NumericError):
    pass


@dataclass(frozen=True)
class ControlLimits:
    latent_limit: float
    residual_limit: float
    alpha: float
    method: str = "chi_square"
    target_arl0: float | None = None

    def __post_init__(self):
        if not (self.latent_limit > 0 and self.residual_limit > 0):
            raise InputError("control limits must be positive")
        if not 0 < self.alpha < 1:
            raise InputError("alpha must lie in (0, 1)")
        if self.method not in ("chi_square", "monte_carlo"):
            raise InputError(f"unknown limit method {self.method!r}")


@dataclass(frozen=True)
class MonitorScore:
    latent_stat: float
    residual_stat: float
    latent_alarm: bool
    residual_alarm: bool
    gamma_weight: float
    latent_mean: np.ndarray

    @property
    def alarm(self) -> bool:
        return self.latent_alarm or self.residual_alarm


@dataclass(frozen=True)
class ScoreBatch:
    """Vectorised scores for many samples (rows)."""

    latent_stat: np.ndarray
    residual_stat: np.ndarray
    gamma_weight: np.ndarray
    latent_mean: np.ndarray
    latent_cov: np.ndarray

    def alarms(self, limits: ControlLimits):
        return self.latent_stat > limits.latent_limit, self.residual_stat > limits.residual_limit

    def __len__(self):
        return self.latent_stat.shape[0]


def chi_square_quantile(prob: float, dof: int) -> float:
    """Quantile of the chi-square distribution."""
    if not 0 < prob < 1:
        raise DomainError(f"probability must lie in (0, 1), got {prob}")
    if dof <= 0:
        raise DomainError(f"degrees of freedom must be positive, got {dof}")
    return float(stats.chi2.ppf(prob, dof))


def chi_square_limits(model: FittedModel, alpha: float) -> ControlLimits:
    return ControlLimits(
        latent_limit=chi_square_quantile(1 - alpha, model.q),
        residual_limit=chi_square_quantile(1 - alpha, model.p),
        alpha=alpha,
        method="chi_square",
    )


def score_batch(model: FittedModel, X, inner_iters: int = 10, tol: float = 1e-8, centered: bool = False) -> ScoreBatch:
    """Infer (<z>, Sigma_z, <Gamma>) for each row with the model frozen.

    Rows are raw samples unless ``centered``.  For robust variants the
    weight and latent factors are alternated until the weights move by
    less than ``tol`` or ``inner_iters`` passes are done.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    state = model.state
    p, q = state.p, state.q
    if X.shape[1] != p:
        raise InputError(f"sample length {X.shape[1]} does not match model dimension {p}")
    if not np.all(np.isfinite(X)):
        raise InputError("non-finite entries in samples")
    x = X if centered else X - model.center
    literal = model.config.literal_paper_updates
    M = state.loading.mean_rows
    AtA = state.loading.second_moment
    MtM = M.T @ M
    sa = state.loading.row_covariance.sum(axis=0)
    g = state.gamma_mean
    phi = np.diag(state.phi)
    proj = x @ M  # (N, q)
    weights = np.ones(x.shape[0])
    robust = model.config.variant.robust
    for _ in range(max(1, int(inner_iters)) if robust else 1):
        coef = g * weights
        S = np.linalg.inv(phi[None] + coef[:, None, None] * AtA[None])
        S = 0.5 * (S + np.swapaxes(S, 1, 2))
        m = coef[:, None] * np.einsum("tjk,tk->tj", S, proj)
        if not robust:
            break
        resid = x - m @ M.T
        R = np.einsum("ti,ti->t", resid, resid) + np.einsum("tjk,kj->t", S, MtM)
        if not literal:
            R += np.einsum("tjk,kj->t", S + m[:, :, None] * m[:, None, :], sa)
        R = np.maximum(R, p * model.config.ridge)
        new = np.sqrt(p / (g * R))
        done = np.max(np.abs(new - weights)) < tol
        weights = new
        if done:
            break
    if robust:
        # latent factor consistent with the final weights
        coef = g * weights
        S = np.linalg.inv(phi[None] + coef[:, None, None] * AtA[None])
        S = 0.5 * (S + np.swapaxes(S, 1, 2))
        m = coef[:, None] * np.einsum("tjk,tk->tj", S, proj)
    # <z>^T Sigma_z^{-1} <z> with Sigma_z^{-1} <z> = g Gamma <A>^T x
    latent = np.maximum(coef * np.einsum("tj,tj->t", m, proj), 0.0)
    resid = x - m @ M.T
    sq = np.einsum("ti,ti->t", resid, resid)
    residual = sq / (g * weights) if literal else g * weights * sq
    return ScoreBatch(latent, residual, weights, m, S)


def score_sample(model: FittedModel, x, limits: ControlLimits, inner_iters: int = 10) -> MonitorScore:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputError("score_sample expects a single sample vector")
    b = score_batch(model, x[None], inner_iters=inner_iters)
    lat, res = float(b.latent_stat[0]), float(b.residual_stat[0])
    return MonitorScore(
        latent_stat=lat,
        residual_stat=res,
        latent_alarm=lat > limits.latent_limit,
        residual_alarm=res > limits.residual_limit,
        gamma_weight=float(b.gamma_weight[0]),
        latent_mean=b.latent_mean[0],
    )


def _union_limits(lat: np.ndarray, res: np.ndarray, rate: float):
    """Thresholds with equal per-chart exceedance counts and union rate ~ ``rate``."""
    N = lat.size
    lat_sorted = np.sort(lat)[::-1]
    res_sorted = np.sort(res)[::-1]
    target = rate * N

    def union_count(k):
        tl, tr = lat_sorted[k], res_sorted[k]
        return int(np.count_nonzero((lat > tl) | (res > tr))), tl, tr

    lo, hi = max(int(math.floor(target / 2)) - 1, 0), min(int(math.ceil(target)) + 1, N - 1)
    # union_count is nondecreasing in k; find the smallest k with count >= target
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if union_count(mid)[0] >= target:
            hi = mid
        else:
            lo = mid
    c_lo, tl_lo, tr_lo = union_count(lo)
    c_hi, tl_hi, tr_hi = union_count(hi)
    if abs(c_lo - target) <= abs(c_hi - target):
        return tl_lo, tr_lo
    return tl_hi, tr_hi


def calibrate_limits(model: FittedModel, incontrol_source, target_arl0: float, runs: int, seed: int = 0,
                     chunk: int = 20000) -> ControlLimits:
    """Monte Carlo control limits for a target in-control ARL.

    ``incontrol_source`` is either a callable ``(count, rng) -> samples`` or
    an array of Phase-I samples (rows).  ``runs`` is the number of in-control
    samples scored.  Both charts get the same exceedance probability, chosen
    so that the probability of either alarming is 1/target_arl0.
    """
    if not target_arl0 > 1:
        raise InputError("target_arl0 must exceed 1")
    rate = 1.0 / target_arl0
    rng = np.random.default_rng(seed)
    if callable(incontrol_source):
        lat, res = [], []
        left = int(runs)
        while left > 0:
            k = min(chunk, left)
            b = score_batch(model, incontrol_source(k, rng))
            lat.append(b.latent_stat)
            res.append(b.residual_stat)
            left -= k
        lat, res = np.concatenate(lat), np.concatenate(res)
    else:
        samples = np.asarray(incontrol_source, dtype=float)
        if runs < samples.shape[0]:
            samples = samples[rng.choice(samples.shape[0], size=int(runs), replace=False)]
        b = score_batch(model, samples)
        lat, res = b.latent_stat, b.residual_stat
    N = lat.size
    if N * rate / 2.0 < 20:
        raise CalibrationError(
            f"{N} in-control samples give fewer than 20 expected exceedances per chart at ARL0={target_arl0}"
        )
    tl, tr = _union_limits(lat, res, rate)
    return ControlLimits(float(tl), float(tr), alpha=rate, method="monte_carlo", target_arl0=float(target_arl0))


def run_length(model: FittedModel, limits: ControlLimits, stream, change_point: int = 0):
    """1-based index, counted from ``change_point``, of the first alarm at or after it.

    Returns :class:`Censored` when nothing alarms before the stream ends.
    """
    stream = np.atleast_2d(np.asarray(stream, dtype=float))
    if stream.shape[0] == 0 or stream.size == 0:
        raise InputError("empty stream")
    if change_point < 0:
        raise InputError("change_point must be non-negative")
    tail = stream[change_point:]
    if tail.shape[0] == 0:
        return Censored(0)
    lat, res = score_batch(model, tail).alarms(limits)
    hits = np.flatnonzero(lat | res)
    if hits.size == 0:
        return Censored(tail.shape[0])
    return int(hits[0]) + 1


def simulate_run_length(model: FittedModel, limits: ControlLimits, sampler: Callable, rng,
                        max_length: int = 20000, chunk: int = 256):
    """Draw from ``sampler(count, rng)`` in chunks until the first alarm."""
    seen = 0
    while seen < max_length:
        k = min(chunk, max_length - seen)
        lat, res = score_batch(model, sampler(k, rng)).alarms(limits)
        hits = np.flatnonzero(lat | res)
        if hits.size:
            return seen + int(hits[0]) + 1
        seen += k
    return Censored(seen)


def model_sampler(model: FittedModel) -> Callable:
    """In-control sampler implied by the fitted model itself.

    Draws x = center + <A> z + e with z ~ N(0, Phi^-1) and e ~ N(0, I/<gamma>),
    for Monte Carlo calibration when no Phase-I data are at hand.
    """
    M = model.loadings
    sd_z = 1.0 / np.sqrt(model.state.phi)
    sd_e = 1.0 / math.sqrt(model.state.gamma_mean)

    def draw(count: int, rng) -> np.ndarray:
        z = rng.standard_normal((count, M.shape[1])) * sd_z
        return model.center + z @ M.T + sd_e * rng.standard_normal((count, M.shape[0]))

    return draw


def parse_limits_spec(spec: str):
    """Parse ``chi2:<alpha>``, ``arl0:<target>:mc`` or ``file:<path>``.

    Returns ``(kind, value)`` with kind one of "chi2", "mc", "file".
    """
    parts = str(spec).split(":")
    try:
        if parts[0] == "chi2" and len(parts) == 2:
            alpha = float(parts[1])
            if not 0 < alpha < 1:
                raise ValueError
            return "chi2", alpha
        if parts[0] == "arl0" and len(parts) == 3 and parts[2] == "mc":
            target = float(parts[1])
            if not target > 1:
                raise ValueError
            return "mc", target
        if parts[0] == "file" and len(parts) >= 2:
            return "file", ":".join(parts[1:])
    except ValueError:
        pass
    raise InputError(f"bad limits spec {spec!r}; use chi2:<alpha>, arl0:<target>:mc or file:<path>")


def limits_to_dict(limits: ControlLimits) -> dict:
    return {
        "latent_limit": limits.latent_limit,
        "residual_limit": limits.residual_limit,
        "alpha": limits.alpha,
        "method": limits.method,
        "target_arl0": limits.target_arl0,
    }


def limits_from_dict(d: dict) -> ControlLimits:
    try:
        return ControlLimits(**d)
    except TypeError as exc:
        raise InputError(f"bad limits document: {exc}") from None
