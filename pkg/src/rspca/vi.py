"""Coordinate-ascent variational fitting of robust sparse probabilistic PCA.

Generative model (per sample t, variables i, components j)::

    x_t | z_t, A, Gamma_t, gamma ~ N(A z_t, (gamma Gamma_t)^-1 I_p)
    z_t ~ N(0, Phi^-1)
    A_ij | Lambda_ij ~ N(0, Lambda_ij^-1)
    Lambda_ij ~ InvGamma(1, 1/lam)            (Laplace marginal on A_ij)
    Gamma_t ~ InvGamma((p + 1)/2, p/2)         (heavy-tailed sample weights)
    gamma ~ Gamma(a0, b0)

The variational family factorises over z_t, rows A_i, Lambda_ij, Gamma_t
and gamma; lam is a point estimate.  Every update below is the exact
coordinate maximiser of :func:`elbo` unless ``literal_paper_updates`` is
set, in which case the printed forms of the loading-mean, precision-field
and residual-trace updates are used instead.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .core import (
    Dataset,
    InputError,
    LoadingPosterior,
    ModelState,
    NumericError,
    VariantKind,
    gig_inv_mean,
    gig_log_normalizer,
    gig_mean,
    symmetrize,
)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FitConfig:
    q: int
    variant: VariantKind = VariantKind.ROBUST_SPARSE
    max_sweeps: int = 500
    rel_tol: float = 1e-6
    gamma_prior: tuple = (1e-3, 1e-3)
    lambda_init: float = 1.0
    phi_value: float = 1.0
    ridge: float = 1e-8
    seed: int = 0
    literal_paper_updates: bool = False
    loading_tol: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "variant", VariantKind.parse(self.variant))
        object.__setattr__(self, "gamma_prior", tuple(float(v) for v in self.gamma_prior))
        if int(self.q) < 1:
            raise InputError(f"q must be >= 1, got {self.q}")
        if self.max_sweeps < 1:
            raise InputError("max_sweeps must be positive")
        for name in ("rel_tol", "lambda_init", "phi_value", "ridge", "loading_tol"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if len(self.gamma_prior) != 2 or min(self.gamma_prior) <= 0:
            raise InputError("gamma_prior must be a positive (a0, b0) pair")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        d["gamma_prior"] = list(self.gamma_prior)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise InputError(f"unknown fit config keys: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class FittedModel:
    state: ModelState
    center: np.ndarray
    config: FitConfig
    converged: bool
    sweeps_used: int

    @property
    def p(self) -> int:
        return self.state.p

    @property
    def q(self) -> int:
        return self.state.q

    @property
    def n(self) -> int:
        return self.state.n

    @property
    def loadings(self) -> np.ndarray:
        return self.state.loading.mean_rows


# ---------------------------------------------------------------------------
# linear algebra helpers
# ---------------------------------------------------------------------------


def spd_inverse(m: np.ndarray, ridge: float, warnings: list | None = None) -> np.ndarray:
    """Invert a (stack of) symmetric positive-definite matrices.

    On a failed Cholesky factorisation the diagonal jitter is escalated by
    factors of ten from ``ridge`` up to 1e-4.
    """
    m = symmetrize(m)
    eye = np.eye(m.shape[-1])
    jitter = 0.0
    while True:
        try:
            np.linalg.cholesky(m + jitter * eye)
            break
        except np.linalg.LinAlgError:
            jitter = ridge if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-4:
                raise NumericError("matrix not positive definite even with 1e-4 jitter") from None
            if warnings is not None:
                warnings.append(f"added jitter {jitter:g} to a singular precision matrix")
    return symmetrize(np.linalg.inv(m + jitter * eye))


def _logdet(m: np.ndarray) -> np.ndarray:
    sign, ld = np.linalg.slogdet(m)
    if np.any(sign <= 0):
        raise NumericError("covariance lost positive definiteness")
    return ld


# ---------------------------------------------------------------------------
# expected squared residuals
# ---------------------------------------------------------------------------


def expected_sq_residuals(state: ModelState, data: Dataset, include_loading_cov: bool = True) -> np.ndarray:
    """E||x_t - A z_t||^2 under the current factors, one value per sample.

    With ``include_loading_cov=False`` the loading is held at its mean,
    which is the printed form of the residual trace.
    """
    M = state.loading.mean_rows
    m = state.latent_mean
    S = state.latent_cov
    resid = data.values - m @ M.T
    out = np.einsum("ti,ti->t", resid, resid)
    out += np.einsum("tjk,kj->t", S, M.T @ M)
    if include_loading_cov:
        sa = state.loading.row_covariance.sum(axis=0)
        second = S + m[:, :, None] * m[:, None, :]
        out += np.einsum("tjk,kj->t", second, sa)
    return out


# ---------------------------------------------------------------------------
# initialisation and coordinate updates
# ---------------------------------------------------------------------------


def ppca_solution(values: np.ndarray, q: int, ridge: float = 1e-8):
    """Closed-form maximum-likelihood PPCA: (W, sigma2) with z ~ N(0, I)."""
    n, p = values.shape
    _, s, vt = np.linalg.svd(values, full_matrices=False)
    evals = s**2 / n
    if evals.size < p:
        evals = np.concatenate([evals, np.zeros(p - evals.size)])
    evals = np.maximum(evals, ridge)
    if q < p:
        sigma2 = max(float(evals[q:].mean()), ridge)
    else:
        sigma2 = ridge
    vecs = vt[:q].T
    # sign convention: largest-magnitude entry of each column positive
    idx = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[idx, np.arange(q)])
    W = vecs * np.sqrt(np.maximum(evals[:q] - sigma2, ridge))
    return W, sigma2


def initialize(data: Dataset, config: FitConfig) -> ModelState:
    """PPCA start: loadings, noise precision and one latent pass."""
    n, p = data.n, data.p
    q = int(config.q)
    if q > min(n, p):
        raise InputError(f"q={q} exceeds min(n, p)={min(n, p)}")
    variant = config.variant
    W, sigma2 = ppca_solution(data.values, q, config.ridge)
    W = W / math.sqrt(config.phi_value)
    a0, b0 = config.gamma_prior
    a = a0 + 0.5 * n * p
    b = a * sigma2

    lam = float(config.lambda_init)
    if variant.sparse:
        lam_field = np.full((p, q), lam)
        lam_chi = np.full((p, q), 2.0 / lam)
        lam_psi = lam_chi / lam**2
    else:
        lam_field = np.full((p, q), config.ridge)
        lam_chi = np.ones((p, q))
        lam_psi = np.ones((p, q))

    state = ModelState(
        loading=LoadingPosterior(W, np.zeros((p, q, q))),
        latent_mean=np.zeros((n, q)),
        latent_cov=np.broadcast_to(np.eye(q), (n, q, q)).copy(),
        lambda_field=lam_field,
        lambda_chi=lam_chi,
        lambda_psi=lam_psi,
        lambda_hyper=lam,
        gamma_post=(a, b),
        gamma_weights=np.ones(n),
        gamma_chi=np.full(n, float(p)),
        gamma_psi=np.full(n, float(p)),
        phi=np.full(q, float(config.phi_value)),
    )
    state = update_latent(state, data, config)
    # loading covariance consistent with the PPCA means
    state = _loading_covariance_only(state, data, config)
    return dataclasses.replace(state, elbo_trace=(elbo(state, data, config),))


def update_latent(state: ModelState, data: Dataset, config: FitConfig) -> ModelState:
    """Gaussian factor of each z_t given loadings, weights and noise precision."""
    warnings: list = []
    g = state.gamma_mean
    coef = g * state.gamma_weights  # (n,)
    AtA = state.loading.second_moment
    prec = np.diag(state.phi)[None] + coef[:, None, None] * AtA[None]
    S = spd_inverse(prec, config.ridge, warnings)
    proj = data.values @ state.loading.mean_rows  # (n, q) = <A>^T x_t
    m = coef[:, None] * np.einsum("tjk,tk->tj", S, proj)
    return dataclasses.replace(
        state, latent_mean=m, latent_cov=S, warnings=state.warnings + tuple(warnings)
    )


def _weighted_scatter(state: ModelState) -> np.ndarray:
    w = state.gamma_weights
    m = state.latent_mean
    return (m * w[:, None]).T @ m + np.einsum("t,tjk->jk", w, state.latent_cov)


def _loading_covariance_only(state: ModelState, data: Dataset, config: FitConfig) -> ModelState:
    scatter = state.gamma_mean * _weighted_scatter(state)
    prec = scatter[None] + np.einsum("ij,jk->ijk", state.lambda_field, np.eye(state.q))
    cov = spd_inverse(prec, config.ridge)
    return dataclasses.replace(state, loading=LoadingPosterior(state.loading.mean_rows, cov))


def update_loadings(state: ModelState, data: Dataset, config: FitConfig) -> ModelState:
    """Row-wise Gaussian factor of A.

    The weighted scatter sum_t <Gamma_t>(<z_t><z_t>^T + Sigma_{z_t}) is
    shared by all rows; rows differ only through diag(<Lambda_i>).
    """
    warnings: list = []
    g = state.gamma_mean
    scatter = g * _weighted_scatter(state)
    prec = scatter[None] + np.einsum("ij,jk->ijk", state.lambda_field, np.eye(state.q))
    cov = spd_inverse(prec, config.ridge, warnings)
    if config.literal_paper_updates:
        cross = data.values.T @ state.latent_mean
    else:
        cross = data.values.T @ (state.latent_mean * state.gamma_weights[:, None])
    mean = g * np.einsum("ijk,ik->ij", cov, cross)
    return dataclasses.replace(
        state, loading=LoadingPosterior(mean, cov), warnings=state.warnings + tuple(warnings)
    )


def _loading_energy(state: ModelState, ridge: float) -> np.ndarray:
    M = state.loading.mean_rows
    diag = np.einsum("ijj->ij", state.loading.row_covariance)
    return np.maximum(M**2 + diag, ridge)


def update_lambda_field(state: ModelState, config: FitConfig) -> ModelState:
    """GIG factor of the loading precisions Lambda_ij.

    Exact update: GIG(-1/2, chi=2/lam, psi=l_ij), mean sqrt(2 / (lam l_ij)),
    where l_ij = <A_ij>^2 + (Sigma_{A_i})_jj.  The literal form swaps the
    roles of chi and psi, giving sqrt(lam l_ij / 2).
    """
    if not config.variant.sparse:
        return state
    l = _loading_energy(state, config.ridge)
    lam = state.lambda_hyper
    if config.literal_paper_updates:
        chi, psi = l, np.full_like(l, 2.0 / lam)
    else:
        chi, psi = np.full_like(l, 2.0 / lam), l
    field = gig_mean(-0.5, chi, psi)
    return dataclasses.replace(state, lambda_field=field, lambda_chi=chi, lambda_psi=psi)


def update_lambda_hyper(state: ModelState, config: FitConfig) -> ModelState:
    """Point update of the Laplace scale lam.

    The maximiser of the ELBO is the average prior variance
    E[1/Lambda_ij]; the literal form averages <Lambda_ij> directly.
    """
    if not config.variant.sparse:
        return state
    if config.literal_paper_updates:
        lam = float(np.mean(state.lambda_field))
    else:
        lam = float(np.mean(gig_inv_mean(-0.5, state.lambda_chi, state.lambda_psi)))
    return dataclasses.replace(state, lambda_hyper=lam)


def update_noise(state: ModelState, data: Dataset, config: FitConfig) -> ModelState:
    """Sample weights <Gamma_t> followed by the Gamma factor of gamma."""
    n, p = data.n, data.p
    literal = config.literal_paper_updates
    R = expected_sq_residuals(state, data, include_loading_cov=not literal)
    if not np.all(np.isfinite(R)):
        bad = int(np.argmax(~np.isfinite(R)))
        raise NumericError(f"non-finite residual energy at sample {bad}")
    R = np.maximum(R, p * config.ridge)
    if config.variant.robust:
        g = state.gamma_mean
        chi = np.full(n, float(p))
        psi = g * R
        weights = gig_mean(-0.5, chi, psi)  # = sqrt(1 / (g * R / p))
        state = dataclasses.replace(state, gamma_weights=weights, gamma_chi=chi, gamma_psi=psi)
    a0, b0 = config.gamma_prior
    a = a0 + 0.5 * n * p
    b = b0 + 0.5 * float(np.dot(state.gamma_weights, R))
    return dataclasses.replace(state, gamma_post=(a, b))


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------


def elbo_terms(state: ModelState, data: Dataset, config: FitConfig) -> dict:
    """Individual contributions to the evidence lower bound."""
    n, p, q = data.n, data.p, state.q
    a, b = state.gamma_post
    g = a / b
    elng = digamma(a) - math.log(b)
    w = state.gamma_weights
    R = expected_sq_residuals(state, data)
    t = {}
    t["likelihood"] = 0.5 * n * p * (elng - LOG_2PI) - 0.5 * g * float(np.dot(w, R))

    m, S = state.latent_mean, state.latent_cov
    phi = state.phi
    t["latent_prior"] = n * 0.5 * (np.sum(np.log(phi)) - q * LOG_2PI) - 0.5 * float(
        np.sum(phi * (m**2 + np.einsum("tjj->tj", S)))
    )
    t["latent_entropy"] = 0.5 * float(np.sum(_logdet(S))) + 0.5 * n * q * (1.0 + LOG_2PI)

    M = state.loading.mean_rows
    l = M**2 + np.einsum("ijj->ij", state.loading.row_covariance)
    t["loading_prior"] = -0.5 * p * q * LOG_2PI - 0.5 * float(np.sum(state.lambda_field * l))
    if not config.variant.sparse:
        # pinned precision: the E[ln Lambda] term is a constant that does not cancel
        t["loading_prior"] += 0.5 * float(np.sum(np.log(state.lambda_field)))
    t["loading_entropy"] = 0.5 * float(np.sum(_logdet(state.loading.row_covariance))) + 0.5 * p * q * (
        1.0 + LOG_2PI
    )

    # E[ln Lambda] and E[ln Gamma] terms cancel between prior, likelihood and
    # entropy because every GIG factor has index -1/2.
    if config.variant.sparse:
        lam = state.lambda_hyper
        chi, psi = state.lambda_chi, state.lambda_psi
        inv_mean = gig_inv_mean(-0.5, chi, psi)
        t["precision_prior"] = float(np.sum(-math.log(lam) - inv_mean / lam))
        t["precision_entropy"] = float(
            np.sum(-gig_log_normalizer(-0.5, chi, psi) + 0.5 * (chi * inv_mean + psi * state.lambda_field))
        )
    if config.variant.robust:
        alpha, beta = 0.5 * (p + 1), 0.5 * p
        chi, psi = state.gamma_chi, state.gamma_psi
        inv_mean = gig_inv_mean(-0.5, chi, psi)
        t["weight_prior"] = float(np.sum(alpha * math.log(beta) - gammaln(alpha) - beta * inv_mean))
        t["weight_entropy"] = float(
            np.sum(-gig_log_normalizer(-0.5, chi, psi) + 0.5 * (chi * inv_mean + psi * w))
        )

    a0, b0 = config.gamma_prior
    t["noise_prior"] = a0 * math.log(b0) - gammaln(a0) + (a0 - 1.0) * elng - b0 * g
    t["noise_entropy"] = a - math.log(b) + gammaln(a) + (1.0 - a) * digamma(a)
    for k, v in t.items():
        if not np.isfinite(v):
            raise NumericError(f"ELBO term {k!r} is not finite")
    return t


def elbo(state: ModelState, data: Dataset, config: FitConfig) -> float:
    """Evidence lower bound E_g[ln p(x, theta)] - E_g[ln g(theta)]."""
    return float(sum(elbo_terms(state, data, config).values()))


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def sweep(state: ModelState, data: Dataset, config: FitConfig) -> ModelState:
    """One pass: latent -> Lambda -> lam -> loadings -> (Gamma, gamma)."""
    state = update_latent(state, data, config)
    state = update_lambda_field(state, config)
    state = update_lambda_hyper(state, config)
    state = update_loadings(state, data, config)
    state = update_noise(state, data, config)
    return state


def fit(data: Dataset, config: FitConfig, state: ModelState | None = None) -> FittedModel:
    """Run sweeps until the relative ELBO change drops below ``rel_tol``.

    Also stops when no loading mean moves by more than ``loading_tol``.
    Hitting ``max_sweeps`` is not an error; ``converged`` is then False.
    """
    if state is None:
        state = initialize(data, config)
    trace = list(state.elbo_trace) or [elbo(state, data, config)]
    converged = False
    sweeps = 0
    for sweeps in range(1, config.max_sweeps + 1):
        prev_loading = state.loading.mean_rows
        state = sweep(state, data, config)
        value = elbo(state, data, config)
        trace.append(value)
        rel = abs(value - trace[-2]) / max(abs(value), 1e-300)
        shift = float(np.max(np.abs(state.loading.mean_rows - prev_loading)))
        if rel < config.rel_tol or shift < config.loading_tol:
            converged = True
            break
    if not converged:
        log.warning("fit stopped after %d sweeps without converging", sweeps)
    state = dataclasses.replace(state, elbo_trace=tuple(trace))
    return FittedModel(state, data.center.copy(), config, converged, sweeps)


def default_center(variant) -> str:
    """Median centering for the robust variants, mean otherwise."""
    return "median" if VariantKind.parse(variant).robust else "mean"


def component_scale(model: FittedModel) -> np.ndarray:
    """Spread of each component's contribution to the training data.

    The columns of <A> are only identified up to scale, so the latent means
    are multiplied by the column norms first.  Robust variants use the
    median absolute deviation, which keeps a component that only describes
    a cluster of outlying rows from ranking first; the others use the
    standard deviation.
    """
    scores = model.state.latent_mean * np.linalg.norm(model.loadings, axis=0)
    if model.config.variant.robust:
        return np.median(np.abs(scores - np.median(scores, axis=0)), axis=0)
    return scores.std(axis=0)


def rank_components(model: FittedModel) -> np.ndarray:
    """Component indices by decreasing :func:`component_scale` (stable)."""
    return np.argsort(-component_scale(model), kind="stable")
