"""Domain types, prior densities and special-function kernels.

Everything in here is shared by the fitting, monitoring and diagnosis
modules.  Types are frozen dataclasses holding numpy arrays; update
functions elsewhere return new instances via :func:`dataclasses.replace`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import gammaln, kve

__all__ = [
    "InputError",
    "DomainError",
    "NumericError",
    "Dataset",
    "LatentPosterior",
    "LoadingPosterior",
    "ModelState",
    "VariantKind",
    "laplace_logpdf",
    "gig_mean",
    "gig_inv_mean",
    "gig_log_normalizer",
    "log_kve",
    "scale_mixture_marginal",
    "symmetrize",
]


class InputError(ValueError):
    """Malformed or inconsistent user input."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value or failed to converge."""


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Return (M + M^T)/2 over the last two axes."""
    return 0.5 * (m + np.swapaxes(m, -1, -2))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Centered n x p data matrix plus the vector that was subtracted."""

    values: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        center = np.asarray(self.center, dtype=float)
        if values.ndim != 2:
            raise InputError(f"values must be 2-D, got shape {values.shape}")
        n, p = values.shape
        if n < 2 or p < 1:
            raise InputError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if center.shape != (p,):
            raise InputError(f"center must have shape ({p},), got {center.shape}")
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise InputError(f"non-finite entry at row {bad[0]}, column {bad[1]}")
        if not np.all(np.isfinite(center)):
            raise InputError("non-finite entry in center")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "center", center)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_raw(cls, raw, center="median") -> "Dataset":
        """Center raw samples (rows) by their column mean or median.

        ``center`` may also be an explicit length-p vector.
        """
        raw = np.asarray(raw, dtype=float)
        if raw.ndim != 2:
            raise InputError(f"raw data must be 2-D, got shape {raw.shape}")
        if isinstance(center, str):
            if center == "mean":
                c = raw.mean(axis=0)
            elif center == "median":
                c = np.median(raw, axis=0)
            else:
                raise InputError(f"unknown centering rule {center!r}")
        else:
            c = np.asarray(center, dtype=float)
        return cls(raw - c, c)

    def raw(self) -> np.ndarray:
        """Undo the centering."""
        return self.values + self.center


@dataclass(frozen=True)
class LatentPosterior:
    """Gaussian posterior of one latent vector z_t."""

    mean: np.ndarray
    covariance: np.ndarray


@dataclass(frozen=True)
class LoadingPosterior:
    """Row-wise Gaussian posterior of the loading matrix.

    ``row_covariance`` has shape (p, q, q); row i holds Sigma_{A_i}.  The
    rows coincide whenever the prior precision field is constant.
    """

    mean_rows: np.ndarray
    row_covariance: np.ndarray

    @property
    def second_moment(self) -> np.ndarray:
        """<A^T A> = sum_i (<A_i><A_i>^T + Sigma_{A_i})."""
        return self.mean_rows.T @ self.mean_rows + self.row_covariance.sum(axis=0)


class VariantKind(str, enum.Enum):
    """Which of the two Laplacian priors are active."""

    ROBUST_SPARSE = "rs"
    SPARSE_ONLY = "sparse"
    ROBUST_ONLY = "robust"
    CLASSICAL = "classical"

    @property
    def sparse(self) -> bool:
        return self in (VariantKind.ROBUST_SPARSE, VariantKind.SPARSE_ONLY)

    @property
    def robust(self) -> bool:
        return self in (VariantKind.ROBUST_SPARSE, VariantKind.ROBUST_ONLY)

    @classmethod
    def parse(cls, value) -> "VariantKind":
        if isinstance(value, cls):
            return value
        aliases = {
            "rs": cls.ROBUST_SPARSE,
            "rspca": cls.ROBUST_SPARSE,
            "robustsparse": cls.ROBUST_SPARSE,
            "robust_sparse": cls.ROBUST_SPARSE,
            "sparse": cls.SPARSE_ONLY,
            "sparseonly": cls.SPARSE_ONLY,
            "sparse_only": cls.SPARSE_ONLY,
            "robust": cls.ROBUST_ONLY,
            "robustonly": cls.ROBUST_ONLY,
            "robust_only": cls.ROBUST_ONLY,
            "classical": cls.CLASSICAL,
            "pca": cls.CLASSICAL,
        }
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise InputError(f"unknown variant {value!r}") from None


@dataclass(frozen=True)
class ModelState:
    """All variational factors and point-estimated hyperparameters.

    The mixing precisions Lambda_ij and Gamma_t have GIG posteriors with
    index -1/2; besides their means we keep the (chi, psi) parameters so
    the ELBO can be evaluated for a stale factor.  Convention for both:
    density proportional to x^{-3/2} exp(-(chi/x + psi*x)/2).
    """

    loading: LoadingPosterior
    latent_mean: np.ndarray  # (n, q)
    latent_cov: np.ndarray  # (n, q, q)
    lambda_field: np.ndarray  # (p, q), <Lambda_ij>
    lambda_chi: np.ndarray  # (p, q)
    lambda_psi: np.ndarray  # (p, q)
    lambda_hyper: float
    gamma_post: tuple  # (a, b)
    gamma_weights: np.ndarray  # (n,), <Gamma_t>
    gamma_chi: np.ndarray  # (n,)
    gamma_psi: np.ndarray  # (n,)
    phi: np.ndarray  # (q,)
    elbo_trace: tuple = field(default_factory=tuple)
    warnings: tuple = field(default_factory=tuple)

    @property
    def gamma_mean(self) -> float:
        a, b = self.gamma_post
        return a / b

    @property
    def p(self) -> int:
        return self.loading.mean_rows.shape[0]

    @property
    def q(self) -> int:
        return self.loading.mean_rows.shape[1]

    @property
    def n(self) -> int:
        return self.latent_mean.shape[0]

    @property
    def latent(self) -> list[LatentPosterior]:
        return [LatentPosterior(m, s) for m, s in zip(self.latent_mean, self.latent_cov)]


# ---------------------------------------------------------------------------
# Densities and Bessel kernels
# ---------------------------------------------------------------------------


def laplace_logpdf(value, scale_param, convention="loading"):
    """Log density of the Laplacian priors on loadings and on noise.

    ``convention="loading"``: ln sqrt(1/(2 lam)) - sqrt(2/lam) |v|.
    ``convention="noise"``:   ln sqrt(gam/2)    - sqrt(2 gam) |v|.
    """
    scale_param = np.asarray(scale_param, dtype=float)
    if np.any(scale_param <= 0) or not np.all(np.isfinite(scale_param)):
        raise DomainError(f"scale parameter must be positive, got {scale_param}")
    v = np.abs(np.asarray(value, dtype=float))
    if convention == "loading":
        out = 0.5 * np.log(1.0 / (2.0 * scale_param)) - np.sqrt(2.0 / scale_param) * v
    elif convention == "noise":
        out = 0.5 * np.log(scale_param / 2.0) - np.sqrt(2.0 * scale_param) * v
    else:
        raise DomainError(f"unknown convention {convention!r}")
    return out[()] if out.ndim == 0 else out


def log_kve(order, z):
    """log of the exponentially scaled Bessel function K_v(z) e^z.

    Falls back to the small-argument asymptote where ``kve`` overflows.
    """
    z = np.maximum(np.asarray(z, dtype=float), np.finfo(float).tiny)
    order = np.abs(np.asarray(order, dtype=float))
    with np.errstate(over="ignore", divide="ignore"):
        out = np.log(kve(order, z))
    bad = ~np.isfinite(out)
    if np.any(bad):
        o, zb = np.broadcast_arrays(order, z)
        o, zb = o[bad], zb[bad]
        approx = np.where(
            o > 1e-10,
            gammaln(np.maximum(o, 1e-300)) - np.log(2.0) + o * (np.log(2.0) - np.log(zb)),
            np.log(np.maximum(-np.log(zb / 2.0) - np.euler_gamma, np.finfo(float).tiny)),
        )
        out = np.array(out, dtype=float)
        out[bad] = approx + zb
    return out


def _check_gig(chi, psi):
    chi = np.asarray(chi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if np.any(chi <= 0) or np.any(psi <= 0):
        raise DomainError("GIG parameters chi and psi must be positive")
    return chi, psi


def gig_mean(omega, chi, psi):
    """Mean of GIG(omega, chi, psi): sqrt(chi/psi) K_{w+1}(s)/K_w(s), s = sqrt(chi psi).

    At omega = -1/2 the Bessel ratio is exactly one.
    """
    chi, psi = _check_gig(chi, psi)
    root = np.sqrt(chi / psi)
    if omega == -0.5:
        out = root
    else:
        s = np.sqrt(chi * psi)
        out = root * np.exp(log_kve(omega + 1.0, s) - log_kve(omega, s))
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite GIG mean")
    return out[()] if np.ndim(out) == 0 else out


def gig_inv_mean(omega, chi, psi):
    """E[1/X] for X ~ GIG(omega, chi, psi)."""
    chi, psi = _check_gig(chi, psi)
    s = np.sqrt(chi * psi)
    root = np.sqrt(psi / chi)
    if omega == -0.5:
        # K_{3/2}(s) / K_{1/2}(s) = 1 + 1/s
        out = root * (1.0 + 1.0 / s)
    else:
        out = root * np.exp(log_kve(omega - 1.0, s) - log_kve(omega, s))
    return out[()] if np.ndim(out) == 0 else out


def gig_log_normalizer(omega, chi, psi):
    """log of (psi/chi)^{w/2} / (2 K_w(sqrt(chi psi)))."""
    chi, psi = _check_gig(chi, psi)
    s = np.sqrt(chi * psi)
    if omega == -0.5:
        # K_{1/2}(s) = sqrt(pi / (2 s)) e^{-s}
        log_k = 0.5 * np.log(np.pi / (2.0 * s)) - s
    else:
        log_k = log_kve(omega, s) - s
    return 0.5 * omega * np.log(psi / chi) - np.log(2.0) - log_k


def scale_mixture_marginal(value, scale_param, which="loading"):
    """Marginal density of the two-level Gaussian / inverse-Gamma hierarchy.

    Integrates the Gaussian first level against the shape-1 inverse-Gamma
    hyper-prior on the mixing precision.  In both cases the variance
    v = 1/precision is exponential; substituting v = u^2 leaves a smooth
    integrand on (0, inf).
    """
    scale_param = float(scale_param)
    if scale_param <= 0:
        raise DomainError(f"scale parameter must be positive, got {scale_param}")
    v = float(value)
    if which == "loading":
        # Lambda ~ InvGamma(1, 1/lam)  =>  var = 1/Lambda ~ Exp(rate 1/lam)
        rate = 1.0 / scale_param
    elif which == "noise":
        # precision 2*gam*Gamma, Gamma ~ InvGamma(1, 1/2)  =>  var ~ Exp(rate gam)
        rate = scale_param
    else:
        raise DomainError(f"unknown hierarchy {which!r}")

    # N(v; 0, u^2) * rate exp(-rate u^2) * 2u du
    def integrand(u):
        if u == 0.0:
            return 0.0
        return np.sqrt(2.0 / np.pi) * rate * np.exp(-0.5 * v * v / (u * u) - rate * u * u)

    # split at the integrand's peak so quad resolves it
    peak = (0.5 * v * v / rate) ** 0.25 if v != 0 else 0.0
    tail = peak + 40.0 / np.sqrt(rate)
    pieces = [(0.0, peak), (peak, tail)] if peak > 0 else [(0.0, tail)]
    total = 0.0
    for lo, hi in pieces:
        val, err, info = integrate.quad(integrand, lo, hi, epsabs=1e-14, epsrel=1e-12, limit=200, full_output=1)[:3]
        if info["last"] >= 200 or not np.isfinite(val):
            raise NumericError(
                f"quadrature did not converge on [{lo}, {hi}] (value={val}, abserr={err}, "
                f"subintervals={info['last']})"
            )
        total += val
    rest, err = integrate.quad(integrand, tail, np.inf, epsabs=1e-15)
    return total + rest
