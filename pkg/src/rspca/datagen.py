"""Synthetic data: block-sparse latent model with outliers, and surrogate spectra.

The block model follows the classic sparse-robust PCA benchmark: two large
blocks of ``b`` correlated variables driven by high-variance latents, every
remaining variable its own singleton block, and a fraction ``delta`` of the
rows replaced by structure-free Gaussian outliers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, InputError

OUTLIER_BLOCK_PATTERN = (0.0, -4.0, 4.0, 2.0, 0.0, 4.0, -4.0, 2.0)
OUTLIER_TAIL_PATTERN = (3.0, -3.0)
OUTLIER_SCALE = 25.0


def n_blocks(p: int, b: int) -> int:
    return p - 2 * b + 2


def default_latent_variances(K: int) -> np.ndarray:
    """[233, 49, 4 x ..., 2 x ..., 0.4 x ...] in the 422:19:19 proportions of p=500."""
    m = K - 2
    if m < 0:
        raise InputError("need at least two latent blocks")
    n4 = int(round(m * 422 / 460))
    n2 = int(round((m - n4) / 2))
    n04 = m - n4 - n2
    return np.concatenate([[233.0, 49.0], np.full(n4, 4.0), np.full(n2, 2.0), np.full(n04, 0.4)])


def default_outlier_mean(p: int, b: int, restart_tile: bool = True) -> np.ndarray:
    """25 * (0,-4,4,2,0,4,-4,2, ... over the two blocks, then 3,-3,...).

    With ``restart_tile`` the 8-pattern starts afresh at block 2.
    """
    pat = np.asarray(OUTLIER_BLOCK_PATTERN)
    if restart_tile:
        head = np.concatenate([np.resize(pat, b), np.resize(pat, b)])
    else:
        head = np.resize(pat, 2 * b)
    tail = np.resize(np.asarray(OUTLIER_TAIL_PATTERN), p - 2 * b)
    return OUTLIER_SCALE * np.concatenate([head, tail])


@dataclass(frozen=True)
class SimConfig:
    p: int
    b: int
    n: int
    delta: float = 0.0
    latent_variances: np.ndarray = None
    outlier_mean: np.ndarray = None
    outlier_variance: float = 20.0
    noise_variance: float = 1.0
    seed: int = 0
    restart_tile: bool = True

    def __post_init__(self):
        p, b = int(self.p), int(self.b)
        if not (p > 2 * b >= 2):
            raise InputError(f"need p > 2b >= 2, got p={p}, b={b}")
        K = n_blocks(p, b)
        lv = self.latent_variances
        lv = default_latent_variances(K) if lv is None else np.asarray(lv, dtype=float)
        if lv.shape != (K,):
            raise InputError(f"latent_variances must have length K={K}, got {lv.shape}")
        if np.any(lv <= 0):
            raise InputError("latent variances must be positive")
        if K > 2 and min(lv[0], lv[1]) <= lv[2:].max():
            raise InputError("the first two latent variances must dominate the rest")
        mu = self.outlier_mean
        mu = default_outlier_mean(p, b, self.restart_tile) if mu is None else np.asarray(mu, dtype=float)
        if mu.shape != (p,):
            raise InputError(f"outlier_mean must have length p={p}")
        if not 0.0 <= self.delta < 1.0:
            raise InputError(f"delta must lie in [0, 1), got {self.delta}")
        if self.outlier_variance <= 0 or self.noise_variance <= 0:
            raise InputError("variances must be positive")
        if self.n < 2:
            raise InputError("n must be at least 2")
        object.__setattr__(self, "latent_variances", lv)
        object.__setattr__(self, "outlier_mean", mu)

    @property
    def K(self) -> int:
        return n_blocks(self.p, self.b)

    @classmethod
    def full(cls, n: int = 500, delta: float = 0.1, seed: int = 0, **kw) -> "SimConfig":
        return cls(p=500, b=20, n=n, delta=delta, seed=seed, **kw)

    @classmethod
    def desk(cls, n: int = 500, delta: float = 0.1, seed: int = 0, **kw) -> "SimConfig":
        return cls(p=100, b=10, n=n, delta=delta, seed=seed, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["latent_variances"] = self.latent_variances.tolist()
        d["outlier_mean"] = self.outlier_mean.tolist()
        return d


def make_block_loadings(p: int, b: int) -> np.ndarray:
    """p x K loading matrix with entries -1/sqrt(block size) on each block."""
    p, b = int(p), int(b)
    if not (p > 2 * b >= 2):
        raise InputError(f"need p > 2b >= 2, got p={p}, b={b}")
    K = n_blocks(p, b)
    A = np.zeros((p, K))
    A[:b, 0] = -1.0 / np.sqrt(b)
    A[b : 2 * b, 1] = -1.0 / np.sqrt(b)
    rows = np.arange(2 * b, p)
    A[rows, rows - 2 * b + 2] = -1.0
    return A


def block_mask(p: int, b: int) -> np.ndarray:
    return make_block_loadings(p, b) != 0


@dataclass(frozen=True)
class GroundTruth:
    loadings: np.ndarray
    outlier_flags: np.ndarray
    latent_cov: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.loadings != 0


def _inlier_rows(config: SimConfig, A: np.ndarray, rng, count: int, shift: float = 0.0) -> np.ndarray:
    sd = np.sqrt(config.latent_variances)
    z = rng.standard_normal((count, config.K)) * sd
    z[:, 0] += shift * sd[0]
    noise = rng.standard_normal((count, config.p)) * np.sqrt(config.noise_variance)
    return z @ A.T + noise


def generate_raw(config: SimConfig):
    """Raw (uncentered) samples plus ground truth."""
    rng = np.random.default_rng(config.seed)
    A = make_block_loadings(config.p, config.b)
    x = _inlier_rows(config, A, rng, config.n)
    n_out = int(round(config.delta * config.n))
    flags = np.zeros(config.n, dtype=bool)
    if n_out:
        idx = rng.choice(config.n, size=n_out, replace=False)
        flags[idx] = True
        x[idx] = config.outlier_mean + rng.standard_normal((n_out, config.p)) * np.sqrt(config.outlier_variance)
    truth = GroundTruth(A, flags, np.diag(config.latent_variances))
    return x, truth


def generate_dataset(config: SimConfig, center="median"):
    """Contaminated training set as a centered :class:`Dataset` plus ground truth."""
    x, truth = generate_raw(config)
    return Dataset.from_raw(x, center=center), truth


def generate_oc_stream(config: SimConfig, shift_sd: float, length: int, seed: int, A_true=None) -> np.ndarray:
    """Outlier-free monitoring stream with z_1 shifted by ``shift_sd`` standard deviations."""
    if shift_sd < 0:
        raise InputError("shift_sd must be non-negative")
    if length < 1:
        raise InputError("length must be positive")
    A = make_block_loadings(config.p, config.b) if A_true is None else np.asarray(A_true)
    rng = np.random.default_rng(seed)
    return _inlier_rows(config, A, rng, int(length), shift=float(shift_sd))


# ---------------------------------------------------------------------------
# surrogate Raman-like profiles
# ---------------------------------------------------------------------------


def _default_segments():
    # (start, end, peak_height, peak_width), 1-based inclusive bins
    return ((60, 110, 6.0, 6.0), (230, 280, 5.0, 6.0), (390, 440, 8.0, 6.0))


@dataclass(frozen=True)
class ProfileConfig:
    length: int = 512
    segments: tuple = field(default_factory=_default_segments)
    noise_base: float = 0.2
    signal_noise_coeff: float = 0.05
    amplitude_sd: float = 0.3
    outlier_rate: float = 0.2
    outlier_noise_mult: float = 8.0
    defect_shift: tuple = (0.4, 0.4, 0.4)
    seed: int = 0

    def __post_init__(self):
        segs = tuple(tuple(float(v) for v in s) for s in self.segments)
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "defect_shift", tuple(float(v) for v in self.defect_shift))
        last = 0
        for start, end, height, width in sorted(segs):
            if not (1 <= start <= end <= self.length):
                raise InputError(f"segment ({start}, {end}) outside [1, {self.length}]")
            if start <= last:
                raise InputError("segments overlap")
            if width <= 0:
                raise InputError("peak width must be positive")
            last = end
        if len(self.defect_shift) != len(segs):
            raise InputError("need one defect shift per segment")
        if self.noise_base <= 0 or self.signal_noise_coeff < 0 or self.amplitude_sd < 0:
            raise InputError("noise parameters out of range")
        if not 0 <= self.outlier_rate < 1:
            raise InputError("outlier_rate must lie in [0, 1)")
        if self.outlier_noise_mult <= 1:
            raise InputError("outlier_noise_mult must exceed 1")

    def segment_slice(self, k: int) -> slice:
        start, end = self.segments[k][:2]
        return slice(int(start) - 1, int(end))

    def segment_mask(self, k: int) -> np.ndarray:
        m = np.zeros(self.length, dtype=bool)
        m[self.segment_slice(k)] = True
        return m

    def bumps(self) -> np.ndarray:
        """(n_segments, length) unit-height peak shapes."""
        grid = np.arange(1, self.length + 1, dtype=float)
        out = np.zeros((len(self.segments), self.length))
        for k, (start, end, _, width) in enumerate(self.segments):
            centre = 0.5 * (start + end)
            shape = np.exp(-0.5 * ((grid - centre) / width) ** 2)
            shape[(grid < start) | (grid > end)] = 0.0
            out[k] = shape
        return out

    def baseline(self) -> np.ndarray:
        heights = np.array([s[2] for s in self.segments])
        return heights @ self.bumps()


def generate_profile_stream(config: ProfileConfig, defect=None, length_n: int = 100, seed=None,
                            outliers: bool = True) -> np.ndarray:
    """Ordered profiles (rows).

    Peak heights fluctuate by ``amplitude_sd`` (relative) from sample to
    sample, giving one sparse latent direction per segment.  Noise standard
    deviation is ``noise_base + signal_noise_coeff * |signal|``; outlier
    profiles have it multiplied by ``outlier_noise_mult``.  ``defect=k``
    raises the mean of every bin in segment k by ``defect_shift[k]``.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    bumps = config.bumps()
    heights = np.array([s[2] for s in config.segments])
    amp = heights * (1.0 + config.amplitude_sd * rng.standard_normal((length_n, len(heights))))
    signal = amp @ bumps
    if defect is not None:
        k = int(defect)
        if not 0 <= k < len(config.segments):
            raise InputError(f"defect segment {k} out of range")
        signal[:, config.segment_slice(k)] += config.defect_shift[k]
    sd = config.noise_base + config.signal_noise_coeff * np.abs(signal)
    if outliers and config.outlier_rate > 0:
        is_out = rng.random(length_n) < config.outlier_rate
        sd[is_out] *= config.outlier_noise_mult
    return signal + sd * rng.standard_normal(signal.shape)
