"""Simulation studies: subspace recovery, sparsity recovery and detection delay.

Each study is a grid of settings times a number of replicates.  A replicate
is a pure function of its setting and a seed derived from the master seed,
so replicates can run in any order, in parallel, and be resumed from their
checkpoint files.  Aggregation always walks replicates in index order.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Dataset, InputError
from .datagen import ProfileConfig, SimConfig, generate_oc_stream, generate_profile_stream, generate_raw
from .diagnosis import loading_mask
from .io import write_records
from .metrics import Censored, ExperimentResult, deviation_angle, match_columns, summarize_delays, threshold_mask, zero_measure
from .monitoring import calibrate_limits, simulate_run_length
from .vi import FitConfig, default_center, fit, rank_components

log = logging.getLogger(__name__)

VARIANTS = ("rs", "sparse", "robust", "classical")
STUDIES = ("table1", "figure4", "figure5", "table2")
DEFAULT_MASTER_SEED = 20240607
JOBS_ENV = "RSPCA_JOBS"
_STUDY_CODES = {name: k for k, name in enumerate(STUDIES)}


@dataclass(frozen=True)
class Scale:
    name: str
    p: int
    b: int
    replicates: int

    def sim(self, n: int, delta: float, seed: int) -> SimConfig:
        return SimConfig(p=self.p, b=self.b, n=n, delta=delta, seed=seed)


SCALES = {
    "full": Scale("full", 500, 20, 100),
    "desk": Scale("desk", 100, 10, 20),
}


def get_scale(name: str) -> Scale:
    try:
        return SCALES[name]
    except KeyError:
        raise InputError(f"unknown scale {name!r}; choose from {sorted(SCALES)}") from None


def replicate_seed(master: int, study: str, setting_index: int, replicate: int) -> int:
    """Independent 32-bit seed per (study, setting, replicate)."""
    ss = np.random.SeedSequence(int(master), spawn_key=(_STUDY_CODES[study], int(setting_index), int(replicate)))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def default_jobs() -> int:
    env = os.environ.get(JOBS_ENV)
    if env:
        try:
            jobs = int(env)
        except ValueError:
            raise InputError(f"{JOBS_ENV} must be an integer, got {env!r}") from None
        if jobs < 1:
            raise InputError(f"{JOBS_ENV} must be positive")
        return jobs
    return os.cpu_count() or 1


def fit_variant(raw: np.ndarray, variant: str, q: int, seed: int = 0, **fit_kw):
    data = Dataset.from_raw(raw, center=default_center(variant))
    return fit(data, FitConfig(q=q, variant=variant, seed=seed, **fit_kw))


def top_columns(model, k: int = 2) -> np.ndarray:
    return rank_components(model)[:k]


# ---------------------------------------------------------------------------
# single replicates
# ---------------------------------------------------------------------------


def table1_replicate(scale: Scale, delta: float, n: int, seed: int, q: int = 3, variants=VARIANTS) -> dict:
    """Deviation angle of the two leading components, per variant."""
    cfg = scale.sim(n, delta, seed)
    raw, truth = generate_raw(cfg)
    out = {}
    for v in variants:
        m = fit_variant(raw, v, q)
        cols = top_columns(m)
        out[v] = deviation_angle(m.loadings[:, cols], truth.loadings[:, :2])
    return out


def estimated_mask(model, true_cols: np.ndarray, alpha: float = 0.01) -> np.ndarray:
    """Zero / nonzero mask of the two leading components, aligned to the truth.

    The classical variant is a deterministic estimator and is thresholded at
    1e-5; the Bayesian variants use the per-entry t-test.
    """
    cols = top_columns(model, true_cols.shape[1])
    A = model.loadings[:, cols]
    order = match_columns(A, true_cols)
    if model.config.variant.value == "classical":
        mask = threshold_mask(A)
    else:
        mask = loading_mask(model, alpha)[:, cols]
    return mask[:, order]


def figure4_replicate(scale: Scale, delta: float, n: int, seed: int, q: int = 3, variants=VARIANTS,
                      alpha: float = 0.01) -> dict:
    """Total zero measure of the two leading components, per variant."""
    raw, truth = generate_raw(scale.sim(n, delta, seed))
    A_true = truth.loadings[:, :2]
    out = {}
    for v in variants:
        m = fit_variant(raw, v, q)
        out[v] = zero_measure(estimated_mask(m, A_true, alpha), A_true != 0)
    return out


def _encode_rl(rl) -> int:
    """Run length as a signed int: negative means censored after |value| samples."""
    return -int(rl.length) if isinstance(rl, Censored) else int(rl)


def _decode_rl(v: int):
    return Censored(-v) if v < 0 else int(v)


def figure5_replicate(scale: Scale, delta: float, seed: int, shifts=(0.0, 0.5, 1.0, 1.5, 2.0), runs: int = 5,
                      n: int = 500, q: int = 3, arl0: float = 200.0, calib_runs: int = 100_000,
                      max_length: int = 20_000, variants=VARIANTS) -> dict:
    """Run lengths after a shift of z_1 for each variant and shift.

    Limits are calibrated on outlier-free in-control data; the training set
    is contaminated.  Returns {variant: {shift: [encoded run lengths]}}.
    """
    cfg = scale.sim(n, delta, seed)
    raw, truth = generate_raw(cfg)
    seeds = np.random.default_rng(seed).integers(2**31, size=3)
    out = {}
    for v in variants:
        m = fit_variant(raw, v, q)
        source = lambda k, rng: generate_oc_stream(cfg, 0.0, k, int(rng.integers(2**31)), truth.loadings)
        limits = calibrate_limits(m, source, arl0, calib_runs, seed=int(seeds[0]))
        per_shift = {}
        for s_idx, shift in enumerate(shifts):
            rng = np.random.default_rng([int(seeds[1]), s_idx])
            sampler = lambda k, r, s=float(shift): generate_oc_stream(cfg, s, k, int(r.integers(2**31)), truth.loadings)
            per_shift[repr(float(shift))] = [
                _encode_rl(simulate_run_length(m, limits, sampler, rng, max_length=max_length))
                for _ in range(runs)
            ]
        out[v] = per_shift
    return out


def segment_isolation(model, config: ProfileConfig) -> list[float]:
    """Largest in-segment squared-loading fraction over components, per segment."""
    A = model.loadings
    total = np.maximum((A**2).sum(axis=0), 1e-300)
    return [float(np.max((A[config.segment_mask(k)] ** 2).sum(axis=0) / total)) for k in range(len(config.segments))]


def table2_replicate(profile: ProfileConfig, seed: int, ntrain: int = 60, q: int = 3, arl0: float = 200.0,
                     calib_runs: int = 50_000, runs: int = 1, max_length: int = 20_000, variants=VARIANTS) -> dict:
    """Detection delay per defect type and segment isolation, per variant."""
    seeds = np.random.default_rng(seed).integers(2**31, size=4)
    raw = generate_profile_stream(profile, None, ntrain, seed=int(seeds[0]))
    nseg = len(profile.segments)
    out = {}
    for v in variants:
        m = fit_variant(raw, v, q)
        source = lambda k, rng: generate_profile_stream(profile, None, k, seed=int(rng.integers(2**31)), outliers=False)
        limits = calibrate_limits(m, source, arl0, calib_runs, seed=int(seeds[1]))
        delays = {}
        for k in range(nseg):
            rng = np.random.default_rng([int(seeds[2]), k])
            sampler = lambda c, r, k=k: generate_profile_stream(profile, k, c, seed=int(r.integers(2**31)), outliers=False)
            delays[str(k)] = [
                _encode_rl(simulate_run_length(m, limits, sampler, rng, max_length=max_length, chunk=64))
                for _ in range(runs)
            ]
        out[v] = {"delays": delays, "isolation": segment_isolation(m, profile)}
    return out


# ---------------------------------------------------------------------------
# grids, checkpoints and the driver
# ---------------------------------------------------------------------------

TABLE1_DELTAS = (0.1, 0.2, 0.3)
TABLE1_NS = (50, 100, 500)
FIGURE5_DELTAS = (0.1, 0.2)
FIGURE5_SHIFTS = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)


def study_settings(study: str) -> list[dict]:
    if study in ("table1", "figure4"):
        return [{"delta": d, "n": n} for d in TABLE1_DELTAS for n in TABLE1_NS]
    if study == "figure5":
        return [{"delta": d} for d in FIGURE5_DELTAS]
    if study == "table2":
        return [{}]
    raise InputError(f"unknown study {study!r}; choose from {list(STUDIES)}")


def _run_one(task):
    study, scale_name, setting, seed, options = task
    scale = get_scale(scale_name)
    if study == "table1":
        return table1_replicate(scale, setting["delta"], setting["n"], seed)
    if study == "figure4":
        return figure4_replicate(scale, setting["delta"], setting["n"], seed)
    if study == "figure5":
        return figure5_replicate(scale, setting["delta"], seed, shifts=options.get("shifts", FIGURE5_SHIFTS),
                                 runs=options.get("runs", 5))
    return table2_replicate(ProfileConfig(), seed, runs=options.get("runs", 1))


def _checkpoint_path(root: Path, study: str, s_idx: int, rep: int) -> Path:
    return root / "checkpoints" / study / f"s{s_idx:02d}_r{rep:04d}.json"


def run_study(study: str, scale: str = "desk", out_dir=".", master_seed: int = DEFAULT_MASTER_SEED,
              replicates: int | None = None, jobs: int | None = None, options: dict | None = None) -> dict:
    """Run (or resume) a study and write its tables.  Returns the aggregated results."""
    settings = study_settings(study)
    sc = get_scale(scale)
    reps = sc.replicates if replicates is None else int(replicates)
    if reps < 1:
        raise InputError("replicates must be positive")
    jobs = default_jobs() if jobs is None else int(jobs)
    options = dict(options or {})
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    tasks, paths = [], []
    results = {}
    for s_idx, setting in enumerate(settings):
        for rep in range(reps):
            path = _checkpoint_path(root, study, s_idx, rep)
            seed = replicate_seed(master_seed, study, s_idx, rep)
            if path.exists():
                saved = json.loads(path.read_text())
                if saved.get("seed") == seed and saved.get("scale") == scale:
                    results[(s_idx, rep)] = saved["result"]
                    continue
            tasks.append((study, scale, setting, seed, options))
            paths.append((s_idx, rep, path, seed))
    if tasks:
        log.info("%s: %d replicates to run (%d cached)", study, len(tasks), len(results))

        def store(meta, res):
            s_idx, rep, path, seed = meta
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps({"seed": seed, "scale": scale, "result": res}, sort_keys=True))
            tmp.replace(path)
            results[(s_idx, rep)] = res

        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for meta, res in zip(paths, pool.map(_run_one, tasks)):
                    store(meta, res)
        else:
            for meta, task in zip(paths, tasks):
                store(meta, _run_one(task))
    # round-trip through JSON so fresh and resumed runs aggregate identically
    results = {k: json.loads(json.dumps(v, sort_keys=True)) for k, v in results.items()}
    return write_study_tables(study, settings, reps, results, root)


def _ordered(by_variant: dict) -> list:
    """Variant names in the canonical order, whatever order the results arrived in."""
    return sorted(by_variant, key=lambda v: VARIANTS.index(v) if v in VARIANTS else len(VARIANTS))


def _value_table(settings, reps, results, study, root: Path, label: str) -> dict:
    variants = _ordered(results[(0, 0)])
    long_rows, cells = [], {}
    for s_idx, setting in enumerate(settings):
        for v in variants:
            vals = [results[(s_idx, r)][v] for r in range(reps)]
            res = ExperimentResult.from_values({**setting, "variant": v}, vals)
            cells[(v, s_idx)] = res
            for r, val in enumerate(vals):
                long_rows.append({"variant": v, **setting, "replicate": r, label: val})
    keys = [f"delta={s['delta']} n={s['n']}" for s in settings]
    table = [{"variant": v, **{k: cells[(v, i)].cell() for i, k in enumerate(keys)}} for v in variants]
    write_records(root / f"{study}.csv", table, ["variant", *keys])
    write_records(root / f"{study}_long.csv", long_rows, ["variant", "delta", "n", "replicate", label])
    return {f"{v}|{keys[i]}": (c.mean, c.std) for (v, i), c in cells.items()}


def write_study_tables(study: str, settings, reps: int, results: dict, root: Path) -> dict:
    if study == "table1":
        return _value_table(settings, reps, results, study, root, "deviation_angle")
    if study == "figure4":
        return _value_table(settings, reps, results, study, root, "zero_measure")
    summary = {}
    long_rows, table = [], []
    if study == "figure5":
        for s_idx, setting in enumerate(settings):
            first = results[(s_idx, 0)]
            for v in _ordered(first):
                for shift in sorted(first[v], key=float):
                    rls = []
                    for r in range(reps):
                        for k, enc in enumerate(results[(s_idx, r)][v][shift]):
                            rls.append(_decode_rl(enc))
                            long_rows.append({"variant": v, "delta": setting["delta"], "shift_sd": float(shift),
                                              "replicate": r, "run": k, "run_length": abs(enc), "censored": enc < 0})
                    s = summarize_delays(rls)
                    summary[(v, setting["delta"], float(shift))] = s
                    table.append({"variant": v, "delta": setting["delta"], "shift_sd": float(shift), "mean": s.mean,
                                  "std": s.std, "censored": s.censored_count, "count": s.count})
        write_records(root / "figure5.csv", table, ["variant", "delta", "shift_sd", "mean", "std", "censored", "count"])
        write_records(root / "figure5_long.csv", long_rows,
                      ["variant", "delta", "shift_sd", "replicate", "run", "run_length", "censored"])
        return summary
    # table2
    first = results[(0, 0)]
    for v in _ordered(first):
        row = {"variant": v}
        for k in sorted(first[v]["delays"], key=int):
            rls = [_decode_rl(e) for r in range(reps) for e in results[(0, r)][v]["delays"][k]]
            iso = [results[(0, r)][v]["isolation"][int(k)] for r in range(reps)]
            s = summarize_delays(rls)
            summary[(v, int(k))] = (s, float(np.mean(iso)), float(np.min(iso)))
            row[f"defect{k}"] = f"{s.mean:.2f} ({s.std:.2f})"
            row[f"isolation{k}"] = f"{np.mean(iso):.3f}"
            for r in range(reps):
                for j, e in enumerate(results[(0, r)][v]["delays"][k]):
                    long_rows.append({"variant": v, "defect": int(k), "replicate": r, "run": j,
                                      "run_length": abs(e), "censored": e < 0,
                                      "isolation": results[(0, r)][v]["isolation"][int(k)]})
        table.append(row)
    cols = ["variant"] + [c for c in table[0] if c != "variant"]
    write_records(root / "table2.csv", table, cols)
    write_records(root / "table2_long.csv", long_rows,
                  ["variant", "defect", "replicate", "run", "run_length", "censored", "isolation"])
    return summary
