"""Command-line entry point: ``rspca <subcommand> ...``.

Exit status is 0 on success, 2 for bad input (files, flags, configs) and
3 when the numerics fail (non-SPD matrices, calibration that cannot reach
its target, quadrature that does not converge).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .core import Dataset, DomainError, InputError, NumericError, VariantKind
from .datagen import ProfileConfig, SimConfig, generate_profile_stream, generate_raw
from .diagnosis import contributors, isolate_latent
from .io import load_model, read_config, read_csv, save_model, write_csv, write_ground_truth, write_records
from .monitoring import (
    calibrate_limits,
    chi_square_limits,
    limits_from_dict,
    limits_to_dict,
    model_sampler,
    parse_limits_spec,
    score_batch,
)
from .vi import FitConfig, default_center, fit

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("rspca")


def suggest_q(values: np.ndarray, explained: float = 0.9) -> int:
    """Smallest q whose leading eigenvalues explain ``explained`` of the variance.

    A convenience only; the model itself does not select q.
    """
    n, p = values.shape
    s = np.linalg.svd(values, compute_uv=False) ** 2
    frac = np.cumsum(s) / max(s.sum(), 1e-300)
    q = int(np.searchsorted(frac, explained) + 1)
    return max(1, min(q, p - 1, n - 1))


def _section(cfg: dict, name: str) -> dict:
    sub = cfg.get(name, {})
    if not isinstance(sub, dict):
        raise InputError(f"config section {name!r} must be a mapping")
    return sub


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    cfg = read_config(args.config) if args.config else {}
    fit_cfg = dict(_section(cfg, "fit")) if "fit" in cfg else {k: v for k, v in cfg.items() if k != "data"}
    data_cfg = _section(cfg, "data")
    if args.variant is not None:
        fit_cfg["variant"] = args.variant
    if args.seed is not None:
        fit_cfg["seed"] = args.seed
    raw, _ = read_csv(args.data)
    variant = VariantKind.parse(fit_cfg.get("variant", "rs"))
    center = data_cfg.get("center", default_center(variant))
    data = Dataset.from_raw(raw, center=center)
    q = args.q if args.q is not None else fit_cfg.get("q", "auto")
    if str(q) == "auto":
        q = suggest_q(data.values)
        print(f"q not given; using q={q} (90% of variance explained)")
    fit_cfg["q"] = int(q)
    config = FitConfig.from_dict(fit_cfg)
    model = fit(data, config)
    save_model(model, args.out)
    elbo_final = model.state.elbo_trace[-1]
    print(f"sweeps={model.sweeps_used} elbo={elbo_final!r} converged={model.converged}")
    if not model.converged:
        print(f"warning: no convergence within {config.max_sweeps} sweeps; model written anyway")
    for w in model.state.warnings:
        print(f"warning: {w}")
    return EXIT_OK


def _limits(args, model):
    kind, value = parse_limits_spec(args.limits)
    if kind == "chi2":
        return chi_square_limits(model, value)
    if kind == "file":
        try:
            return limits_from_dict(json.loads(Path(value).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read limits file {value}: {exc}") from None
    source = read_csv(args.phase1, expect_columns=model.p)[0] if args.phase1 else model_sampler(model)
    seed = 0 if args.seed is None else args.seed
    limits = calibrate_limits(model, source, value, args.runs, seed=seed)
    print(f"calibrated limits for ARL0={value:g}: latent={limits.latent_limit!r} residual={limits.residual_limit!r}")
    return limits


def _read_stream(path, model):
    stream, _ = read_csv(path)
    if stream.shape[1] != model.p:
        raise InputError(f"stream has {stream.shape[1]} columns but the model has p={model.p}")
    return stream


def cmd_monitor(args) -> int:
    model = load_model(args.model)
    stream = _read_stream(args.data, model)
    limits = _limits(args, model)
    b = score_batch(model, stream)
    lat, res = b.alarms(limits)
    records = [
        {"index": t, "latent_stat": b.latent_stat[t], "residual_stat": b.residual_stat[t],
         "latent_alarm": bool(lat[t]), "residual_alarm": bool(res[t])}
        for t in range(len(b))
    ]
    if args.out:
        write_records(args.out, records, ["index", "latent_stat", "residual_stat", "latent_alarm", "residual_alarm"])
    hits = np.flatnonzero(lat | res)
    first = int(hits[0]) if hits.size else None
    print(f"samples={len(b)} latent_alarms={int(lat.sum())} residual_alarms={int(res.sum())} "
          f"first_alarm={first if first is not None else 'none'}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    model = load_model(args.model)
    stream = _read_stream(args.data, model)
    limits = _limits(args, model)
    lat, res = score_batch(model, stream).alarms(limits)
    alarmed = np.flatnonzero(lat | res)
    cache = {}
    records = []
    for t in alarmed:
        idx, scores = isolate_latent(model, stream[t], alpha=args.alpha)
        if idx is not None and idx not in cache:
            cache[idx] = sorted(contributors(model, idx, alpha=args.alpha))
        contrib = cache.get(idx, [])
        records.append({"index": int(t), "latent_index": "" if idx is None else idx,
                        "max_score": float(np.max(scores)), "contributors": ";".join(map(str, contrib))})
    if args.out:
        write_records(args.out, records, ["index", "latent_index", "max_score", "contributors"])
    counts = {}
    for r in records:
        counts[r["latent_index"]] = counts.get(r["latent_index"], 0) + 1
    print(f"alarms={len(alarmed)} components=" + ",".join(f"{k if k != '' else 'none'}:{v}" for k, v in sorted(
        counts.items(), key=lambda kv: str(kv[0]))))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    model = load_model(args.model)
    source = read_csv(args.phase1, expect_columns=model.p)[0] if args.phase1 else model_sampler(model)
    seed = 0 if args.seed is None else args.seed
    limits = calibrate_limits(model, source, args.arl0, args.runs, seed=seed)
    text = json.dumps(limits_to_dict(limits), indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = read_config(args.config) if args.config else {}
    kind = cfg.pop("kind", args.kind)
    cfg_seed = int(cfg.pop("seed", 0))
    seed = args.seed if args.seed is not None else cfg_seed
    out = Path(args.out)
    truth_path = out.with_name(out.name + ".truth.json")
    if kind == "profile":
        defect = cfg.pop("defect", None)
        length_n = int(cfg.pop("n", args.n or 100))
        outliers = bool(cfg.pop("outliers", True))
        try:
            pc = ProfileConfig(seed=seed, **cfg)
        except TypeError as exc:
            raise InputError(f"bad profile config: {exc}") from None
        x = generate_profile_stream(pc, defect, length_n, outliers=outliers)
        write_csv(out, x)
        mask = np.stack([pc.segment_mask(k) for k in range(len(pc.segments))], axis=1)
        write_ground_truth(truth_path, np.zeros(length_n, dtype=bool), mask)
    elif kind == "block":
        scale = ex.get_scale(args.scale)
        base = {"p": scale.p, "b": scale.b, "n": args.n or 500, "delta": args.delta}
        base.update(cfg)
        try:
            sc = SimConfig(seed=seed, **base)
        except TypeError as exc:
            raise InputError(f"bad simulation config: {exc}") from None
        x, truth = generate_raw(sc)
        write_csv(out, x)
        write_ground_truth(truth_path, truth.outlier_flags, truth.mask)
    else:
        raise InputError(f"unknown simulation kind {kind!r}")
    print(f"wrote {x.shape[0]} x {x.shape[1]} samples to {out} and ground truth to {truth_path}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    seed = ex.DEFAULT_MASTER_SEED if args.seed is None else args.seed
    summary = ex.run_study(args.study, args.scale, args.out, master_seed=seed, replicates=args.replicates,
                           jobs=args.jobs)
    print(f"{args.study}: {len(summary)} cells written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _variant(value):
    try:
        return VariantKind.parse(value).value
    except InputError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _q(value):
    if value == "auto":
        return value
    try:
        q = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("q must be a positive integer or 'auto'") from None
    if q < 1:
        raise argparse.ArgumentTypeError("q must be a positive integer or 'auto'")
    return q


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rspca", description="Robust sparse probabilistic PCA and monitoring.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to a CSV training set")
    p.add_argument("--data", required=True, help="CSV, one sample per row")
    p.add_argument("--config", help="YAML config; keys of the fit section override defaults")
    p.add_argument("--out", required=True, help="model document to write")
    p.add_argument("--q", type=_q, help="number of components, or 'auto'")
    p.add_argument("--variant", type=_variant, help="rs, sparse, robust or classical")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_fit)

    for name, func, helptext in (("monitor", cmd_monitor, "score a stream and flag alarms"),
                                 ("diagnose", cmd_diagnose, "isolate the faulty component of each alarm")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True, help="CSV stream, one sample per row")
        p.add_argument("--limits", default="chi2:0.01", help="chi2:<alpha>, arl0:<target>:mc or file:<path>")
        p.add_argument("--phase1", help="in-control CSV for Monte Carlo limits (default: sample from the model)")
        p.add_argument("--runs", type=int, default=100_000, help="in-control samples for Monte Carlo limits")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output CSV")
        if name == "diagnose":
            p.add_argument("--alpha", type=float, default=0.01, help="significance level of both tests")
        p.set_defaults(func=func)

    p = sub.add_parser("calibrate", help="Monte Carlo control limits for a target in-control ARL")
    p.add_argument("--model", required=True)
    p.add_argument("--arl0", type=float, default=200.0)
    p.add_argument("--runs", type=int, default=100_000)
    p.add_argument("--phase1", help="in-control CSV (default: sample from the model)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="limits JSON to write (usable as --limits file:<path>)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="write a synthetic dataset and its ground truth")
    p.add_argument("--kind", choices=("block", "profile"), default="block")
    p.add_argument("--config", help="YAML with generator settings")
    p.add_argument("--scale", choices=sorted(ex.SCALES), default="desk")
    p.add_argument("--n", type=int)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="CSV to write; ground truth goes to <out>.truth.json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="run a simulation study")
    p.add_argument("study", choices=ex.STUDIES)
    p.add_argument("--scale", choices=sorted(ex.SCALES), default="desk")
    p.add_argument("--out", required=True, help="output directory (checkpoints kept under it)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--replicates", type=int)
    p.add_argument("--jobs", type=int, help=f"worker processes (default ${ex.JOBS_ENV} or all cores)")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except np.linalg.LinAlgError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
