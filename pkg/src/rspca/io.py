"""Model documents, CSV sample files and config files.

A model is stored as one JSON document.  Floats are written with Python's
shortest round-trip repr, so reading a document back reproduces every
array bit for bit.  When the arrays would make the document larger than
``SIDECAR_THRESHOLD`` bytes they go to a little-endian float64 sidecar
file next to it instead, and the document keeps their names, shapes, byte
offsets and the sidecar digest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import yaml

from .core import InputError, LoadingPosterior, ModelState
from .vi import FitConfig, FittedModel

FORMAT_VERSION = 1
DOCUMENT_KIND = "rspca-model"
SIDECAR_THRESHOLD = 10 * 1024 * 1024
SIDECAR_SUFFIX = ".arrays.bin"

# (document key, getter); order fixes the sidecar layout
_ARRAYS = (
    ("center", lambda m: m.center),
    ("loading_mean", lambda m: m.state.loading.mean_rows),
    ("loading_row_covariance", lambda m: m.state.loading.row_covariance),
    ("latent_mean", lambda m: m.state.latent_mean),
    ("latent_cov", lambda m: m.state.latent_cov),
    ("lambda_field", lambda m: m.state.lambda_field),
    ("lambda_chi", lambda m: m.state.lambda_chi),
    ("lambda_psi", lambda m: m.state.lambda_psi),
    ("gamma_weights", lambda m: m.state.gamma_weights),
    ("gamma_chi", lambda m: m.state.gamma_chi),
    ("gamma_psi", lambda m: m.state.gamma_psi),
    ("phi", lambda m: m.state.phi),
)


class DocumentError(InputError):
    """Malformed, corrupted or incompatible model document."""


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=True)


def _checksum(payload: dict) -> str:
    body = {k: v for k, v in payload.items() if k != "checksum"}
    return hashlib.sha256(_canonical(body).encode("utf-8")).hexdigest()


def _float(v) -> float:
    return float(v)


def model_document(model: FittedModel, sidecar: bool | None = None) -> tuple[dict, bytes | None]:
    """Build the document dict (and the sidecar bytes, if any) for ``model``.

    ``sidecar=None`` picks the sidecar only when the inline arrays would
    exceed the size threshold.
    """
    arrays = {name: np.ascontiguousarray(get(model), dtype="<f8") for name, get in _ARRAYS}
    if sidecar is None:
        # about 24 characters per inline float
        sidecar = sum(a.size for a in arrays.values()) * 24 > SIDECAR_THRESHOLD
    state = model.state
    doc = {
        "kind": DOCUMENT_KIND,
        "format_version": FORMAT_VERSION,
        "variant": model.config.variant.value,
        "p": state.p,
        "q": state.q,
        "n": state.n,
        "converged": bool(model.converged),
        "sweeps_used": int(model.sweeps_used),
        "lambda_hyper": _float(state.lambda_hyper),
        "gamma_post": [_float(v) for v in state.gamma_post],
        "elbo_final": _float(state.elbo_trace[-1]) if state.elbo_trace else None,
        "elbo_trace": [_float(v) for v in state.elbo_trace],
        "warnings": list(state.warnings),
        "config": model.config.to_dict(),
    }
    blob = None
    if sidecar:
        layout, chunks, offset = [], [], 0
        for name, a in arrays.items():
            raw = a.tobytes()
            layout.append({"name": name, "shape": list(a.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
        blob = b"".join(chunks)
        doc["sidecar"] = {"layout": layout, "nbytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()}
    else:
        doc["arrays"] = {name: {"shape": list(a.shape), "data": a.ravel().tolist()} for name, a in arrays.items()}
    doc["checksum"] = _checksum(doc)
    return doc, blob


def save_model(model: FittedModel, path, sidecar: bool | None = None) -> Path:
    path = Path(path)
    doc, blob = model_document(model, sidecar)
    side = path.with_name(path.name + SIDECAR_SUFFIX)
    if blob is not None:
        side.write_bytes(blob)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")
    return path


def _array_from_inline(entry, name) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in entry["shape"])
        data = np.asarray(entry["data"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise DocumentError(f"array {name!r} is malformed: {exc}") from None
    if data.size != math.prod(shape):
        raise DocumentError(f"array {name!r} has {data.size} values for shape {shape}")
    return data.reshape(shape)


def model_from_document(doc: dict, sidecar_bytes: bytes | None = None) -> FittedModel:
    if not isinstance(doc, dict) or doc.get("kind") != DOCUMENT_KIND:
        raise DocumentError("not a model document")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise DocumentError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    if doc.get("checksum") != _checksum(doc):
        raise DocumentError("checksum mismatch: the document was modified or truncated")
    if "sidecar" in doc:
        info = doc["sidecar"]
        if sidecar_bytes is None:
            raise DocumentError("document refers to a sidecar file that was not found")
        if len(sidecar_bytes) != info["nbytes"] or hashlib.sha256(sidecar_bytes).hexdigest() != info["sha256"]:
            raise DocumentError("sidecar digest mismatch")
        arrays = {}
        for item in info["layout"]:
            shape = tuple(item["shape"])
            count = math.prod(shape)
            a = np.frombuffer(sidecar_bytes, dtype="<f8", count=count, offset=item["offset"])
            arrays[item["name"]] = a.astype(float).reshape(shape)
    else:
        arrays = {name: _array_from_inline(entry, name) for name, entry in doc["arrays"].items()}
    missing = {name for name, _ in _ARRAYS} - set(arrays)
    if missing:
        raise DocumentError(f"document lacks arrays {sorted(missing)}")
    config = FitConfig.from_dict(doc["config"])
    state = ModelState(
        loading=LoadingPosterior(arrays["loading_mean"], arrays["loading_row_covariance"]),
        latent_mean=arrays["latent_mean"],
        latent_cov=arrays["latent_cov"],
        lambda_field=arrays["lambda_field"],
        lambda_chi=arrays["lambda_chi"],
        lambda_psi=arrays["lambda_psi"],
        lambda_hyper=float(doc["lambda_hyper"]),
        gamma_post=tuple(float(v) for v in doc["gamma_post"]),
        gamma_weights=arrays["gamma_weights"],
        gamma_chi=arrays["gamma_chi"],
        gamma_psi=arrays["gamma_psi"],
        phi=arrays["phi"],
        elbo_trace=tuple(float(v) for v in doc["elbo_trace"]),
        warnings=tuple(doc.get("warnings", ())),
    )
    if (state.p, state.q, state.n) != (doc["p"], doc["q"], doc["n"]):
        raise DocumentError("array shapes disagree with the recorded p, q, n")
    return FittedModel(state, arrays["center"], config, bool(doc["converged"]), int(doc["sweeps_used"]))


def load_model(path) -> FittedModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"cannot read model {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DocumentError(f"{path} is not valid JSON: {exc}") from None
    blob = None
    if isinstance(doc, dict) and "sidecar" in doc:
        side = path.with_name(path.name + SIDECAR_SUFFIX)
        blob = side.read_bytes() if side.exists() else None
    return model_from_document(doc, blob)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_csv(path, expect_columns: int | None = None) -> tuple[np.ndarray, list[str] | None]:
    """Numeric matrix from a CSV file, one sample per row.

    The first row is taken as a header when any of its fields is not a
    number.  Errors name the offending 1-based file line.
    """
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    header = None
    rows = []
    width = expect_columns
    with handle:
        for lineno, fields in enumerate(csv.reader(handle), start=1):
            if not fields or all(not f.strip() for f in fields):
                continue
            fields = [f.strip() for f in fields]
            if lineno == 1 and not all(_is_number(f) for f in fields):
                header = fields
                if width is None:
                    width = len(fields)
                elif width != len(fields):
                    raise InputError(f"{path}: header has {len(fields)} columns, expected {width}")
                continue
            if width is None:
                width = len(fields)
            if len(fields) != width:
                raise InputError(f"{path}: row {lineno} has {len(fields)} fields, expected {width}")
            try:
                values = [float(f) for f in fields]
            except ValueError:
                bad = next(f for f in fields if not _is_number(f))
                raise InputError(f"{path}: row {lineno} has a non-numeric field {bad!r}") from None
            if not all(math.isfinite(v) for v in values):
                raise InputError(f"{path}: row {lineno} has a non-finite value")
            rows.append(values)
    if not rows:
        raise InputError(f"{path}: no data rows")
    return np.asarray(rows, dtype=float), header


def write_csv(path, values, header=None) -> Path:
    path = Path(path)
    values = np.atleast_2d(np.asarray(values))
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(header)
        for row in values:
            w.writerow([repr(float(v)) for v in row])
    return path


def write_records(path, records: list[dict], columns: list[str]) -> Path:
    """Write dict rows with a fixed column order (floats via repr)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for rec in records:
            w.writerow([_cell(rec.get(c, "")) for c in columns])
    return path


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


# ---------------------------------------------------------------------------
# config files and ground-truth sidecars
# ---------------------------------------------------------------------------


def read_config(path) -> dict:
    """Key/value config with nested sections (YAML syntax; JSON also parses)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InputError(f"config {path} does not parse: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InputError(f"config {path} must be a mapping at top level")
    return data


def write_ground_truth(path, outlier_flags, true_mask) -> Path:
    path = Path(path)
    doc = {
        "outlier_flags": [bool(v) for v in np.asarray(outlier_flags).ravel()],
        "true_mask": np.asarray(true_mask, dtype=bool).astype(int).tolist(),
    }
    path.write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_ground_truth(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return np.asarray(doc["outlier_flags"], dtype=bool), np.asarray(doc["true_mask"], dtype=bool)
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read ground truth {path}: {exc}") from None
