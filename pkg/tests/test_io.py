import json

import numpy as np
import pytest

from rspca.core import InputError
from rspca.io import (
    DocumentError,
    SIDECAR_SUFFIX,
    load_model,
    model_document,
    read_config,
    read_csv,
    read_ground_truth,
    save_model,
    write_csv,
    write_ground_truth,
)

NUMERIC = ("loading_mean", "loading_row_covariance", "latent_mean", "latent_cov", "lambda_field", "gamma_weights")


def _same_model(a, b):
    assert np.array_equal(a.center, b.center)
    sa, sb = a.state, b.state
    assert np.array_equal(sa.loading.mean_rows, sb.loading.mean_rows)
    assert np.array_equal(sa.loading.row_covariance, sb.loading.row_covariance)
    for name in ("latent_mean", "latent_cov", "lambda_field", "lambda_chi", "lambda_psi", "gamma_weights",
                 "gamma_chi", "gamma_psi", "phi"):
        assert np.array_equal(getattr(sa, name), getattr(sb, name)), name
    assert sa.gamma_post == sb.gamma_post and sa.lambda_hyper == sb.lambda_hyper
    assert sa.elbo_trace == sb.elbo_trace
    assert a.config == b.config and a.converged == b.converged and a.sweeps_used == b.sweeps_used


@pytest.mark.parametrize("sidecar", [False, True])
def test_round_trip_is_bit_exact(desk_setup, tmp_path, sidecar):
    model = desk_setup[2]
    first = save_model(model, tmp_path / "m.json", sidecar=sidecar)
    back = load_model(first)
    _same_model(model, back)
    second = save_model(back, tmp_path / "m2.json", sidecar=sidecar)
    assert first.read_text() == second.read_text()
    assert (tmp_path / ("m.json" + SIDECAR_SUFFIX)).exists() == sidecar


def test_document_fields(desk_setup):
    doc, blob = model_document(desk_setup[2], sidecar=False)
    assert blob is None
    for key in ("format_version", "variant", "p", "q", "n", "lambda_hyper", "gamma_post", "elbo_final", "config",
                "checksum"):
        assert key in doc
    assert doc["elbo_final"] == desk_setup[2].state.elbo_trace[-1]


def test_checksum_detects_tampering(desk_setup, tmp_path):
    path = save_model(desk_setup[2], tmp_path / "m.json")
    doc = json.loads(path.read_text())
    doc["lambda_hyper"] *= 1.0000001
    path.write_text(json.dumps(doc))
    with pytest.raises(DocumentError, match="checksum"):
        load_model(path)


def test_sidecar_corruption_and_absence(desk_setup, tmp_path):
    path = save_model(desk_setup[2], tmp_path / "m.json", sidecar=True)
    side = tmp_path / ("m.json" + SIDECAR_SUFFIX)
    raw = bytearray(side.read_bytes())
    raw[10] ^= 1
    side.write_bytes(bytes(raw))
    with pytest.raises(DocumentError, match="sidecar"):
        load_model(path)
    side.unlink()
    with pytest.raises(DocumentError, match="sidecar"):
        load_model(path)


def test_version_and_garbage(desk_setup, tmp_path):
    doc, _ = model_document(desk_setup[2])
    doc["format_version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(DocumentError, match="format_version"):
        load_model(tmp_path / "v.json")
    (tmp_path / "g.json").write_text("{not json")
    with pytest.raises(DocumentError):
        load_model(tmp_path / "g.json")
    with pytest.raises(InputError):
        load_model(tmp_path / "missing.json")


def test_csv_header_detection_and_round_trip(tmp_path):
    x = np.array([[1.5, -2.0, 3e-7], [0.1, 0.2, 0.3]])
    write_csv(tmp_path / "a.csv", x, header=["a", "b", "c"])
    back, header = read_csv(tmp_path / "a.csv")
    assert header == ["a", "b", "c"]
    assert np.array_equal(back, x)
    write_csv(tmp_path / "b.csv", x)
    back, header = read_csv(tmp_path / "b.csv")
    assert header is None and np.array_equal(back, x)


@pytest.mark.parametrize("text,row", [("1,2\n3,x\n", 2), ("a,b\n1,2\n3\n", 3), ("1,2\n3,nan\n", 2)])
def test_csv_errors_name_the_row(tmp_path, text, row):
    (tmp_path / "bad.csv").write_text(text)
    with pytest.raises(InputError, match=f"row {row}"):
        read_csv(tmp_path / "bad.csv")


def test_csv_empty_and_width(tmp_path):
    (tmp_path / "e.csv").write_text("a,b\n")
    with pytest.raises(InputError, match="no data"):
        read_csv(tmp_path / "e.csv")
    (tmp_path / "w.csv").write_text("1,2\n")
    with pytest.raises(InputError):
        read_csv(tmp_path / "w.csv", expect_columns=3)


def test_config_sections(tmp_path):
    (tmp_path / "c.yaml").write_text("fit:\n  q: 3\n  variant: robust\ndata:\n  center: mean\n")
    assert read_config(tmp_path / "c.yaml") == {"fit": {"q": 3, "variant": "robust"}, "data": {"center": "mean"}}
    (tmp_path / "bad.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(InputError):
        read_config(tmp_path / "bad.yaml")
    (tmp_path / "broken.yaml").write_text("a: [1, 2\n")
    with pytest.raises(InputError):
        read_config(tmp_path / "broken.yaml")


def test_ground_truth_round_trip(tmp_path):
    flags = np.array([True, False, True])
    mask = np.eye(4, 2, dtype=bool)
    write_ground_truth(tmp_path / "t.json", flags, mask)
    f, m = read_ground_truth(tmp_path / "t.json")
    assert np.array_equal(f, flags) and np.array_equal(m, mask)
