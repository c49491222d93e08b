"""
Tests for bundle, table and report I/O
"""
import json
import os
import sys
import tempfile

import numpy as np
import pytest

# Add parent directory to path to import modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from divscan.diversity import DiversityReport, UnitDiversity
from divscan.errors import BundleIOError, ValidationError
from divscan.tensor_io import (
    LayerTensor,
    TensorBundle,
    load_accuracy_table,
    load_activations,
    load_bundle,
    load_embeddings,
    load_feature_table,
    read_report,
    write_bundle,
    write_report,
)


def _write_manifest(path, layers, model_id="m0"):
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump({"model_id": model_id, "layers": layers}, f)


def _write_csv(path, text):
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


def test_load_conv_bundle():
    with tempfile.TemporaryDirectory() as tmp:
        data = np.arange(72, dtype="<f4")
        data.tofile(os.path.join(tmp, "conv.bin"))
        assert os.path.getsize(os.path.join(tmp, "conv.bin")) == 288
        _write_manifest(tmp, [{"name": "conv1", "kind": "conv", "shape": [3, 3, 2, 4], "file": "conv.bin"}])

        bundle = load_bundle(tmp)
        assert bundle.model_id == "m0"
        assert len(bundle.layers) == 1
        assert bundle.layers[0].size == 72
        assert bundle.layers[0].shape == (3, 3, 2, 4)
        assert np.array_equal(bundle.layers[0].data.ravel(), data)


def test_blob_size_mismatch():
    with tempfile.TemporaryDirectory() as tmp:
        np.zeros(70, dtype="<f4").tofile(os.path.join(tmp, "conv.bin"))
        _write_manifest(tmp, [{"name": "conv1", "kind": "conv", "shape": [3, 3, 2, 4], "file": "conv.bin"}])
        with pytest.raises(ValidationError, match="288 bytes"):
            load_bundle(tmp)


def test_duplicate_layer_names():
    with tempfile.TemporaryDirectory() as tmp:
        np.zeros(4, dtype="<f4").tofile(os.path.join(tmp, "a.bin"))
        layer = {"name": "fc", "kind": "fully_connected", "shape": [2, 2], "file": "a.bin"}
        _write_manifest(tmp, [layer, dict(layer)])
        with pytest.raises(ValidationError, match="duplicate"):
            load_bundle(tmp)


def test_missing_bundle_and_blob():
    with tempfile.TemporaryDirectory() as tmp:
        with pytest.raises(BundleIOError):
            load_bundle(os.path.join(tmp, "nope"))
        _write_manifest(tmp, [{"name": "fc", "kind": "fully_connected", "shape": [2, 2], "file": "gone.bin"}])
        with pytest.raises(BundleIOError):
            load_bundle(tmp)


def test_unknown_kind_and_msa_heads():
    with tempfile.TemporaryDirectory() as tmp:
        _write_manifest(tmp, [{"name": "x", "kind": "lstm", "shape": [2, 2], "file": "x.bin"}])
        with pytest.raises(ValidationError, match="unknown kind"):
            load_bundle(tmp)
    with pytest.raises(ValidationError):
        LayerTensor("q", "msa_q", (6, 4), np.zeros(24), heads=4)
    with pytest.raises(ValidationError):
        LayerTensor("fc", "fully_connected", (2, 2), np.zeros(4), heads=2)


def test_bundle_round_trip():
    rng = np.random.default_rng(3)
    bundle = TensorBundle(
        model_id="round trip",
        layers=(
            LayerTensor("conv1", "conv", (3, 3, 2, 4), rng.normal(size=72)),
            LayerTensor("attn/q", "msa_q", (8, 4), rng.normal(size=32), heads=2),
            LayerTensor("fc.bias", "bias", (4,), rng.normal(size=4)),
            LayerTensor("stage1", "activation", (5, 3), rng.normal(size=15)),
        ),
        upstream_accuracy=0.756,
    )
    with tempfile.TemporaryDirectory() as tmp:
        path = write_bundle(bundle, os.path.join(tmp, "b"))
        loaded = load_bundle(path)
        assert loaded == bundle
        assert loaded.layer("attn/q").heads == 2

        stages = load_activations(path)
        assert len(stages) == 1
        assert stages[0].name == "stage1"
        assert stages[0].matrix.shape == (5, 3)
        with pytest.raises(ValidationError):
            load_activations(path, "conv1")


def test_load_embeddings():
    with tempfile.TemporaryDirectory() as tmp:
        path = _write_csv(os.path.join(tmp, "emb.csv"), "label,e0,e1\na,1,0\na,0.5,0.5\nb,0,1\nb,-1,2\n")
        emb = load_embeddings(path)
        assert emb.vectors.shape == (4, 2)
        assert emb.n_classes == 2
        assert emb.labels.tolist() == [0, 0, 1, 1]

        ragged = _write_csv(os.path.join(tmp, "ragged.csv"), "label,e0,e1\na,1,0,3\nb,0,1\n")
        with pytest.raises(ValidationError, match="ragged"):
            load_embeddings(ragged)

        single = _write_csv(os.path.join(tmp, "single.csv"), "label,e0,e1\na,1,0\n")
        with pytest.raises(ValidationError):
            load_embeddings(single)


def test_load_accuracy_table_clamps():
    with tempfile.TemporaryDirectory() as tmp:
        path = _write_csv(os.path.join(tmp, "acc.csv"), "model_id,cifar,pets\nm1,1.0,0.5\nm2,0.25,0.0\n")
        table = load_accuracy_table(path, 1e-6)
        assert table.acc[0, 0] == pytest.approx(0.999999, abs=1e-15)
        assert table.acc[0, 1] == 0.5
        assert table.acc[1, 1] == pytest.approx(1e-6, abs=1e-18)
        assert list(table.to_frame().columns) == ["cifar", "pets"]

        bad = _write_csv(os.path.join(tmp, "bad.csv"), "model_id,cifar\nm1,1.2\nm2,0.5\n")
        with pytest.raises(ValidationError, match="outside"):
            load_accuracy_table(bad)

        words = _write_csv(os.path.join(tmp, "words.csv"), "model_id,cifar\nm1,high\nm2,0.5\n")
        with pytest.raises(ValidationError, match="non-numeric"):
            load_accuracy_table(words)


def test_load_accuracy_table_row_length():
    with tempfile.TemporaryDirectory() as tmp:
        extra = _write_csv(os.path.join(tmp, "extra.csv"), "model_id,cifar,pets\nm1,0.9,0.5,0.7\nm2,0.25,0.1\n")
        with pytest.raises(ValidationError, match="ragged row with 3 values, header declares 2 datasets"):
            load_accuracy_table(extra)

        short = _write_csv(os.path.join(tmp, "short.csv"), "model_id,cifar,pets\nm1,0.9\nm2,0.25,0.1\n")
        with pytest.raises(ValidationError, match="missing cell"):
            load_accuracy_table(short)


def test_load_feature_table():
    with tempfile.TemporaryDirectory() as tmp:
        path = _write_csv(os.path.join(tmp, "feat.csv"), "model,cis,msc,transfer\na,0.3,0.1,0.2\nb,0.4,0.2,0.5\n")
        records = load_feature_table(path)
        assert records == [
            {"cis": 0.3, "msc": 0.1, "transfer": 0.2},
            {"cis": 0.4, "msc": 0.2, "transfer": 0.5},
        ]
        with pytest.raises(ValidationError):
            load_feature_table(path, target="missing")


def _report():
    units = [UnitDiversity("fc1", "", 0.2, 0.1), UnitDiversity("fc2", "", 0.6, 0.3)]
    return DiversityReport(model_id="m", per_unit=units, cluster_avg=0.4, spectral_avg=0.2,
                           cis_cluster=0.75 * 0.4, cis_spectral=0.75 * 0.2, upstream_accuracy=0.75)


def test_report_round_trip():
    report = _report()
    with tempfile.TemporaryDirectory() as tmp:
        path = write_report(report, os.path.join(tmp, "report.json"))
        again = DiversityReport.from_dict(read_report(path))
        assert again == report
        with open(path, encoding="utf-8") as f:
            text = f.read()
        assert '"cluster_avg": 0.40000000000000002' in text


def test_report_consistency_checked_before_write():
    report = DiversityReport(model_id="m", per_unit=[], cluster_avg=0.4)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "report.json")
        with pytest.raises(ValidationError):
            write_report(report, path)
        assert not os.path.exists(path)


def test_report_unwritable_location():
    with tempfile.TemporaryDirectory() as tmp:
        blocker = os.path.join(tmp, "file")
        with open(blocker, "w") as f:
            f.write("x")
        with pytest.raises(BundleIOError):
            write_report(_report(), os.path.join(blocker, "report.json"))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
