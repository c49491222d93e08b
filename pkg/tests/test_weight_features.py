"""
Tests for turning layer tensors into feature matrices
"""
import os
import sys

import numpy as np
import pytest

# Add parent directory to path to import modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from divscan.errors import ValidationError
from divscan.tensor_io import LayerTensor, TensorBundle
from divscan.weight_features import extract_all, features_of_conv, features_of_fc, features_of_msa


def test_conv_reshape():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(3, 3, 2, 4))
    fm = features_of_conv(LayerTensor("conv", "conv", (3, 3, 2, 4), data))
    assert fm.matrix.shape == (18, 4)
    assert fm.n_features == 4
    # column j is output filter j flattened over (k, k, n_in)
    expected = data.astype(np.float32).astype(np.float64)[:, :, :, 1].ravel()
    assert np.array_equal(fm.matrix[:, 1], expected)


def test_conv_degenerate_shapes():
    fm = features_of_conv(LayerTensor("c", "conv", (1, 1, 1, 2), [0.5, -2.0]))
    assert fm.matrix.tolist() == [[0.5, -2.0]]
    with pytest.raises(ValidationError, match="at least 2"):
        features_of_conv(LayerTensor("c", "conv", (2, 2, 1, 1), [1.0, 2.0, 3.0, 4.0]))


def test_fc_mapping():
    fm = features_of_fc(LayerTensor("fc", "fully_connected", (5, 10), np.arange(1, 51)))
    assert fm.matrix.shape == (5, 10)
    assert fm.n_features == 10

    eye = features_of_fc(LayerTensor("eye", "fully_connected", (4, 4), np.eye(4)))
    assert np.array_equal(eye.matrix.T @ eye.matrix, np.eye(4))

    with pytest.raises(ValidationError):
        LayerTensor("fc", "fully_connected", (5,), np.ones(5))


def test_msa_heads():
    rng = np.random.default_rng(1)
    weight = rng.normal(size=(8, 4))
    heads = features_of_msa(LayerTensor("attn", "msa_q", (8, 4), weight, heads=2))
    assert len(heads) == 2
    assert [h.matrix.shape for h in heads] == [(4, 4), (4, 4)]
    assert [h.sub_unit for h in heads] == ["msa_q.h0", "msa_q.h1"]
    w32 = weight.astype(np.float32).astype(np.float64)
    assert np.array_equal(heads[1].matrix, w32[4:8, :])

    single = features_of_msa(LayerTensor("attn", "msa_k", (8, 4), weight, heads=1))
    fc = features_of_fc(LayerTensor("attn", "fully_connected", (8, 4), weight))
    assert len(single) == 1
    assert np.array_equal(single[0].matrix, fc.matrix)


def _bundle():
    rng = np.random.default_rng(2)
    conv = rng.normal(size=(3, 3, 2, 4))
    conv[:, :, :, 2] = 0.0
    return TensorBundle(
        model_id="m",
        layers=(
            LayerTensor("stem.conv", "conv", (3, 3, 2, 4), conv),
            LayerTensor("stem.bias", "bias", (4,), rng.normal(size=4)),
            LayerTensor("block.attn.q", "msa_q", (8, 4), rng.normal(size=32), heads=2),
            LayerTensor("head", "classifier", (4, 3), rng.normal(size=12)),
        ),
    )


def test_extract_all_counts_and_exclusion():
    bundle = _bundle()
    features = extract_all(bundle)
    assert len(features) == 3
    assert features[0].layer_name == "stem.conv"
    assert features[0].zero_dropped == 1
    assert features[0].n_features == 3

    kept = extract_all(bundle, exclude_pattern=r"conv")
    assert len(kept) == 2
    assert all(fm.layer_name == "block.attn.q" for fm in kept)

    with pytest.raises(ValidationError, match="exclude pattern"):
        extract_all(bundle, exclude_pattern="(")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
