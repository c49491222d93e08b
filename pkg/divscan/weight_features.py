"""
Weight features of neural layers

Turns each layer tensor into a d x n matrix whose columns are the layer's
features: conv filters, fully-connected output units, or the per-head
projection columns of multi-head self-attention.
"""

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .config import Settings, worker_count
from .errors import ValidationError
from .tensor_io import FEATURE_KINDS, MSA_KINDS, LayerTensor, TensorBundle

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Columns are features; exact-zero columns already removed"""

    layer_name: str
    sub_unit: str
    matrix: np.ndarray
    zero_dropped: int = 0

    @property
    def n_features(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0])


def _build(layer_name: str, sub_unit: str, matrix: np.ndarray) -> FeatureMatrix:
    matrix = np.asarray(matrix, dtype=np.float64)
    nonzero = np.any(matrix != 0.0, axis=0)
    dropped = int(matrix.shape[1] - np.count_nonzero(nonzero))
    if dropped:
        logger.debug(f"⚠️  {layer_name} {sub_unit}: dropped {dropped} all-zero feature column(s)")
        matrix = matrix[:, nonzero]
    label = f"{layer_name} {sub_unit}".strip()
    if matrix.shape[0] < 1:
        raise ValidationError(f"{label}: feature dimension must be >= 1")
    if matrix.shape[1] < 2:
        raise ValidationError(
            f"{label}: need at least 2 non-zero features, got {matrix.shape[1]}"
        )
    matrix = np.ascontiguousarray(matrix)
    matrix.setflags(write=False)
    return FeatureMatrix(layer_name=layer_name, sub_unit=sub_unit, matrix=matrix, zero_dropped=dropped)


def features_of_conv(layer: LayerTensor) -> FeatureMatrix:
    """(k, k, n_in, n_out) filters -> (k*k*n_in) x n_out matrix, one filter per column"""
    if layer.kind != "conv" or len(layer.shape) != 4:
        raise ValidationError(f"layer '{layer.name}': expected a 4-axis conv tensor, got {layer.kind} {list(layer.shape)}")
    k1, k2, n_in, n_out = layer.shape
    # Row-major flattening of (k, k, n_in) per output channel
    matrix = layer.data.astype(np.float64).reshape(k1 * k2 * n_in, n_out)
    return _build(layer.name, "", matrix)


def features_of_fc(layer: LayerTensor) -> FeatureMatrix:
    """(in, out) weight -> in x out matrix, one output unit per column"""
    if layer.kind != "fully_connected":
        raise ValidationError(f"layer '{layer.name}': expected fully_connected, got {layer.kind}")
    if len(layer.shape) != 2:
        raise ValidationError(f"layer '{layer.name}': fully_connected needs 2 axes, got {len(layer.shape)}")
    return _build(layer.name, "", layer.data.astype(np.float64).reshape(layer.shape))


def features_of_msa(layer: LayerTensor) -> List[FeatureMatrix]:
    """
    Split an attention projection into per-head feature matrices

    Head h owns the contiguous input-channel block [h*in/H, (h+1)*in/H).

    Returns:
        H matrices of shape (in/H) x out, tagged "{kind}.h{h}"
    """
    if layer.kind not in MSA_KINDS:
        raise ValidationError(f"layer '{layer.name}': expected one of {MSA_KINDS}, got {layer.kind}")
    if len(layer.shape) != 2:
        raise ValidationError(f"layer '{layer.name}': {layer.kind} needs 2 axes")
    d_in, _ = layer.shape
    heads = layer.heads
    if d_in % heads != 0:
        raise ValidationError(f"layer '{layer.name}': {d_in} input channels cannot split into {heads} heads")
    block = d_in // heads
    weight = layer.data.astype(np.float64).reshape(layer.shape)
    return [
        _build(layer.name, f"{layer.kind}.h{h}", weight[h * block:(h + 1) * block, :])
        for h in range(heads)
    ]


def features_of_layer(layer: LayerTensor) -> List[FeatureMatrix]:
    if layer.kind == "conv":
        return [features_of_conv(layer)]
    if layer.kind == "fully_connected":
        return [features_of_fc(layer)]
    if layer.kind in MSA_KINDS:
        return features_of_msa(layer)
    raise ValidationError(f"layer '{layer.name}': kind {layer.kind} carries no weight features")


def extract_all(bundle: TensorBundle, exclude_pattern: Optional[str] = None,
                settings: Optional[Settings] = None) -> List[FeatureMatrix]:
    """
    Extract feature matrices of every feature-bearing layer in manifest order

    Args:
        bundle: validated weight bundle
        exclude_pattern: regular expression; layers whose name matches are skipped
        settings: thread cap for per-layer extraction

    Returns:
        Feature matrices, MSA layers expanded per head
    """
    try:
        pattern = re.compile(exclude_pattern) if exclude_pattern else None
    except re.error as e:
        raise ValidationError(f"invalid exclude pattern {exclude_pattern!r}: {e}")

    selected = []
    for layer in bundle.layers:
        if layer.kind not in FEATURE_KINDS:
            continue
        if pattern is not None and pattern.search(layer.name):
            logger.debug(f"⏭️  Skipping excluded layer {layer.name}")
            continue
        selected.append(layer)

    with ThreadPoolExecutor(max_workers=worker_count(settings)) as pool:
        per_layer = list(pool.map(features_of_layer, selected))

    features = [fm for group in per_layer for fm in group]
    dropped = sum(fm.zero_dropped for fm in features)
    logger.debug(
        f"🧮 {bundle.model_id}: {len(features)} feature matrices from {len(selected)} layers"
        + (f", {dropped} zero columns dropped" if dropped else "")
    )
    return features
