"""
Representation metrics on activations and embeddings

Linear CKA (full batch and minibatch with the unbiased HSIC estimator), the
CKA abstraction score over model stages, and the class metrics of an
embedding space: intra-class variation, inter-class separation and mean
silhouette coefficient under cosine distance.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from sklearn.metrics import silhouette_samples

from .config import DEFAULT_MINIBATCH
from .errors import ValidationError
from .tensor_io import EmbeddingSet

logger = logging.getLogger(__name__)

_MIN_HSIC_ROWS = 4
# distances below this count as zero
_DIST_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class ActivationMatrix:
    """n examples x p channels"""

    matrix: np.ndarray
    centered: bool = False
    name: str = ""

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValidationError("activations must be an n x p matrix")
        if matrix.shape[0] < 2:
            raise ValidationError(f"activations need at least 2 examples, got {matrix.shape[0]}")
        if not np.all(np.isfinite(matrix)):
            raise ValidationError("activations contain non-finite values")
        object.__setattr__(self, "matrix", matrix)

    @property
    def n(self) -> int:
        return int(self.matrix.shape[0])

    def center(self) -> "ActivationMatrix":
        if self.centered:
            return self
        return ActivationMatrix(self.matrix - self.matrix.mean(axis=0, keepdims=True), True, self.name)


def _as_activation(x) -> ActivationMatrix:
    return x if isinstance(x, ActivationMatrix) else ActivationMatrix(x)


def cka_linear(x, y) -> float:
    """
    Linear CKA between two activation matrices over the same examples

    Computed in feature space as ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)
    after column centering; 0 when either Gram norm vanishes.
    """
    x = _as_activation(x)
    y = _as_activation(y)
    if x.n != y.n:
        raise ValidationError(f"row-count mismatch: {x.n} vs {y.n}")
    xc = x.center().matrix
    yc = y.center().matrix
    cross = np.linalg.norm(yc.T @ xc) ** 2
    norm_x = np.linalg.norm(xc.T @ xc)
    norm_y = np.linalg.norm(yc.T @ yc)
    if norm_x == 0.0 or norm_y == 0.0:
        return 0.0
    return float(min(1.0, cross / (norm_x * norm_y)))


def hsic_unbiased(k: np.ndarray, l: np.ndarray) -> float:
    """Unbiased HSIC estimator on two n x n Gram matrices (n >= 4)"""
    n = k.shape[0]
    if n < _MIN_HSIC_ROWS:
        raise ValidationError(f"unbiased HSIC needs at least {_MIN_HSIC_ROWS} rows, got {n}")
    k = k.copy()
    l = l.copy()
    np.fill_diagonal(k, 0.0)
    np.fill_diagonal(l, 0.0)
    ones_k = k.sum(axis=0)
    ones_l = l.sum(axis=0)
    trace = float(np.sum(k * l))
    middle = float(ones_k.sum() * ones_l.sum()) / ((n - 1) * (n - 2))
    last = 2.0 * float(ones_k @ ones_l) / (n - 2)
    return (trace + middle - last) / (n * (n - 3))


def cka_minibatch(x_batches: Sequence, y_batches: Sequence) -> float:
    """
    Minibatch CKA: mean unbiased HSIC over aligned batches, combined as
    HSIC(X,Y) / sqrt(HSIC(X,X) HSIC(Y,Y))
    """
    if len(x_batches) != len(y_batches):
        raise ValidationError(f"batch lists differ in length: {len(x_batches)} vs {len(y_batches)}")
    if not x_batches:
        raise ValidationError("no minibatches given")

    xy = xx = yy = 0.0
    for i, (bx, by) in enumerate(zip(x_batches, y_batches)):
        bx = _as_activation(bx)
        by = _as_activation(by)
        if bx.n != by.n:
            raise ValidationError(f"batch {i}: row-count mismatch {bx.n} vs {by.n}")
        if bx.n < _MIN_HSIC_ROWS:
            raise ValidationError(f"batch {i}: unbiased HSIC needs at least {_MIN_HSIC_ROWS} rows, got {bx.n}")
        xc = bx.center().matrix
        yc = by.center().matrix
        gx = xc @ xc.T
        gy = yc @ yc.T
        xy += hsic_unbiased(gx, gy)
        xx += hsic_unbiased(gx, gx)
        yy += hsic_unbiased(gy, gy)

    count = len(x_batches)
    denom = (xx / count) * (yy / count)
    if denom <= 0.0:
        return 0.0
    return float((xy / count) / math.sqrt(denom))


def split_batches(x, batch_size: int = DEFAULT_MINIBATCH) -> List[ActivationMatrix]:
    """Consecutive minibatches; a trailing batch under 4 rows is dropped"""
    x = _as_activation(x)
    if batch_size < _MIN_HSIC_ROWS:
        raise ValidationError(f"minibatch size must be >= {_MIN_HSIC_ROWS}, got {batch_size}")
    batches = [
        ActivationMatrix(x.matrix[start:start + batch_size])
        for start in range(0, x.n, batch_size)
        if x.n - start >= _MIN_HSIC_ROWS
    ]
    if not batches:
        raise ValidationError(f"{x.n} rows are too few for minibatch CKA")
    return batches


def cka(x, y, minibatch: Optional[int] = None) -> float:
    """Full-batch CKA, or minibatch CKA with consecutive batches of the given size"""
    if minibatch is None:
        return cka_linear(x, y)
    return cka_minibatch(split_batches(x, minibatch), split_batches(y, minibatch))


def cka_matrix(stage_activations: Sequence, minibatch: Optional[int] = None) -> np.ndarray:
    """Symmetric stage x stage CKA matrix with unit diagonal"""
    stages = [_as_activation(s) for s in stage_activations]
    if len(stages) < 2:
        raise ValidationError(f"need at least 2 stages, got {len(stages)}")
    size = len(stages)
    out = np.eye(size)
    for i in range(size):
        for j in range(i + 1, size):
            out[i, j] = out[j, i] = cka(stages[i], stages[j], minibatch)
    return out


def cka_abstraction_score(stage_activations: Sequence, minibatch: Optional[int] = None) -> float:
    """Mean CKA over all unordered pairs of distinct stages"""
    return _upper_mean(cka_matrix(stage_activations, minibatch))


def _upper_mean(matrix: np.ndarray) -> float:
    iu = np.triu_indices(matrix.shape[0], k=1)
    return float(np.mean(matrix[iu]))


@dataclass
class CkaReport:
    x_name: str
    y_name: str
    n: int
    cka: float
    minibatch: Optional[int] = None

    def validate(self):
        if not math.isfinite(self.cka):
            raise ValidationError("CKA value is not finite")

    def to_dict(self) -> Dict[str, Any]:
        return {"x": self.x_name, "y": self.y_name, "n": self.n, "cka": self.cka, "minibatch": self.minibatch}


@dataclass
class AbstractionReport:
    stages: List[str]
    matrix: List[List[float]]
    score: float
    minibatch: Optional[int] = None

    def validate(self):
        if len(self.stages) < 2 or len(self.matrix) != len(self.stages):
            raise ValidationError("abstraction report needs a square matrix over >= 2 stages")

    def to_dict(self) -> Dict[str, Any]:
        return {"stages": self.stages, "matrix": self.matrix, "score": self.score, "minibatch": self.minibatch}


def abstraction_report(stage_activations: Sequence, minibatch: Optional[int] = None) -> AbstractionReport:
    """Stage-pair CKA matrix with its abstraction score"""
    stages = [_as_activation(s) for s in stage_activations]
    matrix = cka_matrix(stages, minibatch)
    return AbstractionReport(
        stages=[s.name or f"stage{i}" for i, s in enumerate(stages)],
        matrix=matrix.tolist(),
        score=_upper_mean(matrix),
        minibatch=minibatch,
    )


@dataclass
class ClassMetrics:
    v_intra: float
    s_inter: float
    msc: float

    def validate(self):
        if self.v_intra < 0 or self.s_inter < 0:
            raise ValidationError("class variation and separation must be non-negative")
        if not (-1.0 <= self.msc <= 1.0):
            raise ValidationError(f"mean silhouette {self.msc} outside [-1, 1]")

    def to_dict(self) -> Dict[str, Any]:
        return {"v_intra": self.v_intra, "s_inter": self.s_inter, "msc": self.msc}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ClassMetrics":
        return cls(**data)


def cosine_distance_matrix(vectors: np.ndarray) -> np.ndarray:
    """1 - cosine between rows"""
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        raise ValidationError("zero-vector embedding: cosine distance undefined")
    unit = vectors / norms[:, None]
    distances = 1.0 - np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(distances, 0.0)
    return distances


def silhouette_values(distances: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """
    Per-example silhouette (s - v) / max(s, v) on a precomputed distance matrix

    v averages over the other members of the own class (N_k - 1), s is the
    smallest mean distance to another class. Examples in singleton classes,
    or with no other class, or with max(s, v) = 0 get 0.
    """
    if n_classes < 2 or n_classes >= labels.size:
        return np.zeros(labels.size)
    # round-off distances between identical directions count as zero
    distances = np.where(distances > _DIST_FLOOR, distances, 0.0)
    sc = silhouette_samples(distances, labels, metric="precomputed")
    return np.clip(np.nan_to_num(sc), -1.0, 1.0)


def class_metrics(emb: EmbeddingSet) -> ClassMetrics:
    """
    Intra-class variation, inter-class separation and mean silhouette

    V_intra averages 1 - cos over all N_k^2 ordered pairs of each class, then
    over classes. S_inter averages the mean pair distance of every ordered
    class pair (j, k), same-class pairs included, over K^2 pairs.
    """
    labels = emb.labels
    k = emb.n_classes
    counts = np.bincount(labels, minlength=k)
    if np.any(counts == 0):
        raise ValidationError("every class needs at least one embedding")

    distances = cosine_distance_matrix(emb.vectors)
    onehot = np.zeros((labels.size, k))
    onehot[np.arange(labels.size), labels] = 1.0
    block_sums = onehot.T @ distances @ onehot  # K x K sums of pair distances
    block_means = block_sums / np.outer(counts, counts)

    v_intra = float(np.mean(np.diag(block_means)))
    s_inter = float(np.mean(block_means))
    msc = float(np.mean(silhouette_values(distances, labels, k)))
    logger.debug(f"🧭 class metrics over {labels.size} embeddings, {k} classes")
    return ClassMetrics(v_intra=max(0.0, v_intra), s_inter=max(0.0, s_inter), msc=msc)
