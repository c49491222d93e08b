"""
Gradient-boosted regression trees with split-gain feature importance

Squared-error boosting over exact greedy regression trees. Used to ask which
inspected feature (CIS, CKA, class metrics) best predicts transferability.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

DEFAULT_FEATURES = ("cis", "cka", "v_intra", "s_inter", "msc")

# Relative floor under which a split gain counts as no improvement
_GAIN_RTOL = 1e-12


@dataclass(frozen=True)
class GbdtConfig:
    n_trees: int = 100
    max_depth: int = 6
    learning_rate: float = 0.1
    min_samples_leaf: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValidationError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.max_depth < 1:
            raise ValidationError(f"max_depth must be >= 1, got {self.max_depth}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.min_samples_leaf < 1:
            raise ValidationError(f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}")


@dataclass
class TreeNode:
    value: float = 0.0
    feature: int = -1
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class GbdtModel:
    config: GbdtConfig
    n_features: int
    base: float
    trees: List[TreeNode] = field(default_factory=list)
    # summed SSE reduction per feature over every split of every tree
    gains: np.ndarray = None
    train_loss: List[float] = field(default_factory=list)
    seed: int = 0

    def predict(self, features) -> np.ndarray:
        return predict(self, features)


def _best_split(x: np.ndarray, r: np.ndarray, min_leaf: int):
    """
    Exact greedy search over midpoints of sorted distinct values

    Returns (gain, feature, threshold); feature is -1 when nothing helps.
    Equal gains keep the lowest feature index, then the lowest threshold.
    """
    n, f = x.shape
    total = r.sum()
    parent = total * total / n
    best = (0.0, -1, 0.0)
    for j in range(f):
        order = np.argsort(x[:, j], kind="stable")
        xs = x[order, j]
        rs = r[order]
        csum = np.cumsum(rs)[:-1]
        left_n = np.arange(1, n)
        right_n = n - left_n
        valid = (xs[1:] != xs[:-1]) & (left_n >= min_leaf) & (right_n >= min_leaf)
        if not np.any(valid):
            continue
        gain = csum ** 2 / left_n + (total - csum) ** 2 / right_n - parent
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best[0]:
            threshold = float((xs[i] + xs[i + 1]) / 2.0)
            # adjacent floats: the midpoint may round up onto the right value
            if threshold >= xs[i + 1]:
                threshold = float(xs[i])
            best = (float(gain[i]), j, threshold)
    return best


def _grow(x: np.ndarray, r: np.ndarray, depth: int, config: GbdtConfig, gains: np.ndarray) -> TreeNode:
    node = TreeNode(value=float(r.mean()))
    if depth >= config.max_depth or r.size < 2 * config.min_samples_leaf or np.ptp(r) == 0:
        return node
    sse = float(np.sum((r - node.value) ** 2))
    gain, feature, threshold = _best_split(x, r, config.min_samples_leaf)
    if feature < 0 or gain <= _GAIN_RTOL * sse:
        return node
    gains[feature] += gain
    mask = x[:, feature] <= threshold
    node.feature = feature
    node.threshold = threshold
    node.left = _grow(x[mask], r[mask], depth + 1, config, gains)
    node.right = _grow(x[~mask], r[~mask], depth + 1, config, gains)
    return node


def _tree_predict(node: TreeNode, x: np.ndarray) -> np.ndarray:
    if node.is_leaf:
        return np.full(x.shape[0], node.value)
    out = np.empty(x.shape[0])
    mask = x[:, node.feature] <= node.threshold
    out[mask] = _tree_predict(node.left, x[mask])
    out[~mask] = _tree_predict(node.right, x[~mask])
    return out


def _as_design(features, n_features: Optional[int] = None) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValidationError("features must be an n x f matrix")
    if n_features is not None and x.shape[1] != n_features:
        raise ValidationError(f"model expects {n_features} features, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("features contain non-finite values")
    return x


def fit(features, target, config: Optional[GbdtConfig] = None, seed: int = 0) -> GbdtModel:
    """
    Fit squared-error boosted trees

    Starts from the target mean; every round grows one tree on the current
    residuals and adds it scaled by the learning rate. The seed is recorded
    only: exact splitting with deterministic tie-breaks draws nothing random.
    """
    config = config or GbdtConfig()
    x = _as_design(features)
    y = np.asarray(target, dtype=np.float64).ravel()
    n, f = x.shape
    if n < 2:
        raise ValidationError(f"need at least 2 samples, got {n}")
    if f < 1:
        raise ValidationError("need at least 1 feature")
    if y.size != n:
        raise ValidationError(f"target length {y.size} does not match {n} samples")
    if not np.all(np.isfinite(y)):
        raise ValidationError("target contains non-finite values")

    model = GbdtModel(config=config, n_features=f, base=float(y.mean()), gains=np.zeros(f), seed=seed)
    pred = np.full(n, model.base)
    for _ in range(config.n_trees):
        residual = y - pred
        tree = _grow(x, residual, 0, config, model.gains)
        model.trees.append(tree)
        pred = pred + config.learning_rate * _tree_predict(tree, x)
        model.train_loss.append(float(np.mean((y - pred) ** 2)))

    logger.debug(
        f"🌲 Boosted {config.n_trees} trees (depth {config.max_depth}) on {n}x{f}; "
        f"final train MSE {model.train_loss[-1]:.3g}"
    )
    return model


def predict(model: GbdtModel, features) -> np.ndarray:
    x = _as_design(features, model.n_features)
    out = np.full(x.shape[0], model.base)
    for tree in model.trees:
        out += model.config.learning_rate * _tree_predict(tree, x)
    return out


@dataclass
class ImportanceVector:
    features: List[str]
    shares: List[float]

    def validate(self):
        if len(self.features) != len(self.shares):
            raise ValidationError("feature names and shares differ in length")
        arr = np.asarray(self.shares, dtype=np.float64)
        if np.any(arr < 0):
            raise ValidationError("importance shares must be non-negative")
        total = float(arr.sum())
        if total != 0.0 and abs(total - 1.0) > 1e-9:
            raise ValidationError(f"importance shares sum to {total}, expected 1")

    def to_dict(self) -> Dict[str, Any]:
        return {"features": list(self.features), "shares": list(self.shares)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ImportanceVector":
        return cls(features=list(data["features"]), shares=[float(v) for v in data["shares"]])

    def share_of(self, name: str) -> float:
        return self.shares[self.features.index(name)]


def importance(model: GbdtModel, names: Optional[Sequence[str]] = None) -> ImportanceVector:
    """Split-gain shares per feature; all zero when no split ever happened"""
    names = list(names) if names is not None else [f"x{j}" for j in range(model.n_features)]
    if len(names) != model.n_features:
        raise ValidationError(f"{len(names)} names for {model.n_features} features")
    total = float(model.gains.sum())
    shares = (model.gains / total) if total > 0 else np.zeros(model.n_features)
    return ImportanceVector(features=names, shares=[float(s) for s in shares])


def importance_table(records: Sequence[Dict[str, float]], target: str = "transfer",
                     features: Optional[Sequence[str]] = None,
                     config: Optional[GbdtConfig] = None, seed: int = 0) -> ImportanceVector:
    """
    Fit on one record per model and return the gain share of each feature

    Args:
        records: dicts holding every feature plus the target key
        target: key of the predicted value
        features: feature keys in output order; defaults to the first
            record's non-target keys
    """
    if not records:
        raise ValidationError("no records given")
    if features is None:
        features = [k for k in records[0] if k != target]
    features = list(features)
    if not features:
        raise ValidationError("records carry no feature columns")

    rows, y = [], []
    for i, rec in enumerate(records):
        missing = [k for k in list(features) + [target] if k not in rec]
        if missing:
            raise ValidationError(f"record {i}: missing key(s) {', '.join(missing)}")
        rows.append([float(rec[k]) for k in features])
        y.append(float(rec[target]))

    model = fit(np.asarray(rows), np.asarray(y), config, seed)
    return importance(model, features)
