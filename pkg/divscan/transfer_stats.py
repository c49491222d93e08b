"""
Transferability scoring and correlation statistics

Downstream accuracies are logit-transformed, centered per dataset across
models, and summarized per model by mean and corrected standard error.
Predictors such as CIS are compared against the scores with Pearson,
Spearman, Kendall tau-b and R^2.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List

import numpy as np
import pandas as pd
from scipy.stats import kendalltau, pearsonr, spearmanr

from .errors import ValidationError
from .tensor_io import AccuracyTable

logger = logging.getLogger(__name__)

_CENTER_TOL = 1e-9


def logit(p):
    """Natural log-odds; p must lie strictly inside (0, 1)"""
    arr = np.asarray(p, dtype=np.float64)
    if not np.all((arr > 0.0) & (arr < 1.0)):
        raise ValidationError("logit needs values strictly inside (0, 1); clamp accuracies first")
    out = np.log(arr / (1.0 - arr))
    return float(out) if out.ndim == 0 else out


def cis(accuracy: float, diversity: float) -> float:
    """Calibrated Imagenet Score: upstream accuracy x feature diversity"""
    for name, value in (("accuracy", accuracy), ("diversity", diversity)):
        if value is None or not (0.0 <= float(value) <= 1.0):
            raise ValidationError(f"{name} must lie in [0, 1], got {value}")
    return float(accuracy) * float(diversity)


@dataclass
class ModelScore:
    model_id: str
    mean_adjusted: float
    stderr: float

    def to_dict(self) -> Dict[str, Any]:
        return {"model_id": self.model_id, "mean_adjusted": self.mean_adjusted, "stderr": self.stderr}


@dataclass
class TransferScores:
    per_model: List[ModelScore] = field(default_factory=list)
    datasets: List[str] = field(default_factory=list)
    # models x datasets adjusted logit accuracies, kept for the centering check
    adjusted: List[List[float]] = field(default_factory=list)

    def validate(self):
        if len(self.per_model) < 2:
            raise ValidationError("transfer scores need at least 2 models")
        if any(s.stderr < 0 for s in self.per_model):
            raise ValidationError("standard errors must be non-negative")
        if self.adjusted:
            grid = np.asarray(self.adjusted, dtype=np.float64)
            if grid.shape != (len(self.per_model), len(self.datasets)):
                raise ValidationError("adjusted grid does not match models x datasets")
            if np.any(np.abs(grid.sum(axis=0)) > _CENTER_TOL):
                raise ValidationError("adjusted accuracies do not sum to 0 per dataset")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "per_model": [s.to_dict() for s in self.per_model],
            "datasets": list(self.datasets),
            "adjusted": [list(row) for row in self.adjusted],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TransferScores":
        return cls(
            per_model=[ModelScore(**s) for s in data["per_model"]],
            datasets=list(data.get("datasets", [])),
            adjusted=[list(row) for row in data.get("adjusted", [])],
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([s.to_dict() for s in self.per_model]).set_index("model_id")

    def score_of(self, model_id: str) -> float:
        for s in self.per_model:
            if s.model_id == model_id:
                return s.mean_adjusted
        raise ValidationError(f"no transfer score for model '{model_id}'")


def transfer_scores(table: AccuracyTable) -> TransferScores:
    """
    Per-model transferability from a models x datasets accuracy table

    y = logit(acc) is centered per dataset over models. Each model gets the
    mean of its adjusted values across datasets and the standard error
    (sample std / sqrt(|D|)) multiplied by |M| / (|M| - 1); the standard
    error is 0 for a single dataset.
    """
    n_models, n_datasets = table.acc.shape
    if n_models < 2:
        raise ValidationError(f"transfer scores need at least 2 models, got {n_models}")

    y = logit(table.acc)
    adjusted = y - y.mean(axis=0, keepdims=True)
    means = adjusted.mean(axis=1)
    if n_datasets > 1:
        stderr = adjusted.std(axis=1, ddof=1) / math.sqrt(n_datasets)
    else:
        stderr = np.zeros(n_models)
    stderr = stderr * (n_models / (n_models - 1))

    logger.debug(f"📈 Transfer scores for {n_models} models over {n_datasets} datasets")
    return TransferScores(
        per_model=[
            ModelScore(model_id=m, mean_adjusted=float(mu), stderr=float(se))
            for m, mu, se in zip(table.models, means, stderr)
        ],
        datasets=list(table.datasets),
        adjusted=adjusted.tolist(),
    )


def rank_models(scores: TransferScores) -> List[ModelScore]:
    """Models from most to least transferable; ties keep table order"""
    return sorted(scores.per_model, key=lambda s: -s.mean_adjusted)


@dataclass
class CorrelationReport:
    n: int
    pearson: float
    spearman: float
    kendall: float
    r_squared: float
    slope: float = 0.0
    intercept: float = 0.0

    def validate(self):
        for name in ("pearson", "spearman", "kendall"):
            value = getattr(self, name)
            if not (-1.0 <= value <= 1.0):
                raise ValidationError(f"{name} coefficient {value} outside [-1, 1]")
        if self.n < 3:
            raise ValidationError("correlations need at least 3 points")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "pearson": self.pearson,
            "spearman": self.spearman,
            "kendall": self.kendall,
            "r_squared": self.r_squared,
            "slope": self.slope,
            "intercept": self.intercept,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CorrelationReport":
        return cls(**data)


def _coefficient(value) -> float:
    return min(1.0, max(-1.0, float(value)))


def correlate(x, y) -> CorrelationReport:
    """
    Pearson r, Spearman rho (average ranks), Kendall tau-b and R^2 of the
    least-squares line of y on x
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValidationError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise ValidationError(f"need at least 3 points, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("correlation inputs must be finite")
    if np.ptp(x) == 0:
        raise ValidationError("x is constant; correlation undefined")
    if np.ptp(y) == 0:
        raise ValidationError("y is constant; correlation undefined")

    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    ss_res = float(np.dot(residual, residual))
    ss_tot = float(np.dot(y - y.mean(), y - y.mean()))

    return CorrelationReport(
        n=int(x.size),
        pearson=_coefficient(pearsonr(x, y)[0]),
        spearman=_coefficient(spearmanr(x, y)[0]),
        kendall=_coefficient(kendalltau(x, y, variant="b")[0]),
        r_squared=1.0 - ss_res / ss_tot,
        slope=float(slope),
        intercept=float(intercept),
    )
