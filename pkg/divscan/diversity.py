"""
Clustering and spectral feature diversity

Clustering diversity is the area under the cluster-ratio curve of a greedy
average-linkage agglomeration over signed cosine similarity, integrated over
thresholds tau in [0, 1]. Spectral diversity is one minus the normalized area
under the cumulative explained-variance curve of the feature spectrum.
Both are averaged over a model's feature units and multiplied by upstream
accuracy to give the Calibrated Imagenet Score (CIS).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import DEFAULT_GRID_STEP, DEFAULT_RANK_TOL, Settings, worker_count
from .errors import NumericalError, ValidationError
from .tensor_io import TensorBundle
from .transfer_stats import cis
from .weight_features import FeatureMatrix, extract_all

logger = logging.getLogger(__name__)

MEASURES = ("cluster", "spectral", "both")
_AVG_TOL = 1e-12


@dataclass(frozen=True)
class ClusterParams:
    grid_step: float = DEFAULT_GRID_STEP
    linkage: str = "average-cosine"

    def __post_init__(self):
        step = self.grid_step
        if not (0.0 < step <= 1.0):
            raise ValidationError(f"grid_step must lie in (0, 1], got {step}")
        if abs(round(1.0 / step) * step - 1.0) > 1e-9:
            raise ValidationError(f"1/grid_step must be an integer, got grid_step={step}")
        if self.linkage != "average-cosine":
            raise ValidationError(f"only average-cosine linkage is supported, got {self.linkage!r}")

    @property
    def intervals(self) -> int:
        return int(round(1.0 / self.grid_step))

    def grid(self) -> np.ndarray:
        m = self.intervals
        return np.arange(m + 1, dtype=np.float64) / m


@dataclass(frozen=True)
class MergeStep:
    """Cluster `right` merged into cluster `left` at average similarity `similarity`"""

    left: int
    right: int
    similarity: float


def cosine_similarity_matrix(matrix: np.ndarray) -> np.ndarray:
    """Pairwise signed cosine similarity between columns, clipped to [-1, 1]"""
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=0)
    if np.any(norms == 0.0):
        raise ValidationError("cosine similarity is undefined for a zero column")
    unit = matrix / norms
    return np.clip(unit.T @ unit, -1.0, 1.0)


def merge_sequence(features: FeatureMatrix) -> List[MergeStep]:
    """
    Full greedy average-linkage merge order

    At every step the active cluster pair with the highest mean pairwise
    cosine is merged. A cluster lives in the slot of its smallest column
    index, so the row-major argmax over the upper triangle breaks exact ties
    by the lowest (min-index, min-index) pair. The sequence does not depend
    on tau: agglomeration at threshold tau is its longest prefix whose
    similarities all exceed tau.
    """
    sims = cosine_similarity_matrix(features.matrix)
    n = sims.shape[0]
    sums = sims.copy()
    sizes = np.ones(n, dtype=np.float64)
    active = np.ones(n, dtype=bool)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)

    steps: List[MergeStep] = []
    for _ in range(n - 1):
        valid = upper & active[:, None] & active[None, :]
        avg = np.where(valid, sums / np.outer(sizes, sizes), -np.inf)
        flat = int(np.argmax(avg))
        i, j = divmod(flat, n)
        steps.append(MergeStep(left=i, right=j, similarity=float(avg[i, j])))

        sums[i, :] += sums[j, :]
        sums[:, i] += sums[:, j]
        sizes[i] += sizes[j]
        active[j] = False
    return steps


def _merge_count(steps: Sequence[MergeStep], tau: float) -> int:
    for k, step in enumerate(steps):
        if not step.similarity > tau:
            return k
    return len(steps)


def agglomerate(features: FeatureMatrix, tau: float) -> List[List[int]]:
    """
    Partition feature columns by greedy agglomeration at threshold tau

    Returns:
        Clusters as sorted lists of column indices, ordered by smallest index
    """
    steps = merge_sequence(features)
    members = {i: [i] for i in range(features.n_features)}
    for step in steps[:_merge_count(steps, tau)]:
        members[step.left].extend(members.pop(step.right))
    return sorted(sorted(cluster) for cluster in members.values())


def cluster_ratio_curve(features: FeatureMatrix, taus: np.ndarray) -> np.ndarray:
    """Cluster ratio at every tau, sharing one merge sequence"""
    steps = merge_sequence(features)
    n = features.n_features
    return np.array([(n - _merge_count(steps, float(t))) / n for t in taus], dtype=np.float64)


def cluster_ratio(features: FeatureMatrix, tau: float) -> float:
    """Number of clusters at threshold tau divided by number of features"""
    return float(cluster_ratio_curve(features, np.array([tau]))[0])


def cluster_diversity(features: FeatureMatrix, params: Optional[ClusterParams] = None) -> float:
    """Trapezoidal area under the cluster-ratio curve on the uniform tau grid"""
    params = params or ClusterParams()
    ratios = cluster_ratio_curve(features, params.grid())
    return float(np.sum((ratios[:-1] + ratios[1:]) / 2.0) / params.intervals)


def explained_variance_curve(features: FeatureMatrix, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Cumulative explained-variance fractions over the non-zero spectrum"""
    try:
        singular = np.linalg.svd(np.asarray(features.matrix, dtype=np.float64), compute_uv=False)
    except np.linalg.LinAlgError as e:
        label = f"{features.layer_name} {features.sub_unit}".strip()
        raise NumericalError(f"{label}: singular value decomposition did not converge: {e}")
    eig = singular ** 2
    if eig.size == 0 or not eig[0] > 0.0:
        return np.zeros(0)
    eig = eig[eig > rank_tol * eig[0]]
    return np.cumsum(eig) / np.sum(eig)


def spectral_diversity(features: FeatureMatrix, rank_tol: float = DEFAULT_RANK_TOL) -> float:
    """One minus the mean cumulative explained-variance fraction; 0 at rank <= 1"""
    curve = explained_variance_curve(features, rank_tol)
    if curve.size <= 1:
        return 0.0
    return float(1.0 - np.mean(curve))


@dataclass
class UnitDiversity:
    layer_name: str
    sub_unit: str
    cluster_div: Optional[float]
    spectral_div: Optional[float]
    zero_dropped: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "layer_name": self.layer_name,
            "sub_unit": self.sub_unit,
            "cluster_div": self.cluster_div,
            "spectral_div": self.spectral_div,
            "zero_dropped": self.zero_dropped,
        }


@dataclass
class DiversityReport:
    model_id: str
    per_unit: List[UnitDiversity] = field(default_factory=list)
    cluster_avg: Optional[float] = None
    spectral_avg: Optional[float] = None
    cis_cluster: Optional[float] = None
    cis_spectral: Optional[float] = None
    upstream_accuracy: Optional[float] = None
    grid_step: float = DEFAULT_GRID_STEP

    def validate(self):
        """Check the report's internal consistency before it is written"""
        if not self.per_unit:
            if self.cluster_avg is not None or self.spectral_avg is not None:
                raise ValidationError(f"report '{self.model_id}': averages given without per-unit values")
            raise ValidationError(f"report '{self.model_id}': no per-unit values")

        for attr, avg_attr, cis_attr in (
            ("cluster_div", "cluster_avg", "cis_cluster"),
            ("spectral_div", "spectral_avg", "cis_spectral"),
        ):
            values = [getattr(u, attr) for u in self.per_unit]
            avg = getattr(self, avg_attr)
            cis_value = getattr(self, cis_attr)
            if avg is None:
                if any(v is not None for v in values) or cis_value is not None:
                    raise ValidationError(f"report '{self.model_id}': {attr} values without {avg_attr}")
                continue
            if any(v is None for v in values):
                raise ValidationError(f"report '{self.model_id}': {avg_attr} given but some {attr} missing")
            if any(not (0.0 <= v <= 1.0) for v in values):
                raise ValidationError(f"report '{self.model_id}': {attr} outside [0, 1]")
            if abs(float(np.mean(values)) - avg) > _AVG_TOL:
                raise ValidationError(f"report '{self.model_id}': {avg_attr} is not the mean of {attr}")
            if (cis_value is None) != (self.upstream_accuracy is None):
                raise ValidationError(f"report '{self.model_id}': {cis_attr} requires upstream accuracy")
            if cis_value is not None and abs(cis_value - self.upstream_accuracy * avg) > _AVG_TOL:
                raise ValidationError(f"report '{self.model_id}': {cis_attr} != accuracy x {avg_attr}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model_id": self.model_id,
            "per_unit": [u.to_dict() for u in self.per_unit],
            "cluster_avg": self.cluster_avg,
            "spectral_avg": self.spectral_avg,
            "cis_cluster": self.cis_cluster,
            "cis_spectral": self.cis_spectral,
            "upstream_accuracy": self.upstream_accuracy,
            "grid_step": self.grid_step,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DiversityReport":
        return cls(
            model_id=data["model_id"],
            per_unit=[UnitDiversity(**u) for u in data.get("per_unit", [])],
            cluster_avg=data.get("cluster_avg"),
            spectral_avg=data.get("spectral_avg"),
            cis_cluster=data.get("cis_cluster"),
            cis_spectral=data.get("cis_spectral"),
            upstream_accuracy=data.get("upstream_accuracy"),
            grid_step=data.get("grid_step", DEFAULT_GRID_STEP),
        )


def _measure_flags(measure: str) -> Tuple[bool, bool]:
    if measure not in MEASURES:
        raise ValidationError(f"measure must be one of {MEASURES}, got {measure!r}")
    return measure in ("cluster", "both"), measure in ("spectral", "both")


def unit_diversity(features: FeatureMatrix, params: ClusterParams, measure: str = "both",
                   rank_tol: float = DEFAULT_RANK_TOL) -> UnitDiversity:
    want_cluster, want_spectral = _measure_flags(measure)
    return UnitDiversity(
        layer_name=features.layer_name,
        sub_unit=features.sub_unit,
        cluster_div=cluster_diversity(features, params) if want_cluster else None,
        spectral_div=spectral_diversity(features, rank_tol) if want_spectral else None,
        zero_dropped=features.zero_dropped,
    )


def summarize_units(model_id: str, units: List[UnitDiversity], params: ClusterParams,
                    upstream_accuracy: Optional[float] = None) -> DiversityReport:
    """Average per-unit values (in order) and attach CIS when accuracy is known"""
    if not units:
        raise ValidationError(f"model '{model_id}': no feature units to average")

    def mean_of(attr):
        values = [getattr(u, attr) for u in units]
        if any(v is None for v in values):
            return None
        return float(np.mean(values))

    cluster_avg = mean_of("cluster_div")
    spectral_avg = mean_of("spectral_div")
    has_acc = upstream_accuracy is not None
    return DiversityReport(
        model_id=model_id,
        per_unit=list(units),
        cluster_avg=cluster_avg,
        spectral_avg=spectral_avg,
        cis_cluster=cis(upstream_accuracy, cluster_avg) if has_acc and cluster_avg is not None else None,
        cis_spectral=cis(upstream_accuracy, spectral_avg) if has_acc and spectral_avg is not None else None,
        upstream_accuracy=upstream_accuracy,
        grid_step=params.grid_step,
    )


def model_diversity(bundle: TensorBundle, params: Optional[ClusterParams] = None,
                    exclude_pattern: Optional[str] = None, measure: str = "both",
                    upstream_accuracy: Optional[float] = None,
                    settings: Optional[Settings] = None) -> DiversityReport:
    """
    Diversity of every feature unit of a model plus model averages and CIS

    Args:
        bundle: weight bundle
        params: clustering grid parameters
        exclude_pattern: regex of layer names to skip
        measure: "cluster", "spectral" or "both"
        upstream_accuracy: overrides the bundle's recorded accuracy for CIS
        settings: thread cap

    Returns:
        DiversityReport; each MSA head counts as one unit
    """
    params = params or ClusterParams()
    settings = settings or Settings.from_env()
    _measure_flags(measure)

    features = extract_all(bundle, exclude_pattern, settings)
    if not features:
        raise ValidationError(f"model '{bundle.model_id}': no layers left to analyse")

    logger.info(f"📊 {bundle.model_id}: measuring {measure} diversity of {len(features)} feature units")
    with ThreadPoolExecutor(max_workers=worker_count(settings)) as pool:
        units = list(pool.map(
            lambda fm: unit_diversity(fm, params, measure, settings.rank_tol), features
        ))

    accuracy = upstream_accuracy if upstream_accuracy is not None else bundle.upstream_accuracy
    report = summarize_units(bundle.model_id, units, params, accuracy)
    logger.info(
        f"✅ {bundle.model_id}: cluster_avg={report.cluster_avg} spectral_avg={report.spectral_avg}"
    )
    return report
