"""
Toy two-stage training with Controlled Label Injection

A p -> h -> K model (tanh backbone, linear head) trained by hand-written
gradients on Gaussian blobs:

1. optional instance-discrimination pretraining of the backbone, where each
   sample's positive is its own noised view and every other view in the
   minibatch is a negative
2. optional centroid initialization of the head
3. Controlled Label Injection: the head is updated every step, the backbone
   only on steps whose 1-based index is a multiple of the control cycle T

T = 1 is ordinary fine-tuning and T = inf is linear probing.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .diversity import ClusterParams, model_diversity
from .errors import BundleIOError, ValidationError
from .tensor_io import LayerTensor, TensorBundle

logger = logging.getLogger(__name__)

INF_CYCLE = math.inf
DEFAULT_CYCLES = (1, 2, 3, 4, 5, 10, 50, 100, INF_CYCLE)
LOG_COLUMNS = ["step", "loss", "accuracy", "backbone_updated", "cluster_diversity"]

_NORM_FLOOR = 1e-12


def parse_control_cycle(text: str) -> Union[int, float]:
    """'inf' (or '∞') is the never-update sentinel, anything else a positive integer"""
    raw = str(text).strip().lower()
    if raw in ("inf", "infinity", "∞"):
        return INF_CYCLE
    try:
        value = int(raw)
    except ValueError:
        raise ValidationError(f"control cycle must be a positive integer or 'inf', got {text!r}")
    if value < 1:
        raise ValidationError(f"control cycle must be >= 1, got {value}")
    return value


def cycle_label(cycle: Union[int, float]) -> Union[int, str]:
    return "inf" if math.isinf(cycle) else int(cycle)


@dataclass
class ToyModel:
    """Backbone tanh(W1 x + b1), head W_ff h + b_ff"""

    w1: np.ndarray
    b1: np.ndarray
    w_ff: np.ndarray
    b_ff: np.ndarray

    def __post_init__(self):
        self.w1 = np.array(self.w1, dtype=np.float64)
        self.b1 = np.array(self.b1, dtype=np.float64).ravel()
        self.w_ff = np.array(self.w_ff, dtype=np.float64)
        self.b_ff = np.array(self.b_ff, dtype=np.float64).ravel()
        if self.w1.ndim != 2 or self.w_ff.ndim != 2:
            raise ValidationError("toy weights must be matrices")
        h, p = self.w1.shape
        k = self.w_ff.shape[0]
        if min(h, p, k) < 1:
            raise ValidationError("toy model dimensions must be >= 1")
        if self.b1.shape != (h,) or self.w_ff.shape != (k, h) or self.b_ff.shape != (k,):
            raise ValidationError(
                f"inconsistent toy shapes: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w_ff {self.w_ff.shape}, b_ff {self.b_ff.shape}"
            )
        for name in ("w1", "b1", "w_ff", "b_ff"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"toy parameter {name} is not finite")

    @classmethod
    def init(cls, n_inputs: int, n_hidden: int, n_classes: int, seed: int = 0) -> "ToyModel":
        rng = np.random.default_rng(seed)
        return cls(
            w1=rng.normal(0.0, 1.0 / math.sqrt(n_inputs), size=(n_hidden, n_inputs)),
            b1=np.zeros(n_hidden),
            w_ff=rng.normal(0.0, 1.0 / math.sqrt(n_hidden), size=(n_classes, n_hidden)),
            b_ff=np.zeros(n_classes),
        )

    @property
    def n_inputs(self) -> int:
        return int(self.w1.shape[1])

    @property
    def n_hidden(self) -> int:
        return int(self.w1.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.w_ff.shape[0])

    def copy(self) -> "ToyModel":
        return ToyModel(self.w1.copy(), self.b1.copy(), self.w_ff.copy(), self.b_ff.copy())

    def embed(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.w1.T + self.b1)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.embed(x) @ self.w_ff.T + self.b_ff


@dataclass
class SyntheticTask:
    """K Gaussian blobs with a shared isotropic sigma"""

    means: np.ndarray
    sigma: float
    n_per_class: int
    seed: int = 0
    x: np.ndarray = field(init=False, repr=False)
    y: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.means.ndim != 2 or self.means.shape[0] < 1:
            raise ValidationError("means must be a K x p matrix")
        if not self.sigma > 0:
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")
        if self.n_per_class < 1:
            raise ValidationError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if np.unique(self.means, axis=0).shape[0] != self.means.shape[0]:
            raise ValidationError("blob means must be distinct")
        rng = np.random.default_rng(self.seed)
        k, p = self.means.shape
        self.y = np.repeat(np.arange(k), self.n_per_class)
        self.x = self.means[self.y] + rng.normal(0.0, self.sigma, size=(self.y.size, p))

    @property
    def n_classes(self) -> int:
        return int(self.means.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @property
    def n(self) -> int:
        return int(self.y.size)


def make_task(n_classes: int = 3, dim: int = 8, n_per_class: int = 50, sigma: float = 0.5,
              separation: float = 3.0, seed: int = 0) -> SyntheticTask:
    """Blob task whose means are drawn at the given scale from the seed"""
    if n_classes < 1 or dim < 1:
        raise ValidationError("n_classes and dim must be >= 1")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, separation / math.sqrt(dim), size=(n_classes, dim))
    return SyntheticTask(means=means, sigma=sigma, n_per_class=n_per_class, seed=seed + 1)


@dataclass(frozen=True)
class InjectionConfig:
    control_cycle: Union[int, float] = 1
    steps: int = 100
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        cycle = self.control_cycle
        if isinstance(cycle, bool):
            raise ValidationError("control cycle must be a positive integer or inf")
        if not (cycle == INF_CYCLE or (float(cycle).is_integer() and cycle >= 1)):
            raise ValidationError(f"control cycle must be a positive integer or inf, got {cycle}")
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if not self.lr > 0:
            raise ValidationError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")

    def updates_backbone(self, step: int) -> bool:
        """Backbone steps are the 1-based multiples of the control cycle"""
        return not math.isinf(self.control_cycle) and step % int(self.control_cycle) == 0


def minibatch_indices(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless consecutive slices of a fresh permutation per pass"""
    rng = np.random.default_rng(seed)
    size = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n, size):
            yield order[start:start + size]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_and_grads(model: ToyModel, x: np.ndarray, y: np.ndarray,
                            backbone: bool = True) -> Tuple[float, float, Dict[str, np.ndarray]]:
    """
    Mean softmax cross-entropy, minibatch accuracy and parameter gradients

    Backbone gradients are only formed when `backbone` is true.
    """
    b = x.shape[0]
    hidden = model.embed(x)
    logits = hidden @ model.w_ff.T + model.b_ff
    probs = _softmax(logits)
    rows = np.arange(b)
    loss = float(-np.mean(np.log(np.maximum(probs[rows, y], 1e-300))))
    accuracy = float(np.mean(np.argmax(logits, axis=1) == y))

    dlogits = probs.copy()
    dlogits[rows, y] -= 1.0
    dlogits /= b
    grads = {"w_ff": dlogits.T @ hidden, "b_ff": dlogits.sum(axis=0)}
    if backbone:
        dz = (dlogits @ model.w_ff) * (1.0 - hidden ** 2)
        grads["w1"] = dz.T @ x
        grads["b1"] = dz.sum(axis=0)
    return loss, accuracy, grads


def _normalize(h: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), _NORM_FLOOR)
    return h / norms, norms


def _normalize_backward(unit: np.ndarray, norms: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    return (d_unit - unit * np.sum(unit * d_unit, axis=1, keepdims=True)) / norms


def contrastive_loss_and_grads(model: ToyModel, x: np.ndarray, views: np.ndarray,
                               temperature: float) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Normalized-temperature contrastive loss between samples and their views

    Row i of the similarity matrix compares sample i with every view in the
    batch; the matching view is the target class.
    """
    b = x.shape[0]
    if b < 2:
        raise ValidationError("contrastive loss needs at least 2 samples per batch")
    ha = model.embed(x)
    hb = model.embed(views)
    ua, na = _normalize(ha)
    ub, nb = _normalize(hb)
    sims = ua @ ub.T / temperature
    probs = _softmax(sims)
    loss = float(-np.mean(np.log(np.maximum(np.diag(probs), 1e-300))))

    dsims = (probs - np.eye(b)) / b
    dua = dsims @ ub / temperature
    dub = dsims.T @ ua / temperature
    dza = _normalize_backward(ua, na, dua) * (1.0 - ha ** 2)
    dzb = _normalize_backward(ub, nb, dub) * (1.0 - hb ** 2)
    grads = {
        "w1": dza.T @ x + dzb.T @ views,
        "b1": dza.sum(axis=0) + dzb.sum(axis=0),
    }
    return loss, grads


def pretrain_instance_discrimination(model: ToyModel, task: SyntheticTask, epochs: int = 10,
                                     lr: float = 0.1, noise_sigma: float = 0.1,
                                     temperature: float = 0.5, batch_size: int = 32,
                                     seed: int = 0) -> ToyModel:
    """
    Contrastive pretraining of the backbone; the head is left untouched

    Each epoch walks a fresh permutation in consecutive batches; a trailing
    batch of one sample has no negatives and is skipped.
    """
    if batch_size < 2:
        raise ValidationError(f"contrastive pretraining needs batch_size >= 2, got {batch_size}")
    if epochs < 0:
        raise ValidationError(f"epochs must be >= 0, got {epochs}")
    if not lr > 0 or not temperature > 0 or noise_sigma < 0:
        raise ValidationError("lr and temperature must be > 0 and noise_sigma >= 0")
    if task.dim != model.n_inputs:
        raise ValidationError(f"task has {task.dim} inputs, model expects {model.n_inputs}")

    model = model.copy()
    if epochs == 0:
        return model

    rng = np.random.default_rng(seed)
    size = min(batch_size, task.n)
    for epoch in range(epochs):
        order = rng.permutation(task.n)
        losses = []
        for start in range(0, task.n, size):
            idx = order[start:start + size]
            if idx.size < 2:
                continue
            xb = task.x[idx]
            views = xb + rng.normal(0.0, noise_sigma, size=xb.shape)
            loss, grads = contrastive_loss_and_grads(model, xb, views, temperature)
            model.w1 = model.w1 - lr * grads["w1"]
            model.b1 = model.b1 - lr * grads["b1"]
            losses.append(loss)
        logger.debug(f"🔁 pretrain epoch {epoch + 1}/{epochs}: contrastive loss {np.mean(losses):.4f}")
    return model


def centroid_init_head(model: ToyModel, task: SyntheticTask) -> ToyModel:
    """Head row k = mean backbone embedding of class k, bias 0"""
    if task.n_classes != model.n_classes:
        raise ValidationError(f"task has {task.n_classes} classes, model head has {model.n_classes}")
    hidden = model.embed(task.x)
    rows = []
    for k in range(task.n_classes):
        members = hidden[task.y == k]
        if members.shape[0] == 0:
            raise ValidationError(f"class {k} has no samples")
        rows.append(members.mean(axis=0))
    out = model.copy()
    out.w_ff = np.vstack(rows)
    out.b_ff = np.zeros(model.n_classes)
    return out


@dataclass
class StepRecord:
    step: int
    loss: float
    accuracy: float
    backbone_updated: bool
    cluster_diversity: Optional[float] = None


@dataclass
class InjectionResult:
    model: ToyModel
    log: List[StepRecord] = field(default_factory=list)

    @property
    def backbone_updates(self) -> int:
        return sum(1 for r in self.log if r.backbone_updated)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.log], columns=LOG_COLUMNS)


def require_diverse_backbone(n_hidden: int):
    """Backbone diversity needs at least two hidden units"""
    if n_hidden < 2:
        raise ValidationError(f"backbone diversity needs at least 2 hidden units, got {n_hidden}")


def controlled_label_injection(model: ToyModel, task: SyntheticTask, cfg: InjectionConfig,
                               diversity_every: int = 0) -> InjectionResult:
    """
    Supervised training with the backbone updated once every T head updates

    Every step takes a gradient step on the head. Steps whose 1-based index
    is a multiple of cfg.control_cycle also step the backbone, using the
    gradients of the same minibatch loss. Loss and accuracy are those of the
    minibatch before the update.

    Args:
        diversity_every: record backbone cluster diversity every this many
            steps (0 disables)
    """
    if task.dim != model.n_inputs or task.n_classes != model.n_classes:
        raise ValidationError("task and model dimensions disagree")
    if diversity_every < 0:
        raise ValidationError(f"diversity_every must be >= 0, got {diversity_every}")
    if diversity_every:
        require_diverse_backbone(model.n_hidden)

    model = model.copy()
    batches = minibatch_indices(task.n, cfg.batch_size, cfg.seed)
    log = []
    for step in range(1, cfg.steps + 1):
        idx = next(batches)
        update_backbone = cfg.updates_backbone(step)
        loss, accuracy, grads = cross_entropy_and_grads(model, task.x[idx], task.y[idx], update_backbone)
        model.w_ff = model.w_ff - cfg.lr * grads["w_ff"]
        model.b_ff = model.b_ff - cfg.lr * grads["b_ff"]
        if update_backbone:
            model.w1 = model.w1 - cfg.lr * grads["w1"]
            model.b1 = model.b1 - cfg.lr * grads["b1"]

        record = StepRecord(step=step, loss=loss, accuracy=accuracy, backbone_updated=update_backbone)
        if diversity_every and step % diversity_every == 0:
            record.cluster_diversity = diversity_trace([model])[0]
        log.append(record)

    result = InjectionResult(model=model, log=log)
    logger.info(
        f"🏷️  T={cycle_label(cfg.control_cycle)}: {cfg.steps} steps, "
        f"{result.backbone_updates} backbone updates, last loss {log[-1].loss:.4f}"
    )
    return result


@dataclass
class Evaluation:
    loss: float
    accuracy: float


def evaluate(model: ToyModel, task: SyntheticTask) -> Evaluation:
    """Full-data cross-entropy and accuracy"""
    loss, accuracy, _ = cross_entropy_and_grads(model, task.x, task.y, backbone=False)
    return Evaluation(loss=loss, accuracy=accuracy)


def model_to_bundle(model: ToyModel, model_id: str = "toy",
                    upstream_accuracy: Optional[float] = None) -> TensorBundle:
    """Backbone as a fully-connected layer of hidden-unit columns, head as a classifier"""
    p, h, k = model.n_inputs, model.n_hidden, model.n_classes
    return TensorBundle(
        model_id=model_id,
        layers=(
            LayerTensor("backbone.w1", "fully_connected", (p, h), model.w1.T),
            LayerTensor("backbone.b1", "bias", (h,), model.b1),
            LayerTensor("head.w", "classifier", (h, k), model.w_ff.T),
            LayerTensor("head.b", "bias", (k,), model.b_ff),
        ),
        upstream_accuracy=upstream_accuracy,
    )


def model_from_bundle(bundle: TensorBundle) -> ToyModel:
    try:
        w1 = bundle.layer("backbone.w1").data
        b1 = bundle.layer("backbone.b1").data
        w_ff = bundle.layer("head.w").data
        b_ff = bundle.layer("head.b").data
    except ValidationError as e:
        raise ValidationError(f"bundle '{bundle.model_id}' is not a toy model: {e}")
    return ToyModel(w1=w1.T.astype(np.float64), b1=b1.astype(np.float64),
                    w_ff=w_ff.T.astype(np.float64), b_ff=b_ff.astype(np.float64))


def diversity_trace(snapshots: Sequence[ToyModel], params: Optional[ClusterParams] = None) -> List[float]:
    """Model-average cluster diversity of each snapshot's backbone"""
    if not snapshots:
        raise ValidationError("diversity trace needs at least one snapshot")
    for m in snapshots:
        require_diverse_backbone(m.n_hidden)
    return [
        model_diversity(model_to_bundle(m), params, measure="cluster").cluster_avg
        for m in snapshots
    ]


@dataclass
class SweepPoint:
    control_cycle: Union[int, float]
    backbone_updates: int
    loss: float
    accuracy: float
    cluster_div: float
    spectral_div: float
    cis_cluster: float
    cis_spectral: float

    def to_dict(self) -> Dict[str, Any]:
        data = dict(vars(self))
        data["control_cycle"] = cycle_label(self.control_cycle)
        return data


@dataclass
class SweepReport:
    steps: int
    lr: float
    batch_size: int
    seed: int
    points: List[SweepPoint] = field(default_factory=list)

    def validate(self):
        if not self.points:
            raise ValidationError("sweep has no control cycles")
        for p in self.points:
            if not (0.0 <= p.accuracy <= 1.0):
                raise ValidationError(f"T={cycle_label(p.control_cycle)}: accuracy outside [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "steps": self.steps,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "points": [p.to_dict() for p in self.points],
        }


def control_cycle_sweep(model: ToyModel, task: SyntheticTask,
                        cycles: Sequence[Union[int, float]] = DEFAULT_CYCLES,
                        cfg: Optional[InjectionConfig] = None,
                        params: Optional[ClusterParams] = None) -> SweepReport:
    """
    Run Controlled Label Injection from the same start for every T

    Each point carries full-data accuracy, the backbone's cluster and
    spectral diversity and their CIS (accuracy x diversity).
    """
    cfg = cfg or InjectionConfig()
    if not cycles:
        raise ValidationError("no control cycles to sweep")
    require_diverse_backbone(model.n_hidden)
    report = SweepReport(steps=cfg.steps, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed)
    for cycle in cycles:
        result = controlled_label_injection(model, task, replace(cfg, control_cycle=cycle))
        ev = evaluate(result.model, task)
        div = model_diversity(model_to_bundle(result.model, upstream_accuracy=ev.accuracy), params)
        report.points.append(SweepPoint(
            control_cycle=cycle,
            backbone_updates=result.backbone_updates,
            loss=ev.loss,
            accuracy=ev.accuracy,
            cluster_div=div.cluster_avg,
            spectral_div=div.spectral_avg,
            cis_cluster=div.cis_cluster,
            cis_spectral=div.cis_spectral,
        ))
    return report


def write_log(result: InjectionResult, path: str) -> str:
    """Per-step log as CSV; floats keep 17 significant digits"""
    try:
        result.to_frame().to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        raise BundleIOError(f"cannot write training log {path}: {e}")
    return path
