"""
Weight bundle, embedding, accuracy-table and report I/O

A bundle is a directory holding manifest.json plus one raw blob per layer
(little-endian float32, row-major, no header). Tables are plain CSV files
parsed without locale support: '.' decimal point, no thousands separators.
Reports are UTF-8 JSON with sorted keys and 17 significant digits per float.
"""

import csv
import json
import logging
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .config import DEFAULT_CLAMP_EPS, Settings, worker_count
from .errors import BundleIOError, ValidationError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

FEATURE_KINDS = ("conv", "fully_connected", "msa_q", "msa_k", "msa_v")
MSA_KINDS = ("msa_q", "msa_k", "msa_v")
# Stored alongside the weights but never turned into features
AUXILIARY_KINDS = ("bias", "classifier", "activation")
LAYER_KINDS = FEATURE_KINDS + AUXILIARY_KINDS

_ARITY = {
    "conv": 4,
    "fully_connected": 2,
    "msa_q": 2,
    "msa_k": 2,
    "msa_v": 2,
    "bias": 1,
    "classifier": 2,
    "activation": 2,
}

_BLOB_DTYPE = np.dtype("<f4")
_DECIMAL_RE = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


@dataclass(frozen=True, eq=False)
class LayerTensor:
    """One named weight tensor with its kind metadata"""

    name: str
    kind: str
    shape: Tuple[int, ...]
    data: np.ndarray
    heads: int = 1

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise ValidationError("layer name must be a non-empty string")
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"layer '{self.name}': unknown kind '{self.kind}'")

        shape = tuple(self.shape)
        if not all(isinstance(s, (int, np.integer)) and not isinstance(s, bool) and s > 0 for s in shape):
            raise ValidationError(f"layer '{self.name}': shape must be positive integers, got {list(shape)}")
        shape = tuple(int(s) for s in shape)
        if len(shape) != _ARITY[self.kind]:
            raise ValidationError(
                f"layer '{self.name}': kind {self.kind} needs {_ARITY[self.kind]} axes, got {len(shape)}"
            )

        heads = self.heads
        if isinstance(heads, bool) or not isinstance(heads, (int, np.integer)) or heads < 1:
            raise ValidationError(f"layer '{self.name}': heads must be a positive integer")
        if self.kind in MSA_KINDS:
            if shape[0] % heads != 0:
                raise ValidationError(
                    f"layer '{self.name}': input width {shape[0]} not divisible by {heads} heads"
                )
        elif heads != 1:
            raise ValidationError(f"layer '{self.name}': heads only apply to msa kinds")

        data = np.asarray(self.data, dtype=np.float32)
        if data.size != math.prod(shape):
            raise ValidationError(
                f"layer '{self.name}': {data.size} values do not fill shape {list(shape)}"
            )
        data = np.array(data.reshape(shape), dtype=np.float32, order="C")
        if not np.all(np.isfinite(data)):
            raise ValidationError(f"layer '{self.name}': non-finite values")
        data.setflags(write=False)

        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "heads", int(heads))
        object.__setattr__(self, "data", data)

    def __eq__(self, other):
        if not isinstance(other, LayerTensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.kind == other.kind
            and self.shape == other.shape
            and self.heads == other.heads
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None

    @property
    def size(self) -> int:
        return int(self.data.size)


@dataclass(frozen=True)
class TensorBundle:
    """A model's weight tensors in manifest order"""

    model_id: str
    layers: Tuple[LayerTensor, ...]
    upstream_accuracy: Optional[float] = None

    def __post_init__(self):
        if not isinstance(self.model_id, str) or not self.model_id:
            raise ValidationError("model_id must be a non-empty string")
        layers = tuple(self.layers)
        names = [layer.name for layer in layers]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValidationError(f"duplicate layer names: {duplicates}")
        object.__setattr__(self, "layers", layers)

        acc = self.upstream_accuracy
        if acc is not None:
            if isinstance(acc, bool) or not isinstance(acc, (int, float, np.floating)):
                raise ValidationError("upstream_accuracy must be a number")
            acc = float(acc)
            if not (0.0 <= acc <= 1.0):
                raise ValidationError(f"upstream_accuracy {acc} outside [0, 1]")
            object.__setattr__(self, "upstream_accuracy", acc)

    def layer(self, name: str) -> LayerTensor:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise ValidationError(f"bundle '{self.model_id}' has no layer '{name}'")


@dataclass(frozen=True)
class EmbeddingSet:
    """Labelled embedding vectors with class indices in [0, K)"""

    vectors: np.ndarray
    labels: np.ndarray
    class_names: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if vectors.ndim != 2:
            raise ValidationError("embedding vectors must form an N x p matrix")
        n, p = vectors.shape
        if n < 2:
            raise ValidationError(f"need at least 2 embeddings, got {n}")
        if p < 1:
            raise ValidationError("embedding dimension must be >= 1")
        if labels.shape != (n,):
            raise ValidationError("one label per embedding is required")
        if not np.all(np.isfinite(vectors)):
            raise ValidationError("embeddings contain non-finite values")
        names = tuple(self.class_names) or tuple(str(k) for k in range(int(labels.max()) + 1))
        if labels.min() < 0 or labels.max() >= len(names):
            raise ValidationError(f"class indices must lie in [0, {len(names)})")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", names)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class AccuracyTable:
    """Dense models x datasets grid of clamped top-1 accuracies"""

    models: Tuple[str, ...]
    datasets: Tuple[str, ...]
    acc: np.ndarray

    def __post_init__(self):
        models = tuple(self.models)
        datasets = tuple(self.datasets)
        acc = np.asarray(self.acc, dtype=np.float64)
        if len(datasets) < 1:
            raise ValidationError("accuracy table needs at least one dataset column")
        if len(set(models)) != len(models):
            raise ValidationError("duplicate model_id in accuracy table")
        if acc.shape != (len(models), len(datasets)):
            raise ValidationError(
                f"accuracy grid shape {acc.shape} does not match {len(models)} models x {len(datasets)} datasets"
            )
        if not np.all(np.isfinite(acc)) or np.any(acc <= 0.0) or np.any(acc >= 1.0):
            raise ValidationError("accuracies must lie strictly inside (0, 1) after clamping")
        object.__setattr__(self, "models", models)
        object.__setattr__(self, "datasets", datasets)
        object.__setattr__(self, "acc", acc)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.acc, index=list(self.models), columns=list(self.datasets))


def clamp_accuracy(values, eps: float = DEFAULT_CLAMP_EPS):
    """Clamp accuracies into [eps, 1 - eps]; idempotent"""
    if not (0.0 < eps < 0.5):
        raise ValidationError(f"clamp_eps must lie in (0, 0.5), got {eps}")
    clamped = np.clip(np.asarray(values, dtype=np.float64), eps, 1.0 - eps)
    return float(clamped) if clamped.ndim == 0 else clamped


def parse_decimal(cell: str, where: str = "") -> float:
    """Parse a plain decimal number; rejects separators, words and inf/nan"""
    text = cell.strip()
    if not _DECIMAL_RE.match(text):
        raise ValidationError(f"non-numeric cell {cell!r}{where}")
    value = float(text)
    if not math.isfinite(value):
        raise ValidationError(f"non-finite cell {cell!r}{where}")
    return value


# ---------------------------------------------------------------------------
# Bundles
# ---------------------------------------------------------------------------

def _read_blob(bundle_dir: str, entry: Dict[str, Any]) -> LayerTensor:
    name = entry["name"]
    blob_path = os.path.join(bundle_dir, entry["file"])
    expected = math.prod(entry["shape"]) * _BLOB_DTYPE.itemsize
    try:
        actual = os.path.getsize(blob_path)
    except OSError as e:
        raise BundleIOError(f"layer '{name}': cannot read blob {blob_path}: {e}")
    if actual != expected:
        raise ValidationError(
            f"layer '{name}': shape {entry['shape']} needs {expected} bytes, blob has {actual}"
        )
    try:
        data = np.fromfile(blob_path, dtype=_BLOB_DTYPE)
    except OSError as e:
        raise BundleIOError(f"layer '{name}': cannot read blob {blob_path}: {e}")
    return LayerTensor(
        name=name,
        kind=entry["kind"],
        shape=tuple(entry["shape"]),
        data=data,
        heads=entry["heads"],
    )


def _manifest_entries(manifest: Dict[str, Any]) -> List[Dict[str, Any]]:
    layers = manifest.get("layers")
    if not isinstance(layers, list):
        raise ValidationError("manifest 'layers' must be a list")

    entries = []
    for i, raw in enumerate(layers):
        if not isinstance(raw, dict):
            raise ValidationError(f"manifest layer #{i} is not an object")
        missing = [k for k in ("name", "kind", "shape", "file") if k not in raw]
        if missing:
            raise ValidationError(f"manifest layer #{i} is missing {missing}")
        if raw["kind"] not in LAYER_KINDS:
            raise ValidationError(f"manifest layer '{raw['name']}': unknown kind '{raw['kind']}'")
        shape = raw["shape"]
        if not isinstance(shape, list) or not all(
            isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in shape
        ):
            raise ValidationError(f"manifest layer '{raw['name']}': shape must be a list of positive integers")
        entries.append({
            "name": raw["name"],
            "kind": raw["kind"],
            "shape": shape,
            "heads": raw.get("heads", 1),
            "file": raw["file"],
        })

    names = [e["name"] for e in entries]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise ValidationError(f"duplicate layer names: {duplicates}")
    return entries


def load_bundle(path: str, settings: Optional[Settings] = None) -> TensorBundle:
    """
    Load and validate a weight bundle directory

    Args:
        path: directory containing manifest.json and the blobs it references
        settings: thread cap for concurrent blob reads

    Returns:
        TensorBundle with layers in manifest order
    """
    if not os.path.isdir(path):
        raise BundleIOError(f"bundle directory not found: {path}")
    manifest_path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise BundleIOError(f"missing {MANIFEST_NAME} in {path}")
    except json.JSONDecodeError as e:
        raise ValidationError(f"cannot parse {manifest_path}: {e}")
    except OSError as e:
        raise BundleIOError(f"cannot read {manifest_path}: {e}")

    if not isinstance(manifest, dict) or "model_id" not in manifest:
        raise ValidationError(f"{manifest_path}: 'model_id' is required")

    entries = _manifest_entries(manifest)
    logger.debug(f"📂 Loading bundle '{manifest['model_id']}' ({len(entries)} layers) from {path}")

    with ThreadPoolExecutor(max_workers=worker_count(settings)) as pool:
        layers = list(pool.map(lambda e: _read_blob(path, e), entries))

    return TensorBundle(
        model_id=manifest["model_id"],
        layers=tuple(layers),
        upstream_accuracy=manifest.get("upstream_accuracy"),
    )


def _sanitize_filename(name: str) -> str:
    """Replace characters that are unsafe in file names"""
    return re.sub(r'[<>:"/\\|?*\s]', "_", name)


def write_bundle(bundle: TensorBundle, path: str) -> str:
    """Write a bundle as manifest.json plus little-endian float32 blobs"""
    manifest = {"model_id": bundle.model_id}
    if bundle.upstream_accuracy is not None:
        manifest["upstream_accuracy"] = bundle.upstream_accuracy
    manifest["layers"] = []

    try:
        os.makedirs(path, exist_ok=True)
        for i, layer in enumerate(bundle.layers):
            filename = f"{i:03d}_{_sanitize_filename(layer.name)}.bin"
            with open(os.path.join(path, filename), "wb") as f:
                f.write(layer.data.astype(_BLOB_DTYPE).tobytes(order="C"))
            manifest["layers"].append({
                "name": layer.name,
                "kind": layer.kind,
                "shape": list(layer.shape),
                "heads": layer.heads,
                "file": filename,
            })
        with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, ensure_ascii=False)
            f.write("\n")
    except OSError as e:
        raise BundleIOError(f"cannot write bundle to {path}: {e}")

    logger.debug(f"💾 Wrote bundle '{bundle.model_id}' to {path}")
    return path


def load_activations(path: str, layer: Optional[str] = None, settings: Optional[Settings] = None) -> list:
    """
    Load activation matrices stored as `activation` layers of a bundle

    Returns every activation layer in manifest order (model stages), or only
    the named one.
    """
    from .repr_metrics import ActivationMatrix

    bundle = load_bundle(path, settings)
    if layer is not None:
        selected = [bundle.layer(layer)]
        if selected[0].kind != "activation":
            raise ValidationError(f"layer '{layer}' is a {selected[0].kind} layer, not an activation")
    else:
        selected = [t for t in bundle.layers if t.kind == "activation"]
    if not selected:
        raise ValidationError(f"bundle '{bundle.model_id}' has no activation layers")
    return [ActivationMatrix(t.data.astype(np.float64), name=t.name) for t in selected]


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------

def _read_csv_rows(path: str) -> Tuple[List[str], List[List[str]]]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = [row for row in csv.reader(f) if any(cell.strip() for cell in row)]
    except FileNotFoundError:
        raise BundleIOError(f"file not found: {path}")
    except OSError as e:
        raise BundleIOError(f"cannot read {path}: {e}")
    except csv.Error as e:
        raise ValidationError(f"malformed CSV {path}: {e}")
    if not rows:
        raise ValidationError(f"{path} is empty")
    header = [cell.strip() for cell in rows[0]]
    return header, rows[1:]


def load_embeddings(path: str) -> EmbeddingSet:
    """
    Parse an embeddings CSV with header label,e0,...,e{p-1}

    Labels are re-indexed densely in order of first appearance.
    """
    header, rows = _read_csv_rows(path)
    if len(header) < 2 or header[0] != "label":
        raise ValidationError(f"{path}: header must be 'label,e0,...', got {header[:3]}")
    p = len(header) - 1
    if len(rows) < 2:
        raise ValidationError(f"{path}: need at least 2 embedding rows, got {len(rows)}")

    class_index: Dict[str, int] = {}
    labels = []
    vectors = np.empty((len(rows), p), dtype=np.float64)
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != p + 1:
            raise ValidationError(f"{path}:{line}: ragged row with {len(row) - 1} values, header declares {p}")
        label = row[0].strip()
        if label not in class_index:
            class_index[label] = len(class_index)
        labels.append(class_index[label])
        for j, cell in enumerate(row[1:]):
            vectors[i, j] = parse_decimal(cell, f" at {path}:{line}")

    return EmbeddingSet(vectors=vectors, labels=np.array(labels), class_names=tuple(class_index))


def load_accuracy_table(path: str, clamp_eps: float = DEFAULT_CLAMP_EPS) -> AccuracyTable:
    """
    Parse a models x datasets accuracy CSV

    Args:
        path: CSV whose first column is model_id and remaining columns datasets
        clamp_eps: cells are clamped into [clamp_eps, 1 - clamp_eps]

    Returns:
        AccuracyTable with clamped accuracies
    """
    header, rows = _read_csv_rows(path)
    datasets = header[1:]
    if not datasets:
        raise ValidationError(f"{path}: no dataset columns")
    if len(set(datasets)) != len(datasets):
        raise ValidationError(f"{path}: duplicate dataset columns")

    models: List[str] = []
    grid = np.empty((len(rows), len(datasets)), dtype=np.float64)
    for i, row in enumerate(rows):
        line = i + 2
        model_id = row[0].strip() if row else ""
        if not model_id:
            raise ValidationError(f"{path}:{line}: missing model_id")
        if model_id in models:
            raise ValidationError(f"{path}:{line}: duplicate model_id '{model_id}'")
        if len(row) > len(header):
            raise ValidationError(
                f"{path}:{line}: ragged row with {len(row) - 1} values, header declares {len(datasets)} datasets"
            )
        if len(row) < len(header):
            raise ValidationError(f"{path}:{line}: missing cell for model '{model_id}'")
        for j, cell in enumerate(row[1:]):
            if not cell.strip():
                raise ValidationError(f"{path}:{line}: missing cell for model '{model_id}', dataset '{datasets[j]}'")
            value = parse_decimal(cell, f" at {path}:{line}")
            if not (0.0 <= value <= 1.0):
                raise ValidationError(f"{path}:{line}: accuracy {value} outside [0, 1]")
            grid[i, j] = value
        models.append(model_id)

    if len(models) < 2:
        raise ValidationError(f"{path}: need at least 2 models, got {len(models)}")

    return AccuracyTable(models=tuple(models), datasets=tuple(datasets), acc=clamp_accuracy(grid, clamp_eps))


def load_feature_table(path: str, target: str = "transfer") -> List[Dict[str, float]]:
    """
    Parse a per-model feature table for importance analysis

    A first column named model or model_id is treated as a row key and
    skipped; every other column must be numeric. The target column must exist.
    """
    header, rows = _read_csv_rows(path)
    skip_first = bool(header) and header[0] in ("model", "model_id")
    columns = header[1:] if skip_first else header
    if target not in columns:
        raise ValidationError(f"{path}: target column '{target}' not found in {columns}")
    if len(columns) < 2:
        raise ValidationError(f"{path}: need at least one feature column besides '{target}'")

    records = []
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            raise ValidationError(f"{path}:{line}: ragged row")
        cells = row[1:] if skip_first else row
        records.append({
            name: parse_decimal(cell, f" at {path}:{line}") for name, cell in zip(columns, cells)
        })
    return records


def load_numeric_column(path: str, column: str) -> np.ndarray:
    """Read one numeric column of a CSV file"""
    header, rows = _read_csv_rows(path)
    if column not in header:
        raise ValidationError(f"{path}: column '{column}' not found in {header}")
    j = header.index(column)
    values = []
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValidationError(f"{path}:{i + 2}: ragged row")
        values.append(parse_decimal(row[j], f" at {path}:{i + 2}"))
    return np.array(values, dtype=np.float64)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _format_float(value: float) -> str:
    if not math.isfinite(value):
        raise ValidationError(f"cannot serialise non-finite value {value}")
    text = format(value, ".17g")
    if not any(c in text for c in ".en"):
        text += ".0"
    return text


def render_json(value: Any, indent: int = 2, level: int = 0) -> str:
    """JSON text with sorted keys and 17 significant digits for floats"""
    pad = " " * (indent * (level + 1))
    close = " " * (indent * level)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [
            f"{pad}{json.dumps(str(k), ensure_ascii=False)}: {render_json(value[k], indent, level + 1)}"
            for k in sorted(value, key=str)
        ]
        return "{\n" + ",\n".join(items) + "\n" + close + "}"
    if isinstance(value, np.ndarray):
        value = value.tolist()
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        items = [f"{pad}{render_json(v, indent, level + 1)}" for v in value]
        return "[\n" + ",\n".join(items) + "\n" + close + "]"
    if value is None or isinstance(value, (bool, np.bool_)):
        return json.dumps(None if value is None else bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return _format_float(float(value))
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    raise ValidationError(f"cannot serialise value of type {type(value).__name__}")


def write_report(report, path: str) -> str:
    """
    Validate a report and write it as JSON

    Args:
        report: any report object exposing validate() and to_dict()
        path: destination file

    Returns:
        The path written
    """
    report.validate()
    text = render_json(report.to_dict()) + "\n"
    try:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        raise BundleIOError(f"cannot write report {path}: {e}")
    logger.debug(f"💾 Report saved: {path}")
    return path


def read_report(path: str) -> Dict[str, Any]:
    """Read a JSON report back as a dict"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise BundleIOError(f"report not found: {path}")
    except json.JSONDecodeError as e:
        raise ValidationError(f"cannot parse report {path}: {e}")
    except OSError as e:
        raise BundleIOError(f"cannot read report {path}: {e}")


def write_text(path: str, text: str) -> str:
    """Write a small text file, mapping OS errors to BundleIOError"""
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        raise BundleIOError(f"cannot write {path}: {e}")
    return path

