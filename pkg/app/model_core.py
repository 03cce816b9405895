"""
Model parameters, their binary blob format, FedAvg, and the desk-scale
trainers (logistic regression and a one-hidden-layer tanh perceptron, both
with softmax cross-entropy and mini-batch gradient descent).

Blob format (little-endian):
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u32 rank, rank * u32 dims,
                prod(dims) float32 values in row-major order
"""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.errors import (
    AggregationError,
    DatasetError,
    EmptyAggregationError,
    ParamsParseError,
    SchemaError,
    TrainingDivergenceError,
)

Schema = Tuple[Tuple[str, Tuple[int, ...]], ...]

MODEL_FAMILIES = ("logreg", "mlp")
_FAMILY_NAMES = {
    ("W", "b"): "logreg",
    ("W1", "W2", "b1", "b2"): "mlp",
}


# ----------------------------------------
# PARAMETERS
# ----------------------------------------
class ModelParameters:
    """Ordered, named float32 tensors. Names are kept sorted; values must be finite."""

    __slots__ = ("_tensors",)

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        out: Dict[str, np.ndarray] = {}
        for name in sorted(tensors):
            if not isinstance(name, str) or not name:
                raise SchemaError(f"tensor names must be non-empty strings, got {name!r}")
            arr = np.array(tensors[name], dtype=np.float32, copy=True, order="C")
            if arr.ndim == 0 or any(d <= 0 for d in arr.shape):
                raise SchemaError(f"tensor '{name}' needs a shape of positive dims, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise SchemaError(f"tensor '{name}' contains NaN or Inf")
            arr.setflags(write=False)
            out[name] = arr
        if not out:
            raise SchemaError("model parameters need at least one tensor")
        self._tensors = out

    @property
    def names(self) -> List[str]:
        return list(self._tensors)

    @property
    def schema(self) -> Schema:
        return tuple((k, tuple(v.shape)) for k, v in self._tensors.items())

    @property
    def num_elements(self) -> int:
        return sum(v.size for v in self._tensors.values())

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self._tensors.items())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def to_float64(self) -> Dict[str, np.ndarray]:
        return {k: v.astype(np.float64) for k, v in self._tensors.items()}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParameters):
            return NotImplemented
        return self.schema == other.schema and all(
            a.tobytes() == b.tobytes() for (_, a), (_, b) in zip(self.items(), other.items())
        )

    def __hash__(self) -> int:
        return hash(serialize_params(self))

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{list(s)}" for k, s in self.schema)
        return f"ModelParameters({shapes})"


@dataclass(frozen=True)
class WeightedUpdate:
    params: ModelParameters
    weight: float = 1.0

    def __post_init__(self):
        if not (self.weight > 0 and math.isfinite(self.weight)):
            raise AggregationError(f"update weight must be a positive finite number, got {self.weight}")


# ----------------------------------------
# SERIALIZATION
# ----------------------------------------
def serialize_params(p: ModelParameters) -> bytes:
    parts = [struct.pack("<I", len(p.names))]
    for name, arr in p.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(bytes(data))
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise ParamsParseError(f"buffer truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize_params(data: bytes) -> ModelParameters:
    r = _Reader(data)
    (count,) = r.unpack("<I")
    tensors: Dict[str, np.ndarray] = {}
    previous: Optional[str] = None
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = bytes(r.take(name_len)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParamsParseError(f"tensor name is not UTF-8: {e}") from e
        if previous is not None and name <= previous:
            raise ParamsParseError(f"tensor names out of order or repeated at '{name}'")
        previous = name

        (rank,) = r.unpack("<I")
        if rank == 0 or rank > 32:
            raise ParamsParseError(f"tensor '{name}' has unsupported rank {rank}")
        shape = r.unpack(f"<{rank}I")
        n = math.prod(shape)
        if n == 0:
            raise ParamsParseError(f"tensor '{name}' has an empty dimension")
        raw = r.take(4 * n)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)

    if r.pos != len(r.data):
        raise ParamsParseError(f"{len(r.data) - r.pos} trailing bytes after {count} tensors")
    try:
        return ModelParameters(tensors)
    except SchemaError as e:
        raise ParamsParseError(str(e)) from e


# ----------------------------------------
# AGGREGATION
# ----------------------------------------
def fedavg_weighted(updates: Sequence[WeightedUpdate]) -> WeightedUpdate:
    """
    Weighted element-wise mean, accumulated in float64 and rounded to float32
    once. Returns the result together with the summed weight so it can be
    passed up a hierarchy and aggregated again.
    """
    if not updates:
        raise EmptyAggregationError("fedavg needs at least one update")

    schema = updates[0].params.schema
    for u in updates[1:]:
        if u.params.schema != schema:
            raise AggregationError(f"schema mismatch: {u.params.schema} vs {schema}")

    # Canonical order makes the float64 sum independent of arrival order.
    ordered = sorted(updates, key=lambda u: (u.weight, serialize_params(u.params)))
    total = math.fsum(u.weight for u in ordered)

    out: Dict[str, np.ndarray] = {}
    for name, shape in schema:
        acc = np.zeros(shape, dtype=np.float64)
        for u in ordered:
            acc += (u.weight / total) * u.params[name].astype(np.float64)
        out[name] = acc.astype(np.float32)
    return WeightedUpdate(ModelParameters(out), total)


def fedavg(updates: Sequence[WeightedUpdate]) -> ModelParameters:
    return fedavg_weighted(updates).params


# ----------------------------------------
# DATASETS
# ----------------------------------------
@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float32)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise DatasetError(f"features {x.shape} and labels {y.shape} do not line up")
        if x.shape[0] < 1:
            raise DatasetError("a dataset needs at least one sample")
        if self.n_classes < 1 or y.min() < 0 or y.max() >= self.n_classes:
            raise DatasetError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)

    def split(self, test_fraction: float, seed: int = 0) -> Tuple["Dataset", "Dataset"]:
        if not 0 < test_fraction < 1:
            raise DatasetError("test_fraction must be in (0, 1)")
        perm = np.random.default_rng(seed).permutation(len(self))
        n_test = max(1, int(round(len(self) * test_fraction)))
        return self.subset(perm[n_test:]), self.subset(perm[:n_test])

    def shards(self, n_shards: int, fraction: Optional[float] = None, seed: int = 0) -> List["Dataset"]:
        """Disjoint shards; each holds `fraction` of the data (default: an equal share)."""
        per = len(self) // n_shards if fraction is None else int(len(self) * fraction)
        if n_shards < 1 or per < 1 or per * n_shards > len(self):
            raise DatasetError(f"cannot cut {n_shards} shards of {per} samples from {len(self)}")
        perm = np.random.default_rng(seed).permutation(len(self))
        return [self.subset(perm[i * per : (i + 1) * per]) for i in range(n_shards)]

    @staticmethod
    def concat(parts: Iterable["Dataset"]) -> "Dataset":
        parts = list(parts)
        return Dataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            max(p.n_classes for p in parts),
        )


def make_synthetic(
    n_classes: int,
    n_features: int,
    n_samples: int,
    seed: int = 0,
    *,
    sigma: float = 1.0,
    separation: float = 6.0,
) -> Dataset:
    """
    Gaussian class blobs. Labels are assigned round-robin; class means are
    rescaled so the closest pair sits `separation` sigmas apart (at least 4).
    """
    if min(n_classes, n_features, n_samples) < 1:
        raise DatasetError("n_classes, n_features and n_samples must be positive")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n_classes, n_features))
    if n_classes > 1:
        diffs = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diffs**2).sum(-1))
        closest = dist[np.triu_indices(n_classes, k=1)].min()
        means *= max(separation, 4.0) * sigma / closest

    labels = np.arange(n_samples) % n_classes
    features = means[labels] + rng.normal(0.0, sigma, size=(n_samples, n_features))
    return Dataset(features.astype(np.float32), labels, n_classes)


def load_csv(path: Path | str) -> Dataset:
    """Rows of `label,f1,...,fn`."""
    try:
        raw = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    if raw.shape[1] < 2:
        raise DatasetError(f"{path}: expected a label column and at least one feature")
    labels = raw[:, 0].astype(np.int64)
    return Dataset(raw[:, 1:].astype(np.float32), labels, int(labels.max()) + 1)


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] != 0x08:
        raise DatasetError(f"{path}: not an unsigned-byte IDX file")
    ndim = data[3]
    try:
        dims = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    except struct.error as e:
        raise DatasetError(f"{path}: truncated IDX header: {e}") from e
    body = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != math.prod(dims):
        raise DatasetError(f"{path}: expected {math.prod(dims)} values, found {body.size}")
    return body.reshape(dims)


def load_idx(images_path: Path | str, labels_path: Path | str, n_classes: int = 10) -> Dataset:
    images = _read_idx(Path(images_path))
    labels = _read_idx(Path(labels_path)).astype(np.int64)
    features = images.reshape(images.shape[0], -1).astype(np.float32) / 255.0
    return Dataset(features, labels, n_classes)


def find_mnist(directory: Path | str) -> Optional[Tuple[Path, Path]]:
    d = Path(directory)
    for suffix in ("", ".gz"):
        images = d / f"train-images-idx3-ubyte{suffix}"
        labels = d / f"train-labels-idx1-ubyte{suffix}"
        if images.exists() and labels.exists():
            return images, labels
    return None


def parse_dataset_spec(spec: str) -> Dataset:
    """
    - `synthetic:classes=10,features=20,samples=2000,seed=0`
    - `idx:<images>,<labels>`
    - `mnist:<directory>` (train-*-idx*-ubyte[.gz])
    - anything else is read as a CSV path
    """
    kind, _, rest = spec.partition(":")
    if kind == "synthetic":
        opts = {"classes": 10, "features": 20, "samples": 2000, "seed": 0}
        for item in filter(None, rest.split(",")):
            key, _, value = item.partition("=")
            if key not in opts:
                raise DatasetError(f"unknown synthetic option '{key}'")
            opts[key] = int(value)
        return make_synthetic(opts["classes"], opts["features"], opts["samples"], opts["seed"])
    if kind == "idx":
        images, _, labels = rest.partition(",")
        return load_idx(images, labels)
    if kind == "mnist":
        found = find_mnist(rest)
        if found is None:
            raise DatasetError(f"no MNIST IDX files under {rest}")
        return load_idx(*found)
    return load_csv(spec)


# ----------------------------------------
# MODELS
# ----------------------------------------
def init_params(family: str, n_features: int, n_classes: int, *, hidden: int = 32, seed: int = 0) -> ModelParameters:
    rng = np.random.default_rng(seed)
    if family == "logreg":
        return ModelParameters(
            {
                "W": rng.normal(0.0, 0.01, (n_features, n_classes)),
                "b": np.zeros(n_classes),
            }
        )
    if family == "mlp":
        return ModelParameters(
            {
                "W1": rng.normal(0.0, 1.0 / math.sqrt(n_features), (n_features, hidden)),
                "b1": np.zeros(hidden),
                "W2": rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, n_classes)),
                "b2": np.zeros(n_classes),
            }
        )
    raise SchemaError(f"unknown model family '{family}' (expected one of {MODEL_FAMILIES})")


def model_family(params: ModelParameters | Mapping[str, np.ndarray]) -> str:
    names = tuple(sorted(params.names if isinstance(params, ModelParameters) else params))
    family = _FAMILY_NAMES.get(names)
    if family is None:
        raise SchemaError(f"tensors {names} do not form a built-in model")
    return family


def _input_dim(family: str, t: Mapping[str, np.ndarray]) -> int:
    return int(t["W"].shape[0] if family == "logreg" else t["W1"].shape[0])


def _logits(family: str, t: Mapping[str, np.ndarray], x: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if family == "logreg":
        return x @ t["W"] + t["b"], None
    h = np.tanh(x @ t["W1"] + t["b1"])
    return h @ t["W2"] + t["b2"], h


def loss_and_grads(
    family: str, t: Mapping[str, np.ndarray], x: np.ndarray, y: np.ndarray
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean softmax cross-entropy and its analytic gradients (float64)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    logits, h = _logits(family, t, x)

    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-log_p[np.arange(n), y].mean())

    d = np.exp(log_p)
    d[np.arange(n), y] -= 1.0
    d /= n

    if family == "logreg":
        return loss, {"W": x.T @ d, "b": d.sum(axis=0)}

    dh = (d @ t["W2"].T) * (1.0 - h**2)
    return loss, {
        "W1": x.T @ dh,
        "b1": dh.sum(axis=0),
        "W2": h.T @ d,
        "b2": d.sum(axis=0),
    }


@dataclass(frozen=True)
class TrainResult:
    params: ModelParameters
    n_samples: int
    loss: float


def _check_features(family: str, t: Mapping[str, np.ndarray], dataset: Dataset) -> None:
    if _input_dim(family, t) != dataset.n_features:
        raise SchemaError(
            f"model expects {_input_dim(family, t)} features, dataset has {dataset.n_features}"
        )


def train_local(
    params: ModelParameters,
    dataset: Dataset,
    epochs: int,
    learning_rate: float,
    seed: int = 0,
    *,
    batch_size: int = 32,
) -> TrainResult:
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    family = model_family(params)
    t = params.to_float64()
    _check_features(family, t, dataset)

    rng = np.random.default_rng(seed)
    n = len(dataset)
    x, y = dataset.features, dataset.labels

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for _ in range(epochs):
            perm = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = perm[start : start + batch_size]
                loss, grads = loss_and_grads(family, t, x[idx], y[idx])
                if not math.isfinite(loss):
                    raise TrainingDivergenceError(f"loss became {loss} during training")
                if learning_rate:
                    for k in t:
                        t[k] = t[k] - learning_rate * grads[k]

        final_loss, _ = loss_and_grads(family, t, x, y)

    if not math.isfinite(final_loss) or not all(np.all(np.isfinite(v)) for v in t.values()):
        raise TrainingDivergenceError(f"training diverged (final loss {final_loss})")
    return TrainResult(ModelParameters(t), n, final_loss)


def predict(params: ModelParameters, features: np.ndarray) -> np.ndarray:
    family = model_family(params)
    logits, _ = _logits(family, params.to_float64(), np.asarray(features, dtype=np.float64))
    return logits.argmax(axis=1)


def evaluate(params: ModelParameters, dataset: Dataset) -> float:
    family = model_family(params)
    _check_features(family, params.to_float64(), dataset)
    return float((predict(params, dataset.features) == dataset.labels).mean())
