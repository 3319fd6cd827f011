"""
Synthetic retrieval features with controllable attribute structure.

Each instance draws one class per attribute type and a private style vector;
every view of the instance is

    sum_a  s_a * P_a[:, class_a]  +  style  +  noise

where ``P_a`` holds fixed random class prototypes. Features are optionally
rotated by a random orthogonal matrix and always L2-normalised.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import ConfigError, DataError, FormatError, SplitError

ABSENT = -1
MIXING_MODES = ("none", "random-rotation")

FEAT_MAGIC = b"FLAMFEAT"
FEAT_VERSION = 1
_HEADER = struct.Struct("<8sIIQ")


@dataclass(frozen=True)
class AttributeSchema:
    types: tuple[str, ...] = ("shape", "color", "pattern")
    class_counts: tuple[int, ...] = (10, 10, 10)

    def __post_init__(self):
        object.__setattr__(self, "types", tuple(self.types))
        object.__setattr__(self, "class_counts", tuple(int(c) for c in self.class_counts))
        if len(self.types) < 2:
            raise ConfigError("schema needs at least two attribute types (a target and a remaining one)")
        if len(set(self.types)) != len(self.types):
            raise ConfigError(f"duplicate attribute type in {self.types}")
        if len(self.class_counts) != len(self.types):
            raise ConfigError("class_counts must list one count per attribute type")
        if min(self.class_counts) < 2:
            raise ConfigError("every attribute type needs at least two classes")

    @property
    def n(self) -> int:
        return len(self.types)

    def index(self, attr: str) -> int:
        try:
            return self.types.index(attr)
        except ValueError:
            raise ConfigError(f"attribute type {attr!r} not in schema {list(self.types)}") from None

    def count(self, attr: str) -> int:
        return self.class_counts[self.index(attr)]

    def to_dict(self) -> dict:
        return {"types": list(self.types), "class_counts": list(self.class_counts)}

    @classmethod
    def from_dict(cls, d: Mapping) -> AttributeSchema:
        return cls(tuple(d["types"]), tuple(d["class_counts"]))


@dataclass(frozen=True)
class GenConfig:
    dim: int = 64
    instances: int = 3750
    views: int = 2
    # a single strength for every type, or a mapping type -> strength
    signal: float | Mapping[str, float] = 1.0
    style: float = 0.27
    noise: float = 0.08
    mixing: str = "none"
    label_density: float = 1.0
    class_correlation: float = 0.0
    correlated_pair: tuple[str, str] = ("color", "pattern")

    def __post_init__(self):
        if isinstance(self.signal, Mapping):
            object.__setattr__(self, "signal", dict(self.signal))
        object.__setattr__(self, "correlated_pair", tuple(self.correlated_pair))
        if self.dim < 1 or self.instances < 1 or self.views < 1:
            raise ConfigError("dim, instances and views must be positive")
        strengths = self.signal.values() if isinstance(self.signal, dict) else [self.signal]
        if any(s <= 0 for s in strengths):
            raise ConfigError("attribute signal strengths must be > 0")
        if self.style < 0 or self.noise < 0:
            raise ConfigError("style and noise must be >= 0")
        if not 0.0 <= self.label_density <= 1.0:
            raise ConfigError("label_density must lie in [0, 1]")
        if not 0.0 <= self.class_correlation <= 1.0:
            raise ConfigError("class_correlation must lie in [0, 1]")
        if self.mixing not in MIXING_MODES:
            raise ConfigError(f"mixing must be one of {MIXING_MODES}, got {self.mixing!r}")
        if len(self.correlated_pair) != 2:
            raise ConfigError("correlated_pair names exactly two attribute types")

    def strength(self, attr: str) -> float:
        if isinstance(self.signal, dict):
            return float(self.signal.get(attr, 1.0))
        return float(self.signal)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["correlated_pair"] = list(self.correlated_pair)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> GenConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generation settings: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class FeatureRecord:
    feature: np.ndarray
    instance_id: int
    labels: tuple[int, ...]


@dataclass(eq=False)
class Dataset:
    """Column-oriented collection of feature records.

    ``features`` is (N, D) float32, ``instance_ids`` (N,) int64 and ``labels``
    (N, n_types) int32 with ``ABSENT`` for missing labels.
    """

    schema: AttributeSchema
    features: np.ndarray
    instance_ids: np.ndarray
    labels: np.ndarray
    config: GenConfig | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.instance_ids = np.ascontiguousarray(self.instance_ids, dtype=np.int64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32).reshape(-1, self.schema.n)
        n = len(self.instance_ids)
        if self.features.ndim != 2 or self.features.shape[0] != n or self.labels.shape[0] != n:
            raise DataError("features, instance_ids and labels must have the same number of rows")
        counts = np.asarray(self.schema.class_counts)
        bad = (self.labels != ABSENT) & ((self.labels < 0) | (self.labels >= counts))
        if bad.any():
            row = int(np.argwhere(bad)[0, 0])
            raise DataError(f"record {row}: label out of range for schema {self.schema.to_dict()}")

    def __len__(self) -> int:
        return len(self.instance_ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __iter__(self) -> Iterator[FeatureRecord]:
        for i in range(len(self)):
            yield FeatureRecord(self.features[i], int(self.instance_ids[i]), tuple(int(v) for v in self.labels[i]))

    @property
    def records(self) -> list[FeatureRecord]:
        return list(self)

    def label_column(self, attr: str) -> np.ndarray:
        return self.labels[:, self.schema.index(attr)]

    def subset(self, index) -> Dataset:
        index = np.asarray(index, dtype=np.intp)
        return Dataset(self.schema, self.features[index], self.instance_ids[index], self.labels[index],
                       self.config, self.seed, dict(self.meta))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.schema == other.schema
                and self.config == other.config
                and self.seed == other.seed
                and self.features.shape == other.features.shape
                and np.array_equal(self.features.view(np.uint32), other.features.view(np.uint32))
                and np.array_equal(self.instance_ids, other.instance_ids)
                and np.array_equal(self.labels, other.labels))


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(rows, cols)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _draw(config: GenConfig, schema: AttributeSchema, seed: int):
    total = sum(schema.class_counts)
    D = config.dim
    if config.mixing == "none" and D < total:
        raise ConfigError(f"dim {D} is smaller than the total class count {total}; "
                          "prototypes would collide without mixing")
    for attr in config.correlated_pair:
        if config.class_correlation > 0 and attr not in schema.types:
            raise ConfigError(f"correlated attribute {attr!r} not in schema")

    proto_ss, label_ss, style_ss, rot_ss, mask_ss = np.random.SeedSequence(seed).spawn(5)
    proto_rng = np.random.default_rng(proto_ss)
    if D >= total:
        protos = _orthonormal(proto_rng, D, total)
    else:
        protos = proto_rng.normal(size=(D, total)) / np.sqrt(D)
    offsets = np.concatenate([[0], np.cumsum(schema.class_counts)[:-1]])

    n_inst = config.instances
    label_rng = np.random.default_rng(label_ss)
    classes = np.stack([label_rng.integers(0, c, size=n_inst) for c in schema.class_counts], axis=1)
    if config.class_correlation > 0:
        first, second = (schema.index(a) for a in config.correlated_pair)
        coupled = label_rng.random(n_inst) < config.class_correlation
        classes[coupled, second] = classes[coupled, first] % schema.class_counts[second]

    signal = np.zeros((n_inst, D))
    for t, attr in enumerate(schema.types):
        signal += config.strength(attr) * protos[:, offsets[t] + classes[:, t]].T

    style_rng = np.random.default_rng(style_ss)
    style = style_rng.normal(scale=config.style, size=(n_inst, D)) if config.style > 0 else np.zeros((n_inst, D))
    raw = np.repeat(signal + style, config.views, axis=0)
    if config.noise > 0:
        raw = raw + style_rng.normal(scale=config.noise, size=raw.shape)

    # drawn from its own stream so mixing never perturbs the other draws
    if config.mixing == "random-rotation":
        raw = raw @ _orthonormal(np.random.default_rng(rot_ss), D, D).T

    keep = np.random.default_rng(mask_ss).random(classes.shape) < config.label_density
    return raw, np.where(keep, classes, ABSENT)


def raw_features(config: GenConfig, schema: AttributeSchema | None = None, seed: int = 0) -> np.ndarray:
    """The (N, D) float64 features before L2 normalisation."""
    return _draw(config, schema or AttributeSchema(), seed)[0]


def generate(config: GenConfig, schema: AttributeSchema | None = None, seed: int = 0) -> Dataset:
    """Draw a dataset; a pure function of ``(config, schema, seed)``."""
    schema = schema or AttributeSchema()
    raw, inst_labels = _draw(config, schema, seed)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(raw)):
        raise DataError("generated a degenerate (zero or non-finite) feature")
    labels = np.repeat(inst_labels, config.views, axis=0)
    ids = np.repeat(np.arange(config.instances, dtype=np.int64), config.views)
    return Dataset(schema, raw / norms, ids, labels, config, seed)


def mask_labels(dataset: Dataset, density: float, seed: int = 0) -> Dataset:
    """Copy of ``dataset`` keeping each (instance, attribute) label with prob ``density``.

    All views of an instance share the mask, and already-absent labels stay absent.
    """
    if not 0.0 <= density <= 1.0:
        raise ConfigError("label density must lie in [0, 1]")
    uniq, inverse = np.unique(dataset.instance_ids, return_inverse=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C61626C]))
    keep = rng.random((len(uniq), dataset.schema.n)) < density
    labels = np.where(keep[inverse], dataset.labels, ABSENT).astype(np.int32)
    return Dataset(dataset.schema, dataset.features, dataset.instance_ids, labels,
                   dataset.config, dataset.seed, dict(dataset.meta))


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Partition by instance into (train, query, gallery).

    Train instances are disjoint from the rest. Each query instance contributes
    its first view to the query set and its remaining views to the gallery;
    gallery-only instances contribute every view to the gallery.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise SplitError(f"split fractions must be three non-negative numbers summing to 1, got {list(fractions)}")
    uniq = np.unique(dataset.instance_ids)
    n = len(uniq)
    order = np.random.default_rng(seed).permutation(uniq)
    n_train = int(round(fr[0] * n))
    n_query = int(round(fr[1] * n))
    n_query = min(n_query, n - n_train)
    if fr[1] > 0 and n_query == 0:
        raise SplitError(f"{n} instances are too few to give the query split any instance")
    if fr[2] > 0 and n - n_train - n_query == 0 and n_query == 0:
        raise SplitError(f"{n} instances are too few to populate the gallery split")
    train_ids = order[:n_train]
    query_ids = order[n_train:n_train + n_query]

    ids = dataset.instance_ids
    pos = np.arange(len(dataset))
    in_train = np.isin(ids, train_ids)
    in_query_inst = np.isin(ids, query_ids)
    # first view (lowest position) of each query instance
    _, first_pos = np.unique(ids, return_index=True)
    is_first = np.zeros(len(dataset), dtype=bool)
    is_first[first_pos] = True
    query_mask = in_query_inst & is_first
    gallery_mask = ~in_train & ~query_mask
    if query_mask.any():
        covered = np.isin(ids[query_mask], ids[gallery_mask])
        if not covered.all():
            raise SplitError("query instances need at least two views so one can stay in the gallery")
    return dataset.subset(pos[in_train]), dataset.subset(pos[query_mask]), dataset.subset(pos[gallery_mask])


# ---------------------------------------------------------------------------
# FLAMFEAT files
# ---------------------------------------------------------------------------

def _metadata(dataset: Dataset) -> bytes:
    meta = {
        "schema": dataset.schema.to_dict(),
        "config": dataset.config.to_dict() if dataset.config is not None else None,
        "seed": dataset.seed,
    }
    return json.dumps(meta, sort_keys=True).encode("utf-8")


def dumps_features(dataset: Dataset) -> bytes:
    n = dataset.schema.n
    buf = io.BytesIO()
    buf.write(_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, dataset.dim, len(dataset)))
    rec = np.zeros(len(dataset), dtype=np.dtype([
        ("id", "<u8"), ("labels", "<i4", (n,)), ("feature", "<f4", (dataset.dim,))]))
    rec["id"] = dataset.instance_ids
    rec["labels"] = dataset.labels
    rec["feature"] = dataset.features
    buf.write(rec.tobytes())
    meta = _metadata(dataset)
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    return buf.getvalue()


def save_features(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(dumps_features(dataset))


def _parse_meta(blob: bytes, offset: int) -> dict:
    try:
        return json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata block is not valid JSON: {exc}", offset) from None


def loads_features(blob: bytes) -> Dataset:
    size = len(blob)
    if size < _HEADER.size:
        raise FormatError("file shorter than the FLAMFEAT header", size)
    magic, version, D, count = _HEADER.unpack_from(blob, 0)
    if magic != FEAT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FEAT_MAGIC!r}", 0)
    if version != FEAT_VERSION:
        raise FormatError(f"unsupported FLAMFEAT version {version}", 8)
    start = _HEADER.size

    # the record width depends on the number of attribute types, which lives in
    # the trailing metadata; find the layout whose length prefix closes the file
    layout = None
    candidates = [0] if count == 0 else range(1, 257)
    for n in candidates:
        meta_off = start + count * (8 + 4 * n + 4 * D)
        if meta_off + 8 > size:
            break
        (length,) = struct.unpack_from("<Q", blob, meta_off)
        if meta_off + 8 + length == size:
            meta = _parse_meta(blob[meta_off + 8:], meta_off + 8)
            if count == 0 or len(meta.get("schema", {}).get("types", ())) == n:
                layout = (n, meta)
                break
    if layout is None:
        raise FormatError(f"truncated or inconsistent record block for {count} records of dim {D}", size)
    _, meta = layout
    try:
        schema = AttributeSchema.from_dict(meta["schema"])
        config = GenConfig.from_dict(meta["config"]) if meta.get("config") is not None else None
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"metadata does not describe a valid schema/config: {exc}") from None
    n = schema.n
    rec = np.frombuffer(blob, dtype=np.dtype([
        ("id", "<u8"), ("labels", "<i4", (n,)), ("feature", "<f4", (D,))]), count=count, offset=start)
    return Dataset(schema, rec["feature"].reshape(count, D).copy(), rec["id"].astype(np.int64),
                   rec["labels"].reshape(count, n).copy(), config, meta.get("seed"))


def load_features(path: str | Path) -> Dataset:
    return loads_features(Path(path).read_bytes())
