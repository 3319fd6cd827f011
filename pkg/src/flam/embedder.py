"""Attribute-specific embedders trained against a learnable class dictionary."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, TrainingError
from .synthdata import ABSENT, Dataset


@dataclass
class EmbedderConfig:
    mu: float = 0.2
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    k: int = 32


def attr_seed(seed: int, attr: str) -> np.random.SeedSequence:
    """Stable per-attribute entropy so embedders can train independently."""
    return np.random.SeedSequence([seed, zlib.crc32(attr.encode("utf-8"))])


class Embedder:
    """phi_a: R^D -> unit sphere in R^k, as D -> 4k -> k with leaky ReLU."""

    def __init__(self, attr_type: str, dim: int, k: int = 32, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.attr_type = attr_type
        self.dim = dim
        self.k = k
        self.mlp = ad.MLP([dim, 4 * k, k], rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise DimensionError(f"embedder {self.attr_type!r} expects dim {self.dim}, got {x.shape[-1]}")
        return ad.l2_normalize(self.mlp(x))

    def embed(self, x) -> np.ndarray:
        """Embed one feature (D,) or a batch (N, D) without recording a graph."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"embedder {self.attr_type!r} expects dim {self.dim}, got {x.shape[-1]}")
        h = self.mlp.forward_array(x)
        return h / (np.linalg.norm(h, axis=-1, keepdims=True) + ad.COSINE_EPS)

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()


class Dictionary:
    """One learnable unit vector per class of an attribute type."""

    def __init__(self, attr_type: str, class_count: int, k: int = 32, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.attr_type = attr_type
        v = rng.normal(size=(class_count, k))
        self.vectors = Tensor(v / np.linalg.norm(v, axis=1, keepdims=True), requires_grad=True)

    @property
    def class_count(self) -> int:
        return self.vectors.shape[0]

    @property
    def k(self) -> int:
        return self.vectors.shape[1]

    def renormalize(self) -> None:
        v = self.vectors.data
        v /= np.linalg.norm(v, axis=1, keepdims=True) + ad.COSINE_EPS

    def lookup(self, class_index: int) -> np.ndarray:
        return dictionary_lookup(self, class_index)


def dictionary_lookup(dictionary: Dictionary, class_index: int) -> np.ndarray:
    if not 0 <= int(class_index) < dictionary.class_count:
        raise ContractError(f"class {class_index} out of range for {dictionary.attr_type!r} "
                            f"with {dictionary.class_count} classes")
    return dictionary.vectors.data[int(class_index)]


def cosine_distance(u, v) -> Tensor:
    return 1.0 - ad.cosine_sim(u, v)


def triplet_loss(f, f_plus, f_minus, mu: float) -> Tensor:
    """max{0, dist(f, f+) - dist(f, f-) + mu} with dist = 1 - cos, per row."""
    if mu < 0:
        raise ContractError("margin mu must be >= 0")
    return ad.relu(cosine_distance(f, f_plus) - cosine_distance(f, f_minus) + mu)


@dataclass
class TripletBatch:
    anchors: np.ndarray
    anchor_classes: np.ndarray
    positives: np.ndarray
    positive_classes: np.ndarray
    negatives: np.ndarray
    negative_classes: np.ndarray

    def __post_init__(self):
        for name in ("anchor_classes", "positive_classes", "negative_classes"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.intp).reshape(-1))
        if np.any(self.anchor_classes == ABSENT) or np.any(self.positive_classes == ABSENT) \
                or np.any(self.negative_classes == ABSENT):
            raise ContractError("triplet batch contains an unlabeled sample")
        if not np.array_equal(self.anchor_classes, self.positive_classes):
            raise ContractError("every positive must share its anchor's class")
        if np.any(self.anchor_classes == self.negative_classes):
            raise ContractError("every negative must differ from its anchor's class")

    def __len__(self) -> int:
        return len(self.anchor_classes)


def sample_triplets(labels: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions (anchor, positive, negative) within a labelled batch.

    Positives and negatives are drawn uniformly among batch members of the
    same / a different class. Anchors without either are dropped.
    """
    labels = np.asarray(labels)
    anchors, positives, negatives = [], [], []
    for i, c in enumerate(labels):
        same = np.flatnonzero(labels == c)
        same = same[same != i]
        diff = np.flatnonzero(labels != c)
        if len(same) == 0 or len(diff) == 0:
            continue
        anchors.append(i)
        positives.append(same[rng.integers(len(same))])
        negatives.append(diff[rng.integers(len(diff))])
    return np.array(anchors, dtype=np.intp), np.array(positives, dtype=np.intp), np.array(negatives, dtype=np.intp)


def embedder_loss(batch: TripletBatch, embedder: Embedder, dictionary: Dictionary, mu: float) -> Tensor:
    """Mean over triples of l(d_a, e+, e-) + l(e_a, d+, d-)."""
    if len(batch) == 0:
        raise ContractError("empty triplet batch")
    e = embedder(Tensor(batch.anchors))
    e_pos = embedder(Tensor(batch.positives))
    e_neg = embedder(Tensor(batch.negatives))
    d = ad.gather(dictionary.vectors, batch.anchor_classes)
    d_neg = ad.gather(dictionary.vectors, batch.negative_classes)
    per_triple = triplet_loss(d, e_pos, e_neg, mu) + triplet_loss(e, d, d_neg, mu)
    return ad.mean(per_triple)


def train_embedder(train: Dataset, attr_type: str, config: EmbedderConfig | None = None):
    """Fit (Embedder, Dictionary) for one attribute type.

    Returns ``(embedder, dictionary, log)`` where ``log`` holds the mean loss
    per epoch. Records without a label for ``attr_type`` are skipped.
    """
    config = config or EmbedderConfig()
    labels = train.label_column(attr_type)
    labelled = np.flatnonzero(labels != ABSENT)
    if len(np.unique(labels[labelled])) < 2:
        raise TrainingError(f"attribute {attr_type!r} has fewer than two labelled classes")
    init_ss, batch_ss = attr_seed(config.seed, attr_type).spawn(2)
    init_rng = np.random.default_rng(init_ss)
    embedder = Embedder(attr_type, train.dim, config.k, init_rng)
    dictionary = Dictionary(attr_type, train.schema.count(attr_type), config.k, init_rng)
    opt = ad.Adam(embedder.parameters() + [dictionary.vectors], lr=config.lr)
    rng = np.random.default_rng(batch_ss)
    X = train.features.astype(np.float64)
    log: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(labelled)
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            a, p, n = sample_triplets(labels[idx], rng)
            if len(a) == 0:
                continue
            batch = TripletBatch(X[idx[a]], labels[idx[a]], X[idx[p]], labels[idx[p]], X[idx[n]], labels[idx[n]])
            opt.zero_grad()
            loss = embedder_loss(batch, embedder, dictionary, config.mu)
            loss.backward()
            opt.step()
            dictionary.renormalize()
            losses.append(loss.item())
        if not losses:
            raise TrainingError(f"no valid triplets for {attr_type!r}; need two classes per batch")
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise TrainingError(f"embedder {attr_type!r}: non-finite loss at epoch {epoch}")
        log.append({"epoch": epoch, "loss": mean_loss})
    return embedder, dictionary, log


def pseudo_label(embedder: Embedder, dictionary: Dictionary, x):
    """Nearest dictionary row by cosine; ties go to the lowest class index.

    Accepts one feature (returns an int) or a batch (returns an int array).
    """
    e = embedder.embed(x)
    d = dictionary.vectors.data
    d = d / (np.linalg.norm(d, axis=1, keepdims=True) + ad.COSINE_EPS)
    e = e / (np.linalg.norm(e, axis=-1, keepdims=True) + ad.COSINE_EPS)
    scores = e @ d.T
    out = np.argmax(scores, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def fill_labels(embedder: Embedder, dictionary: Dictionary, features, labels) -> np.ndarray:
    """Replace ABSENT entries of ``labels`` with pseudo labels."""
    labels = np.array(labels, copy=True)
    missing = labels == ABSENT
    if missing.any():
        labels[missing] = pseudo_label(embedder, dictionary, np.asarray(features)[missing])
    return labels
