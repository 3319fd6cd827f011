"""
Exact cosine-similarity gallery search and the evaluation metrics built on it:
instance recall (R@k), attribute-manipulation top-k accuracy (T@k), linear
probe accuracy before/after manipulation, and embedding cluster statistics.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .embedder import Dictionary, Embedder, dictionary_lookup
from .errors import ContractError, DataError
from .manipulator import Generator
from .synthdata import ABSENT, AttributeSchema, Dataset

DEFAULT_KS = (1, 5, 10, 20, 50)


@dataclass(eq=False)
class RetrievalIndex:
    matrix: np.ndarray
    instance_ids: np.ndarray
    labels: np.ndarray
    schema: AttributeSchema

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.matrix, self.instance_ids, self.labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def build_index(gallery: Dataset) -> RetrievalIndex:
    if len(gallery) == 0:
        raise DataError("cannot index an empty gallery")
    M = gallery.features.copy()
    norms = np.linalg.norm(M.astype(np.float64), axis=1)
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        raise DataError(f"gallery record {int(zero[0])} (instance {int(gallery.instance_ids[zero[0]])}) has zero norm")
    off = np.abs(norms - 1.0) > 1e-6
    if off.any():
        M[off] = (M[off].astype(np.float64) / norms[off, None]).astype(np.float32)
    return RetrievalIndex(M, gallery.instance_ids.copy(), gallery.labels.copy(), gallery.schema)


@dataclass
class SearchResult:
    positions: np.ndarray
    similarities: np.ndarray
    truncated: bool = False


def similarities(index: RetrievalIndex, queries) -> np.ndarray:
    """(B, N) cosine similarities of unit-normalised queries against the gallery."""
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    Q = Q / (np.linalg.norm(Q, axis=1, keepdims=True) + ad.COSINE_EPS)
    return Q @ index.matrix.astype(np.float64).T


def search_batch(index: RetrievalIndex, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k positions and similarities per query, ties to the lower position."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    S = similarities(index, queries)
    k = min(k, S.shape[1])
    order = np.argsort(-S, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(S, order, axis=1)


def search(index: RetrievalIndex, q, k: int) -> SearchResult:
    truncated = k > len(index)
    pos, sims = search_batch(index, np.asarray(q)[None], k)
    return SearchResult(pos[0], sims[0], truncated)


def manipulate_query(G: Generator, dictionaries: Mapping[str, Dictionary], x, attr_type: str, target_class) -> np.ndarray:
    """G(x, d) with d the dictionary row of ``target_class``; batched over rows of x."""
    if attr_type not in dictionaries:
        raise ContractError(f"no dictionary for attribute {attr_type!r}")
    dic = dictionaries[attr_type]
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return G.generate(x, dictionary_lookup(dic, int(target_class)))
    classes = np.broadcast_to(np.asarray(target_class), (len(x),))
    if np.any(classes < 0) or np.any(classes >= dic.class_count):
        raise ContractError(f"target class out of range for {attr_type!r} with {dic.class_count} classes")
    return G.generate(x, dic.vectors.data[classes])


# ---------------------------------------------------------------------------
# R@k
# ---------------------------------------------------------------------------

def recall_table(index: RetrievalIndex, queries: Dataset, ks: Sequence[int] = DEFAULT_KS) -> tuple[dict, int]:
    """R@k for every k, plus the number of queries excluded for lacking a gallery match."""
    present = np.isin(queries.instance_ids, index.instance_ids)
    excluded = int((~present).sum())
    rows = np.flatnonzero(present)
    if len(rows) == 0:
        return {int(k): 0.0 for k in ks}, excluded
    pos, _ = search_batch(index, queries.features[rows], max(ks))
    match = index.instance_ids[pos] == queries.instance_ids[rows, None]
    first_hit = np.where(match.any(axis=1), match.argmax(axis=1), np.iinfo(np.int64).max)
    return {int(k): float(np.mean(first_hit < k)) for k in ks}, excluded


def recall_at_k(index: RetrievalIndex, queries: Dataset, k: int) -> float:
    return recall_table(index, queries, [k])[0][int(k)]


# ---------------------------------------------------------------------------
# T@k
# ---------------------------------------------------------------------------

def draw_targets(labels: np.ndarray, available: Sequence[int], seed: int, stream: int = 0) -> np.ndarray:
    """For each current class, a different class drawn uniformly from ``available``."""
    labels = np.asarray(labels)
    if np.any(labels == ABSENT):
        raise DataError("target drawing needs densely labelled queries")
    available = np.asarray(sorted(set(int(c) for c in available)))
    rng = np.random.default_rng([seed, stream])
    out = np.empty(len(labels), dtype=np.int64)
    for i, c in enumerate(labels):
        cand = available[available != c]
        if len(cand) == 0:
            raise DataError(f"no class other than {int(c)} available as a manipulation target")
        out[i] = cand[rng.integers(len(cand))]
    return out


@dataclass
class TopKResult:
    rates: dict
    unreachable: int
    n_queries: int
    targets: np.ndarray = field(repr=False, default=None)
    reachable_rates: dict = field(default_factory=dict)


def _demanded(queries: Dataset, attr_index: int, targets: np.ndarray) -> np.ndarray:
    demanded = queries.labels.astype(np.int64).copy()
    demanded[:, attr_index] = targets
    return demanded


def _reachable(index: RetrievalIndex, demanded: np.ndarray) -> np.ndarray:
    gallery = {tuple(row) for row in index.labels.tolist()}
    return np.array([tuple(row) in gallery for row in demanded.tolist()], dtype=bool)


def hits_from_ranking(index: RetrievalIndex, positions: np.ndarray, demanded: np.ndarray) -> np.ndarray:
    """(B, k) boolean: does the gallery record at each rank carry the demanded labels."""
    return (index.labels[positions] == demanded[:, None, :]).all(axis=2)


def top_k_accuracy(index: RetrievalIndex, queries: Dataset, G: Generator, dictionaries: Mapping[str, Dictionary],
                   attr_type: str, ks: Sequence[int] | int = DEFAULT_KS, seed: int = 0,
                   targets: np.ndarray | None = None) -> TopKResult:
    """T@k for manipulating ``attr_type`` of every query.

    A query hits when some top-k result has the query's labels with
    ``attr_type`` replaced by the drawn target class.
    """
    ks = [ks] if isinstance(ks, int) else list(ks)
    a = queries.schema.index(attr_type)
    if np.any(queries.labels == ABSENT):
        raise DataError("T@k needs densely labelled queries")
    if targets is None:
        targets = draw_targets(queries.labels[:, a], np.unique(index.labels[:, a]), seed, a)
    x_tilde = manipulate_query(G, dictionaries, queries.features, attr_type, targets)
    pos, _ = search_batch(index, x_tilde, max(ks))
    demanded = _demanded(queries, a, targets)
    hits = hits_from_ranking(index, pos, demanded)
    first = np.where(hits.any(axis=1), hits.argmax(axis=1), np.iinfo(np.int64).max)
    reach = _reachable(index, demanded)
    rates = {int(k): float(np.mean(first < k)) for k in ks}
    reach_rates = {int(k): float(np.mean(first[reach] < k)) if reach.any() else 0.0 for k in ks}
    return TopKResult(rates, int((~reach).sum()), len(queries), targets, reach_rates)


def top_k_table(index: RetrievalIndex, queries: Dataset, generators: Mapping[str, Generator],
                dictionaries: Mapping[str, Dictionary], ks: Sequence[int] = DEFAULT_KS, seed: int = 0):
    """Per-attribute T@k plus the uniform average "All"; also unreachable counts."""
    table, unreachable = {}, {}
    for attr in queries.schema.types:
        res = top_k_accuracy(index, queries, generators[attr], dictionaries, attr, ks, seed)
        table[attr] = res.rates
        unreachable[attr] = res.unreachable
    table["All"] = {int(k): float(np.mean([table[a][int(k)] for a in queries.schema.types])) for k in ks}
    return table, unreachable


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

class LinearProbe:
    """One softmax-regression classifier per attribute type."""

    def __init__(self, schema: AttributeSchema, dim: int):
        self.schema = schema
        self.dim = dim
        self.weights = {a: np.zeros((dim, c)) for a, c in zip(schema.types, schema.class_counts)}
        self.biases = {a: np.zeros(c) for a, c in zip(schema.types, schema.class_counts)}

    def logits(self, attr: str, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights[attr] + self.biases[attr]

    def predict(self, attr: str, X) -> np.ndarray:
        return np.argmax(self.logits(attr, X), axis=-1)

    def accuracy(self, attr: str, X, y) -> float:
        y = np.asarray(y)
        keep = y != ABSENT
        if not keep.any():
            return float("nan")
        return float(np.mean(self.predict(attr, np.asarray(X)[keep]) == y[keep]))

    def triple_accuracy(self, X, labels) -> float:
        """Fraction of rows where every attribute's prediction matches ``labels``."""
        labels = np.asarray(labels)
        hits = np.ones(len(labels), dtype=bool)
        for a, attr in enumerate(self.schema.types):
            hits &= self.predict(attr, X) == labels[:, a]
        return float(hits.mean()) if len(hits) else float("nan")


def train_probe(train: Dataset, steps: int = 300, lr: float = 0.05, seed: int = 0) -> LinearProbe:
    """Full-batch Adam on cross-entropy, one affine classifier per attribute."""
    probe = LinearProbe(train.schema, train.dim)
    X = train.features.astype(np.float64)
    rng = np.random.default_rng(seed)
    for attr, n_cls in zip(train.schema.types, train.schema.class_counts):
        y = train.label_column(attr)
        rows = np.flatnonzero(y != ABSENT)
        if len(rows) == 0:
            continue
        W = ad.Tensor(rng.normal(scale=0.01, size=(train.dim, n_cls)), requires_grad=True)
        b = ad.Tensor(np.zeros(n_cls), requires_grad=True)
        onehot = np.eye(n_cls)[y[rows]]
        x = ad.Tensor(X[rows])
        opt = ad.Adam([W, b], lr=lr)
        for _ in range(steps):
            opt.zero_grad()
            logp = ad.log_softmax(x @ W + b)
            loss = -ad.mean(ad.sum(logp * onehot, axis=-1))
            loss.backward()
            opt.step()
        probe.weights[attr] = W.data.copy()
        probe.biases[attr] = b.data.copy()
    return probe


def probe_delta(probe: LinearProbe, queries: Dataset, generators: Mapping[str, Generator],
                dictionaries: Mapping[str, Dictionary], seed: int = 0, available: Mapping[str, Sequence[int]] | None = None) -> dict:
    """Probe accuracy on original vs manipulated queries.

    For each manipulated attribute: ``original`` is accuracy on the query's own
    label, ``manipulated`` accuracy on the intended target class, and
    ``remaining`` lists the other attributes' accuracy before/after. The
    ``triple_*`` entries require all attributes to be predicted correctly
    (own labels on the original, intended labels on the manipulated query).
    """
    schema = queries.schema
    out: dict = {"per_attribute": {}}
    deltas = []
    for a, attr in enumerate(schema.types):
        y = queries.labels[:, a]
        classes = available[attr] if available else range(schema.class_counts[a])
        targets = draw_targets(y, classes, seed, a)
        x_tilde = manipulate_query(generators[attr], dictionaries, queries.features, attr, targets)
        original = probe.accuracy(attr, queries.features, y)
        manipulated = probe.accuracy(attr, x_tilde, targets)
        remaining = {}
        for r, other in enumerate(schema.types):
            if other == attr:
                continue
            yr = queries.labels[:, r]
            remaining[other] = {"original": probe.accuracy(other, queries.features, yr),
                                "manipulated": probe.accuracy(other, x_tilde, yr)}
        intended = queries.labels.copy()
        intended[:, a] = targets
        out["per_attribute"][attr] = {"original": original, "manipulated": manipulated,
                                      "delta": manipulated - original, "remaining": remaining,
                                      "triple_original": probe.triple_accuracy(queries.features, queries.labels),
                                      "triple_manipulated": probe.triple_accuracy(x_tilde, intended)}
        deltas.append(manipulated - original)
    out["avg_diff"] = float(np.mean(deltas))
    return out


# ---------------------------------------------------------------------------
# cluster statistics
# ---------------------------------------------------------------------------

def _pair_means(E: np.ndarray, labels: np.ndarray) -> tuple[float | None, float | None]:
    keep = labels != ABSENT
    E, labels = E[keep], labels[keep]
    if len(E) < 2:
        return None, None
    sq = (E * E).sum(axis=1)
    total_sum = (np.square(E.sum(axis=0)).sum() - sq.sum()) / 2.0
    total_pairs = len(E) * (len(E) - 1) / 2.0
    intra_sum, intra_pairs = 0.0, 0.0
    for c in np.unique(labels):
        members = labels == c
        n_c = int(members.sum())
        if n_c < 2:
            continue
        S = E[members].sum(axis=0)
        intra_sum += (S @ S - sq[members].sum()) / 2.0
        intra_pairs += n_c * (n_c - 1) / 2.0
    inter_pairs = total_pairs - intra_pairs
    intra = float(intra_sum / intra_pairs) if intra_pairs else None
    inter = float((total_sum - intra_sum) / inter_pairs) if inter_pairs else None
    return intra, inter


def cluster_stats(embedders: Mapping[str, Embedder], features, labels, schema: AttributeSchema) -> dict:
    """Mean pairwise embedding cosine within and across classes, per attribute."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).reshape(len(features), schema.n)
    out = {}
    for a, attr in enumerate(schema.types):
        E = embedders[attr].embed(features)
        E = E / (np.linalg.norm(E, axis=1, keepdims=True) + ad.COSINE_EPS)
        intra, inter = _pair_means(E, labels[:, a])
        out[attr] = {"intra": intra, "inter": inter}
    return out


def mean_pairwise_cosine(E: np.ndarray) -> float:
    E = E / (np.linalg.norm(E, axis=1, keepdims=True) + ad.COSINE_EPS)
    n = len(E)
    s = E.sum(axis=0)
    return float((s @ s - (E * E).sum()) / (n * (n - 1)))


def manipulation_cluster_shift(embedders: Mapping[str, Embedder], G: Generator, dictionaries: Mapping[str, Dictionary],
                               queries: Dataset, attr: str, target_class: int = 0) -> dict:
    """Cluster statistics before and after moving every query's ``attr`` to one class."""
    schema = queries.schema
    a = schema.index(attr)
    x_tilde = manipulate_query(G, dictionaries, queries.features, attr, target_class)
    post_labels = queries.labels.copy()
    post_labels[:, a] = target_class
    members = queries.labels[:, a] == target_class
    target_emb = embedders[attr]
    return {
        "target_class": int(target_class),
        "pre": cluster_stats(embedders, queries.features, queries.labels, schema),
        "post": cluster_stats(embedders, x_tilde, post_labels, schema),
        "target_spread_pre": mean_pairwise_cosine(target_emb.embed(queries.features)),
        "target_class_intra_pre": mean_pairwise_cosine(target_emb.embed(queries.features[members]))
        if members.sum() >= 2 else None,
        "target_spread_post": mean_pairwise_cosine(target_emb.embed(x_tilde)),
    }


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    r_at_k: dict
    t_at_k: dict = field(default_factory=dict)
    probe_delta: dict = field(default_factory=dict)
    cluster_stats: dict = field(default_factory=dict)
    unreachable_count: dict = field(default_factory=dict)
    convergence_proxy: dict = field(default_factory=dict)
    excluded_queries: int = 0
    fir_check: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable({
            "r_at_k": self.r_at_k,
            "t_at_k": self.t_at_k,
            "probe_delta": self.probe_delta,
            "cluster_stats": self.cluster_stats,
            "unreachable_count": self.unreachable_count,
            "convergence_proxy": self.convergence_proxy,
            "excluded_queries": self.excluded_queries,
            "fir_check": self.fir_check,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> EvalReport:
        return cls(d["r_at_k"], d.get("t_at_k", {}), d.get("probe_delta", {}), d.get("cluster_stats", {}),
                   d.get("unreachable_count", {}), d.get("convergence_proxy", {}), d.get("excluded_queries", 0), d.get("fir_check", {}))

    def render_text(self) -> str:
        lines = ["R@k (instance retrieval, original features)"]
        ks = sorted(self.r_at_k, key=int)
        lines.append("  " + "  ".join(f"R@{k:<4}" for k in ks))
        lines.append("  " + "  ".join(f"{self.r_at_k[k]:.3f} " for k in ks))
        if self.t_at_k:
            first = next(iter(self.t_at_k.values()))
            cols = list(first)
            tks = sorted(first[cols[0]], key=int)
            header_k = max((int(k) for k in tks if int(k) <= 10), default=int(tks[0]))
            lines.append("")
            lines.append(f"T@{header_k} per manipulated attribute")
            lines.append(f"  {'variant':<10}" + "".join(f"{c:>9}" for c in cols) + f"{'proxy':>9}")
            for variant, table in self.t_at_k.items():
                proxy = self.convergence_proxy.get(variant, {})
                pmean = np.mean(list(proxy.values())) if proxy else float("nan")
                lines.append(f"  {variant:<10}" + "".join(f"{table[c][_key(table[c], header_k)]:>9.3f}" for c in cols)
                             + f"{pmean:>9.3f}")
            lines.append("")
            lines.append("T@k, all attributes")
            lines.append(f"  {'variant':<10}" + "".join(f"{'T@' + str(k):>8}" for k in tks))
            for variant, table in self.t_at_k.items():
                lines.append(f"  {variant:<10}" + "".join(f"{table['All'][k]:>8.3f}" for k in tks))
        if self.probe_delta:
            lines.append("")
            lines.append("Probe accuracy on the manipulated attribute (original -> manipulated)")
            for variant, pd in self.probe_delta.items():
                parts = [f"{attr} {v['original']:.3f}->{v['manipulated']:.3f}" for attr, v in pd["per_attribute"].items()]
                lines.append(f"  {variant:<10} " + ", ".join(parts) + f"  avg diff {pd['avg_diff']:+.3f}")
        if self.unreachable_count:
            lines.append("")
            lines.append("Unreachable queries (demanded label combination absent from gallery)")
            for variant, counts in self.unreachable_count.items():
                lines.append(f"  {variant:<10} " + ", ".join(f"{a}={n}" for a, n in counts.items()))
        return "\n".join(lines) + "\n"


def _key(table: Mapping, k: int):
    return k if k in table else str(k)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj
