"""
End-to-end stages over an output directory:

    data/{train,query,gallery}.flamfeat
    embedders/<attr>.flamemb (+ .log.json)
    manipulators/<variant slug>/<attr>.flamgan (+ .log.json)
    report.json, report.txt, manifest.json

Each stage reads only what earlier stages wrote, so stages can be rerun
independently and compared by content hash.

The training split is stored densely labelled. Label sparsity is applied when a
stage reads it: ``data.label_density`` is the fraction of labels the
manipulator stage sees (the rest it pseudo-labels), and
``data.embedder_label_density`` the fraction the embedder stage trains on.
Both use the same seeded per-instance mask, so equal densities hide the same
labels.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import retrieval as rt
from . import synthdata as sd
from .embedder import EmbedderConfig, train_embedder
from .errors import ConfigError, DataError, FlamError
from .manipulator import VARIANTS, ManipConfig, train_manipulator

SPLITS = ("train", "query", "gallery")
# 2500 train / 500 query instances; 2000 gallery records at the default size
DEFAULT_SPLIT = (2 / 3, 2 / 15, 1 / 5)

_MANIP_KEYS = {f.name for f in dataclasses.fields(ManipConfig)} - {"target_attr", "remaining_attrs", "seed",
                                                                     "matching", "sampling"}
_EMB_KEYS = {f.name for f in dataclasses.fields(EmbedderConfig)} - {"seed"}


def variant_slug(variant: str) -> str:
    return variant.replace("/", "_")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def default_config() -> dict:
    gen = sd.GenConfig().to_dict()
    manip = {k: v for k, v in ManipConfig().to_dict().items() if k in _MANIP_KEYS}
    emb = {k: v for k, v in dataclasses.asdict(EmbedderConfig()).items() if k in _EMB_KEYS}
    return {
        "seed": 0,
        "schema": sd.AttributeSchema().to_dict(),
        "data": {**gen, "split": list(DEFAULT_SPLIT), "embedder_label_density": 1.0},
        "embedder": emb,
        "manipulator": {**manip, "variants": ["M/OS/Adv"], "targets": None},
        "evaluate": {"ks": list(rt.DEFAULT_KS), "probe_steps": 300, "probe_lr": 0.05, "cluster_class": 0},
    }


def _merge(base: dict, update: Mapping, path: str = "") -> dict:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "signal" and isinstance(value, Mapping):
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def apply_override(config: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = config
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key {'.'.join(parts[:i + 1])!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key.strip()!r}")
    node[parts[-1]] = value
    return config


@dataclass
class RunConfig:
    seed: int
    schema: sd.AttributeSchema
    gen: sd.GenConfig
    split: tuple[float, float, float]
    embedder: EmbedderConfig
    manip: dict
    variants: tuple[str, ...]
    targets: tuple[str, ...]
    ks: tuple[int, ...]
    probe_steps: int
    probe_lr: float
    cluster_class: int
    embedder_label_density: float = 1.0
    raw: dict = field(repr=False, default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping | None = None, overrides: Iterable[str] = (), seed: int | None = None) -> RunConfig:
        raw = _merge(default_config(), copy.deepcopy(dict(d or {})))
        for assignment in overrides:
            apply_override(raw, assignment)
        if seed is not None:
            raw["seed"] = seed
        try:
            schema = sd.AttributeSchema.from_dict(raw["schema"])
            data = dict(raw["data"])
            split = tuple(float(f) for f in data.pop("split"))
            embedder_density = float(data.pop("embedder_label_density"))
            gen = sd.GenConfig.from_dict(data)
            emb = EmbedderConfig(seed=int(raw["seed"]), **raw["embedder"])
            manip = dict(raw["manipulator"])
            variants = tuple(manip.pop("variants"))
            targets = manip.pop("targets")
            targets = tuple(schema.types) if targets is None else tuple(targets)
            for v in variants:
                ManipConfig.for_variant(v, **manip)
            ev = raw["evaluate"]
            ks = tuple(sorted(int(k) for k in ev["ks"]))
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, FlamError):
                raise
            raise ConfigError(f"invalid configuration: {exc}") from None
        for t in targets:
            schema.index(t)
        if not variants:
            raise ConfigError("at least one manipulator variant is required")
        if not ks or ks[0] < 1:
            raise ConfigError("evaluation ks must be positive integers")
        if len(split) != 3:
            raise ConfigError("data.split needs three fractions")
        if not 0.0 <= embedder_density <= 1.0:
            raise ConfigError("data.embedder_label_density must lie in [0, 1]")
        return cls(int(raw["seed"]), schema, gen, split, emb, manip, variants, targets, ks,
                   int(ev["probe_steps"]), float(ev["probe_lr"]), int(ev["cluster_class"]),
                   embedder_density, raw)

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = (), seed: int | None = None) -> RunConfig:
        d = {}
        if path is not None:
            try:
                d = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file {path} does not exist") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
            if not isinstance(d, dict):
                raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(d, overrides, seed)

    def manip_config(self, variant: str, target: str) -> ManipConfig:
        return ManipConfig.for_variant(variant, target_attr=target, seed=self.seed, **self.manip).resolved(self.schema)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """manifest.json: per stage, artifact hashes and wall-clock, plus the config snapshot."""

    def __init__(self, out: Path):
        self.path = Path(out) / "manifest.json"
        self.out = Path(out)
        if self.path.exists():
            try:
                self.data = json.loads(self.path.read_text())
            except json.JSONDecodeError:
                self.data = {}
        else:
            self.data = {}
        self.data.setdefault("stages", {})

    def record(self, stage: str, paths: Sequence[Path], seconds: float, config: RunConfig, **extra) -> dict:
        artifacts = {str(Path(p).relative_to(self.out)): sha256_file(p) for p in sorted(paths)}
        entry = {"artifacts": artifacts, "wall_clock_seconds": round(seconds, 3), **extra}
        self.data["stages"][stage] = entry
        self.data["version"] = __version__
        self.data["config"] = config.to_dict()
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        return entry


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def data_paths(out) -> dict[str, Path]:
    return {s: Path(out) / "data" / f"{s}.flamfeat" for s in SPLITS}


def embedder_path(out, attr: str) -> Path:
    return Path(out) / "embedders" / f"{attr}.flamemb"


def manipulator_path(out, variant: str, attr: str) -> Path:
    return Path(out) / "manipulators" / variant_slug(variant) / f"{attr}.flamgan"


def make_splits(config: RunConfig) -> tuple[sd.Dataset, sd.Dataset, sd.Dataset]:
    """Densely labelled train/query/gallery."""
    gen = dataclasses.replace(config.gen, label_density=1.0)
    dense = sd.generate(gen, config.schema, config.seed)
    train, query, gallery = sd.split(dense, config.split, config.seed)
    stamp = lambda ds: sd.Dataset(ds.schema, ds.features, ds.instance_ids, ds.labels, gen, config.seed)
    return stamp(train), stamp(query), stamp(gallery)


def visible_labels(train: sd.Dataset, density: float, seed: int) -> sd.Dataset:
    """The training split as seen by a stage that only has ``density`` of its labels."""
    return train if density >= 1.0 else sd.mask_labels(train, density, seed)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {what}: {path} (run the earlier stage first)")
    return path


def load_splits(out) -> dict[str, sd.Dataset]:
    return {s: sd.load_features(_require(p, f"{s} feature file")) for s, p in data_paths(out).items()}


def load_embedders(out, schema: sd.AttributeSchema) -> dict:
    return {a: ckpt.load_embedder(_require(embedder_path(out, a), f"embedder checkpoint for {a!r}")) for a in schema.types}


def run_gen_data(config: RunConfig, out) -> dict:
    t0 = time.perf_counter()
    paths = data_paths(out)
    paths["train"].parent.mkdir(parents=True, exist_ok=True)
    for name, ds in zip(SPLITS, make_splits(config)):
        sd.save_features(ds, paths[name])
    return Manifest(out).record("gen-data", list(paths.values()), time.perf_counter() - t0, config)


def run_train_embedders(config: RunConfig, out) -> dict:
    t0 = time.perf_counter()
    train = sd.load_features(_require(data_paths(out)["train"], "train feature file"))
    train = visible_labels(train, config.embedder_label_density, config.seed)
    written = []
    embedder_path(out, "x").parent.mkdir(parents=True, exist_ok=True)
    for attr in config.schema.types:
        emb, dic, log = train_embedder(train, attr, config.embedder)
        p = embedder_path(out, attr)
        ckpt.save_embedder(p, emb, dic, log, dataclasses.asdict(config.embedder))
        written += [p, Path(str(p) + ckpt.SIDECAR_SUFFIX)]
    return Manifest(out).record("train-embedders", written, time.perf_counter() - t0, config)


def run_train_manipulators(config: RunConfig, out, variants: Sequence[str] | None = None) -> dict:
    t0 = time.perf_counter()
    train = sd.load_features(_require(data_paths(out)["train"], "train feature file"))
    train = visible_labels(train, config.gen.label_density, config.seed)
    embedders = load_embedders(out, config.schema)
    written, timings = [], {}
    for variant in variants or config.variants:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        for attr in config.targets:
            t1 = time.perf_counter()
            trained = train_manipulator(train, embedders, config.manip_config(variant, attr))
            p = manipulator_path(out, variant, attr)
            p.parent.mkdir(parents=True, exist_ok=True)
            ckpt.save_manipulator(p, trained)
            written += [p, Path(str(p) + ckpt.SIDECAR_SUFFIX)]
            timings[f"{variant}:{attr}"] = round(time.perf_counter() - t1, 3)
    return Manifest(out).record("train-manipulator", written, time.perf_counter() - t0, config,
                                variants=list(variants or config.variants), per_run_seconds=timings)


def load_variant(out, variant: str, schema: sd.AttributeSchema) -> dict:
    return {a: ckpt.load_manipulator(_require(manipulator_path(out, variant, a), f"{variant} manipulator for {a!r}"))
            for a in schema.types}


def evaluate(config: RunConfig, out, variants: Sequence[str] | None = None) -> rt.EvalReport:
    """Compute the full report from the checkpoints on disk."""
    splits = load_splits(out)
    train, query, gallery = splits["train"], splits["query"], splits["gallery"]
    schema = query.schema
    embedders = load_embedders(out, schema)
    dictionaries = {a: d for a, (_, d) in embedders.items()}
    phi = {a: e for a, (e, _) in embedders.items()}

    index = rt.build_index(gallery)
    digest_before = index.digest()
    r_before, excluded = rt.recall_table(index, query, config.ks)

    loaded = {v: load_variant(out, v, schema) for v in (variants or config.variants)}

    r_after, _ = rt.recall_table(index, query, config.ks)
    fir = {"index_sha256": digest_before, "index_unchanged": index.digest() == digest_before,
           "r_at_k_unchanged": r_after == r_before}
    if not (fir["index_unchanged"] and fir["r_at_k_unchanged"]):
        raise FlamError("gallery index or R@k changed after loading manipulator checkpoints")

    probe = rt.train_probe(train, steps=config.probe_steps, lr=config.probe_lr, seed=config.seed)
    available = {a: np.unique(gallery.labels[:, i]).tolist() for i, a in enumerate(schema.types)}
    report = rt.EvalReport(r_before, excluded_queries=excluded, fir_check=fir)
    for variant, manips in loaded.items():
        gens = {a: m.generator for a, m in manips.items()}
        table, unreachable = rt.top_k_table(index, query, gens, dictionaries, config.ks, config.seed)
        report.t_at_k[variant] = table
        report.unreachable_count[variant] = unreachable
        report.probe_delta[variant] = rt.probe_delta(probe, query, gens, dictionaries, config.seed, available)
        report.cluster_stats[variant] = {
            a: rt.manipulation_cluster_shift(phi, gens[a], dictionaries, query, a, config.cluster_class)
            for a in schema.types}
        report.convergence_proxy[variant] = {a: m.log[-1]["convergence_proxy"] if m.log else None
                                             for a, m in manips.items()}
    return report


def run_evaluate(config: RunConfig, out, variants: Sequence[str] | None = None) -> tuple[rt.EvalReport, dict]:
    t0 = time.perf_counter()
    report = evaluate(config, out, variants)
    json_path = Path(out) / "report.json"
    txt_path = Path(out) / "report.txt"
    json_path.write_text(report.to_json() + "\n")
    txt_path.write_text(report.render_text())
    entry = Manifest(out).record("evaluate", [json_path, txt_path], time.perf_counter() - t0, config)
    return report, entry


def run_all(config: RunConfig, out, variants: Sequence[str] | None = None) -> rt.EvalReport:
    Path(out).mkdir(parents=True, exist_ok=True)
    run_gen_data(config, out)
    run_train_embedders(config, out)
    run_train_manipulators(config, out, variants)
    return run_evaluate(config, out, variants)[0]
