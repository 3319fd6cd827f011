"""
Binary checkpoints for embedders (FLAMEMB) and manipulators (FLAMGAN).

Both formats are little-endian: an 8-byte magic, a u32 version, a small
header, then a list of float32 tensors each preceded by its rank and shape.
A JSON sidecar ``<path>.log.json`` carries the config and training log.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedder import Dictionary, Embedder
from .errors import FormatError
from .manipulator import Discriminator, Generator, ManipConfig, TrainedManipulator

EMB_MAGIC = b"FLAMEMB\0"
GAN_MAGIC = b"FLAMGAN\0"
CKPT_VERSION = 1
SIDECAR_SUFFIX = ".log.json"


class _Reader:
    def __init__(self, blob: bytes, kind: str):
        self.blob = blob
        self.pos = 0
        self.kind = kind

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated {self.kind} checkpoint", len(self.blob))
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def name(self) -> str:
        start = self.pos
        n = struct.unpack("<H", self.take(2))[0]
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"attribute name in {self.kind} checkpoint is not UTF-8", start) from None

    def tensors(self) -> list[np.ndarray]:
        out = []
        for _ in range(self.u32()):
            shape = tuple(self.u32() for _ in range(self.u32()))
            count = int(np.prod(shape)) if shape else 1
            out.append(np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).copy())
        return out

    def finish(self) -> None:
        if self.pos != len(self.blob):
            raise FormatError(f"{len(self.blob) - self.pos} trailing bytes in {self.kind} checkpoint", self.pos)


def _header(blob: bytes, magic: bytes, kind: str) -> _Reader:
    r = _Reader(blob, kind)
    if r.take(len(magic)) != magic:
        raise FormatError(f"not a {kind} checkpoint (bad magic)", 0)
    version = r.u32()
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported {kind} version {version}", len(magic))
    return r


def _put_name(buf: io.BytesIO, name: str) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _put_tensors(buf: io.BytesIO, arrays: Sequence[np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        a = np.asarray(a)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _params(module) -> list[np.ndarray]:
    return [p.data for p in module.parameters()]


def _load_params(module, arrays: Sequence[np.ndarray], kind: str) -> None:
    params = module.parameters()
    if len(arrays) != len(params) or any(a.shape != p.shape for a, p in zip(arrays, params)):
        raise FormatError(f"{kind} layer shapes do not match the declared sizes")
    for p, a in zip(params, arrays):
        p.data = a.astype(np.float64)


def write_sidecar(path, payload: dict) -> Path:
    side = Path(str(path) + SIDECAR_SUFFIX)
    side.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return side


def read_sidecar(path) -> dict:
    side = Path(str(path) + SIDECAR_SUFFIX)
    try:
        return json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"sidecar {side} is not valid JSON: {exc.msg}", exc.pos) from None


# ---------------------------------------------------------------------------
# embedders
# ---------------------------------------------------------------------------

def dumps_embedder(embedder: Embedder, dictionary: Dictionary) -> bytes:
    buf = io.BytesIO()
    buf.write(EMB_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    _put_name(buf, embedder.attr_type)
    buf.write(struct.pack("<II", embedder.k, embedder.dim))
    _put_tensors(buf, _params(embedder))
    _put_tensors(buf, [dictionary.vectors.data])
    return buf.getvalue()


def loads_embedder(blob: bytes) -> tuple[Embedder, Dictionary]:
    r = _header(blob, EMB_MAGIC, "FLAMEMB")
    attr = r.name()
    k, dim = r.u32(), r.u32()
    weights = r.tensors()
    dic = r.tensors()
    r.finish()
    vectors = dic[0] if len(dic) == 1 else None
    if vectors is None or vectors.ndim != 2 or vectors.shape[1] != k:
        raise FormatError("FLAMEMB dictionary matrix has the wrong shape")
    embedder = Embedder(attr, dim, k)
    _load_params(embedder, weights, "FLAMEMB")
    dictionary = Dictionary(attr, vectors.shape[0], k)
    dictionary.vectors.data = vectors.astype(np.float64)
    return embedder, dictionary


def save_embedder(path, embedder: Embedder, dictionary: Dictionary, log: list | None = None,
                  config: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps_embedder(embedder, dictionary))
    write_sidecar(path, {"attr_type": embedder.attr_type, "config": config or {}, "log": log or []})
    return path


def load_embedder(path) -> tuple[Embedder, Dictionary]:
    return loads_embedder(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# manipulators
# ---------------------------------------------------------------------------

def dumps_manipulator(G: Generator, D: Discriminator, target_attr: str, remaining: Sequence[str]) -> bytes:
    buf = io.BytesIO()
    buf.write(GAN_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(struct.pack("<IIII", G.dim, G.k, D.n, G.hidden))
    for name in (target_attr, *remaining):
        _put_name(buf, name)
    _put_tensors(buf, _params(G))
    _put_tensors(buf, _params(D))
    return buf.getvalue()


def loads_manipulator(blob: bytes) -> tuple[Generator, Discriminator, list[str]]:
    """Returns (G, D, attribute order) where the order starts with the target."""
    r = _header(blob, GAN_MAGIC, "FLAMGAN")
    dim, k, n, hidden = (r.u32() for _ in range(4))
    if n < 1 or n > 256:
        raise FormatError(f"implausible attribute count {n} in FLAMGAN header", 16)
    attrs = [r.name() for _ in range(n)]
    g_arrays = r.tensors()
    d_arrays = r.tensors()
    r.finish()
    G = Generator(dim, k, hidden)
    _load_params(G, g_arrays, "FLAMGAN generator")
    D = Discriminator(dim, n, k, hidden)
    _load_params(D, d_arrays, "FLAMGAN discriminator")
    return G, D, attrs


def save_manipulator(path, trained: TrainedManipulator) -> Path:
    path = Path(path)
    cfg = trained.config
    path.write_bytes(dumps_manipulator(trained.generator, trained.discriminator, cfg.target_attr, cfg.remaining_attrs))
    write_sidecar(path, {"variant": cfg.variant, "config": cfg.to_dict(), "log": trained.log})
    return path


def load_manipulator(path) -> TrainedManipulator:
    G, D, attrs = loads_manipulator(Path(path).read_bytes())
    side = Path(str(path) + SIDECAR_SUFFIX)
    if side.exists():
        meta = read_sidecar(path)
        cfg_dict = dict(meta.get("config", {}))
        cfg_dict["remaining_attrs"] = tuple(cfg_dict.get("remaining_attrs", attrs[1:]))
        try:
            config = ManipConfig(**cfg_dict)
        except TypeError as exc:
            raise FormatError(f"sidecar config for {path} is malformed: {exc}") from None
        log = meta.get("log", [])
    else:
        config = ManipConfig(target_attr=attrs[0], remaining_attrs=tuple(attrs[1:]))
        log = []
    return TrainedManipulator(G, D, config, log)
