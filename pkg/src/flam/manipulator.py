"""
Query feature manipulator: a conditional generator over feature vectors and a
two-headed discriminator whose matching head is distilled from frozen
attribute embedders.

Per batch the discriminator is updated on the adversarial loss plus the
real-feature matching term (and, by default, the fake-feature term on detached
generator output); the generator is then updated on the non-saturating
adversarial loss, the fake-feature matching term and the cycle reconstruction
loss.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedder import Dictionary, Embedder, attr_seed, fill_labels
from .errors import ConfigError, ContractError, DimensionError, TrainingError
from .synthdata import ABSENT, AttributeSchema, Dataset

MATCHING_MODES = ("M", "S")
SAMPLING_MODES = ("OS", "uniform")
LABEL_MODES = ("true-labels", "pseudo-labels")

# ablation variant name -> (matching mode, sampling, adversarial loss on)
VARIANTS = {
    "M/OS/Adv": ("M", "OS", True),
    "M/-/Adv": ("M", "uniform", True),
    "M/-/-": ("M", "uniform", False),
    "S/-/Adv": ("S", "uniform", True),
}


@dataclass
class ManipConfig:
    target_attr: str = "color"
    remaining_attrs: tuple[str, ...] = ()
    lambda_adv: float = 1.0
    lambda_match: float = 10.0
    lambda_cycle: float = 10.0
    matching: str = "M"
    sampling: str = "OS"
    label_mode: str = "true-labels"
    lr: float = 1e-3
    beta1: float = 0.5
    epochs: int = 30
    batch_size: int = 64
    hidden: int = 128
    seed: int = 0
    precision: str = "float32"
    # the fake matching term also trains D's matching head (on detached fakes)
    fake_match_updates_d: bool = True
    proxy_size: int = 256

    def __post_init__(self):
        self.remaining_attrs = tuple(self.remaining_attrs)
        if self.matching not in MATCHING_MODES:
            raise ConfigError(f"matching must be one of {MATCHING_MODES}, got {self.matching!r}")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"sampling must be one of {SAMPLING_MODES}, got {self.sampling!r}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if min(self.lambda_adv, self.lambda_match, self.lambda_cycle) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be 'float32' or 'float64'")
        if self.target_attr in self.remaining_attrs:
            raise ConfigError(f"target attribute {self.target_attr!r} listed among the remaining ones")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> ManipConfig:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {list(VARIANTS)}")
        matching, sampling, adv = VARIANTS[variant]
        overrides["lambda_adv"] = overrides.get("lambda_adv", 1.0) if adv else 0.0
        return cls(matching=matching, sampling=sampling, **overrides)

    @property
    def variant(self) -> str:
        return f"{self.matching}/{'OS' if self.sampling == 'OS' else '-'}/{'Adv' if self.lambda_adv > 0 else '-'}"

    def resolved(self, schema: AttributeSchema) -> ManipConfig:
        """Fill in / validate the remaining attributes against ``schema``."""
        schema.index(self.target_attr)
        remaining = self.remaining_attrs or tuple(t for t in schema.types if t != self.target_attr)
        if set(remaining) | {self.target_attr} != set(schema.types) or len(remaining) != schema.n - 1:
            raise ConfigError(f"target {self.target_attr!r} + remaining {list(remaining)} "
                              f"must cover schema types {list(schema.types)} exactly")
        return dataclasses.replace(self, remaining_attrs=remaining)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["remaining_attrs"] = list(self.remaining_attrs)
        return d


class Generator:
    """G: (x ⊕ e) -> unit-norm feature, three affine layers."""

    def __init__(self, dim: int, k: int, hidden: int = 256, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.dim, self.k, self.hidden = dim, k, hidden
        self.mlp = ad.MLP([dim + k, hidden, hidden, dim], rng)

    def _check(self, x_shape, e_shape) -> None:
        if x_shape[-1] != self.dim or e_shape[-1] != self.k or x_shape[:-1] != e_shape[:-1]:
            raise DimensionError(f"generator expects x (.., {self.dim}) and e (.., {self.k}); "
                                 f"got {x_shape} and {e_shape}")

    def __call__(self, x: Tensor, e: Tensor) -> Tensor:
        x, e = ad.as_tensor(x), ad.as_tensor(e)
        self._check(x.shape, e.shape)
        return ad.l2_normalize(self.mlp(ad.concat([x, e])))

    def generate(self, x, e) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        e = np.asarray(e, dtype=np.float64)
        self._check(x.shape, e.shape)
        h = self.mlp.forward_array(np.concatenate([x, e], axis=-1))
        return h / (np.linalg.norm(h, axis=-1, keepdims=True) + ad.COSINE_EPS)

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def astype(self, dtype) -> None:
        self.mlp.astype(dtype)


def generate(G: Generator, x, e) -> np.ndarray:
    return G.generate(x, e)


class Discriminator:
    """Shared trunk with a realness logit head and an (n*k)-dim matching head."""

    def __init__(self, dim: int, n: int, k: int, hidden: int = 256, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.dim, self.n, self.k, self.hidden = dim, n, k, hidden
        self.trunk = ad.MLP([dim, hidden, hidden], rng)
        self.head_rf = ad.Linear(hidden, 1, rng)
        self.head_fm = ad.Linear(hidden, n * k, rng)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"discriminator expects dim {self.dim}, got {x.shape[-1]}")
        h = ad.leaky_relu(self.trunk(x), self.trunk.slope)
        logit = self.head_rf(h)
        return ad.sum(logit, axis=-1), self.head_fm(h)

    def parameters(self) -> list[Tensor]:
        return self.trunk.parameters() + self.head_rf.parameters() + self.head_fm.parameters()

    def astype(self, dtype) -> None:
        self.trunk.astype(dtype)
        self.head_rf.astype(dtype)
        self.head_fm.astype(dtype)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def adv_losses(D: Discriminator, x_real, x_fake) -> tuple[Tensor, Tensor]:
    """(d_loss, g_loss); the fake is detached inside d_loss."""
    x_fake = ad.as_tensor(x_fake)
    logit_real, _ = D(x_real)
    logit_fake_det, _ = D(x_fake.detach())
    d_loss = -ad.mean(ad.log_sigmoid(logit_real) + ad.log_sigmoid(-logit_fake_det))
    logit_fake, _ = D(x_fake)
    g_loss = -ad.mean(ad.log_sigmoid(logit_fake))
    return d_loss, g_loss


def matching_mask(n: int, k: int, mode: str) -> np.ndarray:
    """1 on the compared sub-blocks; mode S keeps only the leading target block."""
    if mode not in MATCHING_MODES:
        raise ConfigError(f"matching mode must be one of {MATCHING_MODES}")
    mask = np.ones(n * k)
    if mode == "S":
        mask[k:] = 0.0
    return mask


def matching_targets(embeddings: Mapping[str, np.ndarray], target_attr: str, remaining: Sequence[str],
                     anchor: np.ndarray, partner: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated teacher embeddings for the real and the fake matching term.

    ``embeddings[attr]`` holds phi_attr of every candidate row; ``anchor`` and
    ``partner`` index the rows of x and x-.
    """
    rest = [embeddings[r][anchor] for r in remaining]
    real = np.concatenate([embeddings[target_attr][anchor]] + rest, axis=-1)
    fake = np.concatenate([embeddings[target_attr][partner]] + rest, axis=-1)
    return real, fake


def matching_term(f: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Batch mean of the masked squared L2 distance between f and the target."""
    if f.shape != target.shape:
        raise DimensionError(f"matching output {f.shape} vs target {target.shape}")
    return ad.mean(ad.sum(ad.squared_diff(f * mask, target * mask), axis=-1))


def _teacher_embeddings(embedders: Mapping[str, Embedder], attrs: Sequence[str], x: np.ndarray) -> dict:
    missing = [a for a in attrs if a not in embedders]
    if missing:
        raise ConfigError(f"no embedder for scheduled attribute(s) {missing}")
    return {a: embedders[a].embed(x) for a in attrs}


def feature_matching_terms(D: Discriminator, embedders: Mapping[str, Embedder], x, x_minus, x_tilde,
                           mode: str, target_attr: str, remaining: Sequence[str]) -> tuple[Tensor, Tensor]:
    """(real term, fake term). Embedders are evaluated outside the graph."""
    x = np.asarray(x, dtype=np.float64)
    x_minus = np.asarray(x_minus, dtype=np.float64)
    attrs = [target_attr, *remaining]
    emb_x = _teacher_embeddings(embedders, attrs, x)
    emb_minus = _teacher_embeddings(embedders, [target_attr], x_minus)
    rest = [emb_x[r] for r in remaining]
    real_target = np.concatenate([emb_x[target_attr]] + rest, axis=-1)
    fake_target = np.concatenate([emb_minus[target_attr]] + rest, axis=-1)
    mask = matching_mask(len(attrs), D.k, mode)
    _, f_real = D(Tensor(x))
    _, f_fake = D(x_tilde)
    return matching_term(f_real, real_target, mask), matching_term(f_fake, fake_target, mask)


def feature_matching_loss(D: Discriminator, embedders: Mapping[str, Embedder], x, x_minus, x_tilde,
                          mode: str, target_attr: str, remaining: Sequence[str]) -> Tensor:
    real, fake = feature_matching_terms(D, embedders, x, x_minus, x_tilde, mode, target_attr, remaining)
    return real + fake


def cycle_loss(G: Generator, embedder_a: Embedder, x, e_minus) -> Tensor:
    """Batch mean of ||x - G(G(x, e-), phi_a(x))||^2."""
    x = ad.as_tensor(x)
    e = Tensor(embedder_a.embed(x.data))
    x_hat = G(G(x, e_minus), e)
    return ad.mean(ad.sum(ad.squared_diff(x, x_hat), axis=-1))


# ---------------------------------------------------------------------------
# pair construction
# ---------------------------------------------------------------------------

def remaining_distance(remaining_embeddings: Sequence[np.ndarray]) -> np.ndarray:
    """(B, B) matrix of sum over remaining attributes of 1 - cos."""
    total = 0.0
    for E in remaining_embeddings:
        En = E / (np.linalg.norm(E, axis=1, keepdims=True) + ad.COSINE_EPS)
        total = total + (1.0 - En @ En.T)
    return np.asarray(total)


def online_sample(remaining_embeddings: Sequence[np.ndarray], target_labels, anchor: int) -> int | None:
    """Batch position of the partner for ``anchor``, or None to signal SKIP.

    Eligible partners carry a different target class; among them the one with
    the smallest summed remaining-attribute cosine distance wins, ties going
    to the earlier batch position.
    """
    return int(v) if (v := online_partners(remaining_embeddings, target_labels)[anchor]) >= 0 else None


def online_partners(remaining_embeddings: Sequence[np.ndarray], target_labels) -> np.ndarray:
    labels = np.asarray(target_labels)
    dist = remaining_distance(remaining_embeddings) if len(remaining_embeddings) else np.zeros((len(labels),) * 2)
    eligible = labels[:, None] != labels[None, :]
    dist = np.where(eligible, dist, np.inf)
    out = np.argmin(dist, axis=1)
    out[~eligible.any(axis=1)] = -1
    return out


def uniform_partners(target_labels, rng: np.random.Generator) -> np.ndarray:
    labels = np.asarray(target_labels)
    out = np.full(len(labels), -1, dtype=np.intp)
    for i, c in enumerate(labels):
        cand = np.flatnonzero(labels != c)
        if len(cand):
            out[i] = cand[rng.integers(len(cand))]
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def convergence_proxy(G: Generator, embedder_a: Embedder, sample, labels=None, seed: int = 0,
                      partners: np.ndarray | None = None) -> float:
    """Mean cos(x, G(G(x, e-), e)) over ``sample``.

    e- is the embedding of a partner drawn uniformly among sample members of a
    different target class (any other member when ``labels`` is None).
    """
    x = np.asarray(sample, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if len(x) == 0:
        raise ContractError("convergence_proxy needs a non-empty sample")
    if partners is None:
        if len(x) == 1:
            partners = np.zeros(1, dtype=np.intp)
        else:
            keys = np.arange(len(x)) if labels is None else np.asarray(labels)
            partners = uniform_partners(keys, np.random.default_rng(seed))
            partners = np.where(partners < 0, np.arange(len(x)), partners)
    e = embedder_a.embed(x)
    x_tilde = G.generate(x, e[partners])
    x_hat = G.generate(x_tilde, e)
    cos = (x * x_hat).sum(1) / ((np.linalg.norm(x, axis=1) + ad.COSINE_EPS) * (np.linalg.norm(x_hat, axis=1) + ad.COSINE_EPS))
    return float(np.mean(cos))


@dataclass
class TrainedManipulator:
    generator: Generator
    discriminator: Discriminator
    config: ManipConfig
    log: list[dict] = field(default_factory=list)

    def __iter__(self):
        return iter((self.generator, self.discriminator, self.log))


def _require_finite(values: dict, epoch: int, step: int) -> None:
    bad = {k: v for k, v in values.items() if not np.isfinite(v)}
    if bad:
        raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}: {bad}")


def train_manipulator(train: Dataset, embedders: Mapping[str, tuple[Embedder, Dictionary]],
                      config: ManipConfig | None = None) -> TrainedManipulator:
    """Train G and D for ``config.target_attr`` against frozen embedders.

    ``embedders`` maps every schema attribute type to its trained
    (Embedder, Dictionary) pair. Returns a TrainedManipulator, which also
    unpacks as ``(G, D, log)``.
    """
    config = (config or ManipConfig()).resolved(train.schema)
    target, remaining = config.target_attr, config.remaining_attrs
    attrs = [target, *remaining]
    missing = [a for a in attrs if a not in embedders]
    if missing:
        raise ConfigError(f"no embedder for scheduled attribute(s) {missing}")
    phi = {a: embedders[a][0] for a in attrs}
    k = phi[target].k
    X_all = train.features.astype(np.float64)

    labels = train.label_column(target)
    if config.label_mode == "pseudo-labels":
        emb, dic = embedders[target]
        labels = fill_labels(emb, dic, X_all, labels)
        rows = np.arange(len(train))
    else:
        rows = np.flatnonzero(labels != ABSENT)
    if len(np.unique(labels[rows])) < 2:
        raise TrainingError(f"need two {target!r} classes to build manipulation pairs")
    dtype = np.dtype(config.precision)
    X = X_all[rows]
    labels = labels[rows]
    E = {a: phi[a].embed(X).astype(dtype) for a in attrs}
    Xt = X.astype(dtype)

    init_ss, batch_ss, proxy_ss = attr_seed(config.seed, "manip:" + target).spawn(3)
    init_rng = np.random.default_rng(init_ss)
    G = Generator(train.dim, k, config.hidden, init_rng)
    D = Discriminator(train.dim, len(attrs), k, config.hidden, init_rng)
    G.astype(dtype)
    D.astype(dtype)
    opt_g = ad.Adam(G.parameters(), lr=config.lr, betas=(config.beta1, 0.999))
    opt_d = ad.Adam(D.parameters(), lr=config.lr, betas=(config.beta1, 0.999))
    mask = matching_mask(len(attrs), k, config.matching).astype(dtype)
    use_adv = config.lambda_adv > 0

    proxy_rng = np.random.default_rng(proxy_ss)
    proxy_rows = np.sort(proxy_rng.permutation(len(X))[:min(config.proxy_size, len(X))])
    proxy_partners = uniform_partners(labels[proxy_rows], proxy_rng)
    proxy_partners = np.where(proxy_partners < 0, np.arange(len(proxy_rows)), proxy_partners)

    rng = np.random.default_rng(batch_ss)
    log: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        sums = dict(d_adv=0.0, g_adv=0.0, match_real=0.0, match_fake=0.0, cycle=0.0)
        n_batches = 0
        order = rng.permutation(len(X))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            if config.sampling == "OS":
                partners = online_partners([E[r][idx] for r in remaining], labels[idx])
            else:
                partners = uniform_partners(labels[idx], rng)
            keep = partners >= 0  # SKIP: no partner of a different class in this batch
            if not keep.any():
                continue
            a = idx[keep]
            m = idx[partners[keep]]
            real_target, fake_target = matching_targets(E, target, remaining, a, m)
            x = Tensor(Xt[a])
            e_minus = Tensor(E[target][m])
            e_self = Tensor(E[target][a])

            x_tilde = G(x, e_minus)
            fake_det = x_tilde.detach()

            # discriminator step
            opt_d.zero_grad()
            logit_real, f_real = D(x)
            match_real = matching_term(f_real, real_target, mask)
            d_total = config.lambda_match * match_real
            d_adv_val = 0.0
            if use_adv or config.fake_match_updates_d:
                logit_fake, f_fake_det = D(fake_det)
                if use_adv:
                    d_adv = -ad.mean(ad.log_sigmoid(logit_real) + ad.log_sigmoid(-logit_fake))
                    d_total = d_total + d_adv
                    d_adv_val = d_adv.item()
                if config.fake_match_updates_d:
                    d_total = d_total + config.lambda_match * matching_term(f_fake_det, fake_target, mask)
            d_total.backward()
            opt_d.step()

            # generator step
            opt_g.zero_grad()
            logit_gen, f_gen = D(x_tilde)
            match_fake = matching_term(f_gen, fake_target, mask)
            x_hat = G(x_tilde, e_self)
            cyc = ad.mean(ad.sum(ad.squared_diff(x, x_hat), axis=-1))
            g_total = config.lambda_match * match_fake + config.lambda_cycle * cyc
            g_adv_val = 0.0
            if use_adv:
                g_adv = -ad.mean(ad.log_sigmoid(logit_gen))
                g_total = g_total + config.lambda_adv * g_adv
                g_adv_val = g_adv.item()
            g_total.backward()
            opt_g.step()
            opt_d.zero_grad()

            vals = dict(d_adv=d_adv_val, g_adv=g_adv_val, match_real=match_real.item(),
                        match_fake=match_fake.item(), cycle=cyc.item())
            _require_finite(vals, epoch, step)
            for key, v in vals.items():
                sums[key] += v
            n_batches += 1
            step += 1
        if n_batches == 0:
            raise TrainingError(f"epoch {epoch}: every batch was skipped; no manipulation pairs available")
        entry = {"epoch": epoch, **{key: v / n_batches for key, v in sums.items()}}
        entry["convergence_proxy"] = convergence_proxy(G, phi[target], X[proxy_rows], partners=proxy_partners)
        _require_finite(entry, epoch, step)
        log.append(entry)
    return TrainedManipulator(G, D, config, log)
