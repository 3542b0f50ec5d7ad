"""Losses, AdamW, synthetic episodes, and the adaptation loop.

The objective is cross-entropy over cosine-similarity logits between
adapted image features and adapted class-text features, plus a
feature-anchoring regularizer per modality that keeps adapted features
close to the frozen model's:

  L = L_ce + lambda * (L_reg_v + L_reg_t)

Only agent / bridge / meta parameters train; the backbone never
receives gradients. The synthetic dataset gives each class an
orthogonal latent prototype (images = prototype + noise per patch
token) and a distinct token sequence, so the task is separable while a
random frozen model stays near chance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .agents import CoupledAgentSite, CouplingMode, SiteKey, build_scaling_map, hook_set
from .autodiff import NonFiniteError, Tensor
from .encoder import ALL_POSITIONS, DualEncoder, Position, image_forward, text_forward

__all__ = [
    "TrainingConfig",
    "SyntheticDataset",
    "Episode",
    "AdamState",
    "MetricRow",
    "TrainedState",
    "gen_synthetic",
    "sample_few_shot",
    "ce_loss",
    "reg_losses",
    "total_loss",
    "adamw_init",
    "adamw_step",
    "train",
    "evaluate",
    "nearest_prototype_accuracy",
    "METRICS_HEADER",
]

METRICS_HEADER = "step,L_ce,L_reg_v,L_reg_t,L,acc"


@dataclass(frozen=True)
class TrainingConfig:
    shots: int = 4
    classes: int = 16
    batch_size: int = 32
    steps: int = 300
    lr: float = 1.5e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    lam: float = 1.0
    temperature: float = 0.07
    mode: CouplingMode = CouplingMode.BIDIRECTIONAL
    rank: int = 4
    d_m: int = 16
    bridge_shift: bool = False
    positions: tuple[Position, ...] = ALL_POSITIONS
    cosine_lr: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ValueError("betas must lie in [0, 1)")


# ------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticDataset:
    prototypes: np.ndarray  # (C, d_v) orthonormal latent directions
    images: np.ndarray  # (C, pool, N_v, d_v)
    tokens: list[list[int]]  # one id sequence per class
    base_classes: list[int]
    novel_classes: list[int]
    noise: float
    seed: int

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def pool_per_class(self) -> int:
        return self.images.shape[1]


def gen_synthetic(
    C: int,
    k_pool: int,
    noise: float,
    seed: int,
    dims: tuple[int, int],
    text_len: int = 4,
    dtype=np.float32,
) -> SyntheticDataset:
    """Deterministic separable dataset: orthogonal prototypes plus patch noise."""
    n_v, d_v = dims
    if noise < 0:
        raise ValueError("noise must be non-negative")
    if C < 2 or k_pool < 1:
        raise ValueError("need at least 2 classes and 1 sample per class")
    if C > d_v:
        raise ValueError(f"cannot place {C} orthogonal prototypes in {d_v} dimensions")
    if text_len < 2:
        raise ValueError("text_len must be >= 2")
    gen = rngmod.derive(seed, "synthetic")
    # QR of a square Gaussian gives orthonormal rows; keep the first C
    q, _ = np.linalg.qr(gen.standard_normal((d_v, d_v)))
    prototypes = np.ascontiguousarray(q.T[:C]).astype(dtype)
    images = np.empty((C, k_pool, n_v, d_v), dtype=dtype)
    for c in range(C):
        lifted = (prototypes[c] * np.sqrt(d_v)).astype(dtype)  # O(1) per-channel magnitude
        jitter = gen.standard_normal((k_pool, n_v, d_v)).astype(dtype)
        images[c] = lifted[None, None, :] + float(noise) * jitter
    # class "names": a shared start token then a class-specific id, distinct per class
    tokens = [[1] + [2 + c] * (text_len - 1) for c in range(C)]
    half = C // 2
    return SyntheticDataset(
        prototypes=prototypes,
        images=images,
        tokens=tokens,
        base_classes=list(range(half)),
        novel_classes=list(range(half, C)),
        noise=noise,
        seed=seed,
    )


def nearest_prototype_accuracy(dataset: SyntheticDataset) -> float:
    """Closed-form probe: classify mean-patch latents by nearest prototype."""
    C, pool = dataset.num_classes, dataset.pool_per_class
    latents = dataset.images.mean(axis=2).reshape(C * pool, -1)
    sims = latents @ dataset.prototypes.T
    pred = sims.argmax(axis=1)
    truth = np.repeat(np.arange(C), pool)
    return float((pred == truth).mean())


@dataclass
class Episode:
    """A few-shot task: k train shots per base class, eval pools for base and novel."""

    train_images: np.ndarray  # (n_train, N_v, d_v)
    train_labels: np.ndarray  # (n_train,) indices into base_classes
    base_eval_images: np.ndarray
    base_eval_labels: np.ndarray
    novel_eval_images: np.ndarray
    novel_eval_labels: np.ndarray
    base_tokens: list[list[int]]
    novel_tokens: list[list[int]]
    base_classes: list[int]
    novel_classes: list[int]
    seed: int

    @property
    def num_base(self) -> int:
        return len(self.base_classes)


def sample_few_shot(dataset: SyntheticDataset, k: int, seed: int) -> Episode:
    """Deterministically pick k train shots per base class; the rest is eval."""
    if k > dataset.pool_per_class:
        raise ValueError(f"k={k} exceeds pool of {dataset.pool_per_class} samples per class")
    gen = rngmod.derive(seed, "episode")
    train_imgs, train_lbls = [], []
    base_eval_imgs, base_eval_lbls = [], []
    for label, c in enumerate(dataset.base_classes):
        order = gen.permutation(dataset.pool_per_class)
        for idx in order[:k]:
            train_imgs.append(dataset.images[c, idx])
            train_lbls.append(label)
        for idx in order[k:]:
            base_eval_imgs.append(dataset.images[c, idx])
            base_eval_lbls.append(label)
    novel_eval_imgs, novel_eval_lbls = [], []
    for label, c in enumerate(dataset.novel_classes):
        for idx in range(dataset.pool_per_class):
            novel_eval_imgs.append(dataset.images[c, idx])
            novel_eval_lbls.append(label)
    dtype = dataset.images.dtype
    d_shape = dataset.images.shape[2:]

    def pack(lst, shape):
        return np.stack(lst) if lst else np.empty((0,) + shape, dtype=dtype)

    return Episode(
        train_images=pack(train_imgs, d_shape),
        train_labels=np.asarray(train_lbls, dtype=np.int64),
        base_eval_images=pack(base_eval_imgs, d_shape),
        base_eval_labels=np.asarray(base_eval_lbls, dtype=np.int64),
        novel_eval_images=pack(novel_eval_imgs, d_shape),
        novel_eval_labels=np.asarray(novel_eval_lbls, dtype=np.int64),
        base_tokens=[dataset.tokens[c] for c in dataset.base_classes],
        novel_tokens=[dataset.tokens[c] for c in dataset.novel_classes],
        base_classes=list(dataset.base_classes),
        novel_classes=list(dataset.novel_classes),
        seed=seed,
    )


# ------------------------------------------------------------------
# losses


def _probs(image_feats: Tensor, class_feats: Tensor, temperature: float) -> Tensor:
    sims = ad.matmul(ad.l2_normalize(image_feats), ad.transpose(ad.l2_normalize(class_feats)))
    return ad.softmax(ad.scale(sims, 1.0 / temperature), axis=-1)


def ce_loss(image_feats: Tensor, class_feats: Tensor, labels, temperature: float) -> Tensor:
    """Mean -log p(label | image) over the batch."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    lbl = np.asarray(labels, dtype=np.int64)
    C = class_feats.shape[0]
    if np.any(lbl < 0) or np.any(lbl >= C):
        raise ValueError(f"label out of range for {C} classes")
    p = _probs(image_feats, class_feats, temperature)
    return ad.neg(ad.mean(ad.log(ad.pick(p, lbl))))


def _row_similarities(adapted: Tensor, frozen: np.ndarray) -> Tensor:
    frozen_unit = frozen / np.linalg.norm(frozen, axis=-1, keepdims=True)
    return ad.reduce_sum(ad.mul(ad.l2_normalize(adapted), Tensor(frozen_unit)), axis=-1)


def reg_losses(
    adapted_img: Tensor,
    frozen_img: np.ndarray,
    adapted_txt: Tensor,
    frozen_txt: np.ndarray,
) -> tuple[Tensor, Tensor]:
    """Feature-anchoring penalties: 1 - mean cosine(adapted, frozen) per modality."""
    if adapted_img.shape != frozen_img.shape or adapted_txt.shape != frozen_txt.shape:
        raise ValueError("adapted/frozen feature shapes must match pairwise")
    one = Tensor(np.asarray(1.0, dtype=adapted_img.data.dtype))
    reg_v = ad.sub(one, ad.mean(_row_similarities(adapted_img, frozen_img)))
    reg_t = ad.sub(one, ad.mean(_row_similarities(adapted_txt, frozen_txt)))
    return reg_v, reg_t


def total_loss(ce: Tensor, reg_v: Tensor, reg_t: Tensor, lam: float) -> Tensor:
    """L = L_ce + lambda * (L_reg_v + L_reg_t)."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return ad.add(ce, ad.scale(ad.add(reg_v, reg_t), lam))


# ------------------------------------------------------------------
# AdamW


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def adamw_init(params: Mapping[str, np.ndarray]) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One decoupled-weight-decay Adam update; pure function of its inputs."""
    b1, b2 = betas
    t = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"NaN/Inf gradient for {name!r}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p_out = p * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_params[name] = p_out.astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return new_params, AdamState(step=t, m=new_m, v=new_v)


# ------------------------------------------------------------------
# the adaptation loop


@dataclass
class MetricRow:
    step: int
    l_ce: float
    l_reg_v: float
    l_reg_t: float
    l_total: float
    acc: float

    def csv(self) -> str:
        return (
            f"{self.step},{self.l_ce:.10g},{self.l_reg_v:.10g},"
            f"{self.l_reg_t:.10g},{self.l_total:.10g},{self.acc:.6g}"
        )


@dataclass
class TrainedState:
    sites: dict[SiteKey, CoupledAgentSite]
    opt_state: AdamState
    metrics: list[MetricRow]
    final_train_accuracy: float
    feature_drift: tuple[float, float]  # (image, text): 1 - mean cosine to frozen
    steps_run: int


def _feats_text(model: DualEncoder, tokens: Sequence[Sequence[int]], hooks=None, scalings=None) -> Tensor:
    rows = [text_forward(t, model.cfg, model.text, hooks, scalings) for t in tokens]
    return ad.stack_rows(rows)


def _feats_image(model: DualEncoder, images: np.ndarray, hooks=None, scalings=None) -> Tensor:
    rows = [image_forward(img, model.cfg, model.image, hooks, scalings) for img in images]
    return ad.stack_rows(rows)


def _accuracy(image_feats: np.ndarray, class_feats: np.ndarray, labels: np.ndarray) -> float:
    a = image_feats / np.linalg.norm(image_feats, axis=-1, keepdims=True)
    b = class_feats / np.linalg.norm(class_feats, axis=-1, keepdims=True)
    pred = (a @ b.T).argmax(axis=1)
    return float((pred == labels).mean())


def evaluate(
    model: DualEncoder,
    sites: Mapping[SiteKey, CoupledAgentSite] | None,
    images: np.ndarray,
    labels: np.ndarray,
    tokens: Sequence[Sequence[int]],
) -> float:
    """Classification accuracy with (optionally) hooked forward passes."""
    hooks = hook_set(sites) if sites else None
    scalings = build_scaling_map(sites) if sites else None
    txt = _feats_text(model, tokens, hooks, scalings).data
    img = _feats_image(model, images, hooks, scalings).data
    return _accuracy(img, txt, labels)


def _mean_drift(adapted: np.ndarray, frozen: np.ndarray) -> float:
    a = adapted / np.linalg.norm(adapted, axis=-1, keepdims=True)
    f = frozen / np.linalg.norm(frozen, axis=-1, keepdims=True)
    return float(1.0 - (a * f).sum(axis=-1).mean())


def train(
    model: DualEncoder,
    sites: dict[SiteKey, CoupledAgentSite],
    cfg: TrainingConfig,
    episode: Episode,
    seed: int = 0,
) -> TrainedState:
    """Adapt the agent parameters on one episode; frozen weights stay untouched."""
    hooks = hook_set(sites)
    n_train = episode.train_images.shape[0]
    if n_train == 0:
        raise ValueError("episode has no training samples")

    params: dict[str, np.ndarray] = {}
    for key, site in sites.items():
        for local, arr in site.params():
            params[f"{key}/{local}"] = arr
    opt = adamw_init(params)

    # frozen features never change during the episode; compute them once
    frozen_txt = _feats_text(model, episode.base_tokens).data
    frozen_img_all = _feats_image(model, episode.train_images).data

    batch_rng = rngmod.derive(seed, "batches")
    order = np.arange(n_train)
    cursor = n_train  # force a reshuffle on first use

    metrics: list[MetricRow] = []
    for step in range(cfg.steps):
        if cfg.batch_size >= n_train:
            batch_idx = np.arange(n_train)
        else:
            if cursor + cfg.batch_size > n_train:
                order = batch_rng.permutation(n_train)
                cursor = 0
            batch_idx = order[cursor : cursor + cfg.batch_size]
            cursor += cfg.batch_size

        lr = cfg.lr
        if cfg.cosine_lr and cfg.steps > 1:
            lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step / (cfg.steps - 1)))

        tape = ad.Tape()
        values: dict[str, Tensor] = {name: tape.leaf(arr) for name, arr in params.items()}
        scalings = build_scaling_map(sites, values)
        try:
            adapted_txt = _feats_text(model, episode.base_tokens, hooks, scalings)
            adapted_img = _feats_image(model, episode.train_images[batch_idx], hooks, scalings)
            ce = ce_loss(adapted_img, adapted_txt, episode.train_labels[batch_idx], cfg.temperature)
            reg_v, reg_t = reg_losses(adapted_img, frozen_img_all[batch_idx], adapted_txt, frozen_txt)
            loss = total_loss(ce, reg_v, reg_t, cfg.lam)
        except NonFiniteError as e:
            raise NonFiniteError(f"non-finite loss at step {step}: {e}") from e

        acc = _accuracy(adapted_img.data, adapted_txt.data, episode.train_labels[batch_idx])
        grads_by_node = tape.backward(loss)
        grads = {name: grads_by_node[values[name].node].data for name in params}
        params, opt = adamw_step(
            params, grads, opt, lr=lr, betas=cfg.betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay
        )
        for key, site in sites.items():
            prefix = f"{key}/"
            for local, _ in list(site.params()):
                site.set_param(local, params[prefix + local])

        metrics.append(
            MetricRow(
                step=step,
                l_ce=ce.item(),
                l_reg_v=reg_v.item(),
                l_reg_t=reg_t.item(),
                l_total=loss.item(),
                acc=acc,
            )
        )

    final_scalings = build_scaling_map(sites)
    final_txt = _feats_text(model, episode.base_tokens, hooks, final_scalings).data
    final_img = _feats_image(model, episode.train_images, hooks, final_scalings).data
    final_acc = _accuracy(final_img, final_txt, episode.train_labels)
    drift = (_mean_drift(final_img, frozen_img_all), _mean_drift(final_txt, frozen_txt))
    return TrainedState(
        sites=sites,
        opt_state=opt,
        metrics=metrics,
        final_train_accuracy=final_acc,
        feature_drift=drift,
        steps_run=cfg.steps,
    )
