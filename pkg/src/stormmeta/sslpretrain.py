"""Contrastive encoder pretraining with a momentum key branch.

Temporal structure supplies the positives: even frames anchor queries, the
following odd frame of the same event supplies the key view.  The query path
runs encoder, projector and predictor; both key views run through the
momentum branch (encoder and projector only) under stop-gradient.
"""

from __future__ import annotations

import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import torch
import torch.nn.functional as tf

from . import nets
from .data import EventTensor, ModalitySchema
from .nets import CheckpointError, HeadSpec, ParamSet, UNetSpec, read_tensor_dir, spec_from_dict, spec_to_dict, subset, write_tensor_dir
from .objectives import NumericError, info_nce
from .tasks import NormStats, resize_half, zscore
from .trainloops import SEED_PRETRAIN, SgdState, derive_seed, sgd_momentum_step

TRANSFORM_ORDER = ("crop", "hflip", "noise", "blur", "vflip", "rotate")
QUERY_PAIRS_PER_EVENT = 24


@dataclass(frozen=True)
class AugmentationSpec:
    """Ordered transform ladder; ``level`` k enables the first k transforms."""

    level: int = 6
    crop_scale: tuple[float, float] = (0.8, 1.0)
    hflip_p: float = 0.5
    noise_sigma: float = 0.1
    noise_p: float = 0.5
    blur_kernel: int = 19
    vflip_p: float = 0.2
    rotate_max: float = math.pi / 6

    def __post_init__(self):
        if not 0 <= self.level <= len(TRANSFORM_ORDER):
            raise ValueError(f"level must lie in [0, {len(TRANSFORM_ORDER)}]")
        if not 0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0:
            raise ValueError("crop_scale must satisfy 0 < lo <= hi <= 1")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be odd and >= 1")

    @property
    def active(self) -> tuple[str, ...]:
        return TRANSFORM_ORDER[: self.level]


def _random_resized_crop(frame: torch.Tensor, scale: tuple[float, float], rng: torch.Generator) -> torch.Tensor:
    c, h, w = frame.shape
    area = float(h * w)
    log_ratio = (math.log(3.0 / 4.0), math.log(4.0 / 3.0))
    for _ in range(10):
        target = area * (scale[0] + (scale[1] - scale[0]) * torch.rand(1, generator=rng).item())
        ratio = math.exp(log_ratio[0] + (log_ratio[1] - log_ratio[0]) * torch.rand(1, generator=rng).item())
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(torch.randint(0, h - ch + 1, (1,), generator=rng).item())
            left = int(torch.randint(0, w - cw + 1, (1,), generator=rng).item())
            patch = frame[:, top : top + ch, left : left + cw]
            return tf.interpolate(patch.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False).squeeze(0)
    return frame.clone()


def _gaussian_blur(frame: torch.Tensor, kernel: int, rng: torch.Generator) -> torch.Tensor:
    c, h, w = frame.shape
    if kernel > min(h, w):
        raise ValueError(f"blur kernel {kernel} exceeds frame size {h}x{w}")
    sigma = 0.1 + (2.0 - 0.1) * torch.rand(1, generator=rng).item()
    half = kernel // 2
    xs = torch.arange(kernel, dtype=frame.dtype) - half
    k1d = torch.exp(-0.5 * (xs / sigma) ** 2)
    k1d = k1d / k1d.sum()
    pad = (half, half, half, half)
    x = tf.pad(frame.unsqueeze(0), pad, mode="reflect")
    x = tf.conv2d(x, k1d.view(1, 1, 1, -1).expand(c, 1, 1, kernel), groups=c)
    x = tf.conv2d(x, k1d.view(1, 1, -1, 1).expand(c, 1, kernel, 1), groups=c)
    return x.squeeze(0)


def _rotate(frame: torch.Tensor, max_angle: float, rng: torch.Generator) -> torch.Tensor:
    angle = -max_angle + 2.0 * max_angle * torch.rand(1, generator=rng).item()
    cos, sin = math.cos(angle), math.sin(angle)
    theta = torch.tensor([[cos, -sin, 0.0], [sin, cos, 0.0]], dtype=frame.dtype).unsqueeze(0)
    grid = tf.affine_grid(theta, (1, *frame.shape), align_corners=False)
    return tf.grid_sample(
        frame.unsqueeze(0), grid, mode="bilinear", padding_mode="reflection", align_corners=False
    ).squeeze(0)


def apply_augmentations(frame: torch.Tensor, spec: AugmentationSpec, rng: torch.Generator) -> torch.Tensor:
    """One stochastic view of a (C, H, W) frame, deterministic given ``rng``."""
    if frame.ndim != 3:
        raise ValueError(f"expected (C, H, W), got {tuple(frame.shape)}")
    out = frame
    for name in spec.active:
        if name == "crop":
            out = _random_resized_crop(out, spec.crop_scale, rng)
        elif name == "hflip":
            if torch.rand(1, generator=rng).item() < spec.hflip_p:
                out = out.flip(-1)
        elif name == "noise":
            if torch.rand(1, generator=rng).item() < spec.noise_p:
                out = out + spec.noise_sigma * torch.randn(out.shape, generator=rng, dtype=out.dtype)
        elif name == "blur":
            out = _gaussian_blur(out, spec.blur_kernel, rng)
        elif name == "vflip":
            if torch.rand(1, generator=rng).item() < spec.vflip_p:
                out = out.flip(-2)
        elif name == "rotate":
            out = _rotate(out, spec.rotate_max, rng)
    return out if out is not frame else frame.clone()


def prepare_event_frames(
    event: EventTensor,
    stats: NormStats,
    schema: ModalitySchema = ModalitySchema(),
) -> torch.Tensor:
    """Normalized half-resolution source-channel frames, (F, C_in, H/2, W/2);
    the contrastive encoder sees exactly what the finetuned encoder will."""
    event.validate(schema)
    frames = torch.from_numpy(event.data)
    frames = zscore(frames, stats)
    return resize_half(frames[:, list(schema.input_indices)])


def make_contrastive_batch(
    events: Sequence[EventTensor],
    spec: AugmentationSpec,
    rng: torch.Generator,
    stats: NormStats,
    schema: ModalitySchema = ModalitySchema(),
    max_pairs: int = QUERY_PAIRS_PER_EVENT,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stacked (query, positive, key) views over a group of events.

    Even frames anchor queries and are augmented twice (query view and
    positive view); each anchor's following odd frame is augmented once into
    the key pool.  At 49 frames that yields 24 pairs, the last frame unused;
    shorter events truncate and events below 2 frames are skipped.
    """
    q_views, pos_views, key_views = [], [], []
    for event in events:
        if event.n_frames < 2:
            warnings.warn(f"event {event.event_id!r} has {event.n_frames} frames; skipped")
            continue
        frames = prepare_event_frames(event, stats, schema)
        n_pairs = min(frames.shape[0] // 2, max_pairs)
        for i in range(n_pairs):
            even, odd = frames[2 * i], frames[2 * i + 1]
            q_views.append(apply_augmentations(even, spec, rng))
            pos_views.append(apply_augmentations(even, spec, rng))
            key_views.append(apply_augmentations(odd, spec, rng))
    if not q_views:
        raise ValueError("no usable events in contrastive batch")
    return torch.stack(q_views), torch.stack(pos_views), torch.stack(key_views)


def momentum_update(
    theta_k: Mapping[str, torch.Tensor],
    theta_q: Mapping[str, torch.Tensor],
    m: float,
) -> "OrderedDict[str, torch.Tensor]":
    """Elementwise m * theta_k + (1 - m) * theta_q over theta_k's entries."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, k in theta_k.items():
        if name not in theta_q:
            raise ValueError(f"query parameters lack {name!r}")
        q = theta_q[name]
        if q.shape != k.shape:
            raise ValueError(f"shape mismatch for {name!r}: {tuple(k.shape)} vs {tuple(q.shape)}")
        with torch.no_grad():
            out[name] = m * k + (1.0 - m) * q
    return out


def cosine_warmup_lr(t: float, total: float = 100.0, warmup: float = 5.0, base: float = 0.015) -> float:
    """Linear warmup to ``base`` over ``warmup`` epochs, then cosine to zero."""
    if t < 0 or t > total:
        raise ValueError(f"schedule position {t} outside [0, {total}]")
    if not 0 <= warmup < total:
        raise ValueError("warmup must lie in [0, total)")
    if t < warmup:
        return base * t / warmup
    return base * 0.5 * (1.0 + math.cos(math.pi * (t - warmup) / (total - warmup)))


@dataclass
class MoCoState:
    """Query weights (encoder+projector+predictor), momentum key weights
    (encoder+projector), and schedule position."""

    unet_spec: UNetSpec
    head_spec: HeadSpec
    q: "OrderedDict[str, torch.Tensor]"
    k: "OrderedDict[str, torch.Tensor]"
    m: float = 0.999
    tau: float = 0.1
    epoch: int = 0
    seed: int = 0


def init_moco_state(
    unet_spec: UNetSpec = UNetSpec(),
    head_spec: HeadSpec | None = None,
    seed: int = 0,
    m: float = 0.999,
    tau: float = 0.1,
) -> MoCoState:
    """Key branch starts as a copy of the query branch."""
    if head_spec is None:
        head_spec = HeadSpec(embed_dim=unet_spec.embed_dim)
    if head_spec.embed_dim != unet_spec.embed_dim:
        raise ValueError("projector input dimension must equal the encoder embedding dimension")
    enc = nets.init_params(unet_spec, derive_seed(seed, SEED_PRETRAIN, 0))
    heads = nets.init_params(head_spec, derive_seed(seed, SEED_PRETRAIN, 1))
    q: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, t in enc.tensors.items():
        if name.startswith("enc"):
            q[f"encoder.{name}"] = t.clone().requires_grad_(True)
    for name, t in heads.tensors.items():
        q[name] = t.clone().requires_grad_(True)
    k = OrderedDict((name, t.detach().clone()) for name, t in q.items() if not name.startswith("predictor."))
    return MoCoState(unet_spec=unet_spec, head_spec=head_spec, q=q, k=k, m=m, tau=tau, seed=seed)


def query_representations(state: MoCoState, views: torch.Tensor) -> torch.Tensor:
    emb = nets.encoder_forward(subset(state.q, "encoder"), views)
    return nets.projector_forward(subset(state.q, "projector"), emb)


def key_representations(state: MoCoState, views: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        emb = nets.encoder_forward(subset(state.k, "encoder"), views)
        return nets.projector_forward(subset(state.k, "projector"), emb)


def contrastive_batch_loss(
    state: MoCoState,
    events: Sequence[EventTensor],
    spec: AugmentationSpec,
    rng: torch.Generator,
    stats: NormStats,
    schema: ModalitySchema = ModalitySchema(),
) -> torch.Tensor:
    """InfoNCE over one event group; negatives are every key view in the
    batch except the query's own paired one."""
    q_views, pos_views, key_views = make_contrastive_batch(events, spec, rng, stats, schema)
    q_proj = query_representations(state, q_views)
    k_plus = key_representations(state, pos_views)
    k_pool = key_representations(state, key_views)
    b = k_pool.shape[0]
    if b < 2:
        raise ValueError("contrastive batch needs at least 2 pairs for negatives")
    neg_idx = torch.stack([torch.cat([torch.arange(0, i), torch.arange(i + 1, b)]) for i in range(b)])
    negs = k_pool[neg_idx]
    return info_nce(q_proj, k_plus, negs, predictor_params=subset(state.q, "predictor"), tau=state.tau)


@dataclass(frozen=True)
class PretrainConfig:
    base_lr: float = 0.015
    total_epochs: int = 100
    warmup_epochs: float = 5.0
    batch_events: int = 3
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    m: float = 0.999
    tau: float = 0.1
    level: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.base_lr < 0 or self.total_epochs < 1 or self.batch_events < 1:
            raise ValueError("base_lr must be >= 0; total_epochs and batch_events must be positive")
        if not 0 <= self.m <= 1:
            raise ValueError("momentum m must lie in [0, 1]")


def pretrain_epoch(
    state: MoCoState,
    events: Sequence[EventTensor],
    spec: AugmentationSpec,
    opt: SgdState,
    config: PretrainConfig,
    stats: NormStats,
    schema: ModalitySchema = ModalitySchema(),
) -> float:
    """One pass over the events in derived-seed order: event groups of
    ``batch_events`` (trailing partial group dropped), one SGD step and one
    momentum update per group.  Returns the mean batch loss."""
    if not events:
        raise ValueError("no pretraining events")
    lr = cosine_warmup_lr(state.epoch, config.total_epochs, config.warmup_epochs, config.base_lr)
    order = torch.randperm(
        len(events), generator=torch.Generator().manual_seed(derive_seed(config.seed, SEED_PRETRAIN, 2 + state.epoch))
    ).tolist()
    shuffled = [events[i] for i in order]
    losses = []
    n_batches = len(shuffled) // config.batch_events
    if n_batches == 0:
        raise ValueError(f"{len(events)} events cannot fill a {config.batch_events}-event batch")
    for b in range(n_batches):
        group = shuffled[b * config.batch_events : (b + 1) * config.batch_events]
        rng = torch.Generator().manual_seed(derive_seed(config.seed, SEED_PRETRAIN, 1000 + state.epoch, b))
        try:
            loss = contrastive_batch_loss(state, group, spec, rng, stats, schema)
            if not torch.isfinite(loss):
                raise NumericError("non-finite contrastive loss")
            grads = torch.autograd.grad(loss, list(state.q.values()))
            for (name, _), g in zip(state.q.items(), grads):
                if not torch.isfinite(g).all():
                    raise NumericError(f"non-finite gradient for {name!r}")
        except NumericError as e:
            raise NumericError(f"pretrain batch {b}: {e}") from e
        sgd_momentum_step(
            state.q,
            OrderedDict(zip(state.q.keys(), grads)),
            opt,
            lr=lr,
            momentum=config.sgd_momentum,
            weight_decay=config.weight_decay,
        )
        state.k = momentum_update(state.k, state.q, config.m)
        losses.append(float(loss.detach()))
    state.epoch += 1
    return float(sum(losses) / len(losses))


def export_encoder(state: MoCoState, decoder_seed: int) -> ParamSet:
    """Generator init whose encoder stages carry the pretrained query weights;
    decoder stages are freshly seeded, heads are dropped."""
    fresh = nets.init_params(state.unet_spec, decoder_seed)
    enc = subset(state.q, "encoder")
    for name, t in enc.items():
        if name not in fresh.tensors:
            raise CheckpointError(f"pretrained tensor {name!r} has no slot in the generator")
        if fresh.tensors[name].shape != t.shape:
            raise CheckpointError(
                f"pretrained tensor {name!r} has shape {tuple(t.shape)}, generator expects"
                f" {tuple(fresh.tensors[name].shape)}"
            )
        fresh.tensors[name] = t.detach().clone()
    return fresh


def save_moco_state(state: MoCoState, opt: SgdState, path: Path) -> None:
    tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, t in state.q.items():
        tensors[f"q.{name}"] = t
    for name, t in state.k.items():
        tensors[f"k.{name}"] = t
    for name, t in opt.buf.items():
        tensors[f"opt.{name}"] = t
    meta = {
        "kind": "mocostate",
        "unet_arch": spec_to_dict(state.unet_spec),
        "head_arch": spec_to_dict(state.head_spec),
        "m": state.m,
        "tau": state.tau,
        "epoch": state.epoch,
        "seed": state.seed,
        "subsets": {"query": ["encoder", "projector", "predictor"], "key": ["encoder", "projector"]},
    }
    write_tensor_dir(path, tensors, meta)


def load_moco_state(path: Path) -> tuple[MoCoState, SgdState]:
    tensors, doc = read_tensor_dir(path)
    if doc.get("kind") != "mocostate":
        raise CheckpointError(f"checkpoint kind {doc.get('kind')!r}, expected 'mocostate'")
    unet_spec = spec_from_dict(doc["unet_arch"])
    head_spec = spec_from_dict(doc["head_arch"])
    q = subset(tensors, "q")
    for t in q.values():
        t.requires_grad_(True)
    state = MoCoState(
        unet_spec=unet_spec,
        head_spec=head_spec,
        q=q,
        k=subset(tensors, "k"),
        m=float(doc["m"]),
        tau=float(doc["tau"]),
        epoch=int(doc["epoch"]),
        seed=int(doc["seed"]),
    )
    opt = SgdState(state.q)
    opt.buf = subset(tensors, "opt")
    if list(opt.buf) != list(state.q):
        raise CheckpointError("optimizer buffers do not match query parameters")
    return state, opt
