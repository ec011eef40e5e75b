"""Episode construction: split bookkeeping, normalization and few-shot task assembly."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as tf

from .data import EventTensor, ModalitySchema

SPLIT_PARTS = ("train", "val", "test")
STD_EPS = 1e-6


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic event split; members are ordered lists per part."""

    seed: int
    fractions: tuple[float, float, float]
    members: Mapping[str, tuple[str, ...]]

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(len(self.members[p]) for p in SPLIT_PARTS)

    def labels(self) -> dict[str, str]:
        return {eid: part for part in SPLIT_PARTS for eid in self.members[part]}


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    quotas = [n * f for f in fractions]
    counts = [math.floor(q) for q in quotas]
    short = n - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def split_events(
    event_ids: Sequence[str],
    seed: int,
    fractions: tuple[float, float, float] = (0.7988, 0.1012, 0.1000),
) -> SplitSpec:
    """Shuffle ids with a seeded permutation and cut train/val/test blocks.

    Part sizes come from largest-remainder rounding of ``n * fraction`` so the
    parts always sum to ``n`` exactly.
    """
    if len(fractions) != len(SPLIT_PARTS):
        raise ValueError("need one fraction per split part")
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative")
    if abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    ids = list(event_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("event ids must be unique")
    nonzero = sum(1 for f in fractions if f > 0)
    if len(ids) < nonzero:
        raise ValueError(f"{len(ids)} events cannot cover {nonzero} non-empty split parts")

    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    counts = _largest_remainder(len(ids), fractions)
    members, at = {}, 0
    for part, c in zip(SPLIT_PARTS, counts):
        members[part] = tuple(shuffled[at : at + c])
        at += c
    return SplitSpec(seed=seed, fractions=tuple(fractions), members=members)


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and standard deviation, std floored at ``STD_EPS``."""

    mean: np.ndarray
    std: np.ndarray

    @property
    def n_channels(self) -> int:
        return len(self.mean)

    def select(self, indices: Sequence[int]) -> "NormStats":
        idx = list(indices)
        return NormStats(mean=self.mean[idx], std=self.std[idx])

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormStats":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64), std=np.asarray(d["std"], dtype=np.float64))


def compute_norm_stats(events: Iterable[EventTensor]) -> NormStats:
    """Stream per-channel moments over events; population std with a floor guard."""
    count = 0
    total = None
    total_sq = None
    for ev in events:
        x = ev.data.astype(np.float64)
        if total is None:
            total = np.zeros(x.shape[1])
            total_sq = np.zeros(x.shape[1])
        elif x.shape[1] != len(total):
            raise ValueError("events disagree on channel count")
        count += x.shape[0] * x.shape[2] * x.shape[3]
        total += x.sum(axis=(0, 2, 3))
        total_sq += (x**2).sum(axis=(0, 2, 3))
    if count == 0:
        raise ValueError("no events given")
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    std = np.sqrt(var)
    low = std < STD_EPS
    if low.any():
        warnings.warn(f"near-constant channels {np.flatnonzero(low).tolist()}; flooring std at {STD_EPS}")
        std = np.maximum(std, STD_EPS)
    return NormStats(mean=mean, std=std)


def _stats_view(stats: NormStats, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if x.ndim < 3 or x.shape[-3] != stats.n_channels:
        raise ValueError(f"expected (..., {stats.n_channels}, H, W), got {tuple(x.shape)}")
    shape = (stats.n_channels, 1, 1)
    mean = torch.as_tensor(stats.mean, dtype=x.dtype).reshape(shape)
    std = torch.as_tensor(stats.std, dtype=x.dtype).reshape(shape)
    return mean, std


def zscore(x: torch.Tensor, stats: NormStats) -> torch.Tensor:
    mean, std = _stats_view(stats, x)
    return (x - mean) / std


def dezscore(x: torch.Tensor, stats: NormStats) -> torch.Tensor:
    mean, std = _stats_view(stats, x)
    return x * std + mean


def resize_half(x: torch.Tensor) -> torch.Tensor:
    """Bilinear downsample by exactly two; equals 2x2 block averaging."""
    if x.ndim < 3:
        raise ValueError("expected (..., C, H, W)")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"height and width must be even, got {h}x{w}")
    lead = x.shape[:-3]
    flat = x.reshape(-1, *x.shape[-3:])
    out = tf.interpolate(flat, scale_factor=0.5, mode="bilinear", align_corners=False)
    return out.reshape(*lead, x.shape[-3], h // 2, w // 2)


@dataclass
class FewShotTask:
    """Support/query pairs for one event, normalized and resolution-split."""

    event_id: str
    support_src: torch.Tensor
    support_tgt: torch.Tensor
    query_src: torch.Tensor
    query_tgt: torch.Tensor

    @property
    def n_support(self) -> int:
        return self.support_src.shape[0]

    @property
    def n_query(self) -> int:
        return self.query_src.shape[0]


def build_task(
    event: EventTensor,
    n_support: int = 10,
    n_query: int = 10,
    schema: ModalitySchema = ModalitySchema(),
    stats: NormStats | None = None,
) -> FewShotTask:
    """Slice the leading frames of an event into a few-shot translation task.

    Support pairs come from frames ``[0, n_support)``, query pairs from the
    following ``n_query`` frames.  Channels are z-scored with train-split
    statistics before sources are downsampled to half resolution.
    """
    if n_support < 1 or n_query < 1:
        raise ValueError("n_support and n_query must be >= 1")
    if stats is None:
        raise ValueError("normalization stats are required")
    event.validate(schema)
    need = n_support + n_query
    if event.n_frames < need:
        raise ValueError(f"event {event.event_id!r} has {event.n_frames} frames, task needs {need}")

    frames = torch.from_numpy(np.ascontiguousarray(event.data[:need]))
    frames = zscore(frames, stats)
    src = resize_half(frames[:, list(schema.input_indices)])
    tgt = frames[:, [schema.target_index]]
    return FewShotTask(
        event_id=event.event_id,
        support_src=src[:n_support],
        support_tgt=tgt[:n_support],
        query_src=src[n_support:],
        query_tgt=tgt[n_support:],
    )


def collapse_joint(tasks: Sequence[FewShotTask]) -> tuple[torch.Tensor, torch.Tensor]:
    """Pool support and query pairs of every task into flat source/target stacks."""
    if not tasks:
        raise ValueError("no tasks to collapse")
    src = torch.cat([t for task in tasks for t in (task.support_src, task.query_src)])
    tgt = torch.cat([t for task in tasks for t in (task.support_tgt, task.query_tgt)])
    return src, tgt
