"""Meteorological verification on physical-unit rasters.

Forecast skill is measured on binary exceedance masks: CSI (intersection
over union), POD (recall) and SUCR (precision) at fixed reflectivity-like
thresholds, plus pooled MAE.  A zero denominator leaves the metric
undefined; that is carried as a flag, never folded into an average.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DEFAULT_THRESHOLDS = (74.0, 133.0)
METRIC_NAMES = ("CSI", "POD", "SUCR")


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel-level confusion entries for one exceedance threshold."""

    hits: int
    misses: int
    false_alarms: int
    true_negatives: int

    def __post_init__(self):
        for name in ("hits", "misses", "false_alarms", "true_negatives"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.true_negatives

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.hits + other.hits,
            self.misses + other.misses,
            self.false_alarms + other.false_alarms,
            self.true_negatives + other.true_negatives,
        )


def binarize(image: np.ndarray, threshold: float) -> np.ndarray:
    """Exceedance mask: pixel >= threshold."""
    if not 0.0 <= threshold <= 255.0:
        raise ValueError(f"threshold {threshold} outside [0, 255]")
    arr = np.asarray(image)
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    return arr >= threshold


def confusion(pred_mask: np.ndarray, true_mask: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred_mask, dtype=bool)
    true = np.asarray(true_mask, dtype=bool)
    if pred.shape != true.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    hits = int(np.count_nonzero(pred & true))
    false_alarms = int(np.count_nonzero(pred & ~true))
    misses = int(np.count_nonzero(~pred & true))
    return ConfusionCounts(hits, misses, false_alarms, pred.size - hits - false_alarms - misses)


def skill(counts: ConfusionCounts) -> dict[str, float | None]:
    """CSI, POD and SUCR; ``None`` where the denominator is zero."""
    h, m, f = counts.hits, counts.misses, counts.false_alarms

    def ratio(num: int, den: int) -> float | None:
        return num / den if den else None

    return {"CSI": ratio(h, h + m + f), "POD": ratio(h, h + m), "SUCR": ratio(h, h + f)}


@dataclass
class SkillReport:
    """Per-threshold skill plus pooled MAE over one prediction set.

    ``metrics[threshold][name]`` is None when undefined in pooled mode or
    when no frame defined it in per-frame-mean mode; ``defined_frames``
    records how many frames contributed to each mean."""

    thresholds: tuple[float, ...]
    aggregation: str
    metrics: dict[float, dict[str, float | None]]
    counts: dict[float, ConfusionCounts]
    mae: float
    n_frames: int
    defined_frames: dict[float, dict[str, int]] = field(default_factory=dict)

    def to_lines(self) -> list[str]:
        lines = [
            f"aggregation={self.aggregation}",
            f"n_frames={self.n_frames}",
            f"MAE={self.mae:.6f}",
        ]
        for thr in self.thresholds:
            tag = f"{thr:g}"
            for name in METRIC_NAMES:
                value = self.metrics[thr][name]
                lines.append(f"{name}{tag}=" + ("undefined" if value is None else f"{value:.4f}"))
        return lines

    def write(self, path: Path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n")

    @staticmethod
    def parse_lines(lines: Sequence[str]) -> dict[str, float | None | str]:
        out: dict[str, float | None | str] = {}
        for line in lines:
            line = line.strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            if raw == "undefined":
                out[key] = None
            else:
                try:
                    out[key] = float(raw)
                except ValueError:
                    out[key] = raw
        return out


def evaluate_archive(
    predictions: np.ndarray | Sequence[np.ndarray],
    targets: np.ndarray | Sequence[np.ndarray],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    aggregation: str = "pooled",
) -> SkillReport:
    """Skill over a stack of frames in physical units.

    Pooled mode accumulates one global confusion table per threshold and
    applies the skill ratios once.  Per-frame-mean scores each frame
    separately and averages only the frames where the metric is defined.
    MAE is always pooled.
    """
    if aggregation not in ("pooled", "per-frame-mean"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    preds = [np.asarray(p, dtype=np.float64) for p in predictions]
    trues = [np.asarray(t, dtype=np.float64) for t in targets]
    if len(preds) != len(trues):
        raise ValueError(f"{len(preds)} predictions vs {len(trues)} targets")
    if not preds:
        raise ValueError("no frames to evaluate")
    for i, (p, t) in enumerate(zip(preds, trues)):
        if p.shape != t.shape:
            raise ValueError(f"frame {i}: prediction shape {p.shape} vs target shape {t.shape}")

    abs_err_sum = 0.0
    n_pixels = 0
    per_frame: dict[float, list[dict[str, float | None]]] = {float(t): [] for t in thresholds}
    total_counts: dict[float, ConfusionCounts] = {float(t): ConfusionCounts(0, 0, 0, 0) for t in thresholds}
    for p, t in zip(preds, trues):
        abs_err_sum += float(np.abs(p - t).sum())
        n_pixels += p.size
        for thr in total_counts:
            c = confusion(binarize(p, thr), binarize(t, thr))
            total_counts[thr] = total_counts[thr] + c
            per_frame[thr].append(skill(c))

    metrics: dict[float, dict[str, float | None]] = {}
    defined_frames: dict[float, dict[str, int]] = {}
    for thr in total_counts:
        if aggregation == "pooled":
            metrics[thr] = skill(total_counts[thr])
            defined_frames[thr] = {
                name: (len(preds) if metrics[thr][name] is not None else 0) for name in METRIC_NAMES
            }
        else:
            metrics[thr] = {}
            defined_frames[thr] = {}
            for name in METRIC_NAMES:
                values = [frame[name] for frame in per_frame[thr] if frame[name] is not None]
                metrics[thr][name] = float(np.mean(values)) if values else None
                defined_frames[thr][name] = len(values)

    return SkillReport(
        thresholds=tuple(float(t) for t in thresholds),
        aggregation=aggregation,
        metrics=metrics,
        counts=total_counts,
        mae=abs_err_sum / n_pixels,
        n_frames=len(preds),
        defined_frames=defined_frames,
    )
