"""Reusable drivers for the desk-scale comparison experiments.

Each experiment builds on the same benchmark archive layout (200/40/40
events at 5:1:1) and runs small seed-replicated arms through the training
driver, returning parsed logs and skill reports rather than printing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import data, tasks
from .cli import RunConfig, run_pretrain, run_train
from .objectives import NumericError
from .skillmetrics import SkillReport

BENCH_FRACTIONS = (5 / 7, 1 / 7, 1 / 7)
BENCH_SPLIT_SEED = 0


def build_benchmark(
    path: Path,
    n_events: int = 280,
    resolution: int = 64,
    n_frames: int = 49,
    seed: int = 0,
) -> Path:
    """Synthesize and split the benchmark archive; reuses an existing one
    when the generator settings match."""
    path = Path(path)
    if (path / data.MANIFEST_NAME).is_file():
        manifest, _ = data.read_archive(path)
        gen = manifest.generator or {}
        want = {"source": "synth", "seed": seed, "n_events": n_events, "resolution": resolution}
        if all(gen.get(k) == v for k, v in want.items()) and manifest.split_labels is not None:
            return path
        raise ValueError(f"{path} holds a different archive; refusing to overwrite")
    manifest = data.synth_archive(n_events, seed=seed, out_path=path, n_frames=n_frames, resolution=resolution)
    spec = tasks.split_events(manifest.event_ids, BENCH_SPLIT_SEED, BENCH_FRACTIONS)
    manifest.split_labels = spec.labels()
    data.write_manifest(manifest, path)
    return path


def read_metrics(path: Path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        fields = dict(pair.partition("=")[::2] for pair in line.split())
        row: dict = {}
        for k, v in fields.items():
            try:
                row[k] = float(v)
            except ValueError:
                row[k] = v
        rows.append(row)
    return rows


@dataclass
class ArmRun:
    """One seed of one experimental arm, with its parsed artifacts."""

    seed: int
    out_dir: Path
    history: list[dict] = field(default_factory=list)
    skill: dict | None = None
    skill_noadapt: dict | None = None
    error: str | None = None

    @property
    def final_val_mae(self) -> float:
        rows = [r for r in self.history if "val_mae" in r]
        if not rows:
            raise ValueError(f"run {self.out_dir} has no validation rows")
        return float(rows[-1]["val_mae"])

    @property
    def best_val_mae(self) -> float:
        rows = [r for r in self.history if "val_mae" in r]
        if not rows:
            raise ValueError(f"run {self.out_dir} has no validation rows")
        return min(float(r["val_mae"]) for r in rows)

    def first_epoch_at_or_below(self, threshold: float) -> int | None:
        for r in self.history:
            if "val_mae" in r and float(r["val_mae"]) <= threshold:
                return int(r["epoch"])
        return None


def _collect(out_dir: Path, seed: int, error: str | None) -> ArmRun:
    arm = ArmRun(seed=seed, out_dir=out_dir, error=error)
    log = out_dir / "metrics.log"
    if log.is_file():
        arm.history = read_metrics(log)
    skill = out_dir / "skill_test.txt"
    if skill.is_file():
        arm.skill = SkillReport.parse_lines(skill.read_text().splitlines())
    noadapt = out_dir / "skill_test_noadapt.txt"
    if noadapt.is_file():
        arm.skill_noadapt = SkillReport.parse_lines(noadapt.read_text().splitlines())
    return arm


def run_training_arm(archive: Path, out_dir: Path, seed: int, **overrides) -> ArmRun:
    """One training run; a tripped numeric guard is recorded, not raised."""
    cfg = RunConfig(
        archive=str(archive),
        out_dir=str(out_dir),
        seed=seed,
        split_seed=overrides.pop("split_seed", BENCH_SPLIT_SEED),
        **overrides,
    )
    error = None
    try:
        run_train(cfg)
    except NumericError as e:
        error = str(e)
    return _collect(Path(out_dir), seed, error)


def run_pretrain_arm(archive: Path, out_dir: Path, seed: int, **overrides) -> Path:
    """Contrastive pretraining for one seed; returns the last checkpoint."""
    cfg = RunConfig(
        archive=str(archive),
        out_dir=str(out_dir),
        seed=seed,
        split_seed=overrides.pop("split_seed", BENCH_SPLIT_SEED),
        **overrides,
    )
    run_pretrain(cfg)
    epochs = cfg.pretrain_epochs
    return Path(out_dir) / "checkpoints" / f"epoch_{epochs:03d}"


def maml_vs_joint(
    archive: Path,
    out_root: Path,
    seeds: Sequence[int] = (0, 1, 2),
    epochs: int = 3,
    base_width: int = 16,
    inner_lr: float = 0.01,
    meta_batch: int = 2,
) -> dict[str, list[ArmRun]]:
    """Reconstruction-mode comparison under equal outer-step budgets."""
    shared = dict(
        loss="reconstruction",
        epochs=epochs,
        base_width=base_width,
        meta_batch=meta_batch,
        inner_lr=inner_lr,
    )
    out_root = Path(out_root)
    results: dict[str, list[ArmRun]] = {"maml": [], "joint": []}
    for mode in ("maml", "joint"):
        for seed in seeds:
            arm = run_training_arm(archive, out_root / mode / f"seed{seed}", seed, mode=mode, **shared)
            results[mode].append(arm)
    return results


def lambda_tradeoff(
    archive: Path,
    out_root: Path,
    seeds: Sequence[int] = (0, 1, 2),
    lambdas: Sequence[float] = (1e2, 1e4),
    epochs: int = 3,
    base_width: int = 16,
    meta_batch: int = 2,
) -> dict[float, list[ArmRun]]:
    """Joint-adversarial runs across the reconstruction weight grid."""
    out_root = Path(out_root)
    results: dict[float, list[ArmRun]] = {}
    for lam in lambdas:
        arms = []
        for seed in seeds:
            arms.append(
                run_training_arm(
                    archive,
                    out_root / f"lambda{lam:g}" / f"seed{seed}",
                    seed,
                    mode="joint",
                    loss="adversarial",
                    lambda_l1=float(lam),
                    epochs=epochs,
                    base_width=base_width,
                    meta_batch=meta_batch,
                )
            )
        results[float(lam)] = arms
    return results


def pretrain_handoff(
    archive: Path,
    out_root: Path,
    seeds: Sequence[int] = (0, 1, 2),
    aug_level: int = 3,
    pretrain_epochs: int = 5,
    finetune_epochs: int = 3,
    base_width: int = 16,
    meta_batch: int = 2,
) -> dict[str, list[ArmRun]]:
    """From-scratch vs warm-started finetuning with matched decoder seeds.

    The warm arm's decoder draws from the same derived seed as the scratch
    arm's generator, so the only difference is the pretrained encoder."""
    out_root = Path(out_root)
    shared = dict(
        mode="joint",
        loss="reconstruction",
        epochs=finetune_epochs,
        base_width=base_width,
        meta_batch=meta_batch,
    )
    results: dict[str, list[ArmRun]] = {"scratch": [], "warm": []}
    for seed in seeds:
        ckpt = run_pretrain_arm(
            archive,
            out_root / "pretrain" / f"seed{seed}",
            seed,
            aug_level=aug_level,
            pretrain_epochs=pretrain_epochs,
            pretrain_warmup=1.0,
            base_width=base_width,
        )
        results["scratch"].append(
            run_training_arm(archive, out_root / "scratch" / f"seed{seed}", seed, **shared)
        )
        results["warm"].append(
            run_training_arm(
                archive, out_root / "warm" / f"seed{seed}", seed, pretrain_ckpt=str(ckpt), **shared
            )
        )
    return results


def mean(values: Sequence[float]) -> float:
    values = list(values)
    return sum(values) / len(values)
