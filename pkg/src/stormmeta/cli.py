"""Experiment driver tying the modules together.

Subcommands: ``synth`` (write a synthetic archive), ``split`` (label
train/val/test), ``pretrain`` (contrastive encoder), ``train`` (joint or
episodic translator training), ``evaluate`` (skill report from a
checkpoint), ``plot`` (static curves and bars from run logs).

Exit codes: 0 success, 1 runtime failure (numeric blow-up, corrupt
payload), 2 argument or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import data, nets, skillmetrics, sslpretrain, tasks, trainloops
from .data import ArchiveError, ArchiveIntegrityError, SchemaError
from .nets import CheckpointError
from .objectives import NumericError

ENV_SEED = "STORMMETA_SEED"
SPLIT_FRACTIONS = (0.7988, 0.1012, 0.1000)


class ConfigError(ValueError):
    """Rejected before any work starts; maps to exit code 2."""


MODES = ("joint", "maml")
LOSSES = ("reconstruction", "adversarial")


@dataclass
class RunConfig:
    """Declarative description of one training or pretraining run."""

    archive: str
    out_dir: str
    mode: str = "maml"
    loss: str = "adversarial"
    lambda_l1: float = 100.0
    inner_lr: float = 1e-4
    inner_steps: int = 1
    meta_batch: int = 3
    outer_lr: float = 2e-4
    epochs: int = 3
    n_support: int = 10
    n_query: int = 10
    base_width: int = 32
    disc_base_width: int = 32
    split_seed: int | None = None
    split_fractions: tuple[float, float, float] = SPLIT_FRACTIONS
    aug_level: int = 6
    pretrain_ckpt: str | None = None
    pretrain_epochs: int = 100
    pretrain_base_lr: float = 0.015
    pretrain_warmup: float = 5.0
    pretrain_batch_events: int = 3
    moco_momentum: float = 0.999
    tau: float = 0.1
    thresholds: tuple[float, ...] = skillmetrics.DEFAULT_THRESHOLDS
    aggregation: str = "pooled"
    seed: int | None = None

    def __post_init__(self):
        self.split_fractions = tuple(self.split_fractions)
        self.thresholds = tuple(self.thresholds)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.mode == "maml" and self.inner_lr <= 0:
            raise ConfigError("maml mode needs a positive inner learning rate")
        if self.lambda_l1 < 0:
            raise ConfigError("lambda_l1 must be nonnegative")
        if self.epochs < 1 or self.pretrain_epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.pretrain_warmup < self.pretrain_epochs:
            raise ConfigError(
                f"pretrain_warmup {self.pretrain_warmup} must lie in [0, pretrain_epochs="
                f"{self.pretrain_epochs}); pass --warmup for short runs"
            )
        if self.n_support < 1 or self.n_query < 1:
            raise ConfigError("n_support and n_query must be >= 1")
        if self.meta_batch < 1 or self.inner_steps < 1:
            raise ConfigError("meta_batch and inner_steps must be >= 1")
        if self.outer_lr <= 0 or self.pretrain_base_lr < 0:
            raise ConfigError("learning rates must be positive (pretrain base lr may be 0)")
        if self.base_width < 1 or self.disc_base_width < 1:
            raise ConfigError("network widths must be >= 1")
        if len(self.split_fractions) != 3 or any(f < 0 for f in self.split_fractions):
            raise ConfigError("split_fractions must be three nonnegative numbers")
        if abs(sum(self.split_fractions) - 1.0) > 1e-6:
            raise ConfigError("split_fractions must sum to 1")
        if not 0 <= self.aug_level <= 6:
            raise ConfigError("aug_level must lie in [0, 6]")
        if not 0 <= self.moco_momentum <= 1:
            raise ConfigError("moco_momentum must lie in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.aggregation not in ("pooled", "per-frame-mean"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        for t in self.thresholds:
            if not 0 <= t <= 255:
                raise ConfigError(f"threshold {t} outside [0, 255]")

    @property
    def resolved_seed(self) -> int:
        if self.seed is not None:
            return int(self.seed)
        return int(os.environ.get(ENV_SEED, "0"))

    def pinned(self) -> "RunConfig":
        """Copy with environment-dependent seeds made explicit, so the
        serialized config replays identically regardless of the environment."""
        split = self.split_seed if self.split_seed is not None else self.resolved_seed
        return dataclasses.replace(self, seed=self.resolved_seed, split_seed=split)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        d["thresholds"] = list(self.thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        missing = {"archive", "out_dir"} - set(d)
        if missing:
            raise ConfigError(f"config lacks required keys: {sorted(missing)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    """Config file merged with command-line overrides (overrides win)."""
    merged: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            merged.update(json.loads(p.read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(merged)


# ----------------------------------------------------------------- run pieces


def _ensure_split(manifest: data.ArchiveManifest, cfg: RunConfig) -> None:
    """Label events in place (and persist) when the archive has no split yet."""
    if manifest.split_labels is not None:
        return
    seed = cfg.split_seed if cfg.split_seed is not None else cfg.resolved_seed
    spec = tasks.split_events(manifest.event_ids, seed, cfg.split_fractions)
    manifest.split_labels = spec.labels()
    data.write_manifest(manifest, manifest.root)


def _train_stats(store: data.EventStore, manifest: data.ArchiveManifest) -> tasks.NormStats:
    return tasks.compute_norm_stats(store.load(eid) for eid in manifest.split_ids("train"))


def _build_tasks(store, ids, cfg, schema, stats):
    return [tasks.build_task(store.load(eid), cfg.n_support, cfg.n_query, schema, stats) for eid in ids]


def _meta_config(cfg: RunConfig) -> trainloops.MetaConfig:
    return trainloops.MetaConfig(
        inner_lr=cfg.inner_lr,
        inner_steps=cfg.inner_steps,
        meta_batch=cfg.meta_batch,
        outer_lr=cfg.outer_lr,
        epochs=cfg.epochs,
        seed=cfg.resolved_seed,
    )


def _objective(cfg: RunConfig) -> trainloops.TaskObjective:
    if cfg.loss == "reconstruction":
        return trainloops.ReconstructionObjective()
    return trainloops.AdversarialObjective(lambda_l1=cfg.lambda_l1)


def _write_run_context(out: Path, cfg: RunConfig, stats: tasks.NormStats) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.pinned().to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "norm_stats.json").write_text(json.dumps(stats.to_dict(), indent=2) + "\n")


def _append_log(path: Path, fields: dict) -> None:
    def fmt(v):
        return f"{v:.6f}" if isinstance(v, float) else str(v)

    with open(path, "a") as f:
        f.write(" ".join(f"{k}={fmt(v)}" for k, v in fields.items()) + "\n")


def _latest_checkpoint(root: Path, prefix: str = "epoch_") -> Path | None:
    if not root.is_dir():
        return None
    candidates = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith(prefix))
    return candidates[-1] if candidates else None


def _skill_from_eval(report: trainloops.EvalReport, cfg: RunConfig) -> skillmetrics.SkillReport:
    frames = [f for task_block in report.predictions for f in task_block]
    truth = [f for task_block in report.targets for f in task_block]
    return skillmetrics.evaluate_archive(frames, truth, cfg.thresholds, cfg.aggregation)


def run_train(cfg: RunConfig, resume: bool = False) -> Path:
    """Train a translator and write checkpoints, a metrics log and final
    test-split skill reports into the output directory."""
    out = Path(cfg.out_dir)
    manifest, store = data.read_archive(cfg.archive)
    _ensure_split(manifest, cfg)
    schema = manifest.schema
    stats = _train_stats(store, manifest)
    _write_run_context(out, cfg, stats)

    seed = cfg.resolved_seed
    mconf = _meta_config(cfg)
    objective = _objective(cfg)
    gen_spec = nets.UNetSpec(base_width=cfg.base_width)
    disc_spec = nets.PatchDiscSpec(base_width=cfg.disc_base_width) if cfg.loss == "adversarial" else None

    ckpt_root = out / "checkpoints"
    state = None
    if resume:
        latest = _latest_checkpoint(ckpt_root)
        if latest is None:
            raise ConfigError(f"--resume given but no checkpoints under {ckpt_root}")
        state = trainloops.load_train_state(latest)
        if state.gen.spec != gen_spec:
            raise ConfigError("checkpoint generator architecture does not match the config")
    if state is None:
        gen_override = None
        if cfg.pretrain_ckpt is not None:
            moco, _ = sslpretrain.load_moco_state(Path(cfg.pretrain_ckpt))
            if moco.unet_spec != gen_spec:
                raise ConfigError("pretrained encoder architecture does not match the config")
            gen_override = sslpretrain.export_encoder(moco, trainloops.derive_seed(seed, trainloops.SEED_GEN))
        state = trainloops.init_train_state(gen_spec, disc_spec, seed, gen_override=gen_override)

    train_tasks = _build_tasks(store, manifest.split_ids("train"), cfg, schema, stats)
    val_tasks = _build_tasks(store, manifest.split_ids("val"), cfg, schema, stats)
    if not train_tasks or not val_tasks:
        raise ConfigError("train and val splits must both be non-empty")

    log_path = out / "metrics.log"
    for epoch in range(state.epoch, cfg.epochs):
        order = np.random.default_rng(trainloops.derive_seed(seed, trainloops.SEED_DATA, epoch)).permutation(
            len(train_tasks)
        )
        gen_losses: list[float] = []
        disc_losses: list[float] = []
        try:
            for at in range(0, len(order), cfg.meta_batch):
                batch = [train_tasks[i] for i in order[at : at + cfg.meta_batch]]
                if cfg.mode == "maml":
                    per_task = trainloops.maml_outer_step(state, batch, mconf, objective)
                    gen_losses.extend(lg for lg, _ in per_task)
                    disc_losses.extend(ld for _, ld in per_task if ld is not None)
                else:
                    step_out = trainloops.joint_step(state, tasks.collapse_joint(batch), mconf, objective)
                    gen_losses.append(step_out["gen_loss"])
                    if "disc_loss" in step_out:
                        disc_losses.append(step_out["disc_loss"])
        except NumericError as e:
            _append_log(log_path, {"epoch": epoch + 1, "status": "failed", "error": str(e).replace(" ", "_")})
            raise NumericError(f"epoch {epoch + 1}: {e}") from e
        val = trainloops.evaluate_few_shot(
            state, val_tasks, mconf, objective, stats, schema, adapt=(cfg.mode == "maml")
        )
        state.epoch = epoch + 1
        row = {
            "epoch": epoch + 1,
            "train_loss": float(np.mean(gen_losses)),
            "val_mae": val.mean_mae,
        }
        if disc_losses:
            row["disc_loss"] = float(np.mean(disc_losses))
        state.history.append(row)
        _append_log(log_path, row)
        trainloops.save_train_state(state, ckpt_root / f"epoch_{state.epoch:03d}")

    test_tasks = _build_tasks(store, manifest.split_ids("test"), cfg, schema, stats)
    if test_tasks:
        adapted = trainloops.evaluate_few_shot(
            state, test_tasks, mconf, objective, stats, schema, adapt=(cfg.mode == "maml")
        )
        _skill_from_eval(adapted, cfg).write(out / "skill_test.txt")
        if cfg.mode == "maml":
            plain = trainloops.evaluate_few_shot(state, test_tasks, mconf, objective, stats, schema, adapt=False)
            _skill_from_eval(plain, cfg).write(out / "skill_test_noadapt.txt")
    return out


def run_pretrain(cfg: RunConfig, resume: bool = False) -> Path:
    """Contrastive pretraining over the train split; one checkpoint per epoch."""
    out = Path(cfg.out_dir)
    manifest, store = data.read_archive(cfg.archive)
    _ensure_split(manifest, cfg)
    schema = manifest.schema
    stats = _train_stats(store, manifest)
    _write_run_context(out, cfg, stats)

    seed = cfg.resolved_seed
    events = [store.load(eid) for eid in manifest.split_ids("train")]
    if len(events) < cfg.pretrain_batch_events:
        raise ConfigError(
            f"train split has {len(events)} events, need at least {cfg.pretrain_batch_events} per batch"
        )
    aug = sslpretrain.AugmentationSpec(level=cfg.aug_level)
    pconf = sslpretrain.PretrainConfig(
        base_lr=cfg.pretrain_base_lr,
        total_epochs=cfg.pretrain_epochs,
        warmup_epochs=cfg.pretrain_warmup,
        batch_events=cfg.pretrain_batch_events,
        m=cfg.moco_momentum,
        tau=cfg.tau,
        level=cfg.aug_level,
        seed=seed,
    )

    ckpt_root = out / "checkpoints"
    state = opt = None
    if resume:
        latest = _latest_checkpoint(ckpt_root)
        if latest is None:
            raise ConfigError(f"--resume given but no checkpoints under {ckpt_root}")
        state, opt = sslpretrain.load_moco_state(latest)
    if state is None:
        state = sslpretrain.init_moco_state(
            nets.UNetSpec(base_width=cfg.base_width), seed=seed, m=cfg.moco_momentum, tau=cfg.tau
        )
        opt = trainloops.SgdState(state.q)

    log_path = out / "metrics.log"
    for epoch in range(state.epoch, cfg.pretrain_epochs):
        lr = sslpretrain.cosine_warmup_lr(epoch, cfg.pretrain_epochs, cfg.pretrain_warmup, cfg.pretrain_base_lr)
        try:
            loss = sslpretrain.pretrain_epoch(state, events, aug, opt, pconf, stats, schema)
        except NumericError as e:
            _append_log(log_path, {"epoch": epoch + 1, "status": "failed", "error": str(e).replace(" ", "_")})
            raise NumericError(f"pretrain epoch {epoch + 1}: {e}") from e
        _append_log(log_path, {"epoch": epoch + 1, "pretrain_loss": loss, "lr": lr})
        sslpretrain.save_moco_state(state, opt, ckpt_root / f"epoch_{state.epoch:03d}")
    return out


def run_evaluate(
    checkpoint: str,
    archive: str,
    cfg: RunConfig,
    split: str = "test",
    adapt: bool = True,
    out_path: Path | None = None,
) -> skillmetrics.SkillReport:
    ckpt = Path(checkpoint)
    if not ckpt.is_dir():
        raise ConfigError(f"checkpoint {checkpoint} does not exist")
    state = trainloops.load_train_state(ckpt)
    manifest, store = data.read_archive(archive)
    _ensure_split(manifest, cfg)
    schema = manifest.schema
    stats = _train_stats(store, manifest)
    ids = manifest.split_ids(split)
    if not ids:
        raise ConfigError(f"split {split!r} is empty")
    eval_tasks = _build_tasks(store, ids, cfg, schema, stats)
    objective = (
        trainloops.AdversarialObjective(lambda_l1=cfg.lambda_l1)
        if state.disc is not None
        else trainloops.ReconstructionObjective()
    )
    report = trainloops.evaluate_few_shot(
        state, eval_tasks, _meta_config(cfg), objective, stats, schema, adapt=adapt
    )
    skill = _skill_from_eval(report, cfg)
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        skill.write(out_path)
    return skill


# ------------------------------------------------------------------- plotting


def _parse_log(path: Path) -> dict[str, list[float]]:
    series: dict[str, list[float]] = {}
    for line in path.read_text().splitlines():
        fields = dict(pair.partition("=")[::2] for pair in line.split())
        if "status" in fields:
            continue
        for key, raw in fields.items():
            try:
                series.setdefault(key, []).append(float(raw))
            except ValueError:
                continue
    return series


def render_curves(logs: Sequence[Path], out_file: Path) -> None:
    """One subplot per logged quantity; one labelled curve per run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = {p: _parse_log(p) for p in logs}
    keys = sorted({k for s in runs.values() for k in s if k != "epoch"})
    if not keys:
        raise ConfigError("no numeric series found in the given logs")
    fig, axes = plt.subplots(1, len(keys), figsize=(5 * len(keys), 4), squeeze=False)
    for ax, key in zip(axes[0], keys):
        for path, series in runs.items():
            if key not in series:
                continue
            epochs = series.get("epoch", list(range(1, len(series[key]) + 1)))
            ax.plot(epochs[: len(series[key])], series[key], marker="o", label=path.parent.name)
        ax.set_xlabel("epoch")
        ax.set_ylabel(key)
        ax.legend()
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out_file.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_file, dpi=120)
    plt.close(fig)


def render_skill_bars(reports: Sequence[Path], out_file: Path) -> None:
    """Grouped bars: one group per metric/threshold, one bar per run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    parsed = {p: skillmetrics.SkillReport.parse_lines(p.read_text().splitlines()) for p in reports}
    keys = sorted(
        {k for d in parsed.values() for k, v in d.items() if k[:3] in ("CSI", "POD", "SUC")}
    )
    if not keys:
        raise ConfigError("no skill metrics found in the given reports")
    fig, ax = plt.subplots(figsize=(1.5 * len(keys) + 3, 4))
    width = 0.8 / len(parsed)
    for j, (path, d) in enumerate(parsed.items()):
        xs = [i + j * width for i in range(len(keys))]
        ys = [d.get(k) if isinstance(d.get(k), float) else 0.0 for k in keys]
        ax.bar(xs, ys, width=width, label=path.parent.name)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(keys))])
    ax.set_xticklabels(keys, rotation=45, ha="right")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    out_file.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_file, dpi=120)
    plt.close(fig)


# ------------------------------------------------------------------- commands


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _seed_or_env(value: int | None) -> int:
    return int(value) if value is not None else int(os.environ.get(ENV_SEED, "0"))


def cmd_synth(args) -> int:
    data.synth_archive(
        n_events=args.events,
        seed=_seed_or_env(args.seed),
        out_path=Path(args.out),
        n_frames=args.frames,
        resolution=args.resolution,
        n_cells=args.cells,
    )
    print(f"wrote {args.events} events to {args.out}")
    return 0


def cmd_split(args) -> int:
    manifest, _ = data.read_archive(args.archive)
    if manifest.split_labels is not None and not args.force:
        raise ConfigError("archive already has split labels; pass --force to relabel")
    spec = tasks.split_events(manifest.event_ids, args.seed, tuple(args.fractions))
    manifest.split_labels = spec.labels()
    data.write_manifest(manifest, manifest.root)
    counts = dict(zip(tasks.SPLIT_PARTS, spec.counts))
    print(" ".join(f"{part}={n}" for part, n in counts.items()))
    return 0


def _config_from_args(args, defaults: dict | None = None) -> RunConfig:
    overrides = dict(defaults or {})
    for key in (
        "archive", "out_dir", "mode", "loss", "lambda_l1", "inner_lr", "inner_steps", "meta_batch",
        "outer_lr", "epochs", "n_support", "n_query", "base_width", "disc_base_width", "split_seed",
        "aug_level", "pretrain_ckpt", "pretrain_epochs", "pretrain_base_lr", "pretrain_warmup", "seed",
    ):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    return load_run_config(getattr(args, "config", None), overrides)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = run_train(cfg, resume=args.resume)
    print(f"run complete: {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config_from_args(args)
    out = run_pretrain(cfg, resume=args.resume)
    print(f"pretraining complete: {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_run_config(
        args.config,
        {
            "archive": args.archive,
            "out_dir": str(Path(args.out).parent) if args.out else ".",
            "n_support": args.n_support,
            "n_query": args.n_query,
            "inner_lr": args.inner_lr,
            "lambda_l1": args.lambda_l1,
            "split_seed": args.split_seed,
            "seed": args.seed,
            "thresholds": [float(t) for t in args.thresholds] if args.thresholds else None,
            "aggregation": args.aggregation,
        },
    )
    report = run_evaluate(
        args.checkpoint,
        args.archive,
        cfg,
        split=args.split,
        adapt=not args.no_adapt,
        out_path=Path(args.out) if args.out else None,
    )
    for line in report.to_lines():
        print(line)
    return 0


def cmd_plot(args) -> int:
    if not args.logs and not args.skill:
        raise ConfigError("nothing to plot: pass --logs and/or --skill")
    out_dir = Path(args.out)
    for group in (args.logs or []) + (args.skill or []):
        if not Path(group).is_file():
            raise ConfigError(f"input {group} does not exist")
    if args.logs:
        render_curves([Path(p) for p in args.logs], out_dir / "curves.png")
        print(f"wrote {out_dir / 'curves.png'}")
    if args.skill:
        render_skill_bars([Path(p) for p in args.skill], out_dir / "skill_bars.png")
        print(f"wrote {out_dir / 'skill_bars.png'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stormmeta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic storm-event archive")
    p.add_argument("--events", type=_positive_int, required=True)
    p.add_argument("--frames", type=_positive_int, default=49)
    p.add_argument("--resolution", type=_positive_int, default=64)
    p.add_argument("--cells", type=int, default=3)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="label archive events train/val/test")
    p.add_argument("--archive", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fractions", type=float, nargs=3, default=list(SPLIT_FRACTIONS))
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_split)

    def add_run_flags(p, pretrain: bool):
        p.add_argument("--config", default=None, help="JSON RunConfig; flags override file values")
        p.add_argument("--archive", default=None)
        p.add_argument("--out-dir", dest="out_dir", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--split-seed", dest="split_seed", type=int, default=None)
        p.add_argument("--base-width", dest="base_width", type=int, default=None)
        p.add_argument("--resume", action="store_true")
        if pretrain:
            p.add_argument("--epochs", dest="pretrain_epochs", type=int, default=None)
            p.add_argument("--base-lr", dest="pretrain_base_lr", type=float, default=None)
            p.add_argument("--warmup", dest="pretrain_warmup", type=float, default=None)
            p.add_argument("--aug-level", dest="aug_level", type=int, default=None)
        else:
            p.add_argument("--mode", choices=MODES, default=None)
            p.add_argument("--loss", choices=LOSSES, default=None)
            p.add_argument("--lambda-l1", dest="lambda_l1", type=float, default=None)
            p.add_argument("--inner-lr", dest="inner_lr", type=float, default=None)
            p.add_argument("--inner-steps", dest="inner_steps", type=int, default=None)
            p.add_argument("--meta-batch", dest="meta_batch", type=int, default=None)
            p.add_argument("--outer-lr", dest="outer_lr", type=float, default=None)
            p.add_argument("--epochs", type=int, default=None)
            p.add_argument("--n-support", dest="n_support", type=int, default=None)
            p.add_argument("--n-query", dest="n_query", type=int, default=None)
            p.add_argument("--disc-base-width", dest="disc_base_width", type=int, default=None)
            p.add_argument("--pretrain-ckpt", dest="pretrain_ckpt", default=None)

    p = sub.add_parser("train", help="train a translator (joint or episodic)")
    add_run_flags(p, pretrain=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pretrain", help="contrastive encoder pretraining")
    add_run_flags(p, pretrain=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("evaluate", help="skill report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--split", choices=tasks.SPLIT_PARTS, default="test")
    p.add_argument("--thresholds", type=float, nargs="+", default=None)
    p.add_argument("--aggregation", choices=("pooled", "per-frame-mean"), default=None)
    p.add_argument("--n-support", dest="n_support", type=int, default=None)
    p.add_argument("--n-query", dest="n_query", type=int, default=None)
    p.add_argument("--inner-lr", dest="inner_lr", type=float, default=None)
    p.add_argument("--lambda-l1", dest="lambda_l1", type=float, default=None)
    p.add_argument("--split-seed", dest="split_seed", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-adapt", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="render curves and skill bars from run logs")
    p.add_argument("--logs", nargs="*", default=None)
    p.add_argument("--skill", nargs="*", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 1
    except ArchiveIntegrityError as e:
        print(f"corrupt archive: {e}", file=sys.stderr)
        return 1
    except (ConfigError, ArchiveError, SchemaError, CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
