"""Training engines: episodic meta-learning with second-order gradients,
pooled joint training, few-shot evaluation and resumable optimizer state.

Both engines operate on explicit parameter dictionaries.  Inner adaptation
builds differentiable fast weights with ``create_graph`` so outer gradients
backpropagate through the update itself; the optimizers are hand-rolled so
their entire state serializes into flat float32 checkpoints.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
import torch

from . import nets
from .data import ModalitySchema
from .nets import CheckpointError, ParamSet, read_tensor_dir, spec_from_dict, spec_to_dict, write_tensor_dir
from .objectives import NumericError, discriminator_loss, generator_loss, reconstruction_loss
from .tasks import FewShotTask, NormStats, dezscore

Tensors = "OrderedDict[str, torch.Tensor]"


def derive_seed(root: int, stream: int, *indices: int) -> int:
    """Stable child seed for (stream, *indices); keeps data order a pure
    function of the root seed and epoch so resumed runs replay exactly."""
    entropy = [int(root), int(stream), *(int(i) for i in indices)]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


SEED_GEN, SEED_DISC, SEED_DATA, SEED_PRETRAIN = 0, 1, 2, 3


@dataclass(frozen=True)
class MetaConfig:
    """Optimization settings shared by the joint and episodic engines."""

    inner_lr: float = 1e-4
    inner_steps: int = 1
    meta_batch: int = 3
    outer_lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.inner_lr <= 0:
            raise ValueError("inner_lr must be > 0")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")
        if self.outer_lr <= 0:
            raise ValueError("outer_lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


class AdamState:
    """First/second-moment buffers plus step count for one parameter dict."""

    def __init__(self, tensors: Mapping[str, torch.Tensor]):
        self.t = 0
        self.m = OrderedDict((k, torch.zeros_like(v, requires_grad=False)) for k, v in tensors.items())
        self.v = OrderedDict((k, torch.zeros_like(v, requires_grad=False)) for k, v in tensors.items())


def adam_step(
    tensors: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float = 1e-8,
) -> None:
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    with torch.no_grad():
        for k, p in tensors.items():
            g = grads[k]
            state.m[k].mul_(beta1).add_(g, alpha=1.0 - beta1)
            state.v[k].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (state.v[k] / bc2).sqrt_().add_(eps)
            p.add_((state.m[k] / bc1) / denom, alpha=-lr)


class SgdState:
    """Momentum buffers for one parameter dict."""

    def __init__(self, tensors: Mapping[str, torch.Tensor]):
        self.buf = OrderedDict((k, torch.zeros_like(v, requires_grad=False)) for k, v in tensors.items())


def sgd_momentum_step(
    tensors: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: SgdState,
    lr: float,
    momentum: float,
    weight_decay: float = 0.0,
) -> None:
    with torch.no_grad():
        for k, p in tensors.items():
            g = grads[k]
            if weight_decay:
                g = g.add(p, alpha=weight_decay)
            state.buf[k].mul_(momentum).add_(g)
            p.add_(state.buf[k], alpha=-lr)


def _grad_values(
    loss: torch.Tensor,
    tensors: Mapping[str, torch.Tensor],
    create_graph: bool,
    retain_graph: bool | None = None,
    what: str = "loss",
) -> Tensors:
    if not torch.isfinite(loss):
        raise NumericError(f"{what} is non-finite")
    grads = torch.autograd.grad(
        loss, list(tensors.values()), create_graph=create_graph, retain_graph=retain_graph
    )
    for (name, _), g in zip(tensors.items(), grads):
        if not torch.isfinite(g).all():
            raise NumericError(f"{what}: non-finite gradient for {name!r}")
    return OrderedDict(zip(tensors.keys(), grads))


def inner_adapt(
    tensors: Mapping[str, torch.Tensor],
    loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    lr: float,
    steps: int = 1,
    create_graph: bool = True,
) -> Tensors:
    """Differentiable gradient-descent adaptation; returns fast weights whose
    graph reaches back into ``tensors`` when ``create_graph`` is set."""
    if lr <= 0:
        raise ValueError("inner adaptation lr must be > 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cur = OrderedDict(tensors)
    for _ in range(steps):
        grads = _grad_values(loss_fn(cur), cur, create_graph=create_graph, what="inner adaptation")
        cur = OrderedDict((k, v - lr * grads[k]) for k, v in cur.items())
    return cur


class TaskObjective(Protocol):
    """Support/query loss pair evaluated on one task's data.

    ``disc_tensors`` is None for single-network objectives and the returned
    discriminator loss is None in that case.
    """

    uses_disc: bool

    def support_losses(self, gen_tensors, disc_tensors, task) -> tuple[torch.Tensor, torch.Tensor | None]: ...

    def query_losses(self, gen_tensors, disc_tensors, task) -> tuple[torch.Tensor, torch.Tensor | None]: ...


@dataclass(frozen=True)
class ReconstructionObjective:
    uses_disc: bool = field(default=False, init=False)

    def _loss(self, gen_tensors, src, tgt):
        return reconstruction_loss(nets.generator_forward(gen_tensors, src), tgt)

    def support_losses(self, gen_tensors, disc_tensors, task):
        return self._loss(gen_tensors, task.support_src, task.support_tgt), None

    def query_losses(self, gen_tensors, disc_tensors, task):
        return self._loss(gen_tensors, task.query_src, task.query_tgt), None


@dataclass(frozen=True)
class AdversarialObjective:
    lambda_l1: float = 1000.0
    uses_disc: bool = field(default=True, init=False)

    def _losses(self, gen_tensors, disc_tensors, src, tgt):
        t_gen = nets.generator_forward(gen_tensors, src)
        lg = generator_loss(t_gen, tgt, src, disc_tensors, self.lambda_l1)
        ld = discriminator_loss(t_gen, tgt, src, disc_tensors)
        return lg, ld

    def support_losses(self, gen_tensors, disc_tensors, task):
        return self._losses(gen_tensors, disc_tensors, task.support_src, task.support_tgt)

    def query_losses(self, gen_tensors, disc_tensors, task):
        return self._losses(gen_tensors, disc_tensors, task.query_src, task.query_tgt)


def adapt_to_task(
    objective: TaskObjective,
    gen_tensors: Mapping[str, torch.Tensor],
    disc_tensors: Mapping[str, torch.Tensor] | None,
    task: FewShotTask,
    inner_lr: float,
    inner_steps: int,
    create_graph: bool = True,
) -> tuple[Tensors, Tensors | None]:
    """Fast weights for one task.  Both players take simultaneous descent
    steps on their support losses: each step's gradients are evaluated at the
    same (generator, discriminator) iterate before either side moves."""
    if not objective.uses_disc:
        fn = lambda g: objective.support_losses(g, None, task)[0]
        return inner_adapt(gen_tensors, fn, inner_lr, inner_steps, create_graph), None
    if disc_tensors is None:
        raise ValueError("adversarial objective needs discriminator parameters")
    cur_g, cur_d = OrderedDict(gen_tensors), OrderedDict(disc_tensors)
    for _ in range(inner_steps):
        lg, ld = objective.support_losses(cur_g, cur_d, task)
        grads_g = _grad_values(lg, cur_g, create_graph=create_graph, retain_graph=True, what="inner generator loss")
        grads_d = _grad_values(ld, cur_d, create_graph=create_graph, what="inner discriminator loss")
        cur_g = OrderedDict((k, v - inner_lr * grads_g[k]) for k, v in cur_g.items())
        cur_d = OrderedDict((k, v - inner_lr * grads_d[k]) for k, v in cur_d.items())
    return cur_g, cur_d


def meta_query_losses(
    objective: TaskObjective,
    gen_tensors: Mapping[str, torch.Tensor],
    disc_tensors: Mapping[str, torch.Tensor] | None,
    tasks: Sequence[FewShotTask],
    inner_lr: float,
    inner_steps: int,
) -> tuple[torch.Tensor, torch.Tensor | None, list[tuple[float, float | None]]]:
    """Mean post-adaptation query losses over a task batch, graph intact."""
    if not tasks:
        raise ValueError("empty task batch")
    gen_total, disc_total, per_task = None, None, []
    for task in tasks:
        try:
            phi_g, phi_d = adapt_to_task(objective, gen_tensors, disc_tensors, task, inner_lr, inner_steps)
            qg, qd = objective.query_losses(phi_g, phi_d, task)
        except NumericError as e:
            raise NumericError(f"task {task.event_id!r}: {e}") from e
        gen_total = qg if gen_total is None else gen_total + qg
        disc_total = qd if disc_total is None else (disc_total + qd if qd is not None else None)
        per_task.append((float(qg.detach()), None if qd is None else float(qd.detach())))
    n = float(len(tasks))
    return gen_total / n, None if disc_total is None else disc_total / n, per_task


@dataclass
class TrainState:
    """Everything a run needs to continue: parameters, optimizers, position."""

    gen: ParamSet
    opt_gen: AdamState
    disc: ParamSet | None = None
    opt_disc: AdamState | None = None
    epoch: int = 0
    step: int = 0
    seed: int = 0
    history: list[dict] = field(default_factory=list)


def init_train_state(
    gen_spec: nets.UNetSpec,
    disc_spec: nets.PatchDiscSpec | None,
    seed: int,
    gen_override: ParamSet | None = None,
) -> TrainState:
    """Fresh state with derived per-network init seeds; ``gen_override``
    replaces the generator init (used to warm-start from a pretrained encoder)."""
    gen = gen_override if gen_override is not None else nets.init_params(gen_spec, derive_seed(seed, SEED_GEN))
    if gen.spec != gen_spec:
        raise ValueError("generator override does not match the requested architecture")
    gen.requires_grad_(True)
    disc = opt_disc = None
    if disc_spec is not None:
        disc = nets.init_params(disc_spec, derive_seed(seed, SEED_DISC)).requires_grad_(True)
        opt_disc = AdamState(disc.tensors)
    return TrainState(gen=gen, opt_gen=AdamState(gen.tensors), disc=disc, opt_disc=opt_disc, seed=seed)


def maml_outer_step(
    state: TrainState,
    tasks: Sequence[FewShotTask],
    config: MetaConfig,
    objective: TaskObjective,
) -> list[tuple[float, float | None]]:
    """One episodic meta-update: adapt per task, average query losses, then
    backpropagate through the adaptation into the initial weights."""
    disc_tensors = state.disc.tensors if (objective.uses_disc and state.disc is not None) else None
    if objective.uses_disc and disc_tensors is None:
        raise ValueError("state holds no discriminator for an adversarial objective")
    qg, qd, per_task = meta_query_losses(
        objective, state.gen.tensors, disc_tensors, tasks, config.inner_lr, config.inner_steps
    )
    grads_g = _grad_values(
        qg, state.gen.tensors, create_graph=False, retain_graph=qd is not None, what="outer generator loss"
    )
    if qd is not None:
        grads_d = _grad_values(qd, disc_tensors, create_graph=False, what="outer discriminator loss")
        adam_step(disc_tensors, grads_d, state.opt_disc, config.outer_lr, config.beta1, config.beta2, config.adam_eps)
    adam_step(state.gen.tensors, grads_g, state.opt_gen, config.outer_lr, config.beta1, config.beta2, config.adam_eps)
    state.step += 1
    return per_task


def joint_step(
    state: TrainState,
    batch: tuple[torch.Tensor, torch.Tensor],
    config: MetaConfig,
    objective: TaskObjective,
) -> dict[str, float]:
    """One pooled mini-batch update.  Adversarial mode alternates one
    discriminator step (generated targets detached) with one generator step
    against the just-updated discriminator."""
    src, tgt = batch
    if src.shape[0] == 0:
        raise ValueError("empty batch")
    out: dict[str, float] = {}
    if not objective.uses_disc:
        loss = reconstruction_loss(nets.generator_forward(state.gen.tensors, src), tgt)
        grads = _grad_values(loss, state.gen.tensors, create_graph=False, what="joint reconstruction loss")
        adam_step(state.gen.tensors, grads, state.opt_gen, config.outer_lr, config.beta1, config.beta2, config.adam_eps)
        out["gen_loss"] = float(loss.detach())
    else:
        if state.disc is None:
            raise ValueError("state holds no discriminator for an adversarial objective")
        t_gen = nets.generator_forward(state.gen.tensors, src)
        ld = discriminator_loss(t_gen.detach(), tgt, src, state.disc.tensors)
        grads_d = _grad_values(ld, state.disc.tensors, create_graph=False, what="joint discriminator loss")
        adam_step(
            state.disc.tensors, grads_d, state.opt_disc, config.outer_lr, config.beta1, config.beta2, config.adam_eps
        )
        lg = generator_loss(t_gen, tgt, src, state.disc.tensors, objective.lambda_l1)
        grads_g = _grad_values(lg, state.gen.tensors, create_graph=False, what="joint generator loss")
        adam_step(
            state.gen.tensors, grads_g, state.opt_gen, config.outer_lr, config.beta1, config.beta2, config.adam_eps
        )
        out["gen_loss"], out["disc_loss"] = float(lg.detach()), float(ld.detach())
    state.step += 1
    return out


@dataclass
class EvalReport:
    """Physical-unit evaluation: per-task query MAE plus clipped predictions."""

    task_ids: list[str]
    mae_per_task: np.ndarray
    predictions: np.ndarray
    targets: np.ndarray

    @property
    def mean_mae(self) -> float:
        return float(self.mae_per_task.mean())


def evaluate_few_shot(
    state: TrainState,
    tasks: Sequence[FewShotTask],
    config: MetaConfig,
    objective: TaskObjective,
    stats: NormStats,
    schema: ModalitySchema = ModalitySchema(),
    adapt: bool = True,
) -> EvalReport:
    """Query-frame MAE in physical units, optionally after support adaptation.

    Adaptation runs on throwaway copies; the training state never moves.
    Predictions are denormalized and clipped to the target channel's range.
    """
    if not tasks:
        raise ValueError("no evaluation tasks")
    tstats = stats.select([schema.target_index])
    lo, hi = schema.value_range[schema.target_index]
    ids, maes, preds, tgts = [], [], [], []
    def throwaway(ps):
        return OrderedDict((k, v.detach().clone().requires_grad_(adapt)) for k, v in ps.tensors.items())

    for task in tasks:
        gen_t = throwaway(state.gen)
        disc_t = throwaway(state.disc) if state.disc is not None else None
        if adapt:
            gen_t, disc_t = adapt_to_task(
                objective, gen_t, disc_t, task, config.inner_lr, config.inner_steps, create_graph=False
            )
        with torch.no_grad():
            raw = nets.generator_forward(gen_t, task.query_src)
            pred = dezscore(raw, tstats).clamp(lo, hi)
            tgt = dezscore(task.query_tgt, tstats)
        ids.append(task.event_id)
        maes.append(float((pred - tgt).abs().mean()))
        preds.append(pred.squeeze(1).numpy())
        tgts.append(tgt.squeeze(1).numpy())
    return EvalReport(
        task_ids=ids,
        mae_per_task=np.array(maes),
        predictions=np.stack(preds),
        targets=np.stack(tgts),
    )


def _flatten_state(state: TrainState) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, t in state.gen.tensors.items():
        tensors[f"gen.{name}"] = t
    for name, t in state.opt_gen.m.items():
        tensors[f"optg.m.{name}"] = t
    for name, t in state.opt_gen.v.items():
        tensors[f"optg.v.{name}"] = t
    meta = {
        "kind": "trainstate",
        "gen_arch": spec_to_dict(state.gen.spec),
        "disc_arch": None,
        "epoch": state.epoch,
        "step": state.step,
        "seed": state.seed,
        "adam_t": {"gen": state.opt_gen.t},
        "history": state.history,
    }
    if state.disc is not None:
        for name, t in state.disc.tensors.items():
            tensors[f"disc.{name}"] = t
        for name, t in state.opt_disc.m.items():
            tensors[f"optd.m.{name}"] = t
        for name, t in state.opt_disc.v.items():
            tensors[f"optd.v.{name}"] = t
        meta["disc_arch"] = spec_to_dict(state.disc.spec)
        meta["adam_t"]["disc"] = state.opt_disc.t
    return tensors, meta


def save_train_state(state: TrainState, path: Path) -> None:
    tensors, meta = _flatten_state(state)
    write_tensor_dir(path, tensors, meta)


def load_train_state(path: Path) -> TrainState:
    tensors, doc = read_tensor_dir(path)
    if doc.get("kind") != "trainstate":
        raise CheckpointError(f"checkpoint kind {doc.get('kind')!r}, expected 'trainstate'")
    gen_spec = spec_from_dict(doc["gen_arch"])
    gen = ParamSet(gen_spec, nets.subset(tensors, "gen")).requires_grad_(True)
    opt_gen = AdamState(gen.tensors)
    opt_gen.t = int(doc["adam_t"]["gen"])
    opt_gen.m = nets.subset(tensors, "optg.m")
    opt_gen.v = nets.subset(tensors, "optg.v")
    state = TrainState(
        gen=gen,
        opt_gen=opt_gen,
        epoch=int(doc["epoch"]),
        step=int(doc["step"]),
        seed=int(doc["seed"]),
        history=list(doc.get("history", [])),
    )
    if doc.get("disc_arch") is not None:
        disc_spec = spec_from_dict(doc["disc_arch"])
        state.disc = ParamSet(disc_spec, nets.subset(tensors, "disc")).requires_grad_(True)
        state.opt_disc = AdamState(state.disc.tensors)
        state.opt_disc.t = int(doc["adam_t"]["disc"])
        state.opt_disc.m = nets.subset(tensors, "optd.m")
        state.opt_disc.v = nets.subset(tensors, "optd.v")
    for ps in (state.gen, state.disc):
        if ps is None:
            continue
        expected = nets.arch_shapes(ps.spec)
        if list(expected) != list(ps.tensors):
            raise CheckpointError("checkpoint tensors do not match the declared architecture")
    return state
