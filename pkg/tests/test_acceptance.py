"""Release gate: one test per acceptance criterion, each printing a verdict.

Criteria 1-5, 9 and 10 are oracle arithmetic and contract checks; 6-8 train
real models on a shared 280-event synthetic benchmark and dominate runtime.
Every verdict line carries the measured quantities so a failed gate can be
read without rerunning.
"""

import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest
import torch

from fdcheck import grad_rel_error
from stormmeta import cli
from stormmeta import experiments as ex
from stormmeta import sslpretrain as ssl
from stormmeta.data import ModalitySchema, read_archive, synth_archive, synth_event
from stormmeta.nets import (
    PatchDiscSpec,
    UNetSpec,
    discriminator_forward,
    generator_forward,
    init_params,
    load_params,
    save_params,
)
from stormmeta.objectives import discriminator_loss_from_maps, generator_loss, info_nce
from stormmeta.skillmetrics import METRIC_NAMES, binarize, confusion, skill
from stormmeta.tasks import FewShotTask, compute_norm_stats, split_events
from stormmeta.trainloops import derive_seed, meta_query_losses


def _verdict(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[acceptance] criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    if not ok:
        pytest.fail(f"criterion {n}: {detail}")


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    path = tmp_path_factory.mktemp("bench") / "archive"
    ex.build_benchmark(path)
    return path


def test_criterion_01_metric_oracle(capsys):
    t0 = time.monotonic()
    rng = np.random.default_rng(42)
    worst = 0.0
    for i in range(200):
        # every third pair stays below 133 so the undefined-metric path runs
        hi = 120.0 if i % 3 == 0 else 255.0
        pred = rng.uniform(0.0, hi, size=(16, 16))
        true = rng.uniform(0.0, hi, size=(16, 16))
        for thr in (74.0, 133.0):
            counts = confusion(binarize(pred, thr), binarize(true, thr))
            h = m = f = t = 0
            for r in range(16):
                for c in range(16):
                    p, q = bool(pred[r, c] >= thr), bool(true[r, c] >= thr)
                    h += p and q
                    f += p and not q
                    m += (not p) and q
                    t += (not p) and (not q)
            assert (counts.hits, counts.misses, counts.false_alarms, counts.true_negatives) == (h, m, f, t)
            ours = skill(counts)
            ref = {
                "CSI": h / (h + m + f) if h + m + f else None,
                "POD": h / (h + m) if h + m else None,
                "SUCR": h / (h + f) if h + f else None,
            }
            for key in METRIC_NAMES:
                if ref[key] is None:
                    assert ours[key] is None
                else:
                    err = abs(ours[key] - ref[key]) / max(abs(ref[key]), 1e-300)
                    worst = max(worst, err)
                    assert err < 1e-12
    dt = time.monotonic() - t0
    _verdict(capsys, 1, dt < 5.0, f"200 pairs x 2 thresholds match enumeration, worst rel err {worst:.1e}, {dt:.1f}s")


def test_criterion_02_closed_form_losses(capsys):
    t0 = time.monotonic()
    g = torch.Generator().manual_seed(0)
    src = torch.randn(2, 3, 16, 16, generator=g, dtype=torch.float64)
    tgt = torch.randn(2, 1, 32, 32, generator=g, dtype=torch.float64)
    disc = init_params(PatchDiscSpec(base_width=2), seed=0)
    zeroed = OrderedDict((k, torch.zeros_like(v, dtype=torch.float64)) for k, v in disc.tensors.items())
    checks = [
        # zeroed discriminator emits 0.5 everywhere; identical pred kills the L1 term
        ("gen@D=0.5", generator_loss(tgt, tgt, src, zeroed, 100.0).item(), math.log(2.0)),
        (
            "disc@(0.1,0.9)",
            discriminator_loss_from_maps(
                torch.full((2, 1, 4, 4), 0.1, dtype=torch.float64),
                torch.full((2, 1, 4, 4), 0.9, dtype=torch.float64),
            ).item(),
            -1.0986123,
        ),
        (
            "nce-uniform",
            info_nce(
                torch.tensor([1.0, 0, 0, 0], dtype=torch.float64),
                torch.tensor([0.0, 1, 0, 0], dtype=torch.float64),
                torch.tensor([[0.0, 0, 1, 0]], dtype=torch.float64),
                tau=0.1,
            ).item(),
            math.log(2.0),
        ),
        (
            "nce-aligned",
            info_nce(
                torch.tensor([1.0, 0.0], dtype=torch.float64),
                torch.tensor([1.0, 0.0], dtype=torch.float64),
                torch.tensor([[0.0, 1.0]], dtype=torch.float64),
                tau=1.0,
            ).item(),
            math.log(1.0 + math.exp(-1.0)),
        ),
    ]
    worst = max(abs(got - want) for _, got, want in checks)
    dt = time.monotonic() - t0
    _verdict(capsys, 2, worst < 1e-6 and dt < 1.0, f"0.6931 / -1.0986 / ln2 / 0.3133 within {worst:.1e}, {dt:.2f}s")


def _stub_task():
    z = torch.zeros(1, 1)
    return FewShotTask(event_id="stub", support_src=z, support_tgt=z, query_src=z, query_tgt=z)


@dataclass(frozen=True)
class _ScalarToy:
    """phi = w - eta * 2(w - 1); query loss phi^2 has meta-gradient 2 phi (1 - 2 eta)."""

    uses_disc: bool = field(default=False, init=False)

    def support_losses(self, gen_t, disc_t, task):
        return (gen_t["w"] - 1.0).square().sum(), None

    def query_losses(self, gen_t, disc_t, task):
        return gen_t["w"].square().sum(), None


@dataclass(frozen=True)
class _RegressionToy:
    xs: torch.Tensor
    ys: torch.Tensor
    xq: torch.Tensor
    yq: torch.Tensor
    uses_disc: bool = field(default=False, init=False)

    def _mse(self, t, x, y):
        h = torch.tanh(x @ t["w1"] + t["b1"])
        return ((h @ t["w2"] + t["b2"] - y) ** 2).mean()

    def support_losses(self, gen_t, disc_t, task):
        return self._mse(gen_t, self.xs, self.ys), None

    def query_losses(self, gen_t, disc_t, task):
        return self._mse(gen_t, self.xq, self.yq), None


@dataclass(frozen=True)
class _TwoPlayerToy:
    """Smooth coupled losses so both meta-gradients exercise the cross terms."""

    uses_disc: bool = field(default=True, init=False)

    def support_losses(self, gen_t, disc_t, task):
        a, b = gen_t["a"], disc_t["b"]
        score = torch.tanh(a.sum() * b.mean())
        return (a - 1.0).square().mean() + 0.3 * score, (b + 0.5).square().mean() - 0.4 * score

    def query_losses(self, gen_t, disc_t, task):
        a, b = gen_t["a"], disc_t["b"]
        score = torch.tanh((a * a).sum() * b.sum())
        return a.square().mean() + 0.2 * score, b.square().mean() - 0.1 * score


def test_criterion_03_bilevel_gradients(capsys):
    t0 = time.monotonic()
    w = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    qg, _, _ = meta_query_losses(_ScalarToy(), {"w": w}, None, [_stub_task()], inner_lr=0.25, inner_steps=1)
    (grad,) = torch.autograd.grad(qg, w)
    scalar_err = abs(grad.item() - 0.5)

    g = torch.Generator().manual_seed(5)
    toy = _RegressionToy(
        xs=torch.randn(8, 3, generator=g, dtype=torch.float64),
        ys=torch.randn(8, 1, generator=g, dtype=torch.float64),
        xq=torch.randn(6, 3, generator=g, dtype=torch.float64),
        yq=torch.randn(6, 1, generator=g, dtype=torch.float64),
    )
    params = OrderedDict(
        w1=torch.randn(3, 5, generator=g, dtype=torch.float64) * 0.5,
        b1=torch.zeros(5, dtype=torch.float64),
        w2=torch.randn(5, 1, generator=g, dtype=torch.float64) * 0.5,
        b2=torch.zeros(1, dtype=torch.float64),
    )
    assert sum(v.numel() for v in params.values()) <= 100
    tasks2 = [_stub_task(), _stub_task()]

    def recon_meta(tensors):
        work = OrderedDict((k, v if v.requires_grad else v.clone().requires_grad_(True)) for k, v in tensors.items())
        out, _, _ = meta_query_losses(toy, work, None, tasks2, inner_lr=0.05, inner_steps=2)
        return out

    recon_err = grad_rel_error(recon_meta, params, n_coords=26, seed=0, eps=1e-4)

    g2 = torch.Generator().manual_seed(9)
    gen_t = OrderedDict(a=torch.randn(7, generator=g2, dtype=torch.float64) * 0.3)
    disc_t = OrderedDict(b=torch.randn(5, generator=g2, dtype=torch.float64) * 0.3)
    gan = _TwoPlayerToy()

    def gen_meta(tensors):
        wg = OrderedDict((k, v if v.requires_grad else v.clone().requires_grad_(True)) for k, v in tensors.items())
        wd = OrderedDict((k, v.clone().requires_grad_(True)) for k, v in disc_t.items())
        out, _, _ = meta_query_losses(gan, wg, wd, tasks2, inner_lr=0.05, inner_steps=2)
        return out

    def disc_meta(tensors):
        wd = OrderedDict((k, v if v.requires_grad else v.clone().requires_grad_(True)) for k, v in tensors.items())
        wg = OrderedDict((k, v.clone().requires_grad_(True)) for k, v in gen_t.items())
        _, out, _ = meta_query_losses(gan, wg, wd, tasks2, inner_lr=0.05, inner_steps=2)
        return out

    adv_err = max(
        grad_rel_error(gen_meta, gen_t, n_coords=7, seed=1, eps=1e-4),
        grad_rel_error(disc_meta, disc_t, n_coords=5, seed=2, eps=1e-4),
    )
    dt = time.monotonic() - t0
    ok = scalar_err < 1e-12 and recon_err < 1e-4 and adv_err < 1e-4 and dt < 30.0
    _verdict(
        capsys,
        3,
        ok,
        f"scalar grad off by {scalar_err:.1e}, FD rel err recon {recon_err:.1e} adv {adv_err:.1e}, {dt:.0f}s",
    )


def test_criterion_04_stop_gradient_and_momentum(capsys):
    t0 = time.monotonic()
    state = ssl.init_moco_state(UNetSpec(base_width=2), seed=0)
    # force grad tracking on the key branch; the no_grad forward must still exclude it
    for v in state.k.values():
        v.requires_grad_(True)
    g = torch.Generator().manual_seed(0)
    views = torch.randn(4, 3, 16, 16, generator=g)
    loss = ssl.query_representations(state, views).square().mean() + ssl.key_representations(state, views).square().mean()
    key_grads = torch.autograd.grad(loss, list(state.k.values()), allow_unused=True)
    leak_free = all(gr is None for gr in key_grads)

    gq = torch.Generator().manual_seed(1)
    theta_k = OrderedDict(
        a=torch.randn(3, 4, generator=gq, dtype=torch.float64),
        b=torch.randn(5, generator=gq, dtype=torch.float64),
    )
    theta_q = OrderedDict((k, torch.randn_like(v)) for k, v in theta_k.items())
    m = 0.37
    updated = ssl.momentum_update(theta_k, theta_q, m)
    num = math.sqrt(sum(float((updated[k] - theta_q[k]).square().sum()) for k in theta_k))
    den = math.sqrt(sum(float((theta_k[k] - theta_q[k]).square().sum()) for k in theta_k))
    contraction_err = abs(num - m * den) / (m * den)
    frozen = ssl.momentum_update(theta_k, theta_q, 1.0)
    copied = ssl.momentum_update(theta_k, theta_q, 0.0)
    edges_exact = all(torch.equal(frozen[k], theta_k[k]) and torch.equal(copied[k], theta_q[k]) for k in theta_k)
    dt = time.monotonic() - t0
    ok = leak_free and contraction_err < 1e-12 and edges_exact and dt < 5.0
    _verdict(
        capsys,
        4,
        ok,
        f"key grads {'absent' if leak_free else 'LEAKED'}, contraction off by {contraction_err:.1e}, "
        f"m=0/1 {'exact' if edges_exact else 'INEXACT'}, {dt:.1f}s",
    )


def test_criterion_05_infonce_initialization_level(capsys):
    t0 = time.monotonic()
    schema = ModalitySchema()
    events = [synth_event(seed=100 + i, n_frames=49, resolution=64) for i in range(30)]
    stats = compute_norm_stats(events)
    state = ssl.init_moco_state(seed=0)
    spec = ssl.AugmentationSpec()
    losses = []
    for b in range(10):
        rng = torch.Generator().manual_seed(derive_seed(0, 3, 500 + b))
        loss = ssl.contrastive_batch_loss(state, events[3 * b : 3 * b + 3], spec, rng, stats, schema)
        losses.append(float(loss.detach()))
    mean_loss = float(np.mean(losses))
    gap = abs(mean_loss - math.log(72.0))
    dt = time.monotonic() - t0
    _verdict(capsys, 5, gap <= 0.5 and dt < 120.0, f"mean {mean_loss:.3f} vs ln 72 = {math.log(72.0):.3f}, {dt:.0f}s")


def test_criterion_06_maml_vs_joint_direction(bench, tmp_path, capsys):
    t0 = time.monotonic()
    res = ex.maml_vs_joint(bench, tmp_path, seeds=(0, 1, 2), epochs=3, base_width=16, inner_lr=0.01, meta_batch=2)
    errors = [a.error for arms in res.values() for a in arms if a.error]
    assert not errors, errors
    maml = ex.mean([a.final_val_mae for a in res["maml"]])
    joint = ex.mean([a.final_val_mae for a in res["joint"]])
    dt = time.monotonic() - t0
    ok = maml <= joint and dt < 1800.0
    _verdict(
        capsys,
        6,
        ok,
        f"adapted episodic val MAE {maml:.3f} vs pooled {joint:.3f} over 3 seeds at 300 outer steps, {dt:.0f}s",
    )


def test_criterion_07_lambda_tradeoff_direction(bench, tmp_path, capsys):
    res = ex.lambda_tradeoff(bench, tmp_path, seeds=(0, 1, 2), lambdas=(1e2, 1e4), epochs=3, base_width=16)
    tripped = [str(a.out_dir) for arms in res.values() for a in arms if a.error]
    defined = {
        lam: [a for a in arms if a.skill is not None and a.skill.get("POD74") is not None] for lam, arms in res.items()
    }
    pod = {lam: ex.mean([a.skill["POD74"] for a in arms]) for lam, arms in defined.items()}
    sucr = {lam: ex.mean([a.skill["SUCR74"] for a in arms]) for lam, arms in defined.items()}
    direction = pod[1e4] <= pod[1e2] and sucr[1e4] >= sucr[1e2]
    detail = (
        f"POD74 {pod[1e2]:.3f} -> {pod[1e4]:.3f}, SUCR74 {sucr[1e2]:.3f} -> {sucr[1e4]:.3f} "
        f"as lambda 1e2 -> 1e4 over 3 seeds"
    )
    if tripped:
        # instability demotes the direction to an informational report
        _verdict(capsys, 7, True, f"informational, numeric guard tripped on {len(tripped)} arm(s); {detail}")
    else:
        _verdict(capsys, 7, direction, detail)


def test_criterion_08_pretrain_handoff(bench, tmp_path, capsys):
    budget = 3
    res = ex.pretrain_handoff(
        bench, tmp_path, seeds=(0, 1, 2), aug_level=3, pretrain_epochs=5, finetune_epochs=budget, base_width=16
    )
    errors = [a.error for arms in res.values() for a in arms if a.error]
    assert not errors, errors
    scratch_steps, warm_steps = [], []
    for scratch, warm in zip(res["scratch"], res["warm"]):
        target = scratch.best_val_mae
        s_hit = scratch.first_epoch_at_or_below(target)
        w_hit = warm.first_epoch_at_or_below(target)
        # 200 train events / meta batch 2 = 100 outer steps per epoch
        scratch_steps.append(100 * s_hit)
        warm_steps.append(100 * (w_hit if w_hit is not None else budget + 1))
    ok = ex.mean(warm_steps) <= ex.mean(scratch_steps)
    _verdict(
        capsys,
        8,
        ok,
        f"steps to scratch-best val MAE: warm {ex.mean(warm_steps):.0f} vs scratch {ex.mean(scratch_steps):.0f} "
        f"over 3 seeds",
    )


def _dirs_match(a: Path, b: Path) -> bool:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if fa != fb:
        return False
    return all((a / p).read_bytes() == (b / p).read_bytes() for p in fa)


def test_criterion_09_determinism_and_persistence(tmp_path, capsys):
    t0 = time.monotonic()
    ids = [f"e{i:05d}" for i in range(11479)]
    spec = split_events(ids, seed=0)
    counts = tuple(len(spec.members[p]) for p in ("train", "val", "test"))
    assert counts == (9169, 1162, 1148), counts

    first = synth_archive(3, seed=9, out_path=tmp_path / "a1", n_frames=5, resolution=32)
    second = synth_archive(3, seed=9, out_path=tmp_path / "a2", n_frames=5, resolution=32)
    _, store1 = read_archive(tmp_path / "a1")
    _, store2 = read_archive(tmp_path / "a2")
    assert first.event_ids == second.event_ids
    archive_exact = all(np.array_equal(store1.load(e).data, store2.load(e).data) for e in store1.ids)
    assert archive_exact

    params = init_params(UNetSpec(base_width=2), seed=3)
    save_params(params, tmp_path / "params")
    reloaded = load_params(tmp_path / "params")
    assert reloaded.spec == params.spec
    params_exact = all(torch.equal(reloaded.tensors[k], v) for k, v in params.tensors.items())
    assert params_exact

    arch = tmp_path / "arch"
    synth_archive(6, seed=2, out_path=arch, n_frames=20, resolution=32)
    flags = [
        "--mode", "maml", "--loss", "reconstruction", "--inner-lr", "0.01",
        "--meta-batch", "2", "--base-width", "2", "--seed", "5",
    ]
    straight = tmp_path / "straight"
    assert cli.main(["train", "--archive", str(arch), "--out-dir", str(straight), "--epochs", "2", *flags]) == 0
    resumed = tmp_path / "resumed"
    assert cli.main(["train", "--archive", str(arch), "--out-dir", str(resumed), "--epochs", "1", *flags]) == 0
    assert cli.main(["train", "--archive", str(arch), "--out-dir", str(resumed), "--epochs", "2", "--resume", *flags]) == 0
    resume_exact = _dirs_match(straight / "checkpoints" / "epoch_002", resumed / "checkpoints" / "epoch_002")
    dt = time.monotonic() - t0
    ok = archive_exact and params_exact and resume_exact and dt < 60.0
    _verdict(
        capsys,
        9,
        ok,
        f"split {counts}, archive/params round-trip bit-exact, resume {'bit-exact' if resume_exact else 'DIVERGED'}, "
        f"{dt:.0f}s",
    )


def test_criterion_10_schedule_and_shape_contracts(capsys):
    fixed_points = (
        ssl.cosine_warmup_lr(0.0) == 0.0
        and ssl.cosine_warmup_lr(5.0) == 0.015
        and ssl.cosine_warmup_lr(52.5) == 0.0075
        and ssl.cosine_warmup_lr(100.0) == 0.0
    )

    gen = init_params(UNetSpec(base_width=2), seed=0)
    g = torch.Generator().manual_seed(0)
    shapes_ok = (
        tuple(generator_forward(gen, torch.randn(2, 3, 16, 16, generator=g)).shape) == (2, 1, 32, 32)
        and tuple(generator_forward(gen, torch.randn(1, 3, 32, 32, generator=g)).shape) == (1, 1, 64, 64)
    )

    disc = init_params(PatchDiscSpec(base_width=2), seed=0)
    out = discriminator_forward(disc, torch.randn(2, 3, 16, 16, generator=g), torch.randn(2, 1, 32, 32, generator=g))
    disc_ok = bool(((out > 0.0) & (out < 1.0)).all())

    ok = fixed_points and shapes_ok and disc_ok
    _verdict(
        capsys,
        10,
        ok,
        f"cosine fixed points {'exact' if fixed_points else 'OFF'}, generator x2 rule "
        f"{'holds' if shapes_ok else 'BROKEN'}, patch map in (0,1) {'holds' if disc_ok else 'BROKEN'}",
    )
