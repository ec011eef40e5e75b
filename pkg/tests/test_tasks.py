import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stormmeta.data import EventTensor, ModalitySchema, synth_event
from stormmeta.tasks import (
    NormStats,
    build_task,
    collapse_joint,
    compute_norm_stats,
    dezscore,
    resize_half,
    split_events,
    zscore,
)


def test_split_reference_counts():
    ids = [f"e{i}" for i in range(11479)]
    spec = split_events(ids, seed=0, fractions=(0.7988, 0.1012, 0.1000))
    assert spec.counts == (9169, 1162, 1148)


def test_split_partitions_ids():
    ids = [f"e{i}" for i in range(101)]
    spec = split_events(ids, seed=3, fractions=(0.8, 0.1, 0.1))
    flat = [e for p in ("train", "val", "test") for e in spec.members[p]]
    assert sorted(flat) == sorted(ids)
    assert spec.counts == (81, 10, 10)


def test_split_deterministic_and_seed_sensitive():
    ids = [f"e{i}" for i in range(50)]
    a = split_events(ids, seed=7)
    b = split_events(ids, seed=7)
    c = split_events(ids, seed=8)
    assert a.members == b.members
    assert a.members != c.members


@settings(max_examples=30, deadline=None)
@given(n=st.integers(3, 3000), seed=st.integers(0, 100))
def test_split_counts_sum_exactly(n, seed):
    spec = split_events([f"e{i}" for i in range(n)], seed=seed)
    assert sum(spec.counts) == n
    labels = spec.labels()
    assert len(labels) == n


def test_split_errors():
    with pytest.raises(ValueError):
        split_events(["a", "b"], seed=0, fractions=(0.5, 0.3, 0.2))
    with pytest.raises(ValueError):
        split_events(["a", "b", "c"], seed=0, fractions=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        split_events(["a", "b", "c"], seed=0, fractions=(1.2, -0.1, -0.1))
    with pytest.raises(ValueError):
        split_events(["a", "a", "b"], seed=0)


def test_zero_fraction_part_is_empty():
    spec = split_events([f"e{i}" for i in range(10)], seed=0, fractions=(0.9, 0.1, 0.0))
    assert spec.counts == (9, 1, 0)


def test_norm_stats_basics():
    data = np.zeros((2, 2, 4, 4), dtype=np.float32)
    data[0, 0], data[1, 0] = 0.0, 4.0
    data[0, 1], data[1, 1] = 1.0, 3.0
    events = [EventTensor("a", data[:1]), EventTensor("b", data[1:])]
    stats = compute_norm_stats(events)
    assert stats.mean == pytest.approx([2.0, 2.0])
    assert stats.std == pytest.approx([2.0, 1.0])


def test_norm_stats_constant_channel_warns_and_floors():
    events = [EventTensor("a", np.full((3, 2, 4, 4), 5.0, dtype=np.float32))]
    with pytest.warns(UserWarning):
        stats = compute_norm_stats(events)
    assert (stats.std >= 1e-6).all()
    z = zscore(torch.full((2, 4, 4), 5.0), stats)
    assert torch.isfinite(z).all()


def test_zscore_moments_and_round_trip():
    stats = NormStats(mean=np.array([1.0, -2.0]), std=np.array([2.0, 0.5]))
    x = torch.tensor(np.array([1.0, -2.0]).reshape(2, 1, 1) + 0.0, dtype=torch.float32)
    assert torch.all(zscore(x, stats) == 0)
    shifted = x + torch.tensor([2.0, 0.5]).reshape(2, 1, 1)
    assert torch.allclose(zscore(shifted, stats), torch.ones(2, 1, 1))

    y = torch.randn(5, 2, 8, 8) * 40 + 7
    back = dezscore(zscore(y, stats), stats)
    assert torch.allclose(back, y, atol=1e-4)


def test_resize_half_block_average():
    x = torch.tensor([[0.0, 0.0], [4.0, 4.0]]).reshape(1, 1, 2, 2)
    assert resize_half(x).item() == 2.0
    const = torch.full((3, 2, 8, 8), 7.0)
    out = resize_half(const)
    assert out.shape == (3, 2, 4, 4)
    assert torch.all(out == 7.0)


def test_resize_half_rejects_odd():
    with pytest.raises(ValueError):
        resize_half(torch.zeros(1, 1, 5, 4))


def _stats4():
    return NormStats(mean=np.zeros(4), std=np.ones(4))


def test_build_task_shapes():
    ev = synth_event(seed=1, n_frames=25, resolution=32)
    task = build_task(ev, n_support=10, n_query=10, stats=_stats4())
    assert task.support_src.shape == (10, 3, 16, 16)
    assert task.support_tgt.shape == (10, 1, 32, 32)
    assert task.query_src.shape == (10, 3, 16, 16)
    assert task.query_tgt.shape == (10, 1, 32, 32)
    assert task.event_id == ev.event_id


def test_build_task_support_precedes_query():
    ev = synth_event(seed=2, n_frames=8, resolution=16)
    stats = _stats4()
    task = build_task(ev, n_support=3, n_query=2, stats=stats)
    frames = torch.from_numpy(ev.data[:5])
    expected_tgt = frames[:, [3]]
    assert torch.equal(task.support_tgt, expected_tgt[:3])
    assert torch.equal(task.query_tgt, expected_tgt[3:5])


def test_build_task_too_few_frames():
    ev = synth_event(seed=3, n_frames=5, resolution=16)
    with pytest.raises(ValueError, match="frames"):
        build_task(ev, n_support=4, n_query=4, stats=_stats4())


def test_collapse_joint_counts_and_permutation():
    stats = _stats4()
    tasks = [build_task(synth_event(seed=s, n_frames=20, resolution=16), stats=stats) for s in (1, 2, 3)]
    src, tgt = collapse_joint(tasks)
    assert src.shape[0] == tgt.shape[0] == 60
    assert src.shape[1:] == (3, 8, 8)

    src2, _ = collapse_joint([tasks[2], tasks[0], tasks[1]])
    assert torch.equal(src2[:20], src[40:])
    assert torch.equal(src2[20:40], src[:20])
    with pytest.raises(ValueError):
        collapse_joint([])
