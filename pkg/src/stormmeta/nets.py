"""Functional network definitions over explicit parameter dictionaries.

Parameters are plain name-to-tensor mappings (``ParamSet``), never module
state, so forwards stay dtype-agnostic and meta-gradients can flow through
hand-built optimizer updates.  Checkpoints are directories with one raw
little-endian float32 blob per tensor plus a JSON manifest.

Translator layout (base width b, capped doubling): encoder convs
b, 2b, 4b, 8b with stride 2; decoder mirrors with transposed convs and skip
concatenations from the first three encoder stages; a final linear transposed
conv doubles the input resolution.  The discriminator scores (source, target)
pairs patch-wise after nearest-upsampling the source onto the target grid.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as tf

CHECKPOINT_FORMAT = "stormmeta-checkpoint-v1"


class ShapeError(ValueError):
    """Input tensor shape violates a forward contract."""


class CheckpointError(Exception):
    """Checkpoint directory missing, malformed or inconsistent."""


@dataclass(frozen=True)
class UNetSpec:
    kind: str = field(default="unet", init=False)
    in_channels: int = 3
    out_channels: int = 1
    base_width: int = 32

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1 or self.base_width < 1:
            raise ValueError("channel counts and base width must be >= 1")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * min(2**i, 8) for i in range(4))

    @property
    def embed_dim(self) -> int:
        return self.widths[-1]


@dataclass(frozen=True)
class PatchDiscSpec:
    kind: str = field(default="patch_disc", init=False)
    source_channels: int = 3
    target_channels: int = 1
    base_width: int = 64

    def __post_init__(self):
        if self.source_channels < 1 or self.target_channels < 1 or self.base_width < 1:
            raise ValueError("channel counts and base width must be >= 1")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.base_width, 2 * self.base_width, 4 * self.base_width)


@dataclass(frozen=True)
class HeadSpec:
    """Projector (embed -> hidden -> out, terminal non-affine BN) and predictor."""

    kind: str = field(default="heads", init=False)
    embed_dim: int = 256
    hidden_dim: int = 2048
    out_dim: int = 128

    def __post_init__(self):
        if min(self.embed_dim, self.hidden_dim, self.out_dim) < 1:
            raise ValueError("head dimensions must be >= 1")


ArchSpec = UNetSpec | PatchDiscSpec | HeadSpec
_SPEC_KINDS = {"unet": UNetSpec, "patch_disc": PatchDiscSpec, "heads": HeadSpec}


def spec_to_dict(spec: ArchSpec) -> dict:
    d = {"kind": spec.kind}
    for name in spec.__dataclass_fields__:
        if name != "kind":
            d[name] = getattr(spec, name)
    return d


def spec_from_dict(d: Mapping) -> ArchSpec:
    kind = d.get("kind")
    if kind not in _SPEC_KINDS:
        raise CheckpointError(f"unknown architecture kind {kind!r}")
    kwargs = {k: v for k, v in d.items() if k != "kind"}
    return _SPEC_KINDS[kind](**kwargs)


def unet_shapes(spec: UNetSpec) -> "OrderedDict[str, tuple[int, ...]]":
    w = spec.widths
    cin, cout = spec.in_channels, spec.out_channels
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    enc_in = (cin, w[0], w[1], w[2])
    for i in range(4):
        shapes[f"enc{i + 1}.weight"] = (w[i], enc_in[i], 4, 4)
        shapes[f"enc{i + 1}.bias"] = (w[i],)
    # Transposed conv weights are (in, out, kh, kw); inputs of dec2..dec4 carry
    # the skip concatenation, the final two stages have no skips.
    dec_io = [(w[3], w[2]), (2 * w[2], w[1]), (2 * w[1], w[0]), (2 * w[0], w[0]), (w[0], cout)]
    for i, (ci, co) in enumerate(dec_io):
        shapes[f"dec{i + 1}.weight"] = (ci, co, 4, 4)
        shapes[f"dec{i + 1}.bias"] = (co,)
    return shapes


def disc_shapes(spec: PatchDiscSpec) -> "OrderedDict[str, tuple[int, ...]]":
    w = spec.widths
    cin = spec.source_channels + spec.target_channels
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    chain = (cin, w[0], w[1])
    for i in range(3):
        shapes[f"conv{i + 1}.weight"] = (w[i], chain[i], 4, 4)
        shapes[f"conv{i + 1}.bias"] = (w[i],)
    shapes["head.weight"] = (1, w[2], 3, 3)
    shapes["head.bias"] = (1,)
    return shapes


def projector_shapes(spec: HeadSpec) -> "OrderedDict[str, tuple[int, ...]]":
    return OrderedDict(
        [
            ("fc1.weight", (spec.hidden_dim, spec.embed_dim)),
            ("fc1.bias", (spec.hidden_dim,)),
            ("bn1.weight", (spec.hidden_dim,)),
            ("bn1.bias", (spec.hidden_dim,)),
            ("fc2.weight", (spec.out_dim, spec.hidden_dim)),
            ("fc2.bias", (spec.out_dim,)),
        ]
    )


def predictor_shapes(spec: HeadSpec) -> "OrderedDict[str, tuple[int, ...]]":
    return OrderedDict(
        [
            ("fc1.weight", (spec.hidden_dim, spec.out_dim)),
            ("fc1.bias", (spec.hidden_dim,)),
            ("bn1.weight", (spec.hidden_dim,)),
            ("bn1.bias", (spec.hidden_dim,)),
            ("fc2.weight", (spec.out_dim, spec.hidden_dim)),
            ("fc2.bias", (spec.out_dim,)),
        ]
    )


def arch_shapes(spec: ArchSpec) -> "OrderedDict[str, tuple[int, ...]]":
    if isinstance(spec, UNetSpec):
        return unet_shapes(spec)
    if isinstance(spec, PatchDiscSpec):
        return disc_shapes(spec)
    shapes = OrderedDict((f"projector.{k}", v) for k, v in projector_shapes(spec).items())
    shapes.update((f"predictor.{k}", v) for k, v in predictor_shapes(spec).items())
    return shapes


@dataclass
class ParamSet:
    """Architecture spec plus its parameters as an ordered name-to-tensor map."""

    spec: ArchSpec
    tensors: "OrderedDict[str, torch.Tensor]"

    @property
    def n_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def clone(self) -> "ParamSet":
        return ParamSet(self.spec, OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()))

    def requires_grad_(self, flag: bool = True) -> "ParamSet":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def to_dtype(self, dtype: torch.dtype) -> "ParamSet":
        return ParamSet(self.spec, OrderedDict((k, v.detach().to(dtype)) for k, v in self.tensors.items()))


def init_tensors(
    shapes: Mapping[str, tuple[int, ...]],
    seed: int,
    weight_std: float = 0.02,
) -> "OrderedDict[str, torch.Tensor]":
    """Fill a shape table in iteration order: conv/linear weights N(0, std),
    normalization weights one, biases zero."""
    gen = torch.Generator().manual_seed(seed)
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, shape in shapes.items():
        t = torch.empty(*shape, dtype=torch.float32)
        if name.endswith(".bias"):
            t.zero_()
        elif len(shape) >= 2:
            t.normal_(0.0, weight_std, generator=gen)
        else:
            t.fill_(1.0)
        out[name] = t
    return out


def init_params(spec: ArchSpec, seed: int) -> ParamSet:
    return ParamSet(spec, init_tensors(arch_shapes(spec), seed))


def _check_image(x: torch.Tensor, channels: int, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected (B, C, H, W), got {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ShapeError(f"{what}: expected {channels} channels, got {x.shape[1]}")


def generator_forward(params: ParamSet | Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Translate sources to targets at twice the input resolution."""
    p = params.tensors if isinstance(params, ParamSet) else params
    _check_image(x, p["enc1.weight"].shape[1], "generator input")
    if x.shape[2] % 16 or x.shape[3] % 16:
        raise ShapeError(f"generator input spatial dims must be divisible by 16, got {tuple(x.shape[2:])}")

    e1 = tf.relu(tf.conv2d(x, p["enc1.weight"], p["enc1.bias"], stride=2, padding=1))
    e2 = tf.relu(tf.conv2d(e1, p["enc2.weight"], p["enc2.bias"], stride=2, padding=1))
    e3 = tf.relu(tf.conv2d(e2, p["enc3.weight"], p["enc3.bias"], stride=2, padding=1))
    e4 = tf.relu(tf.conv2d(e3, p["enc4.weight"], p["enc4.bias"], stride=2, padding=1))

    d1 = tf.relu(tf.conv_transpose2d(e4, p["dec1.weight"], p["dec1.bias"], stride=2, padding=1))
    d2 = tf.relu(tf.conv_transpose2d(torch.cat([d1, e3], dim=1), p["dec2.weight"], p["dec2.bias"], stride=2, padding=1))
    d3 = tf.relu(tf.conv_transpose2d(torch.cat([d2, e2], dim=1), p["dec3.weight"], p["dec3.bias"], stride=2, padding=1))
    d4 = tf.relu(tf.conv_transpose2d(torch.cat([d3, e1], dim=1), p["dec4.weight"], p["dec4.bias"], stride=2, padding=1))
    return tf.conv_transpose2d(d4, p["dec5.weight"], p["dec5.bias"], stride=2, padding=1)


def encoder_forward(params: ParamSet | Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Run the translator encoder alone and global-average-pool to embeddings."""
    p = params.tensors if isinstance(params, ParamSet) else params
    _check_image(x, p["enc1.weight"].shape[1], "encoder input")
    h = x
    for i in range(1, 5):
        h = tf.relu(tf.conv2d(h, p[f"enc{i}.weight"], p[f"enc{i}.bias"], stride=2, padding=1))
    return h.mean(dim=(2, 3))


def discriminator_forward(
    params: ParamSet | Mapping[str, torch.Tensor],
    source: torch.Tensor,
    target: torch.Tensor,
) -> torch.Tensor:
    """Patch realism map in (0, 1); spatial size is target size over 8."""
    p = params.tensors if isinstance(params, ParamSet) else params
    if source.ndim != 4 or target.ndim != 4:
        raise ShapeError("discriminator inputs must be (B, C, H, W)")
    if target.shape[2] != 2 * source.shape[2] or target.shape[3] != 2 * source.shape[3]:
        raise ShapeError(
            f"target resolution {tuple(target.shape[2:])} must be twice source {tuple(source.shape[2:])}"
        )
    up = tf.interpolate(source, scale_factor=2, mode="nearest")
    h = torch.cat([up, target], dim=1)
    _check_image(h, p["conv1.weight"].shape[1], "discriminator source+target stack")
    h = tf.leaky_relu(tf.conv2d(h, p["conv1.weight"], p["conv1.bias"], stride=2, padding=1), 0.2)
    h = tf.leaky_relu(tf.conv2d(h, p["conv2.weight"], p["conv2.bias"], stride=2, padding=1), 0.2)
    h = tf.leaky_relu(tf.conv2d(h, p["conv3.weight"], p["conv3.bias"], stride=2, padding=1), 0.2)
    return torch.sigmoid(tf.conv2d(h, p["head.weight"], p["head.bias"], stride=1, padding=1))


def _mlp_forward(p: Mapping[str, torch.Tensor], x: torch.Tensor, final_bn: bool) -> torch.Tensor:
    if x.ndim != 2:
        raise ShapeError(f"head input must be (B, D), got {tuple(x.shape)}")
    h = tf.linear(x, p["fc1.weight"], p["fc1.bias"])
    h = tf.batch_norm(h, None, None, p["bn1.weight"], p["bn1.bias"], training=True)
    h = tf.relu(h)
    h = tf.linear(h, p["fc2.weight"], p["fc2.bias"])
    if final_bn:
        h = tf.batch_norm(h, None, None, None, None, training=True)
    return h


def projector_forward(p: Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Projection MLP with a terminal non-affine batch norm; batch stats, so B >= 2."""
    return _mlp_forward(p, x, final_bn=True)


def predictor_forward(p: Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    return _mlp_forward(p, x, final_bn=False)


def subset(tensors: Mapping[str, torch.Tensor], prefix: str) -> "OrderedDict[str, torch.Tensor]":
    """Entries under ``prefix.`` with the prefix stripped."""
    plen = len(prefix) + 1
    out = OrderedDict((k[plen:], v) for k, v in tensors.items() if k.startswith(prefix + "."))
    if not out:
        raise KeyError(f"no tensors under prefix {prefix!r}")
    return out


def write_tensor_dir(path: Path, tensors: Mapping[str, torch.Tensor], meta: dict) -> None:
    """Write a checkpoint directory: JSON manifest plus one float32 blob per tensor."""
    path = Path(path)
    try:
        (path / "tensors").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CheckpointError(f"cannot create checkpoint directory {path}: {e}") from e
    entries = []
    for name, t in tensors.items():
        if t.dtype != torch.float32:
            raise CheckpointError(f"tensor {name!r} has dtype {t.dtype}, checkpoints hold float32 only")
        rel = f"tensors/{name}.f32"
        t.detach().cpu().numpy().astype("<f4").tofile(path / rel)
        entries.append({"name": name, "shape": list(t.shape), "file": rel})
    doc = {"format": CHECKPOINT_FORMAT, "tensors": entries, **meta}
    with open(path / "manifest.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)


def read_tensor_dir(path: Path) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise CheckpointError(f"no manifest.json under {path}")
    try:
        with open(mpath) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint manifest {mpath}: {e}") from e
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {doc.get('format')!r}")
    tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
    for entry in doc["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        fpath = path / entry["file"]
        if not fpath.is_file():
            raise CheckpointError(f"tensor blob {entry['file']} missing under {path}")
        raw = np.fromfile(fpath, dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise CheckpointError(f"tensor {name!r}: blob holds {raw.size} values, manifest says {int(np.prod(shape))}")
        tensors[name] = torch.from_numpy(raw.copy()).reshape(shape)
    return tensors, doc


def save_params(params: ParamSet, path: Path, extra: dict | None = None) -> None:
    meta = {"kind": "paramset", "arch": spec_to_dict(params.spec)}
    if extra:
        meta.update(extra)
    write_tensor_dir(path, params.tensors, meta)


def load_params(path: Path) -> ParamSet:
    tensors, doc = read_tensor_dir(path)
    if doc.get("kind") != "paramset":
        raise CheckpointError(f"checkpoint kind {doc.get('kind')!r}, expected 'paramset'")
    spec = spec_from_dict(doc["arch"])
    expected = arch_shapes(spec)
    if list(expected) != list(tensors):
        raise CheckpointError("checkpoint tensor names do not match the declared architecture")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise CheckpointError(f"tensor {name!r} has shape {tuple(tensors[name].shape)}, expected {shape}")
    return ParamSet(spec, tensors)
