"""Storm-event archives: modality schema, synthetic generator, raw-binary storage, HDF5 ingestion.

An archive is a directory holding one flat little-endian float32 file per event
plus a ``manifest.json`` describing schema, shapes, optional split labels and
generator settings.  Events are (frames, channels, height, width) tensors.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

MANIFEST_NAME = "manifest.json"
ARCHIVE_FORMAT = "stormmeta-archive-v1"


class ArchiveError(Exception):
    """Archive directory unreadable, unwritable or malformed."""


class ArchiveIntegrityError(ArchiveError):
    """Manifest and on-disk payload disagree for a specific event."""

    def __init__(self, event_id: str, message: str):
        super().__init__(f"event {event_id!r}: {message}")
        self.event_id = event_id


class SchemaError(ArchiveError):
    """Source data does not match the modality schema."""


@dataclass(frozen=True)
class ModalitySchema:
    """Channel layout of an event tensor and the input/target contract."""

    names: tuple[str, ...] = ("ir069", "ir107", "lightning", "vil")
    input_indices: tuple[int, ...] = (0, 1, 2)
    target_index: int = 3
    value_range: tuple[tuple[float, float], ...] = (
        (-80.0, 40.0),
        (-80.0, 40.0),
        (0.0, 255.0),
        (0.0, 255.0),
    )

    def __post_init__(self):
        n = len(self.names)
        if len(self.value_range) != n:
            raise ValueError("value_range must give one (lo, hi) pair per channel")
        used = set(self.input_indices) | {self.target_index}
        if used != set(range(n)) or len(self.input_indices) != n - 1:
            raise ValueError("input_indices and target_index must be disjoint and cover all channels")
        for lo, hi in self.value_range:
            if not lo < hi:
                raise ValueError("each value_range pair must satisfy lo < hi")

    @property
    def n_channels(self) -> int:
        return len(self.names)

    @property
    def target_name(self) -> str:
        return self.names[self.target_index]

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "input_indices": list(self.input_indices),
            "target_index": self.target_index,
            "value_range": [list(p) for p in self.value_range],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModalitySchema":
        return cls(
            names=tuple(d["names"]),
            input_indices=tuple(d["input_indices"]),
            target_index=int(d["target_index"]),
            value_range=tuple((float(lo), float(hi)) for lo, hi in d["value_range"]),
        )


@dataclass
class EventTensor:
    """One storm event: float32 array (frames, channels, height, width)."""

    event_id: str
    data: np.ndarray
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"event {self.event_id!r}: expected 4-d data, got shape {self.data.shape}")
        if self.timestamps is None:
            self.timestamps = np.arange(self.data.shape[0], dtype=np.int64)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def validate(self, schema: ModalitySchema) -> None:
        if self.data.shape[1] != schema.n_channels:
            raise SchemaError(
                f"event {self.event_id!r}: {self.data.shape[1]} channels, schema expects {schema.n_channels}"
            )
        if not np.isfinite(self.data).all():
            raise ValueError(f"event {self.event_id!r}: non-finite values")


def synth_event(
    seed: int,
    n_frames: int = 49,
    resolution: int = 64,
    n_cells: int = 3,
) -> EventTensor:
    """Generate one synthetic storm event, a pure function of its arguments.

    Anisotropic Gaussian convective cells advect across a toroidal domain with
    slow growth or decay.  Infrared channels are inverted, smoothed copies of
    vil with channel-specific offsets over a static cloud background; lightning
    is sparse thresholded noise confined to high-vil cores.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    if n_cells < 0:
        raise ValueError("n_cells must be >= 0")

    rng = np.random.default_rng(seed)
    R, F = resolution, n_frames
    span = max(F - 1, 1)

    cells = []
    for _ in range(n_cells):
        cx, cy = rng.uniform(0.0, R, size=2)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        # Total advection is a fixed fraction of the domain so the first and
        # last frames never re-align through the periodic boundary.
        travel = rng.uniform(0.25, 0.45) * R
        vx, vy = travel / span * np.cos(ang), travel / span * np.sin(ang)
        amp = rng.uniform(140.0, 260.0)
        sx = rng.uniform(R / 16.0, R / 6.0)
        sy = sx * rng.uniform(0.45, 0.95)
        phi = rng.uniform(0.0, np.pi)
        growth = rng.uniform(-0.4, 0.4) / span
        cells.append((cx, cy, vx, vy, amp, sx, sy, phi, growth))

    bg069 = gaussian_filter(rng.standard_normal((R, R)), sigma=R / 8.0, mode="wrap") * 12.0
    bg107 = gaussian_filter(rng.standard_normal((R, R)), sigma=R / 8.0, mode="wrap") * 12.0
    flash_u = rng.random((F, R, R))
    flash_n = rng.integers(1, 4, size=(F, R, R))

    yy, xx = np.meshgrid(np.arange(R, dtype=np.float64), np.arange(R, dtype=np.float64), indexing="ij")
    data = np.zeros((F, 4, R, R), dtype=np.float32)

    for t in range(F):
        vil = np.zeros((R, R), dtype=np.float64)
        for cx, cy, vx, vy, amp, sx, sy, phi, growth in cells:
            dx = xx - (cx + vx * t)
            dy = yy - (cy + vy * t)
            dx = (dx + R / 2.0) % R - R / 2.0
            dy = (dy + R / 2.0) % R - R / 2.0
            c, s = np.cos(phi), np.sin(phi)
            u = c * dx + s * dy
            v = -s * dx + c * dy
            amp_t = amp * np.clip(1.0 + growth * t, 0.2, 1.8)
            vil += amp_t * np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
        vil = np.clip(vil, 0.0, 255.0)
        smooth = gaussian_filter(vil, sigma=R / 32.0, mode="wrap")
        ir069 = np.clip(8.0 - 0.30 * smooth + bg069, -80.0, 40.0)
        ir107 = np.clip(16.0 - 0.26 * smooth + bg107, -80.0, 40.0)
        lightning = np.where((vil > 110.0) & (flash_u[t] < 0.06), flash_n[t], 0)
        data[t, 0] = ir069
        data[t, 1] = ir107
        data[t, 2] = lightning
        data[t, 3] = vil

    return EventTensor(event_id=f"synth{seed:08d}", data=data)


@dataclass
class EventEntry:
    event_id: str
    path: str
    shape: tuple[int, int, int, int]
    dtype: str = "float32"

    def to_dict(self) -> dict:
        return {"event_id": self.event_id, "path": self.path, "shape": list(self.shape), "dtype": self.dtype}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EventEntry":
        return cls(event_id=d["event_id"], path=d["path"], shape=tuple(d["shape"]), dtype=d["dtype"])


@dataclass
class ArchiveManifest:
    schema: ModalitySchema
    events: list[EventEntry]
    split_labels: dict[str, str] | None = None
    generator: dict | None = None
    root: Path | None = field(default=None, repr=False)

    @property
    def event_ids(self) -> list[str]:
        return [e.event_id for e in self.events]

    def to_dict(self) -> dict:
        return {
            "format": ARCHIVE_FORMAT,
            "schema": self.schema.to_dict(),
            "events": [e.to_dict() for e in self.events],
            "split_labels": self.split_labels,
            "generator": self.generator,
        }

    def split_ids(self, part: str) -> list[str]:
        """Event ids labelled with split part ``train``, ``val`` or ``test``."""
        if self.split_labels is None:
            raise ArchiveError("manifest has no split labels; run the split step first")
        return [e.event_id for e in self.events if self.split_labels.get(e.event_id) == part]


def write_manifest(manifest: ArchiveManifest, path: Path) -> None:
    path = Path(path)
    try:
        with open(path / MANIFEST_NAME, "w") as f:
            json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
    except OSError as e:
        raise ArchiveError(f"cannot write manifest under {path}: {e}") from e
    manifest.root = path


def write_archive(
    events: Iterable[EventTensor],
    schema: ModalitySchema,
    path: Path,
    split_labels: dict[str, str] | None = None,
    generator: dict | None = None,
) -> ArchiveManifest:
    """Write events to ``path`` as raw little-endian float32 files plus a manifest."""
    events = list(events)
    if not events:
        raise ValueError("refusing to write an empty archive")
    path = Path(path)
    try:
        (path / "events").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArchiveError(f"cannot create archive directory {path}: {e}") from e

    entries = []
    seen = set()
    for ev in events:
        ev.validate(schema)
        if ev.event_id in seen:
            raise ValueError(f"duplicate event id {ev.event_id!r}")
        seen.add(ev.event_id)
        rel = f"events/{ev.event_id}.f32"
        try:
            ev.data.astype("<f4").tofile(path / rel)
        except OSError as e:
            raise ArchiveError(f"cannot write {path / rel}: {e}") from e
        entries.append(EventEntry(event_id=ev.event_id, path=rel, shape=ev.data.shape))

    manifest = ArchiveManifest(schema=schema, events=entries, split_labels=split_labels, generator=generator)
    write_manifest(manifest, path)
    return manifest


class EventStore:
    """Lazy reader over an archive directory; events load on first access."""

    def __init__(self, root: Path, manifest: ArchiveManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._entries = {e.event_id: e for e in manifest.events}

    @property
    def ids(self) -> list[str]:
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def load(self, event_id: str) -> EventTensor:
        if event_id not in self._entries:
            raise KeyError(event_id)
        entry = self._entries[event_id]
        raw = np.fromfile(self.root / entry.path, dtype="<f4")
        if raw.size != int(np.prod(entry.shape)):
            raise ArchiveIntegrityError(event_id, f"expected {int(np.prod(entry.shape))} values, file holds {raw.size}")
        return EventTensor(event_id=event_id, data=raw.reshape(entry.shape))


def read_archive(path: Path) -> tuple[ArchiveManifest, EventStore]:
    """Open an archive, checking manifest shape and per-event file sizes."""
    path = Path(path)
    mpath = path / MANIFEST_NAME
    if not mpath.is_file():
        raise ArchiveError(f"no {MANIFEST_NAME} under {path}")
    try:
        with open(mpath) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ArchiveError(f"unreadable manifest {mpath}: {e}") from e
    if doc.get("format") != ARCHIVE_FORMAT:
        raise ArchiveError(f"unsupported archive format {doc.get('format')!r}")

    try:
        manifest = ArchiveManifest(
            schema=ModalitySchema.from_dict(doc["schema"]),
            events=[EventEntry.from_dict(d) for d in doc["events"]],
            split_labels=doc.get("split_labels"),
            generator=doc.get("generator"),
            root=path,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ArchiveError(f"malformed manifest {mpath}: {e}") from e

    seen = set()
    for entry in manifest.events:
        if entry.event_id in seen:
            raise ArchiveError(f"duplicate event id {entry.event_id!r} in manifest")
        seen.add(entry.event_id)
        if entry.dtype != "float32":
            raise ArchiveIntegrityError(entry.event_id, f"unsupported dtype {entry.dtype!r}")
        fpath = path / entry.path
        if not fpath.is_file():
            raise ArchiveIntegrityError(entry.event_id, f"payload file {entry.path} missing")
        expected = int(np.prod(entry.shape)) * 4
        actual = fpath.stat().st_size
        if actual != expected:
            raise ArchiveIntegrityError(entry.event_id, f"payload is {actual} bytes, manifest implies {expected}")
    return manifest, EventStore(path, manifest)


def _resample_indices(n_source: int, n_out: int) -> np.ndarray:
    if n_source == 1:
        return np.zeros(n_out, dtype=np.int64)
    return np.rint(np.linspace(0.0, n_source - 1, n_out)).astype(np.int64)


def _upsample_bilinear(frames: np.ndarray, height: int, width: int) -> np.ndarray:
    import torch
    import torch.nn.functional as tf

    x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32)).unsqueeze(1)
    y = tf.interpolate(x, size=(height, width), mode="bilinear", align_corners=False)
    return y.squeeze(1).numpy()


def ingest_sevir(
    catalog_csv: Path,
    out_path: Path,
    event_limit: int,
    n_frames: int = 49,
    schema: ModalitySchema = ModalitySchema(),
) -> ArchiveManifest:
    """Convert a SEVIR-style catalog plus HDF5 payloads into an archive.

    Expected layout: a CSV catalog with columns ``id``, ``file_name``,
    ``img_type`` and ``file_index``; raster types (``ir069``, ``ir107``,
    ``vil``) stored as ``(n_events, height, width, n_frames)`` datasets named
    by type, lightning (``lght``) as one ``(n_flashes, >=3)`` dataset per event
    id with columns (minutes from event start, x, y) on the vil grid. ``vis``
    rows are ignored.  Raster time axes are resampled to ``n_frames`` by
    nearest index, infrared is upsampled bilinearly to the vil grid and
    lightning is binned into per-frame flash-count images.
    """
    import h5py

    if event_limit <= 0:
        raise ValueError("event_limit must be >= 1")
    catalog_csv = Path(catalog_csv)
    base = catalog_csv.parent

    try:
        with open(catalog_csv, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise ArchiveError(f"cannot read catalog {catalog_csv}: {e}") from e

    by_event: dict[str, dict[str, tuple[str, int]]] = {}
    for row in rows:
        try:
            eid, fname, itype = row["id"], row["file_name"], row["img_type"]
            findex = int(row.get("file_index") or 0)
        except (KeyError, ValueError) as e:
            raise SchemaError(f"malformed catalog row {row!r}: {e}") from e
        if itype == "vis":
            continue
        by_event.setdefault(eid, {})[itype] = (fname, findex)

    taken = list(by_event)[:event_limit]
    events = []
    for eid in taken:
        mods = by_event[eid]
        for required in ("ir069", "ir107", "vil", "lght"):
            if required not in mods:
                raise SchemaError(f"event {eid!r}: catalog lacks modality {required!r}")

        def read_raster(itype: str) -> np.ndarray:
            fname, findex = mods[itype]
            try:
                with h5py.File(base / fname, "r") as h5:
                    arr = np.asarray(h5[itype][findex], dtype=np.float32)
            except (OSError, KeyError, IndexError) as e:
                raise ArchiveError(f"event {eid!r}: cannot read {itype} from {fname}: {e}") from e
            if arr.ndim != 3:
                raise SchemaError(f"event {eid!r}: raster {itype} has shape {arr.shape}, expected (H, W, T)")
            return np.moveaxis(arr, -1, 0)

        vil = read_raster("vil")
        ir069 = read_raster("ir069")
        ir107 = read_raster("ir107")
        H, W = vil.shape[1:]

        vil = vil[_resample_indices(vil.shape[0], n_frames)]
        ir069 = _upsample_bilinear(ir069[_resample_indices(ir069.shape[0], n_frames)], H, W)
        ir107 = _upsample_bilinear(ir107[_resample_indices(ir107.shape[0], n_frames)], H, W)

        fname, _ = mods["lght"]
        try:
            with h5py.File(base / fname, "r") as h5:
                flashes = np.asarray(h5[eid], dtype=np.float64)
        except (OSError, KeyError) as e:
            raise ArchiveError(f"event {eid!r}: cannot read lght from {fname}: {e}") from e
        if flashes.size and flashes.shape[1] < 3:
            raise SchemaError(f"event {eid!r}: lght table needs >= 3 columns, has {flashes.shape[1]}")

        lightning = np.zeros((n_frames, H, W), dtype=np.float32)
        if flashes.size:
            minutes_per_frame = 240.0 / n_frames
            fidx = np.clip((flashes[:, 0] // minutes_per_frame).astype(np.int64), 0, n_frames - 1)
            xs = np.clip(flashes[:, 1].astype(np.int64), 0, W - 1)
            ys = np.clip(flashes[:, 2].astype(np.int64), 0, H - 1)
            np.add.at(lightning, (fidx, ys, xs), 1.0)

        stack = {"ir069": ir069, "ir107": ir107, "lightning": lightning, "vil": vil}
        try:
            data = np.stack([stack[name] for name in schema.names], axis=1)
        except KeyError as e:
            raise SchemaError(f"schema channel {e} not produced by ingestion") from e
        events.append(EventTensor(event_id=eid, data=data))

    if not events:
        raise ArchiveError("catalog yielded no ingestible events")
    return write_archive(events, schema, out_path, generator={"source": "sevir", "catalog": str(catalog_csv)})


def synth_archive(
    n_events: int,
    seed: int,
    out_path: Path,
    n_frames: int = 49,
    resolution: int = 64,
    n_cells: int = 3,
    schema: ModalitySchema = ModalitySchema(),
) -> ArchiveManifest:
    """Generate ``n_events`` synthetic events with derived per-event seeds and archive them."""
    if n_events < 1:
        raise ValueError("n_events must be >= 1")
    seeds = np.random.SeedSequence([int(seed), 0x5EED]).generate_state(n_events)
    events = []
    for i, s in enumerate(seeds):
        ev = synth_event(int(s), n_frames=n_frames, resolution=resolution, n_cells=n_cells)
        ev.event_id = f"ev{i:05d}"
        events.append(ev)
    gen = {
        "source": "synth",
        "seed": int(seed),
        "n_events": n_events,
        "n_frames": n_frames,
        "resolution": resolution,
        "n_cells": n_cells,
    }
    return write_archive(events, schema, out_path, generator=gen)
