"""Data model, persistence, and intensity preprocessing for slices and masks.

A slice record is stored as a raw little-endian float32 tensor file
(``<id>.mct``, channels-first) next to a JSON sidecar carrying the
dimensions and provenance. The format is intentionally dumb so round-trips
are bit-exact and testable without any imaging dependency.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptRecord,
    DegenerateStd,
    DimensionMismatch,
    InvalidGradeValue,
    IOFailure,
    UnknownVersion,
)

CHANNEL_NAMES = ("FLAIR", "T1w", "T1c", "T2w")
GRADE_VALUES = (0.0, 0.5, 0.75, 1.0)
CLIP_LO, CLIP_HI = -0.5, 5.0
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

_GRADE_PLANE = "grade_mask"
_SOURCES = ("real", "phantom", "synthesized")


@dataclass
class MCSlice:
    """Four-channel (FLAIR, T1w, T1c, T2w) float32 slice."""

    data: np.ndarray  # (4, H, W)
    normalized: bool = False

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] != len(CHANNEL_NAMES):
            raise DimensionMismatch(f"expected (4, H, W) data, got {self.data.shape}")
        if self.normalized:
            lo, hi = float(self.data.min()), float(self.data.max())
            if lo < CLIP_LO - 1e-6 or hi > CLIP_HI + 1e-6:
                raise DimensionMismatch(
                    f"normalized slice outside [{CLIP_LO}, {CLIP_HI}]: [{lo}, {hi}]"
                )

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def channel(self, name: str) -> np.ndarray:
        return self.data[CHANNEL_NAMES.index(name)]


@dataclass
class GradeMask:
    """Per-pixel tumor grade map with values in {0, 0.5, 0.75, 1.0}.

    0.5 encodes edema (ED), 0.75 enhancing tumor (ET), and 1.0 the
    necrotic / non-enhancing core (NCR/NET).
    """

    plane: np.ndarray  # (H, W)

    def __post_init__(self):
        self.plane = np.ascontiguousarray(self.plane, dtype=np.float32)
        if self.plane.ndim != 2:
            raise DimensionMismatch(f"grade mask must be 2-D, got {self.plane.shape}")
        if not np.isin(self.plane, GRADE_VALUES).all():
            bad = np.unique(self.plane[~np.isin(self.plane, GRADE_VALUES)])
            raise InvalidGradeValue(f"grade mask contains non-grade values {bad[:8]}")

    @property
    def height(self) -> int:
        return self.plane.shape[0]

    @property
    def width(self) -> int:
        return self.plane.shape[1]

    def is_empty(self) -> bool:
        return not bool((self.plane > 0).any())


@dataclass
class BinaryMask:
    """A {0, 1} float mask."""

    plane: np.ndarray  # (H, W)

    def __post_init__(self):
        self.plane = np.ascontiguousarray(self.plane, dtype=np.float32)
        if self.plane.ndim != 2:
            raise DimensionMismatch(f"binary mask must be 2-D, got {self.plane.shape}")
        if not np.isin(self.plane, (0.0, 1.0)).all():
            raise InvalidGradeValue("binary mask contains values other than {0, 1}")

    def count(self) -> int:
        return int(self.plane.sum())


@dataclass
class SliceRecord:
    """One slice plus optional ground-truth grade mask and provenance."""

    id: str
    images: MCSlice
    grade_mask: GradeMask | None = None
    source: str = "real"
    seed: int | None = None

    def __post_init__(self):
        if self.source not in _SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.grade_mask is not None:
            if (self.grade_mask.height, self.grade_mask.width) != (
                self.images.height,
                self.images.width,
            ):
                raise DimensionMismatch("grade mask and images have different sizes")


@dataclass
class DatasetManifest:
    """Index of stored records and named split assignments.

    ``paths`` are relative to the directory holding the manifest file;
    ``base_dir`` is attached on save/load and never serialized.
    """

    records: list[dict] = field(default_factory=list)  # {"id": ..., "path": ...}
    splits: dict[str, list[str]] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    base_dir: Path | None = None

    def __post_init__(self):
        ids = [r["id"] for r in self.records]
        if len(set(ids)) != len(ids):
            raise CorruptRecord("duplicate record ids in manifest")
        known = set(ids)
        seen: set[str] = set()
        for name, members in self.splits.items():
            for rid in members:
                if rid not in known:
                    raise CorruptRecord(f"split {name!r} references unknown id {rid!r}")
                if rid in seen:
                    raise CorruptRecord(f"id {rid!r} appears in more than one split")
                seen.add(rid)

    def record_ids(self) -> list[str]:
        return [r["id"] for r in self.records]

    def path_for(self, record_id: str) -> Path:
        for r in self.records:
            if r["id"] == record_id:
                if self.base_dir is None:
                    raise IOFailure("manifest has no base directory attached")
                return self.base_dir / r["path"]
        raise KeyError(record_id)

    def load_record(self, record_id: str) -> SliceRecord:
        return load_slice(self.path_for(record_id))

    def split_ids(self, name: str) -> list[str]:
        return list(self.splits.get(name, []))

    def iter_split(self, name: str):
        for rid in self.split_ids(name):
            yield self.load_record(rid)

    def iter_all(self):
        for rid in self.record_ids():
            yield self.load_record(rid)


def gaussian_normalize(image: np.ndarray) -> np.ndarray:
    """Standardize over nonzero (brain-support) pixels, then clip to [-0.5, 5].

    The same affine map applies to every pixel, so exact-zero background
    lands at clip((0 - mu) / sigma), bounded below by -0.5.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.size == 0:
        raise DegenerateStd("empty image")
    support = image[image != 0]
    if support.size == 0:
        raise DegenerateStd("image has no nonzero support")
    mu = float(support.mean())
    sigma = float(support.std())
    if sigma < 1e-8:
        raise DegenerateStd(f"support std {sigma:.3e} below 1e-8")
    out = (image - mu) / sigma
    return np.clip(out, CLIP_LO, CLIP_HI).astype(np.float32)


def normalize_slice(images: MCSlice) -> MCSlice:
    """Per-channel Gaussian normalization of a raw slice."""
    planes = np.stack([gaussian_normalize(ch) for ch in images.data])
    return MCSlice(planes, normalized=True)


def save_slice(record: SliceRecord, directory: Path | str) -> Path:
    """Write ``<id>.mct`` (raw float32 LE, channels-first) plus JSON sidecar."""
    directory = Path(directory)
    planes = [record.images.data]
    channel_names = list(CHANNEL_NAMES)
    if record.grade_mask is not None:
        planes.append(record.grade_mask.plane[None])
        channel_names.append(_GRADE_PLANE)
    tensor = np.concatenate(planes, axis=0).astype("<f4")
    meta = {
        "id": record.id,
        "height": record.images.height,
        "width": record.images.width,
        "channels": tensor.shape[0],
        "channel_names": channel_names,
        "normalized": record.images.normalized,
        "source": record.source,
        "seed": record.seed,
        "format_version": FORMAT_VERSION,
    }
    tensor_path = directory / f"{record.id}.mct"
    sidecar_path = directory / f"{record.id}.json"
    try:
        tensor_path.write_bytes(tensor.tobytes())
        sidecar_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write record {record.id!r}: {exc}") from exc
    return tensor_path


def load_slice(path: Path | str) -> SliceRecord:
    """Reconstruct a record from its tensor file (or sidecar) path."""
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix(".mct")
    sidecar = path.with_suffix(".json")
    try:
        meta = json.loads(sidecar.read_text())
        raw = path.read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read record at {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise UnknownVersion(f"unsupported format_version {meta.get('format_version')!r}")
    h, w, c = meta["height"], meta["width"], meta["channels"]
    expected = h * w * c * 4
    if len(raw) != expected:
        raise CorruptRecord(f"{path.name}: {len(raw)} bytes, expected {expected}")
    tensor = np.frombuffer(raw, dtype="<f4").reshape(c, h, w).copy()
    names = meta["channel_names"]
    image_planes = [tensor[names.index(n)] for n in CHANNEL_NAMES]
    images = MCSlice(np.stack(image_planes), normalized=meta["normalized"])
    grade = GradeMask(tensor[names.index(_GRADE_PLANE)]) if _GRADE_PLANE in names else None
    return SliceRecord(
        id=meta["id"],
        images=images,
        grade_mask=grade,
        source=meta["source"],
        seed=meta["seed"],
    )


def save_manifest(manifest: DatasetManifest, directory: Path | str) -> Path:
    directory = Path(directory)
    doc = {
        "format_version": manifest.format_version,
        "records": manifest.records,
        "splits": manifest.splits,
    }
    path = directory / MANIFEST_NAME
    try:
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write manifest: {exc}") from exc
    manifest.base_dir = directory
    return path


def load_manifest(directory: Path | str) -> DatasetManifest:
    directory = Path(directory)
    path = directory if directory.suffix == ".json" else directory / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IOFailure(f"cannot read manifest at {path}: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise UnknownVersion(f"unsupported manifest version {doc.get('format_version')!r}")
    return DatasetManifest(
        records=doc["records"],
        splits=doc["splits"],
        format_version=doc["format_version"],
        base_dir=path.parent,
    )


def write_dataset(
    records: list[SliceRecord],
    splits: dict[str, list[str]],
    directory: Path | str,
) -> DatasetManifest:
    """Store records under ``directory/records`` and write the manifest."""
    directory = Path(directory)
    rec_dir = directory / "records"
    rec_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        save_slice(rec, rec_dir)
        entries.append({"id": rec.id, "path": f"records/{rec.id}.mct"})
    manifest = DatasetManifest(records=entries, splits=splits)
    save_manifest(manifest, directory)
    return manifest
