"""Labeled 3D volume container I/O, label tables, and validation.

A volume on disk is a pair of files sharing a base name: ``<base>.hdr``
(text key=value sidecar) and ``<base>.raw`` (little-endian uint32 ids,
C order, axis 0 slowest). Label tables are two-column CSV files.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

FORMAT_VERSION = 1
BACKGROUND = 0

#: The nine developmental stage names accepted in volume headers.
STAGES = ("2-III", "2-IV", "2-V", "3-I", "3-II", "3-III", "3-IV", "3-V", "3-VI")

#: Semantic class coding. Code 7 (embryo sac) is fixed by the evaluation
#: protocol; the remaining assignments are this toolkit's convention.
CLASS_CODES = {
    "l1": 0,
    "l2": 1,
    "l3": 2,
    "l4": 3,
    "nu": 4,
    "fu": 5,
    "a-ch": 6,
    "es": 7,
    "p-ch": 8,
}
CLASS_NAMES = {v: k for k, v in CLASS_CODES.items()}
N_CLASSES = 9
ES_CLASS = CLASS_CODES["es"]

# 6-connectivity: voxels are neighbors iff they share a face.
FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


class VolumeFormatError(ValueError):
    """A volume container, header, or label table is malformed."""


@dataclass(frozen=True)
class LabeledVolume:
    """Dense 3D grid of cell instance ids with physical voxel spacing.

    ``data`` axes are ordered slowest to fastest; ``spacing`` gives the
    voxel pitch in micrometers along the same axes. Id 0 is background
    and must appear somewhere on the bounding-box boundary.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    specimen_id: str
    stage: str

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.uint32)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeFormatError(f"expected a non-empty 3D grid, got shape {data.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeFormatError(f"spacing components must be positive, got {self.spacing}")
        if self.stage not in STAGES:
            raise VolumeFormatError(f"unknown stage {self.stage!r}, expected one of {STAGES}")
        if not self._background_on_boundary():
            raise VolumeFormatError("no background voxel on the bounding-box boundary")

    def _background_on_boundary(self) -> bool:
        d = self.data
        faces = (d[0], d[-1], d[:, 0], d[:, -1], d[:, :, 0], d[:, :, -1])
        return any((f == BACKGROUND).any() for f in faces)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume(self) -> float:
        """Volume of one voxel in cubic micrometers."""
        s = self.spacing
        return s[0] * s[1] * s[2]

    def cell_ids(self) -> np.ndarray:
        """Sorted unique non-background ids present in the grid."""
        ids = np.unique(self.data)
        return ids[ids != BACKGROUND]


@dataclass(frozen=True)
class LabelTable:
    """Ground-truth map from cell id to semantic class id (0..8)."""

    classes: dict[int, int]

    def __post_init__(self) -> None:
        clean = {}
        for cid, cls in self.classes.items():
            cid, cls = int(cid), int(cls)
            if cid == BACKGROUND:
                raise VolumeFormatError("background id 0 cannot carry a class")
            if not 0 <= cls < N_CLASSES:
                raise VolumeFormatError(f"class id {cls} outside [0, {N_CLASSES - 1}]")
            clean[cid] = cls
        object.__setattr__(self, "classes", clean)

    def __len__(self) -> int:
        return len(self.classes)

    def class_of(self, cell_id: int) -> int:
        return self.classes[int(cell_id)]

    def cells_of_class(self, class_id: int) -> list[int]:
        return sorted(c for c, k in self.classes.items() if k == class_id)


@dataclass(frozen=True)
class ConnectivityReport:
    """Per-cell 6-connected component counts."""

    counts: dict[int, int]

    @property
    def passed(self) -> bool:
        return all(n == 1 for n in self.counts.values())

    def failures(self) -> dict[int, int]:
        return {cid: n for cid, n in self.counts.items() if n != 1}


def _header_payload_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix == ".hdr":
        base = p.with_suffix("")
    elif p.suffix == ".raw":
        base = p.with_suffix("")
    else:
        base = p
    return base.with_suffix(".hdr"), base.with_suffix(".raw")


def _parse_header(text: str, path: Path) -> dict[str, str]:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{path}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    return fields


def write_volume(vol: LabeledVolume, path: str | Path) -> Path:
    """Write ``<base>.hdr`` and ``<base>.raw``; returns the header path."""
    hdr_path, raw_path = _header_payload_paths(path)
    payload = np.ascontiguousarray(vol.data, dtype="<u4").tobytes()
    digest = hashlib.sha256(payload).hexdigest()
    lines = [
        f"format_version={FORMAT_VERSION}",
        "dims=" + ",".join(str(d) for d in vol.dims),
        "spacing_um=" + ",".join(repr(s) for s in vol.spacing),
        f"specimen_id={vol.specimen_id}",
        f"stage={vol.stage}",
        f"payload_sha256={digest}",
    ]
    raw_path.write_bytes(payload)
    hdr_path.write_text("\n".join(lines) + "\n")
    return hdr_path


def read_volume(path: str | Path) -> LabeledVolume:
    """Load a volume pair written by :func:`write_volume`.

    Raises :class:`VolumeFormatError` on unknown version, size mismatch
    between header and payload, checksum failure, or bad spacing.
    """
    hdr_path, raw_path = _header_payload_paths(path)
    if not hdr_path.exists():
        raise VolumeFormatError(f"missing header file {hdr_path}")
    if not raw_path.exists():
        raise VolumeFormatError(f"missing payload file {raw_path}")
    fields = _parse_header(hdr_path.read_text(), hdr_path)
    try:
        version = int(fields["format_version"])
        dims = tuple(int(d) for d in fields["dims"].split(","))
        spacing = tuple(float(s) for s in fields["spacing_um"].split(","))
        specimen_id = fields["specimen_id"]
        stage = fields["stage"]
        digest = fields["payload_sha256"]
    except KeyError as exc:
        raise VolumeFormatError(f"{hdr_path}: missing header field {exc}") from exc
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"{hdr_path}: unknown format version {version}")
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise VolumeFormatError(f"{hdr_path}: bad dims {dims}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise VolumeFormatError(f"{hdr_path}: non-positive spacing {spacing}")
    payload = raw_path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload holds {len(payload)} bytes, header declares {expected}"
        )
    if hashlib.sha256(payload).hexdigest() != digest:
        raise VolumeFormatError(f"{raw_path}: payload checksum mismatch")
    data = np.frombuffer(payload, dtype="<u4").reshape(dims)
    return LabeledVolume(data=data, spacing=spacing, specimen_id=specimen_id, stage=stage)


def write_label_table(table: LabelTable, path: str | Path) -> Path:
    path = Path(path)
    lines = ["cell_id,class_id"]
    lines += [f"{cid},{table.classes[cid]}" for cid in sorted(table.classes)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_label_table(path: str | Path) -> LabelTable:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "cell_id,class_id":
        raise VolumeFormatError(f"{path}: expected header line 'cell_id,class_id'")
    classes = {}
    for line in lines[1:]:
        line = line.strip()
        if not line:
            continue
        cid_s, cls_s = line.split(",")
        cid = int(cid_s)
        if cid in classes:
            raise VolumeFormatError(f"{path}: duplicate entry for cell {cid}")
        classes[cid] = int(cls_s)
    return LabelTable(classes)


def labels_cover_volume(vol: LabeledVolume, table: LabelTable) -> tuple[bool, set[int]]:
    """Check that every non-background cell id has a class entry.

    Returns (ok, missing ids).
    """
    missing = {int(c) for c in vol.cell_ids()} - set(table.classes)
    return not missing, missing


def merge_labels(table: LabelTable, merge_map: dict[int, int]) -> LabelTable:
    """Replace every occurrence of a key class by its value class.

    Idempotent for non-chained maps; never touches cell ids or volume
    data. Raises if the map leaves the valid class range.
    """
    for src, dst in merge_map.items():
        if not (0 <= int(src) < N_CLASSES and 0 <= int(dst) < N_CLASSES):
            raise VolumeFormatError(f"merge map entry {src}->{dst} outside [0, {N_CLASSES - 1}]")
    merged = {cid: merge_map.get(cls, cls) for cid, cls in table.classes.items()}
    return LabelTable(merged)


def validate_connectivity(vol: LabeledVolume) -> ConnectivityReport:
    """Count 6-connected components of every cell id.

    Violations are reported, not raised; overall pass iff every count
    equals one.
    """
    data = vol.data
    counts: dict[int, int] = {}
    max_id = int(data.max(initial=0))
    if max_id == 0:
        return ConnectivityReport(counts)
    if max_id <= 1_000_000:
        objects = ndimage.find_objects(data.astype(np.int64))
        for idx, sl in enumerate(objects):
            if sl is None:
                continue
            cid = idx + 1
            mask = data[sl] == cid
            _, n = ndimage.label(mask, structure=FACE_STRUCTURE)
            counts[cid] = int(n)
    else:
        # Sparse huge ids: fall back to one labeling pass per id.
        for cid in vol.cell_ids():
            _, n = ndimage.label(data == cid, structure=FACE_STRUCTURE)
            counts[int(cid)] = int(n)
    return ConnectivityReport(counts)
