"""Synthetic organs with analytic ground truth.

Two generators: ``make_shell_organ`` builds concentric spherical (or
stretched ellipsoidal) cell layers around a solid core, each layer
partitioned into cells by angular Voronoi regions of low-discrepancy
seed directions; ``make_cell_file`` builds a straight file of identical
boxes. Both are deterministic given (spec, seed) and their outputs
always pass volume validation.

Layer index 1 is the outermost layer; by construction it equals the
hop count to the organ surface. Cell assignment within a layer depends
only on the angular direction from the organ center, so every cell
spans the full radial thickness of its layer and touches the layer
above it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .graph_build import centers_of_mass
from .volume_io import CLASS_CODES, FACE_STRUCTURE, LabelTable, LabeledVolume

MIN_VOXELS_PER_CELL_DIAMETER = 3
LABEL_STYLES = ("layers", "tissue-bands")

#: tissue-band classes from the south cap upward (see _tissue_band_labels)
_BAND_CLASSES = ("nu", "es", "l4", "l3", "l2", "l1")


class SynthError(ValueError):
    """The requested synthetic specimen cannot be generated."""


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic shell organ."""

    layers: int
    cells_per_layer: tuple
    radius: float            # um
    voxel_size: float        # um, isotropic
    seed: int = 0
    stretch: tuple = (1.0, 1.0, 1.0)
    label_style: str = "layers"
    specimen_id: str = "synth-000"
    stage: str = "3-IV"

    def __post_init__(self) -> None:
        cpl = self.cells_per_layer
        if isinstance(cpl, int):
            cpl = (cpl,) * self.layers
        object.__setattr__(self, "cells_per_layer", tuple(int(c) for c in cpl))
        object.__setattr__(self, "stretch", tuple(float(s) for s in self.stretch))
        if self.layers < 1:
            raise SynthError("need at least one layer")
        if len(self.cells_per_layer) != self.layers:
            raise SynthError("cells_per_layer length must equal layer count")
        if any(c < 1 for c in self.cells_per_layer):
            raise SynthError("each layer needs at least one cell")
        if self.label_style not in LABEL_STYLES:
            raise SynthError(f"unknown label style {self.label_style!r}")
        if min(self.stretch) <= 0 or max(self.stretch) > 1.0:
            raise SynthError("stretch components must lie in (0, 1]")
        thickness = self.radius / self.layers
        if thickness * min(self.stretch) < MIN_VOXELS_PER_CELL_DIAMETER * self.voxel_size:
            raise SynthError(
                "resolution too coarse: layer thickness must span at least "
                f"{MIN_VOXELS_PER_CELL_DIAMETER} voxels"
            )


@dataclass(frozen=True)
class SynthTruth:
    """Analytic per-cell ground truth of a generated specimen."""

    cell_ids: np.ndarray        # (M,)
    layer: np.ndarray           # (M,) 1 = outermost
    class_id: np.ndarray        # (M,)
    radial: np.ndarray          # (M, 3) outward unit vectors (zeros for files)
    center: np.ndarray          # (3,) um
    file_direction: np.ndarray | None = None

    def layer_of(self, cell_id: int) -> int:
        pos = int(np.flatnonzero(self.cell_ids == cell_id)[0])
        return int(self.layer[pos])


def sphere_directions(n: int) -> np.ndarray:
    """n low-discrepancy unit directions (Fibonacci spiral)."""
    i = np.arange(n, dtype=float)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([z, r * np.sin(golden * i), r * np.cos(golden * i)], axis=1)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly random rotation matrix (QR of a Gaussian matrix)."""
    m = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def _repair_connectivity(data: np.ndarray, layer_of_id: dict[int, int]) -> np.ndarray:
    """Merge stray fragments into face-adjacent cells, same layer first.

    Voxelization of angular Voronoi regions can pinch off small
    fragments; each fragment keeps geometry sane by joining the
    neighbor cell it shares the most faces with.
    """
    data = data.copy()
    for _ in range(20):
        dirty = False
        objects = ndimage.find_objects(data.astype(np.int64))
        for idx, sl in enumerate(objects):
            if sl is None:
                continue
            cid = idx + 1
            mask = data[sl] == cid
            comp, n = ndimage.label(mask, structure=FACE_STRUCTURE)
            if n <= 1:
                continue
            dirty = True
            sizes = ndimage.sum_labels(np.ones_like(comp), comp, index=range(1, n + 1))
            keep = int(np.argmax(sizes)) + 1
            sub = data[sl]
            for frag in range(1, n + 1):
                if frag == keep:
                    continue
                frag_mask = comp == frag
                votes: dict[int, int] = {}
                grown = ndimage.binary_dilation(frag_mask, structure=FACE_STRUCTURE)
                ring = grown & ~frag_mask
                for neighbor in np.unique(sub[ring]):
                    neighbor = int(neighbor)
                    if neighbor in (0, cid):
                        continue
                    votes[neighbor] = int(np.count_nonzero(ring & (sub == neighbor)))
                if not votes:
                    raise SynthError(f"cell {cid}: isolated fragment with no cell neighbor")
                same_layer = {
                    t: v for t, v in votes.items()
                    if layer_of_id.get(t) == layer_of_id.get(cid)
                }
                pool = same_layer or votes
                target = max(sorted(pool), key=lambda t: pool[t])
                sub[frag_mask] = target
        if not dirty:
            return data
    raise SynthError("connectivity repair did not converge; resolution too coarse")


def _tissue_band_labels(directions: np.ndarray) -> np.ndarray:
    """Class per cell from its COM direction: six polar bands plus an
    off-axis fu wedge in the south cap (remainder p-ch)."""
    cos_pole = directions[:, 0]
    out = np.empty(len(directions), dtype=np.int64)
    north = cos_pole >= -0.4
    bins = np.clip(((cos_pole + 0.4) / (1.4 / 6)).astype(int), 0, 5)
    for b, name in enumerate(_BAND_CLASSES):
        sel = north & (bins == b)
        out[sel] = CLASS_CODES[name]
    south = ~north
    phi = np.arctan2(directions[:, 1], directions[:, 2])
    out[south & (phi >= 0)] = CLASS_CODES["fu"]
    out[south & (phi < 0)] = CLASS_CODES["p-ch"]
    return out


def make_shell_organ(spec: SynthSpec) -> tuple[LabeledVolume, LabelTable, SynthTruth]:
    """Concentric-shell organ with per-layer angular Voronoi cells.

    Labels are the layer index (``layers`` style) or a geometric tissue
    partition that supports every label-based frame (``tissue-bands``).
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    v = spec.voxel_size
    radius = spec.radius
    n_layers = spec.layers
    thickness = radius / n_layers
    margin = 2
    half = int(np.ceil(radius / v)) + margin
    dims = (2 * half, 2 * half, 2 * half)
    center = np.array(dims, dtype=float) * v / 2.0
    stretch = np.asarray(spec.stretch, dtype=float)

    coords = [np.arange(d, dtype=float) * v + v / 2.0 for d in dims]
    grid = np.stack(np.meshgrid(*coords, indexing="ij"), axis=-1) - center
    q = grid / stretch
    r = np.linalg.norm(q, axis=-1)

    inside = r < radius
    layer = np.zeros(dims, dtype=np.int64)
    layer[inside] = np.minimum(n_layers, ((radius - r[inside]) / thickness).astype(int) + 1)

    data = np.zeros(dims, dtype=np.uint32)
    layer_of_id: dict[int, int] = {}
    base = 1
    for ell in range(1, n_layers + 1):
        m = spec.cells_per_layer[ell - 1]
        seeds = sphere_directions(m) @ random_rotation(rng).T
        sel = layer == ell
        pts = q[sel]
        norms = np.linalg.norm(pts, axis=1)
        dirs = np.where(norms[:, None] > 0, pts / np.maximum(norms, 1e-30)[:, None], 0.0)
        which = np.argmax(dirs @ seeds.T, axis=1)
        data[sel] = base + which
        for t in range(m):
            layer_of_id[base + t] = ell
        base += m

    data = _repair_connectivity(data, layer_of_id)
    vol = LabeledVolume(
        data=data, spacing=(v, v, v), specimen_id=spec.specimen_id, stage=spec.stage
    )

    cell_ids = vol.cell_ids()
    coms, _ = centers_of_mass(vol, cell_ids)
    offset = (coms - center) / stretch
    radial = offset / stretch
    radial /= np.linalg.norm(radial, axis=1)[:, None]
    layers_arr = np.array([layer_of_id[int(c)] for c in cell_ids], dtype=np.int64)

    if spec.label_style == "layers":
        class_id = layers_arr.copy()
    else:
        unit_dirs = offset / np.linalg.norm(offset, axis=1)[:, None]
        class_id = _tissue_band_labels(unit_dirs)

    table = LabelTable({int(c): int(k) for c, k in zip(cell_ids, class_id)})
    truth = SynthTruth(
        cell_ids=cell_ids.astype(np.int64),
        layer=layers_arr,
        class_id=class_id.astype(np.int64),
        radial=radial,
        center=center,
    )
    return vol, table, truth


def make_cell_file(
    n: int,
    direction: np.ndarray,
    voxel_size: float,
    box_voxels: int = 4,
    specimen_id: str = "file-000",
    stage: str = "2-III",
) -> tuple[LabeledVolume, SynthTruth]:
    """Straight file of ``n`` identical boxes stacked along ``direction``.

    The direction is quantized to an integer voxel step; the achieved
    unit step is reported as the truth file direction. Cell COMs form
    an exact arithmetic progression, so interior growth axes align with
    the file direction exactly.
    """
    if n < 3:
        raise SynthError("a cell file needs at least 3 cells")
    d = np.asarray(direction, dtype=float)
    if np.linalg.norm(d) <= 0:
        raise SynthError("direction must be nonzero")
    primary = int(np.argmax(np.abs(d)))
    step = np.zeros(3, dtype=np.int64)
    step[primary] = box_voxels if d[primary] >= 0 else -box_voxels
    for ax in range(3):
        if ax == primary:
            continue
        off = int(round(box_voxels * d[ax] / abs(d[primary])))
        step[ax] = int(np.clip(off, -(box_voxels - 1), box_voxels - 1))

    starts = np.array([k * step for k in range(n)], dtype=np.int64)
    starts -= starts.min(axis=0)
    starts += 1  # background margin
    dims = tuple(int(starts[:, ax].max() + box_voxels + 1) for ax in range(3))
    data = np.zeros(dims, dtype=np.uint32)
    for k in range(n):
        s = starts[k]
        region = tuple(slice(int(s[ax]), int(s[ax]) + box_voxels) for ax in range(3))
        data[region] = k + 1

    vol = LabeledVolume(
        data=data,
        spacing=(voxel_size, voxel_size, voxel_size),
        specimen_id=specimen_id,
        stage=stage,
    )
    step_um = step.astype(float) * voxel_size
    file_dir = step_um / np.linalg.norm(step_um)
    ids = np.arange(1, n + 1, dtype=np.int64)
    truth = SynthTruth(
        cell_ids=ids,
        layer=np.ones(n, dtype=np.int64),
        class_id=np.ones(n, dtype=np.int64),
        radial=np.zeros((n, 3)),
        center=np.array(dims, dtype=float) * voxel_size / 2.0,
        file_direction=file_dir,
    )
    return vol, truth


def write_truth(truth: SynthTruth, path: str | Path) -> Path:
    path = Path(path)
    lines = ["cell_id,layer,class_id,r0,r1,r2"]
    for i, cid in enumerate(truth.cell_ids):
        r = [repr(float(x)) for x in truth.radial[i]]
        lines.append(
            f"{int(cid)},{int(truth.layer[i])},{int(truth.class_id[i])},"
            f"{r[0]},{r[1]},{r[2]}"
        )
    lines.append("center=" + ",".join(repr(float(x)) for x in truth.center))
    if truth.file_direction is not None:
        lines.append("file_direction=" + ",".join(repr(float(x)) for x in truth.file_direction))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_truth(path: str | Path) -> SynthTruth:
    path = Path(path)
    rows, center, file_dir = [], None, None
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "cell_id,layer,class_id,r0,r1,r2":
        raise SynthError(f"{path}: unexpected truth header")
    for line in lines[1:]:
        line = line.strip()
        if not line:
            continue
        if line.startswith("center="):
            center = np.array([float(x) for x in line.split("=", 1)[1].split(",")])
        elif line.startswith("file_direction="):
            file_dir = np.array([float(x) for x in line.split("=", 1)[1].split(",")])
        else:
            parts = line.split(",")
            rows.append(
                (int(parts[0]), int(parts[1]), int(parts[2]),
                 float(parts[3]), float(parts[4]), float(parts[5]))
            )
    arr = np.array(rows, dtype=float)
    return SynthTruth(
        cell_ids=arr[:, 0].astype(np.int64),
        layer=arr[:, 1].astype(np.int64),
        class_id=arr[:, 2].astype(np.int64),
        radial=arr[:, 3:6],
        center=center if center is not None else np.zeros(3),
        file_direction=file_dir,
    )
