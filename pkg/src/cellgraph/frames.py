"""Global (per-specimen) and local (per-cell) reference systems.

Global frames are landmark-based: an origin plus a right-handed
orthonormal basis, derived either from tissue labels or from the cell
cloud itself. Local axes capture the filar growth direction and the
stratification (surface) direction of each cell; only their orientation
is meaningful, the sign is a deterministic convention.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .graph_build import CellGraph
from .volume_io import CLASS_CODES, LabelTable

FRAME_METHODS = ("label-surf", "label-fu", "es-trivial", "es-pca", "trivial")

#: |cos| above which growth and surface axes count as parallel.
PARALLEL_COS = 0.999


class FrameError(ValueError):
    """A reference frame cannot be computed from the given inputs."""


@dataclass(frozen=True)
class ReferenceFrame:
    """Origin plus orthonormal right-handed axes (rows)."""

    origin: np.ndarray
    axes: np.ndarray

    def __post_init__(self) -> None:
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        axes = np.asarray(self.axes, dtype=float).reshape(3, 3)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "axes", axes)
        gram = axes @ axes.T
        if np.abs(gram - np.eye(3)).max() > 1e-10:
            raise FrameError("axes are not orthonormal")
        if np.linalg.det(axes) < 0:
            raise FrameError("axes are left-handed")

    def to_frame_coords(self, points: np.ndarray) -> np.ndarray:
        """World points -> coordinates in this frame."""
        return (np.asarray(points, dtype=float) - self.origin) @ self.axes.T

    def rotate_vectors(self, vectors: np.ndarray) -> np.ndarray:
        """World direction vectors -> components in this frame."""
        return np.asarray(vectors, dtype=float) @ self.axes.T


@dataclass(frozen=True)
class LocalAxes:
    """Per-node local reference system arrays (row per node).

    ``surface`` is re-orthogonalized against ``growth`` whenever both
    are nonzero and not near-parallel; ``surface_raw`` keeps the plain
    neighbor-normal average for the growth/surface angle feature.
    Zero rows mark nodes where an axis is undefined.
    """

    growth: np.ndarray        # (N, 3)
    surface: np.ndarray       # (N, 3)
    surface_raw: np.ndarray   # (N, 3)
    third: np.ndarray         # (N, 3)
    alignment: np.ndarray     # (N,) in [0, 1]
    hops: np.ndarray          # (N,) int
    third_ok: np.ndarray      # (N,) bool


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.zeros_like(v)


def hops_to_surface(g: CellGraph) -> np.ndarray:
    """Unit-weight BFS distance to the organ exterior; surface cells = 1.

    Implemented as BFS from a virtual background node attached to every
    cell that touches background.
    """
    if g.bg_nodes.size == 0:
        raise FrameError("no cell touches the background")
    hops = np.full(g.n_nodes, -1, dtype=np.int64)
    queue = deque()
    for i in g.bg_nodes:
        hops[i] = 1
        queue.append(int(i))
    while queue:
        u = queue.popleft()
        for v in g.neighbor_lists[u]:
            if hops[v] < 0:
                hops[v] = hops[u] + 1
                queue.append(int(v))
    if (hops < 0).any():
        raise FrameError("graph has nodes unreachable from the surface")
    return hops


def _tissue_com(g: CellGraph, labels: LabelTable, class_id: int, name: str) -> np.ndarray:
    """Volume-weighted center of mass of all cells with the given class."""
    members = [i for i in range(g.n_nodes) if labels.classes.get(int(g.cell_ids[i])) == class_id]
    if not members:
        raise FrameError(f"tissue {name!r} (class {class_id}) absent, required by this frame")
    w = g.volume[members]
    return (g.com[members] * w[:, None]).sum(axis=0) / w.sum()


def line_fit_direction(points: np.ndarray) -> np.ndarray:
    """First principal component of a small point set (total least squares)."""
    pts = np.asarray(points, dtype=float)
    centered = pts - pts.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] <= 1e-12:
        raise FrameError("degenerate centroid configuration (all points coincide)")
    return vt[0] / np.linalg.norm(vt[0])


def pca_axes_of_points(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(axes rows variance-descending, explained variances) of a point set."""
    pts = np.asarray(points, dtype=float)
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / pts.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    return evecs[:, order].T, evals[order]


def _label_axes(g: CellGraph, labels: LabelTable) -> np.ndarray:
    """Shared axes of the label-surf and label-fu frames."""
    names = ("l2", "l3", "l4", "es", "nu")
    cents = np.stack([_tissue_com(g, labels, CLASS_CODES[t], t) for t in names])
    axis1 = line_fit_direction(cents)
    toward_nu = cents[names.index("nu")] - cents.mean(axis=0)
    if float(axis1 @ toward_nu) < 0:
        axis1 = -axis1
    fu = _tissue_com(g, labels, CLASS_CODES["fu"], "fu")
    l1 = _tissue_com(g, labels, CLASS_CODES["l1"], "l1")
    v = fu - l1
    v_perp = v - (v @ axis1) * axis1
    norm = np.linalg.norm(v_perp)
    if norm <= 1e-12:
        raise FrameError("fu center lies on the main axis (rank < 2)")
    axis2 = v_perp / norm
    axis3 = np.cross(axis1, axis2)
    return np.stack([axis1, axis2, axis3])


def global_frame(g: CellGraph, labels: LabelTable | None, method: str) -> ReferenceFrame:
    """Landmark-based per-specimen reference frame.

    Methods: ``label-surf`` (origin at the l1 tissue COM, main axis
    through the layered-tissue centroids), ``label-fu`` (same axes,
    origin at fu), ``es-trivial`` (es COM, identity axes), ``es-pca``
    (es COM, PCA axes of all cell COMs), ``trivial`` (overall COM,
    identity axes).
    """
    if method not in FRAME_METHODS:
        raise FrameError(f"unknown frame method {method!r}, expected one of {FRAME_METHODS}")
    if method == "trivial":
        w = g.volume
        origin = (g.com * w[:, None]).sum(axis=0) / w.sum()
        return ReferenceFrame(origin, np.eye(3))
    if method in ("label-surf", "label-fu", "es-trivial", "es-pca") and labels is None:
        raise FrameError(f"frame method {method!r} requires a label table")
    if method == "es-trivial":
        return ReferenceFrame(_tissue_com(g, labels, CLASS_CODES["es"], "es"), np.eye(3))
    if method == "es-pca":
        origin = _tissue_com(g, labels, CLASS_CODES["es"], "es")
        axes, _ = pca_axes_of_points(g.com)
        for kk in range(3):
            if axes[kk, kk] < 0:
                axes[kk] = -axes[kk]
        if np.linalg.det(axes) < 0:
            axes[2] = -axes[2]
        return ReferenceFrame(origin, axes)
    axes = _label_axes(g, labels)
    if method == "label-surf":
        origin = _tissue_com(g, labels, CLASS_CODES["l1"], "l1")
    else:
        origin = _tissue_com(g, labels, CLASS_CODES["fu"], "fu")
    return ReferenceFrame(origin, axes)


def surface_axes(g: CellGraph, hops: np.ndarray) -> np.ndarray:
    """Per-node stratification direction.

    Surface cells take their background boundary normal; deeper cells
    average the boundary normals toward all strictly closer-to-surface
    neighbors (renormalized). Zero rows mark nodes with no such
    neighbor or exactly cancelling normals.
    """
    out = np.zeros((g.n_nodes, 3), dtype=float)
    acc = np.zeros((g.n_nodes, 3), dtype=float)
    cnt = np.zeros(g.n_nodes, dtype=np.int64)
    for e, (i, j) in enumerate(g.edges):
        if hops[j] < hops[i]:
            acc[i] += g.edge_direction(e, int(i))
            cnt[i] += 1
        elif hops[i] < hops[j]:
            acc[j] += g.edge_direction(e, int(j))
            cnt[j] += 1
    for i in range(g.n_nodes):
        if hops[i] == 1:
            out[i] = g.bg_normal[i]
        elif cnt[i] > 0:
            mean = acc[i] / cnt[i]
            norm = np.linalg.norm(mean)
            if norm > 1e-12:
                out[i] = mean / norm
    return out


def growth_axes(g: CellGraph, hops: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-node filar direction and its fit quality.

    For each node, over all pairs of distinct neighbors at the same hop
    level as the node itself, pick the pair whose COM offset vectors are
    most anti-parallel (minimal normalized dot product); the axis points
    to the first neighbor of the winning pair, the score maps the
    minimal cosine to [0, 1] via (1 - cos) / 2. Nodes with fewer than
    two same-hop neighbors get a zero axis and score 0.
    """
    axes = np.zeros((g.n_nodes, 3), dtype=float)
    score = np.zeros(g.n_nodes, dtype=float)
    for i in range(g.n_nodes):
        nbrs = [int(v) for v in g.neighbor_lists[i] if hops[v] == hops[i]]
        if len(nbrs) < 2:
            continue
        vecs = g.com[nbrs] - g.com[i]
        units = vecs / np.linalg.norm(vecs, axis=1)[:, None]
        cos = np.clip(units @ units.T, -1.0, 1.0)
        m = len(nbrs)
        best = 1.0
        best_j = -1
        for a in range(m):
            for b in range(a + 1, m):
                if cos[a, b] < best:
                    best = float(cos[a, b])
                    best_j = a
        if best_j < 0:
            continue
        axes[i] = units[best_j]
        score[i] = (1.0 - best) / 2.0
    return axes, score


def third_axis(growth: np.ndarray, surface: np.ndarray) -> tuple[np.ndarray, bool]:
    """Axis orthogonal to growth and surface; zero + flag when undefined.

    Undefined when either input is zero or the two are near-parallel
    (|cos| > 0.999).
    """
    gv = np.asarray(growth, dtype=float)
    sv = np.asarray(surface, dtype=float)
    gn, sn = np.linalg.norm(gv), np.linalg.norm(sv)
    if gn <= 0 or sn <= 0:
        return np.zeros(3), False
    if abs(float(gv @ sv) / (gn * sn)) > PARALLEL_COS:
        return np.zeros(3), False
    t = np.cross(gv, sv)
    return t / np.linalg.norm(t), True


def build_local_axes(g: CellGraph, hops: np.ndarray) -> LocalAxes:
    """Assemble the per-node local reference system.

    Where both growth and surface axes exist and are not near-parallel,
    the stored surface axis is Gram-Schmidt orthogonalized against the
    growth axis so the triplet is orthogonal.
    """
    growth, alignment = growth_axes(g, hops)
    raw = surface_axes(g, hops)
    surface = raw.copy()
    third = np.zeros((g.n_nodes, 3), dtype=float)
    ok = np.zeros(g.n_nodes, dtype=bool)
    for i in range(g.n_nodes):
        t, good = third_axis(growth[i], raw[i])
        if good:
            ortho = raw[i] - float(raw[i] @ growth[i]) * growth[i]
            surface[i] = _unit(ortho)
            third[i] = t
            ok[i] = True
    return LocalAxes(
        growth=growth,
        surface=surface,
        surface_raw=raw,
        third=third,
        alignment=alignment,
        hops=np.asarray(hops, dtype=np.int64),
        third_ok=ok,
    )
