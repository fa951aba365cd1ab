"""Cell adjacency graph construction and surface sampling.

Cells touch iff they share a voxel face (6-connectivity), so every
contact has a positive area. All geometry is in micrometers; voxel
centers sit at (index + 0.5) * spacing along each axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .volume_io import BACKGROUND, LabeledVolume

DEFAULT_SAMPLES = 500


class GraphBuildError(ValueError):
    """The volume cannot yield a valid cell adjacency graph."""


@dataclass(frozen=True)
class CellGraph:
    """Cell adjacency graph with per-node and per-edge geometry.

    Nodes are indexed 0..N-1 in ascending cell-id order; ``edges`` holds
    index pairs (i, j) with i < j, sorted. Boundary normals are unit
    vectors oriented from the lower-index cell toward the higher one;
    background normals point out of the cell.
    """

    cell_ids: np.ndarray           # (N,) uint32, sorted
    com: np.ndarray                # (N, 3) float64, micrometers
    volume: np.ndarray             # (N,) float64, um^3
    surface_area: np.ndarray       # (N,) float64, um^2
    node_samples: tuple            # N arrays (k_i, 3)
    edges: np.ndarray              # (E, 2) int64 node indices, i < j
    contact_area: np.ndarray       # (E,) float64, um^2
    edge_samples: tuple            # E arrays (k_e, 3)
    edge_normal: np.ndarray        # (E, 3) float64 unit vectors
    edge_degenerate: np.ndarray    # (E,) bool, normal fell back to COM axis
    bg_nodes: np.ndarray           # (B,) int64 node indices touching background
    bg_area: np.ndarray            # (N,) float64, 0 where no background contact
    bg_samples: tuple              # N arrays; empty (0, 3) where no contact
    bg_normal: np.ndarray          # (N, 3) outward unit normals, zeros where absent
    k: int                         # samples requested per entity

    @property
    def n_nodes(self) -> int:
        return len(self.cell_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def background_adjacency(self) -> frozenset:
        """Cell ids (not indices) touching the background."""
        return frozenset(int(self.cell_ids[i]) for i in self.bg_nodes)

    @cached_property
    def neighbor_lists(self) -> tuple:
        """Per-node sorted arrays of neighbor node indices."""
        grow = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges:
            grow[i].append(j)
            grow[j].append(i)
        return tuple(np.array(sorted(g), dtype=np.int64) for g in grow)

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    @cached_property
    def edge_lookup(self) -> dict:
        """(i, j) index pair (i < j) -> edge row."""
        return {(int(i), int(j)): e for e, (i, j) in enumerate(self.edges)}

    def index_of(self, cell_id: int) -> int:
        idx = int(np.searchsorted(self.cell_ids, cell_id))
        if idx >= self.n_nodes or self.cell_ids[idx] != cell_id:
            raise KeyError(f"unknown cell id {cell_id}")
        return idx

    def edge_direction(self, e: int, source: int) -> np.ndarray:
        """Edge normal oriented away from node index ``source``."""
        i, j = self.edges[e]
        if source == i:
            return self.edge_normal[e]
        if source == j:
            return -self.edge_normal[e]
        raise ValueError(f"node {source} is not an endpoint of edge {e}")


def fps_sample(points: np.ndarray, k: int) -> np.ndarray:
    """Greedy farthest-point subset of ``points``.

    The first point is the lexicographically maximal coordinate tuple;
    each following pick maximizes its distance to the chosen set. With
    k >= len(points) all points are returned, seed first and the rest
    in input order. Deterministic, no RNG.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("fps_sample needs a non-empty (M, 3) array")
    if k < 1:
        raise ValueError("k must be >= 1")
    m = pts.shape[0]
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    seed = int(order[-1])
    if k >= m:
        rest = [i for i in range(m) if i != seed]
        return pts[[seed] + rest].copy()
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed
    dist = np.linalg.norm(pts - pts[seed], axis=1)
    for t in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[t] = nxt
        np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1), out=dist)
    return pts[chosen].copy()


def boundary_normal(
    samples: np.ndarray, com_i: np.ndarray, com_j: np.ndarray
) -> tuple[np.ndarray, bool]:
    """Unit normal of a boundary patch, oriented from cell i toward cell j.

    The normal is the smallest-variance principal direction of the
    samples. Degenerate patches (fewer than 3 points, or collinear)
    fall back to the normalized COM offset and are flagged.
    """
    pts = np.asarray(samples, dtype=float)
    axis = np.asarray(com_j, dtype=float) - np.asarray(com_i, dtype=float)
    norm = np.linalg.norm(axis)
    fallback = axis / norm if norm > 0 else np.zeros(3)
    if pts.shape[0] < 3:
        return fallback, True
    centered = pts - pts.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[1] <= max(s[0] * 1e-9, 1e-12):
        return fallback, True
    n = vt[-1]
    n = n / np.linalg.norm(n)
    if float(n @ axis) < 0:
        n = -n
    return n, False


def _face_scan(vol: LabeledVolume):
    """Enumerate all voxel faces between differing ids.

    The grid is zero-padded first so cells on the array boundary count
    as touching background. Yields (ids_a, ids_b, centers_um, area_um2)
    per axis.
    """
    data = np.pad(vol.data, 1, constant_values=BACKGROUND)
    sp = np.asarray(vol.spacing, dtype=float)
    for axis in range(3):
        front = tuple(slice(None, -1) if ax == axis else slice(None) for ax in range(3))
        back = tuple(slice(1, None) if ax == axis else slice(None) for ax in range(3))
        a, b = data[front], data[back]
        mask = a != b
        if not mask.any():
            continue
        idx = np.nonzero(mask)
        centers = np.empty((idx[0].size, 3), dtype=float)
        for ax in range(3):
            coord = idx[ax].astype(float) - 1.0  # undo padding offset
            offset = 1.0 if ax == axis else 0.5
            centers[:, ax] = (coord + offset) * sp[ax]
        others = [ax for ax in range(3) if ax != axis]
        area = float(sp[others[0]] * sp[others[1]])
        yield a[mask], b[mask], centers, area


def contact_area(vol: LabeledVolume, i: int, j: int) -> float:
    """Total shared-face area between cells i and j (j may be background)."""
    if i == j:
        raise GraphBuildError("contact_area needs two distinct ids")
    present = set(int(c) for c in vol.cell_ids())
    for cid in (i, j):
        if cid != BACKGROUND and cid not in present:
            raise GraphBuildError(f"unknown cell id {cid}")
    total = 0.0
    for a, b, _, area in _face_scan(vol):
        hits = ((a == i) & (b == j)) | ((a == j) & (b == i))
        total += area * int(np.count_nonzero(hits))
    return total


def centers_of_mass(vol: LabeledVolume, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(COM in um, voxel counts) per id in ``ids`` order."""
    data = vol.data
    uniq, inverse = np.unique(data, return_inverse=True)
    inverse = inverse.ravel()
    counts = np.bincount(inverse)
    sums = np.empty((uniq.size, 3), dtype=float)
    for ax in range(3):
        shape = [1, 1, 1]
        shape[ax] = data.shape[ax]
        coord = ((np.arange(data.shape[ax], dtype=float) + 0.5) * vol.spacing[ax]).reshape(shape)
        coord = np.broadcast_to(coord, data.shape).ravel()
        sums[:, ax] = np.bincount(inverse, weights=coord)
    pos = np.searchsorted(uniq, ids)
    return sums[pos] / counts[pos, None], counts[pos]


def build_adjacency(vol: LabeledVolume, k: int = DEFAULT_SAMPLES) -> CellGraph:
    """Build the cell adjacency graph of a labeled volume.

    An edge (i, j) exists iff some voxel of i shares a face with a voxel
    of j; background contacts are recorded separately, not as edges.
    Surfaces and shared boundaries are downsampled to at most ``k``
    points by farthest-point sampling.

    Raises :class:`GraphBuildError` for volumes with fewer than two
    cells or a disconnected cell graph.
    """
    cell_ids = vol.cell_ids().astype(np.uint32)
    n = cell_ids.size
    if n < 2:
        raise GraphBuildError(f"need at least 2 cells, found {n}")

    lo_parts, hi_parts, center_parts, area_parts = [], [], [], []
    for a, b, centers, area in _face_scan(vol):
        lo_parts.append(np.minimum(a, b).astype(np.uint64))
        hi_parts.append(np.maximum(a, b).astype(np.uint64))
        center_parts.append(centers)
        area_parts.append(np.full(centers.shape[0], area))
    lo = np.concatenate(lo_parts)
    hi = np.concatenate(hi_parts)
    centers = np.concatenate(center_parts)
    areas = np.concatenate(area_parts)

    com, counts = centers_of_mass(vol, cell_ids)
    volume = counts.astype(float) * vol.voxel_volume

    # Group faces by unordered id pair.
    key = (lo << np.uint64(32)) | hi
    order = np.argsort(key, kind="stable")
    key, lo, hi = key[order], lo[order], hi[order]
    centers, areas = centers[order], areas[order]
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    ends = np.r_[starts[1:], key.size]
    pair_area = np.add.reduceat(areas, starts)

    idx_of = {int(c): i for i, c in enumerate(cell_ids)}
    surface_area = np.zeros(n, dtype=float)
    bg_area = np.zeros(n, dtype=float)
    bg_samples: list = [np.empty((0, 3))] * n
    bg_normal = np.zeros((n, 3), dtype=float)
    bg_nodes_set = []
    edge_rows, edge_area, edge_samples, edge_normals, edge_degen = [], [], [], [], []

    for g, (s, e) in enumerate(zip(starts, ends)):
        a_id, b_id = int(lo[s]), int(hi[s])
        patch = centers[s:e]
        if a_id == BACKGROUND:
            i = idx_of[b_id]
            bg_area[i] = pair_area[g]
            surface_area[i] += pair_area[g]
            sub = fps_sample(patch, k)
            outward = sub.mean(axis=0) - com[i]
            normal, _ = boundary_normal(sub, com[i], com[i] + outward)
            bg_samples[i] = sub
            bg_normal[i] = normal
            bg_nodes_set.append(i)
        else:
            i, j = idx_of[a_id], idx_of[b_id]
            surface_area[i] += pair_area[g]
            surface_area[j] += pair_area[g]
            sub = fps_sample(patch, k)
            normal, degen = boundary_normal(sub, com[i], com[j])
            edge_rows.append((i, j))
            edge_area.append(pair_area[g])
            edge_samples.append(sub)
            edge_normals.append(normal)
            edge_degen.append(degen)

    if not edge_rows:
        raise GraphBuildError("no cell-to-cell contacts found")
    edges = np.array(edge_rows, dtype=np.int64)
    eorder = np.lexsort((edges[:, 1], edges[:, 0]))
    edges = edges[eorder]
    contact = np.asarray(edge_area, dtype=float)[eorder]
    edge_samples = tuple(edge_samples[t] for t in eorder)
    edge_normal = np.stack([edge_normals[t] for t in eorder])
    edge_degenerate = np.asarray(edge_degen, dtype=bool)[eorder]

    # Per-node surface samples: every face whose either side is the cell.
    own_mask = lo != BACKGROUND
    owners = np.concatenate([lo[own_mask], hi])
    owned = np.concatenate([centers[own_mask], centers], axis=0)
    oorder = np.argsort(owners, kind="stable")
    owners, owned = owners[oorder], owned[oorder]
    ostarts = np.flatnonzero(np.r_[True, owners[1:] != owners[:-1]])
    oends = np.r_[ostarts[1:], owners.size]
    node_samples: list = [None] * n
    for s, e in zip(ostarts, oends):
        node_samples[idx_of[int(owners[s])]] = fps_sample(owned[s:e], k)

    graph = CellGraph(
        cell_ids=cell_ids,
        com=com,
        volume=volume,
        surface_area=surface_area,
        node_samples=tuple(node_samples),
        edges=edges,
        contact_area=contact,
        edge_samples=edge_samples,
        edge_normal=edge_normal,
        edge_degenerate=edge_degenerate,
        bg_nodes=np.array(sorted(bg_nodes_set), dtype=np.int64),
        bg_area=bg_area,
        bg_samples=tuple(bg_samples),
        bg_normal=bg_normal,
        k=k,
    )
    if not _is_connected(graph):
        raise GraphBuildError("cell adjacency graph is disconnected")
    return graph


def _is_connected(g: CellGraph) -> bool:
    seen = np.zeros(g.n_nodes, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        u = stack.pop()
        for v in g.neighbor_lists[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(int(v))
    return bool(seen.all())


def transform(g: CellGraph, rotation: np.ndarray, translation: np.ndarray) -> CellGraph:
    """Rigidly transform all graph geometry (points rotate and shift,
    normals only rotate). Topology, areas, and volumes are unchanged."""
    rot = np.asarray(rotation, dtype=float)
    t = np.asarray(translation, dtype=float)
    move = lambda pts: pts @ rot.T + t
    spin = lambda vecs: vecs @ rot.T
    return CellGraph(
        cell_ids=g.cell_ids,
        com=move(g.com),
        volume=g.volume,
        surface_area=g.surface_area,
        node_samples=tuple(move(s) for s in g.node_samples),
        edges=g.edges,
        contact_area=g.contact_area,
        edge_samples=tuple(move(s) for s in g.edge_samples),
        edge_normal=spin(g.edge_normal),
        edge_degenerate=g.edge_degenerate,
        bg_nodes=g.bg_nodes,
        bg_area=g.bg_area,
        bg_samples=tuple(move(s) if s.size else s for s in g.bg_samples),
        bg_normal=spin(g.bg_normal),
        k=g.k,
    )
