"""Node and edge feature catalog computed from graph, frame, and axes.

Every "angle" feature is a cosine (normalized dot product) in [-1, 1],
never radians. Vector features are expressed in global-frame
coordinates, so for unit axes the frame components double as the
cosines against the frame axes. Degenerate entries (zero axes, too few
samples) fall back to zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frames import LocalAxes, ReferenceFrame, pca_axes_of_points
from .graph_build import CellGraph

INVARIANT = "invariant"
COVARIANT = "covariant"

#: Canonical block vocabulary: (entity, name) -> (kind, width before normalization).
BLOCK_CATALOG = {
    ("node", "center_of_mass"): (COVARIANT, 3),
    ("node", "com_grs_angles"): (COVARIANT, 3),
    ("node", "lrs_axes"): (COVARIANT, 9),
    ("node", "lrs_grs_angles"): (INVARIANT, 9),
    ("node", "growth_surface_angle"): (INVARIANT, 1),
    ("node", "growth_alignment"): (INVARIANT, 1),
    ("node", "lrs_lengths"): (INVARIANT, 3),
    ("node", "pca_axes"): (COVARIANT, 9),
    ("node", "pca_grs_angles"): (INVARIANT, 9),
    ("node", "pca_explained_variance"): (INVARIANT, 3),
    ("node", "surface_area"): (INVARIANT, 1),
    ("node", "volume"): (INVARIANT, 1),
    ("node", "hops_to_surface"): (INVARIANT, 1),
    ("node", "degree_centrality"): (INVARIANT, 1),
    ("node", "cfc_centrality"): (INVARIANT, 1),
    ("node", "lengths_uniform"): (COVARIANT, 64),
    ("node", "local_degree_profile"): (INVARIANT, 5),
    ("edge", "boundary_com"): (INVARIANT, 3),
    ("edge", "com_distance"): (INVARIANT, 1),
    ("edge", "com_grs_angles"): (COVARIANT, 3),
    ("edge", "lrs_projection"): (INVARIANT, 3),
    ("edge", "contact_area"): (INVARIANT, 1),
}

N_UNIFORM_DIRECTIONS = 64


class FeatureError(ValueError):
    """A feature block cannot be computed from the given inputs."""


@dataclass(frozen=True)
class RawFeatureBlock:
    """Named matrix of per-node or per-edge values, pre-normalization.

    ``flags`` marks rows whose entries are documented fallbacks (zeros
    for degenerate geometry) rather than measurements.
    """

    name: str
    kind: str
    entity: str
    values: np.ndarray
    units: str = ""
    flags: np.ndarray | None = None

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2:
            raise FeatureError(f"block {self.name!r}: values must be 2D, got {vals.shape}")
        if not np.isfinite(vals).all():
            raise FeatureError(f"block {self.name!r} contains NaN or Inf")
        if (self.entity, self.name) in BLOCK_CATALOG:
            kind, width = BLOCK_CATALOG[(self.entity, self.name)]
            if kind != self.kind:
                raise FeatureError(f"block {self.name!r}: kind mismatch with catalog")
            if vals.shape[1] != width:
                raise FeatureError(
                    f"block {self.name!r}: width {vals.shape[1]} != catalog width {width}"
                )
        object.__setattr__(self, "values", vals)
        if self.flags is not None:
            flags = np.asarray(self.flags, dtype=bool).reshape(-1)
            if flags.shape[0] != vals.shape[0]:
                raise FeatureError(f"block {self.name!r}: flags length mismatch")
            object.__setattr__(self, "flags", flags)

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _safe_unit_rows(v: np.ndarray) -> np.ndarray:
    out = np.zeros_like(v, dtype=float)
    norms = np.linalg.norm(v, axis=1)
    nz = norms > 0
    out[nz] = v[nz] / norms[nz, None]
    return out


def _row_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine per row pair; zero rows give 0."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dot = np.einsum("ij,ij->i", a, b)
    out = np.zeros(len(a), dtype=float)
    nz = (na > 0) & (nb > 0)
    out[nz] = np.clip(dot[nz] / (na[nz] * nb[nz]), -1.0, 1.0)
    return out


def uniform_directions(n: int = N_UNIFORM_DIRECTIONS) -> np.ndarray:
    """Deterministic evenly spread unit directions (Fibonacci sphere)."""
    i = np.arange(n, dtype=float)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = golden * i
    return np.stack([z, r * np.sin(phi), r * np.cos(phi)], axis=1)


def node_geometry_features(
    g: CellGraph, frame: ReferenceFrame, axes: LocalAxes
) -> list[RawFeatureBlock]:
    """Morphology and orientation blocks of the node catalog."""
    n = g.n_nodes
    com_f = frame.to_frame_coords(g.com)
    growth_f = frame.rotate_vectors(axes.growth)
    surface_f = frame.rotate_vectors(axes.surface)
    third_f = frame.rotate_vectors(axes.third)
    lrs = np.hstack([growth_f, surface_f, third_f])

    gs_angle = _row_cosine(axes.growth, axes.surface_raw)[:, None]

    lengths = np.zeros((n, 3), dtype=float)
    pca_axes_f = np.zeros((n, 9), dtype=float)
    pca_var = np.zeros((n, 3), dtype=float)
    pca_degenerate = np.zeros(n, dtype=bool)
    local = (axes.growth, axes.surface, axes.third)
    lrs_degenerate = (
        (np.linalg.norm(axes.growth, axis=1) == 0)
        | (np.linalg.norm(axes.surface, axis=1) == 0)
        | (np.linalg.norm(axes.third, axis=1) == 0)
    )
    com_degenerate = np.linalg.norm(com_f, axis=1) == 0
    for i in range(n):
        pts = g.node_samples[i]
        for a in range(3):
            axis = local[a][i]
            if np.linalg.norm(axis) > 0:
                proj = pts @ axis
                lengths[i, a] = float(proj.max() - proj.min())
        if pts.shape[0] >= 4:
            pax, pvar = pca_axes_of_points(pts)
            pax = frame.rotate_vectors(pax)
            for kk in range(3):
                if pax[kk, kk] < 0:
                    pax[kk] = -pax[kk]
            pca_axes_f[i] = pax.reshape(-1)
            pca_var[i] = pvar
        else:
            pca_degenerate[i] = True

    return [
        RawFeatureBlock("center_of_mass", COVARIANT, "node", com_f, "um"),
        RawFeatureBlock("com_grs_angles", COVARIANT, "node", _safe_unit_rows(com_f),
                        "cos", flags=com_degenerate),
        RawFeatureBlock("lrs_axes", COVARIANT, "node", lrs, "unit", flags=lrs_degenerate),
        RawFeatureBlock("lrs_grs_angles", INVARIANT, "node", lrs.copy(), "cos",
                        flags=lrs_degenerate),
        RawFeatureBlock("growth_surface_angle", INVARIANT, "node", gs_angle, "cos"),
        RawFeatureBlock("growth_alignment", INVARIANT, "node", axes.alignment[:, None], ""),
        RawFeatureBlock("lrs_lengths", INVARIANT, "node", lengths, "um",
                        flags=lrs_degenerate),
        RawFeatureBlock("pca_axes", COVARIANT, "node", pca_axes_f, "unit",
                        flags=pca_degenerate),
        RawFeatureBlock("pca_grs_angles", INVARIANT, "node", pca_axes_f.copy(), "cos",
                        flags=pca_degenerate),
        RawFeatureBlock("pca_explained_variance", INVARIANT, "node", pca_var, "um^2",
                        flags=pca_degenerate),
        RawFeatureBlock("surface_area", INVARIANT, "node", g.surface_area[:, None], "um^2"),
        RawFeatureBlock("volume", INVARIANT, "node", g.volume[:, None], "um^3"),
    ]


def current_flow_closeness(g: CellGraph) -> np.ndarray:
    """Current-flow closeness centrality on the unit-weight graph.

    c(v) = (N-1) / sum_t (Lp[v,v] + Lp[t,t] - 2 Lp[v,t]) with Lp the
    pseudo-inverse of the graph Laplacian, computed here through the
    exact rank-one identity Lp = inv(L + J/N) - J/N for connected
    graphs.
    """
    n = g.n_nodes
    if n == 1:
        return np.array([1.0])
    lap = np.diag(g.degrees.astype(float))
    for i, j in g.edges:
        lap[i, j] -= 1.0
        lap[j, i] -= 1.0
    lp = np.linalg.inv(lap + 1.0 / n) - 1.0 / n
    diag = np.diag(lp)
    rowsum = lp.sum(axis=1)
    denom = n * diag + diag.sum() - 2.0 * rowsum
    return (n - 1) / denom


def node_graph_features(g: CellGraph, hops: np.ndarray) -> list[RawFeatureBlock]:
    """Topology-only node blocks: hops, degree, and current-flow closeness."""
    n = g.n_nodes
    deg = g.degrees.astype(float)
    degree_centrality = deg / (n - 1) if n > 1 else np.ones(1)
    return [
        RawFeatureBlock(
            "hops_to_surface", INVARIANT, "node", np.asarray(hops, float)[:, None], "hops"
        ),
        RawFeatureBlock("degree_centrality", INVARIANT, "node", degree_centrality[:, None], ""),
        RawFeatureBlock(
            "cfc_centrality", INVARIANT, "node", current_flow_closeness(g)[:, None], ""
        ),
    ]


def edge_features(
    g: CellGraph, frame: ReferenceFrame, axes: LocalAxes
) -> list[RawFeatureBlock]:
    """The five-block edge catalog (total width 11)."""
    e = g.n_edges
    boundary_com = np.zeros((e, 3), dtype=float)
    for idx in range(e):
        boundary_com[idx] = g.edge_samples[idx].mean(axis=0)
    boundary_com = frame.to_frame_coords(boundary_com)

    i_idx = g.edges[:, 0]
    j_idx = g.edges[:, 1]
    delta = g.com[j_idx] - g.com[i_idx]
    com_distance = np.linalg.norm(delta, axis=1)[:, None]
    com_angles = _safe_unit_rows(frame.rotate_vectors(delta))

    lrs_proj = np.zeros((e, 3), dtype=float)
    for a, axis in enumerate((axes.growth, axes.surface, axes.third)):
        lrs_proj[:, a] = np.abs(_row_cosine(axis[i_idx], axis[j_idx]))

    return [
        RawFeatureBlock("boundary_com", INVARIANT, "edge", boundary_com, "um"),
        RawFeatureBlock("com_distance", INVARIANT, "edge", com_distance, "um"),
        RawFeatureBlock("com_grs_angles", COVARIANT, "edge", com_angles, "cos"),
        RawFeatureBlock("lrs_projection", INVARIANT, "edge", lrs_proj, "cos"),
        RawFeatureBlock("contact_area", INVARIANT, "edge", g.contact_area[:, None], "um^2"),
    ]


def optional_features(g: CellGraph) -> list[RawFeatureBlock]:
    """Opt-in node blocks: uniform-direction lengths and degree profile."""
    n = g.n_nodes
    dirs = uniform_directions()
    lengths = np.zeros((n, dirs.shape[0]), dtype=float)
    for i in range(n):
        proj = g.node_samples[i] @ dirs.T
        lengths[i] = proj.max(axis=0) - proj.min(axis=0)

    deg = g.degrees.astype(float)
    profile = np.zeros((n, 5), dtype=float)
    for i in range(n):
        nd = deg[g.neighbor_lists[i]]
        profile[i] = (deg[i], nd.min(), nd.max(), nd.mean(), nd.std())
    return [
        RawFeatureBlock("lengths_uniform", COVARIANT, "node", lengths, "um"),
        RawFeatureBlock("local_degree_profile", INVARIANT, "node", profile, ""),
    ]


def compute_all_blocks(
    g: CellGraph,
    frame: ReferenceFrame,
    axes: LocalAxes,
    hops: np.ndarray,
    include_optional: bool = True,
) -> tuple[list[RawFeatureBlock], list[RawFeatureBlock]]:
    """(node blocks, edge blocks) for one specimen, in catalog order."""
    node_blocks = node_geometry_features(g, frame, axes) + node_graph_features(g, hops)
    if include_optional:
        node_blocks += optional_features(g)
    return node_blocks, edge_features(g, frame, axes)
