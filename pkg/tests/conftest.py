"""Shared fixtures: toy graphs, random graphs, and session-scoped organs."""

from __future__ import annotations

import numpy as np
import pytest

from cellgraph.graph_build import CellGraph
from cellgraph.synth import SynthSpec, make_shell_organ, random_rotation
import cellgraph as cg


def unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def toy_graph(
    coms,
    edges,
    bg_nodes=(),
    volumes=None,
    edge_normals=None,
    bg_normals=None,
    node_samples=None,
    k=8,
) -> CellGraph:
    """Hand-built CellGraph for unit tests; geometry defaults are benign.

    Edge normals default to the normalized COM offset (low -> high id);
    node samples default to a small tetrahedron around each COM so PCA
    and length features stay well defined.
    """
    com = np.asarray(coms, dtype=float)
    n = com.shape[0]
    edge_arr = np.asarray(
        sorted(tuple(sorted(map(int, e))) for e in edges), dtype=np.int64
    ).reshape(-1, 2)
    e = edge_arr.shape[0]
    if volumes is None:
        volumes = np.ones(n)
    if edge_normals is None:
        edge_normals = np.stack(
            [unit(com[j] - com[i]) for i, j in edge_arr]
        ) if e else np.zeros((0, 3))
    tetra = np.array(
        [[0.5, 0.0, 0.0], [-0.5, 0.3, 0.0], [0.0, -0.3, 0.4], [0.0, 0.1, -0.4]]
    )
    if node_samples is None:
        node_samples = tuple(com[i] + tetra for i in range(n))
    else:
        node_samples = tuple(np.asarray(s, dtype=float) for s in node_samples)
    edge_samples = tuple(
        (com[i] + com[j]) / 2 + tetra for i, j in edge_arr
    ) if e else ()
    bg_nodes = np.asarray(sorted(int(b) for b in bg_nodes), dtype=np.int64)
    bg_area = np.zeros(n)
    bg_area[bg_nodes] = 1.0
    if bg_normals is None:
        bg_normal = np.zeros((n, 3))
        for b in bg_nodes:
            d = unit(com[b] - com.mean(axis=0))
            bg_normal[b] = d if np.linalg.norm(d) > 0 else np.array([1.0, 0.0, 0.0])
    else:
        bg_normal = np.asarray(bg_normals, dtype=float)
    bg_samples = tuple(
        com[i] + tetra if i in set(bg_nodes.tolist()) else np.empty((0, 3))
        for i in range(n)
    )
    return CellGraph(
        cell_ids=np.arange(1, n + 1, dtype=np.uint32),
        com=com,
        volume=np.asarray(volumes, dtype=float),
        surface_area=np.ones(n),
        node_samples=node_samples,
        edges=edge_arr,
        contact_area=np.ones(e),
        edge_samples=edge_samples,
        edge_normal=np.asarray(edge_normals, dtype=float).reshape(e, 3),
        edge_degenerate=np.zeros(e, dtype=bool),
        bg_nodes=bg_nodes,
        bg_area=bg_area,
        bg_samples=bg_samples,
        bg_normal=bg_normal,
        k=k,
    )


def random_connected_edges(rng: np.random.Generator, n: int, extra: int = 0):
    """Random spanning tree plus ``extra`` additional edges."""
    edges = set()
    order = rng.permutation(n)
    for idx in range(1, n):
        a = int(order[idx])
        b = int(order[rng.integers(0, idx)])
        edges.add((min(a, b), max(a, b)))
    tries = 0
    while len(edges) < n - 1 + extra and tries < 10 * (extra + 1):
        a, b = rng.integers(0, n, size=2)
        tries += 1
        if a != b:
            edges.add((min(int(a), int(b)), max(int(a), int(b))))
    return sorted(edges)


def random_toy_graph(rng: np.random.Generator, n: int, extra: int = 0, n_bg: int = 1):
    coms = rng.normal(size=(n, 3)) * 5.0
    edges = random_connected_edges(rng, n, extra)
    bg = rng.choice(n, size=max(1, n_bg), replace=False)
    return toy_graph(coms, edges, bg_nodes=bg)


@pytest.fixture(scope="session")
def small_shell():
    """2-layer shell organ with truth; fast enough for most tests."""
    spec = SynthSpec(
        layers=2, cells_per_layer=(14, 8), radius=12.0, voxel_size=1.0, seed=7,
        specimen_id="shell-s", stage="2-IV",
    )
    vol, table, truth = make_shell_organ(spec)
    g = cg.build_adjacency(vol, k=64)
    return {"spec": spec, "vol": vol, "table": table, "truth": truth, "graph": g}


@pytest.fixture(scope="session")
def oracle_shell():
    """3-layer organ at oracle scale (>= 150 cells, default sampling)."""
    spec = SynthSpec(
        layers=3, cells_per_layer=(110, 70, 24), radius=30.0, voxel_size=1.0, seed=2,
        specimen_id="shell-oracle", stage="3-V",
    )
    vol, table, truth = make_shell_organ(spec)
    g = cg.build_adjacency(vol)  # default k = 500
    return {"spec": spec, "vol": vol, "table": table, "truth": truth, "graph": g}


@pytest.fixture(scope="session")
def band_shell():
    """3-layer stretched organ with tissue-band labels (frame tests)."""
    spec = SynthSpec(
        layers=3, cells_per_layer=(48, 32, 20), radius=21.0, voxel_size=1.0, seed=11,
        stretch=(1.0, 0.85, 0.7), label_style="tissue-bands",
        specimen_id="shell-bands", stage="3-II",
    )
    vol, table, truth = make_shell_organ(spec)
    g = cg.build_adjacency(vol, k=64)
    return {"spec": spec, "vol": vol, "table": table, "truth": truth, "graph": g}


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.PCG64(12345))


def rigid_pair(rng: np.random.Generator):
    return random_rotation(rng), rng.normal(size=3) * 10.0
