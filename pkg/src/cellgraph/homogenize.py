"""Feature normalization and bundle assembly/serialization.

Incommensurable raw blocks are homogenized before concatenation:
scalar features are z-scored, angle features pass through untouched,
axis triplets go through the sign-free orientation embedding
(x, y, z) -> (x^2, y^2, z^2, xy, xz, yz), and the hops feature is
clipped (it stops being informative past three hops) then z-scored.

A serialized bundle is one directory per specimen: ``header.txt``
(metadata, manifest, checksums) plus little-endian payloads
``nodes.f32``, ``edges_index.u32``, ``edges.f32``, and optionally
``labels.u8``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import BLOCK_CATALOG, RawFeatureBlock

BUNDLE_VERSION = 1
HOPS_CAP = 3
EPS_SIGMA = 1e-8

POLICIES = ("zscore", "none", "rp2", "unit-norm", "clip-zscore", "onehot-hops")

#: Default normalization per node block; blocks absent here are opt-in.
DEFAULT_NODE_POLICY = {
    "center_of_mass": "zscore",
    "lrs_axes": "rp2",
    "lrs_grs_angles": "none",
    "growth_surface_angle": "none",
    "growth_alignment": "none",
    "lrs_lengths": "zscore",
    "pca_axes": "rp2",
    "pca_grs_angles": "none",
    "pca_explained_variance": "zscore",
    "surface_area": "zscore",
    "volume": "zscore",
    "hops_to_surface": "clip-zscore",
    "degree_centrality": "zscore",
    "cfc_centrality": "zscore",
}

#: Normalization for blocks outside the default set, when selected.
EXTRA_NODE_POLICY = {
    "com_grs_angles": "none",
    "lengths_uniform": "zscore",
    "local_degree_profile": "zscore",
}

DEFAULT_EDGE_POLICY = {
    "boundary_com": "zscore",
    "com_distance": "zscore",
    "com_grs_angles": "none",
    "lrs_projection": "none",
    "contact_area": "zscore",
}

#: Default node manifest order (width after normalization totals 70).
DEFAULT_NODE_BLOCKS = (
    "center_of_mass",
    "lrs_axes",
    "lrs_grs_angles",
    "growth_surface_angle",
    "growth_alignment",
    "lrs_lengths",
    "pca_axes",
    "pca_grs_angles",
    "pca_explained_variance",
    "surface_area",
    "volume",
    "hops_to_surface",
    "degree_centrality",
    "cfc_centrality",
)
DEFAULT_EDGE_BLOCKS = (
    "boundary_com",
    "com_distance",
    "com_grs_angles",
    "lrs_projection",
    "contact_area",
)

PAYLOAD_FILES = ("nodes.f32", "edges_index.u32", "edges.f32", "labels.u8")


class BundleError(ValueError):
    """A feature bundle is inconsistent or its container is malformed."""


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    width: int         # width after normalization
    kind: str
    normalization: str


@dataclass(frozen=True)
class FeatureBundle:
    """Assembled per-specimen feature matrices plus manifest and metadata."""

    node_matrix: np.ndarray          # (N, F) float32
    edge_index: np.ndarray           # (2, E) uint32 node indices, row0 < row1
    edge_matrix: np.ndarray          # (E, F_e) float32
    node_manifest: tuple
    edge_manifest: tuple
    metadata: dict
    labels: np.ndarray | None = None  # (N,) uint8

    def __post_init__(self) -> None:
        nm = np.ascontiguousarray(self.node_matrix, dtype="<f4")
        em = np.ascontiguousarray(self.edge_matrix, dtype="<f4")
        ei = np.ascontiguousarray(self.edge_index, dtype="<u4")
        object.__setattr__(self, "node_matrix", nm)
        object.__setattr__(self, "edge_matrix", em)
        object.__setattr__(self, "edge_index", ei)
        if self.labels is not None:
            lab = np.ascontiguousarray(self.labels, dtype=np.uint8)
            if lab.shape != (nm.shape[0],):
                raise BundleError("labels length does not match node count")
            object.__setattr__(self, "labels", lab)
        if ei.ndim != 2 or ei.shape[0] != 2:
            raise BundleError(f"edge_index must be (2, E), got {ei.shape}")
        if em.shape[0] != ei.shape[1]:
            raise BundleError("edge matrix and edge index disagree on edge count")
        if ei.size and int(ei.max()) >= nm.shape[0]:
            raise BundleError("edge index refers past the node count")
        if ei.size and not (ei[0] < ei[1]).all():
            raise BundleError("edges must be stored once with row0 < row1")
        if sum(e.width for e in self.node_manifest) != nm.shape[1]:
            raise BundleError("node manifest widths do not sum to node matrix width")
        if sum(e.width for e in self.edge_manifest) != em.shape[1]:
            raise BundleError("edge manifest widths do not sum to edge matrix width")
        for mat in (nm, em):
            if mat.size and not np.isfinite(mat).all():
                raise BundleError("bundle contains NaN or Inf")

    @property
    def n_nodes(self) -> int:
        return self.node_matrix.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_index.shape[1]

    def checksums(self) -> dict[str, str]:
        sums = {
            "nodes.f32": hashlib.sha256(self.node_matrix.tobytes()).hexdigest(),
            "edges_index.u32": hashlib.sha256(self.edge_index.tobytes()).hexdigest(),
            "edges.f32": hashlib.sha256(self.edge_matrix.tobytes()).hexdigest(),
        }
        if self.labels is not None:
            sums["labels.u8"] = hashlib.sha256(self.labels.tobytes()).hexdigest()
        return sums


def rp2_embed(v: np.ndarray) -> np.ndarray:
    """Sign-free orientation embedding (..., 3) -> (..., 6).

    Maps (x, y, z) to (x^2, y^2, z^2, xy, xz, yz); exact for sign
    flips, injective on orientations.
    """
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([x * x, y * y, z * z, x * y, x * z, y * z], axis=-1)


def zscore(column: np.ndarray, stats: tuple[float, float] | None = None) -> np.ndarray:
    """(x - mean) / max(sigma, 1e-8) per column, population sigma.

    ``stats`` overrides the per-call mean/sigma (for dataset-scope
    normalization).
    """
    col = np.asarray(column, dtype=float)
    if stats is None:
        mu = col.mean(axis=0)
        sigma = col.std(axis=0)
    else:
        mu, sigma = stats
    return (col - mu) / np.maximum(sigma, EPS_SIGMA)


def clip_hops(h: np.ndarray, cap: int = HOPS_CAP, one_hot: bool = False) -> np.ndarray:
    """Saturate hop counts at ``cap``; optionally one-hot over {1..cap}."""
    arr = np.minimum(np.asarray(h, dtype=np.int64), cap)
    if (arr < 1).any():
        raise BundleError("hops must be >= 1")
    if not one_hot:
        return arr.astype(float)
    return np.eye(cap)[arr - 1]


def unit_norm(v: np.ndarray, return_mask: bool = False):
    """Scale rows to unit norm; zero rows pass through (flagged via mask)."""
    arr = np.asarray(v, dtype=float)
    single = arr.ndim == 1
    rows = arr[None, :] if single else arr
    norms = np.linalg.norm(rows, axis=1)
    out = rows.copy()
    nz = norms > 0
    out[nz] = rows[nz] / norms[nz, None]
    if single:
        out = out[0]
        nz = nz[0]
    if return_mask:
        return out, ~np.atleast_1d(nz)
    return out


def _apply_policy(block: RawFeatureBlock, policy: str, stats=None) -> np.ndarray:
    if policy == "none":
        return block.values.copy()
    if policy == "zscore":
        return zscore(block.values, stats)
    if policy == "unit-norm":
        return unit_norm(block.values)
    if policy == "rp2":
        if block.width % 3:
            raise BundleError(f"block {block.name!r}: rp2 needs width divisible by 3")
        n = block.values.shape[0]
        triples = block.values.reshape(n, -1, 3)
        return rp2_embed(triples).reshape(n, -1)
    if policy == "clip-zscore":
        return zscore(clip_hops(block.values.reshape(-1))[:, None], stats)
    if policy == "onehot-hops":
        return clip_hops(block.values.reshape(-1), one_hot=True)
    raise BundleError(f"unknown normalization policy {policy!r}")


def assemble(
    node_blocks: list[RawFeatureBlock],
    edge_blocks: list[RawFeatureBlock],
    edge_index: np.ndarray,
    metadata: dict,
    labels: np.ndarray | None = None,
    node_policy: dict[str, str] | None = None,
    edge_policy: dict[str, str] | None = None,
    dataset_stats: dict[str, tuple] | None = None,
) -> FeatureBundle:
    """Normalize blocks and concatenate them into a FeatureBundle.

    Blocks are emitted in the given order; each must have a policy
    (defaults cover the whole catalog). ``dataset_stats`` switches the
    z-score scope from per-specimen to the provided precomputed
    (mean, sigma) per block name.
    """
    node_policy = {**DEFAULT_NODE_POLICY, **EXTRA_NODE_POLICY, **(node_policy or {})}
    edge_policy = {**DEFAULT_EDGE_POLICY, **(edge_policy or {})}
    scope = "dataset" if dataset_stats else "specimen"

    def run(blocks, policies, entity):
        cols, manifest = [], []
        for blk in blocks:
            if blk.entity != entity:
                raise BundleError(f"block {blk.name!r} has entity {blk.entity!r}, expected {entity}")
            if (entity, blk.name) not in BLOCK_CATALOG:
                raise BundleError(f"unknown block name {blk.name!r}")
            if blk.name not in policies:
                raise BundleError(f"no normalization policy for block {blk.name!r}")
            pol = policies[blk.name]
            stats = (dataset_stats or {}).get(blk.name)
            vals = _apply_policy(blk, pol, stats)
            cols.append(vals)
            manifest.append(ManifestEntry(blk.name, vals.shape[1], blk.kind, pol))
        if not cols:
            raise BundleError(f"no {entity} blocks given")
        return np.hstack(cols), tuple(manifest)

    node_matrix, node_manifest = run(node_blocks, node_policy, "node")
    edge_matrix, edge_manifest = run(edge_blocks, edge_policy, "edge")
    meta = dict(metadata)
    meta.setdefault("format_version", BUNDLE_VERSION)
    meta["norm_scope"] = scope
    return FeatureBundle(
        node_matrix=node_matrix,
        edge_index=edge_index,
        edge_matrix=edge_matrix,
        node_manifest=node_manifest,
        edge_manifest=edge_manifest,
        metadata=meta,
        labels=labels,
    )


METADATA_KEYS = ("specimen_id", "stage", "frame_method", "k_samples", "norm_scope")


def write_bundle(bundle: FeatureBundle, directory: str | Path) -> Path:
    """Serialize a bundle into ``directory`` (created if needed)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "nodes.f32").write_bytes(bundle.node_matrix.tobytes())
    (directory / "edges_index.u32").write_bytes(bundle.edge_index.tobytes())
    (directory / "edges.f32").write_bytes(bundle.edge_matrix.tobytes())
    if bundle.labels is not None:
        (directory / "labels.u8").write_bytes(bundle.labels.tobytes())
    sums = bundle.checksums()
    lines = [f"format_version={bundle.metadata.get('format_version', BUNDLE_VERSION)}"]
    for key in METADATA_KEYS:
        if key in bundle.metadata:
            lines.append(f"{key}={bundle.metadata[key]}")
    lines.append(f"n_nodes={bundle.n_nodes}")
    lines.append(f"n_edges={bundle.n_edges}")
    lines.append(f"node_width={bundle.node_matrix.shape[1]}")
    lines.append(f"edge_width={bundle.edge_matrix.shape[1]}")
    for e in bundle.node_manifest:
        lines.append(f"node_block={e.name},{e.width},{e.kind},{e.normalization}")
    for e in bundle.edge_manifest:
        lines.append(f"edge_block={e.name},{e.width},{e.kind},{e.normalization}")
    for fname, digest in sums.items():
        lines.append(f"sha256_{fname.split('.')[0]}_{fname.split('.')[1]}={digest}")
    (directory / "header.txt").write_text("\n".join(lines) + "\n")
    return directory


def _parse_manifest_line(value: str) -> ManifestEntry:
    parts = value.split(",")
    if len(parts) != 4:
        raise BundleError(f"malformed manifest entry {value!r}")
    return ManifestEntry(parts[0], int(parts[1]), parts[2], parts[3])


def read_bundle(directory: str | Path) -> FeatureBundle:
    """Load and verify a bundle directory written by :func:`write_bundle`."""
    directory = Path(directory)
    header = directory / "header.txt"
    if not header.exists():
        raise BundleError(f"missing {header}")
    fields: dict[str, str] = {}
    node_manifest, edge_manifest = [], []
    for line in header.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        key, value = line.split("=", 1)
        if key == "node_block":
            node_manifest.append(_parse_manifest_line(value))
        elif key == "edge_block":
            edge_manifest.append(_parse_manifest_line(value))
        else:
            fields[key] = value
    if int(fields.get("format_version", -1)) != BUNDLE_VERSION:
        raise BundleError(f"{header}: unknown bundle version {fields.get('format_version')}")
    n = int(fields["n_nodes"])
    e = int(fields["n_edges"])
    fw = int(fields["node_width"])
    ew = int(fields["edge_width"])

    def load(fname, dtype, size, shape):
        path = directory / fname
        if not path.exists():
            raise BundleError(f"missing payload {path}")
        raw = path.read_bytes()
        short = fname.replace(".", "_")
        digest = fields.get(f"sha256_{short}")
        if digest is None:
            raise BundleError(f"{header}: missing checksum for {fname}")
        if hashlib.sha256(raw).hexdigest() != digest:
            raise BundleError(f"{path}: checksum mismatch")
        arr = np.frombuffer(raw, dtype=dtype)
        if arr.size != size:
            raise BundleError(f"{path}: expected {size} items, found {arr.size}")
        return arr.reshape(shape)

    node_matrix = load("nodes.f32", "<f4", n * fw, (n, fw))
    edge_index = load("edges_index.u32", "<u4", 2 * e, (2, e))
    edge_matrix = load("edges.f32", "<f4", e * ew, (e, ew))
    labels = None
    if "sha256_labels_u8" in fields or (directory / "labels.u8").exists():
        labels = load("labels.u8", np.uint8, n, (n,))
    metadata = {k: fields[k] for k in METADATA_KEYS if k in fields}
    metadata["format_version"] = BUNDLE_VERSION
    if "k_samples" in metadata:
        metadata["k_samples"] = int(metadata["k_samples"])
    return FeatureBundle(
        node_matrix=node_matrix,
        edge_index=edge_index,
        edge_matrix=edge_matrix,
        node_manifest=tuple(node_manifest),
        edge_manifest=tuple(edge_manifest),
        metadata=metadata,
        labels=labels,
    )


def compute_dataset_stats(block_lists: list[list[RawFeatureBlock]]) -> dict[str, tuple]:
    """Pooled per-block (mean, sigma) across specimens for dataset scope."""
    pooled: dict[str, list[np.ndarray]] = {}
    for blocks in block_lists:
        for blk in blocks:
            vals = blk.values
            if blk.name == "hops_to_surface":
                vals = clip_hops(vals.reshape(-1))[:, None]
            pooled.setdefault(blk.name, []).append(vals)
    stats = {}
    for name, mats in pooled.items():
        allv = np.vstack(mats)
        stats[name] = (allv.mean(axis=0), allv.std(axis=0))
    return stats
