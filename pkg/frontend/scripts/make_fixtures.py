#!/usr/bin/env python3
"""Generate shim test fixtures through the primary pipeline.

Everything goes through the public CLI so the fixtures exercise the real
producer; expected values are read back with the primary's own loader
and frozen into expected.json for cross-language spot checks.
"""

import json
import shutil
import sys
from pathlib import Path

from cellgraph import cli
from cellgraph.homogenize import read_bundle

ROOT = Path(__file__).resolve().parent.parent / ".fixtures"


def run(*argv) -> None:
    code = cli.main([str(a) for a in argv])
    if code != 0:
        sys.exit(f"pipeline command failed: {argv}")


def main() -> None:
    if ROOT.exists():
        shutil.rmtree(ROOT)
    ROOT.mkdir(parents=True)
    vols = ROOT / "vols"
    graphs = ROOT / "graphs"
    bundles = ROOT / "bundles"
    splits = ROOT / "splits"

    run("synth", "--out", vols, "--count", "10", "--layers", "2",
        "--cells-per-layer", "10,6", "--radius", "9", "--voxel-size", "1.0",
        "--seed", "4")
    run("graph", "--input", vols, "--out", graphs, "--k", "32")
    run("features", "--input", graphs, "--labels", vols, "--out", bundles,
        "--frame", "trivial", "--features", "default")
    run("split", "--input", bundles, "--out", splits, "--mode", "cv5",
        "--k-folds", "5", "--seed", "0")

    # one unlabeled bundle: point --labels at a directory with no tables
    empty = ROOT / "no-labels"
    empty.mkdir()
    run("features", "--input", graphs, "--labels", empty,
        "--out", ROOT / "bundles-unlabeled", "--frame", "trivial",
        "--features", "default")

    expected = {"bundles": {}, "split_file": str(splits / "split.csv")}
    for header in sorted(bundles.glob("*/header.txt")):
        b = read_bundle(header.parent)
        sid = b.metadata["specimen_id"]
        expected["bundles"][sid] = {
            "n_nodes": b.n_nodes,
            "n_edges": b.n_edges,
            "node_width": int(b.node_matrix.shape[1]),
            "edge_width": int(b.edge_matrix.shape[1]),
            "checksums": b.checksums(),
            "node_spot": [float(x) for x in b.node_matrix.ravel()[:8]],
            "edge_spot": [float(x) for x in b.edge_matrix.ravel()[:8]],
            "edge_index_spot": [int(x) for x in b.edge_index.ravel()[:8]],
            "labels_spot": [int(x) for x in b.labels[:8]],
        }
    (ROOT / "expected.json").write_text(json.dumps(expected, indent=1))
    print(f"fixtures ready under {ROOT}")


if __name__ == "__main__":
    main()
