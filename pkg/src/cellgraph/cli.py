"""Command-line pipeline driver.

Subcommands: synth, ingest, graph, features, split, train, eval. Each
stage reads the previous stage's files, writes its outputs plus the
resolved configuration next to them, and is deterministic for fixed
inputs and seeds. Errors exit nonzero with a single ``error: ...``
line on stderr.

Options may come from a plain ``key=value`` config file (``--config``)
with command-line flags taking precedence. With ``--strict-repro`` the
reproducibility-critical flags (--seed, --frame, --features, --k-folds)
must be given explicitly.
"""

from __future__ import annotations

import argparse
import pickle
import sys
from pathlib import Path

import numpy as np

from . import baseline, evalkit, frames, homogenize, synth
from .features import compute_all_blocks
from .graph_build import build_adjacency
from .volume_io import (
    STAGES,
    LabelTable,
    labels_cover_volume,
    read_label_table,
    read_volume,
    validate_connectivity,
    write_label_table,
    write_volume,
)

FEATURE_SELECTIONS = ("all", "default", "invariant-only", "covariant-only", "degree-profile-only")
REPRO_FLAGS = ("seed", "frame", "features", "k_folds")


class CliError(ValueError):
    pass


def _read_config_file(path: str) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"config line not key=value: {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _explicit_flags(argv: list[str]) -> set[str]:
    return {
        a.split("=")[0].lstrip("-").replace("-", "_")
        for a in argv
        if a.startswith("--")
    }


def _apply_config(args: argparse.Namespace, argv: list[str]) -> None:
    """Fill defaults from the config file; explicit flags win."""
    if not getattr(args, "config", None):
        return
    file_values = _read_config_file(args.config)
    explicit = _explicit_flags(argv)
    for key, value in file_values.items():
        if not hasattr(args, key) or key in explicit:
            continue
        current = getattr(args, key)
        if isinstance(current, bool):
            setattr(args, key, value.lower() in ("1", "true", "yes"))
        elif isinstance(current, int):
            setattr(args, key, int(value))
        elif isinstance(current, float):
            setattr(args, key, float(value))
        else:
            setattr(args, key, value)


def _check_strict(args: argparse.Namespace, argv: list[str]) -> None:
    if not getattr(args, "strict_repro", False):
        return
    explicit = _explicit_flags(argv)
    for flag in REPRO_FLAGS:
        if hasattr(args, flag) and flag not in explicit:
            raise CliError(f"--strict-repro requires explicit --{flag.replace('_', '-')}")


def _write_resolved(args: argparse.Namespace, out_dir: Path, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    skip = {"func", "config"}
    lines = [f"command={command}"]
    for key in sorted(vars(args)):
        if key in skip:
            continue
        lines.append(f"{key}={getattr(args, key)}")
    (out_dir / f"{command}_config.txt").write_text("\n".join(lines) + "\n")


def _volumes_in(directory: Path) -> list[Path]:
    return sorted(directory.glob("*.hdr"))


def cmd_synth(args) -> int:
    out = Path(args.out)
    _write_resolved(args, out, "synth")
    cells = [int(c) for c in str(args.cells_per_layer).split(",")]
    if len(cells) == 1:
        cells = cells * args.layers
    stretch = tuple(float(s) for s in str(args.stretch).split(","))
    for idx in range(args.count):
        sid = f"{args.prefix}{idx:03d}"
        stage = STAGES[idx % len(STAGES)]
        if args.kind == "shell-organ":
            spec = synth.SynthSpec(
                layers=args.layers,
                cells_per_layer=tuple(cells),
                radius=args.radius,
                voxel_size=args.voxel_size,
                seed=args.seed + idx,
                stretch=stretch,
                label_style=args.label_style,
                specimen_id=sid,
                stage=stage,
            )
            vol, table, truth = synth.make_shell_organ(spec)
        else:
            rng = np.random.Generator(np.random.PCG64(args.seed + idx))
            direction = rng.normal(size=3) if args.random_direction else np.array([0.0, 0.0, 1.0])
            vol, truth = synth.make_cell_file(
                args.chain_length, direction, args.voxel_size,
                specimen_id=sid, stage=stage,
            )
            table = LabelTable({int(c): int(k) for c, k in zip(truth.cell_ids, truth.class_id)})
        write_volume(vol, out / sid)
        write_label_table(table, out / f"{sid}.labels.csv")
        synth.write_truth(truth, out / f"{sid}.truth.csv")
        print(f"synth {sid}: {len(vol.cell_ids())} cells, stage {stage}")
    return 0


def cmd_ingest(args) -> int:
    src = Path(args.input)
    out = Path(args.out)
    _write_resolved(args, out, "ingest")
    headers = _volumes_in(src)
    if not headers:
        raise CliError(f"no volumes found in {src}")
    lines = []
    ok = True
    for hdr in headers:
        vol = read_volume(hdr)
        report = validate_connectivity(vol)
        labels_path = src / f"{vol.specimen_id}.labels.csv"
        cover = True
        if labels_path.exists():
            cover, missing = labels_cover_volume(vol, read_label_table(labels_path))
        status = "pass" if (report.passed and cover) else "fail"
        ok &= status == "pass"
        lines.append(
            f"specimen={vol.specimen_id} cells={len(report.counts)} "
            f"connectivity={'pass' if report.passed else 'fail'} "
            f"labels={'pass' if cover else 'fail'} status={status}"
        )
    (out / "ingest_report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0 if ok else 1


def cmd_graph(args) -> int:
    src = Path(args.input)
    out = Path(args.out)
    _write_resolved(args, out, "graph")
    for hdr in _volumes_in(src):
        vol = read_volume(hdr)
        g = build_adjacency(vol, k=args.k)
        with open(out / f"{vol.specimen_id}.graph.pkl", "wb") as fh:
            pickle.dump({"graph": g, "stage": vol.stage}, fh, protocol=4)
        print(f"graph {vol.specimen_id}: {g.n_nodes} nodes, {g.n_edges} edges")
    return 0


def _select_blocks(blocks, selection: str):
    if selection in ("all", "default"):
        wanted = set(homogenize.DEFAULT_NODE_BLOCKS)
        return [b for b in blocks if b.name in wanted]
    if selection == "invariant-only":
        wanted = set(homogenize.DEFAULT_NODE_BLOCKS)
        return [b for b in blocks if b.name in wanted and b.kind == "invariant"]
    if selection == "covariant-only":
        wanted = set(homogenize.DEFAULT_NODE_BLOCKS)
        return [b for b in blocks if b.name in wanted and b.kind == "covariant"]
    if selection == "degree-profile-only":
        return [b for b in blocks if b.name == "local_degree_profile"]
    raise CliError(f"unknown feature selection {selection!r}")


def cmd_features(args) -> int:
    src = Path(args.input)
    out = Path(args.out)
    _write_resolved(args, out, "features")
    if args.features not in FEATURE_SELECTIONS:
        raise CliError(f"--features must be one of {FEATURE_SELECTIONS}")
    labels_dir = Path(args.labels) if args.labels else src
    graph_files = sorted(src.glob("*.graph.pkl"))
    if not graph_files:
        raise CliError(f"no graph caches found in {src}")
    for gf in graph_files:
        with open(gf, "rb") as fh:
            payload = pickle.load(fh)
        g, stage = payload["graph"], payload["stage"]
        sid = gf.name.replace(".graph.pkl", "")
        table = None
        labels_path = labels_dir / f"{sid}.labels.csv"
        if labels_path.exists():
            table = read_label_table(labels_path)
        hops = frames.hops_to_surface(g)
        frame = frames.global_frame(g, table, args.frame)
        axes = frames.build_local_axes(g, hops)
        node_blocks, edge_blocks = compute_all_blocks(g, frame, axes, hops)
        node_blocks = _select_blocks(node_blocks, args.features)
        labels_arr = None
        if table is not None:
            labels_arr = np.array(
                [table.class_of(int(c)) for c in g.cell_ids], dtype=np.uint8
            )
        bundle = homogenize.assemble(
            node_blocks,
            edge_blocks,
            g.edges.T.astype(np.uint32),
            metadata={
                "specimen_id": sid,
                "stage": stage,
                "frame_method": args.frame,
                "k_samples": g.k,
            },
            labels=labels_arr,
        )
        homogenize.write_bundle(bundle, out / sid)
        print(f"features {sid}: nodes {bundle.n_nodes} x {bundle.node_matrix.shape[1]}, "
              f"edges {bundle.n_edges} x {bundle.edge_matrix.shape[1]}")
    return 0


def _bundle_dirs(root: Path) -> list[Path]:
    return sorted(p.parent for p in root.glob("*/header.txt"))


def cmd_split(args) -> int:
    src = Path(args.input)
    out = Path(args.out)
    _write_resolved(args, out, "split")
    specimens = []
    for d in _bundle_dirs(src):
        b = homogenize.read_bundle(d)
        specimens.append((b.metadata["specimen_id"], b.metadata["stage"]))
    if not specimens:
        raise CliError(f"no bundles found in {src}")
    split = evalkit.make_splits(specimens, mode=args.mode, k=args.k_folds, seed=args.seed)
    evalkit.write_split(split, out / "split.csv")
    print(f"split {args.mode}: {len(specimens)} specimens -> {out / 'split.csv'}")
    return 0


def _load_bundles(root: Path) -> dict[str, homogenize.FeatureBundle]:
    out = {}
    for d in _bundle_dirs(root):
        b = homogenize.read_bundle(d)
        out[b.metadata["specimen_id"]] = b
    if not out:
        raise CliError(f"no bundles found in {root}")
    return out


def cmd_train(args) -> int:
    out = Path(args.out)
    _write_resolved(args, out, "train")
    bundles = _load_bundles(Path(args.input))
    split = evalkit.read_split(Path(args.split))
    if split.mode == "cv5":
        val_ids = set(split.members(args.fold))
        train_ids = set(split.assignment) - val_ids
    else:
        train_ids = set(split.members("train"))
        val_ids = set(split.members("val"))
    missing = (train_ids | val_ids) - set(bundles)
    if missing:
        raise CliError(f"bundles missing for specimens {sorted(missing)}")
    cfg = baseline.TrainConfig(
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        hidden=args.hidden,
        dropout=args.dropout,
        seed=args.seed,
        feature_noise=args.feature_noise,
        edge_dropout=args.edge_dropout,
    )
    params, history = baseline.train(
        [bundles[s] for s in sorted(train_ids)],
        [bundles[s] for s in sorted(val_ids)],
        cfg,
    )
    baseline.save_model(params, cfg, out / "model")
    lines = [
        f"epoch={h['epoch']} train_loss={h['train_loss']:.9g} "
        f"val_top1={h['val_top1']:.9g} val_class_avg={h['val_class_avg']:.9g}"
        for h in history
    ]
    (out / "history.txt").write_text("\n".join(lines) + "\n")
    best = max(h["val_class_avg"] for h in history)
    print(f"train: best val class-average {best:.4f} over {len(history)} epochs")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    _write_resolved(args, out, "eval")
    bundles = _load_bundles(Path(args.input))
    split = evalkit.read_split(Path(args.split)) if args.split else None
    preds: dict[str, np.ndarray] = {}
    if args.model:
        params, cfg = baseline.load_model(args.model)
        for sid, b in bundles.items():
            preds[sid] = baseline.predict(params, b)
    else:
        pred_dir = Path(args.preds)
        for sid, b in bundles.items():
            p = pred_dir / f"{sid}.u8"
            if not p.exists():
                raise CliError(f"missing prediction file {p}")
            preds[sid] = np.frombuffer(p.read_bytes(), dtype=np.uint8)
    truths, stages = {}, {}
    for sid, b in bundles.items():
        if b.labels is None:
            raise CliError(f"bundle {sid} has no ground-truth labels")
        truths[sid] = b.labels
        stages[sid] = b.metadata["stage"]
    report = evalkit.evaluate(preds, truths, stages, split)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.kv").write_text(report.to_kv_lines())
    print(report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellgraph",
        description="Cell adjacency graphs, features, and a GCN baseline "
                    "from labeled 3D volumes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file; flags override it")
        p.add_argument("--strict-repro", action="store_true",
                       help="require explicit --seed/--frame/--features/--k-folds")

    p = sub.add_parser("synth", help="generate synthetic specimens")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("shell-organ", "cell-file"), default="shell-organ")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--cells-per-layer", default="48")
    p.add_argument("--chain-length", type=int, default=7)
    p.add_argument("--radius", type=float, default=24.0)
    p.add_argument("--voxel-size", type=float, default=1.0)
    p.add_argument("--stretch", default="1.0,1.0,1.0")
    p.add_argument("--label-style", choices=synth.LABEL_STYLES, default="layers")
    p.add_argument("--random-direction", action="store_true")
    p.add_argument("--prefix", default="synth-")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate volumes and label tables")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("graph", help="build cell adjacency graphs")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=500, help="surface samples per node/edge")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("features", help="compute feature bundles")
    common(p)
    p.add_argument("--input", required=True, help="directory of graph caches")
    p.add_argument("--labels", help="directory of label tables (default: input)")
    p.add_argument("--out", required=True)
    p.add_argument("--frame", choices=frames.FRAME_METHODS, default="trivial")
    p.add_argument("--features", choices=FEATURE_SELECTIONS, default="default")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("split", help="generate a specimen split")
    common(p)
    p.add_argument("--input", required=True, help="directory of bundles")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=evalkit.SPLIT_MODES, default="cv5")
    p.add_argument("--k-folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the GCN baseline")
    common(p)
    p.add_argument("--input", required=True, help="directory of bundles")
    p.add_argument("--split", required=True)
    p.add_argument("--fold", type=int, default=0, help="validation fold for cv5 splits")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--feature-noise", type=float, default=0.0)
    p.add_argument("--edge-dropout", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate predictions against bundles")
    common(p)
    p.add_argument("--input", required=True, help="directory of bundles with labels")
    p.add_argument("--split")
    p.add_argument("--preds", help="directory of <specimen>.u8 prediction payloads")
    p.add_argument("--model", help="model base path; self-predict instead of --preds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config(args, argv)
        _check_strict(args, argv)
        if args.command == "eval" and not (args.preds or args.model):
            raise CliError("eval needs --preds or --model")
        return args.func(args)
    except Exception as exc:  # single-line machine-parsable error
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
