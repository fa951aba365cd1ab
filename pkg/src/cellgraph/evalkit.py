"""Node-classification metrics and specimen split generation.

Two metrics: global top-1 accuracy, and class-average accuracy (mean
over specimens of the mean per-class recall over classes present in
that specimen's ground truth, always excluding class 7). Splits are
stage-stratified, either five-fold cross-validation or a fixed
train/val/test partition, driven by a seeded PCG64 generator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume_io import ES_CLASS, N_CLASSES

SPLIT_MODES = ("cv5", "train-val-test")
PARTITIONS = ("train", "val", "test")
RNG_NAME = "pcg64"


class EvalError(ValueError):
    """Predictions, ground truth, or split inputs are inconsistent."""


def top1_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of exact matches."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 1 or pred.size == 0:
        raise EvalError(f"pred/gt shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(pred == gt))


def specimen_class_scores(
    pred: np.ndarray, gt: np.ndarray, include_true_negatives: bool = False
) -> dict[int, float]:
    """Per-class accuracy for one specimen, classes present in gt only.

    Class 7 is always excluded. Default is per-class recall; the
    alternative counts true negatives too (one-vs-all accuracy over all
    nodes).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise EvalError("pred/gt length mismatch")
    scores = {}
    for cls in np.unique(gt):
        cls = int(cls)
        if cls == ES_CLASS:
            continue
        in_class = gt == cls
        if include_true_negatives:
            correct = (pred == cls) == in_class
            scores[cls] = float(np.mean(correct))
        else:
            scores[cls] = float(np.mean(pred[in_class] == cls))
    return scores


def class_avg_accuracy(
    pairs: list[tuple[np.ndarray, np.ndarray]], include_true_negatives: bool = False
) -> float:
    """Mean over specimens of the mean per-class score present per specimen.

    Specimens whose only ground-truth class is the excluded class 7
    contribute nothing and trigger a warning.
    """
    if not pairs:
        raise EvalError("need at least one specimen")
    per_specimen = []
    for pred, gt in pairs:
        scores = specimen_class_scores(pred, gt, include_true_negatives)
        if not scores:
            warnings.warn("specimen has no scorable class (only class 7 present), skipped")
            continue
        per_specimen.append(float(np.mean(list(scores.values()))))
    if not per_specimen:
        raise EvalError("no specimen contributed a scorable class")
    return float(np.mean(per_specimen))


@dataclass(frozen=True)
class SplitSpec:
    """Stage-stratified assignment of specimens to folds or partitions."""

    mode: str
    assignment: dict[str, object]   # specimen id -> fold int (cv5) or partition name
    seed: int
    k: int
    stages: dict[str, str]          # specimen id -> stage
    rng_name: str = RNG_NAME

    def __post_init__(self) -> None:
        if self.mode not in SPLIT_MODES:
            raise EvalError(f"unknown split mode {self.mode!r}")
        if set(self.assignment) != set(self.stages):
            raise EvalError("assignment and stage table cover different specimens")

    def members(self, tag: object) -> list[str]:
        return sorted(s for s, t in self.assignment.items() if t == tag)

    def tags(self) -> list[object]:
        if self.mode == "cv5":
            return list(range(self.k))
        return list(PARTITIONS)


def make_splits(
    specimens: list[tuple[str, str]], mode: str = "cv5", k: int = 5, seed: int = 0
) -> SplitSpec:
    """Deal specimens into folds (cv5) or train/val/test, per stage.

    Within each stage (stages visited in sorted order) specimens are
    shuffled by the seeded generator. cv5 deals the concatenated stream
    round-robin with a single continuing counter, which keeps per-stage
    fold counts within one of each other and balances overall fold
    sizes. train-val-test reserves roughly 20% of each stage for val
    and test each.
    """
    if not specimens:
        raise EvalError("no specimens to split")
    if mode not in SPLIT_MODES:
        raise EvalError(f"unknown split mode {mode!r}")
    ids = [s for s, _ in specimens]
    if len(set(ids)) != len(ids):
        raise EvalError("duplicate specimen ids")
    rng = np.random.Generator(np.random.PCG64(seed))
    by_stage: dict[str, list[str]] = {}
    for sid, stage in specimens:
        by_stage.setdefault(stage, []).append(sid)

    assignment: dict[str, object] = {}
    if mode == "cv5":
        counter = 0
        for stage in sorted(by_stage):
            group = sorted(by_stage[stage])
            if len(group) < k:
                warnings.warn(
                    f"stage {stage!r} has {len(group)} specimens for {k} folds; best effort"
                )
            order = rng.permutation(len(group))
            for pos in order:
                assignment[group[pos]] = counter % k
                counter += 1
    else:
        for stage in sorted(by_stage):
            group = sorted(by_stage[stage])
            order = rng.permutation(len(group))
            shuffled = [group[p] for p in order]
            n = len(shuffled)
            n_val = int(round(0.2 * n))
            n_test = int(round(0.2 * n))
            if n >= 3:
                n_val = max(n_val, 1)
                n_test = max(n_test, 1)
            n_train = n - n_val - n_test
            for idx, sid in enumerate(shuffled):
                if idx < n_train:
                    assignment[sid] = "train"
                elif idx < n_train + n_val:
                    assignment[sid] = "val"
                else:
                    assignment[sid] = "test"
    return SplitSpec(mode=mode, assignment=assignment, seed=seed, k=k, stages=dict(specimens))


def write_split(split: SplitSpec, path: str | Path) -> Path:
    path = Path(path)
    lines = [
        f"mode={split.mode}",
        f"seed={split.seed}",
        f"k={split.k}",
        f"rng={split.rng_name}",
    ]
    for sid in sorted(split.assignment):
        lines.append(f"specimen={sid},{split.stages[sid]},{split.assignment[sid]}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_split(path: str | Path) -> SplitSpec:
    path = Path(path)
    mode, seed, k, rng_name = None, 0, 5, RNG_NAME
    assignment: dict[str, object] = {}
    stages: dict[str, str] = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        key, value = line.split("=", 1)
        if key == "mode":
            mode = value
        elif key == "seed":
            seed = int(value)
        elif key == "k":
            k = int(value)
        elif key == "rng":
            rng_name = value
        elif key == "specimen":
            sid, stage, tag = value.split(",")
            stages[sid] = stage
            assignment[sid] = tag if mode == "train-val-test" else int(tag)
    if mode is None:
        raise EvalError(f"{path}: missing mode line")
    return SplitSpec(
        mode=mode, assignment=assignment, seed=seed, k=k, stages=stages, rng_name=rng_name
    )


@dataclass
class EvalReport:
    """Per-specimen and aggregate metric report."""

    per_specimen: dict[str, dict] = field(default_factory=dict)
    mean_top1: float = 0.0
    std_top1: float = 0.0
    mean_class_avg: float = 0.0
    std_class_avg: float = 0.0
    per_class: dict[int, float] = field(default_factory=dict)
    per_stage: dict[str, float] = field(default_factory=dict)
    per_fold: dict = field(default_factory=dict)

    def to_kv_lines(self) -> str:
        lines = [
            f"mean_top1={self.mean_top1:.12g}",
            f"std_top1={self.std_top1:.12g}",
            f"mean_class_avg={self.mean_class_avg:.12g}",
            f"std_class_avg={self.std_class_avg:.12g}",
        ]
        for cls in sorted(self.per_class):
            lines.append(f"class_{cls}_accuracy={self.per_class[cls]:.12g}")
        for stage in sorted(self.per_stage):
            lines.append(f"stage_{stage}_class_avg={self.per_stage[stage]:.12g}")
        for fold in sorted(self.per_fold, key=str):
            lines.append(f"fold_{fold}_class_avg={self.per_fold[fold]:.12g}")
        for sid in sorted(self.per_specimen):
            rec = self.per_specimen[sid]
            lines.append(
                f"specimen={sid},{rec['stage']},{rec['tag']},"
                f"{rec['top1']:.12g},{rec['class_avg']:.12g}"
            )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        out = [
            f"specimens evaluated : {len(self.per_specimen)}",
            f"top-1 accuracy      : {self.mean_top1:.4f} +- {self.std_top1:.4f}",
            f"class-average acc.  : {self.mean_class_avg:.4f} +- {self.std_class_avg:.4f}",
            "per class:",
        ]
        for cls in sorted(self.per_class):
            out.append(f"  class {cls}: {self.per_class[cls]:.4f}")
        out.append("per stage:")
        for stage in sorted(self.per_stage):
            out.append(f"  {stage}: {self.per_stage[stage]:.4f}")
        return "\n".join(out) + "\n"


def evaluate(
    preds: dict[str, np.ndarray],
    truths: dict[str, np.ndarray],
    stages: dict[str, str],
    split: SplitSpec | None = None,
    include_true_negatives: bool = False,
) -> EvalReport:
    """Score predictions specimen by specimen and aggregate.

    Every specimen in ``truths`` must have a prediction of matching
    length with class ids in range. Aggregates are the mean and
    standard deviation over all evaluated specimens (pooled across
    folds when a split is given).
    """
    missing = set(truths) - set(preds)
    if missing:
        raise EvalError(f"missing predictions for specimens: {sorted(missing)}")
    report = EvalReport()
    class_pool: dict[int, list[float]] = {}
    stage_pool: dict[str, list[float]] = {}
    fold_pool: dict = {}
    top1s, cavgs = [], []
    for sid in sorted(truths):
        pred = np.asarray(preds[sid])
        gt = np.asarray(truths[sid])
        if pred.shape != gt.shape:
            raise EvalError(f"specimen {sid}: prediction length mismatch")
        if pred.size and (pred.min() < 0 or pred.max() >= N_CLASSES):
            raise EvalError(f"specimen {sid}: class id out of range")
        t1 = top1_accuracy(pred, gt)
        scores = specimen_class_scores(pred, gt, include_true_negatives)
        cavg = float(np.mean(list(scores.values()))) if scores else float("nan")
        tag = split.assignment.get(sid) if split else None
        stage = stages.get(sid, "?")
        report.per_specimen[sid] = {
            "top1": t1,
            "class_avg": cavg,
            "stage": stage,
            "tag": tag,
        }
        top1s.append(t1)
        if scores:
            cavgs.append(cavg)
            stage_pool.setdefault(stage, []).append(cavg)
            if tag is not None:
                fold_pool.setdefault(tag, []).append(cavg)
            for cls, val in scores.items():
                class_pool.setdefault(cls, []).append(val)
    report.mean_top1 = float(np.mean(top1s))
    report.std_top1 = float(np.std(top1s))
    report.mean_class_avg = float(np.mean(cavgs)) if cavgs else float("nan")
    report.std_class_avg = float(np.std(cavgs)) if cavgs else float("nan")
    report.per_class = {c: float(np.mean(v)) for c, v in class_pool.items()}
    report.per_stage = {s: float(np.mean(v)) for s, v in stage_pool.items()}
    report.per_fold = {f: float(np.mean(v)) for f, v in fold_pool.items()}
    return report
