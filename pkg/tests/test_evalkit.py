"""Metrics and split generation."""

import numpy as np
import pytest

import cellgraph.evalkit as ek
from cellgraph.volume_io import ES_CLASS


def brute_force_metrics(pairs):
    """Oracle: per-class confusion tallies with plain dict counting."""
    specimen_scores = []
    top1_list = []
    for pred, gt in pairs:
        correct_by_class, total_by_class = {}, {}
        hits = 0
        for p, g in zip(pred.tolist(), gt.tolist()):
            total_by_class[g] = total_by_class.get(g, 0) + 1
            if p == g:
                hits += 1
                correct_by_class[g] = correct_by_class.get(g, 0) + 1
        top1_list.append(hits / len(gt))
        scores = [
            correct_by_class.get(c, 0) / total_by_class[c]
            for c in total_by_class
            if c != ES_CLASS
        ]
        if scores:
            specimen_scores.append(sum(scores) / len(scores))
    cavg = sum(specimen_scores) / len(specimen_scores) if specimen_scores else None
    return top1_list, cavg


class TestTop1:
    def test_identical(self):
        v = np.array([1, 2, 3, 7])
        assert ek.top1_accuracy(v, v) == 1.0

    def test_all_wrong(self):
        assert ek.top1_accuracy(np.array([1, 1]), np.array([2, 3])) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ek.EvalError):
            ek.top1_accuracy(np.array([1]), np.array([1, 2]))

    def test_matches_count_oracle(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 60))
            pred = rng.integers(0, 9, n)
            gt = rng.integers(0, 9, n)
            expected = sum(int(p == g) for p, g in zip(pred, gt)) / n
            assert ek.top1_accuracy(pred, gt) == pytest.approx(expected, abs=1e-15)


class TestClassAverage:
    def test_perfect(self):
        gt = np.array([0, 1, 2, 2])
        assert ek.class_avg_accuracy([(gt, gt)]) == 1.0

    def test_hand_counted_example(self):
        gt = np.array([0, 0, 1, 1])
        pred = np.array([0, 0, 1, 0])
        assert ek.class_avg_accuracy([(pred, gt)]) == pytest.approx(0.75)

    def test_absent_class_excluded(self):
        gt = np.array([0, 0])
        pred = np.array([0, 4])  # class 4 predicted but absent from gt
        assert ek.class_avg_accuracy([(pred, gt)]) == pytest.approx(0.5)

    def test_class_seven_ignored(self):
        gt = np.array([7, 7, 1, 1])
        pred = np.array([0, 0, 1, 1])  # all class-7 nodes wrong, class 1 right
        assert ek.class_avg_accuracy([(pred, gt)]) == 1.0

    def test_only_class_seven_flagged(self):
        gt = np.array([7, 7])
        pred = np.array([7, 7])
        other = (np.array([2, 2]), np.array([2, 2]))
        with pytest.warns(UserWarning, match="class 7"):
            score = ek.class_avg_accuracy([(pred, gt), other])
        assert score == 1.0
        with pytest.raises(ek.EvalError):
            with pytest.warns(UserWarning):
                ek.class_avg_accuracy([(pred, gt)])

    def test_matches_brute_force(self, rng):
        for _ in range(60):
            pairs = []
            for _ in range(int(rng.integers(1, 6))):
                n = int(rng.integers(2, 80))
                gt = rng.integers(0, 9, n)
                pred = rng.integers(0, 9, n)
                pairs.append((pred, gt))
            top1s, cavg = brute_force_metrics(pairs)
            for (pred, gt), expected in zip(pairs, top1s):
                assert ek.top1_accuracy(pred, gt) == pytest.approx(expected, abs=1e-12)
            if cavg is not None:
                assert ek.class_avg_accuracy(pairs) == pytest.approx(cavg, abs=1e-12)

    def test_relabeling_invariance(self, rng):
        perm = rng.permutation(9)
        while perm[ES_CLASS] != ES_CLASS:  # keep the excluded class fixed
            perm = rng.permutation(9)
        pairs, permuted = [], []
        for _ in range(4):
            n = int(rng.integers(5, 40))
            gt = rng.integers(0, 9, n)
            pred = rng.integers(0, 9, n)
            pairs.append((pred, gt))
            permuted.append((perm[pred], perm[gt]))
        assert ek.class_avg_accuracy(pairs) == pytest.approx(
            ek.class_avg_accuracy(permuted), abs=1e-12
        )

    def test_true_negative_variant_differs(self):
        gt = np.array([0, 0, 0, 1])
        pred = np.array([0, 0, 1, 1])
        recall = ek.class_avg_accuracy([(pred, gt)])
        tn = ek.class_avg_accuracy([(pred, gt)], include_true_negatives=True)
        assert recall == pytest.approx((2 / 3 + 1.0) / 2)
        assert tn == pytest.approx((3 / 4 + 3 / 4) / 2)

    def test_both_metrics_one_iff_perfect(self, rng):
        gt = rng.integers(0, 7, 30)
        assert ek.top1_accuracy(gt, gt) == 1.0
        assert ek.class_avg_accuracy([(gt, gt)]) == 1.0
        pred = gt.copy()
        pred[0] = (pred[0] + 1) % 7
        assert ek.top1_accuracy(pred, gt) < 1.0
        assert ek.class_avg_accuracy([(pred, gt)]) < 1.0


def specimen_pool(n_stages=9, per_stage=5):
    return [
        (f"s{st}-{i}", f"stage-{st}")
        for st in range(n_stages)
        for i in range(per_stage)
    ]


class TestSplits:
    def test_round_robin_example(self):
        specimens = [(f"s{i}", f"st{i % 5}") for i in range(10)]
        split = ek.make_splits(specimens, mode="cv5", k=5, seed=3)
        sizes = [len(split.members(f)) for f in range(5)]
        assert sizes == [2, 2, 2, 2, 2]
        for stage in {s for _, s in specimens}:
            members = [split.assignment[sid] for sid, st in specimens if st == stage]
            assert len(set(members)) == len(members)  # a stage pair never collides

    def test_partition_property(self):
        specimens = specimen_pool()
        split = ek.make_splits(specimens, seed=1)
        all_ids = {s for s, _ in specimens}
        seen = set()
        for fold in range(5):
            members = set(split.members(fold))
            assert not (members & seen)
            seen |= members
        assert seen == all_ids

    def test_deterministic(self):
        specimens = specimen_pool()
        a = ek.make_splits(specimens, seed=42)
        b = ek.make_splits(specimens, seed=42)
        assert a.assignment == b.assignment
        assert ek.make_splits(specimens, seed=43).assignment != a.assignment

    def test_per_stage_balance_over_seeds(self):
        specimens = specimen_pool(n_stages=9, per_stage=5)
        for seed in range(100):
            split = ek.make_splits(specimens, seed=seed)
            for stage in {s for _, s in specimens}:
                counts = np.zeros(5, dtype=int)
                for sid, st in specimens:
                    if st == stage:
                        counts[split.assignment[sid]] += 1
                assert counts.max() - counts.min() <= 1

    def test_uneven_stage_warns(self):
        specimens = [("a", "stage-x"), ("b", "stage-x")]
        with pytest.warns(UserWarning, match="best effort"):
            split = ek.make_splits(specimens, k=5, seed=0)
        assert len(split.assignment) == 2

    def test_train_val_test_fractions(self):
        specimens = specimen_pool(n_stages=3, per_stage=10)
        split = ek.make_splits(specimens, mode="train-val-test", seed=5)
        assert len(split.members("train")) == 18
        assert len(split.members("val")) == 6
        assert len(split.members("test")) == 6
        for stage in {s for _, s in specimens}:
            stage_ids = [sid for sid, st in specimens if st == stage]
            tags = {split.assignment[sid] for sid in stage_ids}
            assert tags == {"train", "val", "test"}

    def test_split_round_trip(self, tmp_path):
        specimens = specimen_pool(n_stages=4, per_stage=5)
        for mode in ("cv5", "train-val-test"):
            split = ek.make_splits(specimens, mode=mode, seed=9)
            path = ek.write_split(split, tmp_path / f"{mode}.csv")
            back = ek.read_split(path)
            assert back.mode == split.mode
            assert back.assignment == split.assignment
            assert back.stages == split.stages
            assert back.seed == split.seed

    def test_empty_input(self):
        with pytest.raises(ek.EvalError):
            ek.make_splits([])


class TestEvaluate:
    def make_world(self, rng, n_specimens=6):
        truths, preds, stages = {}, {}, {}
        for i in range(n_specimens):
            n = int(rng.integers(10, 30))
            gt = rng.integers(0, 9, n)
            truths[f"s{i}"] = gt
            preds[f"s{i}"] = gt.copy()
            stages[f"s{i}"] = f"stage-{i % 3}"
        return preds, truths, stages

    def test_perfect_everywhere(self, rng):
        preds, truths, stages = self.make_world(rng)
        report = ek.evaluate(preds, truths, stages)
        assert report.mean_top1 == 1.0 and report.std_top1 == 0.0
        assert report.mean_class_avg == 1.0 and report.std_class_avg == 0.0
        assert all(v == 1.0 for v in report.per_class.values())

    def test_single_specimen_aggregate(self, rng):
        gt = rng.integers(0, 7, 25)
        pred = gt.copy()
        pred[:5] = (pred[:5] + 1) % 7
        report = ek.evaluate({"s": pred}, {"s": gt}, {"s": "stage-0"})
        assert report.mean_top1 == pytest.approx(ek.top1_accuracy(pred, gt))
        assert report.mean_class_avg == pytest.approx(
            ek.class_avg_accuracy([(pred, gt)])
        )
        assert report.std_top1 == 0.0

    def test_aggregate_matches_recomputation(self, rng):
        preds, truths, stages = self.make_world(rng)
        for sid in preds:
            flip = rng.random(len(preds[sid])) < 0.3
            preds[sid] = np.where(flip, rng.integers(0, 9, len(preds[sid])), preds[sid])
        report = ek.evaluate(preds, truths, stages)
        top1s = [ek.top1_accuracy(preds[s], truths[s]) for s in sorted(truths)]
        assert report.mean_top1 == pytest.approx(np.mean(top1s), abs=1e-12)
        assert report.std_top1 == pytest.approx(np.std(top1s), abs=1e-12)
        cavgs = [
            np.mean(list(ek.specimen_class_scores(preds[s], truths[s]).values()))
            for s in sorted(truths)
        ]
        assert report.mean_class_avg == pytest.approx(np.mean(cavgs), abs=1e-12)

    def test_missing_specimen_rejected(self, rng):
        preds, truths, stages = self.make_world(rng)
        preds.pop("s0")
        with pytest.raises(ek.EvalError, match="missing"):
            ek.evaluate(preds, truths, stages)

    def test_out_of_range_class_rejected(self, rng):
        preds, truths, stages = self.make_world(rng, 1)
        preds["s0"] = preds["s0"].copy()
        preds["s0"][0] = 9
        with pytest.raises(ek.EvalError, match="range"):
            ek.evaluate(preds, truths, stages)

    def test_report_lines(self, rng):
        preds, truths, stages = self.make_world(rng, 3)
        split = ek.make_splits(
            [(s, stages[s]) for s in truths], mode="cv5", k=3, seed=0
        )
        report = ek.evaluate(preds, truths, stages, split)
        kv = report.to_kv_lines()
        assert "mean_top1=1" in kv
        assert "specimen=s0" in kv
        text = report.to_text()
        assert "class-average" in text
