#!/usr/bin/env python3
"""
Tests for ReID, pose, segmentation and attribute metrics against brute-force oracles
"""

import shutil
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from mtl_config import AttributeSchema, AttributeSpec, EvaluationError, LabelError, market_attribute_schema
from person_datasets import MPII_JOINT_NAMES, JointSet
from person_metrics import (MetricReport, RetrievalSet, SegmentationConfusion, attribute_eval, average_precision,
                            load_report, pckh, pckh_by_part, reid_eval, seg_eval)


def reid_oracle(retrieval: RetrievalSet, ranks=(1, 5, 10)):
    """Filter, sort by (distance, gallery index) and walk every ranked list by hand"""
    ap_values, hits = [], [0] * len(ranks)
    for q in range(len(retrieval.query_ids)):
        ranked = []
        for g in range(len(retrieval.gallery_ids)):
            gid, gcam = retrieval.gallery_ids[g], retrieval.gallery_cams[g]
            if gid == -1 or (gid == retrieval.query_ids[q] and gcam == retrieval.query_cams[q]):
                continue
            distance = np.sqrt(np.sum((retrieval.query_embeddings[q] - retrieval.gallery_embeddings[g]) ** 2))
            ranked.append((distance, g, gid == retrieval.query_ids[q]))
        ranked.sort(key=lambda item: (item[0], item[1]))
        matches = [match for _, _, match in ranked]
        if not any(matches):
            continue
        found, precisions = 0, []
        for position, match in enumerate(matches, start=1):
            if match:
                found += 1
                precisions.append(found / position)
        ap_values.append(sum(precisions) / len(precisions))
        first = matches.index(True) + 1
        for i, k in enumerate(ranks):
            hits[i] += int(first <= k)
    if not ap_values:
        return None
    result = {"mAP": sum(ap_values) / len(ap_values)}
    for i, k in enumerate(ranks):
        result[f"cmc@{k}"] = hits[i] / len(ap_values)
    return result


class TestReIDMetrics:

    def test_sole_match_ranked_first(self):
        retrieval = RetrievalSet([[0.0]], [1], [0], [[0.1], [5.0], [9.0]], [1, 2, 3], [1, 1, 1])
        result = reid_eval(retrieval)
        assert result["mAP"] == 1.0 and result["cmc@1"] == 1.0

    def test_average_precision_ranks_one_and_three(self):
        value = average_precision(np.array([True, False, True, False, False]))
        assert abs(value - (1 / 1 + 2 / 3) / 2) < 1e-12

    def test_matches_oracle_on_random_sets(self):
        rng = np.random.default_rng(0)
        for trial in range(200):
            num_query, num_gallery = int(rng.integers(1, 21)), int(rng.integers(1, 101))
            dim = int(rng.integers(1, 5))
            retrieval = RetrievalSet(rng.normal(size=(num_query, dim)), rng.integers(1, 6, size=num_query),
                                     rng.integers(0, 3, size=num_query), rng.normal(size=(num_gallery, dim)),
                                     rng.integers(-1, 6, size=num_gallery), rng.integers(0, 3, size=num_gallery))
            expected = reid_oracle(retrieval)
            if expected is None:
                with pytest.raises(EvaluationError):
                    reid_eval(retrieval)
                continue
            result = reid_eval(retrieval)
            for key, value in expected.items():
                assert abs(result[key] - value) <= 1e-9, f"trial {trial}: {key} {result[key]} vs {value}"

    def test_same_camera_match_is_filtered(self):
        retrieval = RetrievalSet([[0.0]], [1], [0], [[0.0], [1.0], [2.0]], [1, 2, 1], [0, 0, 1])
        result = reid_eval(retrieval)
        assert result["cmc@1"] == 0.0 and abs(result["mAP"] - 0.5) < 1e-12

    def test_no_valid_query_is_an_error(self):
        retrieval = RetrievalSet([[0.0]], [1], [0], [[1.0]], [2], [1])
        with pytest.raises(EvaluationError):
            reid_eval(retrieval)

    def test_leave_one_out(self):
        embeddings = np.array([[0.0], [0.1], [5.0], [5.1]])
        ids, cams = np.array([1, 1, 2, 2]), np.array([7, 7, 7, 7])
        retrieval = RetrievalSet(embeddings, ids, cams, embeddings, ids, np.array([0, 1, 2, 3]))
        result = reid_eval(retrieval, exclude_self=True)
        assert result["cmc@1"] == 1.0 and result["num_queries"] == 4

    def _random_set(self, rng, num_query=12, num_gallery=40):
        # every query identity also appears under another camera
        query_ids = rng.integers(1, 6, size=num_query)
        gallery_ids = np.concatenate([query_ids, rng.integers(1, 6, size=num_gallery - num_query)])
        return RetrievalSet(rng.normal(size=(num_query, 3)), query_ids, np.zeros(num_query, dtype=int),
                            rng.normal(size=(num_gallery, 3)), gallery_ids, np.ones(num_gallery, dtype=int))

    def test_increasing_distance_transform_keeps_scores(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            retrieval = self._random_set(rng)
            distances = retrieval.distances()
            plain = reid_eval(retrieval)
            for transformed in (distances ** 2, np.log1p(distances) + 3.0 * distances):
                result = reid_eval(retrieval, distances=transformed)
                for key in ("mAP", "cmc@1", "cmc@5", "cmc@10"):
                    assert result[key] == plain[key], f"{key} changed under a monotone transform"

    def test_cmc_is_cumulative(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            retrieval = self._random_set(rng)
            gallery_size = len(retrieval.gallery_ids)
            result = reid_eval(retrieval, ranks=range(1, gallery_size + 1))
            curve = [result[f"cmc@{k}"] for k in range(1, gallery_size + 1)]
            assert all(a <= b for a, b in zip(curve, curve[1:])), "CMC must not decrease with k"
            assert curve[-1] == 1.0


class TestPCKh:

    def test_perfect(self):
        joints = [JointSet(np.random.default_rng(0).normal(size=(16, 2)), np.ones(16), 10.0) for _ in range(3)]
        result = pckh([j.coords for j in joints], joints)
        assert result["avg"] == 1.0 and all(v == 1.0 for v in result["per_joint"])

    def test_half_head_size_threshold(self):
        gt = [JointSet([[0.0, 0.0], [0.0, 0.0]], [1, 1], 20.0)]
        result = pckh(np.array([[[9.0, 0.0], [11.0, 0.0]]]), gt)
        assert result["per_joint"] == [1.0, 0.0]

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        gt = rng.uniform(0, 50, size=(12, 6, 2))
        pred = gt + rng.normal(scale=4, size=gt.shape)
        visible = rng.random((12, 6)) > 0.3
        visible[:, 5] = False
        heads = rng.uniform(5, 15, size=12)
        result = pckh(pred, gt, visible=visible, head_sizes=heads)
        correct_total = visible_total = 0
        for j in range(6):
            correct = sum(1 for n in range(12) if visible[n, j] and
                          np.hypot(*(pred[n, j] - gt[n, j])) <= 0.5 * heads[n])
            count = int(visible[:, j].sum())
            correct_total += correct
            visible_total += count
            assert result["per_joint"][j] == (correct / count if count else None)
        assert abs(result["avg"] - correct_total / visible_total) < 1e-12

    def test_joint_order_does_not_matter(self):
        rng = np.random.default_rng(5)
        gt = rng.uniform(0, 50, size=(10, 8, 2))
        pred = gt + rng.normal(scale=5, size=gt.shape)
        visible = rng.random((10, 8)) > 0.2
        heads = rng.uniform(5, 15, size=10)
        order = rng.permutation(8)
        plain = pckh(pred, gt, visible=visible, head_sizes=heads)
        permuted = pckh(pred[:, order], gt[:, order], visible=visible[:, order], head_sizes=heads)
        assert permuted["avg"] == plain["avg"]
        assert permuted["per_joint"] == [plain["per_joint"][j] for j in order]

    def test_grouped_by_part(self):
        visible = np.ones((1, 16), dtype=bool)
        gt = np.zeros((1, 16, 2))
        pred = gt.copy()
        pred[0, MPII_JOINT_NAMES.index("l_wrist")] = (100.0, 0.0)
        result = pckh(pred, gt, visible=visible, head_sizes=np.array([10.0]))
        parts = pckh_by_part(result, MPII_JOINT_NAMES)
        assert parts["wrist"] == 0.5 and parts["head"] == 1.0 and len(parts) == 7


class TestSegmentationMetrics:

    def test_identical_masks(self):
        mask = np.random.default_rng(0).integers(0, 4, size=(8, 8))
        result = seg_eval(mask, mask, 4)
        assert result["overall_acc"] == 1.0 and result["mean_acc"] == 1.0 and result["mIoU"] == 1.0

    def test_two_by_two_example(self):
        result = seg_eval(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 2)
        assert result["per_class_iou"] == [0.5, 2 / 3]
        assert abs(result["mIoU"] - 7 / 12) < 1e-12
        assert result["overall_acc"] == 0.75 and result["mean_acc"] == 0.75

    def test_matches_confusion_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            classes = int(rng.integers(2, 6))
            gts = [rng.integers(0, classes, size=(int(rng.integers(1, 17)),) * 2) for _ in range(3)]
            preds = [rng.integers(0, classes, size=g.shape) for g in gts]
            gts[0][0, 0] = 255
            matrix = np.zeros((classes, classes))
            for g, p in zip(gts, preds):
                for a, b in zip(g.ravel(), p.ravel()):
                    if a != 255:
                        matrix[a, b] += 1
            result = seg_eval(preds, gts, classes)
            ious = []
            for c in range(classes):
                union = matrix[c].sum() + matrix[:, c].sum() - matrix[c, c]
                if union > 0:
                    ious.append(matrix[c, c] / union)
            accs = [matrix[c, c] / matrix[c].sum() for c in range(classes) if matrix[c].sum() > 0]
            assert abs(result["mIoU"] - np.mean(ious)) <= 1e-9
            assert abs(result["mean_acc"] - np.mean(accs)) <= 1e-9
            assert abs(result["overall_acc"] - np.trace(matrix) / matrix.sum()) <= 1e-9

    def test_miou_symmetric_in_prediction_and_truth(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            classes = int(rng.integers(2, 6))
            first = rng.integers(0, classes, size=(12, 12))
            second = rng.integers(0, classes, size=(12, 12))
            forward, backward = seg_eval(first, second, classes), seg_eval(second, first, classes)
            assert forward["mIoU"] == backward["mIoU"]
            assert forward["per_class_iou"] == backward["per_class_iou"]

    def test_absent_class_left_out(self):
        result = seg_eval(np.array([[0, 1]]), np.array([[0, 1]]), 3)
        assert result["per_class_iou"][2] is None and result["mIoU"] == 1.0

    def test_out_of_range_labels(self):
        with pytest.raises(LabelError):
            SegmentationConfusion(2).update(np.array([[0, 3]]), np.array([[0, 1]]))


class TestAttributeMetrics:

    def setup_method(self):
        self.schema = AttributeSchema([AttributeSpec("a", 2), AttributeSpec("b", 3)])

    def test_perfect(self):
        labels = {"a": np.array([0, 1, 1]), "b": np.array([2, 0, 1])}
        result = attribute_eval(labels, labels, self.schema)
        assert result["avg"] == 1.0 and set(result["per_attribute"].values()) == {1.0}

    def test_unweighted_mean(self):
        truth = {"a": np.array([1, 1, 1, 1, 1]), "b": np.array([0, 0, 0, 0, 0])}
        predicted = {"a": np.array([1, 1, 1, 1, 0]), "b": np.array([0, 0, 0, 1, 2])}
        result = attribute_eval(predicted, truth, self.schema)
        assert abs(result["avg"] - 0.7) < 1e-12

    def test_scores_and_missing_labels(self):
        scores = {"a": np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])}
        result = attribute_eval(scores, {"a": np.array([0, -1, 1])}, self.schema)
        assert result["per_attribute"] == {"a": 0.5}

    def test_market_report_has_ten_plus_average(self):
        schema = market_attribute_schema()
        labels = {spec.name: np.zeros(4, dtype=int) for spec in schema.attributes}
        result = attribute_eval(labels, labels, schema)
        assert len(result["per_attribute"]) + 1 == 11 and "avg_excluding" not in result

    def test_colour_attributes_excluded_from_second_average(self):
        schema = market_attribute_schema(include_colors=True)
        truth = {spec.name: np.zeros(4, dtype=int) for spec in schema.attributes}
        predicted = dict(truth)
        predicted["upper_color"] = np.ones(4, dtype=int)
        result = attribute_eval(predicted, truth, schema)
        assert result["avg_excluding"] == 1.0 and result["avg"] < 1.0
        assert result["excluded"] == ["lower_color", "upper_color"]


class TestMetricReport:

    def setup_method(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        self.report = MetricReport(
            reid={"mAP": 0.5, "cmc@1": 0.75},
            segmentation={"overall_acc": 0.9, "mean_acc": 0.8, "mIoU": 0.7, "per_class_iou": [0.6, 0.8],
                          "class_names": ["background", "person"]},
            meta={"train_identities": 8, "run_group": "multi"})

    def teardown_method(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_flat_columns(self):
        row = self.report.flat_row()
        assert row["reid.cmc@1"] == 0.75 and row["segmentation.iou.person"] == 0.8
        assert self.report.metric("segmentation.mIoU") == 0.7 and self.report.metric("pose.avg") is None

    def test_json_and_csv(self):
        self.report.to_json(self.temp_dir / "metrics.json")
        self.report.to_csv(self.temp_dir / "metrics.csv")
        loaded = load_report(self.temp_dir / "metrics.json")
        assert loaded.sections() == ["reid", "segmentation"] and loaded.meta["run_group"] == "multi"
        frame = pd.read_csv(self.temp_dir / "metrics.csv")
        assert frame.loc[0, "reid.mAP"] == 0.5 and frame.loc[0, "train_identities"] == 8
