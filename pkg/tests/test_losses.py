#!/usr/bin/env python3
"""
Tests for the multi-task losses against hand values and brute-force oracles
"""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from losses import attribute_ce, batch_hard_triplet, bootstrapped_ce, combine, person_ce, pose_l2
from mtl_config import CompositionError, ConfigurationError, LabelError, MarginMode
from task_heads import soft_argmax


def triplet_oracle(embeddings: np.ndarray, ids: np.ndarray, mode: MarginMode, margin: float) -> float:
    """Enumerate every anchor, positive and negative explicitly"""
    terms = []
    for a in range(len(ids)):
        positives = [np.linalg.norm(embeddings[a] - embeddings[p]) for p in range(len(ids)) if p != a and ids[p] == ids[a]]
        negatives = [np.linalg.norm(embeddings[a] - embeddings[n]) for n in range(len(ids)) if ids[n] != ids[a]]
        gap = max(positives) - min(negatives)
        terms.append(max(0.0, margin + gap) if mode == MarginMode.HINGE else math.log1p(math.exp(gap)))
    return float(np.mean(terms))


class TestBatchHardTriplet:

    def test_hand_computed_hinge(self):
        embeddings = torch.tensor([[0.0], [2.0], [1.0], [3.0]])
        ids = torch.tensor([0, 0, 1, 1])
        loss = batch_hard_triplet(embeddings, ids, MarginMode.HINGE, 0.2)
        assert abs(float(loss) - 1.2) < 1e-6, f"expected 1.2, got {float(loss)}"

    def test_separated_identities_give_zero_hinge(self):
        embeddings = torch.tensor([[0.0], [1.0], [10.0], [11.0]])
        loss = batch_hard_triplet(embeddings, torch.tensor([0, 0, 1, 1]), MarginMode.HINGE, 0.2)
        assert float(loss) == 0.0

    def test_identical_embeddings_softplus_is_ln2(self):
        loss = batch_hard_triplet(torch.ones(6, 4), torch.tensor([0, 0, 1, 1, 2, 2]), MarginMode.SOFTPLUS)
        assert abs(float(loss) - math.log(2)) < 1e-6

    def test_matches_anchor_enumeration(self):
        rng = np.random.default_rng(0)
        for trial in range(500):
            p, k = int(rng.integers(2, 5)), int(rng.integers(2, 4))
            ids = np.repeat(rng.choice(100, size=p, replace=False), k)
            embeddings = rng.normal(size=(p * k, int(rng.integers(1, 6))))
            mode = MarginMode.HINGE if trial % 2 else MarginMode.SOFTPLUS
            loss = batch_hard_triplet(torch.from_numpy(embeddings), torch.from_numpy(ids), mode, 0.3)
            expected = triplet_oracle(embeddings, ids, mode, 0.3)
            assert abs(float(loss) - expected) <= 1e-6, f"trial {trial}: {float(loss)} vs {expected}"

    def test_composition_checked(self):
        with pytest.raises(CompositionError):
            batch_hard_triplet(torch.rand(4, 2), torch.tensor([1, 1, 1, 1]))
        with pytest.raises(CompositionError):
            batch_hard_triplet(torch.rand(3, 2), torch.tensor([1, 1, 2]))


class TestCrossEntropies:

    def test_one_hot_probabilities(self):
        probabilities = torch.eye(4)
        assert float(person_ce(probabilities, torch.arange(4), from_logits=False)) == 0.0

    def test_uniform_is_ln_n(self):
        loss = person_ce(torch.full((3, 7), 1 / 7), torch.tensor([0, 3, 6]), from_logits=False)
        assert abs(float(loss) - math.log(7)) < 1e-6

    def test_random_distributions_match_lookup(self):
        rng = np.random.default_rng(2)
        probabilities = rng.dirichlet(np.ones(6), size=10)
        labels = rng.integers(0, 6, size=10)
        expected = -np.mean(np.log(probabilities[np.arange(10), labels]))
        loss = person_ce(torch.from_numpy(probabilities), torch.from_numpy(labels), from_logits=False)
        assert abs(float(loss) - expected) < 1e-9

    def test_logits_match_torch(self):
        logits = torch.randn(5, 4)
        labels = torch.tensor([0, 1, 2, 3, 1])
        assert torch.allclose(person_ce(logits, labels), F.cross_entropy(logits, labels))

    def test_label_range(self):
        with pytest.raises(LabelError):
            person_ce(torch.randn(2, 3), torch.tensor([0, 3]))

    def test_attribute_mean_of_terms(self):
        scores = {"a": torch.tensor([[math.exp(-1.0), 1 - math.exp(-1.0)]], dtype=torch.float64),
                  "b": torch.tensor([[math.exp(-3.0), 1 - math.exp(-3.0)]], dtype=torch.float64)}
        labels = {"a": torch.tensor([0]), "b": torch.tensor([0])}
        assert abs(float(attribute_ce(scores, labels, from_logits=False)) - 2.0) < 1e-9

    def test_attribute_perfect_prediction(self):
        scores = {"a": torch.tensor([[1.0, 0.0], [0.0, 1.0]]), "b": torch.tensor([[0.0, 1.0, 0.0]])}
        labels = {"a": torch.tensor([0, 1]), "b": torch.tensor([1])}
        assert float(attribute_ce(scores, labels, from_logits=False)) == 0.0

    def test_attribute_missing_labels(self):
        logits = {"a": torch.randn(3, 2), "b": torch.randn(3, 4)}
        labels = {"a": torch.tensor([-1, -1, -1]), "b": torch.tensor([2, -1, 0])}
        expected = F.cross_entropy(logits["b"][[0, 2]], torch.tensor([2, 0]))
        assert torch.allclose(attribute_ce(logits, labels), expected), "missing labels must be skipped"
        assert attribute_ce({"a": logits["a"]}, {"a": labels["a"]}) is None, "no label at all gives no loss"

    def test_ten_market_style_attributes(self):
        rng = np.random.default_rng(4)
        classes = [2, 4, 2, 2, 2, 2, 2, 2, 2, 2]
        scores, labels, oracle = {}, {}, []
        for i, c in enumerate(classes):
            p = rng.dirichlet(np.ones(c), size=6)
            y = rng.integers(0, c, size=6)
            scores[f"attr{i}"], labels[f"attr{i}"] = torch.from_numpy(p), torch.from_numpy(y)
            oracle.append(-np.mean(np.log(p[np.arange(6), y])))
        assert abs(float(attribute_ce(scores, labels, from_logits=False)) - np.mean(oracle)) < 1e-9


class TestPoseL2:

    def test_exact_prediction(self):
        joints = torch.rand(2, 16, 2)
        assert float(pose_l2(joints, joints.clone(), torch.ones(2, 16))) == 0.0

    def test_three_four_five(self):
        loss = pose_l2(torch.tensor([[[13.0, 24.0]]]), torch.tensor([[[10.0, 20.0]]]), torch.tensor([[1]]), 1.0)
        assert float(loss) == 25.0

    def test_mixed_visibility(self):
        rng = np.random.default_rng(5)
        pred, gt = rng.normal(size=(3, 5, 2)), rng.normal(size=(3, 5, 2))
        visible = rng.random((3, 5)) > 0.4
        visible[0, 0] = True
        terms = [np.sum((pred[b, j] - gt[b, j]) ** 2) / 4.0 for b in range(3) for j in range(5) if visible[b, j]]
        loss = pose_l2(torch.from_numpy(pred), torch.from_numpy(gt), torch.from_numpy(visible), normalizer=2.0)
        assert abs(float(loss) - np.mean(terms)) < 1e-9

    def test_no_visible_joint(self):
        assert pose_l2(torch.rand(1, 3, 2), torch.rand(1, 3, 2), torch.zeros(1, 3)) is None


class TestBootstrappedCE:

    def _logits_with_losses(self, values):
        # two classes, label 0: CE = log(1 + exp(z1)) equals v for z1 = log(exp(v) - 1)
        z = torch.tensor([math.log(math.exp(v) - 1) for v in values], dtype=torch.float64)
        logits = torch.stack([torch.zeros_like(z), z]).reshape(1, 2, 2, 2)
        return logits, torch.zeros(1, 2, 2, dtype=torch.long)

    def test_hardest_quarter(self):
        logits, mask = self._logits_with_losses([4.0, 3.0, 2.0, 1.0])
        assert abs(float(bootstrapped_ce(logits, mask, 0.25)) - 4.0) < 1e-9

    def test_keep_all_is_plain_mean(self):
        logits = torch.randn(2, 5, 6, 6)
        mask = torch.randint(0, 5, (2, 6, 6))
        assert torch.allclose(bootstrapped_ce(logits, mask, 1.0), F.cross_entropy(logits, mask), atol=1e-6)

    def test_matches_sort_then_average(self):
        rng = np.random.default_rng(6)
        logits = torch.from_numpy(rng.normal(size=(1, 4, 8, 8)))
        mask = torch.from_numpy(rng.integers(0, 4, size=(1, 8, 8)))
        mask[0, 0, :3] = 255
        pixel = F.cross_entropy(logits, mask, ignore_index=255, reduction="none")[mask != 255].numpy()
        for keep in (0.25, 0.5, 1.0):
            count = math.ceil(round(keep * len(pixel), 9))
            expected = np.sort(pixel)[::-1][:count].mean()
            assert abs(float(bootstrapped_ce(logits, mask, keep)) - expected) < 1e-12, f"keep {keep}"

    def test_all_ignored(self):
        assert bootstrapped_ce(torch.randn(1, 3, 2, 2), torch.full((1, 2, 2), 255)) is None

    def test_keep_fraction_range(self):
        with pytest.raises(ConfigurationError):
            bootstrapped_ce(torch.randn(1, 3, 2, 2), torch.zeros(1, 2, 2, dtype=torch.long), 0.0)


class TestCombine:

    def test_single_loss(self):
        assert abs(float(combine({"triplet": torch.tensor(0.7)}).total) - 0.7) < 1e-6

    def test_unit_weights(self):
        bundle = combine({"triplet": torch.tensor(1.0), "pose_l2": torch.tensor(2.0)}, {"triplet": 1, "pose_l2": 1})
        assert float(bundle.total) == 3.0

    def test_weighted(self):
        bundle = combine({"triplet": torch.tensor(1.0), "pose_l2": torch.tensor(2.0)},
                         {"triplet": 0.5, "pose_l2": 2.0})
        assert float(bundle.total) == 4.5

    def test_absent_parts_dropped(self):
        bundle = combine({"triplet": torch.tensor(1.0), "seg_bce": None})
        assert set(bundle.values()) == {"triplet", "total"}
        empty = combine({"seg_bce": None})
        assert empty.total is None and empty.values() == {}

    def test_unknown_loss(self):
        with pytest.raises(ConfigurationError):
            combine({"l1": torch.tensor(1.0)})


class TestLossInvariants:
    """Properties every batch loss keeps regardless of batch order or logit offsets"""

    def setup_method(self):
        torch.manual_seed(11)
        self.order = torch.randperm(8)

    def test_batch_order_does_not_matter(self):
        ids = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
        embeddings = torch.randn(8, 5, dtype=torch.float64)
        logits = torch.randn(8, 6, dtype=torch.float64)
        labels = torch.tensor([0, 5, 1, 1, 2, -1, 3, 4])
        pred, gt = torch.randn(8, 3, 2, dtype=torch.float64), torch.randn(8, 3, 2, dtype=torch.float64)
        visible = torch.randint(0, 2, (8, 3))
        visible[0] = 1
        seg = torch.randn(8, 4, 3, 3, dtype=torch.float64)
        mask = torch.randint(0, 4, (8, 3, 3))
        o = self.order
        pairs = [
            (batch_hard_triplet(embeddings, ids), batch_hard_triplet(embeddings[o], ids[o])),
            (person_ce(logits, labels.clamp(min=0)), person_ce(logits[o], labels.clamp(min=0)[o])),
            (attribute_ce({"a": logits}, {"a": labels}), attribute_ce({"a": logits[o]}, {"a": labels[o]})),
            (pose_l2(pred, gt, visible, 2.0), pose_l2(pred[o], gt[o], visible[o], 2.0)),
            (bootstrapped_ce(seg, mask, 0.25), bootstrapped_ce(seg[o], mask[o], 0.25)),
        ]
        for i, (plain, permuted) in enumerate(pairs):
            assert abs(float(plain) - float(permuted)) < 1e-12, f"loss {i} depends on batch order"

    def test_constant_logit_offset_does_not_matter(self):
        logits = torch.randn(6, 4, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 3, 1, -1])
        seg = torch.randn(2, 4, 5, 5, dtype=torch.float64)
        mask = torch.randint(0, 4, (2, 5, 5))
        for shift in (-7.5, 3.0, 40.0):
            assert abs(float(person_ce(logits, labels.clamp(min=0)))
                       - float(person_ce(logits + shift, labels.clamp(min=0)))) < 1e-9
            assert abs(float(attribute_ce({"a": logits}, {"a": labels}))
                       - float(attribute_ce({"a": logits + shift}, {"a": labels}))) < 1e-9
            assert abs(float(bootstrapped_ce(seg, mask)) - float(bootstrapped_ce(seg + shift, mask))) < 1e-9

    def test_bootstrapped_ce_non_increasing_in_keep_fraction(self):
        seg = torch.randn(2, 5, 6, 6, dtype=torch.float64)
        mask = torch.randint(0, 5, (2, 6, 6))
        values = [float(bootstrapped_ce(seg, mask, keep)) for keep in np.linspace(0.05, 1.0, 20)]
        assert all(later <= earlier + 1e-12 for earlier, later in zip(values, values[1:])), values

    def test_doubling_a_weight_doubles_its_gradient(self):
        shared = torch.nn.Linear(4, 3).double()
        features = torch.randn(8, 4, dtype=torch.float64)
        ids = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
        target = torch.randn(8, 1, 2, dtype=torch.float64)

        def gradient(weights, names=("triplet", "pose_l2")):
            embedding = shared(features)
            parts = {"triplet": batch_hard_triplet(embedding, ids),
                     "pose_l2": pose_l2(embedding[:, :2].unsqueeze(1), target, torch.ones(8, 1))}
            total = combine({name: parts[name] for name in names}, weights).total
            return torch.autograd.grad(total, shared.weight)[0]

        triplet_only = gradient({"triplet": 1.0}, names=("triplet",))
        single = gradient({"triplet": 1.0, "pose_l2": 1.0})
        doubled = gradient({"triplet": 2.0, "pose_l2": 1.0})
        assert torch.allclose(doubled - single, triplet_only, atol=1e-12)


class TestGradients:
    """Analytic gradients against central finite differences (double precision)"""

    def setup_method(self):
        torch.manual_seed(7)

    def test_soft_argmax(self):
        for _ in range(50):
            heatmaps = torch.randn(1, 2, 3, 4, dtype=torch.float64, requires_grad=True)
            assert torch.autograd.gradcheck(lambda h: soft_argmax(h, 8, 1.3), (heatmaps,))

    def test_triplet_both_modes(self):
        ids = torch.tensor([0, 0, 1, 1, 2, 2])
        for mode in (MarginMode.SOFTPLUS, MarginMode.HINGE):
            for _ in range(50):
                embeddings = torch.randn(6, 3, dtype=torch.float64, requires_grad=True)
                # hinge only where margin + gap stays clear of zero
                if mode == MarginMode.HINGE:
                    with torch.no_grad():
                        embeddings.mul_(0.1)
                assert torch.autograd.gradcheck(lambda e: batch_hard_triplet(e, ids, mode, 1.0), (embeddings,))

    def test_cross_entropies(self):
        for _ in range(50):
            logits = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
            labels = torch.randint(0, 5, (4,))
            assert torch.autograd.gradcheck(lambda s: person_ce(s, labels), (logits,))
            assert torch.autograd.gradcheck(lambda s: attribute_ce({"a": s}, {"a": labels}), (logits,))

    def test_pose_and_segmentation(self):
        for _ in range(50):
            pred = torch.randn(2, 4, 2, dtype=torch.float64, requires_grad=True)
            gt = torch.randn(2, 4, 2, dtype=torch.float64)
            visible = torch.tensor([[1, 0, 1, 1], [0, 1, 1, 0]])
            assert torch.autograd.gradcheck(lambda p: pose_l2(p, gt, visible, 3.0), (pred,))
            logits = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
            mask = torch.randint(0, 3, (1, 4, 4))
            assert torch.autograd.gradcheck(lambda s: bootstrapped_ce(s, mask, 0.5), (logits,))
