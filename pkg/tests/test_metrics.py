"""Classification metrics against the sklearn reference implementations."""

import numpy as np
import pytest
import sklearn.metrics

from clearvae.autodiff import ContractViolation
from clearvae.metrics import (ap_ovr_macro, auroc_ovr_macro, binary_ap,
                              binary_auroc, classification_metrics,
                              top1_accuracy)


class TestBinary:
    def test_auroc_matches_sklearn_with_ties(self, rng_np):
        for _ in range(20):
            labels = rng_np.uniform(size=60) > 0.6
            if labels.all() or not labels.any():
                continue
            scores = np.round(rng_np.uniform(size=60), 1)  # ties on purpose
            ours = binary_auroc(labels, scores)
            ref = sklearn.metrics.roc_auc_score(labels, scores)
            assert ours == pytest.approx(ref, abs=1e-12)

    def test_ap_matches_sklearn_with_ties(self, rng_np):
        for _ in range(20):
            labels = rng_np.uniform(size=60) > 0.6
            if not labels.any():
                continue
            scores = np.round(rng_np.uniform(size=60), 1)
            ours = binary_ap(labels, scores)
            ref = sklearn.metrics.average_precision_score(labels, scores)
            assert ours == pytest.approx(ref, abs=1e-12)

    def test_perfect_ranking(self):
        labels = np.array([False, False, True, True])
        scores = np.array([0.1, 0.2, 0.8, 0.9])
        assert binary_auroc(labels, scores) == 1.0
        assert binary_ap(labels, scores) == 1.0

    def test_degenerate_labels_rejected(self):
        with pytest.raises(ContractViolation):
            binary_auroc(np.ones(4, dtype=bool), np.arange(4.0))
        with pytest.raises(ContractViolation):
            binary_ap(np.zeros(4, dtype=bool), np.arange(4.0))


class TestMacro:
    def test_macro_matches_sklearn_ovr(self, rng_np):
        y = rng_np.integers(0, 4, 120)
        probs = rng_np.uniform(size=(120, 4))
        probs /= probs.sum(axis=1, keepdims=True)
        ours = auroc_ovr_macro(y, probs)
        ref = sklearn.metrics.roc_auc_score(y, probs, multi_class="ovr",
                                            average="macro")
        assert ours == pytest.approx(ref, abs=1e-12)
        ours_ap = ap_ovr_macro(y, probs)
        onehot = np.eye(4)[y]
        ref_ap = sklearn.metrics.average_precision_score(onehot, probs,
                                                         average="macro")
        assert ours_ap == pytest.approx(ref_ap, abs=1e-12)

    def test_accuracy_and_record(self, rng_np):
        y = rng_np.integers(0, 3, 50)
        probs = np.eye(3)[y] * 0.8 + 0.1
        record = classification_metrics(y, probs)
        assert record["accuracy"] == 1.0
        assert record["auroc"] == 1.0 and record["ap"] == 1.0
        assert top1_accuracy(y, y) == 1.0

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ContractViolation):
            top1_accuracy(np.zeros(3), np.zeros(4))
