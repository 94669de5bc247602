"""Tests for the self-verification suites.

The suites themselves are oracles-by-construction; these tests pin the
hand-computable values the internal oracles must produce and run each suite
at reduced instance counts so the full-size runs in the acceptance gate
stay the only slow path.
"""

import numpy as np

from incmad.verify import (
    VerifyResult,
    _auroc_oracle,
    _aupro_oracle,
    _fm_oracle,
    verify_fm_examples,
    verify_gradients,
    verify_information_corollaries,
    verify_metric_oracles,
)


class TestInternalOracles:
    def test_auroc_oracle_hand_case(self):
        # pos scores {0.9, 0.3} vs neg {0.8, 0.1}: 3 of 4 pairs ranked right
        scores = [0.9, 0.8, 0.3, 0.1]
        labels = [1, 0, 1, 0]
        assert _auroc_oracle(scores, labels) == 0.75

    def test_auroc_oracle_ties_half_credit(self):
        assert _auroc_oracle([0.5, 0.5], [1, 0]) == 0.5

    def test_auroc_oracle_perfect(self):
        assert _auroc_oracle([3.0, 2.0, 1.0], [1, 1, 0]) == 1.0

    def test_aupro_oracle_perfect_map(self):
        # map equal to the mask: at the defect threshold the whole region is
        # recovered with zero false positives, so the curve is 1 everywhere
        mask = np.zeros((8, 8))
        mask[2:4, 2:4] = 1.0
        assert _aupro_oracle(mask[None], mask[None]) > 0.99

    def test_fm_oracle_worked_example(self):
        rows = {(0, "a"): 90.0, (1, "a"): 85.0, (2, "a"): 80.0}
        assert _fm_oracle(rows) == 10.0

    def test_fm_oracle_two_objects(self):
        rows = {(0, "a"): 90.0, (1, "a"): 85.0, (2, "a"): 80.0,
                (0, "b"): 70.0, (1, "b"): 75.0, (2, "b"): 80.0}
        # a: max(90, 85) - 80 = 10; b: max(70, 75) - 80 = -5; mean 2.5
        assert _fm_oracle(rows) == 2.5


class TestSuites:
    def test_gradient_suite_reduced(self):
        r = verify_gradients(instances=1)
        assert isinstance(r, VerifyResult)
        assert r.passed, r.detail
        assert "37 checks" in r.detail
        assert r.seconds > 0

    def test_information_suite_reduced(self):
        r = verify_information_corollaries(triples=30, dpi_trials=100)
        assert r.passed, r.detail

    def test_metric_suite_reduced(self):
        r = verify_metric_oracles(auroc_instances=20, aupro_instances=5, fm_instances=20)
        assert r.passed, r.detail

    def test_fm_examples(self):
        r = verify_fm_examples()
        assert r.passed, r.detail
        assert "3 worked examples" in r.detail


class TestFailureDetection:
    def test_metric_suite_catches_broken_auroc(self, monkeypatch):
        import incmad.verify as V

        monkeypatch.setattr(V, "auroc", lambda s, l: 0.5)
        r = verify_metric_oracles(auroc_instances=5, aupro_instances=1, fm_instances=1)
        assert not r.passed
        assert "auroc" in r.detail

    def test_fm_examples_catch_broken_metric(self, monkeypatch):
        import incmad.verify as V

        monkeypatch.setattr(V, "forgetting_metric", lambda h, k: 0.0)
        r = verify_fm_examples()
        assert not r.passed
