import math

import numpy as np
import pytest

from osdg_sched import autodiff as ad
from osdg_sched.autodiff import Tensor
from osdg_sched import losses
from osdg_sched.losses import (
    classification_loss,
    conf,
    conf_evidential,
    evidential_loss,
    evidential_nll,
    follower_loss,
    median_bandwidth,
    rebias_discrepancy,
)

from helpers import check_gradients


def kernel_sum_oracle(f1: np.ndarray, f2: np.ndarray, bw: float) -> float:
    """Direct double-loop evaluation of the full-Gram discrepancy."""
    def k(a, b):
        total = 0.0
        for i in range(a.shape[0]):
            for j in range(b.shape[0]):
                total += math.exp(-((a[i] - b[j]) ** 2).sum() / (2 * bw * bw))
        return total / (a.shape[0] * b.shape[0])

    return k(f1, f1) + k(f2, f2) - 2 * k(f1, f2)


class TestRebiasDiscrepancy:
    def test_identical_batches_zero(self, rng):
        f = rng.standard_normal((6, 4))
        out = rebias_discrepancy(Tensor(f), Tensor(f.copy()), bandwidth=1.0)
        assert abs(out.item()) < 1e-10

    def test_nonnegative_on_random_pairs(self, rng):
        for _ in range(200):
            f1 = Tensor(rng.standard_normal((5, 3)))
            f2 = Tensor(rng.standard_normal((5, 3)))
            assert rebias_discrepancy(f1, f2, bandwidth=0.8).item() >= -1e-12

    def test_separated_clouds_match_oracle(self, rng):
        bw = 0.5
        f1 = rng.standard_normal((6, 3)) * 0.1
        f2 = rng.standard_normal((6, 3)) * 0.1 + 100.0
        got = rebias_discrepancy(Tensor(f1), Tensor(f2), bandwidth=bw).item()
        # the expansion ||a||^2+||b||^2-2ab loses ~|x|^2*eps absolute precision
        # for the far cloud, so compare at 1e-9 rather than machine epsilon
        assert got == pytest.approx(kernel_sum_oracle(f1, f2, bw), abs=1e-9)
        # cross term vanishes at this separation
        k11 = ad.gaussian_gram(Tensor(f1), Tensor(f1), bw).data.mean()
        k22 = ad.gaussian_gram(Tensor(f2), Tensor(f2), bw).data.mean()
        assert got == pytest.approx(k11 + k22, abs=1e-9)

    def test_matches_oracle_random(self, rng):
        for _ in range(20):
            f1 = rng.standard_normal((4, 2))
            f2 = rng.standard_normal((5, 2))[:4]
            got = rebias_discrepancy(Tensor(f1), Tensor(f2), bandwidth=1.2).item()
            assert got == pytest.approx(kernel_sum_oracle(f1, f2, 1.2), abs=1e-10)

    def test_symmetric_in_branches(self, rng):
        f1, f2 = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        a = rebias_discrepancy(Tensor(f1), Tensor(f2), bandwidth=0.9).item()
        b = rebias_discrepancy(Tensor(f2), Tensor(f1), bandwidth=0.9).item()
        assert a == pytest.approx(b, abs=1e-14)

    def test_invariant_under_joint_permutation(self, rng):
        f1, f2 = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
        perm = rng.permutation(6)
        a = rebias_discrepancy(Tensor(f1), Tensor(f2), bandwidth=1.0).item()
        b = rebias_discrepancy(Tensor(f1[perm]), Tensor(f2[perm]), bandwidth=1.0).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_vanishes_for_huge_bandwidth(self, rng):
        f1, f2 = rng.standard_normal((5, 3)), rng.standard_normal((5, 3)) + 2.0
        assert rebias_discrepancy(Tensor(f1), Tensor(f2), bandwidth=1e6).item() < 1e-6

    def test_single_row_rejected(self, rng):
        f = Tensor(rng.standard_normal((1, 3)))
        with pytest.raises(ValueError, match="2 rows"):
            rebias_discrepancy(f, f, bandwidth=1.0)

    def test_gradients(self, rng):
        f1 = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        f2 = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        assert check_gradients(lambda: rebias_discrepancy(f1, f2, 0.9), [f1, f2]) < 1e-4


class TestEvidentialLoss:
    def test_zero_evidence_two_classes(self, rng):
        n = 3
        y = np.zeros((n, 2))
        y[np.arange(n), [0, 1, 0]] = 1.0
        e = Tensor(np.zeros((n, 2)))
        f = rng.standard_normal((n, 4))
        out = evidential_loss(e, e, y, Tensor(f), Tensor(f.copy()), bandwidth=1.0)
        assert out.item() == pytest.approx(2 * math.log(2), abs=1e-9)

    def test_large_true_evidence_drives_term_to_zero(self):
        y = np.asarray([[1.0, 0.0]])
        big = Tensor(np.asarray([[1e9, 0.0]]))
        out = evidential_nll(big, big, y)
        assert 0.0 < out.item() < 1e-8

    def test_monotone_decrease_in_true_evidence(self, rng):
        for _ in range(50):
            c = int(rng.integers(2, 6))
            n = int(rng.integers(1, 5))
            y = np.zeros((n, c))
            true = rng.integers(0, c, size=n)
            y[np.arange(n), true] = 1.0
            e = rng.uniform(0, 3, size=(n, c))
            e_up = e.copy()
            e_up[np.arange(n), true] += rng.uniform(0.1, 2.0, size=n)
            low = evidential_nll(Tensor(e), Tensor(e), y).item()
            high = evidential_nll(Tensor(e_up), Tensor(e_up), y).item()
            assert high < low

    def test_negative_evidence_rejected(self, rng):
        y = np.asarray([[1.0, 0.0]])
        bad = Tensor(np.asarray([[-0.1, 0.2]]))
        with pytest.raises(ValueError, match="non-negative"):
            evidential_nll(bad, bad, y)

    def test_gradients_composite(self, rng):
        n, c, h = 4, 3, 5
        y = np.zeros((n, c))
        y[np.arange(n), rng.integers(0, c, size=n)] = 1.0
        e1 = Tensor(rng.uniform(0.1, 2.0, size=(n, c)), requires_grad=True)
        e2 = Tensor(rng.uniform(0.1, 2.0, size=(n, c)), requires_grad=True)
        f1 = Tensor(rng.standard_normal((n, h)), requires_grad=True)
        f2 = Tensor(rng.standard_normal((n, h)), requires_grad=True)
        err = check_gradients(
            lambda: evidential_loss(e1, e2, y, f1, f2, bandwidth=1.1), [e1, e2, f1, f2])
        assert err < 1e-4


class TestConf:
    def test_uniform_logits(self):
        assert conf(np.zeros((2, 4)))[0, 0] == pytest.approx(0.25)

    def test_dominant_logit(self):
        z = np.asarray([[1e6, 0.0, 0.0]])
        assert conf(z)[0, 0] == pytest.approx(1.0)

    def test_shift_invariance(self, rng):
        z = rng.standard_normal((5, 4))
        shifted = z + rng.standard_normal((5, 1)) * 10
        assert np.allclose(conf(z), conf(shifted), atol=1e-12)

    def test_range(self, rng):
        p = conf(rng.standard_normal((100, 3)) * 5)
        assert np.all(p >= 1 / 3) and np.all(p < 1.0)

    def test_evidential_certainty_range(self, rng):
        e = rng.uniform(0, 10, size=(50, 4))
        cert = conf_evidential(e)
        assert np.all(cert >= 0.0) and np.all(cert < 1.0)
        assert conf_evidential(np.zeros((1, 4)))[0, 0] == 0.0


class TestFollowerLoss:
    def test_perfect_prediction(self, rng):
        t = rng.uniform(0, 1, size=(4, 1))
        assert follower_loss(Tensor(t.copy()), t).item() == 0.0

    def test_known_value(self):
        out = follower_loss(Tensor([[0.5]]), np.asarray([[0.7]]))
        assert out.item() == pytest.approx(0.04, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(Exception, match="shape"):
            follower_loss(Tensor([[0.5], [0.5]]), np.asarray([[0.7]]))

    def test_no_gradient_into_target_source(self, rng):
        """The target is a plain array: backward reaches only the follower side."""
        out = Tensor(rng.uniform(0.2, 0.8, size=(3, 1)), requires_grad=True)
        target_origin = Tensor(rng.uniform(0.2, 0.8, size=(3, 1)), requires_grad=True)
        loss = follower_loss(out, target_origin.data)
        ad.backward(loss)
        assert target_origin.grad is None
        assert out.grad is not None


class TestClassificationLoss:
    def _one_hot(self, labels, c):
        y = np.zeros((len(labels), c))
        y[np.arange(len(labels)), labels] = 1.0
        return y

    def _logits(self, rng, n, c):
        return [Tensor(rng.standard_normal((n, c)), requires_grad=True) for _ in range(4)]

    def test_equal_weights_match_unweighted_mean(self, rng):
        n, c = 6, 4
        y = self._one_hot(rng.integers(0, c, size=n), c)
        z = self._logits(rng, n, c)
        weighted = classification_loss(*z, y, np.full(n, 0.37)).item()

        manual = 0.0
        for cls, bcls in ((z[0], z[2]), (z[1], z[3])):
            lse = np.log(np.exp(cls.data).sum(axis=1))
            ce = lse - (cls.data * y).sum(axis=1)
            sig = 1 / (1 + np.exp(-bcls.data))
            bce = -(y * np.log(sig) + (1 - y) * np.log(1 - sig)).mean(axis=1)
            manual += ce.mean() + bce.mean()
        assert weighted == pytest.approx(manual, rel=1e-12)

    def test_perfect_logits_near_zero(self):
        labels = [0, 1, 2]
        y = self._one_hot(labels, 3)
        strong = (y * 2 - 1) * 1e3
        z = [Tensor(strong) for _ in range(4)]
        out = classification_loss(*z, y, np.ones(3))
        assert out.item() < 1e-6

    def test_duplication_equals_doubled_weight(self, rng):
        """3-sample oracle: duplicating a sample == doubling its weight."""
        c = 3
        y3 = self._one_hot([0, 2, 1], c)
        base = [rng.standard_normal((3, c)) for _ in range(4)]
        dup = [np.concatenate([b, b[2:3]], axis=0) for b in base]
        y4 = self._one_hot([0, 2, 1, 1], c)
        loss_dup = classification_loss(*[Tensor(b) for b in dup], y4,
                                       np.ones(4)).item()
        loss_weighted = classification_loss(*[Tensor(b) for b in base], y3,
                                            np.asarray([1.0, 1.0, 2.0])).item()
        assert loss_dup == pytest.approx(loss_weighted, rel=1e-12)

    def test_nonpositive_weight_rejected(self, rng):
        y = self._one_hot([0, 1], 2)
        z = self._logits(rng, 2, 2)
        with pytest.raises(ValueError, match="weight"):
            classification_loss(*z, y, np.asarray([0.5, 0.0]))

    def test_gradients(self, rng):
        n, c = 4, 3
        y = self._one_hot(rng.integers(0, c, size=n), c)
        z = self._logits(rng, n, c)
        w = rng.uniform(0.1, 1.0, size=n)
        assert check_gradients(lambda: classification_loss(*z, y, w), z) < 1e-4


def test_median_bandwidth_matches_direct_median(rng):
    f1, f2 = rng.standard_normal((5, 3)), rng.standard_normal((4, 3))
    z = np.concatenate([f1, f2])
    dists = [np.linalg.norm(z[i] - z[j]) for i in range(len(z)) for j in range(i + 1, len(z))]
    assert median_bandwidth(f1, f2) == pytest.approx(np.median(dists), rel=1e-12)


def test_median_bandwidth_degenerate_falls_back(rng):
    f = np.ones((3, 2))
    assert median_bandwidth(f, f) == 1.0
