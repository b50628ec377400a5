import numpy as np
import pytest

from rkhsreg.errors import ChannelMismatch
from rkhsreg.features import FeatureCloud, apply_pose_features
from rkhsreg.geometry import Pose, random_rotation
from rkhsreg.rkhs import (
    KernelParams,
    SelfTerm,
    cross_inner_product,
    kernel_eval,
    pair_sums,
    rbf,
    rkhs_distance,
    self_inner_product,
)


def brute_inner(a: FeatureCloud, b: FeatureCloud, ell: float, kernel: str = "rbf_tanh", radius: float = np.inf) -> float:
    """Double sum over pairs within ``radius``, written independently of the pair kernel."""
    total = 0.0
    for i in range(len(a)):
        for j in range(len(b)):
            r2 = float(np.sum((a.points[i] - b.points[j]) ** 2))
            if r2 > radius * radius:
                continue
            k = np.exp(-r2 / (2 * ell * ell))
            if kernel == "rbf_tanh":
                k *= np.tanh(1.0 + float(np.sum(a.channels[i] * b.channels[j])))
            total += a.labels[i] * b.labels[j] * k
    return total


def random_fc(rng, n, C=2, spread=0.5):
    ch = rng.normal(size=(n, C, 3))
    ch *= 0.4 / np.maximum(1.0, np.linalg.norm(ch, axis=2, keepdims=True))
    return FeatureCloud(rng.normal(size=(n, 3)) * spread, ch, rng.uniform(0.5, 1.5, size=n))


def single(point, channels):
    return FeatureCloud(np.atleast_2d(point), np.asarray(channels, float).reshape(1, -1, 3), [1.0])


class TestKernel:
    def test_rbf_examples(self):
        assert rbf(np.zeros(3), np.zeros(3), 0.3) == 1.0
        ell = 0.7
        assert rbf(np.zeros(3), np.array([ell * np.sqrt(2), 0, 0]), ell) == pytest.approx(np.exp(-1), abs=1e-12)
        assert rbf(np.zeros(3), np.array([0.3 * 10, 0, 0]), 0.3) == pytest.approx(1.9287e-22, rel=1e-4)

    def test_zero_channels(self):
        a = (np.zeros(3), np.zeros((1, 3)))
        assert kernel_eval(a, a, KernelParams(0.3)) == pytest.approx(0.761594, abs=1e-6)

    def test_aligned_channel(self):
        a = (np.zeros(3), np.array([[1.0, 0, 0]]))
        assert kernel_eval(a, a, KernelParams(0.3)) == pytest.approx(0.964028, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = (rng.normal(size=3), rng.normal(size=(2, 3)))
            b = (rng.normal(size=3), rng.normal(size=(2, 3)))
            p = KernelParams(0.5)
            assert kernel_eval(a, b, p) == kernel_eval(b, a, p)

    def test_channel_mismatch(self):
        with pytest.raises(ChannelMismatch):
            kernel_eval((np.zeros(3), np.zeros((1, 3))), (np.zeros(3), np.zeros((2, 3))), KernelParams())

    def test_bounded_for_short_channels(self):
        rng = np.random.default_rng(1)
        fc = random_fc(rng, 40, C=2)
        p = KernelParams(0.5)
        for i in range(10):
            for j in range(10):
                k = kernel_eval((fc.points[i], fc.channels[i]), (fc.points[j], fc.channels[j]), p)
                assert 0.0 < k < np.tanh(1 + 2)

    def test_lengthscale_clamped(self):
        assert KernelParams(1e-5).lengthscale == 0.01
        assert KernelParams(50.0).lengthscale == 2.0
        with pytest.raises(ValueError):
            KernelParams(-1.0)


class TestInnerProducts:
    def test_single_point(self):
        a = single(np.zeros(3), np.zeros((1, 3)))
        assert cross_inner_product(a, a, Pose.identity(), KernelParams()) == pytest.approx(np.tanh(1), abs=1e-12)

    def test_empty(self):
        a = single(np.zeros(3), np.zeros((1, 3)))
        empty = FeatureCloud(np.zeros((0, 3)), np.zeros((0, 1, 3)), np.zeros(0))
        assert cross_inner_product(a, empty, Pose.identity(), KernelParams()) == 0.0

    @pytest.mark.parametrize("kernel", ["rbf_tanh", "rbf"])
    def test_matches_truncated_brute_force(self, kernel):
        rng = np.random.default_rng(2)
        for ell in (0.05, 0.1, 0.3, 0.6):
            a, b = random_fc(rng, 100), random_fc(rng, 100)
            p = KernelParams(ell, prune_factor=6.0, kernel=kernel)
            assert abs(pair_sums(a, b, p).value - brute_inner(a, b, ell, kernel, radius=6.0 * ell)) < 1e-9

    @pytest.mark.parametrize("kernel", ["rbf_tanh", "rbf"])
    def test_matches_unpruned_brute_force(self, kernel):
        rng = np.random.default_rng(2)
        for ell in (0.05, 0.1, 0.14, 0.3, 0.6):
            a, b = random_fc(rng, 100), random_fc(rng, 100)
            p = KernelParams(ell, prune_factor=8.0, kernel=kernel)
            assert abs(pair_sums(a, b, p).value - brute_inner(a, b, ell, kernel)) < 1e-6

    def test_prune_six_within_tail_bound(self):
        rng = np.random.default_rng(2)
        a, b = random_fc(rng, 100), random_fc(rng, 100)
        p = KernelParams(0.14, prune_factor=6.0)
        bound = len(a) * len(b) * 1.5**2 * np.exp(-18.0)
        assert abs(pair_sums(a, b, p).value - brute_inner(a, b, 0.14)) < bound

    def test_prune_drops_far_pairs(self):
        a = single(np.zeros(3), np.zeros((1, 3)))
        b = single([3.0 + 1e-9, 0, 0], np.zeros((1, 3)))
        assert pair_sums(a, b, KernelParams(1.0, prune_factor=3.0)).pairs == 0
        assert pair_sums(a, b, KernelParams(1.0, prune_factor=3.1)).pairs == 1

    def test_pose_applied(self):
        rng = np.random.default_rng(3)
        a, b = random_fc(rng, 60), random_fc(rng, 60)
        pose = Pose(random_rotation(rng), rng.normal(size=3) * 0.1)
        p = KernelParams(0.4)
        direct = cross_inner_product(a, b, pose, p)
        pre = cross_inner_product(a, apply_pose_features(pose, b), Pose.identity(), p)
        assert direct == pytest.approx(pre, abs=1e-9)

    def test_self_term_pose_invariant(self):
        rng = np.random.default_rng(4)
        a = random_fc(rng, 80)
        p = KernelParams(0.4)
        base = self_inner_product(a, p)
        for _ in range(5):
            moved = apply_pose_features(Pose(random_rotation(rng), rng.normal(size=3)), a)
            assert self_inner_product(moved, p) == pytest.approx(base, abs=1e-9)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        a, b = random_fc(rng, 300), random_fc(rng, 300)
        p = KernelParams(0.3)
        assert pair_sums(a, b, p, want_pose=True).value == pair_sums(a, b, p, want_pose=True).value


class TestDistance:
    def test_identical_zero(self):
        rng = np.random.default_rng(6)
        a = random_fc(rng, 80)
        assert rkhs_distance(a, a, Pose.identity(), KernelParams(0.3)) == pytest.approx(0.0, abs=1e-9)

    @pytest.mark.parametrize("r,ell", [(0.1, 0.3), (0.5, 0.3), (1.0, 2.0)])
    def test_two_single_points(self, r, ell):
        a = single(np.zeros(3), np.zeros((1, 3)))
        b = single([r, 0, 0], np.zeros((1, 3)))
        expected = 2 * np.tanh(1) * (1 - np.exp(-r * r / (2 * ell * ell)))
        assert rkhs_distance(a, b, Pose.identity(), KernelParams(ell)) == pytest.approx(expected, abs=1e-12)

    def test_pose_unfolding(self):
        rng = np.random.default_rng(7)
        a, b = random_fc(rng, 50), random_fc(rng, 50)
        pose = Pose(random_rotation(rng), rng.normal(size=3) * 0.2)
        p = KernelParams(0.5)
        d1 = rkhs_distance(a, b, pose, p)
        d2 = rkhs_distance(a, apply_pose_features(pose, b), Pose.identity(), p)
        assert d1 == pytest.approx(d2, abs=1e-9)


class TestSelfTerm:
    def test_matches_pair_sums(self):
        rng = np.random.default_rng(8)
        fc = random_fc(rng, 200)
        st = SelfTerm(fc, KernelParams(0.3))
        for ell in (0.3, 0.25, 0.1, 0.45, 0.8):
            p = KernelParams(ell)
            value, d_ell = st(ell)
            ref = pair_sums(fc, fc, p, want_pose=True)
            assert value == pytest.approx(ref.value, rel=1e-12)
            assert d_ell == pytest.approx(ref.d_ell, rel=1e-10)

    def test_rbf_mode(self):
        rng = np.random.default_rng(9)
        fc = random_fc(rng, 100)
        p = KernelParams(0.4, kernel="rbf")
        assert SelfTerm(fc, p)(0.4)[0] == pytest.approx(pair_sums(fc, fc, p).value, rel=1e-12)
