import csv

import numpy as np
import pytest
from scipy import stats

from rkhsreg.errors import EmptyDataset
from rkhsreg.features import EncoderWeights
from rkhsreg.geometry import PointCloud, Pose, random_rotation, rotation_angle, rotation_error_deg
from rkhsreg.rkhs import KernelParams
from rkhsreg.shapes import sample_mesh_surface, shape_set
from rkhsreg.training import (
    LOG_COLUMNS,
    CurriculumSchedule,
    TrainConfig,
    clip_gradients,
    encoder_gradient,
    encoder_loss_and_gradient,
    make_training_pair,
    random_translation,
    split_dataset,
    train,
)
from rkhsreg.registration import RegistrationConfig


def small_cloud(rng, n=30):
    return PointCloud(rng.normal(size=(n, 3)) * [0.5, 0.35, 0.2])


def toy_dataset(n_shapes=5, n=400, seed=0):
    rng = np.random.default_rng(seed)
    return [sample_mesh_surface(m, n, rng) for m in shape_set(n_shapes, seed=seed)]


def tiny_config(**kw):
    base = dict(n_points=64, batch_size=2, channels=(4, 4), k=8, inner=RegistrationConfig(max_iters=10))
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_defaults(self):
        s = CurriculumSchedule()
        assert s.stages == (1.0, 10.0, 20.0, 30.0, 45.0)
        assert s.threshold(10.0) == pytest.approx(2.0)

    @pytest.mark.parametrize("stages", [(), (10, 5), (1, 1), (1, 200), (-1, 5)])
    def test_invalid(self, stages):
        with pytest.raises(ValueError):
            CurriculumSchedule(stages)

    def test_direct(self):
        s = CurriculumSchedule.direct(45.0, 15)
        assert s.stages == (45.0,) and s.epochs_per_stage == 15

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(outer_lr=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestTrainingPair:
    def test_angle_uniform(self):
        rng = np.random.default_rng(0)
        cloud = small_cloud(rng, 40)
        angles = []
        for _ in range(10000):
            _, _, truth = make_training_pair(cloud, 45.0, rng, translation=0.0)
            angles.append(np.degrees(rotation_angle(truth.rotation)))
        counts, _ = np.histogram(angles, bins=10, range=(0, 45))
        assert stats.chisquare(counts).pvalue > 0.01

    def test_axis_uniform(self):
        rng = np.random.default_rng(1)
        axes = []
        for _ in range(3000):
            R = random_rotation(rng, 0.5)
            w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
            axes.append(w / np.linalg.norm(w))
        # z-coordinate of a uniform axis is uniform on [-1, 1]
        assert stats.kstest(np.array(axes)[:, 2], "uniform", args=(-1, 2)).pvalue > 0.01

    def test_zero_angle(self):
        rng = np.random.default_rng(2)
        cloud = small_cloud(rng, 100)
        X, Z, truth = make_training_pair(cloud, 0.0, rng, n_points=50, translation=0.0)
        np.testing.assert_allclose(truth.as_matrix(), np.eye(4), atol=1e-12)
        assert rotation_error_deg(truth, truth) == 0.0
        # both are subsets of the same cloud
        rows = {tuple(p) for p in cloud.points}
        assert all(tuple(p) in rows for p in X.points) and all(tuple(p) in rows for p in Z.points)

    def test_truth_maps_z_to_x(self):
        rng = np.random.default_rng(3)
        cloud = small_cloud(rng, 50)
        X, Z, truth = make_training_pair(cloud, 30.0, rng)
        np.testing.assert_allclose(np.sort(truth.apply(Z.points), axis=0), np.sort(X.points, axis=0), atol=1e-12)

    def test_translation_ball(self):
        rng = np.random.default_rng(4)
        t = np.array([random_translation(rng, 0.1) for _ in range(5000)])
        r = np.linalg.norm(t, axis=1)
        assert r.max() <= 0.1
        # radius of a uniform ball sample has CDF (r / R)^3
        assert stats.kstest((r / 0.1) ** 3, "uniform").pvalue > 0.01

    def test_mesh_source(self):
        rng = np.random.default_rng(5)
        X, Z, _ = make_training_pair(shape_set(1)[0], 10.0, rng, n_points=128)
        assert len(X) == len(Z) == 128


class TestEncoderGradient:
    def test_finite_differences(self):
        rng = np.random.default_rng(0)
        analytic, numeric = [], []
        for trial in range(5):
            X, Z = small_cloud(rng), small_cloud(rng)
            w = EncoderWeights.random(channels=(4, 4), k=8, seed=trial)
            pose = Pose(random_rotation(rng, 0.3), rng.normal(size=3) * 0.05)
            p = KernelParams(0.4)
            grads = encoder_gradient(w, X, Z, pose, p)
            arrays = w.arrays()
            for _ in range(40):
                a = rng.integers(len(arrays))
                idx = tuple(rng.integers(s) for s in arrays[a].shape)
                old, h = arrays[a][idx], 1e-6
                arrays[a][idx] = old + h
                plus = encoder_loss_and_gradient(w, X, Z, pose, p)[0]
                arrays[a][idx] = old - h
                minus = encoder_loss_and_gradient(w, X, Z, pose, p)[0]
                arrays[a][idx] = old
                analytic.append(grads[a][idx])
                numeric.append((plus - minus) / (2 * h))
        analytic, numeric = np.array(analytic), np.array(numeric)
        assert len(analytic) == 200
        # relative to the probe's scale, floored at 1e-3 of the largest entry
        floor = 1e-3 * np.abs(numeric).max()
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)
        assert rel.max() < 1e-3

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        X, Z = small_cloud(rng), small_cloud(rng)
        w = EncoderWeights.random(channels=(4, 4), k=8, seed=3)
        pose = Pose(random_rotation(rng, 0.2))
        g1 = encoder_gradient(w, X, Z, pose, KernelParams(0.4))
        g2 = encoder_gradient(w, X, Z, pose, KernelParams(0.4))
        for a, b in zip(g1, g2):
            np.testing.assert_array_equal(a, b)

    def test_dead_branch(self):
        rng = np.random.default_rng(2)
        X, Z = small_cloud(rng), small_cloud(rng)
        w = EncoderWeights.zeros(channels=(4, 4), k=8)
        grads = encoder_gradient(w, X, Z, Pose(random_rotation(rng, 0.3)), KernelParams(0.4))
        (W1, Wk1, D1), (W2, Wk2, D2) = grads[:3], grads[3:]
        # all channels are zero, so the rectifier never fires and nothing reaches layer 1
        for g in (W1, Wk1, D1, D2):
            np.testing.assert_array_equal(g, 0.0)

    def test_clip(self):
        g = [np.full(4, 3.0), np.full(3, 4.0)]
        clipped = clip_gradients(g, 1.0)
        assert np.sqrt(sum(np.sum(c * c) for c in clipped)) == pytest.approx(1.0)
        assert clip_gradients(g, 100.0) is g


class TestSplit:
    def test_empty(self):
        with pytest.raises(EmptyDataset):
            split_dataset(0, 0.2, np.random.default_rng(0))
        with pytest.raises(EmptyDataset):
            train([], config=tiny_config())

    def test_partition(self):
        tr, va = split_dataset(20, 0.2, np.random.default_rng(0))
        assert len(va) == 4 and len(tr) == 16
        assert sorted(np.r_[tr, va]) == list(range(20))

    def test_single_shape(self):
        tr, va = split_dataset(1, 0.2, np.random.default_rng(0))
        assert list(tr) == [0] and list(va) == [0]


class TestTrain:
    def test_zero_lr_keeps_weights(self):
        init = EncoderWeights.random(channels=(4, 4), k=8, seed=1)
        res = train(toy_dataset(4), CurriculumSchedule((1.0, 10.0), 1), tiny_config(outer_lr=0.0), init=init)
        for a, b in zip(res.weights.arrays(), init.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_deterministic(self):
        data = toy_dataset(4)
        sched = CurriculumSchedule((1.0, 10.0), 1)
        a = train(data, sched, tiny_config())
        b = train(data, sched, tiny_config())
        for x, y in zip(a.weights.arrays(), b.weights.arrays()):
            np.testing.assert_array_equal(x, y)
        assert a.log == b.log

    def test_weights_move(self):
        init = EncoderWeights.random(channels=(4, 4), k=8, seed=0)
        res = train(toy_dataset(4), CurriculumSchedule((1.0,), 1), tiny_config(), init=init)
        assert any(not np.array_equal(a, b) for a, b in zip(res.weights.arrays(), init.arrays()))

    def test_log_and_budget(self, tmp_path):
        path = tmp_path / "log.csv"
        sched = CurriculumSchedule((1.0, 10.0, 20.0), 2, promotion_ratio=0.0)
        res = train(toy_dataset(4), sched, tiny_config(max_epochs=5), log_path=path)
        assert [r["epoch"] for r in res.log] == [1, 2, 3, 4, 5]
        # stage 3 is last and absorbs the remaining epoch
        assert [r["stage_deg"] for r in res.log] == [1.0, 1.0, 10.0, 10.0, 20.0]
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0].keys()) == LOG_COLUMNS
        assert len(rows) == 5
        # appending keeps a single header
        train(toy_dataset(4), CurriculumSchedule((1.0,), 1), tiny_config(), log_path=path)
        with open(path) as fh:
            assert sum(line.startswith("stage_deg") for line in fh) == 1

    def test_promotion(self):
        # a huge promotion threshold promotes after one epoch per stage
        sched = CurriculumSchedule((1.0, 10.0, 20.0), 5, promotion_ratio=1e6)
        res = train(toy_dataset(4), sched, tiny_config())
        # the last stage takes the rest of the 15-epoch budget
        assert [r["stage_deg"] for r in res.log] == [1.0, 10.0] + [20.0] * 13
