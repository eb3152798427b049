import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedctta import nn
from fedctta.drift import (
    CATALOG_NAMES,
    DomainSpec,
    DriftSchedule,
    apply_domain,
    build_schedule,
    compute_sh,
    compute_th,
    default_catalog,
    export_schedule,
    make_task,
    stream_batch,
)
from fedctta.errors import ConfigurationError, ShapeError


def lda_accuracy(task):
    # pooled-covariance linear discriminant fit from the training split only
    x, y = task.train.inputs, task.train.labels
    K = task.num_classes
    means = np.stack([x[y == k].mean(axis=0) for k in range(K)])
    resid = x - means[y]
    cov = resid.T @ resid / (len(x) - K)
    W = np.linalg.solve(cov, means.T)
    b = -0.5 * np.sum(means.T * W, axis=0)
    pred = np.argmax(task.test.inputs @ W + b, axis=1)
    return np.mean(pred == task.test.labels)


@pytest.fixture(scope="module")
def catalog():
    return default_catalog(4, seed=0)


class TestTask:
    def test_deterministic(self):
        a, b = make_task(4, 3, 9), make_task(4, 3, 9)
        np.testing.assert_array_equal(a.means, b.means)
        np.testing.assert_array_equal(a.train.inputs, b.train.inputs)

    def test_two_classes_separated(self):
        task = make_task(2, 2, 0)
        assert np.linalg.norm(task.means[0] - task.means[1]) >= 4 * task.class_std

    @pytest.mark.parametrize("K,d", [(2, 2), (4, 8), (8, 4), (12, 6)])
    def test_min_separation(self, K, d):
        task = make_task(K, d, 1, separation=4.0)
        gaps = np.linalg.norm(task.means[:, None] - task.means[None], axis=2)
        assert gaps[~np.eye(K, dtype=bool)].min() >= 4.0 - 1e-9

    @pytest.mark.parametrize("K,d,sep", [(4, 8, 5.0), (8, 4, 4.0), (2, 2, 4.0), (6, 3, 4.0)])
    def test_linear_classifier_reaches_95(self, K, d, sep):
        assert lda_accuracy(make_task(K, d, 0, separation=sep)) >= 0.95

    def test_too_few_classes(self):
        with pytest.raises(ConfigurationError):
            make_task(1, 2, 0)

    def test_separation_floor(self):
        with pytest.raises(ConfigurationError):
            make_task(3, 2, 0, separation=3.0)


class TestApplyDomain:
    def test_identity(self):
        batch = nn.Batch(np.random.default_rng(0).normal(size=(5, 3)), np.arange(5))
        out = apply_domain(batch, DomainSpec(0), 0)
        np.testing.assert_array_equal(out.inputs, batch.inputs)

    def test_labels_unchanged(self, catalog):
        labels = np.array([3, 1, 0, 2])
        batch = nn.Batch(np.ones((4, 4)), labels.copy())
        for dom in catalog:
            np.testing.assert_array_equal(apply_domain(batch, dom, 1).labels, labels)

    def test_closed_form_without_noise(self):
        dom = DomainSpec(0, rotation=np.pi / 2, plane=(0, 1), scale=2.0, shift=(1.0, 0.0))
        out = apply_domain(nn.Batch(np.array([[1.0, 0.0]])), dom, 0)
        np.testing.assert_allclose(out.inputs, [[1.0, 2.0]], atol=1e-12)

    def test_rotation_orthogonal(self, catalog):
        for dom in catalog:
            R = dom.rotation_matrix(4)
            np.testing.assert_allclose(R @ R.T, np.eye(4), atol=1e-12)

    def test_noise_deterministic(self):
        dom = DomainSpec(0, noise_std=0.5)
        batch = nn.Batch(np.zeros((3, 2)))
        a = apply_domain(batch, dom, [1, 2, 3]).inputs
        np.testing.assert_array_equal(a, apply_domain(batch, dom, [1, 2, 3]).inputs)
        assert not np.array_equal(a, apply_domain(batch, dom, [1, 2, 4]).inputs)

    def test_shift_width(self):
        with pytest.raises(ShapeError):
            apply_domain(nn.Batch(np.zeros((2, 3))), DomainSpec(0, shift=(1.0, 1.0)), 0)

    def test_invalid_specs(self):
        with pytest.raises(ConfigurationError):
            DomainSpec(0, scale=0.0)
        with pytest.raises(ConfigurationError):
            DomainSpec(0, noise_std=-1.0)
        with pytest.raises(ConfigurationError):
            DomainSpec(0, severity=6)


class TestCatalog:
    def test_fifteen_named(self, catalog):
        assert [d.name for d in catalog] == list(CATALOG_NAMES)
        assert [d.domain_id for d in catalog] == list(range(15))

    def test_severity_scales_magnitudes(self):
        lo, hi = default_catalog(4, severity=1), default_catalog(4, severity=5)
        for a, b in zip(lo, hi):
            assert abs(b.rotation) == pytest.approx(5 * abs(a.rotation))
            assert b.noise_std == pytest.approx(5 * a.noise_std)
            assert abs(np.log(b.scale)) == pytest.approx(5 * abs(np.log(a.scale)))

    def test_severity_lowers_source_accuracy(self):
        task = make_task(4, 4, 0)
        model = nn.pretrain_source(nn.init_model(nn.ModelSpec(4, (16,), 4), 0), task.train,
                                   epochs=10)
        acc = {}
        for sev in (1, 3, 5):
            scores = []
            for seed in range(10):
                cat = default_catalog(4, severity=sev, seed=seed)
                rng = np.random.default_rng(seed)
                for dom in cat:
                    batch = apply_domain(task.sample(50, rng), dom, [seed, dom.domain_id])
                    scores.append(nn.accuracy(model, batch))
            acc[sev] = np.mean(scores)
        assert acc[1] >= acc[3] >= acc[5]
        assert acc[5] < acc[1]


class TestSchedule:
    @pytest.mark.parametrize("clusters,expected", [(4, 0.2), (1, 0.05), (20, 1.0)])
    def test_sh_values(self, catalog, clusters, expected):
        sched = build_schedule(20, 30, clusters, 10, catalog)
        assert compute_sh(sched, 0) == pytest.approx(expected)

    def test_uneven_groups(self, catalog):
        sched = build_schedule(10, 20, 3, 5, catalog)
        assert np.bincount(sched.cluster_of).tolist() == [4, 3, 3]
        assert compute_sh(sched, 7) == pytest.approx(0.3)

    def test_cluster_members_share_sequence(self, catalog):
        sched = build_schedule(12, 40, 3, 4, catalog, seed=2)
        for c in range(3):
            rows = sched.assignment[sched.cluster_of == c]
            assert np.all(rows == rows[0])

    def test_contiguous(self, catalog):
        sched = build_schedule(7, 5, 3, 1, catalog)
        assert np.all(np.diff(sched.cluster_of) >= 0)

    def test_change_every_slot(self, catalog):
        sched = build_schedule(20, 30, 4, 1, catalog)
        assert all(compute_th(sched, i) == 1.0 for i in range(20))

    def test_period_two(self):
        sched = DriftSchedule(np.array([[0, 0, 1, 1, 0, 0, 1, 1, 0, 0]]), [0], [])
        assert compute_th(sched, 0) == 0.5

    def test_constant_source(self):
        sched = DriftSchedule(np.full((1, 12), -1), [0], [])
        assert compute_th(sched, 0) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 20), st.integers(1, 8))
    def test_th_matches_period(self, n, period, cycles):
        cat = default_catalog(3)
        T = period * cycles
        sched = build_schedule(n, T, 1, period, cat)
        # one change at slot 0 then one every period
        assert compute_th(sched, 0) == pytest.approx(cycles / T)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 30), st.data())
    def test_sh_matches_clusters(self, N, data):
        k = data.draw(st.integers(1, min(N, 15)))
        sched = build_schedule(N, 16, k, 1, default_catalog(3))
        assert compute_sh(sched, 0) == pytest.approx(k / N)

    def test_errors(self, catalog):
        with pytest.raises(ConfigurationError):
            build_schedule(4, 4, 2, 1, [])
        with pytest.raises(ConfigurationError):
            build_schedule(4, 4, 5, 1, catalog)
        with pytest.raises(ConfigurationError):
            build_schedule(4, 4, 2, 0, catalog)
        sched = build_schedule(4, 4, 2, 1, catalog)
        with pytest.raises(IndexError):
            compute_sh(sched, 4)
        with pytest.raises(IndexError):
            compute_th(sched, -1)


@pytest.fixture(scope="module")
def world(catalog):
    return make_task(4, 4, 0), build_schedule(6, 10, 2, 2, catalog)


class TestStream:
    def test_deterministic(self, world):
        task, sched = world
        a = stream_batch(task, sched, 2, 3, 1, seed=5)
        b = stream_batch(task, sched, 2, 3, 1, seed=5)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_default_size(self, world):
        assert len(stream_batch(*world, 0, 0)) == 10

    def test_same_cluster_same_domain_different_samples(self, world):
        task, sched = world
        assert sched.cluster_of[0] == sched.cluster_of[1]
        assert sched.domain(0, 4) == sched.domain(1, 4)
        a, b = stream_batch(task, sched, 0, 4), stream_batch(task, sched, 1, 4)
        assert not np.array_equal(a.inputs, b.inputs)

    def test_out_of_range(self, world):
        with pytest.raises(IndexError):
            stream_batch(*world, 6, 0)
        with pytest.raises(IndexError):
            stream_batch(*world, 0, 10)


def test_export(tmp_path, catalog):
    sched = build_schedule(4, 6, 2, 3, catalog)
    path = tmp_path / "schedule.json"
    export_schedule(sched, path)
    doc = json.loads(path.read_text())
    assert doc["assignment"] == sched.assignment.tolist()
    assert doc["sh"] == [0.5] * 6
    assert len(doc["th"]) == 4 and len(doc["catalog"]) == 15
