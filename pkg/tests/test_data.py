"""Synthetic generation, CSV/manifest round trips, and batch sampling."""

import inspect

import numpy as np
import pytest

import mfsan.model
import mfsan.trainer
from mfsan.data import (
    AffineMap,
    BatchSampler,
    SyntheticSpec,
    default_task_spec,
    generate_synthetic,
    load_csv,
    load_task,
    write_csv,
    write_task,
)
from mfsan.errors import ParseError, ValidationError


class TestAffineMap:
    def test_identity_default(self):
        x = np.random.default_rng(0).normal(size=(5, 4))
        np.testing.assert_allclose(AffineMap().apply(x), x, atol=0)

    def test_rotation_is_orthogonal(self):
        m = AffineMap(rotation_deg=37.0).matrix(6)
        np.testing.assert_allclose(m @ m.T, np.eye(6), atol=1e-14)

    def test_quarter_turn_in_first_plane(self):
        m = AffineMap(rotation_deg=(90.0,)).matrix(4)
        np.testing.assert_allclose(m @ np.array([1.0, 0.0, 0.0, 0.0]),
                                   [0.0, 1.0, 0.0, 0.0], atol=1e-15)

    def test_scale_and_translation(self):
        out = AffineMap(scale=2.0, translation=1.0).apply(np.ones((1, 3)))
        np.testing.assert_allclose(out, [[3.0, 3.0, 3.0]])


class TestGenerateSynthetic:
    def test_deterministic_in_seed(self):
        spec = default_task_spec(seed=7)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        for da, db in zip(a.sources, b.sources):
            assert np.array_equal(da.features, db.features)
            assert np.array_equal(da.labels, db.labels)
        assert np.array_equal(a.target_features, b.target_features)
        assert np.array_equal(a.target_labels_eval, b.target_labels_eval)

    def test_exact_class_balance(self):
        spec = default_task_spec(num_classes=3, samples_per_domain=300)
        task = generate_synthetic(spec)
        for domain in task.sources:
            counts = np.bincount(domain.labels, minlength=3)
            np.testing.assert_array_equal(counts, [100, 100, 100])
        np.testing.assert_array_equal(np.bincount(task.target_labels_eval), [100, 100, 100])

    def test_validation_lists_all_violations(self):
        spec = SyntheticSpec(num_classes=1, samples_per_domain=0,
                             class_cov_scale=-1.0)
        with pytest.raises(ValidationError) as err:
            generate_synthetic(spec)
        assert len(err.value.violations) >= 3

    def test_unbalanced_sample_count_rejected(self):
        with pytest.raises(ValidationError, match="divisible"):
            generate_synthetic(default_task_spec(num_classes=4, samples_per_domain=10))

    def test_zero_scale_transform_rejected(self):
        spec = default_task_spec()
        spec.domain_transforms = [AffineMap(), AffineMap(scale=0.0)]
        with pytest.raises(ValidationError, match="invertible"):
            generate_synthetic(spec)

    def test_class_conditional_means_follow_the_transform(self):
        means = np.array([[4.0, 0.0], [-4.0, 0.0]])
        spec = SyntheticSpec(num_classes=2, feature_dim=2, class_means=means,
                             class_cov_scale=0.25, noise_std=0.05,
                             samples_per_domain=2000, seed=3,
                             domain_transforms=[AffineMap(), AffineMap(rotation_deg=90.0)])
        task = generate_synthetic(spec)
        transformed = means @ AffineMap(rotation_deg=90.0).matrix(2).T
        per_coord_std = np.sqrt(0.25 + 0.05 ** 2)
        stderr = per_coord_std / np.sqrt(1000)
        for k in range(2):
            empirical = task.target_features[task.target_labels_eval == k].mean(axis=0)
            assert np.all(np.abs(empirical - transformed[k]) < 3 * stderr)

    def test_task_shape_fields(self):
        task = generate_synthetic(default_task_spec())
        assert task.num_sources == 2
        assert task.feature_dim == 8
        assert task.num_classes == 4
        assert task.target_features.shape == (400, 8)


class TestCsv:
    def test_round_trip_exact(self, tmp_path):
        features = np.array([[0.1, -2.5e-7, 3.0],
                             [1.0 / 3.0, 2.0, -0.0],
                             [9.999999999999999e22, -1.5, 0.25]])
        labels = np.array([0, 2, 1])
        path = tmp_path / "domain.csv"
        write_csv(path, features, labels)
        domain = load_csv(path)
        assert np.array_equal(domain.features, features)
        assert np.array_equal(domain.labels, labels)

    def test_unlabeled_when_label_column_absent(self, tmp_path):
        path = tmp_path / "plain.csv"
        path.write_text("feature_0,feature_1\n0.5,1.5\n", encoding="utf-8")
        domain = load_csv(path)
        assert domain.labels is None
        np.testing.assert_array_equal(domain.features, [[0.5, 1.5]])

    def test_inf_cell_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("feature_0,label\ninf,0\n", encoding="utf-8")
        with pytest.raises(ParseError, match="line 2"):
            load_csv(path)

    def test_non_numeric_cell_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("feature_0\n1.0\npotato\n", encoding="utf-8")
        with pytest.raises(ParseError, match="line 3"):
            load_csv(path)

    def test_ragged_row_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("feature_0,feature_1\n1.0\n", encoding="utf-8")
        with pytest.raises(ParseError, match="line 2"):
            load_csv(path)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1.0,2.0\n", encoding="utf-8")
        with pytest.raises(ParseError, match="header"):
            load_csv(path)


class TestManifest:
    def test_task_round_trip(self, tmp_path):
        task = generate_synthetic(default_task_spec(seed=5, samples_per_domain=40))
        manifest = write_task(task, tmp_path / "task")
        loaded = load_task(manifest)
        assert loaded.num_sources == task.num_sources
        assert loaded.num_classes == task.num_classes
        for a, b in zip(loaded.sources, task.sources):
            assert np.array_equal(a.features, b.features)
            assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(loaded.target_features, task.target_features)
        assert np.array_equal(loaded.target_labels_eval, task.target_labels_eval)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ParseError):
            load_task(tmp_path / "absent.json")

    def test_source_without_labels_rejected(self, tmp_path):
        outdir = tmp_path / "task"
        outdir.mkdir()
        write_csv(outdir / "source_0.csv", np.ones((2, 1)))
        write_csv(outdir / "target.csv", np.ones((2, 1)))
        (outdir / "manifest.json").write_text(
            '{"num_classes": 2, "sources": ["source_0.csv"], "target": "target.csv"}',
            encoding="utf-8")
        with pytest.raises(ParseError, match="label column"):
            load_task(outdir / "manifest.json")


class TestBatchSampler:
    def test_shuffle_epoch_partitions_domain(self):
        features = np.arange(10.0).reshape(10, 1)
        sampler = BatchSampler(features, batch_size=5, seed=0)
        seen = np.concatenate([sampler.next_batch().ravel(), sampler.next_batch().ravel()])
        assert sorted(seen.tolist()) == list(range(10))

    def test_same_seed_same_sequence(self):
        features = np.arange(20.0).reshape(20, 1)
        a = BatchSampler(features, batch_size=6, seed=42)
        b = BatchSampler(features, batch_size=6, seed=42)
        for _ in range(7):
            assert np.array_equal(a.next_batch(), b.next_batch())

    def test_with_replacement_covers_domain(self):
        features = np.arange(10.0).reshape(10, 1)
        sampler = BatchSampler(features, batch_size=1, mode="with_replacement", seed=1)
        seen = {int(sampler.next_batch()[0, 0]) for _ in range(1000)}
        assert seen == set(range(10))

    def test_labeled_batches_pair_rows(self):
        rng = np.random.default_rng(2)
        features = rng.normal(size=(12, 2))
        labels = np.arange(12)
        sampler = BatchSampler(features, labels, batch_size=4, seed=3)
        x, y = sampler.next_batch()
        for row, label in zip(x, y):
            assert np.array_equal(row, features[label])

    def test_oversized_batch_rejected_in_epoch_mode(self):
        with pytest.raises(ValidationError):
            BatchSampler(np.ones((3, 1)), batch_size=5)

    def test_state_round_trip_resumes_sequence(self):
        features = np.arange(17.0).reshape(17, 1)
        a = BatchSampler(features, batch_size=4, seed=9)
        for _ in range(3):
            a.next_batch()
        state = a.state_dict()
        b = BatchSampler(features, batch_size=4, seed=777)
        b.load_state_dict(state)
        for _ in range(10):
            assert np.array_equal(a.next_batch(), b.next_batch())


class TestLabelQuarantine:
    def test_training_modules_never_name_the_eval_field(self):
        # the training interface must be structurally unable to read target
        # labels: neither the model nor the trainer source mentions the field
        for module in (mfsan.model, mfsan.trainer):
            assert "target_labels_eval" not in inspect.getsource(module)
