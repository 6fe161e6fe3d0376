import json

import numpy as np
import pytest

from osdg_sched import datasets
from osdg_sched.datasets import DatasetError, generate, load, sample_batch, save


def nearest_centroid_accuracy(ds) -> float:
    """Independent oracle: fit class centroids on source training data,
    classify the held-out domain's seen-class test samples."""
    train = ds.split("train")
    seen = sorted(ds.manifest.seen_class_ids)
    centroids = np.stack([train.features[train.class_ids == c].mean(axis=0) for c in seen])
    test = ds.split("test")
    mask = np.isin(test.class_ids, seen)
    x, y = test.features[mask], test.class_ids[mask]
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    pred = np.asarray(seen)[d2.argmin(axis=1)]
    return float((pred == y).mean())


class TestGenerate:
    def test_deterministic(self):
        a = generate(seed=1, samples_per_cell=12)
        b = generate(seed=1, samples_per_cell=12)
        assert a == b

    def test_different_seeds_differ(self):
        a = generate(seed=1, samples_per_cell=12)
        b = generate(seed=2, samples_per_cell=12)
        assert not np.array_equal(a.split("train").features, b.split("train").features)

    def test_zero_noise_collapses_cells(self):
        ds = generate(seed=3, samples_per_cell=10, difficulty="easy", class_noise=0.0)
        train = ds.split("train")
        for d in ds.manifest.source_domain_ids:
            for c in ds.manifest.seen_class_ids:
                rows = train.features[ds.cell_indices("train", d, c)]
                assert np.all(rows == rows[0])

    def test_easy_dataset_nearest_centroid_oracle(self):
        ds = generate(seed=1, samples_per_cell=60, difficulty="easy")
        assert nearest_centroid_accuracy(ds) > 0.9

    def test_per_cell_counts_exact(self, tiny_ds):
        m = tiny_ds.manifest
        n_val = int(round(m.val_fraction * m.samples_per_cell))
        for d in m.source_domain_ids:
            for c in m.seen_class_ids:
                n_train = tiny_ds.cell_indices("train", d, c).size
                assert n_train + tiny_ds.cell_indices("val", d, c).size == m.samples_per_cell
                assert n_train == m.samples_per_cell - n_val
        for c in range(m.num_classes):
            assert tiny_ds.cell_indices("test", m.held_out_domain_id, c).size == m.samples_per_cell

    def test_training_pool_purity(self, tiny_ds):
        m = tiny_ds.manifest
        for split in ("train", "val"):
            data = tiny_ds.split(split)
            assert not np.any(data.domain_ids == m.held_out_domain_id)
            assert set(np.unique(data.class_ids)) <= set(m.seen_class_ids)

    def test_rotations_are_orthogonal(self, tiny_ds):
        p = tiny_ds.manifest.feature_dim
        for spec in tiny_ds.manifest.domain_specs:
            q = spec.rotation(p)
            assert np.abs(q.T @ q - np.eye(p)).max() < 1e-9

    @pytest.mark.parametrize("kwargs", [
        {"num_unseen_classes": 10, "num_classes": 10},
        {"num_domains": 3},
        {"num_classes": 2},
        {"difficulty": "extreme"},
        {"samples_per_cell": 0},
        {"val_fraction": 1.0},
    ])
    def test_invalid_parameters_rejected(self, kwargs):
        with pytest.raises(DatasetError):
            generate(seed=0, **kwargs)


class TestSaveLoad:
    def test_round_trip_identity(self, tiny_ds, tmp_path):
        save(tiny_ds, tmp_path / "ds")
        assert load(tmp_path / "ds") == tiny_ds

    def test_save_is_byte_deterministic(self, tiny_ds, tmp_path):
        save(tiny_ds, tmp_path / "a")
        save(tiny_ds, tmp_path / "b")
        for name in ("manifest.json", "train.csv", "val.csv", "test.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_overlapping_seen_unseen_rejected(self, tiny_ds, tmp_path):
        save(tiny_ds, tmp_path / "ds")
        doc = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        doc["unseen_class_ids"] = doc["seen_class_ids"][:1] + doc["unseen_class_ids"][1:]
        (tmp_path / "ds" / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match="overlap"):
            load(tmp_path / "ds")

    def test_wrong_feature_count_names_line(self, tiny_ds, tmp_path):
        save(tiny_ds, tmp_path / "ds")
        path = tmp_path / "ds" / "train.csv"
        lines = path.read_text().splitlines()
        lines[4] = lines[4].rsplit(",", 1)[0]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetError, match=r"train\.csv:5"):
            load(tmp_path / "ds")

    def test_unknown_class_id_rejected(self, tiny_ds, tmp_path):
        save(tiny_ds, tmp_path / "ds")
        path = tmp_path / "ds" / "test.csv"
        lines = path.read_text().splitlines()
        parts = lines[0].split(",")
        parts[0] = "99"
        lines[0] = ",".join(parts)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetError, match="unknown class id 99"):
            load(tmp_path / "ds")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load(tmp_path / "nope")


class TestSampleBatch:
    def test_size_zero(self, tiny_ds, rng):
        assert sample_batch(tiny_ds, rng, {0}, {0}, 0) == []

    def test_single_cell_constraint(self, tiny_ds, rng):
        out = sample_batch(tiny_ds, rng, {1}, {2}, 5)
        assert len(out) == 5
        assert all(s.domain_id == 1 and s.class_id == 2 for s in out)

    def test_deterministic_given_seed(self, tiny_ds):
        def draw():
            r = np.random.Generator(np.random.PCG64(99))
            batches = [sample_batch(tiny_ds, r, {0, 1}, {0, 1, 2}, 8) for _ in range(3)]
            return [[(s.class_id, s.domain_id, tuple(s.features)) for s in b] for b in batches]

        assert draw() == draw()

    def test_empty_cell_reports_cell(self, tiny_ds, rng):
        held_out = tiny_ds.manifest.held_out_domain_id
        with pytest.raises(DatasetError, match=rf"\(domain={held_out}, class=0\)"):
            sample_batch(tiny_ds, rng, {held_out}, {0}, 4)


def test_platform_independent_values(tiny_ds, tmp_path):
    """Loading parses decimal text only, so values survive any round trip."""
    save(tiny_ds, tmp_path / "ds")
    once = load(tmp_path / "ds")
    save(once, tmp_path / "ds2")
    assert (tmp_path / "ds" / "train.csv").read_bytes() == (tmp_path / "ds2" / "train.csv").read_bytes()
    assert load(tmp_path / "ds2") == tiny_ds
