import csv

import numpy as np
import pytest

from protolab.codec import CodecConfig, compress_decompress
from protolab.corruption import (ConsistencyRecord, consistency_experiment, corrupt_dataset, summarize,
                                 top_similarity_histogram, write_histogram_csv, write_records_csv)
from protolab.data import SynthConfig, generate


@pytest.fixture(scope="module")
def ten_class():
    return generate(SynthConfig(classes=10, train_per_class=2, test_per_class=2, seed=4))


class TestCorruptDataset:
    def test_fraction_zero(self, ten_class):
        d = corrupt_dataset(ten_class, 0.0, seed=1)
        assert d.corrupted_classes == []
        assert np.array_equal(d.train.images, ten_class.train.images)

    def test_fraction_one(self, ten_class):
        d = corrupt_dataset(ten_class, 1.0, seed=1)
        assert all(not np.array_equal(a, b) for a, b in zip(d.train.images, ten_class.train.images))
        assert d.train.corrupted.all()

    def test_half_of_ten(self, ten_class):
        d = corrupt_dataset(ten_class, 0.5, seed=1)
        assert len(d.corrupted_classes) == 5
        hit = np.isin(d.test.labels, d.corrupted_classes)
        assert np.array_equal(d.test.corrupted, hit)
        assert np.array_equal(d.test.images[~hit], ten_class.test.images[~hit])
        for i in np.flatnonzero(hit):
            assert np.array_equal(d.test.images[i], compress_decompress(ten_class.test.images[i]))

    def test_seeded(self, ten_class):
        assert corrupt_dataset(ten_class, seed=3).corrupted_classes == corrupt_dataset(ten_class, seed=3).corrupted_classes

    def test_needs_two_classes(self):
        d = generate(SynthConfig(classes=1, train_per_class=1, test_per_class=1))
        with pytest.raises(ValueError):
            corrupt_dataset(d)


class TestConsistency:
    def test_protocol_filter(self, tiny_model, tiny_data):
        records = consistency_experiment(tiny_model, tiny_data.test, [1])
        test = tiny_data.test
        for r in records:
            i = test.ids.index(r.image_id)
            assert test.labels[i] == 1 and r.label == 1 and r.predicted_compressed == 1

    def test_lossless_zero_drop(self, tiny_model, tiny_data):
        records = consistency_experiment(tiny_model, tiny_data.test, [0, 1, 2],
                                         compressed_images=tiny_data.test.images)
        assert records
        for r in records:
            assert r.score_clean == r.score_compressed and r.rank_clean == 1

    def test_score_range(self, tiny_model, tiny_data):
        for r in consistency_experiment(tiny_model, tiny_data.test, [0, 1, 2]):
            assert 0 < r.score_compressed <= np.log(1e4) + 1e-12

    def test_summary_hand_built(self):
        recs = [ConsistencyRecord("a", 0, 1, 4.0, 3.0, 1, 1, 0, 0), ConsistencyRecord("b", 0, 2, 4.0, 1.0, 7, 3, 0, 0),
                ConsistencyRecord("c", 0, 3, 2.0, 2.0, 3, 5, 0, 0)]
        s = summarize(recs)
        assert s["n"] == 3
        assert s["median_relative_drop"] == 0.25
        assert s["top1_change_fraction"] == 2 / 3
        assert s["median_rank_clean"] == 3

    def test_summary_empty(self):
        assert summarize([])["n"] == 0

    def test_csv(self, tiny_model, tiny_data, tmp_path):
        records = consistency_experiment(tiny_model, tiny_data.test, [0, 1, 2])
        write_records_csv(tmp_path / "r.csv", records)
        rows = list(csv.DictReader(open(tmp_path / "r.csv")))
        assert len(rows) == len(records) and float(rows[0]["relative_drop"]) == records[0].relative_drop


class TestHistogram:
    def test_identical_pair(self, tiny_model, tiny_data):
        x = tiny_data.test.images[0]
        h = top_similarity_histogram(tiny_model, x, x, n=4)
        for direction in ("compressed_first", "clean_first"):
            assert len(h[direction]) == 4
            assert all(a == b for _, a, b in h[direction])

    def test_n_one_and_clamp(self, tiny_model, tiny_data):
        x = tiny_data.test.images[0]
        y = compress_decompress(x, CodecConfig(quality=5))
        s = tiny_model.pooled_scores(y)
        h1 = top_similarity_histogram(tiny_model, y, x, n=1)
        assert h1["compressed_first"][0][0] == int(np.argmax(s))
        assert len(top_similarity_histogram(tiny_model, y, x, n=500)["clean_first"]) == len(s)

    def test_csv(self, tiny_model, tiny_data, tmp_path):
        x = tiny_data.test.images[0]
        write_histogram_csv(tmp_path / "h.csv", top_similarity_histogram(tiny_model, x, x, n=3))
        assert len(open(tmp_path / "h.csv").read().strip().splitlines()) == 7
