import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protolab import autodiff as ad
from protolab.autodiff import Tape, Tensor, backward
from protolab.model import (CheckpointError, ModelConfig, PrototypeBank, ProtoPNet, classify, pool_scores,
                            push_prototypes, similarity, similarity_map, upsample_activation)

EPS = 1e-4


class TestSimilarity:
    def test_zero_distance(self):
        assert abs(similarity(0.0, EPS) - math.log(1 / EPS)) < 1e-9
        assert abs(similarity(0.0, EPS) - 9.21034) < 1e-5

    def test_unit_distance(self):
        assert abs(similarity(1.0, EPS) - 0.69305) < 1e-5

    def test_far_limit(self):
        assert similarity(1e9, EPS) < 1e-8

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            similarity(-1e-3, EPS)

    @pytest.mark.parametrize("eps", [0.0, 1.0, -0.1])
    def test_eps_range(self, eps):
        with pytest.raises(ValueError):
            similarity(1.0, eps)

    def test_strictly_decreasing_on_log_grid(self):
        s = similarity(np.logspace(-6, 6, 100), EPS)
        assert np.all(np.diff(s) < 0)

    def test_analytic_derivative(self):
        d = np.logspace(-3, 3, 50)
        analytic = 1 / (d + 1) - 1 / (d + EPS)
        (g,) = _grad(lambda t: ad.sum(ad.log_similarity(t, EPS)), d)
        np.testing.assert_allclose(g, analytic, rtol=1e-12)
        h = 1e-6 * d
        numeric = (similarity(d + h, EPS) - similarity(d - h, EPS)) / (2 * h)
        np.testing.assert_allclose(numeric, analytic, rtol=1e-6)


def _grad(fn, *arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    backward(tape, out)
    return [t.grad for t in leaves]


def _bank(vectors, class_of):
    return PrototypeBank(Tensor(np.asarray(vectors, dtype=float)), np.asarray(class_of))


class TestSimilarityMap:
    @pytest.mark.parametrize("mode", ["squared", "euclidean"])
    def test_hand_built_2x2(self, mode):
        z = np.array([[[0.1, 0.9], [0.5, 0.3]], [[0.2, 0.4], [0.8, 0.6]]])  # [D=2, 2, 2]
        p = np.array([[0.3, 0.7]])
        cfg = ModelConfig(distance_mode=mode)
        got = similarity_map(Tensor(z), _bank(p, [0]), cfg).data
        for i in range(2):
            for j in range(2):
                d = np.sum((z[:, i, j] - p[0]) ** 2)
                d = d if mode == "squared" else math.sqrt(d)
                assert abs(got[0, i, j] - similarity(d, EPS)) < 1e-12

    def test_exact_match_gives_max(self):
        rng = np.random.default_rng(0)
        z = rng.random((4, 3, 3))
        got = similarity_map(Tensor(z), _bank([z[:, 2, 1]], [0]), ModelConfig()).data
        assert abs(got[0, 2, 1] - math.log(1 / EPS)) < 1e-9
        assert np.argmax(got[0]) == 2 * 3 + 1

    def test_constant_latent(self):
        z = np.full((4, 3, 3), 0.4)
        got = similarity_map(Tensor(z), _bank(np.random.default_rng(1).random((2, 4)), [0, 1]), ModelConfig()).data
        assert np.all(got == got[:, :1, :1])

    def test_dimension_mismatch(self):
        with pytest.raises(ad.ShapeError):
            similarity_map(Tensor(np.zeros((4, 2, 2))), _bank(np.zeros((1, 3)), [0]), ModelConfig())

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from(["squared", "euclidean"]))
    def test_range(self, seed, mode):
        rng = np.random.default_rng(seed)
        z, p = rng.random((5, 3, 4)), rng.random((6, 5))
        got = similarity_map(Tensor(z), _bank(p, np.arange(6) % 2), ModelConfig(distance_mode=mode)).data
        assert np.all(got > 0) and np.all(got <= math.log(1 / EPS))


class TestPoolingAndClassify:
    def test_spike(self):
        m = np.zeros((2, 3, 3))
        m[0, 1, 2], m[1, 0, 0] = 5.0, 2.0
        pooled = pool_scores(Tensor(m))
        np.testing.assert_array_equal(pooled.scores.data, [5.0, 2.0])
        np.testing.assert_array_equal(pooled.locations, [[1, 2], [0, 0]])

    def test_constant_ties_to_origin(self):
        pooled = pool_scores(Tensor(np.full((3, 2, 2), 1.5)))
        np.testing.assert_array_equal(pooled.locations, np.zeros((3, 2)))

    def test_random_matches_max(self):
        m = np.random.default_rng(2).random((4, 5, 5))
        pooled = pool_scores(Tensor(m))
        np.testing.assert_array_equal(pooled.scores.data, m.max(axis=(1, 2)))
        for l, (r, c) in enumerate(pooled.locations):
            assert m[l, r, c] == m[l].max()

    def test_classify_dominant_prototype(self):
        last = np.kron(np.eye(3), np.ones((1, 2)))  # 3 classes x 6 prototypes
        scores = np.array([0.1, 0.1, 0.2, 0.1, 4.0, 0.1])
        _, pred = classify(Tensor(scores), Tensor(last))
        assert pred == 2

    def test_classify_zero_scores(self):
        logits, pred = classify(Tensor(np.zeros(6)), Tensor(np.ones((3, 6))))
        np.testing.assert_array_equal(logits.data, 0.0)
        assert pred == 0


class TestModel:
    def test_reference_latent_shape(self):
        model = ProtoPNet.initialize(ModelConfig(), np.random.default_rng(0))
        z = model.embed(np.zeros((3, 64, 64)))
        assert z.shape == (32, 8, 8)
        assert np.all((z.data > 0) & (z.data < 1))

    def test_wrong_image_shape(self, fresh_model):
        with pytest.raises(ad.ShapeError):
            fresh_model.embed(np.zeros((3, 32, 32)))

    def test_last_layer_init(self, fresh_model):
        w = fresh_model.last_layer.data
        own = fresh_model.bank.class_of[None, :] == np.arange(3)[:, None]
        assert np.all(w[own] == 1.0) and np.all(w[~own] == -0.5)

    def test_identical_images_identical_latents(self, fresh_model):
        x = np.random.default_rng(0).random((3, 64, 64))
        assert np.array_equal(fresh_model.embed(x).data, fresh_model.embed(x.copy()).data)

    def test_trained_model_separates_black_and_white(self, tiny_model):
        a = tiny_model.embed(np.zeros((3, 64, 64))).data
        b = tiny_model.embed(np.ones((3, 64, 64))).data
        assert not np.allclose(a, b)

    def test_pipeline_equals_forward(self, tiny_model, tiny_data):
        images = tiny_data.test.images
        mono = tiny_model.predict(images)
        for x, expected in zip(images, mono):
            sim = similarity_map(tiny_model.embed(x), tiny_model.bank, tiny_model.config)
            _, pred = classify(pool_scores(sim).scores, tiny_model.last_layer)
            assert pred == expected

    def test_checkpoint_roundtrip(self, tiny_model, tmp_path):
        tiny_model.save(tmp_path / "m.ckpt")
        loaded = ProtoPNet.load(tmp_path / "m.ckpt")
        assert loaded.config == tiny_model.config
        for name, t in tiny_model.params.items():
            assert np.array_equal(loaded.params[name].data, t.data)
        assert loaded.bank.provenance == tiny_model.bank.provenance
        assert loaded.to_bytes() == tiny_model.to_bytes()

    def test_checkpoint_corruption(self, tiny_model):
        raw = tiny_model.to_bytes()
        with pytest.raises(CheckpointError, match="magic"):
            ProtoPNet.from_bytes(b"X" + raw[1:])
        with pytest.raises(CheckpointError, match="truncated"):
            ProtoPNet.from_bytes(raw[:-8])


class TestPush:
    def test_brute_force(self, fresh_model):
        rng = np.random.default_rng(4)
        images = rng.random((6, 3, 64, 64))
        labels = np.array([0, 1, 2, 0, 1, 2])
        z = fresh_model.latents(images)
        before = fresh_model.bank.vectors.data.copy()
        push_prototypes(fresh_model, images, labels, [f"im{i}" for i in range(6)])
        for l, vec in enumerate(before):
            best, where = np.inf, None
            for i in np.flatnonzero(labels == fresh_model.bank.class_of[l]):
                d = ((z[i] - vec[:, None, None]) ** 2).sum(axis=0)
                r, c = divmod(int(d.argmin()), d.shape[1])
                if d[r, c] < best:
                    best, where = d[r, c], (i, r, c)
            i, r, c = where
            prov = fresh_model.bank.provenance[l]
            assert (prov.image_id, prov.row, prov.col) == (f"im{i}", r, c)
            assert np.array_equal(fresh_model.bank.vectors.data[l], z[i, :, r, c])

    def test_fixed_point(self, fresh_model):
        rng = np.random.default_rng(5)
        images, labels = rng.random((3, 3, 64, 64)), np.array([0, 1, 2])
        push_prototypes(fresh_model, images, labels)
        once = fresh_model.bank.vectors.data.copy()
        push_prototypes(fresh_model, images, labels)
        assert np.array_equal(once, fresh_model.bank.vectors.data)

    def test_empty_class_rejected(self, fresh_model):
        with pytest.raises(ValueError, match="class 2"):
            push_prototypes(fresh_model, np.zeros((2, 3, 64, 64)), np.array([0, 1]))

    def test_provenance_similarity(self, tiny_model, tiny_data):
        train = tiny_data.train
        for l, prov in enumerate(tiny_model.bank.provenance):
            z = tiny_model.embed(train.images[train.ids.index(prov.image_id)]).data
            d = float(np.sum((z[:, prov.row, prov.col] - tiny_model.bank.vectors.data[l]) ** 2))
            assert d <= 1e-12
            assert abs(similarity(d, EPS) - math.log(1 / EPS)) < 1e-9


class TestUpsample:
    def test_constant(self):
        heat, box = upsample_activation(np.full((8, 8), 0.3), (64, 64))
        np.testing.assert_allclose(heat, 0.3)
        assert box == (0, 64, 0, 64)

    def test_corners_preserved(self):
        heat, _ = upsample_activation(np.array([[0.0, 0.0], [0.0, 1.0]]), (4, 4))
        assert heat[0, 0] == 0.0 and heat[3, 3] == 1.0 and heat[0, 3] == 0.0 and heat[3, 0] == 0.0
        # corner-aligned: sample k sits at k/3 of the source cell spacing
        np.testing.assert_allclose(heat[1, 2], (1 / 3) * (2 / 3))
        np.testing.assert_allclose(heat[3, 1], 1 / 3)

    def test_spike_box_inside_footprint(self):
        m = np.zeros((8, 8))
        m[2, 5] = 1.0
        _, (y0, y1, x0, x1) = upsample_activation(m, (64, 64))
        scale = 63 / 7
        assert 1 * scale <= y0 and y1 - 1 <= 3 * scale
        assert 4 * scale <= x0 and x1 - 1 <= 6 * scale
