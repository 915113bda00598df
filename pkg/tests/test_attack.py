import numpy as np
import pytest

from protolab import autodiff as ad
from protolab.attack import (AttackConfig, ProtocolError, SusceptibilityConfig, attack_record, cell_extent,
                             complement, location_shift_objective, objective_from_map, pgd_location_shift,
                             prototype_map, receptive_field, receptive_field_mask, select_source_patch,
                             source_cells_from_map, susceptibility_rate, validate_record)
from protolab.autodiff import Tape, Tensor
from protolab.model import BACKBONE_LAYERS

DIMS = (64, 64)


def propagated_support(cell, dims=DIMS):
    """Input pixels that can influence one latent cell, by pushing a binary mask backwards."""
    h, w = dims
    shapes = [(h, w)]
    for _, k, s, p in BACKBONE_LAYERS:
        hh, ww = shapes[-1]
        shapes.append(((hh + 2 * p - k) // s + 1, (ww + 2 * p - k) // s + 1))
    mask = np.zeros(shapes[-1], dtype=bool)
    mask[cell] = True
    for (_, k, s, p), (hh, ww) in zip(reversed(BACKBONE_LAYERS), reversed(shapes[:-1])):
        prev = np.zeros((hh, ww), dtype=bool)
        for r, c in zip(*np.nonzero(mask)):
            y0, x0 = r * s - p, c * s - p
            prev[max(y0, 0) : max(y0 + k, 0), max(x0, 0) : max(x0 + k, 0)] = True
        mask = prev
    return mask


class TestReceptiveField:
    def test_recurrence(self):
        rf = receptive_field()
        assert (rf.size, rf.jump) == (22, 8)

    @pytest.mark.parametrize("cell", [(0, 0), (3, 4), (7, 7), (0, 6)])
    def test_matches_mask_propagation(self, cell):
        np.testing.assert_array_equal(receptive_field_mask([cell], DIMS).astype(bool), propagated_support(cell))

    def test_interior_cell_side(self):
        y0, y1, x0, x1 = cell_extent((4, 4), receptive_field(), DIMS)
        assert y1 - y0 == 22 and x1 - x0 == 22

    def test_full_grid_covers_image(self):
        cells = [(r, c) for r in range(8) for c in range(8)]
        assert receptive_field_mask(cells, DIMS).all()

    def test_distant_cells_union(self):
        m = receptive_field_mask([(0, 0), (7, 7)], DIMS)
        expected = receptive_field_mask([(0, 0)], DIMS) + receptive_field_mask([(7, 7)], DIMS)
        np.testing.assert_array_equal(m, expected)
        assert m.max() == 1.0

    def test_gradient_support_inside_mask(self, fresh_model):
        x = Tensor(np.random.default_rng(0).random((3, 64, 64)), requires_grad=True)
        with Tape() as tape:
            out = ad.sum(ad.getitem(fresh_model.embed(x), (slice(None), 3, 5)))
        ad.backward(tape, out)
        support = np.abs(x.grad).sum(axis=0) > 0
        assert not np.any(support & ~receptive_field_mask([(3, 5)], DIMS).astype(bool))


class TestSourceSelection:
    def test_unique_max(self):
        m = np.zeros((4, 4))
        m[2, 3] = 1.0
        assert source_cells_from_map(m) == [(2, 3)]

    def test_constant_map_all_cells(self):
        assert len(source_cells_from_map(np.ones((3, 3)))) == 9

    def test_top_n_sort_oracle(self):
        m = np.random.default_rng(1).random((5, 5))
        cells = source_cells_from_map(m, "top_n", 3)
        flat = sorted(((m[r, c], (r, c)) for r in range(5) for c in range(5)), reverse=True)
        assert cells == [rc for _, rc in flat[:3]]

    def test_misclassified_rejected(self, tiny_model, tiny_data):
        x = tiny_data.test.images[0]
        wrong = (int(tiny_model.predict(x)) + 1) % 3
        with pytest.raises(ProtocolError):
            select_source_patch(tiny_model, x, 0, wrong)
        assert select_source_patch(tiny_model, x, 0)

    def test_complement(self):
        assert complement([(0, 0)], (2, 2)) == [(0, 1), (1, 0), (1, 1)]


class TestObjective:
    def test_two_cells(self):
        g = Tensor(np.array([[0.3, 1.0], [2.0, 5.0]]))
        assert objective_from_map(g, [(0, 0)], [(1, 1)]).item() == pytest.approx(4.7)

    def test_constant_map_zero(self):
        g = Tensor(np.full((3, 3), 2.0))
        assert objective_from_map(g, [(0, 0), (1, 1)], [(2, 2)]).item() == 0.0

    def test_identical_sets_zero(self, tiny_model, tiny_data):
        x = tiny_data.test.images[0]
        val = location_shift_objective(tiny_model, x, [(1, 1)], [(1, 1)], 0, check_overlap=False)
        assert val.item() == 0.0

    def test_overlap_rejected(self, tiny_model, tiny_data):
        with pytest.raises(ValueError, match="overlap"):
            location_shift_objective(tiny_model, tiny_data.test.images[0], [(1, 1)], [(1, 1), (2, 2)], 0)

    def test_image_gradient(self, tiny_model, tiny_data):
        x0 = tiny_data.test.images[1]
        src, tgt = [(2, 2)], [(6, 5), (0, 7)]
        fn = lambda t: location_shift_objective(tiny_model, t, src, tgt, 1)
        xt = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            out = fn(xt)
        ad.backward(tape, out)
        rng = np.random.default_rng(0)
        for _ in range(3):
            v = rng.normal(size=x0.shape)
            h = 1e-5
            numeric = (fn(Tensor(x0 + h * v)).item() - fn(Tensor(x0 - h * v)).item()) / (2 * h)
            assert np.sum(xt.grad * v) == pytest.approx(numeric, rel=1e-3)


class TestPGD:
    def _setup(self, model, data):
        x, y = data.test.images, data.test.labels
        i = int(np.flatnonzero(model.predict(x) == y)[0])
        proto = int(np.argmax(model.pooled_scores(x[i])))
        src = select_source_patch(model, x[i], proto, int(y[i]))
        far = [(7 - src[0][0], 7 - src[0][1])]
        return x[i], int(y[i]), proto, src, far

    def test_zero_iterations(self, tiny_model, tiny_data):
        x, y, p, src, tgt = self._setup(tiny_model, tiny_data)
        r = pgd_location_shift(tiny_model, x, p, src, tgt, AttackConfig(iterations=0), y)
        assert np.all(r.delta == 0) and r.objective_after == r.objective_before

    def test_constraints_and_improvement(self, tiny_model, tiny_data):
        x, y, p, src, tgt = self._setup(tiny_model, tiny_data)
        r = pgd_location_shift(tiny_model, x, p, src, tgt, AttackConfig(iterations=10), y)
        assert np.max(np.abs(r.delta)) <= 8 / 255 + 1e-12
        assert np.all(r.delta[:, r.mask == 0] == 0)
        assert (x + r.delta).min() >= 0 and (x + r.delta).max() <= 1
        assert r.objective_after >= r.objective_before
        assert validate_record(attack_record(r, x)) == []

    def test_full_image_mask(self, tiny_model, tiny_data):
        x, y, p, src, tgt = self._setup(tiny_model, tiny_data)
        r = pgd_location_shift(tiny_model, x, p, src, tgt, AttackConfig(iterations=2, mask_mode="full_image"), y)
        assert r.mask.all()

    def test_deterministic(self, tiny_model, tiny_data):
        x, y, p, src, tgt = self._setup(tiny_model, tiny_data)
        a = pgd_location_shift(tiny_model, x, p, src, tgt, AttackConfig(iterations=3), y)
        b = pgd_location_shift(tiny_model, x, p, src, tgt, AttackConfig(iterations=3), y)
        assert np.array_equal(a.delta, b.delta) and a.record() == b.record()

    def test_step_above_budget_rejected(self):
        with pytest.raises(ValueError):
            AttackConfig(budget=1 / 255, step=2 / 255)

    def test_validator_catches_violations(self):
        rec = {"delta_linf": 0.1, "budget": 8 / 255, "delta_off_mask_linf": 0.01, "attacked_min": -0.1,
               "attacked_max": 1.0}
        assert len(validate_record(rec)) == 3


class TestSusceptibility:
    def test_zero_budget(self, tiny_model, tiny_data):
        cfg = SusceptibilityConfig(k=2, n_images=3, budget=0.0, step=0.0, iterations=3)
        res = susceptibility_rate(tiny_model, tiny_data.test.images, tiny_data.test.labels, cfg)
        # a prototype whose peak is tied across cells could count without noise; none are here
        assert res.rate == 0.0
        assert all(np.all(a.delta == 0) for a in res.attacks)

    def test_success_iff_argmax_leaves_source(self, tiny_model, tiny_data):
        cfg = SusceptibilityConfig(k=2, n_images=3, iterations=5)
        res = susceptibility_rate(tiny_model, tiny_data.test.images, tiny_data.test.labels, cfg,
                                  tiny_data.test.ids)
        assert res.n_images == 3 and len(res.attacks) == 6
        for a in res.attacks:
            assert a.success == (tuple(a.location_after) not in set(map(tuple, a.source)))

    def test_too_few_correct_images(self, tiny_model, tiny_data):
        cfg = SusceptibilityConfig(k=1, n_images=500, iterations=1)
        res = susceptibility_rate(tiny_model, tiny_data.test.images, tiny_data.test.labels, cfg)
        n_correct = int(np.sum(tiny_model.predict(tiny_data.test.images) == tiny_data.test.labels))
        assert res.n_images == n_correct

    def test_batched_map_matches_single(self, tiny_model, tiny_data):
        x = tiny_data.test.images[:3]
        batched = prototype_map(tiny_model, x, [0, 3, 5]).data
        for i, p in enumerate([0, 3, 5]):
            np.testing.assert_allclose(batched[i], prototype_map(tiny_model, x[i], p).data, rtol=1e-12)
