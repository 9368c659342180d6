import numpy as np
import pytest

from glsim.errors import ProtocolError
from glsim.nn import GradientUpdate, LayerGrad, flatten_update
from glsim.rng import RngStream
from glsim.secagg import (
    aggregate,
    expand_mask,
    mask_and_aggregate,
    mask_update,
    setup_masks,
)


def random_update(gen, shapes=((4, 5), (3, 4))):
    return GradientUpdate(
        [LayerGrad(gen.standard_normal(s), gen.standard_normal(s[0])) for s in shapes],
        batch_size=1,
    )


def zero_update(shapes=((4, 5), (3, 4))):
    return GradientUpdate(
        [LayerGrad(np.zeros(s), np.zeros(s[0])) for s in shapes], batch_size=0
    )


class TestSetup:
    def test_two_participants_one_pair(self):
        masks = setup_masks([0, 1], RngStream(0).child("sa"))
        assert len(masks.seeds) == 1

    def test_five_participants_ten_pairs(self):
        masks = setup_masks([4, 2, 0, 1, 3], RngStream(0).child("sa"))
        assert len(masks.seeds) == 10

    def test_seed_table_is_symmetric(self):
        masks = setup_masks(range(6), RngStream(1).child("sa"))
        for u in range(6):
            for v in range(6):
                if u != v:
                    assert masks.seed_for(u, v) == masks.seed_for(v, u)

    def test_fewer_than_two_rejected(self):
        with pytest.raises(ProtocolError):
            setup_masks([7], RngStream(0))

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ProtocolError):
            setup_masks([1, 1, 2], RngStream(0))


class TestMasking:
    def test_two_zero_updates_carry_opposite_masks(self):
        masks = setup_masks([0, 1], RngStream(3).child("sa"))
        m0 = mask_update(zero_update(), 0, masks)
        m1 = mask_update(zero_update(), 1, masks)
        for a, b in zip(m0.layers, m1.layers):
            assert np.allclose(a.weights + b.weights, 0.0)
            assert np.allclose(a.bias + b.bias, 0.0)
        assert np.abs(m0.layers[0].weights).max() > 0

    def test_masked_differs_from_plain(self):
        gen = np.random.default_rng(0)
        masks = setup_masks(range(5), RngStream(4).child("sa"))
        for uid in range(5):
            upd = random_update(gen)
            masked = mask_update(upd, uid, masks)
            diff = flatten_update(GradientUpdate(masked.layers)) - flatten_update(upd)
            assert np.abs(diff).max() > 0

    def test_unknown_participant_rejected(self):
        masks = setup_masks([0, 1, 2], RngStream(5))
        with pytest.raises(ProtocolError):
            mask_update(zero_update(), 9, masks)

    def test_mask_expansion_is_deterministic(self):
        a = expand_mask(1234, 100)
        b = expand_mask(1234, 100)
        assert np.array_equal(a, b)


class TestAggregate:
    def test_zero_updates_aggregate_to_zero(self):
        masks = setup_masks(range(4), RngStream(6).child("sa"))
        masked = [mask_update(zero_update(), u, masks) for u in range(4)]
        agg = aggregate(masked, participants=range(4))
        assert np.abs(flatten_update(agg)).max() < 1e-9

    def test_aggregate_equals_plain_sum(self):
        gen = np.random.default_rng(1)
        for roster_size in (2, 5, 16):
            ids = list(range(roster_size))
            masks = setup_masks(ids, RngStream(7).child("sa", roster_size))
            plain = {u: random_update(gen) for u in ids}
            masked = [mask_update(plain[u], u, masks) for u in ids]
            agg = aggregate(masked, participants=ids)
            oracle = sum(flatten_update(plain[u]) for u in ids)
            assert np.abs(flatten_update(agg) - oracle).max() < 1e-9

    def test_mean_is_sum_over_m(self):
        gen = np.random.default_rng(2)
        ids = [0, 1, 2]
        masks = setup_masks(ids, RngStream(8).child("sa"))
        plain = {u: random_update(gen) for u in ids}
        agg = aggregate([mask_update(plain[u], u, masks) for u in ids], ids)
        mean = flatten_update(agg) / len(ids)
        oracle = sum(flatten_update(plain[u]) for u in ids) / len(ids)
        assert np.allclose(mean, oracle, atol=1e-9)

    def test_missing_participant_aborts(self):
        masks = setup_masks(range(4), RngStream(9).child("sa"))
        masked = [mask_update(zero_update(), u, masks) for u in range(3)]
        with pytest.raises(ProtocolError):
            aggregate(masked, participants=range(4))

    def test_fast_path_matches_per_user_masking(self):
        gen = np.random.default_rng(3)
        ids = list(range(6))
        masks = setup_masks(ids, RngStream(10).child("sa"))
        plain = {u: random_update(gen) for u in ids}
        slow = aggregate([mask_update(plain[u], u, masks) for u in ids], ids)
        fast = mask_and_aggregate(plain, masks)
        assert np.allclose(flatten_update(slow), flatten_update(fast), atol=1e-10)

    def test_fast_path_missing_update_aborts(self):
        gen = np.random.default_rng(4)
        masks = setup_masks([0, 1, 2], RngStream(11).child("sa"))
        with pytest.raises(ProtocolError):
            mask_and_aggregate({0: random_update(gen), 1: random_update(gen)}, masks)


class TestRosterSweep:
    def test_cancellation_across_roster_sizes(self):
        gen = np.random.default_rng(5)
        rng = RngStream(12)
        for trial in range(20):
            m = int(gen.integers(2, 65))
            ids = sorted(gen.choice(1000, size=m, replace=False).tolist())
            masks = setup_masks(ids, rng.child("sa", trial))
            plain = {u: random_update(gen, shapes=((3, 7),)) for u in ids}
            agg = mask_and_aggregate(plain, masks)
            oracle = sum(flatten_update(plain[u]) for u in ids)
            assert np.abs(flatten_update(agg) - oracle).max() < 1e-9
