"""View sampling, keep/hold partitions, and deterministic mask sweeps."""

import itertools

import numpy as np
import pytest

from latentset.encoder import PatientRecord
from latentset.errors import NoEvidenceError, ShapeError
from latentset.seeding import derive_rng
from latentset.viewgen import (
    View,
    ViewPolicy,
    mask_for_index,
    paired_views,
    sample_view,
    sweep_masks,
)


def make_record(seed=0, dims=(4, 3, 5), mask=None):
    rng = derive_rng("viewgen-record", seed)
    m = np.ones(len(dims), dtype=np.int8) if mask is None else np.asarray(mask)
    return PatientRecord(
        id=f"v{seed}",
        modalities=tuple(rng.normal(size=p) for p in dims),
        mask=m,
    )


class TestSampleView:
    def test_no_drop_policy_reproduces_record(self):
        rec = make_record()
        policy = ViewPolicy(p_modality_drop=0.0, p_feature_drop=0.0)
        view = sample_view(rec, policy, derive_rng(0))
        np.testing.assert_array_equal(view.mask, rec.mask)
        for m in range(rec.n_modalities):
            np.testing.assert_array_equal(view.x_obs[m], rec.modalities[m])
            np.testing.assert_array_equal(view.keep[m], np.ones_like(rec.modalities[m]))
        assert view.n_held_out == 0

    def test_full_feature_drop_keeps_modality_flag(self):
        rec = make_record(dims=(6,))
        policy = ViewPolicy(p_modality_drop=0.0, p_feature_drop=1.0)
        view = sample_view(rec, policy, derive_rng(1))
        assert view.mask[0] == 1
        np.testing.assert_array_equal(view.keep[0], np.zeros(6))
        np.testing.assert_array_equal(view.x_obs[0], np.zeros(6))
        np.testing.assert_array_equal(view.x_hold[0], rec.modalities[0])
        assert view.n_held_out == 6

    def test_same_seed_identical_view(self):
        rec = make_record(seed=2)
        policy = ViewPolicy(p_modality_drop=0.5, p_feature_drop=0.4)
        v1 = sample_view(rec, policy, derive_rng(7, "view"))
        v2 = sample_view(rec, policy, derive_rng(7, "view"))
        np.testing.assert_array_equal(v1.mask, v2.mask)
        for m in range(rec.n_modalities):
            np.testing.assert_array_equal(v1.keep[m], v2.keep[m])
            np.testing.assert_array_equal(v1.x_obs[m], v2.x_obs[m])

    def test_partition_is_exact(self):
        rec = make_record(seed=3)
        policy = ViewPolicy(p_modality_drop=0.4, p_feature_drop=0.5)
        for i in range(200):
            view = sample_view(rec, policy, derive_rng(3, i))
            for m in range(rec.n_modalities):
                if view.mask[m]:
                    hold = 1.0 - view.keep[m]
                    # no entry in both, none missing
                    np.testing.assert_array_equal(view.keep[m] * hold, np.zeros_like(hold))
                    np.testing.assert_array_equal(
                        view.x_obs[m] + view.x_hold[m], rec.modalities[m]
                    )

    def test_min_keep_never_violated(self):
        # min_keep binds on roughly half the draws under this policy
        rec = make_record(seed=4, dims=(2, 2, 2, 2))
        policy = ViewPolicy(p_modality_drop=0.6, p_feature_drop=0.0, min_keep=2)
        rng = derive_rng(44)
        for _ in range(10**5):
            view = sample_view(rec, policy, rng)
            assert int(np.sum(view.mask)) >= 2

    def test_record_with_no_observed_modality_rejected(self):
        rec = make_record(seed=5, mask=[0, 0, 0])
        with pytest.raises(NoEvidenceError):
            sample_view(rec, ViewPolicy(), derive_rng(0))

    def test_respects_record_mask(self):
        rec = make_record(seed=6, mask=[1, 0, 1])
        policy = ViewPolicy(p_modality_drop=0.0, p_feature_drop=0.0)
        view = sample_view(rec, policy, derive_rng(2))
        assert view.mask[1] == 0


class TestPairedViews:
    def test_deterministic_pair(self):
        rec = make_record(seed=7)
        policy = ViewPolicy(p_modality_drop=0.5, p_feature_drop=0.2)
        a1, b1 = paired_views(rec, policy, derive_rng(9, "pair"))
        a2, b2 = paired_views(rec, policy, derive_rng(9, "pair"))
        np.testing.assert_array_equal(a1.mask, a2.mask)
        np.testing.assert_array_equal(b1.mask, b2.mask)

    def test_same_record_id(self):
        rec = make_record(seed=8)
        a, b = paired_views(rec, ViewPolicy(), derive_rng(1))
        assert a.record_id == rec.id and b.record_id == rec.id

    def test_mask_collision_frequency_matches_enumeration(self):
        # With drop probability 1/2 over M=4 modalities and min_keep=1, a view
        # mask is uniform over the 15 non-empty subsets, so a pair collides
        # with probability 15 * (1/15)^2 = 1/15.
        rec = make_record(seed=9, dims=(2, 2, 2, 2))
        policy = ViewPolicy(p_modality_drop=0.5, p_feature_drop=0.0)
        n = 10**4
        rng = derive_rng(99)
        hits = 0
        for _ in range(n):
            a, b = paired_views(rec, policy, rng)
            hits += int(np.array_equal(a.mask, b.mask))
        p = 1.0 / 15.0
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs(hits / n - p) < 3 * sigma


class TestSweepMasks:
    def test_level_zero_all_ones(self):
        masks = sweep_masks(4, 0.0)
        assert len(masks) == 1
        np.testing.assert_array_equal(masks[0], np.ones(4, dtype=np.int8))

    def test_half_level_cycles_all_weight_two_drops(self):
        masks = sweep_masks(4, 0.5)
        assert len(masks) == 6  # C(4,2)
        dropped = [tuple(np.where(m == 0)[0]) for m in masks]
        assert dropped == list(itertools.combinations(range(4), 2))
        for m in masks:
            assert int(np.sum(m)) == 2

    def test_three_quarters_keeps_single_modality(self):
        masks = sweep_masks(4, 0.75)
        for m in masks:
            assert int(np.sum(m)) == 1

    def test_dropping_everything_rejected(self):
        with pytest.raises(ShapeError, match="drop all"):
            sweep_masks(3, 0.75)
        with pytest.raises(ShapeError, match="range"):
            sweep_masks(4, 1.0)

    def test_round_robin_assignment(self):
        masks = sweep_masks(4, 0.25)
        assert len(masks) == 4
        np.testing.assert_array_equal(mask_for_index(masks, 5), masks[1])


class TestViewValidation:
    def test_inconsistent_partition_rejected(self):
        with pytest.raises(ShapeError, match="partition"):
            View(
                record_id="x",
                mask=np.array([1]),
                keep=(np.array([1.0, 0.0]),),
                x_obs=(np.array([1.0, 5.0]),),  # value present in held-out slot
                x_hold=(np.array([0.0, 0.0]),),
            )

    def test_dropped_modality_with_content_rejected(self):
        with pytest.raises(ShapeError, match="dropped"):
            View(
                record_id="x",
                mask=np.array([1, 0]),
                keep=(np.ones(2), np.ones(2)),
                x_obs=(np.ones(2), np.zeros(2)),
                x_hold=(np.zeros(2), np.zeros(2)),
            )
