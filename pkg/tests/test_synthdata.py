"""Synthetic generator and its exact Bayesian posterior oracle."""

import numpy as np
import pytest

from latentset import gaussians as gs
from latentset.errors import DataError
from latentset.gaussians import StandardPrior
from latentset.synthdata import (
    ExactPosterior,
    GeneratorSpec,
    bayes_optimal_metrics,
    exact_posterior,
    generate,
    likelihood_expert,
    observation_matrices,
)


def small_spec(**kw):
    base = dict(d=4, n_modalities=2, modality_dims=(4, 4), noise_std=(0.5, 0.5),
                task="binary", n=64, seed=3, w_mode="diagonal")
    base.update(kw)
    return GeneratorSpec(**base)


class TestGenerate:
    def test_near_noiseless_identity_observation(self):
        spec = small_spec(w_mode="identity", noise_std=(1e-12, 1e-12), n=16)
        for rec in generate(spec):
            for m in range(2):
                np.testing.assert_allclose(rec.modalities[m], rec.z_true, atol=1e-9)

    def test_latent_sample_mean_lln_bound(self):
        spec = GeneratorSpec(d=4, n_modalities=1, modality_dims=(4,), noise_std=(0.5,),
                             task="binary", n=10**5, seed=5, w_mode="diagonal")
        z = np.stack([r.z_true for r in generate(spec)])
        bound = 4.0 / np.sqrt(spec.n)
        assert np.all(np.abs(z.mean(axis=0)) < bound)

    def test_fixed_seed_bit_identical(self):
        a = generate(small_spec())
        b = generate(small_spec())
        for ra, rb in zip(a, b):
            assert ra.id == rb.id and ra.label == rb.label
            for m in range(2):
                np.testing.assert_array_equal(ra.modalities[m], rb.modalities[m])
            np.testing.assert_array_equal(ra.z_true, rb.z_true)

    def test_zero_records(self):
        assert generate(small_spec(n=0)) == []

    def test_class_balance_near_target(self):
        spec = small_spec(n=4000, task="binary")
        labels = np.array([r.label for r in generate(spec)])
        assert abs(labels.mean() - 0.30) < 0.04

    def test_invalid_specs_rejected(self):
        with pytest.raises(DataError, match="positive"):
            small_spec(noise_std=(0.5, 0.0))
        with pytest.raises(DataError, match="task"):
            small_spec(task="survival")
        with pytest.raises(DataError, match="w_mode"):
            small_spec(w_mode="dense", modality_dims=(3, 3))


class TestExactPosterior:
    def test_empty_mask_returns_prior(self):
        spec = small_spec()
        rec = generate(spec)[0]
        post = exact_posterior(spec, rec, np.zeros(2))
        np.testing.assert_array_equal(post.mean, np.zeros(4))
        np.testing.assert_array_equal(post.cov, np.eye(4))

    def test_scalar_hand_case(self):
        # one modality, W=1, sigma=1, x=2: precision 2, mean 1, var 1/2
        spec = GeneratorSpec(d=1, n_modalities=1, modality_dims=(1,), noise_std=(1.0,),
                             task="binary", n=1, seed=0, w_mode="identity")
        rec = generate(spec)[0]
        rec = type(rec)(id=rec.id, modalities=(np.array([2.0]),), mask=rec.mask,
                        label=rec.label, z_true=rec.z_true)
        post = exact_posterior(spec, rec, np.ones(1))
        assert post.mean[0] == pytest.approx(1.0, abs=1e-14)
        assert post.cov[0, 0] == pytest.approx(0.5, abs=1e-14)

    def test_covariance_trace_monotone_in_evidence(self):
        spec = small_spec(w_mode="diagdom", modality_dims=(6, 5), d=4)
        rec = generate(spec)[0]
        t_none = np.trace(exact_posterior(spec, rec, np.zeros(2)).cov)
        t_one = np.trace(exact_posterior(spec, rec, np.array([1, 0])).cov)
        t_both = np.trace(exact_posterior(spec, rec, np.ones(2)).cov)
        assert t_none >= t_one >= t_both

    def test_bayesian_calibration_identity(self):
        # mean squared error of the posterior mean equals the posterior trace
        spec = small_spec(n=10**4, w_mode="diagdom", modality_dims=(6, 5), d=4)
        records = generate(spec)
        mask = np.ones(2)
        sq = []
        traces = []
        for rec in records:
            post = exact_posterior(spec, rec, mask)
            sq.append(float(np.sum((rec.z_true - post.mean) ** 2)))
            traces.append(float(np.trace(post.cov)))
        ratio = np.mean(sq) / np.mean(traces)
        assert abs(ratio - 1.0) < 0.05

    def test_diagonal_spec_poe_identity(self):
        spec = small_spec(n_modalities=3, modality_dims=(4, 4, 4),
                          noise_std=(0.5, 0.7, 0.6))
        rec = generate(spec)[0]
        experts = [likelihood_expert(spec, rec, m) for m in range(3)]
        fused = gs.poe_fuse(experts, StandardPrior(4))
        truth = exact_posterior(spec, rec, np.ones(3)).diagonalized()
        np.testing.assert_allclose(fused.mean, truth.mean, atol=1e-10)
        np.testing.assert_allclose(np.exp(fused.log_var), np.exp(truth.log_var), atol=1e-10)

    def test_likelihood_expert_requires_diagonal_gram(self):
        spec = small_spec(w_mode="diagdom", modality_dims=(6, 5), d=4)
        rec = generate(spec)[0]
        with pytest.raises(Exception, match="diagonal"):
            likelihood_expert(spec, rec, 0)

    def test_spd_validation(self):
        with pytest.raises(np.linalg.LinAlgError):
            ExactPosterior(mean=np.zeros(2), cov=-np.eye(2))


class TestBayesMetrics:
    def test_noiseless_threshold_task_is_perfectly_separable(self):
        spec = GeneratorSpec(d=3, n_modalities=1, modality_dims=(3,), noise_std=(1e-9,),
                             task="binary_threshold", n=300, seed=7, w_mode="identity")
        report = bayes_optimal_metrics(spec, generate(spec), mask_level=0.0, n_mc=200)
        assert report.metrics["auroc"] == 1.0

    def test_fully_masked_evidence_scores_at_chance(self):
        spec = small_spec(n=1000, task="binary", seed=11)
        records = generate(spec)
        report = bayes_optimal_metrics(spec, records, mask_override=np.zeros(2), n_mc=100)
        labels = np.array([r.label for r in records])
        n_pos = int(labels.sum())
        n_neg = len(labels) - n_pos
        sigma_null = np.sqrt((n_pos + n_neg + 1) / (12.0 * n_pos * n_neg))
        assert abs(report.metrics["auroc"] - 0.5) < 3 * sigma_null

    def test_regression_mse_degrades_with_missingness(self):
        # more evidence never hurts the Bayes predictor, in expectation:
        # paired per-record squared errors, 3-sigma bound on the mean gap
        spec = small_spec(n=1200, task="regression", seed=13,
                          n_modalities=2, modality_dims=(4, 4))
        records = generate(spec)
        from latentset.synthdata import task_map
        _, _, v = task_map(spec)
        labels = np.array([r.label for r in records])

        def per_record_sq(level):
            rep_scores = []
            from latentset.viewgen import mask_for_index, sweep_masks
            masks = sweep_masks(2, level)
            for i, rec in enumerate(records):
                post = exact_posterior(spec, rec, mask_for_index(masks, i))
                rep_scores.append(float(post.mean @ v))
            return (np.array(rep_scores) - labels) ** 2

        diff = per_record_sq(0.5) - per_record_sq(0.0)
        se = diff.std(ddof=1) / np.sqrt(len(diff))
        assert diff.mean() > -3 * se

    def test_structure_frozen_per_seed(self):
        w1 = observation_matrices(small_spec())
        w2 = observation_matrices(small_spec())
        for a, b in zip(w1, w2):
            np.testing.assert_array_equal(a, b)
