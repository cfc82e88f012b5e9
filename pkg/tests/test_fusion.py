import json

import numpy as np
import pytest

from fsml import metrics, synthetic
from fsml.episodes import sample_balanced_episode
from fsml.fusion import (
    EpisodePlan,
    FusionModel,
    MetricStores,
    ScoreSampleSet,
    classify_combined,
    classify_combined_batch,
    collect_scores,
    combined_statistic,
    episode_score_tensor,
    fit_fusion,
    load_fusion,
    mvn_cdf,
    save_fusion,
)
from fsml.store import EmbeddingStore


def toy_model(seed=0, spread=1.0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3))
    sig_i = a @ a.T + np.eye(3)
    b = rng.normal(size=(3, 3))
    sig_c = b @ b.T + np.eye(3)
    return FusionModel(
        mu_intra=np.array([1.0, 1.0, 1.0]) * spread,
        sigma_intra=sig_i,
        mu_cross=np.zeros(3),
        sigma_cross=sig_c,
        n_intra=100,
        n_cross=100,
    )


class TestScoreSampleSet:
    def test_bad_shape_rejected(self):
        with pytest.raises(ValueError):
            ScoreSampleSet(intra=np.zeros((4, 2)), cross=np.zeros((4, 3)))

    def test_nonfinite_rejected(self):
        bad = np.zeros((4, 3))
        bad[0, 0] = np.inf
        with pytest.raises(ValueError):
            ScoreSampleSet(intra=bad, cross=np.zeros((4, 3)))


class TestFitFusion:
    def test_identical_samples_yield_ridge_only_diagonal(self):
        point = np.array([2.0, -1.0, 0.5])
        samples = ScoreSampleSet(
            intra=np.tile(point, (12, 1)), cross=np.tile(-point, (15, 1))
        )
        model = fit_fusion(samples)
        assert np.allclose(model.mu_intra, point)
        assert model.ridge_applied
        diag = np.diagonal(model.sigma_intra)
        assert np.all(diag > 0)
        assert np.all(diag == diag[0])
        off = model.sigma_intra - np.diag(diag)
        assert np.all(off == 0)
        ev = np.linalg.eigvalsh(model.sigma_intra)
        assert ev.min() > 0

    def test_recovers_known_gaussian(self):
        rng = np.random.default_rng(12)
        mu = np.array([3.0, -2.0, 0.7])
        a = rng.normal(size=(3, 3))
        sig = a @ a.T + 0.5 * np.eye(3)
        n = 20_000
        L = np.linalg.cholesky(sig)
        intra = rng.standard_normal((n, 3)) @ L.T + mu
        cross = rng.standard_normal((n, 3)) @ L.T - mu
        model = fit_fusion(ScoreSampleSet(intra=intra, cross=cross))
        se_mu = np.sqrt(np.diagonal(sig) / n)
        assert np.all(np.abs(model.mu_intra - mu) < 4 * se_mu)
        assert np.all(np.abs(model.sigma_intra - sig) < 6 * np.abs(sig).max() / np.sqrt(n) + 0.05)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        intra = rng.normal(size=(50, 3))
        cross = rng.normal(size=(80, 3))
        m1 = fit_fusion(ScoreSampleSet(intra=intra, cross=cross))
        perm_i = rng.permutation(50)
        perm_c = rng.permutation(80)
        m2 = fit_fusion(ScoreSampleSet(intra=intra[perm_i], cross=cross[perm_c]))
        assert np.allclose(m1.mu_intra, m2.mu_intra, atol=1e-12)
        assert np.allclose(m1.sigma_intra, m2.sigma_intra, atol=1e-12)
        assert np.allclose(m1.sigma_cross, m2.sigma_cross, atol=1e-12)

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError, match="at least 10"):
            fit_fusion(
                ScoreSampleSet(intra=np.zeros((9, 3)), cross=np.zeros((20, 3)))
            )

    def test_covariances_symmetric_and_spd(self):
        rng = np.random.default_rng(8)
        model = fit_fusion(
            ScoreSampleSet(intra=rng.normal(size=(40, 3)), cross=rng.normal(size=(60, 3)))
        )
        for sig in (model.sigma_intra, model.sigma_cross):
            assert np.allclose(sig, sig.T, atol=1e-12)
            assert np.linalg.eigvalsh(sig).min() > 0

    def test_json_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        model = fit_fusion(
            ScoreSampleSet(intra=rng.normal(size=(30, 3)), cross=rng.normal(size=(30, 3)))
        )
        p = tmp_path / "model.json"
        save_fusion(model, p)
        loaded = load_fusion(p)
        assert np.array_equal(loaded.mu_intra, model.mu_intra)
        assert np.array_equal(loaded.sigma_intra, model.sigma_intra)
        assert np.array_equal(loaded.mu_cross, model.mu_cross)
        assert np.array_equal(loaded.sigma_cross, model.sigma_cross)
        assert loaded.n_intra == model.n_intra
        doc = json.loads(p.read_text())
        assert set(doc) >= {
            "mu_intra",
            "sigma_intra",
            "mu_cross",
            "sigma_cross",
            "n_intra",
            "n_cross",
            "ridge_applied",
        }


class TestMvnCdf:
    def test_median_point_diagonal(self):
        mu = np.array([1.0, -2.0, 3.0])
        sig = np.diag([1.0, 4.0, 0.25])
        assert mvn_cdf(mu, mu, sig) == pytest.approx(0.125, abs=1e-3)

    def test_limits(self):
        mu = np.zeros(3)
        sig = np.eye(3)
        assert mvn_cdf(np.full(3, np.inf), mu, sig) == 1.0
        assert mvn_cdf(np.array([-np.inf, 1e12, 1e12]), mu, sig) == 0.0
        assert mvn_cdf(np.full(3, 1e12), mu, sig) == pytest.approx(1.0, abs=1e-9)

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(77)
        for case in range(4):
            a = rng.normal(size=(3, 3))
            sig = a @ a.T + 0.3 * np.eye(3)
            mu = rng.normal(size=3)
            x = mu + rng.normal(size=3) * np.sqrt(np.diagonal(sig))
            L = np.linalg.cholesky(sig)
            z = rng.standard_normal((2_000_000, 3)) @ L.T + mu
            mc = (z <= x).all(axis=1).mean()
            assert mvn_cdf(x, mu, sig) == pytest.approx(mc, abs=2e-3)

    def test_bitwise_determinism(self):
        rng = np.random.default_rng(1)
        sig = np.eye(3) + 0.4
        pts = rng.normal(size=(64, 3))
        a = mvn_cdf(pts, np.zeros(3), sig)
        b = mvn_cdf(pts, np.zeros(3), sig)
        assert np.array_equal(a, b)

    def test_non_spd_rejected(self):
        sig = np.eye(3)
        sig[0, 0] = -1.0
        with pytest.raises(ValueError, match="positive-definite"):
            mvn_cdf(np.zeros(3), np.zeros(3), sig)

    def test_componentwise_monotone_on_grid(self):
        model = toy_model(2)
        base = np.array([0.2, -0.1, 0.4])
        for axis in range(3):
            grid = np.tile(base, (25, 1))
            grid[:, axis] = np.linspace(-4, 4, 25)
            vals = mvn_cdf(grid, model.mu_intra, model.sigma_intra)
            assert np.all(np.diff(vals) >= -1e-3)

    def test_batch_matches_single_calls(self):
        rng = np.random.default_rng(9)
        sig = np.eye(3) * 2 + 0.5
        pts = rng.normal(size=(7, 3))
        batch = mvn_cdf(pts, np.zeros(3), sig)
        singles = [mvn_cdf(p, np.zeros(3), sig) for p in pts]
        assert np.array_equal(batch, np.asarray(singles))


class TestClassifyCombined:
    def test_single_class_always_wins(self):
        model = toy_model(3)
        t = np.array([[-5.0, 0.2, -3.0]])
        assert classify_combined(t, model) == 0

    def test_componentwise_dominant_triple_wins_with_shared_model(self):
        model = toy_model(4)
        model = FusionModel(
            mu_intra=model.mu_intra,
            sigma_intra=model.sigma_intra,
            mu_cross=model.mu_intra,
            sigma_cross=model.sigma_intra,
            n_intra=10,
            n_cross=10,
        )
        triples = np.array(
            [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.5, 0.5, -0.5]]
        )
        assert classify_combined(triples, model) == 1

    def test_statistic_lies_in_unit_interval_band(self):
        model = toy_model(5)
        rng = np.random.default_rng(0)
        stat = combined_statistic(rng.normal(size=(50, 3)), model)
        assert np.all(stat >= -1.0) and np.all(stat <= 1.0)

    def test_exact_tie_breaks_to_lowest_class_id(self):
        model = toy_model(6)
        t = np.array([[0.3, 0.3, 0.3], [0.3, 0.3, 0.3]])
        assert classify_combined(t, model, class_ids=[7, 2]) == 1

    def test_pruned_batch_agrees_with_full_scoring(self):
        model = toy_model(7)
        rng = np.random.default_rng(21)
        triples = rng.normal(size=(40, 5, 3))
        pred = classify_combined_batch(triples, model)
        stat = combined_statistic(triples.reshape(-1, 3), model).reshape(40, 5)
        full = metrics.argmax_lowest_id(stat)
        # identical up to quadrature-level near-ties in the statistic
        gap = np.sort(stat, axis=1)
        clear = (gap[:, -1] - gap[:, -2]) > 1e-3
        assert np.array_equal(pred[clear], full[clear])
        assert (pred != full).mean() < 0.05


@pytest.fixture(scope="module")
def val_store():
    spec = synthetic.SyntheticSpec(8, 12, 60, seed=13)
    return synthetic.generate(spec)[0]


class TestCollectScores:
    def test_triple_counts_one_episode(self, val_store):
        coll = collect_scores(
            MetricStores.single(val_store), EpisodePlan(5, 1, 3, 1), master_seed=5
        )
        assert coll.samples.intra.shape == (15, 3)
        assert coll.samples.cross.shape == (60, 3)

    def test_degraded_mode_flag(self, val_store):
        stores = MetricStores.single(val_store)
        assert stores.is_degraded
        three = MetricStores(euc=val_store, cos=val_store, mll=val_store)
        assert three.is_degraded  # same object three times

    def test_mismatched_stores_rejected(self, val_store):
        other = EmbeddingStore(
            dim=val_store.dim,
            features=val_store.features[:-1],
            labels=val_store.labels[:-1],
            nonneg=True,
        )
        with pytest.raises(ValueError, match="share"):
            MetricStores(euc=other, cos=val_store, mll=val_store)

    def test_per_metric_predictions_align_with_truth_labels(self, val_store):
        coll = collect_scores(
            MetricStores.single(val_store), EpisodePlan(5, 1, 3, 4), master_seed=5
        )
        for name, pred in coll.predictions.items():
            assert pred.shape == coll.true_labels.shape

    def test_aligned_distinct_stores_use_own_embeddings(self, val_store):
        # second store rescales features; euclid scores must differ while the
        # episode structure remains shared
        scaled = EmbeddingStore(
            dim=val_store.dim,
            features=val_store.features * 2.0,
            labels=val_store.labels,
            nonneg=True,
        )
        stores = MetricStores(euc=scaled, cos=val_store, mll=val_store)
        ep = sample_balanced_episode(val_store, 4, 1, 2, 3, 0)
        tens_mixed = episode_score_tensor(stores, ep, 40.0)
        tens_plain = episode_score_tensor(MetricStores.single(val_store), ep, 40.0)
        assert not np.allclose(tens_mixed[:, :, 0], tens_plain[:, :, 0])
        assert np.allclose(tens_mixed[:, :, 2], tens_plain[:, :, 2])


class TestFusionGainOracle:
    def test_combined_close_to_or_above_best_single_10k_episodes(self):
        """Synthetic score episodes with complementary per-metric noise."""
        rng = np.random.default_rng(88)
        mu_i = np.array([1.0, 1.0, 1.0])
        mu_c = np.zeros(3)
        sig = np.eye(3) * 1.5**2  # independent noise per metric

        n_fit = 5000
        intra = rng.standard_normal((n_fit, 3)) * 1.5 + mu_i
        cross = rng.standard_normal((n_fit, 3)) * 1.5 + mu_c
        model = fit_fusion(ScoreSampleSet(intra=intra, cross=cross))

        episodes = 10_000
        n_way = 5
        true_c = rng.integers(0, n_way, episodes)
        triples = rng.standard_normal((episodes, n_way, 3)) * 1.5 + mu_c
        triples[np.arange(episodes), true_c] += mu_i - mu_c

        single_acc = [
            (np.argmax(triples[:, :, k], axis=1) == true_c).mean() for k in range(3)
        ]
        pred = classify_combined_batch(triples, model)
        combined_acc = (pred == true_c).mean()
        print(
            f"\nsingle={['%.4f' % a for a in single_acc]} combined={combined_acc:.4f}"
        )
        assert combined_acc >= max(single_acc) - 0.01
