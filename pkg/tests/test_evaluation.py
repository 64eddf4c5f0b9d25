import math

import numpy as np
import pytest
from scipy import stats

from uplrec.evaluation import (
    CohortSpec,
    compute_cohorts,
    evaluate,
    one_tailed_t_test,
    rank_metrics,
    validation_dcg,
)
from uplrec.factor_model import FactorModel, init_model

from conftest import make_implicit

LOG2_3 = math.log2(3.0)


class TestRankMetrics:
    def test_single_relevant_ranked_first(self):
        dcg, recall, ap = rank_metrics([2.0, 1.0, 0.5], [1, 0, 0], k=3)
        assert (dcg, recall, ap) == (1.0, 1.0, 1.0)

    def test_single_relevant_ranked_second(self):
        dcg, recall, ap = rank_metrics([2.0, 1.0], [0, 1], k=3)
        assert dcg == pytest.approx(1 / LOG2_3, abs=1e-12)  # ~0.63093
        assert recall == 1.0
        assert ap == pytest.approx(0.5)

    def test_two_relevant_ranks_one_and_three(self):
        dcg, recall, ap = rank_metrics([4.0, 3.0, 2.0, 1.0], [1, 0, 1, 0], k=3)
        assert dcg == pytest.approx(1.0 + 1.0 / 2.0, abs=1e-12)  # log2(4) = 2
        assert recall == 1.0
        assert ap == pytest.approx(0.5 * (1.0 + 2.0 / 3.0), abs=1e-12)

    def test_relevant_below_cutoff(self):
        dcg, recall, ap = rank_metrics([3.0, 2.0, 1.0], [0, 1, 1], k=2)
        assert dcg == pytest.approx(1 / LOG2_3, abs=1e-12)
        assert recall == pytest.approx(0.5)
        assert ap == pytest.approx(0.25)  # (1/2) * P@2 = (1/2)*(1/2)

    def test_cutoff_beyond_list_length(self):
        dcg, recall, ap = rank_metrics([2.0, 1.0], [1, 0], k=8)
        assert (dcg, recall, ap) == (1.0, 1.0, 1.0)

    def test_all_relevant_recall_is_min_k_n_over_n(self):
        n = 6
        scores = np.arange(n, 0, -1, dtype=float)
        rel = np.ones(n, dtype=int)
        for k in (1, 2, 3, 8):
            _, recall, _ = rank_metrics(scores, rel, k)
            assert recall == pytest.approx(min(k, n) / n)

    def test_tie_break_ascending_item_index(self):
        # equal scores: item 0 ranked before item 1
        dcg_a, _, _ = rank_metrics([1.0, 1.0], [1, 0], k=1)
        dcg_b, _, _ = rank_metrics([1.0, 1.0], [0, 1], k=1)
        assert dcg_a == 1.0 and dcg_b == 0.0

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            scores = rng.normal(0, 1, 12)
            rel = (rng.random(12) < 0.4).astype(int)
            if rel.sum() == 0:
                rel[3] = 1
            for k in (3, 5, 8):
                base = rank_metrics(scores, rel, k)
                squashed = rank_metrics(np.tanh(scores) * 7 + 2, rel, k)
                assert base == pytest.approx(squashed, abs=1e-12)

    def test_metric_ranges_and_recall_monotone(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            scores = rng.normal(0, 1, 10)
            rel = (rng.random(10) < 0.3).astype(int)
            if rel.sum() == 0:
                rel[0] = 1
            prev_recall, prev_dcg = 0.0, 0.0
            for k in (1, 2, 3, 5, 8):
                dcg, recall, ap = rank_metrics(scores, rel, k)
                assert 0 <= recall <= 1 and 0 <= ap <= 1 and dcg >= 0
                assert recall >= prev_recall - 1e-15
                assert dcg >= prev_dcg - 1e-15
                prev_recall, prev_dcg = recall, dcg

    def test_zero_relevant_rejected(self):
        with pytest.raises(ValueError):
            rank_metrics([1.0, 2.0], [0, 0], k=3)

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            rank_metrics([], [], k=3)


class TestEvaluate:
    def _two_user_setup(self):
        # user 0: test items 0,1 (0 relevant); user 1: test items 1,2 (2 relevant)
        test = make_implicit(2, 3, [
            (0, 0, 0.9, 1), (0, 1, 0.1, 0),
            (1, 1, 0.8, 1), (1, 2, 0.7, 1),
        ], split_tag="test")
        user_factors = np.array([[1.0, 0.0], [0.0, 1.0]])
        item_factors = np.array([[2.0, 0.3], [1.0, 0.5], [0.5, 1.0]])
        model = FactorModel(user_factors, item_factors)
        return model, test

    def test_hand_built_average(self):
        model, test = self._two_user_setup()
        # user 0 scores: items (2.0, 1.0, 0.5); relevant = {0} at rank 1
        # user 1 scores: items (0.3, 0.5, 1.0); relevant = {1, 2}: ranks 1, 2
        reports = evaluate(model, test, ks=(3,), candidates="catalog")
        rep = reports[0]
        u0 = (1.0, 1.0, 1.0)
        u1_dcg = 1.0 + 1 / LOG2_3
        u1 = (u1_dcg, 1.0, 1.0)
        assert rep.dcg == pytest.approx((u0[0] + u1[0]) / 2)
        assert rep.recall == pytest.approx(1.0)
        assert rep.map == pytest.approx(1.0)
        assert rep.num_users == 2

    def test_test_only_candidates(self):
        model, test = self._two_user_setup()
        reports = evaluate(model, test, ks=(3,), candidates="test_only")
        # same rankings here because test items are top-ranked anyway
        assert reports[0].recall == pytest.approx(1.0)

    def test_oracle_model_beats_random(self):
        rng = np.random.default_rng(5)
        num_users, num_items = 30, 20
        gamma = rng.uniform(0.05, 0.95, size=(num_users, num_items))
        cells = []
        for u in range(num_users):
            for i in rng.choice(num_items, size=8, replace=False):
                g = gamma[u, i]
                cells.append((u, i, g, int(rng.random() < g)))
        test = make_implicit(num_users, num_items, cells, split_tag="test")
        # oracle model scores = gamma itself (rank-20 factorization)
        svd_u, svd_s, svd_vt = np.linalg.svd(gamma, full_matrices=False)
        oracle = FactorModel(svd_u * svd_s, svd_vt.T)
        random_model = init_model(num_users, num_items, d=20, seed=99)
        dcg_oracle = [r for r in evaluate(oracle, test, ks=(5,)) if r.cohort == "all"][0].dcg
        dcg_random = [r for r in evaluate(random_model, test, ks=(5,)) if r.cohort == "all"][0].dcg
        assert dcg_oracle > dcg_random

    def test_cold_start_cohort_empty_when_all_users_warm(self):
        train = make_implicit(2, 8, [(u, i, 0.9, 1) for u in range(2) for i in range(8)])
        test = make_implicit(2, 8, [(0, 0, 0.9, 1), (1, 1, 0.9, 1)], split_tag="test")
        cohorts = compute_cohorts(train, CohortSpec(cold_start_user_click_threshold=6))
        model = init_model(2, 8, d=2, seed=0)
        reports = evaluate(model, test, ks=(3,), cohorts=cohorts)
        assert not any(r.cohort == "cold_start_users" for r in reports)
        assert any(r.cohort == "all" for r in reports)

    def test_rare_items_cohort_restricts_credit(self):
        # item 0 popular (>= threshold clicks), item 1 rare
        train_cells = [(u, 0, 0.9, 1) for u in range(6)] + [(0, 1, 0.5, 1)]
        train = make_implicit(6, 3, train_cells)
        cohorts = compute_cohorts(train, CohortSpec(rare_item_click_threshold=3,
                                                    cold_start_user_click_threshold=1))
        assert not cohorts.rare_items[0] and cohorts.rare_items[1]
        test = make_implicit(6, 3, [(0, 0, 0.9, 1), (0, 1, 0.4, 1), (1, 0, 0.9, 1)],
                             split_tag="test")
        model = FactorModel(np.ones((6, 1)), np.array([[3.0], [2.0], [1.0]]))
        reports = evaluate(model, test, ks=(3,), cohorts=cohorts)
        rare = [r for r in reports if r.cohort == "rare_items"]
        assert len(rare) == 1
        # only user 0 has a rare relevant item; it sits at catalog rank 2
        assert rare[0].num_users == 1
        assert rare[0].dcg == pytest.approx(1 / LOG2_3)

    def test_model_dataset_dimension_check(self):
        test = make_implicit(3, 3, [(0, 0, 0.5, 1)], split_tag="test")
        with pytest.raises(ValueError):
            evaluate(init_model(2, 3, d=2, seed=0), test)


class TestValidationDcg:
    def test_perfect_and_worst_ranking(self):
        val = make_implicit(1, 3, [(0, 0, 0.9, 1), (0, 1, 0.2, 0), (0, 2, 0.2, 0)],
                            split_tag="validation")
        good = FactorModel(np.array([[1.0]]), np.array([[3.0], [2.0], [1.0]]))
        bad = FactorModel(np.array([[1.0]]), np.array([[1.0], [2.0], [3.0]]))
        assert validation_dcg(good, val, k=3) == pytest.approx(1.0)
        assert validation_dcg(bad, val, k=3) == pytest.approx(0.5)  # rank 3

    def test_users_without_val_clicks_excluded(self):
        val = make_implicit(2, 2, [(0, 0, 0.9, 1), (1, 0, 0.3, 0)],
                            split_tag="validation")
        model = FactorModel(np.ones((2, 1)), np.ones((2, 1)))
        assert validation_dcg(model, val, k=5) == pytest.approx(1.0)


class TestOneTailedTTest:
    def test_equal_samples_give_half(self):
        a = [0.5, 0.6, 0.7, 0.8]
        assert one_tailed_t_test(a, list(a)) == pytest.approx(0.5)

    def test_clear_separation(self):
        rng = np.random.default_rng(3)
        a = 1.0 + rng.normal(0, 1e-9, 4)
        b = 0.0 + rng.normal(0, 1e-9, 4)
        assert one_tailed_t_test(a, b) < 1e-6

    def test_matches_reference_implementation(self):
        a = [0.5, 0.6, 0.7]
        b = [0.4, 0.5, 0.6]
        expected = stats.ttest_ind(a, b, equal_var=False, alternative="greater").pvalue
        assert one_tailed_t_test(a, b) == pytest.approx(expected, abs=1e-6)

    def test_random_samples_match_reference(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a = rng.normal(0.2, 1.0, size=int(rng.integers(3, 30)))
            b = rng.normal(0.0, 2.0, size=int(rng.integers(3, 30)))
            expected = stats.ttest_ind(a, b, equal_var=False, alternative="greater").pvalue
            assert one_tailed_t_test(a, b) == pytest.approx(expected, abs=1e-6)

    def test_degenerate_zero_variance_flagged(self):
        with pytest.warns(UserWarning):
            p = one_tailed_t_test([1.0, 1.0], [1.0, 1.0])
        assert p == 0.5

    def test_minimum_sample_size(self):
        with pytest.raises(ValueError):
            one_tailed_t_test([1.0], [0.5, 0.6])


class TestCohortSpec:
    def test_default_thresholds(self):
        spec = CohortSpec()
        assert spec.rare_item_click_threshold == 100
        assert spec.cold_start_user_click_threshold == 6

    def test_positive_thresholds_required(self):
        with pytest.raises(ValueError):
            CohortSpec(rare_item_click_threshold=0)
