import numpy as np
import pytest

from storypoint.baselines import (
    BaselineError,
    IssueFeatureInput,
    assemble_features,
    bow_vectorize,
    cart_fit,
    cart_predict,
    cbr_estimate,
    feature_matrix,
    lasso_fit,
    mean_effort,
    median_effort,
    ols_fit,
    prune_tree,
    random_guess,
    reporter_reputation,
    rf_fit,
    rf_predict,
)
from storypoint.corpus import EOS_TOKEN, build_vocabulary
from storypoint.numerics import make_rng


class TestNaiveBenchmarks:
    def test_mean_and_median_basic(self):
        assert mean_effort([1, 2, 3]) == 2
        assert median_effort([1, 2, 3]) == 2

    def test_median_robust_to_outlier(self):
        assert mean_effort([1, 2, 9]) == 4
        assert median_effort([1, 2, 9]) == 2

    def test_singleton(self):
        assert mean_effort([5]) == 5
        assert median_effort([5]) == 5

    def test_even_median_averages_middles(self):
        assert median_effort([1, 2, 3, 10]) == 2.5

    def test_median_permutation_invariant(self):
        rng = make_rng(0)
        pts = list(rng.integers(1, 20, size=15).astype(float))
        base = median_effort(pts)
        for _ in range(10):
            rng.shuffle(pts)
            assert median_effort(pts) == base

    def test_empty_rejected(self):
        for fn in (mean_effort, median_effort):
            with pytest.raises(BaselineError):
                fn([])
        with pytest.raises(BaselineError):
            random_guess([], make_rng(0))

    def test_random_guess_constant_input(self):
        assert random_guess([3, 3, 3], make_rng(1)) == 3

    def test_random_guess_support(self):
        pts = [1.0, 5.0, 8.0]
        rng = make_rng(2)
        for _ in range(200):
            assert random_guess(pts, rng) in pts

    def test_random_guess_uniform(self):
        rng = make_rng(3)
        draws = [random_guess([1.0, 2.0], rng) for _ in range(10**5)]
        assert np.mean(draws) == pytest.approx(1.5, abs=0.01)


class TestBagOfWords:
    def test_counts_at_token_positions(self):
        vocab = build_vocabulary([["standardize", "xd", "logging"]], min_count=1)
        vec = bow_vectorize(["standardize", "xd", "logging", EOS_TOKEN], vocab)
        assert vec.sum() == 3
        for tok in ("standardize", "xd", "logging"):
            assert vec[vocab.index[tok]] == 1

    def test_empty_tokens_zero_vector(self):
        vocab = build_vocabulary([["a"]], min_count=1)
        vec = bow_vectorize([EOS_TOKEN], vocab)
        np.testing.assert_array_equal(vec, np.zeros(len(vocab)))

    def test_repeated_token_counts(self):
        vocab = build_vocabulary([["a", "b"]], min_count=1)
        vec = bow_vectorize(["a"] * 4 + [EOS_TOKEN], vocab)
        assert vec[vocab.index["a"]] == 4

    def test_oov_lands_on_unk(self):
        vocab = build_vocabulary([["a"]], min_count=1)
        vec = bow_vectorize(["mystery", "a"], vocab)
        assert vec[vocab.unk_id] == 1


def oracle_cart(x, y, rows, min_leaf):
    """Independent exhaustive-split reference: recompute child SSE directly
    for every (feature, threshold) candidate."""
    sub_y = y[rows]
    if len(rows) < 2 * min_leaf or np.all(sub_y == sub_y[0]):
        return ("leaf", float(sub_y.mean()))
    best = None
    for j in range(x.shape[1]):
        values = sorted(set(x[rows, j]))
        for lo, hi in zip(values, values[1:]):
            thr = (lo + hi) / 2
            left = rows[x[rows, j] <= thr]
            right = rows[x[rows, j] > thr]
            if len(left) < min_leaf or len(right) < min_leaf:
                continue
            sse = float(((y[left] - y[left].mean()) ** 2).sum()) + float(
                ((y[right] - y[right].mean()) ** 2).sum()
            )
            if best is None or sse < best[0] - 1e-12:
                best = (sse, j, thr, left, right)
    if best is None:
        return ("leaf", float(sub_y.mean()))
    _, j, thr, left, right = best
    return ("split", j, thr, oracle_cart(x, y, left, min_leaf), oracle_cart(x, y, right, min_leaf))


def oracle_predict(node, x):
    while node[0] == "split":
        node = node[3] if x[node[1]] <= node[2] else node[4]
    return node[1]


class TestCart:
    def test_constant_targets_single_leaf(self):
        tree = cart_fit([[1.0], [2.0], [3.0]], [7.0, 7.0, 7.0], min_leaf_size=1)
        assert tree.is_leaf and tree.value == 7.0

    def test_leaf_count_bound(self):
        x = np.arange(20.0)[:, None]
        tree = cart_fit(x, np.arange(20.0), min_leaf_size=5, prune_level=0)

        def leaves(node):
            return 1 if node.is_leaf else leaves(node.left) + leaves(node.right)

        def min_count(node):
            if node.is_leaf:
                return node.count
            return min(min_count(node.left), min_count(node.right))

        assert leaves(tree) <= 4
        assert min_count(tree) >= 5

    def test_matches_exhaustive_oracle(self):
        rng = make_rng(4)
        for trial in range(5):
            x = rng.normal(size=(12, 2))
            y = rng.normal(size=12)
            tree = cart_fit(x, y, min_leaf_size=2, prune_level=0)
            oracle = oracle_cart(x, y, np.arange(12), 2)
            for probe in rng.normal(size=(30, 2)):
                assert cart_predict(tree, probe) == pytest.approx(
                    oracle_predict(oracle, probe), rel=1e-12
                )

    def test_prune_collapses_deepest_levels(self):
        x = np.arange(8.0)[:, None]
        y = np.array([0.0, 0, 1, 1, 4, 4, 9, 9])
        full = cart_fit(x, y, min_leaf_size=1, prune_level=0)

        def height(node):
            return 0 if node.is_leaf else 1 + max(height(node.left), height(node.right))

        h = height(full)
        assert h >= 2
        pruned = cart_fit(x, y, min_leaf_size=1, prune_level=1)
        assert height(pruned) == h - 1
        stump = cart_fit(x, y, min_leaf_size=1, prune_level=h)
        assert stump.is_leaf and stump.value == pytest.approx(y.mean())

    def test_prune_tree_keeps_subtree_means(self):
        x = np.arange(8.0)[:, None]
        y = np.array([0.0, 0, 1, 1, 4, 4, 9, 9])
        tree = cart_fit(x, y, min_leaf_size=1, prune_level=0)
        pruned = prune_tree(tree, 99)
        assert pruned.is_leaf and pruned.count == 8

    def test_length_mismatch(self):
        with pytest.raises(BaselineError):
            cart_fit([[1.0], [2.0]], [1.0])


class TestRandomForest:
    def test_identical_rows_exact_prediction(self):
        x = np.ones((6, 3))
        y = np.full(6, 4.5)
        forest = rf_fit(x, y, n_trees=10, rng=make_rng(5))
        assert rf_predict(forest, np.ones(3)) == 4.5

    def test_degenerate_forest_equals_unpruned_cart(self):
        rng = make_rng(6)
        x = rng.normal(size=(15, 3))
        y = rng.normal(size=15)
        forest = rf_fit(x, y, n_trees=1, rng=make_rng(7), bootstrap=False,
                        n_features=None, min_leaf_size=5)
        tree = cart_fit(x, y, min_leaf_size=5, prune_level=0)
        for probe in rng.normal(size=(20, 3)):
            assert rf_predict(forest, probe) == cart_predict(tree, probe)

    def test_seeded_reproducibility(self):
        rng_data = make_rng(8)
        x = rng_data.normal(size=(20, 4))
        y = rng_data.normal(size=20)
        p1 = [rf_predict(rf_fit(x, y, n_trees=12, rng=make_rng(9)), row) for row in x]
        p2 = [rf_predict(rf_fit(x, y, n_trees=12, rng=make_rng(9)), row) for row in x]
        assert p1 == p2

    def test_prediction_within_tree_range(self):
        rng = make_rng(10)
        x = rng.normal(size=(25, 3))
        y = rng.uniform(1, 10, size=25)
        forest = rf_fit(x, y, n_trees=20, rng=make_rng(11))
        for probe in rng.normal(size=(10, 3)):
            per_tree = [cart_predict(t, probe) for t in forest.trees]
            assert min(per_tree) <= rf_predict(forest, probe) <= max(per_tree)


class TestCbr:
    def test_exact_match_k1(self):
        x = np.array([[0.0, 0.0], [5.0, 5.0], [9.0, 1.0]])
        y = np.array([1.0, 5.0, 8.0])
        assert cbr_estimate(x, y, [5.0, 5.0], k=1) == 5.0

    def test_k_equals_n_is_mean_effort(self):
        rng = make_rng(12)
        x = rng.normal(size=(7, 3))
        y = rng.uniform(1, 9, size=7)
        assert cbr_estimate(x, y, rng.normal(size=3), k=7) == pytest.approx(mean_effort(y))

    def test_matches_bruteforce_sort_oracle(self):
        rng = make_rng(13)
        x = rng.normal(size=(10, 4))
        y = rng.uniform(1, 9, size=10)
        for _ in range(20):
            probe = rng.normal(size=4)
            dists = [(float(np.linalg.norm(row - probe)), i) for i, row in enumerate(x)]
            dists.sort()
            expected = np.mean([y[i] for _, i in dists[:3]])
            assert cbr_estimate(x, y, probe, k=3) == pytest.approx(expected, rel=1e-12)

    def test_copied_training_set_identical(self):
        x = np.array([[0.0], [1.0], [2.0], [3.0]])
        y = np.array([1.0, 2.0, 3.0, 4.0])
        a = cbr_estimate(x, y, [1.2], k=3)
        b = cbr_estimate(x.copy(), y.copy(), [1.2], k=3)
        assert a == b

    def test_concatenated_duplicates_tie_break_by_index(self):
        # doubling the rows leaves k=1 answers unchanged: the first copy wins
        x = np.array([[0.0], [1.0], [2.0]])
        y = np.array([1.0, 2.0, 3.0])
        doubled_x = np.vstack([x, x])
        doubled_y = np.concatenate([y, y])
        for probe in ([0.2], [1.4], [2.9]):
            assert cbr_estimate(doubled_x, doubled_y, probe, k=1) == cbr_estimate(
                x, y, probe, k=1
            )

    def test_k_too_large(self):
        with pytest.raises(BaselineError):
            cbr_estimate(np.zeros((2, 1)), np.ones(2), [0.0], k=3)


class TestOls:
    def test_exact_line(self):
        x = np.arange(1.0, 6.0)[:, None]
        model = ols_fit(x, 2.0 * x[:, 0])
        assert model.coef[0] == pytest.approx(2.0, abs=1e-9)
        assert model.intercept == pytest.approx(0.0, abs=1e-9)

    def test_constant_feature_falls_back_to_mean(self):
        x = np.full((6, 1), 3.0)
        y = np.array([1.0, 2, 3, 4, 5, 6])
        model = ols_fit(x, y)
        assert model.coef[0] == pytest.approx(0.0, abs=1e-9)
        assert model.intercept == pytest.approx(y.mean(), abs=1e-9)

    def test_matches_normal_equation_oracle(self):
        rng = make_rng(14)
        x = rng.normal(size=(5, 2))
        y = rng.normal(size=5)
        a = np.hstack([x, np.ones((5, 1))])
        expected = np.linalg.inv(a.T @ a) @ a.T @ y
        model = ols_fit(x, y)
        np.testing.assert_allclose(model.coef, expected[:2], atol=1e-9)
        assert model.intercept == pytest.approx(expected[2], abs=1e-9)

    def test_predict_shape(self):
        model = ols_fit(np.arange(4.0)[:, None], np.arange(4.0))
        np.testing.assert_allclose(model.predict([[10.0]]), [10.0], atol=1e-8)


class TestLasso:
    def test_huge_budget_matches_ols(self):
        rng = make_rng(15)
        x = rng.normal(size=(30, 4))
        y = x @ np.array([2.0, -1.0, 0.5, 3.0]) + rng.normal(scale=0.1, size=30)
        ols = ols_fit(x, y)
        lasso = lasso_fit(x, y, s=1e9)
        np.testing.assert_allclose(lasso.coef, ols.coef, atol=1e-6)
        assert lasso.intercept == pytest.approx(ols.intercept, abs=1e-6)

    def test_zero_budget_gives_intercept_only(self):
        rng = make_rng(16)
        x = rng.normal(size=(20, 3))
        y = rng.uniform(1, 9, size=20)
        model = lasso_fit(x, y, s=0.0)
        np.testing.assert_array_equal(model.coef, np.zeros(3))
        assert model.intercept == pytest.approx(y.mean())
        assert model.selected == []

    def test_budget_invariant_holds(self):
        rng = make_rng(17)
        x = rng.normal(size=(40, 5))
        y = x @ np.array([4.0, 0.0, -2.0, 1.0, 0.0]) + rng.normal(size=40)
        for s in (0.5, 1.0, 2.0, 4.0):
            model = lasso_fit(x, y, s=s)
            assert np.abs(model.coef).sum() <= s + 1e-8

    def test_smaller_budget_zeroes_more_coefficients(self):
        rng = make_rng(18)
        x = rng.normal(size=(50, 6))
        y = x @ np.array([5.0, 3.0, -4.0, 0.5, 0.0, 1.5]) + rng.normal(scale=0.5, size=50)
        budgets = [0.1, 0.5, 1.5, 4.0, 10.0]
        zero_counts = [
            int(np.sum(lasso_fit(x, y, s=s).coef == 0.0)) for s in budgets
        ]
        assert zero_counts == sorted(zero_counts, reverse=True)

    def test_penalty_path_norm_monotone(self):
        rng = make_rng(19)
        x = rng.normal(size=(40, 4))
        y = x @ np.array([2.0, -3.0, 1.0, 0.0]) + rng.normal(scale=0.3, size=40)
        lams = [0.1, 1.0, 5.0, 20.0, 80.0]
        norms = [np.abs(lasso_fit(x, y, lam=lam).coef).sum() for lam in lams]
        for n1, n2 in zip(norms, norms[1:]):
            assert n1 >= n2 - 1e-10

    def test_selected_are_exact_nonzeros(self):
        rng = make_rng(20)
        x = rng.normal(size=(30, 5))
        y = x @ np.array([3.0, 0.0, 0.0, 2.0, 0.0]) + rng.normal(scale=0.2, size=30)
        model = lasso_fit(x, y, s=2.0)
        assert model.selected == [int(j) for j in np.flatnonzero(model.coef)]

    def test_grid_mode_picks_low_validation_error(self):
        rng = make_rng(21)
        x = rng.normal(size=(60, 4))
        true = np.array([2.0, 0.0, -1.0, 0.0])
        y = x @ true + rng.normal(scale=0.3, size=60)
        model = lasso_fit(x, y)
        preds = model.predict(x)
        assert float(np.mean((preds - y) ** 2)) < 1.0


class TestReporterReputation:
    def test_substitution(self):
        assert reporter_reputation(4, 2) == pytest.approx(0.4)

    def test_zero_opened_guarded(self):
        assert reporter_reputation(0, 0) == 0.0

    def test_always_below_one(self):
        rng = make_rng(22)
        for _ in range(100):
            opened = int(rng.integers(0, 50))
            fixed = int(rng.integers(0, opened + 1))
            assert reporter_reputation(opened, fixed) < 1.0

    def test_invalid_counts(self):
        with pytest.raises(BaselineError):
            reporter_reputation(2, 3)
        with pytest.raises(BaselineError):
            reporter_reputation(-1, 0)


class TestAssembleFeatures:
    def test_count_passthrough(self):
        vec = assemble_features(IssueFeatureInput(n_subtasks=11, n_issue_links=12))
        assert vec.values[vec.names.index("n_subtasks")] == 11
        assert vec.values[vec.names.index("n_issue_links")] == 12

    def test_one_hot_known_and_other(self):
        vec = assemble_features(IssueFeatureInput(issue_type="Bug", priority="Blocker"))
        assert vec.values[vec.names.index("type_bug")] == 1
        assert vec.values[vec.names.index("priority_blocker")] == 1
        odd = assemble_features(IssueFeatureInput(issue_type="Weird Kind", priority=""))
        assert odd.values[odd.names.index("type_other")] == 1
        assert odd.values[odd.names.index("priority_other")] == 1

    def test_missing_assignee_masks_three_features(self):
        vec = assemble_features(IssueFeatureInput(assignee_tested=None))
        masked = [n for n, m in zip(vec.names, vec.missing) if m]
        assert masked == ["assignee_tested", "assignee_reviewed", "assignee_resolved"]

    def test_present_assignee_not_masked(self):
        vec = assemble_features(
            IssueFeatureInput(assignee_tested=1, assignee_reviewed=2, assignee_resolved=3)
        )
        assert not vec.missing.any()
        assert vec.values[vec.names.index("assignee_resolved")] == 3

    def test_reputation_embedded(self):
        vec = assemble_features(IssueFeatureInput(reporter_opened=9, reporter_opened_fixed=3))
        assert vec.values[vec.names.index("reporter_reputation")] == pytest.approx(0.3)

    def test_lengths_align(self):
        vec = assemble_features(IssueFeatureInput())
        assert len(vec.names) == len(vec.values) == len(vec.missing)


class TestFeatureMatrix:
    def test_mean_imputation_uses_train_reference(self):
        train = [
            assemble_features(IssueFeatureInput(assignee_tested=2, assignee_reviewed=0, assignee_resolved=0)),
            assemble_features(IssueFeatureInput(assignee_tested=4, assignee_reviewed=0, assignee_resolved=0)),
        ]
        test = [assemble_features(IssueFeatureInput(assignee_tested=None))]
        matrix = feature_matrix(test, impute="mean", train_vectors=train)
        col = test[0].names.index("assignee_tested")
        assert matrix[0, col] == pytest.approx(3.0)

    def test_mask_columns_appended(self):
        vecs = [assemble_features(IssueFeatureInput(assignee_tested=None))]
        matrix = feature_matrix(vecs, impute="zero", append_mask=True)
        base = len(vecs[0].names)
        assert matrix.shape[1] == 2 * base
        assert matrix[0, base + vecs[0].names.index("assignee_tested")] == 1.0
