import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from ashap.charfn import (
    AshCharFn,
    AshState,
    ReferenceCharFn,
    ReferenceSet,
    TableCharFn,
    ash_evaluate,
    ash_minimize,
    ash_penalized_objective,
    ash_prepare,
    ash_surrogate_point,
    build_references,
    reference_evaluate,
)
from ashap.data import Dataset, normalize, split_normal
from ashap.detectors import FunctionScore, GmmModel
from ashap.errors import CapabilityError
from ashap.shapley import all_masks

from conftest import random_gmm

ZERO = FunctionScore(lambda y: 0.0, 2, gradient=lambda y: np.zeros(2))


def std_gmm(d):
    return GmmModel([1.0], [np.zeros(d)], [np.eye(d)])


class TestPenalizedObjective:
    def test_hand_example(self):
        assert ash_penalized_objective(ZERO, [1.0, 2.0], [0], [1.0, 4.0], 0.01) == pytest.approx(0.01)

    def test_zero_displacement(self, rng):
        g = random_gmm(rng, 3)
        x = rng.normal(size=3)
        assert ash_penalized_objective(g, x, [1], x, 0.5) == pytest.approx(g.score(x))

    def test_gamma_zero(self, rng):
        g = random_gmm(rng, 3)
        x, y = rng.normal(size=3), rng.normal(size=3)
        y[0] = x[0]
        assert ash_penalized_objective(g, x, [0], y, 0.0) == pytest.approx(g.score(y))

    def test_floor_on_zero_coordinate(self):
        # x_1 = 0 uses the 1e-6 floor instead of dividing by zero
        val = ash_penalized_objective(ZERO, [0.0, 1.0], [1], [0.001, 1.0], 1.0)
        assert val == pytest.approx(1e-6 / 1e-6)

    def test_no_free_coordinates(self):
        with pytest.raises(ValueError):
            ash_penalized_objective(ZERO, [1.0, 2.0], [0, 1], [1.0, 2.0], 0.01)

    def test_coalition_must_match(self):
        with pytest.raises(ValueError):
            ash_penalized_objective(ZERO, [1.0, 2.0], [0], [0.0, 2.0], 0.01)


class TestMinimize:
    def test_quadratic_closed_form(self):
        y = ash_minimize(std_gmm(2), [3.0, 0.0], [1], 0.0)
        np.testing.assert_allclose(y, [0.0, 0.0], atol=1e-4)

    def test_full_coalition_identity(self, rng):
        x = rng.normal(size=3)
        np.testing.assert_array_equal(ash_minimize(random_gmm(rng, 3), x, [0, 1, 2], 0.01), x)

    def test_large_gamma_stays_put(self, rng):
        x = rng.normal(size=3) + 2
        y = ash_minimize(random_gmm(rng, 3), x, [], 1e6)
        np.testing.assert_allclose(y, x, atol=1e-3)

    def test_fixed_coordinates_exact(self, rng):
        g = random_gmm(rng, 4)
        x = rng.normal(size=4)
        y = ash_minimize(g, x, [1, 3], 0.01)
        assert y[1] == x[1] and y[3] == x[3]

    def test_needs_gradient(self):
        f = FunctionScore(lambda y: float(y @ y), 2)
        with pytest.raises(CapabilityError):
            ash_minimize(f, [1.0, 1.0], [], 0.01)

    def test_penalty_value_monotone_in_gamma(self, two_cluster_gmm6, rng):
        x = rng.normal(scale=1.5, size=6)
        for s in ([], [0], [3]):
            vals = [ash_penalized_objective(two_cluster_gmm6, x, s, ash_minimize(two_cluster_gmm6, x, s, g), g)
                    for g in (0.001, 0.01, 0.1, 1, 10)]
            assert np.all(np.diff(vals) >= -1e-9)


class TestPrepare:
    def test_anchor_count(self, rng):
        st_ = ash_prepare(random_gmm(rng, 3), rng.normal(size=3))
        assert isinstance(st_, AshState)
        assert st_.anchors.shape == (4, 3) and st_.anchor_scores.shape == (4,)

    def test_stationary_x(self):
        g = std_gmm(3)
        st_ = ash_prepare(g, np.zeros(3), gamma=0.0)
        np.testing.assert_allclose(st_.anchors, 0.0, atol=1e-12)

    def test_descent_and_agreement(self, rng):
        for _ in range(5):
            g = random_gmm(rng, 4, K=3)
            x = rng.normal(scale=2, size=4)
            st_ = ash_prepare(g, x, gamma=0.01)
            assert np.all(st_.anchor_scores <= g.score(x) + 1e-9)
            for i in range(4):
                assert st_.anchors[i + 1, i] == x[i]

    def test_threads_identical(self, two_cluster_gmm6, rng):
        x = rng.normal(size=6)
        a = ash_prepare(two_cluster_gmm6, x, threads=1)
        b = ash_prepare(two_cluster_gmm6, x, threads=3)
        np.testing.assert_array_equal(a.anchors, b.anchors)

    def test_immutable(self, rng):
        st_ = ash_prepare(random_gmm(rng, 2), rng.normal(size=2))
        with pytest.raises(ValueError):
            st_.anchors[0, 0] = 1.0


class TestSurrogate:
    def test_hand_example(self):
        x1 = 0.7
        st_ = AshState(np.array([x1, 9.0]), 0.01, np.array([[0.0, 0.0], [x1, 4.0], [5.0, 9.0]]),
                       np.zeros(3), 0.0)
        np.testing.assert_allclose(ash_surrogate_point(st_, [0]), [x1, 2.0])

    def test_empty_and_full(self, rng):
        g = random_gmm(rng, 3)
        x = rng.normal(size=3)
        st_ = ash_prepare(g, x)
        np.testing.assert_array_equal(ash_surrogate_point(st_, []), st_.anchors[0])
        np.testing.assert_array_equal(ash_surrogate_point(st_, [0, 1, 2]), x)
        assert ash_evaluate(st_, g, [0, 1, 2]) == g.score(x)
        assert ash_evaluate(st_, g, []) <= g.score(x) + 1e-9

    def test_large_gamma_collapse(self, rng):
        g = random_gmm(rng, 3)
        x = rng.normal(size=3)
        v = AshCharFn(g, x, gamma=1e8)
        np.testing.assert_allclose(v.evaluate_masks(all_masks(3)), g.score(x), rtol=1e-5)

    def test_full_coalition_exact(self, two_cluster_gmm6, rng):
        x = rng.normal(size=6)
        assert AshCharFn(two_cluster_gmm6, x)(range(6)) == two_cluster_gmm6.score(x)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_additive_separable_oracle(self, seed):
        rng = np.random.default_rng(seed)
        d = 3
        c = rng.normal(size=d)
        a = rng.uniform(0.5, 2.0, size=d)

        def parts(y):
            t = y - c
            return a * t * t + np.log1p(t * t) + 0.3 * t

        def grad(y):
            t = y - c
            return 2 * a * t + 2 * t / (1 + t * t) + 0.3

        model = FunctionScore(lambda y: float(parts(y).sum()), d, gradient=grad)
        x = rng.normal(scale=2, size=d)
        mins = np.array([minimize_scalar(lambda t, i=i: a[i] * t * t + np.log1p(t * t) + 0.3 * t).fun
                         for i in range(d)])
        v = AshCharFn(model, x, gamma=0.0, gtol=1e-10)
        for mask in all_masks(d):
            oracle = parts(x)[mask].sum() + mins[~mask].sum()
            assert v(mask) == pytest.approx(oracle, abs=1e-8)


class TestReferences:
    def test_full_and_empty(self, rng):
        g = random_gmm(rng, 3)
        x = rng.normal(size=3)
        r = rng.normal(size=3)
        refs = ReferenceSet(r[None], "given")
        assert reference_evaluate(g, x, [0, 1, 2], refs) == pytest.approx(g.score(x))
        assert reference_evaluate(g, x, [], refs) == pytest.approx(g.score(r))

    def test_two_refs_mean(self, rng):
        g = random_gmm(rng, 3)
        r = rng.normal(size=(2, 3))
        val = reference_evaluate(g, np.zeros(3), [], ReferenceSet(r))
        assert val == pytest.approx(g.score(r).mean())

    def test_replacement_pattern(self, rng):
        seen = []
        f = FunctionScore(lambda y: seen.append(np.array(y)) or 0.0, 3)
        reference_evaluate(f, np.array([1.0, 2.0, 3.0]), [1], ReferenceSet([[7.0, 8.0, 9.0]]))
        np.testing.assert_array_equal(seen[0], [7.0, 2.0, 9.0])

    def test_permutation_invariant(self, rng):
        g = random_gmm(rng, 4)
        x = rng.normal(size=4)
        r = rng.normal(size=(5, 4))
        for S in ([], [0], [1, 3], [0, 1, 2]):
            a = reference_evaluate(g, x, S, ReferenceSet(r))
            b = reference_evaluate(g, x, S, ReferenceSet(r[rng.permutation(5)]))
            assert a == pytest.approx(b, rel=1e-13)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            reference_evaluate(random_gmm(rng, 3), np.zeros(3), [], ReferenceSet(np.zeros((1, 2))))

    def test_invalid_sets(self):
        with pytest.raises(ValueError):
            ReferenceSet(np.zeros((0, 2)))
        with pytest.raises(ValueError):
            ReferenceSet([[np.nan, 0.0]])

    def test_train_mean_zscored(self):
        ds = Dataset.from_array(np.random.default_rng(0).normal(3, 2, size=(500, 4)))
        sp = normalize(split_normal(ds, 50, 0.2, seed=0))
        np.testing.assert_allclose(build_references("train_mean", sp.train).references[0], 0, atol=1e-9)

    def test_knn_self_neighbour(self, rng):
        train = rng.normal(size=(50, 3))
        refs = build_references("knn_of_x", train, x=train[17], k=1)
        np.testing.assert_array_equal(refs.references[0], train[17])

    def test_knn_nearest_order(self, rng):
        train = rng.normal(size=(40, 2))
        x = np.zeros(2)
        refs = build_references("knn_of_x", train, x=x, k=5)
        dist = np.sort(np.linalg.norm(train, axis=1))[:5]
        np.testing.assert_allclose(np.linalg.norm(refs.references, axis=1), dist)

    def test_kmeans_within_hulls(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(-12, -8, size=(200, 2))
        b = rng.uniform(8, 12, size=(200, 2))
        refs = build_references("kmeans_centers", np.r_[a, b], k=8, seed=0)
        assert len(refs) == 8
        for c in refs.references:
            assert np.all((c >= -12) & (c <= -8)) or np.all((c >= 8) & (c <= 12))

    def test_kmeans_deterministic(self, rng):
        train = rng.normal(size=(100, 3))
        a = build_references("kmeans_centers", train, k=4, seed=3)
        b = build_references("kmeans_centers", train, k=4, seed=3)
        np.testing.assert_array_equal(a.references, b.references)

    def test_k_too_large(self, rng):
        with pytest.raises(ValueError):
            build_references("knn_of_x", rng.normal(size=(3, 2)), x=np.zeros(2), k=4)
        with pytest.raises(ValueError):
            build_references("knn_of_x", rng.normal(size=(3, 2)), k=2)

    def test_reference_charfn_full(self, rng):
        g = random_gmm(rng, 3)
        x = rng.normal(size=3)
        v = ReferenceCharFn(g, x, ReferenceSet(rng.normal(size=(4, 3))))
        assert v(range(3)) == g.score(x)
        assert v.kind == "multi_reference"


def test_table_charfn():
    v = TableCharFn(2, lambda S: len(S) * 2.0)
    np.testing.assert_array_equal(v.evaluate_masks(all_masks(2)), [0, 2, 2, 4])
    assert v({0, 1}) == 4.0
