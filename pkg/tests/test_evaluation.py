import math

import mpmath
import numpy as np
import pytest

from bidistill.data import RawInteraction, build_dataset
from bidistill.evaluation import aggregate_runs, evaluate, paired_t_test
from bidistill.models import init_model, logit


def random_dataset(rng, n_max=20, m_max=50):
    n = int(rng.integers(3, n_max + 1))
    m = int(rng.integers(8, m_max + 1))
    rows = []
    for u in range(n):
        count = int(rng.integers(3, min(m - 1, 12)))
        items = rng.choice(m, size=count, replace=False)
        rows += [RawInteraction(f"u{u}", f"i{i}", None) for i in items]
    return build_dataset(rows, min_ratings=3, seed=int(rng.integers(1000)))


def brute_force_metrics(model, ds, ks):
    """Naive reference: sort the candidate list per user, find the test item."""
    hit = {k: [] for k in ks}
    ndcg = {k: [] for k in ks}
    for u in range(ds.n):
        observed = set(ds.train_pos[u].tolist())
        cands = [i for i in range(ds.m)
                 if i not in observed and i != int(ds.val_item[u])]
        scored = sorted(cands, key=lambda i: (-logit(model, u, i), i))
        rank = scored.index(int(ds.test_item[u])) + 1
        for k in ks:
            hit[k].append(1.0 if rank <= k else 0.0)
            ndcg[k].append(1.0 / math.log2(rank + 1) if rank <= k else 0.0)
    return ({k: float(np.mean(v)) for k, v in hit.items()},
            {k: float(np.mean(v)) for k, v in ndcg.items()})


class TestEvaluate:
    def test_top_ranked_test_item(self):
        rows = [RawInteraction("u", f"i{k}", k) for k in range(5)]
        ds = build_dataset(rows, min_ratings=5)
        model = init_model(1, ds.m, 1, seed=0, init_scale=0.0)
        model.b_item[ds.test_item[0]] = 10.0
        rep = evaluate(model, ds, (1, 5))
        assert rep.hit[1] == 1.0 and rep.hit[5] == 1.0
        assert rep.ndcg[1] == 1.0

    def test_rank_three_ndcg(self):
        # second user's items give the first user unobserved candidates
        rows = [RawInteraction("a", f"i{k}", k) for k in range(8)]
        rows += [RawInteraction("b", f"j{k}", k) for k in range(8)]
        ds = build_dataset(rows, min_ratings=8)
        model = init_model(ds.n, ds.m, 1, seed=0, init_scale=0.0)
        u = ds.user_index["a"]
        test = int(ds.test_item[u])
        others = [i for i in range(ds.m)
                  if i not in ds.train_pos[u] and i not in (test, int(ds.val_item[u]))]
        model.b_item[others[0]] = 3.0
        model.b_item[others[1]] = 2.0
        model.b_item[test] = 1.0
        rep = evaluate(model, ds, (50,))
        assert rep.ranks[u] == 3
        assert rep.per_user_ndcg[50][u] == 1.0 / math.log2(4)  # = 0.5

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(123)
        for _ in range(50):
            ds = random_dataset(rng)
            model = init_model(ds.n, ds.m, 4, seed=int(rng.integers(10_000)),
                               init_scale=0.5)
            ks = (1, 5, 20)
            rep = evaluate(model, ds, ks)
            bh, bn = brute_force_metrics(model, ds, ks)
            for k in ks:
                assert rep.hit[k] == bh[k]
                assert rep.ndcg[k] == bn[k]

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(5)
        ds = random_dataset(rng)
        model = init_model(ds.n, ds.m, 3, seed=2, init_scale=0.4)
        rep = evaluate(model, ds, (5, 10))
        model.P *= 3.0  # monotone rescaling of every user's logits
        rep2 = evaluate(model, ds, (5, 10))
        assert np.array_equal(rep.ranks, rep2.ranks)

    def test_hit_at_full_candidate_count_is_one(self):
        rng = np.random.default_rng(6)
        ds = random_dataset(rng)
        model = init_model(ds.n, ds.m, 2, seed=3, init_scale=0.3)
        rep = evaluate(model, ds, (ds.m,))
        assert rep.hit[ds.m] == 1.0

    def test_ndcg_bounded_by_hit(self):
        rng = np.random.default_rng(7)
        ds = random_dataset(rng)
        model = init_model(ds.n, ds.m, 2, seed=4, init_scale=0.3)
        rep = evaluate(model, ds, (5, 20))
        for k in (5, 20):
            assert rep.ndcg[k] <= rep.hit[k] + 1e-15


class TestAggregateRuns:
    def _rep(self, hit, seed):
        rows = [RawInteraction("u", f"i{k}", k) for k in range(5)]
        ds = build_dataset(rows, min_ratings=5)
        model = init_model(1, ds.m, 1, seed=0, init_scale=0.0)
        rep = evaluate(model, ds, (5,), seed=seed)
        rep.hit[5] = hit  # inject controlled value
        return rep

    def test_single_run_identity(self):
        rep = self._rep(0.4, 0)
        agg = aggregate_runs([rep])
        assert agg.hit[5] == 0.4

    def test_mean_of_two(self):
        agg = aggregate_runs([self._rep(0.4, 0), self._rep(0.6, 1)])
        assert agg.hit[5] == pytest.approx(0.5, abs=1e-15)

    def test_order_invariance(self):
        reps = [self._rep(v, k) for k, v in enumerate((0.2, 0.5, 0.9))]
        a = aggregate_runs(reps)
        b = aggregate_runs(reps[::-1])
        assert a.hit[5] == b.hit[5]

    def test_mismatched_ks_rejected(self):
        rows = [RawInteraction("u", f"i{k}", k) for k in range(5)]
        ds = build_dataset(rows, min_ratings=5)
        model = init_model(1, ds.m, 1, seed=0, init_scale=0.0)
        a = evaluate(model, ds, (5,))
        b = evaluate(model, ds, (5, 10))
        with pytest.raises(ValueError, match="mismatched"):
            aggregate_runs([a, b])


def t_sf_oracle(t_abs, df):
    """Survival function of the t distribution via the regularized
    incomplete beta, independently of scipy."""
    x = df / (df + t_abs * t_abs)
    return float(0.5 * mpmath.betainc(df / 2, mpmath.mpf(1) / 2, 0, x, regularized=True))


class TestPairedTTest:
    def test_oracle_matches_published_quantiles(self):
        # t table: P(T_10 > 2.228) = 0.025, P(T_30 > 2.042) = 0.025
        assert t_sf_oracle(2.228, 10) == pytest.approx(0.025, abs=5e-4)
        assert t_sf_oracle(2.042, 30) == pytest.approx(0.025, abs=5e-4)

    def test_identical_samples_flagged(self):
        a = np.array([0.1, 0.5, 0.9, 0.3])
        res = paired_t_test(a, a.copy())
        assert res.degenerate
        assert res.t == 0.0
        assert res.p_value == 1.0

    def test_constant_shift_flagged(self):
        # dyadic values keep the shift exactly constant in floating point
        a = np.array([0.25, 0.5, 1.0, 0.75])
        res = paired_t_test(a + 0.25, a)
        assert res.degenerate
        assert math.isnan(res.p_value)

    def test_matches_reference_cdf(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            n = int(rng.integers(5, 40))
            a = rng.normal(0.2, 1.0, n)
            b = rng.normal(0.0, 1.0, n)
            res = paired_t_test(a, b)
            assert not res.degenerate
            expect = 2.0 * t_sf_oracle(abs(res.t), n - 1)
            assert res.p_value == pytest.approx(expect, abs=0.01)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            paired_t_test(np.array([1.0, 2.0]), np.array([1.0]))
        with pytest.raises(ValueError):
            paired_t_test(np.array([1.0]), np.array([2.0]))
