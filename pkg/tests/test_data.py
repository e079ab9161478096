import numpy as np
import pytest

from bidistill.data import (
    Dataset,
    RawInteraction,
    build_dataset,
    leave_one_out_split,
    load_interactions,
)


def write(tmp_path, text, name="log.tsv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadInteractions:
    def test_three_line_tsv(self, tmp_path):
        p = write(tmp_path, "u1\ti1\t10\nu2\ti2\t20\nu3\ti1\t30\n")
        rows = load_interactions(p, third_column="timestamp")
        assert len(rows) == 3
        assert rows[0] == RawInteraction("u1", "i1", 10)
        assert rows[2].timestamp == 30

    def test_duplicate_pair_keeps_min_timestamp(self, tmp_path):
        p = write(tmp_path, "u1\ti1\t30\nu1\ti1\t10\n")
        rows = load_interactions(p, third_column="timestamp")
        assert len(rows) == 1
        assert rows[0].timestamp == 10

    def test_malformed_line_names_line_number(self, tmp_path):
        p = write(tmp_path, "u1\ti1\nbroken\nu2\ti2\n")
        with pytest.raises(ValueError, match="line 2"):
            load_interactions(p)

    def test_empty_file_is_error(self, tmp_path):
        p = write(tmp_path, "")
        with pytest.raises(ValueError, match="empty"):
            load_interactions(p)

    def test_comma_autodetect(self, tmp_path):
        p = write(tmp_path, "u1,i1\nu2,i2\n")
        rows = load_interactions(p)
        assert [r.item_key for r in rows] == ["i1", "i2"]

    def test_four_columns_rating_ignored(self, tmp_path):
        p = write(tmp_path, "u1\ti1\t5\t100\nu1\ti2\t3\t200\nu1\ti3\t1\t50\n")
        rows = load_interactions(p)
        assert [r.timestamp for r in rows] == [100, 200, 50]

    def test_bad_timestamp_names_line(self, tmp_path):
        p = write(tmp_path, "u1\ti1\t5\tzzz\n")
        with pytest.raises(ValueError, match="line 1"):
            load_interactions(p)


def make_rows(spec):
    """spec: list of (user, item, ts) tuples."""
    return [RawInteraction(u, i, t) for u, i, t in spec]


class TestBuildDataset:
    def test_low_activity_user_removed(self):
        rows = make_rows([("a", f"i{k}", k) for k in range(5)]
                         + [("b", f"i{k}", k) for k in range(4)])
        ds = build_dataset(rows, min_ratings=5)
        assert "a" in ds.user_index
        assert "b" not in ds.user_index
        assert ds.n == 1

    def test_item_of_removed_user_dropped(self):
        rows = make_rows([("a", f"i{k}", k) for k in range(5)]
                         + [("b", "only-b", 1), ("b", "i0", 2)])
        ds = build_dataset(rows, min_ratings=5)
        assert "only-b" not in ds.item_index

    def test_shared_item_counted_once(self):
        rows = make_rows([("a", f"i{k}", k) for k in range(5)]
                         + [("b", f"i{k}", k) for k in range(5)])
        ds = build_dataset(rows, min_ratings=5)
        assert ds.m == 5

    def test_no_survivor_is_error(self):
        rows = make_rows([("a", "i0", 1), ("a", "i1", 2)])
        with pytest.raises(ValueError, match="no user"):
            build_dataset(rows, min_ratings=10)

    def test_interaction_count_invariant(self):
        rng = np.random.default_rng(5)
        rows = []
        for u in range(12):
            items = rng.choice(40, size=rng.integers(3, 15), replace=False)
            rows += [RawInteraction(f"u{u}", f"i{i}", int(rng.integers(100))) for i in items]
        ds = build_dataset(rows, min_ratings=5, seed=1)
        total = sum(len(p) for p in ds.train_pos) + 2 * ds.n
        kept = {ds.users[u] for u in range(ds.n)}
        dedup = {(r.user_key, r.item_key) for r in rows if r.user_key in kept}
        assert total == len(dedup)

    def test_rebuild_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(9)
        rows = []
        for u in range(10):
            items = rng.choice(30, size=8, replace=False)
            rows += [RawInteraction(f"u{u}", f"i{i}", None) for i in items]
        a = build_dataset(rows, min_ratings=5, seed=3)
        b = build_dataset(rows, min_ratings=5, seed=3)
        pa, pb = tmp_path / "a.json", tmp_path / "b.json"
        a.save(pa)
        b.save(pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_sparsity_formula(self):
        rows = make_rows([("a", f"i{k}", k) for k in range(5)]
                         + [("b", f"i{k}", k) for k in range(5)])
        ds = build_dataset(rows, min_ratings=5)
        assert ds.sparsity == 1.0 - 10 / (2 * 5)

    def test_holdout_items_not_in_train(self):
        rng = np.random.default_rng(2)
        rows = []
        for u in range(15):
            items = rng.choice(50, size=10, replace=False)
            rows += [RawInteraction(f"u{u}", f"i{i}", int(k)) for k, i in enumerate(items)]
        ds = build_dataset(rows, min_ratings=5, seed=0)
        for u in range(ds.n):
            assert ds.test_item[u] not in ds.train_pos[u]
            assert ds.val_item[u] not in ds.train_pos[u]
            assert ds.test_item[u] != ds.val_item[u]
            assert len(ds.train_pos[u]) >= 10 - 2

    def test_save_load_roundtrip(self, tmp_path):
        rows = make_rows([("a", f"i{k}", k) for k in range(6)]
                         + [("b", f"i{k}", k + 10) for k in range(6)])
        ds = build_dataset(rows, min_ratings=5, seed=7)
        p = tmp_path / "ds.json"
        ds.save(p)
        back = Dataset.load(p)
        assert back.n == ds.n and back.m == ds.m and back.seed == ds.seed
        assert all(np.array_equal(x, y) for x, y in zip(back.train_pos, ds.train_pos))
        assert np.array_equal(back.test_item, ds.test_item)


class TestLeaveOneOutSplit:
    def test_timestamp_ordering(self):
        user_rows = {0: [(10, 1), (11, 2), (12, 3), (13, 4), (14, 5)]}
        train, val, test = leave_one_out_split(user_rows)
        assert test[0] == 14
        assert val[0] == 13
        assert list(train[0]) == [10, 11, 12]

    def test_random_split_deterministic_under_seed(self):
        user_rows = {u: [(i, None) for i in range(8)] for u in range(5)}
        a = leave_one_out_split(user_rows, seed=4)
        b = leave_one_out_split(user_rows, seed=4)
        assert np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])
        c = leave_one_out_split(user_rows, seed=5)
        assert not (np.array_equal(a[1], c[1]) and np.array_equal(a[2], c[2]))

    def test_timestamp_tie_breaks_by_item_index(self):
        # two items tie at the latest timestamp: the larger index is "later"
        user_rows = {0: [(3, 7), (9, 7), (1, 2), (2, 1)]}
        train, val, test = leave_one_out_split(user_rows)
        assert test[0] == 9
        assert val[0] == 3

    def test_too_few_interactions_rejected(self):
        with pytest.raises(ValueError, match="needs >= 3"):
            leave_one_out_split({0: [(1, 1), (2, 2)]})
