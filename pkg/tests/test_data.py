import numpy as np
import pytest

from dyntree import DataError, DataStore, load_csv, one_hot_encode, read_table, save_csv


class TestAppend:
    def test_first_index_is_zero(self):
        s = DataStore(1)
        assert s.append([0.5], 1.2) == 0

    def test_indices_dense_and_increasing(self):
        s = DataStore(2, capacity=2)
        idx = [s.append([i, -i], float(i)) for i in range(20)]
        assert idx == list(range(20))
        assert s.append([0.0, 0.0], 0.0) == 20
        np.testing.assert_array_equal(s.X[7], [7.0, -7.0])

    def test_wrong_dimension(self):
        s = DataStore(2)
        with pytest.raises(DataError):
            s.append([1.0], 0.0)

    @pytest.mark.parametrize("x,y", [([np.nan], 0.0), ([np.inf], 0.0), ([0.0], np.nan)])
    def test_non_finite(self, x, y):
        with pytest.raises(DataError):
            DataStore(1).append(x, y)

    def test_response_kind_mismatch(self):
        cls = DataStore(1, n_classes=3)
        with pytest.raises(DataError):
            cls.append([0.0], 1.5)
        with pytest.raises(DataError):
            cls.append([0.0], 3)
        with pytest.raises(DataError):
            DataStore(1).append([0.0], "a")

    def test_rows_never_change(self):
        s = DataStore(1, capacity=1)
        s.append([1.0], 2.0)
        before = s.X.copy()
        for i in range(100):
            s.append([float(i)], 0.0)
        np.testing.assert_array_equal(s.X[:1], before)

    def test_head_and_dict_roundtrip(self):
        s = DataStore.from_arrays(np.arange(10.0)[:, None], np.arange(10) % 3, n_classes=3)
        h = s.head(4)
        assert h.n == 4 and h.n_classes == 3
        r = DataStore.from_dict(s.to_dict())
        np.testing.assert_array_equal(r.X, s.X)
        np.testing.assert_array_equal(r.y, s.y)


class TestCsv:
    def test_regression_file(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("a,b,y\n1,2,0.5\n3,4,1.5\n5,6,2.5\n")
        s = load_csv(p, "y")
        assert (s.d, s.n) == (2, 3)
        np.testing.assert_array_equal(s.y, [0.5, 1.5, 2.5])

    def test_class_file(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("x,label\n0.1,0\n0.2,2\n0.3,1\n")
        s = load_csv(p, "label", classification=True)
        assert s.n_classes == 3
        assert s.y.dtype.kind == "i"

    def test_parse_error_names_cell(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,y\n1,2\nfoo,3\n")
        with pytest.raises(DataError, match=r"row 3.*'a'.*foo"):
            load_csv(p, "y")

    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("")
        with pytest.raises(DataError, match="empty"):
            load_csv(p, "y")

    def test_mixed_response_kinds(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("x,y\n1,0\n2,1.5\n")
        with pytest.raises(DataError, match="mixed"):
            load_csv(p, "y", classification=True)

    def test_missing_value_rejected(self, tmp_path):
        p = tmp_path / "na.csv"
        p.write_text("x,y\n1,NA\n")
        with pytest.raises(DataError, match="missing"):
            load_csv(p, "y")

    def test_round_trip(self, tmp_path, rng):
        X = rng.normal(size=(25, 3))
        y = rng.normal(size=25)
        s = DataStore.from_arrays(X, y)
        p = tmp_path / "rt.csv"
        save_csv(s, p)
        r = load_csv(p, "y")
        np.testing.assert_array_equal(r.X, s.X)
        np.testing.assert_array_equal(r.y, s.y)

    def test_binary_columns_detected(self, tmp_path):
        p = tmp_path / "b.csv"
        p.write_text("a,b,y\n0,0.5,1\n1,0.7,2\n1,0.1,3\n")
        assert load_csv(p, "y").binary.tolist() == [True, False]


class TestOneHot:
    def test_three_levels(self):
        table = {"c": ["a", "b", "c", "a"], "y": ["1", "2", "3", "4"]}
        store, mapping = one_hot_encode(table, ["c"], "y")
        assert store.d == 3
        np.testing.assert_array_equal(store.X.sum(axis=1), 1.0)
        assert mapping["c"] == {"a": 0, "b": 1, "c": 2}
        np.testing.assert_array_equal(store.X[3], [1.0, 0.0, 0.0])
        assert store.binary.all()

    def test_binary_passes_through(self):
        table = {"b": ["0", "1", "1"], "z": ["0.3", "1.2", "2.0"], "y": ["0", "1", "0"]}
        store, mapping = one_hot_encode(table, ["b"], "y", classification=True)
        assert store.d == 2
        np.testing.assert_array_equal(store.X[:, 0], [0, 1, 1])
        assert mapping == {"b": 0, "z": 1}

    def test_many_columns_expand(self):
        # eleven categorical inputs with assorted level counts
        levels = [2, 3, 4, 5, 7, 2, 3, 9, 4, 2, 2]
        rng = np.random.default_rng(1)
        n = 300
        table = {}
        for j, k in enumerate(levels):
            col = [f"L{v}" for v in rng.integers(0, k, n)]
            col[:k] = [f"L{v}" for v in range(k)]  # every level present
            table[f"c{j}"] = col
        table["num1"] = [str(v) for v in rng.normal(size=n)]
        table["num2"] = [str(v) for v in rng.normal(size=n)]
        table["y"] = ["0"] * n
        store, _ = one_hot_encode(table, [f"c{j}" for j in range(11)], "y", classification=True)
        assert store.d == sum(levels) + 2
        for j, k in enumerate(levels):
            start = sum(levels[:j])
            np.testing.assert_array_equal(store.X[:, start:start + k].sum(axis=1), 1.0)

    def test_unknown_column(self):
        with pytest.raises(DataError, match="unknown"):
            one_hot_encode({"a": ["x"], "y": ["1"]}, ["nope"], "y")

    def test_read_table_columns(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("a,y\nfoo,1\nbar,2\n")
        assert read_table(p) == {"a": ["foo", "bar"], "y": ["1", "2"]}
