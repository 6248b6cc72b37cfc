import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ashap.data import (
    BINARY,
    REAL,
    Dataset,
    DataSplits,
    denormalize,
    generate_synthetic_gaussian,
    inject_anomaly,
    load_csv,
    normalize,
    read_schema,
    split,
    split_normal,
)
from ashap.errors import ConstantFeatureError, DataError, ParseError, SchemaError, SizingError


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def labeled(n_normal, n_anom, d, seed=0):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(n_normal + n_anom, d))
    labels = np.r_[np.zeros(n_normal, bool), np.ones(n_anom, bool)]
    return Dataset.from_array(rows, labels=labels)


class TestLoadCsv:
    def test_three_rows(self, tmp_path):
        p = write(tmp_path, "a.csv", "f1,f2,label\n1.0,2.0,0\n3,4,0\n-1e-3,5.5,1\n")
        ds = load_csv(p)
        assert len(ds) == 3 and ds.d == 2
        assert ds.feature_names == ("f1", "f2")
        np.testing.assert_array_equal(ds.labels, [False, False, True])
        np.testing.assert_allclose(ds.rows[2], [-1e-3, 5.5])

    def test_non_numeric_cell_names_line(self, tmp_path):
        p = write(tmp_path, "a.csv", "f1,f2,label\n1,2,0\n3,abc,0\n")
        with pytest.raises(ParseError, match="line 3"):
            load_csv(p)

    def test_wrong_field_count(self, tmp_path):
        p = write(tmp_path, "a.csv", "f1,f2,label\n1,2,0\n3,0\n")
        with pytest.raises(ParseError, match="line 3"):
            load_csv(p)

    def test_label_column_required(self, tmp_path):
        p = write(tmp_path, "a.csv", "f1,f2\n1,2\n")
        with pytest.raises(ParseError):
            load_csv(p)
        ds = load_csv(p, require_label=False)
        assert not ds.labels.any()

    def test_bad_label_value(self, tmp_path):
        p = write(tmp_path, "a.csv", "f1,label\n1,2\n")
        with pytest.raises(ParseError, match="label"):
            load_csv(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_csv(tmp_path / "nope.csv")

    def test_binary_schema_violation(self, tmp_path):
        p = write(tmp_path, "a.csv", "a,b,label\n0,1,0\n1,0.5,0\n")
        with pytest.raises(SchemaError, match="'b'"):
            load_csv(p, schema={"a": BINARY, "b": BINARY})

    def test_sidecar_schema(self, tmp_path):
        p = write(tmp_path, "a.csv", "a,b,label\n0,1.5,0\n1,0.5,1\n")
        s = write(tmp_path, "a.schema", "name,kind\na,binary\nb,real\n")
        assert read_schema(s) == {"a": BINARY, "b": REAL}
        ds = load_csv(p, schema=s)
        assert ds.feature_kinds == (BINARY, REAL)

    def test_lympho_shaped_one_hot(self, tmp_path):
        # 59 one-hot columns, all declared binary
        rng = np.random.default_rng(0)
        rows = rng.integers(0, 2, size=(12, 59))
        names = [f"c{i}" for i in range(59)]
        text = ",".join(names + ["label"]) + "\n"
        text += "".join(",".join(map(str, r)) + ",0\n" for r in rows)
        p = write(tmp_path, "lympho.csv", text)
        s = write(tmp_path, "lympho.schema", "".join(f"{n},binary\n" for n in names))
        ds = load_csv(p, schema=s)
        assert ds.d == 59
        assert set(ds.feature_kinds) == {BINARY}


class TestSplit:
    def test_thyroid_sizes(self):
        ds = labeled(3679, 93, 6)
        sp = split(ds, 0.2, seed=3)
        assert (len(sp.train), len(sp.valid), len(sp.test_norm), len(sp.test_anom)) == (2869, 717, 93, 93)

    def test_labels_per_partition(self):
        sp = split(labeled(300, 20, 3), 0.2, seed=1)
        assert not sp.train.labels.any() and not sp.valid.labels.any() and not sp.test_norm.labels.any()
        assert sp.test_anom.labels.all()

    def test_deterministic(self):
        ds = labeled(200, 10, 3)
        a, b = split(ds, 0.25, seed=9), split(ds, 0.25, seed=9)
        for k in ("train", "valid", "test_norm", "test_anom"):
            np.testing.assert_array_equal(a.source_index[k], b.source_index[k])

    def test_disjoint_cover(self):
        ds = labeled(200, 10, 3)
        sp = split(ds, 0.25, seed=4)
        parts = np.concatenate(list(sp.source_index.values()))
        assert len(parts) == len(np.unique(parts)) == len(ds)

    def test_too_few_rows(self):
        with pytest.raises(SizingError):
            split(labeled(2, 1, 2), 0.2)
        with pytest.raises(SizingError):
            split(labeled(5, 2, 2), 0.2)

    def test_split_normal(self):
        ds = generate_synthetic_gaussian(3, 0.2, 500, seed=0)
        sp = split_normal(ds, 50, 0.2, seed=1)
        assert (len(sp.test_norm), len(sp.test_anom), len(sp.valid), len(sp.train)) == (50, 0, 90, 360)


class TestNormalize:
    def test_zscore_population_std(self):
        # population std of {1, 2, 3} is sqrt(2/3); (1 - 2) / sqrt(2/3) = -1.2247...
        train = Dataset.from_array([[1.0], [2.0], [3.0]])
        other = Dataset.from_array([[5.0]])
        out = normalize(DataSplits(train, other, other, other))
        np.testing.assert_allclose(out.train.rows[:, 0], [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)
        np.testing.assert_allclose(out.valid.rows[:, 0], [3 / np.sqrt(2 / 3)])

    def test_train_moments(self):
        ds = labeled(400, 20, 4, seed=5)
        out = normalize(split(ds, 0.2, seed=0))
        np.testing.assert_allclose(out.train.rows.mean(axis=0), 0, atol=1e-9)
        np.testing.assert_allclose(out.train.rows.std(axis=0), 1, atol=1e-9)

    def test_binary_untouched(self):
        rng = np.random.default_rng(0)
        rows = rng.integers(0, 2, size=(100, 3)).astype(float)
        labels = np.r_[np.zeros(90, bool), np.ones(10, bool)]
        ds = Dataset.from_array(rows, feature_kinds=[BINARY] * 3, labels=labels)
        sp = split(ds, 0.2, seed=0)
        out = normalize(sp)
        for k, part in out.partitions().items():
            np.testing.assert_array_equal(part.rows, sp.partitions()[k].rows)

    def test_constant_feature(self):
        rows = np.c_[np.random.default_rng(0).normal(size=60), np.ones(60)]
        ds = Dataset.from_array(rows, labels=np.r_[np.zeros(50, bool), np.ones(10, bool)],
                                feature_names=["ok", "flat"])
        with pytest.raises(ConstantFeatureError, match="flat"):
            normalize(split(ds, 0.2))

    def test_twice(self):
        out = normalize(split(labeled(100, 5, 2), 0.2))
        with pytest.raises(DataError):
            normalize(out)

    def test_round_trip(self):
        sp = split(labeled(300, 10, 5, seed=2), 0.2, seed=1)
        back = denormalize(normalize(sp))
        for k, part in back.partitions().items():
            np.testing.assert_allclose(part.rows, sp.partitions()[k].rows, atol=1e-12, rtol=0)


class TestInjectAnomaly:
    def test_single_feature(self):
        row = np.arange(6, dtype=float)
        rec = inject_anomaly(row, 1, seed=0)
        changed = np.flatnonzero(rec.perturbed_point != row)
        assert len(changed) == 1 and set(changed) == rec.perturbed_indices
        assert 1 <= abs(rec.delta[changed[0]]) <= 2

    def test_full_binary_flip(self):
        rec = inject_anomaly([0.0, 1.0, 0.0], 3, [BINARY] * 3, seed=1)
        np.testing.assert_array_equal(rec.perturbed_point, [1, 0, 1])

    @pytest.mark.parametrize("d_anom", [0, 4])
    def test_out_of_range(self, d_anom):
        with pytest.raises(ValueError):
            inject_anomaly([0.0, 1.0, 2.0], d_anom, seed=0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2 ** 31), st.data())
    def test_only_chosen_coordinates_change(self, d, seed, data):
        d_anom = data.draw(st.integers(1, d))
        kinds = data.draw(st.lists(st.sampled_from([REAL, BINARY]), min_size=d, max_size=d))
        row = np.array([float(seed % 2) if k == BINARY else 0.3 * i for i, k in enumerate(kinds)])
        rec = inject_anomaly(row, d_anom, kinds, seed=seed)
        assert len(rec.perturbed_indices) == d_anom
        outside = [i for i in range(d) if i not in rec.perturbed_indices]
        np.testing.assert_array_equal(rec.perturbed_point[outside], row[outside])
        for i in rec.perturbed_indices:
            if kinds[i] == BINARY:
                assert rec.perturbed_point[i] == 1 - row[i]
            else:
                assert 1 <= abs(rec.delta[i]) <= 2

    def test_delta_distribution(self):
        rng = np.random.default_rng(7)
        deltas = np.array([inject_anomaly(np.zeros(4), 1, seed=rng).delta.sum() for _ in range(10_000)])
        assert np.all((np.abs(deltas) >= 1) & (np.abs(deltas) <= 2))
        assert abs(np.mean(deltas > 0) - 0.5) < 0.02


class TestSyntheticGaussian:
    def test_independent(self):
        ds = generate_synthetic_gaussian(2, 0.0, 10_000, seed=0)
        np.testing.assert_allclose(np.cov(ds.rows.T), np.eye(2), atol=0.1)
        assert not ds.labels.any()

    def test_correlated(self):
        ds = generate_synthetic_gaussian(6, 0.9, 10_000, seed=1)
        c = np.corrcoef(ds.rows.T)
        off = c[~np.eye(6, dtype=bool)]
        assert np.max(np.abs(off - 0.9)) < 0.05

    @pytest.mark.parametrize("d,rho", [(3, -0.9), (3, -0.5), (2, 1.0), (1, 0.0)])
    def test_invalid(self, d, rho):
        with pytest.raises(ValueError):
            generate_synthetic_gaussian(d, rho, 10, seed=0)
