import numpy as np
import pytest

from heckmi.data import (Dataset, DesignSpec, Variable, VariableSchema,
                         check_common_support, encode_design, load_csv, write_csv)
from heckmi.errors import DataError


def schema_srl():
    return VariableSchema([
        Variable("scope1", "continuous", role="outcome"),
        Variable("region", "categorical", ("north", "south", "west")),
        Variable("log_revenue", "continuous"),
    ])


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_load_csv_counts_missing(tmp_path):
    f = tmp_path / "d.csv"
    write_lines(f, [
        "scope1,region,log_revenue",
        "1.5,north,20.0",
        ",south,21.0",
        "2.5,west,19.0",
    ])
    ds = load_csv(f, schema_srl())
    assert (ds.n, ds.n0, ds.n1) == (3, 1, 2)
    np.testing.assert_array_equal(ds.observed, [True, False, True])


def test_load_csv_na_token_is_missing(tmp_path):
    f = tmp_path / "d.csv"
    write_lines(f, ["scope1,region,log_revenue", "NA,north,20.0", "1,south,21.0"])
    ds = load_csv(f, schema_srl())
    assert ds.n0 == 1


def test_load_csv_unknown_level_names_row_and_column(tmp_path):
    f = tmp_path / "d.csv"
    write_lines(f, ["scope1,region,log_revenue", "1.0,XX,20.0"])
    with pytest.raises(DataError, match=r"row 2.*region.*XX"):
        load_csv(f, schema_srl())


def test_load_csv_non_numeric_cell(tmp_path):
    f = tmp_path / "d.csv"
    write_lines(f, ["scope1,region,log_revenue", "1.0,north,abc"])
    with pytest.raises(DataError, match="non-numeric"):
        load_csv(f, schema_srl())


def test_load_csv_malformed_row(tmp_path):
    f = tmp_path / "d.csv"
    write_lines(f, ["scope1,region,log_revenue", "1.0,north"])
    with pytest.raises(DataError, match="row 2"):
        load_csv(f, schema_srl())


def test_load_csv_infers_levels_sorted(tmp_path):
    f = tmp_path / "d.csv"
    write_lines(f, ["scope1,region,log_revenue",
                    "1.0,south,20.0", "2.0,north,21.0", ",south,22.0"])
    schema = VariableSchema([
        Variable("scope1", "continuous", role="outcome"),
        Variable("region", "categorical"),
        Variable("log_revenue", "continuous"),
    ])
    ds = load_csv(f, schema)
    assert ds.schema["region"].levels == ("north", "south")


def test_load_csv_observed_share(tmp_path):
    rng = np.random.default_rng(0)
    n = 1000
    rows = ["scope1,region,log_revenue"]
    n1 = 0
    for i in range(n):
        present = rng.random() < 0.39
        n1 += present
        y = f"{rng.normal():.3f}" if present else ""
        rows.append(f"{y},{'north' if i % 2 else 'south'},{20 + i % 5}")
    f = tmp_path / "big.csv"
    write_lines(f, rows)
    ds = load_csv(f, schema_srl())
    assert ds.n1 == n1 and ds.n == n


def test_csv_round_trip(tmp_path):
    f = tmp_path / "d.csv"
    write_lines(f, [
        "scope1,region,log_revenue",
        "1.5,north,20.25",
        ",south,21.0",
        "NA,west,19.5",
    ])
    ds = load_csv(f, schema_srl())
    g = tmp_path / "out.csv"
    write_csv(ds, g)
    ds2 = load_csv(g, schema_srl())
    assert ds2.n == ds.n
    np.testing.assert_array_equal(ds.observed, ds2.observed)
    np.testing.assert_allclose(ds.outcome[ds.observed], ds2.outcome[ds2.observed])
    np.testing.assert_array_equal(ds.columns["region"], ds2.columns["region"])
    np.testing.assert_allclose(ds.columns["log_revenue"], ds2.columns["log_revenue"])


def test_dataset_rejects_missing_covariate():
    with pytest.raises(DataError, match="log_revenue"):
        Dataset(schema_srl(), {
            "scope1": [1.0, 2.0],
            "region": ["north", "south"],
            "log_revenue": [20.0, np.nan],
        })


def test_schema_requires_single_outcome():
    with pytest.raises(DataError, match="outcome"):
        VariableSchema([Variable("a", "continuous"), Variable("b", "continuous")])


def make_ds(regions, observed, revenue=None):
    n = len(regions)
    y = np.where(observed, 1.0, np.nan)
    rev = revenue if revenue is not None else np.linspace(19, 22, n)
    return Dataset(schema_srl(), {
        "scope1": y, "region": regions, "log_revenue": rev,
    })


SPEC = DesignSpec(("region", "log_revenue"), ("region",))


def test_common_support_drops_one_sided_level():
    ds = make_ds(["north", "north", "south", "south", "west", "west"],
                 [True, False, True, False, True, True])
    kept, report = check_common_support(ds, SPEC)
    assert set(np.unique(kept.columns["region"])) == {"north", "south"}
    assert report.n_dropped == 2
    assert {e[2] for e in report.entries} == {"west"}
    assert report.entries[0][3] == "no missing outcomes"


def test_common_support_identity_when_mixed():
    ds = make_ds(["north", "north", "south", "south"], [True, False, False, True])
    kept, report = check_common_support(ds, SPEC)
    assert kept.n == ds.n and report.n_dropped == 0


def test_common_support_idempotent():
    ds = make_ds(["north", "north", "south", "south", "west"],
                 [True, False, True, False, False])
    kept, _ = check_common_support(ds, SPEC)
    again, report2 = check_common_support(kept, SPEC)
    assert again.n == kept.n and report2.n_dropped == 0


def test_common_support_all_dropped_is_error():
    ds = make_ds(["north", "south"], [True, True])
    with pytest.raises(DataError, match="every row"):
        check_common_support(ds, SPEC)


def test_encode_design_column_count_and_order():
    ds = make_ds(["north", "south", "west", "north"], [True, True, False, True])
    dm = encode_design(ds, ["region", "log_revenue"])
    assert dm.k == 1 + 2 + 1
    assert dm.column_names == ("intercept", "region[south]", "region[west]", "log_revenue")
    np.testing.assert_array_equal(dm.values[:, 0], 1.0)
    np.testing.assert_array_equal(dm.values[:, 1], [0, 1, 0, 0])


def test_encode_design_rank_deficiency_names_columns():
    schema = VariableSchema([
        Variable("y", "continuous", role="outcome"),
        Variable("a", "continuous"),
        Variable("b", "continuous"),
    ])
    ds = Dataset(schema, {"y": [1.0, 2, 3, 4], "a": [1.0, 2, 3, 4], "b": [1.0, 2, 3, 4]})
    with pytest.raises(DataError) as err:
        encode_design(ds, ["a", "b"])
    assert "a" in str(err.value) or "b" in str(err.value)


def test_encode_design_forty_level_sector_gives_41_columns():
    rng = np.random.default_rng(1)
    levels = tuple(f"S{i:02d}" for i in range(1, 41))
    schema = VariableSchema([
        Variable("y", "continuous", role="outcome"),
        Variable("sector", "categorical", levels),
        Variable("log_revenue", "continuous"),
    ])
    n = 400
    sector = rng.choice(levels, size=n)
    sector[:40] = levels  # every level present
    ds = Dataset(schema, {
        "y": rng.normal(size=n),
        "sector": sector,
        "log_revenue": rng.normal(21, 2, n),
    })
    dm = encode_design(ds, ["sector", "log_revenue"])
    assert dm.k == 41


def test_encode_design_commutes_with_row_subset():
    regions = ["north", "north", "south", "south", "west", "west"] * 2
    flags = [True, False, True, False, True, False,
             False, True, False, True, False, True]
    ds = make_ds(regions, flags, revenue=np.arange(12, dtype=float) + 19.0)
    full = encode_design(ds, ["region", "log_revenue"])
    sub_rows = np.nonzero(ds.observed)[0]
    a = full.values[sub_rows]
    b = encode_design(ds, ["region", "log_revenue"], rows=ds.observed)
    np.testing.assert_array_equal(a, b.values)
    assert full.column_names == b.column_names


def test_exclusion_restriction_flag():
    assert DesignSpec(("region",), ("region", "log_revenue")).has_exclusion_restriction
    assert not DesignSpec(("region",), ("region",)).has_exclusion_restriction
