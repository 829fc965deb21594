import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairdistill import datasets
from fairdistill.data import (Column, TabularSchema, check_encoded, decode_rows, encode_columns, load_csv,
                              split_80_20, write_csv)
from fairdistill.exceptions import (EmptyFile, MissingColumn, NonFiniteNumeric, SchemaError, TooFewRows,
                                    UnknownCategory, WidthMismatch)
from conftest import TOY_SPECS


def test_schema_inference(toy_csv):
    schema = TabularSchema.infer(toy_csv, TOY_SPECS)
    assert schema.protected.name == "sex" and schema.target.name == "label"
    assert schema.protected.categories == ("F", "M")
    colour = next(c for c in schema.columns if c.name == "colour")
    assert colour.categories == ("blue", "green", "red")
    age = next(c for c in schema.columns if c.name == "age")
    assert age.integer and 18 <= age.minimum <= age.maximum <= 69
    assert schema.encoded_width == 1 + 1 + 3
    assert TabularSchema.from_dict(schema.to_dict()) == schema


def test_schema_role_validation():
    cat = dict(kind="categorical", categories=("a", "b"))
    with pytest.raises(SchemaError):
        TabularSchema((Column("p", role="protected", **cat), Column("q", role="protected", **cat),
                       Column("t", role="target", **cat)))
    with pytest.raises(SchemaError):
        TabularSchema((Column("p", role="protected", **cat),
                       Column("t", kind="categorical", role="target", categories=("a", "b", "c"))))
    with pytest.raises(SchemaError):
        TabularSchema((Column("p", role="protected", kind="numeric", minimum=0, maximum=1),
                       Column("t", role="target", **cat)))


def test_load_encodes_invariants(toy):
    toy.validate()
    assert toy.X.shape == (120, 5)
    assert set(np.unique(toy.s)) <= {0, 1} and set(np.unique(toy.y)) <= {0, 1}
    assert toy.with_group().shape == (120, 7)


def test_round_trip_through_csv(toy, tmp_path):
    out = tmp_path / "rt.csv"
    write_csv(decode_rows(toy.X, toy.schema, toy.s, toy.y), toy.schema, out)
    back = load_csv(out, toy.schema)
    assert np.array_equal(back.X, toy.X) and np.array_equal(back.s, toy.s) and np.array_equal(back.y, toy.y)


def test_unknown_category_names_column_and_row(toy_csv, tmp_path):
    schema = TabularSchema.infer(toy_csv, TOY_SPECS)
    bad = tmp_path / "bad.csv"
    lines = toy_csv.read_text().splitlines()
    parts = lines[3].split(",")
    parts[2] = "purple"
    lines[3] = ",".join(parts)
    bad.write_text("\n".join(lines) + "\n")
    with pytest.raises(UnknownCategory) as err:
        load_csv(bad, schema)
    assert "colour" in str(err.value) and "purple" in str(err.value)


def test_missing_column_and_empty_file(toy_csv, tmp_path):
    schema = TabularSchema.infer(toy_csv, TOY_SPECS)
    p = tmp_path / "m.csv"
    p.write_text("age,score,colour,label\n30,1.0,red,yes\n")
    with pytest.raises(MissingColumn):
        load_csv(p, schema)
    e = tmp_path / "e.csv"
    e.write_text("")
    with pytest.raises(EmptyFile):
        load_csv(e, schema)


def test_non_finite_and_out_of_range_numeric(toy_csv, tmp_path):
    schema = TabularSchema.infer(toy_csv, TOY_SPECS)
    for value in ("nan", "inf", "1000"):
        p = tmp_path / "n.csv"
        p.write_text(f"age,score,colour,sex,label\n{value},0.5,red,F,no\n")
        with pytest.raises(NonFiniteNumeric):
            load_csv(p, schema)


def test_header_only_file_gives_zero_rows(toy_csv, tmp_path):
    schema = TabularSchema.infer(toy_csv, TOY_SPECS)
    p = tmp_path / "h.csv"
    p.write_text("age,score,colour,sex,label\n")
    assert len(load_csv(p, schema)) == 0


def test_gzip_input(toy_csv, tmp_path):
    gz = tmp_path / "toy.csv.gz"
    gz.write_bytes(gzip.compress(toy_csv.read_bytes()))
    schema = TabularSchema.infer(toy_csv, TOY_SPECS)
    assert np.array_equal(load_csv(gz, schema).X, load_csv(toy_csv, schema).X)


def test_check_encoded_catches_bad_blocks(toy):
    X = toy.X.copy()
    X[0, 2:5] = [1, 1, 0]
    with pytest.raises(ValueError):
        check_encoded(X, toy.schema)
    with pytest.raises(WidthMismatch):
        check_encoded(X[:, :3], toy.schema)


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 300), st.integers(0, 2**31))
def test_split_sizes_disjoint_and_deterministic(n, seed):
    schema = TabularSchema((Column("g", "categorical", "protected", ("a", "b")),
                            Column("t", "categorical", "target", ("n", "y"), positive="y")))
    d = encode_columns({"g": ["a"] * n, "t": ["y", "n"] * (n // 2) + ["y"] * (n % 2)}, schema)
    sp = split_80_20(d, seed)
    assert len(sp.train) == int(np.floor(0.8 * n)) and len(sp.train) + len(sp.test) == n
    assert not set(sp.train.index) & set(sp.test.index)
    assert np.array_equal(split_80_20(d, seed).train.index, sp.train.index)


def test_split_needs_five_rows(toy):
    with pytest.raises(TooFewRows):
        split_80_20(toy.subset(np.arange(4)), 0)


def test_bundled_datasets():
    adult = datasets.load("adult")
    assert len(adult) == 45222 and adult.schema.protected.categories == ("Female", "Male")
    assert 0.2 < adult.y.mean() < 0.3
    compas = datasets.load("compas")
    assert len(compas) == 6172 and compas.schema.target.positive == "yes"
    race = datasets.load("compas", protected="race")
    assert race.schema.n_groups > 2
