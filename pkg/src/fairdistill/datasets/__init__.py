"""Bundled benchmark tables (UCI Adult, ProPublica COMPAS) and their column specs.

Rebuilt from the raw public files by ``scripts/build_bundled_data.py``.
"""
from __future__ import annotations

from pathlib import Path

from ..data import Dataset, TabularSchema, load_csv

HERE = Path(__file__).resolve().parent

ADULT_COLUMNS = [
    {"name": "age", "kind": "numeric"},
    {"name": "workclass", "kind": "categorical"},
    {"name": "education", "kind": "categorical"},
    {"name": "marital-status", "kind": "categorical"},
    {"name": "occupation", "kind": "categorical"},
    {"name": "relationship", "kind": "categorical"},
    {"name": "race", "kind": "categorical"},
    {"name": "sex", "kind": "categorical", "role": "protected"},
    {"name": "capital-gain", "kind": "numeric"},
    {"name": "capital-loss", "kind": "numeric"},
    {"name": "hours-per-week", "kind": "numeric"},
    {"name": "native-country", "kind": "categorical"},
    {"name": "income", "kind": "categorical", "role": "target", "positive": ">50K"},
]

COMPAS_COLUMNS = [
    {"name": "sex", "kind": "categorical", "role": "protected"},
    {"name": "age", "kind": "numeric"},
    {"name": "race", "kind": "categorical"},
    {"name": "juv_fel_count", "kind": "numeric"},
    {"name": "juv_misd_count", "kind": "numeric"},
    {"name": "juv_other_count", "kind": "numeric"},
    {"name": "priors_count", "kind": "numeric"},
    {"name": "c_charge_degree", "kind": "categorical"},
    {"name": "two_year_recid", "kind": "categorical", "role": "target", "positive": "yes"},
]

BUILTIN = {"adult": ("adult.csv.gz", ADULT_COLUMNS), "compas": ("compas.csv.gz", COMPAS_COLUMNS)}


def path(name: str) -> Path:
    return HERE / BUILTIN[name][0]


def columns(name: str, protected: str | None = None) -> list[dict]:
    """Column specs, optionally moving the protected role to another categorical column."""
    cols = [dict(c) for c in BUILTIN[name][1]]
    if protected is not None:
        for c in cols:
            if c.get("role") == "protected":
                del c["role"]
            if c["name"] == protected:
                c["role"] = "protected"
    return cols


def load(name: str, protected: str | None = None) -> Dataset:
    p = path(name)
    return load_csv(p, TabularSchema.infer(p, columns(name, protected)))
