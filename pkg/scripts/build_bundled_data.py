"""Rebuild the bundled Adult and COMPAS CSVs from the raw public files.

Usage: python scripts/build_bundled_data.py RAW_DIR

RAW_DIR must contain adult.data, adult.test and compas-scores-two-years.csv
(UCI Adult, ProPublica COMPAS). Output goes to src/fairdistill/datasets/.
"""
import sys
from pathlib import Path

import pandas as pd

OUT = Path(__file__).resolve().parents[1] / "src" / "fairdistill" / "datasets"

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
]


def build_adult(raw: Path) -> pd.DataFrame:
    frames = []
    for name, skip in (("adult.data", 0), ("adult.test", 1)):
        df = pd.read_csv(raw / name, names=ADULT_COLUMNS, skiprows=skip,
                         skipinitialspace=True, na_values="?")
        frames.append(df)
    df = pd.concat(frames, ignore_index=True).dropna()
    df["income"] = df["income"].str.rstrip(".")
    # fnlwgt is a census sampling weight, education-num duplicates education
    return df.drop(columns=["fnlwgt", "education-num"])


def build_compas(raw: Path) -> pd.DataFrame:
    df = pd.read_csv(raw / "compas-scores-two-years.csv")
    # standard ProPublica screening filter
    df = df[(df.days_b_screening_arrest <= 30) & (df.days_b_screening_arrest >= -30)
            & (df.is_recid != -1) & (df.c_charge_degree != "O")
            & (df.score_text != "N/A")]
    cols = ["sex", "age", "race", "juv_fel_count", "juv_misd_count", "juv_other_count",
            "priors_count", "c_charge_degree", "two_year_recid"]
    df = df.loc[:, ~df.columns.duplicated()][cols]
    df["two_year_recid"] = df["two_year_recid"].map({0: "no", 1: "yes"})
    return df


def main(raw_dir: str) -> None:
    raw = Path(raw_dir)
    build_adult(raw).to_csv(OUT / "adult.csv.gz", index=False)
    build_compas(raw).to_csv(OUT / "compas.csv.gz", index=False)


if __name__ == "__main__":
    main(sys.argv[1])
