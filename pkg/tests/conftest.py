import csv

import numpy as np
import pytest

from fairdistill.data import TabularSchema, load_csv

TOY_SPECS = [
    {"name": "age", "kind": "numeric"},
    {"name": "score", "kind": "numeric"},
    {"name": "colour", "kind": "categorical"},
    {"name": "sex", "kind": "categorical", "role": "protected"},
    {"name": "label", "kind": "categorical", "role": "target", "positive": "yes"},
]


def write_toy_csv(path, n=120, seed=0):
    rng = np.random.default_rng(seed)
    sex = rng.choice(["F", "M"], n)
    age = rng.integers(18, 70, n)
    score = np.round(rng.normal(0, 1, n) + (sex == "M"), 3)
    colour = rng.choice(["red", "green", "blue"], n)
    label = np.where(score + 0.02 * (age - 40) + rng.normal(0, 0.5, n) > 0.5, "yes", "no")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["age", "score", "colour", "sex", "label", "unused"])
        for row in zip(age, score, colour, sex, label):
            w.writerow([*row, "x"])
    return path


@pytest.fixture
def toy_csv(tmp_path):
    return write_toy_csv(tmp_path / "toy.csv")


@pytest.fixture
def toy(toy_csv):
    schema = TabularSchema.infer(toy_csv, TOY_SPECS)
    return load_csv(toy_csv, schema)


@pytest.fixture(scope="session")
def toy_models(tmp_path_factory):
    """A small fitted teacher/student pair on the toy table (shared, read-only)."""
    from fairdistill.distill import LatentDistiller
    from fairdistill.fairvae import FairVAE

    path = write_toy_csv(tmp_path_factory.mktemp("toy") / "toy.csv", n=200, seed=1)
    d = load_csv(path, TabularSchema.infer(path, TOY_SPECS))
    teacher = FairVAE(beta=2.0, latent_dim=3, hidden=(16, 16), epochs=5, batch_size=32, seed=0).fit(d.X, d.s)
    student = LatentDistiller(teacher, epochs=5, batch_size=32, seed=0).fit(d.X, d.s)
    return d, teacher, student


# one line per acceptance criterion, printed after the run regardless of capture
ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
