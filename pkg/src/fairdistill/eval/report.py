"""Repeated downstream evaluation of a synthetic dataset against real test data."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .fairness import fairness_details, utility_scores
from .forest import RandomForest
from .quality import density_coverage

METRICS = ("dpr", "eor", "accuracy", "recall", "f1", "density", "coverage")


@dataclass
class EvalConfig:
    repetitions: int = 10
    n_estimators: int = 100
    max_depth: int = 12
    max_features: str | int | float | None = "sqrt"
    k_nn: int = 5
    quality_sample: int = 2000
    seed: int = 0


@dataclass
class EvalReport:
    metrics: dict
    repetitions: int
    timings_ms: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    runs: list = field(default_factory=list)

    def mean(self, name):
        return self.metrics[name]["mean"]

    def std(self, name):
        return self.metrics[name]["std"]

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "repetitions": self.repetitions,
                "timings_ms": self.timings_ms, "flags": self.flags, "runs": self.runs}

    def to_json(self) -> str:
        return json.dumps(_rounded(self.to_dict()), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(d["metrics"], d["repetitions"], d.get("timings_ms", {}), d.get("flags", {}), d.get("runs", []))


def _rounded(obj, nd=12):
    # fixed precision keeps the JSON byte-stable across platforms' float printing
    if isinstance(obj, float):
        return round(obj, nd)
    if isinstance(obj, dict):
        return {str(k): _rounded(v, nd) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v, nd) for v in obj]
    return obj


def summarize(runs: list[dict], names=METRICS) -> dict:
    out = {}
    for name in names:
        vals = [r[name] for r in runs if r.get(name) is not None]
        if not vals:
            out[name] = {"mean": None, "std": None, "n": 0}
        else:
            out[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
    return out


def evaluate_pipeline(real_test, synth, cfg: EvalConfig | None = None, repetitions: int | None = None,
                      quality: bool = True) -> EvalReport:
    """Train forests on ``synth`` (a Dataset or SyntheticDataset), score them on ``real_test``.

    Each repetition uses its own seed for the forest and the density/coverage
    subsample. Density/coverage compare encoded non-protected features only.
    """
    cfg = cfg or EvalConfig()
    r = repetitions if repetitions is not None else cfg.repetitions
    data = getattr(synth, "data", synth)
    if data.schema != real_test.schema:
        from ..exceptions import SchemaMismatch
        raise SchemaMismatch("synthetic and real schemas differ")
    X_train, X_test = data.with_group(), real_test.with_group()
    runs, timings = [], {"fit_forest": 0.0, "predict": 0.0, "density_coverage": 0.0}
    flags = {"all_zero_selection": 0, "degenerate_rates": 0}
    for rep in range(r):
        seed = cfg.seed + rep
        t0 = time.perf_counter()
        model = RandomForest(cfg.n_estimators, cfg.max_depth, cfg.max_features, random_state=seed).fit(X_train, data.y)
        t1 = time.perf_counter()
        y_hat = model.predict(X_test)
        t2 = time.perf_counter()
        fair = fairness_details(y_hat, real_test.y, real_test.s)
        acc, rec, f1 = utility_scores(y_hat, real_test.y)
        row = {"seed": seed, "dpr": fair["dpr"], "eor": fair["eor"], "accuracy": acc, "recall": rec, "f1": f1,
               "selection_rate": float(np.mean(y_hat)), "density": None, "coverage": None}
        flags["all_zero_selection"] += int(fair["flags"]["all_zero_selection"])
        flags["degenerate_rates"] += int(bool(fair["flags"]["degenerate_rates"]))
        if quality:
            rng = np.random.default_rng(seed)
            m = cfg.quality_sample
            ri = rng.choice(len(real_test), min(m, len(real_test)), replace=False)
            si = rng.choice(len(data), min(m, len(data)), replace=False)
            row["density"], row["coverage"] = density_coverage(real_test.X[ri], data.X[si], cfg.k_nn)
        t3 = time.perf_counter()
        timings["fit_forest"] += (t1 - t0) * 1e3
        timings["predict"] += (t2 - t1) * 1e3
        timings["density_coverage"] += (t3 - t2) * 1e3
        runs.append(row)
    return EvalReport(summarize(runs), r, timings, flags, runs)
