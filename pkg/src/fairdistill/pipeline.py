"""Run configuration, stage execution with resumable artifacts, sweeps and reports.

Stages run in order ``split -> teacher -> distill -> generate -> evaluate``.
Every stage writes its artifacts into the run directory and records their
sha256 in ``manifest.json`` together with a fingerprint of the configuration
that produced them; a stage is skipped on resume when its fingerprint and
artifact hashes still match.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__, datasets
from .data import CATEGORICAL, Dataset, SplitPair, TabularSchema, load_csv, split_80_20
from .distill import QUALITY_LOSSES, DistillConfig, LatentDistiller
from .eval.forest import RandomForest
from .eval.importance import feature_importance
from .eval.pca import PCA
from .eval.report import METRICS, EvalConfig, EvalReport, evaluate_pipeline
from .exceptions import ConfigError, FairDistillError, ManifestMismatch, MissingColumn, StageError
from .fairvae import FairVAE, FairVaeConfig
from .generate import export_synthetic, generate_synthetic

logger = logging.getLogger(__name__)

STAGES = ("split", "teacher", "distill", "generate", "evaluate")
BUILTIN_PREFIX = "builtin:"


@dataclass
class DataConfig:
    path: str = "builtin:adult"
    columns: list | None = None
    protected: str | None = None
    sample: int | None = None

    def __post_init__(self):
        if self.sample is not None and self.sample < 5:
            raise ValueError("sample must be at least 5 rows")


@dataclass
class GenerateConfig:
    n_out: int | None = None
    resample_group: bool = False

    def __post_init__(self):
        if self.n_out is not None and self.n_out < 1:
            raise ValueError("n_out must be >= 1")


@dataclass
class EvalSettings(EvalConfig):
    baseline: bool = True
    importance: bool = True
    pca_rows: int = 2000


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    teacher: FairVaeConfig = field(default_factory=FairVaeConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    seed: int = 0

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        sections = {"data": DataConfig, "teacher": FairVaeConfig, "distill": DistillConfig,
                    "generate": GenerateConfig, "eval": EvalSettings}
        unknown = set(d) - set(sections) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, typ in sections.items():
            sub = d.get(key) or {}
            if not isinstance(sub, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            allowed = {f.name for f in fields(typ)}
            bad = set(sub) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
            try:
                kwargs[key] = typ(**sub)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid {key!r} section: {e}") from None
        try:
            seed = int(d.get("seed", 0))
        except (TypeError, ValueError):
            raise ConfigError("seed must be an integer") from None
        return cls(seed=seed, **kwargs)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_config(path, seed: int | None = None) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config {path}: {e}") from None
    cfg = RunConfig.from_dict(raw)
    if seed is not None:
        cfg.seed = int(seed)
    return cfg


def stage_seed(global_seed: int, stage: str) -> int:
    """Per-stage seed: first word of ``SeedSequence([global_seed, stage_index])``."""
    return int(np.random.SeedSequence([int(global_seed), STAGES.index(stage)]).generate_state(1)[0])


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def resolve_data_path(path: str) -> Path:
    if path.startswith(BUILTIN_PREFIX):
        name = path[len(BUILTIN_PREFIX):]
        if name not in datasets.BUILTIN:
            raise ConfigError(f"unknown builtin dataset {name!r}")
        return datasets.path(name)
    return Path(path)


def resolve_schema(cfg: DataConfig) -> TabularSchema:
    """Build the schema, validating column references before any training."""
    path = resolve_data_path(cfg.path)
    if not path.exists():
        raise ConfigError(f"dataset not found: {path}")
    if cfg.columns is not None:
        cols = [dict(c) for c in cfg.columns]
    elif cfg.path.startswith(BUILTIN_PREFIX):
        cols = datasets.columns(cfg.path[len(BUILTIN_PREFIX):])
    else:
        raise ConfigError("data.columns is required for non-builtin datasets")
    if cfg.protected is not None:
        if not any(c["name"] == cfg.protected for c in cols):
            raise ConfigError(f"protected column {cfg.protected!r} is not in the schema")
        for c in cols:
            if c.get("role") == "protected":
                del c["role"]
            if c["name"] == cfg.protected:
                if c.get("kind", CATEGORICAL) != CATEGORICAL:
                    raise ConfigError("protected column must be categorical")
                c["role"] = "protected"
    try:
        return TabularSchema.infer(path, cols)
    except MissingColumn as e:
        raise ConfigError(f"column {e} missing from {path}") from None
    except FairDistillError as e:
        raise ConfigError(f"invalid schema: {e}") from None


class Pipeline:
    """One run directory. ``run(until)`` executes stages up to and including ``until``.

    With ``resume`` every stage whose recorded artifacts are still valid is
    reused; ``reuse`` names stages to reuse when valid even without ``resume``.
    """

    def __init__(self, cfg: RunConfig, out, resume: bool = False, reuse=()):
        self.cfg = cfg
        self.out = Path(out)
        self.resume = resume
        self.reuse = tuple(reuse)
        self.schema = resolve_schema(cfg.data)
        self.seeds = {s: stage_seed(cfg.seed, s) for s in STAGES}
        self.out.mkdir(parents=True, exist_ok=True)
        mpath = self.out / "manifest.json"
        self.manifest = _read_json(mpath) if mpath.exists() else None
        if self.manifest is None:
            self.manifest = {"tool_version": __version__, "stages": {}}
        self.manifest["tool_version"] = __version__
        self.manifest["config_hash"] = _hash_obj(cfg.to_dict())
        self.manifest["schema_hash"] = _hash_obj(self.schema.to_dict())
        self.manifest["seeds"] = self.seeds
        self.manifest.setdefault("timings_ms", {})
        _write_json(self.out / "config.json", cfg.to_dict())
        self._state: dict = {}

    # -- bookkeeping ------------------------------------------------------
    def fingerprint(self, stage: str) -> str:
        c = self.cfg.to_dict()
        parts = {"data": c["data"], "seed": c["seed"], "schema": self.schema.to_dict()}
        upto = STAGES.index(stage)
        for i, name in enumerate(("teacher", "distill", "generate", "eval")):
            if i + 1 <= upto:
                parts[name] = c[name]
        return _hash_obj(parts)

    def _valid(self, stage: str) -> bool:
        rec = self.manifest["stages"].get(stage)
        if not rec or rec.get("fingerprint") != self.fingerprint(stage):
            return False
        for name, digest in rec["artifacts"].items():
            p = self.out / name
            if not p.exists() or _sha256(p) != digest:
                return False
        return True

    def _record(self, stage: str, names: list[str], seconds: float, inputs: list[str], extra=None) -> None:
        self.manifest["stages"][stage] = {
            "fingerprint": self.fingerprint(stage),
            "artifacts": {n: _sha256(self.out / n) for n in names},
            "inputs": inputs,
        }
        self.manifest["timings_ms"][stage] = round(seconds * 1e3, 3)
        if extra:
            self.manifest["timings_ms"].update(extra)
        # later stages depend on this one; drop their records
        for later in STAGES[STAGES.index(stage) + 1:]:
            self.manifest["stages"].pop(later, None)
        self.save_manifest()

    def save_manifest(self) -> None:
        _write_json(self.out / "manifest.json", self.manifest)

    def artifact(self, name: str) -> Path:
        return self.out / name

    # -- stages -----------------------------------------------------------
    def split(self) -> SplitPair:
        if "split" in self._state:
            return self._state["split"]
        path = resolve_data_path(self.cfg.data.path)
        d = load_csv(path, self.schema)
        seed = self.seeds["split"]
        if self._reuse("split"):
            doc = _read_json(self.artifact("split.json"))
            sp = SplitPair(d.subset(doc["train"]), d.subset(doc["test"]), doc["seed"])
        else:
            t0 = time.perf_counter()
            if self.cfg.data.sample is not None and self.cfg.data.sample < len(d):
                keep = np.sort(np.random.default_rng(seed).choice(len(d), self.cfg.data.sample, replace=False))
                d = d.subset(keep)
            sp = split_80_20(d, seed)
            _write_json(self.artifact("schema.json"), self.schema.to_dict())
            _write_json(self.artifact("split.json"), {"seed": seed, "train": sp.train.index.tolist(),
                                                      "test": sp.test.index.tolist()})
            self._record("split", ["schema.json", "split.json"], time.perf_counter() - t0, [str(path)])
        self._state["split"] = sp
        return sp

    def _reuse(self, stage: str) -> bool:
        return (self.resume or stage in self.reuse) and self._valid(stage)

    def teacher(self) -> FairVAE:
        if "teacher" in self._state:
            return self._state["teacher"]
        sp = self.split()
        if self._reuse("teacher"):
            model = FairVAE.load(self.artifact("teacher.json"))
        else:
            cfg = asdict(self.cfg.teacher)
            cfg["seed"] = self.seeds["teacher"]
            t0 = time.perf_counter()
            try:
                model = FairVAE(n_groups=self.schema.n_groups, **cfg).fit(sp.train.X, sp.train.s)
            except FairDistillError as e:
                raise StageError("teacher", e) from e
            model.save(self.artifact("teacher.json"))
            _write_json(self.artifact("teacher_trace.json"), model.history_)
            per_epoch = model.fit_seconds_ / max(1, model.epochs)
            self._record("teacher", ["teacher.json", "teacher_trace.json"], time.perf_counter() - t0,
                         ["split.json"], {"teacher_per_epoch": round(per_epoch * 1e3, 3)})
        self._state["teacher"] = model
        return model

    def distill(self) -> LatentDistiller:
        if "distill" in self._state:
            return self._state["distill"]
        sp, teacher = self.split(), self.teacher()
        if self._reuse("distill"):
            model = LatentDistiller.load(self.artifact("student.json"), teacher)
        else:
            cfg = asdict(self.cfg.distill)
            cfg["seed"] = self.seeds["distill"]
            t0 = time.perf_counter()
            try:
                model = LatentDistiller(teacher, **cfg).fit(sp.train.X, sp.train.s)
            except FairDistillError as e:
                raise StageError("distill", e) from e
            model.save(self.artifact("student.json"))
            _write_json(self.artifact("distill_trace.json"), {"epochs": model.history_,
                                                               "steps": model.step_history_})
            per_epoch = model.fit_seconds_ / max(1, model.epochs)
            self._record("distill", ["student.json", "distill_trace.json"], time.perf_counter() - t0,
                         ["split.json", "teacher.json"], {"distill_per_epoch": round(per_epoch * 1e3, 3)})
        self._state["distill"] = model
        return model

    def generate(self) -> Dataset:
        if "generate" in self._state:
            return self._state["generate"]
        sp, teacher, student = self.split(), self.teacher(), self.distill()
        if not self._reuse("generate"):
            g = self.cfg.generate
            n_out = g.n_out if g.n_out is not None else len(sp.train)
            t0 = time.perf_counter()
            try:
                sd = generate_synthetic(sp.train, student, teacher, n_out, self.seeds["generate"],
                                        resample_group=g.resample_group)
                export_synthetic(sd, self.artifact("synthetic.csv"))
            except FairDistillError as e:
                raise StageError("generate", e) from e
            self._record("generate", ["synthetic.csv", "synthetic.provenance.json"], time.perf_counter() - t0,
                         ["split.json", "teacher.json", "student.json"])
        synth = load_csv(self.artifact("synthetic.csv"), self.schema)
        self._state["generate"] = synth
        return synth

    def evaluate(self) -> EvalReport:
        sp, synth = self.split(), self.generate()
        teacher, student = self.teacher(), self.distill()
        if self._reuse("evaluate"):
            return EvalReport.from_dict(_read_json(self.artifact("metrics.json")))
        e = self.cfg.eval
        ecfg = EvalConfig(e.repetitions, e.n_estimators, e.max_depth, e.max_features, e.k_nn,
                          e.quality_sample, self.seeds["evaluate"])
        names = ["metrics.json", "pca.csv"]
        t0 = time.perf_counter()
        try:
            report = evaluate_pipeline(sp.test, synth, ecfg)
            _write_json(self.artifact("metrics.json"), _deterministic(report))
            extra = {f"eval_{k}": round(v, 3) for k, v in report.timings_ms.items()}
            if e.baseline:
                base = evaluate_pipeline(sp.test, sp.train, ecfg)
                _write_json(self.artifact("baseline_metrics.json"), _deterministic(base))
                names.append("baseline_metrics.json")
            if e.importance:
                _write_json(self.artifact("importance.json"), self._importance(sp, synth, ecfg))
                names.append("importance.json")
            self._write_pca(sp, teacher, student)
        except FairDistillError as err:
            raise StageError("evaluate", err) from err
        self._record("evaluate", names, time.perf_counter() - t0,
                     ["split.json", "synthetic.csv", "teacher.json", "student.json"], extra)
        return report

    def _importance(self, sp, synth, ecfg) -> dict:
        out = {}
        for name, train in (("original", sp.train), ("synthetic", synth)):
            model = RandomForest(ecfg.n_estimators, ecfg.max_depth, ecfg.max_features,
                                 random_state=ecfg.seed).fit(train.with_group(), train.y)
            out[name] = feature_importance(model, sp.test, seed=ecfg.seed)
        return out

    def _write_pca(self, sp, teacher, student) -> None:
        n = min(self.cfg.eval.pca_rows, len(sp.test))
        test = sp.test.subset(np.arange(n))
        zt, zs = teacher.transform(test.X, test.s), student.transform(test.X, test.s)
        pca = PCA(2).fit(zt)
        rows = []
        for src, z in (("teacher", zt), ("student", zs)):
            for p, g in zip(pca.transform(z), test.s):
                rows.append([src, repr(float(p[0])), repr(float(p[1])), self.schema.protected.categories[g]])
        with open(self.artifact("pca.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source", "pc1", "pc2", "group"])
            w.writerows(rows)

    def run(self, until: str = "evaluate"):
        steps = {"split": self.split, "teacher": self.teacher, "distill": self.distill,
                 "generate": self.generate, "evaluate": self.evaluate}
        result = None
        for stage in STAGES[:STAGES.index(until) + 1]:
            try:
                result = steps[stage]()
            except StageError:
                raise
            except (FairDistillError, ValueError, ArithmeticError) as e:
                raise StageError(stage, e) from e
        self.save_manifest()
        return result


def _deterministic(report: EvalReport) -> dict:
    """Report contents without wall-clock timings (those live in the manifest)."""
    d = json.loads(report.to_json())
    d.pop("timings_ms")
    return d


def run_stage(cfg: RunConfig, out, until: str = "evaluate", resume: bool = False):
    """Run stages up to ``until``; earlier stages are reused when still valid."""
    p = Pipeline(cfg, out, resume=resume, reuse=STAGES[:STAGES.index(until)])
    return p, p.run(until)


def cmd_pipeline(cfg: RunConfig, out, resume: bool = False) -> dict:
    p = Pipeline(cfg, out, resume=resume)
    p.run("evaluate")
    return p.manifest


SWEEP_AXES = {"lambda": ("distill", "lam", [float(v) for v in range(1, 11)]),
              "beta": ("teacher", "beta", [float(v) for v in range(1, 11)]),
              "loss-kind": ("distill", "quality_loss", list(QUALITY_LOSSES))}
SWEEP_COLUMNS = ["axis", "value", "status"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]


def cmd_sweep(cfg: RunConfig, out, axis: str, values=None, resume: bool = False) -> list[dict]:
    """Run one pipeline per axis value; lambda and loss-kind cells share one teacher."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    section, key, default = SWEEP_AXES[axis]
    values = list(values) if values is not None else default
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    shared = None
    if section == "distill":
        shared = out / "shared"
        run_stage(cfg, shared, "teacher", resume=True)
    rows = []
    for v in values:
        cell_cfg = copy.deepcopy(cfg)
        setattr(getattr(cell_cfg, section), key, v)
        cell = out / f"{axis}={v}"
        cell.mkdir(parents=True, exist_ok=True)
        row = {"axis": axis, "value": v}
        try:
            if shared is not None:
                share_teacher(shared, cell)
            p = Pipeline(cell_cfg, cell, resume=resume, reuse=("split", "teacher"))
            report = p.run("evaluate")
            row["status"] = "ok"
            for m in METRICS:
                row[f"{m}_mean"], row[f"{m}_std"] = report.mean(m), report.std(m)
            row["teacher_hash"] = p.manifest["stages"]["teacher"]["artifacts"]["teacher.json"]
        except FairDistillError as e:
            logger.warning("sweep cell %s=%s failed: %s", axis, v, e)
            row["status"] = f"failed: {e}"
        rows.append(row)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, SWEEP_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_json(out / "sweep.json", rows)
    return rows


def share_teacher(shared, cell) -> None:
    """Copy a run's split/teacher artifacts and manifest records into another run directory."""
    shared, cell = Path(shared), Path(cell)
    cell.mkdir(parents=True, exist_ok=True)
    man = _read_json(shared / "manifest.json")
    cell_man_path = cell / "manifest.json"
    cell_man = _read_json(cell_man_path) if cell_man_path.exists() else {"stages": {}, "timings_ms": {}}
    for stage in ("split", "teacher"):
        rec = man["stages"][stage]
        for name in rec["artifacts"]:
            shutil.copyfile(shared / name, cell / name)
        if cell_man["stages"].get(stage, {}).get("artifacts") != rec["artifacts"]:
            cell_man["stages"][stage] = rec
            for later in STAGES[STAGES.index(stage) + 1:]:
                cell_man["stages"].pop(later, None)
    for k in ("split", "teacher", "teacher_per_epoch"):
        if k in man.get("timings_ms", {}):
            cell_man.setdefault("timings_ms", {})[k] = man["timings_ms"][k]
    _write_json(cell_man_path, cell_man)


def _fmt(mean, std) -> str:
    if mean is None:
        return "n/a"
    return f"{mean:.2f} ± {std:.2f}"


def cmd_report(run_dirs, out=None) -> dict:
    """Merge several runs' metrics into one table with relative training-time differences.

    The first run is the reference: ``(t_other - t_ref) / t_ref * 100``.
    """
    runs = []
    for d in run_dirs:
        d = Path(d)
        try:
            man = _read_json(d / "manifest.json")
            metrics = _read_json(d / "metrics.json")
        except (OSError, ValueError) as e:
            raise ManifestMismatch(f"{d}: unreadable run ({e})") from None
        for name, digest in man["stages"].get("evaluate", {}).get("artifacts", {}).items():
            if not (d / name).exists() or _sha256(d / name) != digest:
                raise ManifestMismatch(f"{d}: artifact {name} does not match the manifest")
        runs.append((d, man, metrics))
    if not runs:
        raise ManifestMismatch("no runs given")
    schemas = {m["schema_hash"] for _, m, _ in runs}
    if len(schemas) > 1:
        raise ManifestMismatch("runs were produced from different schemas")
    t_ref = _train_ms(runs[0][1])
    rows = []
    for d, man, metrics in runs:
        row = {"run": d.name or str(d)}
        for m in METRICS:
            v = metrics["metrics"][m]
            row[m] = _fmt(v["mean"], v["std"])
        t = _train_ms(man)
        row["train_ms"] = t
        row["train_time_vs_first_pct"] = (t - t_ref) / t_ref * 100.0 if t_ref else None
        rows.append(row)
    table = {"columns": ["run", *METRICS, "train_ms", "train_time_vs_first_pct"], "rows": rows}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "report.json", table)
        with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, table["columns"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return table


def _train_ms(manifest) -> float:
    t = manifest.get("timings_ms", {})
    return float(t.get("teacher", 0.0)) + float(t.get("distill", 0.0))


def format_table(table: dict) -> str:
    cols = table["columns"]
    cells = [[str(c) for c in cols]]
    for r in table["rows"]:
        cells.append([f"{r[c]:.1f}" if isinstance(r[c], float) else str(r[c]) for c in cols])
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells)
