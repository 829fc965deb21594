"""Synthetic data from the distilled latent space and the frozen teacher decoder."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset, decode_columns, decode_rows, encode_columns, write_csv
from .exceptions import FairDistillError, LatentDimMismatch, SchemaMismatch


@dataclass
class SyntheticDataset:
    data: Dataset
    provenance: dict = field(default_factory=dict)

    @property
    def schema(self):
        return self.data.schema

    def __len__(self):
        return len(self.data)

    def records(self) -> list[dict]:
        return decode_rows(self.data.X, self.schema, self.data.s, self.data.y)


def decoder_input(z: np.ndarray, s, n_groups: int) -> np.ndarray:
    """Codes with the one-hot group appended, as the decoder was trained on."""
    return np.hstack([np.asarray(z, dtype=np.float64), np.eye(n_groups)[np.asarray(s, dtype=np.int64)]])


def generate_synthetic(d_source: Dataset, student, teacher, n_out: int, seed: int,
                       resample_group: bool = False, source_split: str = "train") -> SyntheticDataset:
    """Encode sampled source rows with the student, decode with the teacher decoder.

    Rows are drawn without replacement when ``n_out <= n``. The decoder is
    conditioned on each source row's own group unless ``resample_group``, in
    which case groups are redrawn from their empirical marginal. Labels are
    copied from the source rows.
    """
    if n_out < 0:
        raise ValueError("n_out must be >= 0")
    k = teacher.latent_dim
    if student.student_.output_width != 2 * k or teacher.decoder_.input_width != k + teacher.n_groups_:
        raise LatentDimMismatch("student and decoder latent dimensions differ")
    if d_source.schema.encoded_width != teacher.n_features_in_:
        raise SchemaMismatch("source data width differs from the teacher's training width")
    rng = np.random.default_rng(seed)
    n = len(d_source)
    rows = rng.choice(n, size=n_out, replace=n_out > n)
    noise = rng.standard_normal((n_out, k))
    src = d_source.subset(rows)
    s_out = rng.choice(d_source.s, size=n_out) if resample_group else src.s
    schema = d_source.schema
    if n_out:
        z = student.sample_latent(src.X, src.s, noise)
        probs = nn._sigmoid(nn.forward(teacher.decoder_, decoder_input(z, s_out, teacher.n_groups_)))
        cols = decode_columns(probs, schema)
    else:
        cols = {c.name: [] for c in schema.features}
    cols[schema.protected.name] = [schema.protected.categories[g] for g in s_out]
    t = schema.target
    cols[t.name] = [t.positive if v == 1 else next(c for c in t.categories if c != t.positive) for v in src.y]
    data = encode_columns(cols, schema)
    prov = {
        "teacher": teacher.encoder_.fingerprint()[:16] + teacher.decoder_.fingerprint()[:16],
        "student": student.student_.fingerprint()[:32],
        "seed": int(seed),
        "n_out": int(n_out),
        "source": source_split,
        "flags": {"resample_group": bool(resample_group)},
    }
    return SyntheticDataset(data, prov)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".provenance.json")


def export_synthetic(sd: SyntheticDataset, path) -> Path:
    """Write the CSV with original column names plus a provenance JSON sidecar."""
    path = Path(path)
    try:
        write_csv(sd.records(), sd.schema, path)
        sidecar_path(path).write_text(json.dumps(sd.provenance, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise FairDistillError(f"cannot write {path}: {e}") from e
    return path
