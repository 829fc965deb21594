"""Latent-space distillation of a frozen teacher encoder into a smaller student.

Each step samples teacher and student codes with the same per-row noise and
minimises ``quality(z, z') + lam * KL(q(z' | x, s) || N(0, I))`` over the
student parameters only.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import nn
from .exceptions import LatentDimMismatch, NonFiniteLoss, ShapeMismatch, TeacherNotFrozen
from .fairvae import FairVAE, batch_indices, kl_to_standard_normal

logger = logging.getLogger(__name__)

QUALITY_LOSSES = ("L1", "MSE", "Huber", "MeanDifference")


def quality_loss(z, z_prime, kind: str = "L1", delta: float = 1.0):
    """Sum over latent dims of the batch-averaged discrepancy between codes.

    ``z`` is the teacher batch, ``z_prime`` the student batch (array or tape
    variable). ``MeanDifference`` compares per-dimension batch means.
    """
    zp_val = z_prime.value if isinstance(z_prime, nn.Var) else np.asarray(z_prime)
    z_val = z.value if isinstance(z, nn.Var) else np.asarray(z)
    if z_val.shape != zp_val.shape:
        raise ShapeMismatch(f"{z_val.shape} vs {zp_val.shape}")
    if kind not in QUALITY_LOSSES:
        raise ValueError(f"unknown quality loss {kind!r}; choose from {QUALITY_LOSSES}")
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    if not isinstance(z_prime, nn.Var) and not isinstance(z, nn.Var):
        tape = nn.Tape()
        return float(quality_loss(tape.constant(z_val), tape.constant(zp_val), kind, delta).value)
    tape = (z_prime if isinstance(z_prime, nn.Var) else z).tape
    z, z_prime = tape.lift(z), tape.lift(z_prime)
    if kind == "MeanDifference":
        return nn.absolute(z.mean(axis=0) - z_prime.mean(axis=0)).sum()
    r = z - z_prime
    if kind == "L1":
        e = nn.absolute(r)
    elif kind == "MSE":
        e = nn.square(r)
    else:
        e = nn.huber(r, delta)
    return e.mean(axis=0).sum()


def utility_kl(head) -> float:
    """Batch-mean KL of the student's diagonal Gaussian posterior to N(0, I)."""
    mu, log_var = (head.mu, head.log_var) if isinstance(head, nn.GaussianHead) else head
    out = kl_to_standard_normal(mu, log_var)
    val = out.value if isinstance(out, nn.Var) else out
    if not np.all(np.isfinite(val)):
        raise NonFiniteLoss("non-finite KL")
    return out


@dataclass
class DistillConfig:
    quality_loss: str = "L1"
    lam: float = 1.0
    huber_delta: float = 1.0
    hidden: tuple | None = None
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.quality_loss not in QUALITY_LOSSES:
            raise ValueError(f"unknown quality loss {self.quality_loss!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be > 0")
        if self.hidden is not None:
            self.hidden = tuple(self.hidden)
        self.betas = tuple(self.betas)


def student_hidden(teacher_hidden) -> tuple:
    """Half the width, one fewer hidden layer (at least one layer kept)."""
    teacher_hidden = tuple(teacher_hidden)
    n = max(1, len(teacher_hidden) - 1)
    return tuple(max(1, h // 2) for h in teacher_hidden[:n])


class LatentDistiller(BaseEstimator, TransformerMixin):
    """Student encoder trained to reproduce a frozen :class:`FairVAE` latent space."""

    def __init__(self, teacher=None, quality_loss="L1", lam=1.0, huber_delta=1.0, hidden=None,
                 epochs=100, batch_size=256, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, seed=0,
                 init=None, allow_same_size=False):
        self.teacher = teacher
        self.quality_loss = quality_loss
        self.lam = lam
        self.huber_delta = huber_delta
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.seed = seed
        self.init = init
        self.allow_same_size = allow_same_size

    @property
    def latent_dim(self) -> int:
        return self.teacher.latent_dim

    def _check_teacher(self):
        if not isinstance(self.teacher, FairVAE):
            raise TypeError("teacher must be a fitted FairVAE")
        check_is_fitted(self.teacher, "encoder_")

    def batch_loss(self, tape: nn.Tape, X, s, noise, track=True):
        """Loss terms of one batch as tape variables: quality, kl, total."""
        k = self.latent_dim
        inp = np.hstack([X, self.teacher._onehot(s)])
        z = nn.reparam_sample(nn.GaussianHead.split(nn.forward(self.teacher.encoder_, inp)), noise)
        out = self.student_.apply(tape, inp, track=track)
        mu, log_var = out[:, :k], out[:, k:]
        z_prime = nn.reparam_sample((mu, log_var), noise)
        q = quality_loss(z, z_prime, self.quality_loss, self.huber_delta)
        kl = utility_kl((mu, log_var))
        total = q + kl * float(self.lam)
        return {"quality": q, "kl": kl, "total": total}

    def fit(self, X, s):
        self._check_teacher()
        X = check_array(X, dtype=np.float64)
        s = np.asarray(s, dtype=np.int64).ravel()
        if len(s) != len(X):
            raise ShapeMismatch("X and s have different lengths")
        cfg = DistillConfig(self.quality_loss, self.lam, self.huber_delta, self.hidden, self.epochs,
                            self.batch_size, self.lr, self.betas, self.eps, self.seed)
        teacher = self.teacher
        k = teacher.latent_dim
        rng = np.random.default_rng(cfg.seed)
        in_width = X.shape[1] + teacher.n_groups_
        if self.init is not None:
            self.student_ = self.init.copy()
        else:
            hidden = cfg.hidden or student_hidden(teacher.hidden)
            self.student_ = nn.Mlp.init([in_width, *hidden, 2 * k], rng)
        if self.student_.input_width != in_width or self.student_.output_width != 2 * k:
            raise LatentDimMismatch("student input/latent widths differ from the teacher's")
        if not self.allow_same_size and self.student_.n_params() >= teacher.encoder_.n_params():
            raise ValueError("student must have strictly fewer parameters than the teacher encoder")
        before = teacher.encoder_.fingerprint() + teacher.decoder_.fingerprint()
        opt = nn.Adam(cfg.lr, cfg.betas, cfg.eps)
        self.history_, self.step_history_ = [], []
        t0 = time.perf_counter()
        for epoch in range(cfg.epochs):
            sums = dict.fromkeys(("quality", "kl", "total"), 0.0)
            for b, idx in enumerate(batch_indices(len(X), cfg.batch_size, rng)):
                noise = rng.standard_normal((len(idx), k))
                tape = nn.Tape()
                terms = self.batch_loss(tape, X[idx], s[idx], noise)
                try:
                    grads = tape.backward(terms["total"])
                except NonFiniteLoss as e:
                    raise NonFiniteLoss(f"epoch {epoch}, batch {b}: {e}") from None
                if len(grads) != len(self.student_.params()):
                    raise TeacherNotFrozen("gradients were recorded for teacher parameters")
                self.student_.set_params(opt.step(self.student_.params(), grads))
                step = {key: float(v.value) for key, v in terms.items()}
                self.step_history_.append(step)
                for key in sums:
                    sums[key] += step[key] * len(idx)
            row = {"epoch": epoch, **{key: v / len(X) for key, v in sums.items()}}
            self.history_.append(row)
            logger.debug("student %s", row)
        self.fit_seconds_ = time.perf_counter() - t0
        if teacher.encoder_.fingerprint() + teacher.decoder_.fingerprint() != before:
            raise TeacherNotFrozen("teacher parameters changed during distillation")
        return self

    def encode(self, X, s) -> nn.GaussianHead:
        check_is_fitted(self, "student_")
        X = check_array(X, dtype=np.float64)
        return nn.GaussianHead.split(nn.forward(self.student_, np.hstack([X, self.teacher._onehot(s)])))

    def transform(self, X, s=None):
        if s is None:
            raise ValueError("LatentDistiller.transform needs the protected attribute s")
        return self.encode(X, s).mu

    def sample_latent(self, X, s, noise) -> np.ndarray:
        return nn.reparam_sample(self.encode(X, s), noise)

    def save(self, path) -> str:
        check_is_fitted(self, "student_")
        skip = ("teacher", "init")
        params = {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params(deep=False).items()
                  if k not in skip}
        return nn.save_checkpoint(path, {"student": self.student_}, self.latent_dim,
                                  {"kind": "student", "params": params})

    @classmethod
    def load(cls, path, teacher: FairVAE) -> "LatentDistiller":
        nets, k, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "student":
            raise ValueError(f"{path} is not a student checkpoint")
        if k != teacher.latent_dim:
            raise LatentDimMismatch("student and teacher latent dimensions differ")
        params = dict(meta["params"])
        params["betas"] = tuple(params["betas"])
        if params.get("hidden") is not None:
            params["hidden"] = tuple(params["hidden"])
        model = cls(teacher, **params)
        model.student_ = nets["student"]
        return model

    def latent_gap(self, X, s, noise) -> float:
        """Mean per-dimension |z - z'| at shared noise."""
        z = self.teacher.sample_latent(X, s, noise)
        return float(np.mean(np.abs(z - self.sample_latent(X, s, noise))))


def distill_student(d, teacher: FairVAE, cfg: DistillConfig) -> tuple[LatentDistiller, list[dict]]:
    """Distill ``teacher`` on a :class:`~fairdistill.data.Dataset`."""
    model = LatentDistiller(teacher, **asdict(cfg)).fit(d.X, d.s)
    return model, model.history_
