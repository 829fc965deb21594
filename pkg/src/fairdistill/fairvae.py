"""Teacher model: conditional VAE with a distance-covariance fairness penalty.

Per batch the teacher minimises

    recon + kl + beta * dcov^2(z, s)

where ``recon`` is the row-wise binary cross-entropy of the reconstruction,
``kl`` the closed-form KL of the diagonal posterior to N(0, I), and
``dcov^2`` the empirical (V-statistic) squared distance covariance between
the sampled codes and the one-hot protected attribute.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import nn
from .exceptions import BatchTooSmall, LatentDimMismatch, NonFiniteLoss, ShapeMismatch

logger = logging.getLogger(__name__)


def _double_center(m):
    """Subtract row and column means, add back the grand mean (arrays or tape vars)."""
    return m - m.mean(axis=1, keepdims=True) - m.mean(axis=0, keepdims=True) + m.mean()


def group_distances(s, n_groups: int) -> np.ndarray:
    """Pairwise Euclidean distances between one-hot group vectors (0 or sqrt 2)."""
    s = np.asarray(s).ravel()
    return np.where(s[:, None] == s[None, :], 0.0, np.sqrt(2.0))


def distance_covariance_sq(Z, s, n_groups: int | None = None):
    """Squared distance covariance between codes ``Z`` (n x k) and groups ``s``.

    Accepts a numpy array (returns a float) or a tape variable (returns a
    differentiable scalar). Round-off negatives are clamped to 0.
    """
    s = np.asarray(s).ravel()
    n = len(s)
    if n < 2:
        raise BatchTooSmall(f"distance covariance needs at least 2 rows, got {n}")
    if np.shape(Z.value if isinstance(Z, nn.Var) else Z)[0] != n:
        raise ShapeMismatch("Z and s have different lengths")
    Bc = _double_center(group_distances(s, n_groups))
    if isinstance(Z, nn.Var):
        A = nn.pairwise_distances(Z)
        return nn.clamp_min((_double_center(A) * Bc).mean(), 0.0)
    tape = nn.Tape()
    A = nn.pairwise_distances(tape.constant(Z)).value
    return max(float(np.mean(_double_center(A) * Bc)), 0.0)


def kl_to_standard_normal(mu, log_var):
    """Batch mean of KL(N(mu, exp(log_var)) || N(0, I)), summed over latent dims."""
    if isinstance(mu, nn.Var):
        return ((nn.exp(log_var) + nn.square(mu) - 1.0 - log_var).sum(axis=1) * 0.5).mean()
    return float(np.mean(0.5 * np.sum(np.exp(log_var) + mu ** 2 - 1.0 - log_var, axis=1)))


def bce_with_logits(logits, target):
    """Batch mean of the row-summed binary cross-entropy ``softplus(l) - x l``."""
    if isinstance(logits, nn.Var):
        return (nn.softplus(logits) - logits * target).sum(axis=1).mean()
    return float(np.mean(np.sum(np.logaddexp(0.0, logits) - logits * target, axis=1)))


@dataclass
class FairVaeConfig:
    beta: float = 7.0
    latent_dim: int = 8
    hidden: tuple = (64, 64)
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (distance covariance needs pairs)")
        self.hidden = tuple(self.hidden)
        self.betas = tuple(self.betas)


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled minibatches of near-equal size (never a lone row)."""
    perm = rng.permutation(n)
    n_batches = max(1, int(np.ceil(n / batch_size)))
    return [b for b in np.array_split(perm, n_batches) if len(b)]


class FairVAE(BaseEstimator, TransformerMixin):
    """Conditional VAE whose sampled codes are decorrelated from the protected group.

    ``fit(X, s)`` takes the encoded feature matrix and integer group labels;
    the encoder sees ``X ++ onehot(s)`` and the decoder ``z ++ onehot(s)``.
    ``transform`` returns posterior means.
    """

    def __init__(self, beta=7.0, latent_dim=8, hidden=(64, 64), epochs=200, batch_size=256,
                 lr=1e-3, betas=(0.9, 0.999), eps=1e-8, seed=0, n_groups=None):
        self.beta = beta
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.seed = seed
        self.n_groups = n_groups

    # -- building blocks -------------------------------------------------
    def _onehot(self, s):
        return np.eye(self.n_groups_)[np.asarray(s, dtype=np.int64)]

    def batch_loss(self, tape: nn.Tape, X, s, noise, track=True):
        """Loss terms of one batch as tape variables: recon, kl, v2, total."""
        g = self._onehot(s)
        k = self.latent_dim
        out = self.encoder_.apply(tape, np.hstack([X, g]), track=track)
        mu, log_var = out[:, :k], out[:, k:]
        z = nn.reparam_sample((mu, log_var), noise)
        logits = self.decoder_.apply(tape, nn.concat([z, g]), track=track)
        recon = bce_with_logits(logits, X)
        kl = kl_to_standard_normal(mu, log_var)
        if self.beta > 0:
            v2 = distance_covariance_sq(z, s)
            total = recon + kl + v2 * float(self.beta)
        else:
            v2 = tape.constant(distance_covariance_sq(z.value, s))
            total = recon + kl
        return {"recon": recon, "kl": kl, "v2": v2, "total": total}

    def fit(self, X, s):
        X = check_array(X, dtype=np.float64)
        s = np.asarray(s, dtype=np.int64).ravel()
        if len(s) != len(X):
            raise ShapeMismatch("X and s have different lengths")
        cfg = FairVaeConfig(self.beta, self.latent_dim, self.hidden, self.epochs, self.batch_size,
                            self.lr, self.betas, self.eps, self.seed)
        self.n_groups_ = int(self.n_groups or s.max() + 1)
        self.n_features_in_ = X.shape[1]
        rng = np.random.default_rng(cfg.seed)
        k = cfg.latent_dim
        self.encoder_ = nn.Mlp.init([X.shape[1] + self.n_groups_, *cfg.hidden, 2 * k], rng)
        self.decoder_ = nn.Mlp.init([k + self.n_groups_, *cfg.hidden, X.shape[1]], rng)
        opt = nn.Adam(cfg.lr, cfg.betas, cfg.eps)
        self.history_ = []
        t0 = time.perf_counter()
        for epoch in range(cfg.epochs):
            sums = dict.fromkeys(("recon", "kl", "v2", "total"), 0.0)
            for b, idx in enumerate(batch_indices(len(X), cfg.batch_size, rng)):
                noise = rng.standard_normal((len(idx), k))
                tape = nn.Tape()
                terms = self.batch_loss(tape, X[idx], s[idx], noise)
                try:
                    grads = tape.backward(terms["total"])
                except NonFiniteLoss as e:
                    raise NonFiniteLoss(f"epoch {epoch}, batch {b}: {e}") from None
                params = opt.step(self.encoder_.params() + self.decoder_.params(), grads)
                n_enc = len(self.encoder_.params())
                self.encoder_.set_params(params[:n_enc])
                self.decoder_.set_params(params[n_enc:])
                for key in sums:
                    sums[key] += float(terms[key].value) * len(idx)
            row = {"epoch": epoch, **{key: v / len(X) for key, v in sums.items()}}
            self.history_.append(row)
            logger.debug("teacher %s", row)
        self.fit_seconds_ = time.perf_counter() - t0
        return self

    def encode(self, X, s) -> nn.GaussianHead:
        check_is_fitted(self, "encoder_")
        X = check_array(X, dtype=np.float64)
        return nn.GaussianHead.split(nn.forward(self.encoder_, np.hstack([X, self._onehot(s)])))

    def transform(self, X, s=None):
        if s is None:
            raise ValueError("FairVAE.transform needs the protected attribute s")
        return self.encode(X, s).mu

    def decode(self, Z, s) -> np.ndarray:
        """Cell probabilities of the reconstruction for codes ``Z`` under groups ``s``."""
        check_is_fitted(self, "decoder_")
        Z = np.asarray(Z, dtype=np.float64)
        if Z.shape[1] != self.latent_dim:
            raise LatentDimMismatch(f"codes have {Z.shape[1]} dims, decoder expects {self.latent_dim}")
        return nn._sigmoid(nn.forward(self.decoder_, np.hstack([Z, self._onehot(s)])))

    def elbo_terms(self, X, s, noise) -> tuple[float, float]:
        terms = self.batch_loss(nn.Tape(), np.asarray(X, dtype=np.float64), s, noise, track=False)
        recon, kl = float(terms["recon"].value), float(terms["kl"].value)
        if not (np.isfinite(recon) and np.isfinite(kl)):
            raise NonFiniteLoss("non-finite ELBO terms")
        return recon, kl

    def sample_latent(self, X, s, noise) -> np.ndarray:
        return nn.reparam_sample(self.encode(X, s), noise)

    def save(self, path) -> str:
        check_is_fitted(self, "encoder_")
        params = {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()}
        meta = {"kind": "teacher", "params": params, "n_groups": self.n_groups_,
                "n_features_in": self.n_features_in_}
        return nn.save_checkpoint(path, {"encoder": self.encoder_, "decoder": self.decoder_},
                                  self.latent_dim, meta)

    @classmethod
    def load(cls, path) -> "FairVAE":
        nets, k, meta = nn.load_checkpoint(path)
        if meta.get("kind") != "teacher":
            raise ValueError(f"{path} is not a teacher checkpoint")
        params = dict(meta["params"], hidden=tuple(meta["params"]["hidden"]),
                      betas=tuple(meta["params"]["betas"]))
        model = cls(**params)
        if model.latent_dim != k:
            raise LatentDimMismatch("checkpoint latent_dim disagrees with its parameters")
        model.encoder_, model.decoder_ = nets["encoder"], nets["decoder"]
        model.n_groups_, model.n_features_in_ = meta["n_groups"], meta["n_features_in"]
        return model


def elbo_terms(model: FairVAE, X, s, noise) -> tuple[float, float]:
    """(reconstruction BCE, KL) of ``model`` on one batch at fixed noise."""
    return model.elbo_terms(X, s, noise)


def train_teacher(d, cfg: FairVaeConfig) -> tuple[FairVAE, list[dict]]:
    """Fit a :class:`FairVAE` on a :class:`~fairdistill.data.Dataset`."""
    model = FairVAE(n_groups=d.schema.n_groups, **asdict(cfg)).fit(d.X, d.s)
    return model, model.history_
