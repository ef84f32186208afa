"""CVAE conditional density estimation.

A :class:`CvaeModel` models ``p(y | x)`` with a Gaussian encoder ``q(z | x, y)``,
a standard-normal prior on ``z`` and a Gaussian decoder ``p(y | x, z)`` whose
diagonal log-variance is learned and clamped.  Trained models answer
likelihood queries through importance sampling with the encoder as proposal.

Two roles use it:

* the behavior density ``pi_beta_mix(a | s)``, fit on the mixed dataset, and
* the target transition density ``T_target(s' | s, a)``, an ensemble fit on
  target data only, queried through the minimum over members.

Conditions and outputs pass through affine normalizers stored on the model, and
log-likelihoods are reported in the normalized output space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import nn_core
from .nn_core import MlpSpec, ParamStore

DECODER_LOGVAR_RANGE = (-10.0, 2.0)
ENCODER_LOGVAR_RANGE = (-10.0, 4.0)
LOG_FLOOR = -1e6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DensityConfig:
    hidden_dim: int = 750
    depth: int = 3
    lr: float = 1e-3
    batch_size: int = 256
    iterations: int = 100_000
    kl_weight: float = 0.5
    ensemble_size: int = 5
    train_samples: int = 1
    infer_samples: int = 10


@dataclass
class CvaeModel:
    cond_dim: int
    out_dim: int
    latent_dim: int
    encoder_spec: MlpSpec
    encoder: ParamStore
    decoder_spec: MlpSpec
    decoder: ParamStore
    kl_weight: float = 0.5
    cond_shift: np.ndarray | None = None
    cond_scale: np.ndarray | None = None
    out_shift: np.ndarray | None = None
    out_scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.latent_dim != 2 * self.out_dim:
            raise ValueError(f"latent dim must be 2 x output dim ({2 * self.out_dim}), got {self.latent_dim}")
        if self.kl_weight < 0:
            raise ValueError("KL weight must be >= 0")
        if self.encoder_spec.input_dim != self.cond_dim + self.out_dim:
            raise ValueError("encoder input must be condition + output")
        if self.encoder_spec.output_dim != 2 * self.latent_dim:
            raise ValueError("encoder must emit latent mean and log-variance")
        if self.decoder_spec.input_dim != self.cond_dim + self.latent_dim:
            raise ValueError("decoder input must be condition + latent")
        if self.decoder_spec.output_dim != 2 * self.out_dim:
            raise ValueError("decoder must emit output mean and log-variance")
        self.cond_shift = _vec(self.cond_shift, self.cond_dim, 0.0)
        self.cond_scale = _vec(self.cond_scale, self.cond_dim, 1.0)
        self.out_shift = _vec(self.out_shift, self.out_dim, 0.0)
        self.out_scale = _vec(self.out_scale, self.out_dim, 1.0)

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.dtype

    @property
    def stores(self) -> tuple[ParamStore, ParamStore]:
        return self.encoder, self.decoder

    def prepare(self, cond, out=None):
        """Normalize raw conditions/outputs into model-space tensors."""
        c = _tensor(cond, self.dtype)
        if c.shape[-1] != self.cond_dim:
            raise nn_core.ShapeError("condition dim", self.cond_dim, tuple(c.shape))
        c = (c - _t(self.cond_shift, c)) / _t(self.cond_scale, c)
        if out is None:
            return c
        y = _tensor(out, self.dtype)
        if y.shape[-1] != self.out_dim:
            raise nn_core.ShapeError("output dim", self.out_dim, tuple(y.shape))
        y = (y - _t(self.out_shift, y)) / _t(self.out_scale, y)
        return c, y


def _vec(v, n: int, fill: float) -> np.ndarray:
    if v is None:
        return np.full(n, fill)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (n,):
        raise nn_core.ShapeError("normalizer length", n, v.shape)
    return v


def _tensor(x, dtype) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def _t(v: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(v, dtype=like.dtype)


def make_cvae(
    cond_dim: int,
    out_dim: int,
    rng: np.random.Generator,
    hidden_dim: int = 750,
    depth: int = 3,
    kl_weight: float = 0.5,
    dtype: torch.dtype = nn_core.DEFAULT_DTYPE,
    **normalizers,
) -> CvaeModel:
    latent = 2 * out_dim
    enc = MlpSpec(cond_dim + out_dim, hidden_dim, depth, 2 * latent)
    dec = MlpSpec(cond_dim + latent, hidden_dim, depth, 2 * out_dim)
    r_enc, r_dec = nn_core.spawn(rng, 2)
    return CvaeModel(
        cond_dim=cond_dim,
        out_dim=out_dim,
        latent_dim=latent,
        encoder_spec=enc,
        encoder=nn_core.init_params(enc, r_enc, dtype),
        decoder_spec=dec,
        decoder=nn_core.init_params(dec, r_dec, dtype),
        kl_weight=kl_weight,
        **normalizers,
    )


# -- core densities ------------------------------------------------------------


def encode(model: CvaeModel, c: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    h = nn_core.forward(model.encoder_spec, model.encoder, torch.cat([c, y], dim=-1))
    mu, logvar = h[..., : model.latent_dim], h[..., model.latent_dim :]
    return mu, torch.clamp(logvar, *ENCODER_LOGVAR_RANGE)


def decode(model: CvaeModel, c: torch.Tensor, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    h = nn_core.forward(model.decoder_spec, model.decoder, torch.cat([c, z], dim=-1))
    mean, logvar = h[..., : model.out_dim], h[..., model.out_dim :]
    return mean, torch.clamp(logvar, *DECODER_LOGVAR_RANGE)


def gaussian_log_density(x: torch.Tensor, mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Diagonal Gaussian log-density summed over the last axis."""
    return -0.5 * (((x - mean) ** 2) * torch.exp(-logvar) + logvar + LOG_2PI).sum(-1)


def kl_to_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over the last axis."""
    return 0.5 * (mu**2 + torch.exp(logvar) - logvar - 1.0).sum(-1)


def _noise(rng: np.random.Generator, shape, dtype) -> torch.Tensor:
    return torch.as_tensor(rng.standard_normal(shape), dtype=dtype)


def elbo_terms(model: CvaeModel, cond, target_output, rng: np.random.Generator, L: int = 1):
    """Per-row (KL, mean reconstruction log-likelihood) in model space."""
    if L < 1:
        raise ValueError("L must be >= 1")
    c, y = model.prepare(cond, target_output)
    if not (torch.isfinite(c).all() and torch.isfinite(y).all()):
        raise ValueError("non-finite CVAE inputs")
    mu, logvar = encode(model, c, y)
    eps = _noise(rng, (L,) + tuple(mu.shape), mu.dtype)
    z = mu + torch.exp(0.5 * logvar) * eps
    mean, dec_logvar = decode(model, c.expand(L, *c.shape), z)
    recon = gaussian_log_density(y, mean, dec_logvar).mean(0)
    return kl_to_standard_normal(mu, logvar), recon


def elbo_loss(
    model: CvaeModel,
    cond,
    target_output,
    rng: np.random.Generator,
    L: int = 1,
    kl_weight: float | None = None,
) -> torch.Tensor:
    """Batch mean of ``kl_weight * KL - (1/L) sum_l log p(y | x, z_l)``."""
    kl, recon = elbo_terms(model, cond, target_output, rng, L)
    w = model.kl_weight if kl_weight is None else kl_weight
    return (w * kl - recon).mean()


def elbo(model: CvaeModel, cond, target_output, rng: np.random.Generator, L: int = 1) -> np.ndarray:
    """Per-row evidence lower bound (KL weight 1), without gradients."""
    with torch.no_grad():
        kl, recon = elbo_terms(model, cond, target_output, rng, L)
    return (recon - kl).double().numpy()


def log_likelihood(model: CvaeModel, cond, output, rng: np.random.Generator, L: int = 10) -> torch.Tensor:
    """Importance-sampled ``log p(y | x)`` per row, differentiable in the inputs.

    Rows whose estimate is not finite or falls below ``LOG_FLOOR`` are set to the floor.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    c, y = model.prepare(cond, output)
    mu, logvar = encode(model, c, y)
    eps = _noise(rng, (L,) + tuple(mu.shape), mu.dtype)
    std = torch.exp(0.5 * logvar)
    z = mu + std * eps
    mean, dec_logvar = decode(model, c.expand(L, *c.shape), z)
    log_p_y = gaussian_log_density(y, mean, dec_logvar)
    log_prior = -0.5 * (z**2 + LOG_2PI).sum(-1)
    log_q = -0.5 * (eps**2 + logvar + LOG_2PI).sum(-1)
    log_w = log_p_y + log_prior - log_q
    est = torch.logsumexp(log_w, dim=0) - math.log(L)
    bad = ~torch.isfinite(est) | (est < LOG_FLOOR)
    if bool(bad.any()):
        est = torch.where(bad, torch.full_like(est, LOG_FLOOR), est)
    return est


def log_likelihood_np(model: CvaeModel, cond, output, rng: np.random.Generator, L: int = 10, chunk: int = 8192) -> np.ndarray:
    """Batched no-grad likelihood for large arrays."""
    cond = np.asarray(cond, dtype=np.float64)
    output = np.asarray(output, dtype=np.float64)
    single = cond.ndim == 1
    cond, output = np.atleast_2d(cond), np.atleast_2d(output)
    out = np.empty(len(cond))
    with torch.no_grad():
        for lo in range(0, len(cond), chunk):
            hi = lo + chunk
            out[lo:hi] = log_likelihood(model, cond[lo:hi], output[lo:hi], rng, L).double().numpy()
    return out[0:1] if single else out


def sample(model: CvaeModel, cond, rng: np.random.Generator, mean_only: bool = False) -> np.ndarray:
    """Draw ``y ~ p(y | x)`` through the prior, returned in raw output units.

    ``mean_only`` decodes the prior mode ``z = 0`` and returns the decoder
    mean, a deterministic point prediction.
    """
    with torch.no_grad():
        c = model.prepare(cond)
        shape = (c.shape[0], model.latent_dim)
        z = torch.zeros(shape, dtype=c.dtype) if mean_only else _noise(rng, shape, c.dtype)
        mean, logvar = decode(model, c, z)
        y = mean if mean_only else mean + torch.exp(0.5 * logvar) * _noise(rng, tuple(mean.shape), c.dtype)
    return y.double().numpy() * model.out_scale + model.out_shift


# -- training ----------------------------------------------------------------


def train_cvae(
    model: CvaeModel,
    cond: np.ndarray,
    output: np.ndarray,
    iterations: int,
    rng: np.random.Generator,
    batch_size: int = 256,
    lr: float = 1e-3,
    L: int = 1,
) -> np.ndarray:
    """Adam on the weighted ELBO loss; returns the per-iteration loss trace."""
    cond = np.asarray(cond, dtype=np.float64)
    output = np.asarray(output, dtype=np.float64)
    if len(cond) != len(output) or len(cond) == 0:
        raise ValueError("training data must be non-empty and aligned")
    losses = np.empty(iterations)
    for it in range(iterations):
        idx = rng.integers(0, len(cond), size=batch_size)
        loss = elbo_loss(model, cond[idx], output[idx], rng, L)
        g_enc, g_dec = nn_core.backward(loss, model.encoder, model.decoder, accumulate=False)
        nn_core.adam_step(model.encoder, g_enc, lr)
        nn_core.adam_step(model.decoder, g_dec, lr)
        losses[it] = float(loss.detach())
    return losses


# -- ensembles and thresholds --------------------------------------------------


@dataclass
class DensityEnsemble:
    members: list[CvaeModel]

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        first = self.members[0]
        for m in self.members[1:]:
            if (m.cond_dim, m.out_dim) != (first.cond_dim, first.out_dim):
                raise ValueError("ensemble members must share dims")

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class SupportThreshold:
    """Threshold on a log-density; ``from_likelihood(0.08)`` means log(0.08)."""

    log_value: float
    as_likelihood: bool = False

    def __post_init__(self):
        if self.as_likelihood and not (math.exp(self.log_value) <= 1.0 and self.log_value > -math.inf):
            raise ValueError("likelihood thresholds must lie in (0, 1]")

    @classmethod
    def from_likelihood(cls, p: float) -> "SupportThreshold":
        if not 0.0 < p <= 1.0:
            raise ValueError(f"likelihood threshold must lie in (0, 1], got {p}")
        return cls(math.log(p), True)

    @property
    def likelihood(self) -> float:
        return math.exp(self.log_value)


def ensemble_log_likelihood(ens: DensityEnsemble, cond, output, rng: np.random.Generator, L: int = 10) -> np.ndarray:
    """Minimum over members of their importance-sampled log-likelihoods."""
    if not isinstance(ens, DensityEnsemble) or len(ens) == 0:
        raise ValueError("empty ensemble")
    streams = nn_core.spawn(rng, len(ens))
    per_member = np.stack([log_likelihood_np(m, cond, output, g, L) for m, g in zip(ens.members, streams)])
    return per_member.min(axis=0)


def member_log_likelihoods(ens: DensityEnsemble, cond, output, rng: np.random.Generator, L: int = 10) -> np.ndarray:
    """(k, n) array of member estimates, with the same streams as the ensemble query."""
    streams = nn_core.spawn(rng, len(ens))
    return np.stack([log_likelihood_np(m, cond, output, g, L) for m, g in zip(ens.members, streams)])


def in_support(
    ens: DensityEnsemble,
    threshold: SupportThreshold | float,
    cond,
    output,
    rng: np.random.Generator,
    L: int = 10,
) -> np.ndarray:
    log_t = threshold.log_value if isinstance(threshold, SupportThreshold) else float(threshold)
    return ensemble_log_likelihood(ens, cond, output, rng, L) > log_t


# -- the two density roles -----------------------------------------------------


def transition_inputs(states, actions) -> np.ndarray:
    return np.concatenate([np.asarray(states, dtype=np.float64), np.asarray(actions, dtype=np.float64)], axis=-1)


def fit_behavior(data, cfg: DensityConfig, rng: np.random.Generator, dtype=nn_core.DEFAULT_DTYPE) -> CvaeModel:
    """Behavior density on (normalized state) -> raw action."""
    r_init, r_train = nn_core.spawn(rng, 2)
    model = make_cvae(
        data.state_dim,
        data.action_dim,
        r_init,
        hidden_dim=cfg.hidden_dim,
        depth=cfg.depth,
        kl_weight=cfg.kl_weight,
        dtype=dtype,
        cond_shift=data.state_mean,
        cond_scale=data.state_std,
    )
    losses = train_cvae(model, data.states, data.actions, cfg.iterations, r_train, cfg.batch_size, cfg.lr, cfg.train_samples)
    model.meta.update(role="behavior", dataset_hash=data.content_hash(), final_loss=float(losses[-100:].mean()))
    return model


def fit_transition_ensemble(
    data,
    cfg: DensityConfig,
    rng: np.random.Generator,
    k: int | None = None,
    dtype=nn_core.DEFAULT_DTYPE,
) -> DensityEnsemble:
    """``k`` transition densities on (normalized s, a) -> normalized s'."""
    k = cfg.ensemble_size if k is None else k
    x = transition_inputs(data.states, data.actions)
    shift = np.concatenate([data.state_mean, np.zeros(data.action_dim)])
    scale = np.concatenate([data.state_std, np.ones(data.action_dim)])
    digest = data.content_hash()
    members = []
    for i, stream in enumerate(nn_core.spawn(rng, k)):
        r_init, r_train = nn_core.spawn(stream, 2)
        model = make_cvae(
            x.shape[1],
            data.state_dim,
            r_init,
            hidden_dim=cfg.hidden_dim,
            depth=cfg.depth,
            kl_weight=cfg.kl_weight,
            dtype=dtype,
            cond_shift=shift,
            cond_scale=scale,
            out_shift=data.state_mean,
            out_scale=data.state_std,
        )
        losses = train_cvae(model, x, data.next_states, cfg.iterations, r_train, cfg.batch_size, cfg.lr, cfg.train_samples)
        model.meta.update(role="transition", index=i, dataset_hash=digest, final_loss=float(losses[-100:].mean()))
        members.append(model)
    return DensityEnsemble(members)


def transition_log_likelihood(ens: DensityEnsemble, states, actions, next_states, rng, L: int = 10) -> np.ndarray:
    return ensemble_log_likelihood(ens, transition_inputs(states, actions), next_states, rng, L)


# -- persistence ---------------------------------------------------------------


def save_cvae(model: CvaeModel, directory, name: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nn_core.save_checkpoint(directory / f"{name}.encoder.bin", model.encoder_spec, model.encoder)
    nn_core.save_checkpoint(directory / f"{name}.decoder.bin", model.decoder_spec, model.decoder)
    sidecar = {
        "cond_dim": model.cond_dim,
        "out_dim": model.out_dim,
        "latent_dim": model.latent_dim,
        "kl_weight": model.kl_weight,
        "cond_shift": model.cond_shift.tolist(),
        "cond_scale": model.cond_scale.tolist(),
        "out_shift": model.out_shift.tolist(),
        "out_scale": model.out_scale.tolist(),
        "meta": model.meta,
    }
    path = directory / f"{name}.json"
    path.write_text(json.dumps(sidecar, sort_keys=True, indent=1))
    return path


def load_cvae(directory, name: str) -> CvaeModel:
    directory = Path(directory)
    side = json.loads((directory / f"{name}.json").read_text())
    enc_spec, enc, _ = nn_core.load_checkpoint(directory / f"{name}.encoder.bin")
    dec_spec, dec, _ = nn_core.load_checkpoint(directory / f"{name}.decoder.bin")
    return CvaeModel(
        cond_dim=side["cond_dim"],
        out_dim=side["out_dim"],
        latent_dim=side["latent_dim"],
        encoder_spec=enc_spec,
        encoder=enc,
        decoder_spec=dec_spec,
        decoder=dec,
        kl_weight=side["kl_weight"],
        cond_shift=np.array(side["cond_shift"]),
        cond_scale=np.array(side["cond_scale"]),
        out_shift=np.array(side["out_shift"]),
        out_scale=np.array(side["out_scale"]),
        meta=side["meta"],
    )


def save_ensemble(ens: DensityEnsemble, directory) -> list[Path]:
    return [save_cvae(m, directory, f"member{i}") for i, m in enumerate(ens.members)]


def load_ensemble(directory) -> DensityEnsemble:
    directory = Path(directory)
    names = sorted((p.stem for p in directory.glob("member*.json")), key=lambda n: int(n[len("member") :]))
    return DensityEnsemble([load_cvae(directory, n) for n in names])


def fit_pass_rates(ens: DensityEnsemble, thresholds: Sequence[float], cond, output, rng, L: int = 10) -> dict:
    """Pass rate of the ensemble and of each member at each likelihood threshold."""
    per = member_log_likelihoods(ens, cond, output, rng, L)
    out = {}
    for p in thresholds:
        t = math.log(p)
        out[p] = {"ensemble": float(np.mean(per.min(0) > t)), "members": [float(np.mean(row > t)) for row in per]}
    return out
