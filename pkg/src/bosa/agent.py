"""TD3-style learner with supported policy and supported value optimization.

The actor maximizes the first critic subject to a behavior-likelihood
constraint, relaxed with a Lagrange multiplier updated by projected dual
descent.  The twin critics regress onto TD3 targets, but only on transitions
whose next state the target transition ensemble finds plausible, and source
rows get an extra value-lowering term.

Ablations and the naive baseline are selected by ``BosaConfig.variant``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import nn_core
from .dataset import TAG_CODES, Batch, OfflineDataset, sample_batch
from .density import CvaeModel, DensityEnsemble, log_likelihood, transition_log_likelihood
from .nn_core import EmaTracker, MlpSpec, ParamStore

log = logging.getLogger(__name__)

VARIANTS = (
    "full",
    "no-policy-reg",
    "no-filter",
    "no-conservation",
    "target-data-bellman",
    "naive-mix-baseline",
    "behavior-clone",
)

SOURCE = TAG_CODES["source"]
TARGET = TAG_CODES["target"]
GENERATED = TAG_CODES["generated"]
Q_SCALE_FLOOR = 1e-6


def _log(p: float) -> float:
    return -math.inf if p == 0 else math.log(p)


@dataclass(frozen=True)
class BosaConfig:
    variant: str = "full"
    lambda_policy: float = 0.1
    # Listed with the other BOSA knobs but the hard indicator filter has no
    # multiplier, so nothing reads it.
    lambda_transition: float = 0.1
    policy_threshold: float = 0.1
    transition_threshold: float = 0.08
    conservation_weight: float = 0.1
    gamma: float = 0.99
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_freq: int = 2
    tau: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    dual_lr: float = 1e-3
    batch_size: int = 256
    hidden_dim: int = 256
    depth: int = 3
    actor_dropout: float = 0.1
    likelihood_samples: int = 10
    filter_samples: int = 10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        if self.policy_freq < 1:
            raise ValueError("policy update frequency must be >= 1")
        if self.noise_clip < 0:
            raise ValueError("noise clip must be >= 0")
        if self.conservation_weight < 0:
            raise ValueError("conservation weight must be >= 0")
        for name in ("policy_threshold", "transition_threshold"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} is a likelihood and must be >= 0")

    @property
    def policy_log_threshold(self) -> float:
        return _log(self.policy_threshold)

    @property
    def transition_log_threshold(self) -> float:
        return _log(self.transition_threshold)

    @property
    def uses_policy_reg(self) -> bool:
        return self.variant not in ("no-policy-reg", "behavior-clone")

    @property
    def uses_filter(self) -> bool:
        return self.variant in ("full", "no-policy-reg", "no-conservation")

    @property
    def effective_conservation(self) -> float:
        if self.variant in ("no-conservation", "naive-mix-baseline", "behavior-clone"):
            return 0.0
        return self.conservation_weight

    @property
    def bellman_on_target_only(self) -> bool:
        return self.variant == "target-data-bellman"

    @property
    def ema_alpha(self) -> float:
        return 1.0 - self.tau

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BosaConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ActorCriticState:
    actor_spec: MlpSpec
    actor: ParamStore
    critic_spec: MlpSpec
    critic1: ParamStore
    critic2: ParamStore
    actor_target: EmaTracker
    critic1_target: EmaTracker
    critic2_target: EmaTracker
    state_mean: np.ndarray
    state_std: np.ndarray
    lam: float = 0.0
    step: int = 0
    actor_updates: int = 0
    lam_peak: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("Lagrange multiplier must be >= 0")
        if self.actor_target.shadow.numel() != len(self.actor):
            raise ValueError("target actor does not match the actor")

    @property
    def dtype(self) -> torch.dtype:
        return self.actor.dtype

    def norm(self, states) -> torch.Tensor:
        s = torch.as_tensor(np.asarray(states, dtype=np.float64), dtype=self.dtype)
        mean = torch.as_tensor(self.state_mean, dtype=self.dtype)
        std = torch.as_tensor(self.state_std, dtype=self.dtype)
        return (s - mean) / std

    def snapshot(self) -> dict:
        """Flat copies of every parameter vector (for determinism checks)."""
        return {
            "actor": self.actor.numpy(),
            "critic1": self.critic1.numpy(),
            "critic2": self.critic2.numpy(),
            "actor_target": self.actor_target.shadow.numpy().copy(),
            "critic1_target": self.critic1_target.shadow.numpy().copy(),
            "critic2_target": self.critic2_target.shadow.numpy().copy(),
        }


def init_state(
    state_dim: int,
    action_dim: int,
    cfg: BosaConfig,
    rng: np.random.Generator,
    state_mean=None,
    state_std=None,
    dtype: torch.dtype = nn_core.DEFAULT_DTYPE,
) -> ActorCriticState:
    actor_spec = MlpSpec(state_dim, cfg.hidden_dim, cfg.depth, action_dim, dropout=cfg.actor_dropout)
    critic_spec = MlpSpec(state_dim + action_dim, cfg.hidden_dim, cfg.depth, 1)
    r_a, r_c1, r_c2 = nn_core.spawn(rng, 3)
    actor = nn_core.init_params(actor_spec, r_a, dtype)
    c1 = nn_core.init_params(critic_spec, r_c1, dtype)
    c2 = nn_core.init_params(critic_spec, r_c2, dtype)
    alpha = cfg.ema_alpha
    lam = cfg.lambda_policy if cfg.uses_policy_reg else 0.0
    return ActorCriticState(
        actor_spec=actor_spec,
        actor=actor,
        critic_spec=critic_spec,
        critic1=c1,
        critic2=c2,
        actor_target=nn_core.make_ema(actor, alpha),
        critic1_target=nn_core.make_ema(c1, alpha),
        critic2_target=nn_core.make_ema(c2, alpha),
        state_mean=np.zeros(state_dim) if state_mean is None else np.asarray(state_mean, dtype=np.float64),
        state_std=np.ones(state_dim) if state_std is None else np.asarray(state_std, dtype=np.float64),
        lam=lam,
        lam_peak=lam,
    )


# -- network heads -------------------------------------------------------------


def policy(ac: ActorCriticState, s_norm: torch.Tensor, params=None, train_mode=False, rng=None) -> torch.Tensor:
    params = ac.actor if params is None else params
    return torch.tanh(nn_core.forward(ac.actor_spec, params, s_norm, train_mode, rng))


def q_value(ac: ActorCriticState, params, s_norm: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    return nn_core.forward(ac.critic_spec, params, torch.cat([s_norm, actions], dim=-1)).squeeze(-1)


def act(ac: ActorCriticState, state) -> np.ndarray:
    """Deterministic evaluation action in [-1, 1]^d (single state or batch)."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape[-1] != len(ac.state_mean):
        raise nn_core.ShapeError("state dim", len(ac.state_mean), state.shape)
    with torch.no_grad():
        return policy(ac, ac.norm(state)).double().numpy()


# -- the support filter ----------------------------------------------------------


class SupportFilter:
    """Indicator ``T_target(s' | s, a) > threshold`` over dataset rows.

    Ensemble log-likelihoods are cached by row index of ``data``, so the
    filter is evaluated once per transition however many batches draw it.
    The importance-sampling noise comes from the filter's own stream.
    """

    def __init__(
        self,
        ensemble: DensityEnsemble,
        likelihood_threshold: float,
        data: OfflineDataset | None = None,
        L: int = 10,
        seed: int = 0,
    ):
        self.ensemble = ensemble
        self.log_threshold = _log(likelihood_threshold)
        self.data = data
        self.L = L
        self.rng = np.random.default_rng(seed)
        self.cache = np.full(len(data), np.nan) if data is not None else None

    def log_likelihoods(self, batch: Batch) -> np.ndarray:
        if self.cache is None:
            return transition_log_likelihood(
                self.ensemble, batch.states, batch.actions, batch.next_states, self.rng, self.L
            )
        need = np.unique(batch.idx[np.isnan(self.cache[batch.idx])])
        if len(need):
            d = self.data
            self.cache[need] = transition_log_likelihood(
                self.ensemble, d.states[need], d.actions[need], d.next_states[need], self.rng, self.L
            )
        return self.cache[batch.idx]

    def precompute(self) -> np.ndarray:
        if self.data is None:
            raise ValueError("filter is not bound to a dataset")
        idx = np.arange(len(self.data))
        self.log_likelihoods(Batch(idx, *([None] * 7)))
        return self.cache

    def mask(self, batch: Batch, log_threshold: float | None = None) -> np.ndarray:
        t = self.log_threshold if log_threshold is None else log_threshold
        if t == -math.inf:
            return np.ones(len(batch), dtype=bool)
        return self.log_likelihoods(batch) > t


# -- losses ----------------------------------------------------------------------


@dataclass
class CriticInfo:
    bellman: float
    conservation: float
    pass_rate: float
    n_pass: int
    starved: bool
    mean_q_source: float
    mean_q_target: float


def td_targets(ac: ActorCriticState, batch: Batch, cfg: BosaConfig, rng: np.random.Generator) -> torch.Tensor:
    """r + gamma * (1 - terminal) * min twin target Q at the smoothed target action."""
    with torch.no_grad():
        s2 = ac.norm(batch.next_states)
        a2 = policy(ac, s2, params=ac.actor_target.shadow)
        noise = torch.as_tensor(rng.standard_normal(tuple(a2.shape)), dtype=a2.dtype) * cfg.policy_noise
        noise = noise.clamp(-cfg.noise_clip, cfg.noise_clip)
        a2 = (a2 + noise).clamp(-1.0, 1.0)
        q1 = q_value(ac, ac.critic1_target.shadow, s2, a2)
        q2 = q_value(ac, ac.critic2_target.shadow, s2, a2)
        r = torch.as_tensor(batch.rewards, dtype=ac.dtype)
        cont = torch.as_tensor(1.0 - batch.terminals.astype(np.float64), dtype=ac.dtype)
        return r + cfg.gamma * cont * torch.minimum(q1, q2)


def critic_loss(
    batch: Batch,
    ac: ActorCriticState,
    cfg: BosaConfig,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
    conservation_batch: Batch | None = None,
) -> tuple[torch.Tensor, CriticInfo]:
    """Filtered twin Bellman error plus weighted source-side Q conservation.

    ``mask`` marks rows kept by the support filter (all rows when ``None``).
    The conservation term averages min-twin Q over non-target rows (source or
    generated) of ``conservation_batch``, by default the Bellman batch itself.
    """
    y = td_targets(ac, batch, cfg, rng)
    s = ac.norm(batch.states)
    a = torch.as_tensor(batch.actions, dtype=ac.dtype)
    q1 = q_value(ac, ac.critic1, s, a)
    q2 = q_value(ac, ac.critic2, s, a)
    keep = np.ones(len(batch), bool) if mask is None else np.asarray(mask, bool)
    m = torch.as_tensor(keep.astype(np.float64), dtype=ac.dtype)
    n_pass = int(keep.sum())
    if n_pass > 0:
        bellman = (m * ((q1 - y) ** 2 + (q2 - y) ** 2)).sum() / n_pass
    else:
        bellman = (q1 * 0.0).sum()

    cb = batch if conservation_batch is None else conservation_batch
    src = cb.tags != TARGET
    w = cfg.effective_conservation
    if conservation_batch is None:
        q_min = torch.minimum(q1, q2)
    else:
        sc, ac_ = ac.norm(cb.states), torch.as_tensor(cb.actions, dtype=ac.dtype)
        q_min = torch.minimum(q_value(ac, ac.critic1, sc, ac_), q_value(ac, ac.critic2, sc, ac_))
    if w > 0 and src.any():
        conservation = w * q_min[torch.as_tensor(src)].mean()
    else:
        conservation = (q_min * 0.0).sum()

    with torch.no_grad():
        qm = torch.minimum(q1, q2)
        tags = torch.as_tensor(batch.tags)
        mq_src = float(qm[tags != TARGET].mean()) if (batch.tags != TARGET).any() else math.nan
        mq_tgt = float(qm[tags == TARGET].mean()) if (batch.tags == TARGET).any() else math.nan
    info = CriticInfo(
        bellman=float(bellman.detach()),
        conservation=float(conservation.detach()),
        pass_rate=n_pass / len(batch),
        n_pass=n_pass,
        starved=n_pass == 0,
        mean_q_source=mq_src,
        mean_q_target=mq_tgt,
    )
    return bellman + conservation, info


@dataclass
class ActorInfo:
    q_mean: float
    log_likelihood: float
    gap: float


def actor_loss(
    batch: Batch,
    ac: ActorCriticState,
    cfg: BosaConfig,
    behavior: CvaeModel | None,
    rng: np.random.Generator,
    q_scale: float | None = None,
) -> tuple[torch.Tensor, ActorInfo]:
    """Lagrangian actor objective.

    With the behavior constraint active the Q term is divided by the batch
    mean |Q| (held constant; pass ``q_scale`` to pin it) and the constraint
    enters as ``-lam * (mean log pi_beta(pi(s) | s) - threshold)``.
    """
    r_drop, r_is = nn_core.spawn(rng, 2)
    s = ac.norm(batch.states)
    a = policy(ac, s, train_mode=True, rng=r_drop)
    if cfg.variant == "behavior-clone":
        target = torch.as_tensor(batch.actions, dtype=ac.dtype)
        loss = ((a - target) ** 2).sum(-1).mean()
        return loss, ActorInfo(math.nan, math.nan, math.nan)

    q = q_value(ac, ac.critic1, s, a)
    if not cfg.uses_policy_reg:
        return -q.mean(), ActorInfo(float(q.mean().detach()), math.nan, math.nan)

    if behavior is None:
        raise ValueError(f"variant {cfg.variant!r} needs a behavior density")
    scale = float(q.detach().abs().mean()) if q_scale is None else q_scale
    scale = max(scale, Q_SCALE_FLOOR)
    logp = log_likelihood(behavior, batch.states, a.to(behavior.dtype), r_is, cfg.likelihood_samples)
    logp_mean = logp.mean().to(ac.dtype)
    gap = logp_mean - cfg.policy_log_threshold
    loss = -q.mean() / scale - ac.lam * gap
    info = ActorInfo(float(q.mean().detach()), float(logp_mean.detach()), float(gap.detach()))
    return loss, info


def dual_step(ac: ActorCriticState, constraint_gap: float, lr_dual: float) -> float:
    """Projected descent on the multiplier: shrinks while the constraint holds."""
    if lr_dual <= 0:
        raise ValueError("dual learning rate must be > 0")
    if math.isfinite(constraint_gap):
        ac.lam = max(0.0, ac.lam - lr_dual * constraint_gap)
    ac.lam_peak = max(ac.lam_peak, ac.lam)
    return ac.lam


# -- training loop ---------------------------------------------------------------


@dataclass
class StepDiagnostics:
    step: int
    critic_loss: float
    actor_loss: float
    lam: float
    gap: float
    pass_rate: float
    mean_q_source: float
    mean_q_target: float
    starved: bool
    actor_updated: bool

    CSV_FIELDS = (
        "step",
        "critic_loss",
        "actor_loss",
        "lam",
        "gap",
        "pass_rate",
        "mean_q_source",
        "mean_q_target",
    )

    def row(self) -> list:
        return [getattr(self, f) for f in self.CSV_FIELDS]


@dataclass
class TrainingData:
    """Datasets one run draws from: the mix plus its target/source parts."""

    mix: OfflineDataset
    target: OfflineDataset | None = None
    source: OfflineDataset | None = None

    @classmethod
    def from_mix(cls, mix: OfflineDataset) -> "TrainingData":
        tgt = mix.with_tag("target")
        src = mix.select(mix.tags != TARGET)
        return cls(mix, tgt if len(tgt) else None, src if len(src) else None)


def train_step(
    ac: ActorCriticState,
    cfg: BosaConfig,
    data: TrainingData,
    behavior: CvaeModel | None,
    support: SupportFilter | None,
    rng: np.random.Generator,
) -> StepDiagnostics:
    ac.step += 1
    bs = cfg.batch_size
    crit_loss = math.nan
    info = None
    mix_batch = sample_batch(data.mix, bs, rng)

    if cfg.variant != "behavior-clone":
        if cfg.bellman_on_target_only:
            if data.target is None:
                raise ValueError("target-data-bellman needs target rows")
            bellman_batch = sample_batch(data.target, bs, rng)
            cons_batch = sample_batch(data.source, bs, rng) if data.source is not None else None
            mask = None
        else:
            bellman_batch = mix_batch
            cons_batch = None
            mask = support.mask(mix_batch) if (cfg.uses_filter and support is not None) else None
        loss, info = critic_loss(bellman_batch, ac, cfg, rng, mask, cons_batch)
        g1, g2 = nn_core.backward(loss, ac.critic1, ac.critic2, accumulate=False)
        nn_core.adam_step(ac.critic1, g1, cfg.critic_lr)
        nn_core.adam_step(ac.critic2, g2, cfg.critic_lr)
        crit_loss = float(loss.detach())
        if info.starved:
            log.debug("step %d: every batch row filtered out", ac.step)

    act_loss, gap = math.nan, math.nan
    updated = ac.step % cfg.policy_freq == 0
    if updated:
        loss, ainfo = actor_loss(mix_batch, ac, cfg, behavior, rng)
        (g,) = nn_core.backward(loss, ac.actor, accumulate=False)
        nn_core.adam_step(ac.actor, g, cfg.actor_lr)
        act_loss, gap = float(loss.detach()), ainfo.gap
        if cfg.uses_policy_reg:
            dual_step(ac, gap, cfg.dual_lr)
        nn_core.ema_update(ac.actor_target, ac.actor)
        nn_core.ema_update(ac.critic1_target, ac.critic1)
        nn_core.ema_update(ac.critic2_target, ac.critic2)
        ac.actor_updates += 1

    return StepDiagnostics(
        step=ac.step,
        critic_loss=crit_loss,
        actor_loss=act_loss,
        lam=ac.lam,
        gap=gap,
        pass_rate=info.pass_rate if info else math.nan,
        mean_q_source=info.mean_q_source if info else math.nan,
        mean_q_target=info.mean_q_target if info else math.nan,
        starved=bool(info.starved) if info else False,
        actor_updated=updated,
    )


def train(
    ac: ActorCriticState,
    cfg: BosaConfig,
    data: TrainingData,
    behavior: CvaeModel | None,
    support: SupportFilter | None,
    n_steps: int,
    rng: np.random.Generator,
    log_path=None,
    log_every: int = 100,
    checkpoint_dir=None,
    checkpoint_every: int = 10_000,
) -> list[StepDiagnostics]:
    """Run ``n_steps`` train steps; every ``log_every``-th diagnostic is kept and streamed."""
    kept = []
    writer = fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(StepDiagnostics.CSV_FIELDS)
    try:
        for _ in range(n_steps):
            diag = train_step(ac, cfg, data, behavior, support, rng)
            if diag.step % log_every == 0 or diag.step == 1:
                kept.append(diag)
                if writer is not None:
                    writer.writerow(diag.row())
            if checkpoint_dir is not None and diag.step % checkpoint_every == 0:
                save_state(ac, Path(checkpoint_dir) / f"step{diag.step:07d}")
    finally:
        if fh is not None:
            fh.close()
    return kept


# -- persistence -----------------------------------------------------------------


def save_state(ac: ActorCriticState, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nn_core.save_checkpoint(directory / "actor.bin", ac.actor_spec, ac.actor)
    nn_core.save_checkpoint(directory / "critic1.bin", ac.critic_spec, ac.critic1)
    nn_core.save_checkpoint(directory / "critic2.bin", ac.critic_spec, ac.critic2)
    nn_core.save_checkpoint(directory / "actor_target.bin", ac.actor_spec, ac.actor_target.shadow)
    nn_core.save_checkpoint(directory / "critic1_target.bin", ac.critic_spec, ac.critic1_target.shadow)
    nn_core.save_checkpoint(directory / "critic2_target.bin", ac.critic_spec, ac.critic2_target.shadow)
    meta = {
        "lam": ac.lam,
        "lam_peak": ac.lam_peak,
        "step": ac.step,
        "actor_updates": ac.actor_updates,
        "ema_alpha": ac.actor_target.alpha,
        "state_mean": ac.state_mean.tolist(),
        "state_std": ac.state_std.tolist(),
    }
    (directory / "state.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return directory


def load_state(directory) -> ActorCriticState:
    directory = Path(directory)
    meta = json.loads((directory / "state.json").read_text())
    a_spec, actor, _ = nn_core.load_checkpoint(directory / "actor.bin")
    c_spec, c1, _ = nn_core.load_checkpoint(directory / "critic1.bin")
    _, c2, _ = nn_core.load_checkpoint(directory / "critic2.bin")
    alpha = meta["ema_alpha"]
    shadows = [nn_core.load_checkpoint(directory / f"{n}.bin")[1].data.detach() for n in ("actor_target", "critic1_target", "critic2_target")]
    return ActorCriticState(
        actor_spec=a_spec,
        actor=actor,
        critic_spec=c_spec,
        critic1=c1,
        critic2=c2,
        actor_target=EmaTracker(shadows[0], alpha),
        critic1_target=EmaTracker(shadows[1], alpha),
        critic2_target=EmaTracker(shadows[2], alpha),
        state_mean=np.array(meta["state_mean"]),
        state_std=np.array(meta["state_std"]),
        lam=meta["lam"],
        step=meta["step"],
        actor_updates=meta["actor_updates"],
        lam_peak=meta["lam_peak"],
    )


def with_variant(cfg: BosaConfig, variant: str) -> BosaConfig:
    return replace(cfg, variant=variant)
