"""Domain classifiers and the DARA-style reward modification baseline.

Two binary classifiers tell target from source: one sees ``(s, a, s')``, the
other ``(s, a)``.  The reward correction is the difference of their logits,
which estimates ``log T_target(s'|s,a) - log T_source(s'|s,a)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import nn_core
from .dataset import TAG_CODES, OfflineDataset, Transition
from .nn_core import MlpSpec, ParamStore

PROB_CLAMP = 1e-6
TARGET = TAG_CODES["target"]


class UntrainedClassifierError(RuntimeError):
    pass


@dataclass
class DomainClassifier:
    """Logistic MLP head; ``prob_target`` is the sigmoid of its logit."""

    spec: MlpSpec
    params: ParamStore
    shift: np.ndarray
    scale: np.ndarray
    trained: bool = False
    meta: dict = field(default_factory=dict)

    def logits(self, x) -> np.ndarray:
        if not self.trained:
            raise UntrainedClassifierError("domain classifier has not been trained")
        z = (np.asarray(x, dtype=np.float64) - self.shift) / self.scale
        with torch.no_grad():
            out = nn_core.forward(self.spec, self.params, torch.as_tensor(z, dtype=self.params.dtype))
        return out.squeeze(-1).double().numpy()

    def prob_target(self, x) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits(x)))


def sas_features(states, actions, next_states) -> np.ndarray:
    return np.concatenate([states, actions, np.asarray(next_states) - np.asarray(states)], axis=-1)


def sa_features(states, actions) -> np.ndarray:
    return np.concatenate([states, actions], axis=-1)


def train_classifier(
    x: np.ndarray,
    is_target: np.ndarray,
    rng: np.random.Generator,
    iterations: int = 5000,
    batch_size: int = 256,
    lr: float = 3e-4,
    hidden_dim: int = 64,
    depth: int = 3,
    input_noise: float = 0.0,
) -> DomainClassifier:
    """Cross-entropy on batches with equal numbers of target and source rows.

    ``input_noise`` adds Gaussian noise (in normalized units) to the inputs
    during training, the usual regularizer for these classifiers.
    """
    x = np.asarray(x, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    tgt, src = np.flatnonzero(is_target), np.flatnonzero(~is_target)
    if len(tgt) == 0 or len(src) == 0:
        raise ValueError("classifier needs both target and source rows")
    shift = x.mean(0)
    scale = np.maximum(x.std(0), 1e-6)
    z = (x - shift) / scale
    spec = MlpSpec(x.shape[1], hidden_dim, depth, 1)
    r_init, r_train = nn_core.spawn(rng, 2)
    params = nn_core.init_params(spec, r_init)
    half = batch_size // 2
    labels = torch.cat([torch.ones(half), torch.zeros(half)]).to(params.dtype)
    for _ in range(iterations):
        idx = np.concatenate([r_train.choice(tgt, half), r_train.choice(src, half)])
        xb = z[idx]
        if input_noise > 0:
            xb = xb + input_noise * r_train.standard_normal(xb.shape)
        out = nn_core.forward(spec, params, torch.as_tensor(xb, dtype=params.dtype)).squeeze(-1)
        loss = F.binary_cross_entropy_with_logits(out, labels)
        (g,) = nn_core.backward(loss, params, accumulate=False)
        nn_core.adam_step(params, g, lr)
    return DomainClassifier(spec, params, shift, scale, trained=True, meta={"iterations": iterations, "input_noise": input_noise})


@dataclass
class DaraClassifiers:
    q_sas: DomainClassifier
    q_sa: DomainClassifier


def fit_dara(data: OfflineDataset, rng: np.random.Generator, **kw) -> DaraClassifiers:
    """Both classifiers on a domain-tagged mix (target rows vs everything else)."""
    is_t = data.tags == TARGET
    r1, r2 = nn_core.spawn(rng, 2)
    q_sas = train_classifier(sas_features(data.states, data.actions, data.next_states), is_t, r1, **kw)
    q_sa = train_classifier(sa_features(data.states, data.actions), is_t, r2, **kw)
    return DaraClassifiers(q_sas, q_sa)


def _log_ratio(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return np.log(p) - np.log1p(-p)


def reward_delta(clf: DaraClassifiers, states, actions, next_states) -> np.ndarray:
    """``log q_sas(t)/q_sas(s) - log q_sa(t)/q_sa(s)`` per row."""
    p_sas = clf.q_sas.prob_target(sas_features(states, actions, next_states))
    p_sa = clf.q_sa.prob_target(sa_features(states, actions))
    return _log_ratio(p_sas) - _log_ratio(p_sa)


def dara_modified_reward(t: Transition, q_sas: DomainClassifier, q_sa: DomainClassifier) -> float:
    d = reward_delta(DaraClassifiers(q_sas, q_sa), t.state[None], t.action[None], t.next_state[None])
    return float(t.reward + d[0])


def modified_rewards(data: OfflineDataset, clf: DaraClassifiers) -> np.ndarray:
    return data.rewards + reward_delta(clf, data.states, data.actions, data.next_states)
