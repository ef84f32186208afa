"""Synthetic source data for when no shifted-domain dataset exists.

Both generators copy ``(s, a, r)`` from sampled target rows and only replace
the next state: ``model_augment`` queries a pseudo transition model,
``noise_augment`` adds per-component uniform noise to the true next state.
Outputs are tagged ``generated`` and carry provenance in ``meta``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Union

import numpy as np

from . import density, nn_core
from .dataset import TAG_CODES, OfflineDataset
from .density import CvaeModel, DensityConfig
from .envs import EnvSpec, transition

# A pseudo model is a CVAE on (s, a) -> s' or any callable with the same contract.
PseudoModel = Union[CvaeModel, Callable[[np.ndarray, np.ndarray, np.random.Generator], np.ndarray]]


@dataclass(frozen=True)
class NoiseSpec:
    amplitude: float

    def __post_init__(self):
        if not self.amplitude >= 0:
            raise ValueError(f"noise amplitude must be >= 0, got {self.amplitude}")


def natural_next_state_scale(data: OfflineDataset) -> float:
    """Mean absolute per-component change ``|s' - s|`` over the dataset."""
    return float(np.mean(np.abs(data.next_states - data.states)))


def oracle_model(spec: EnvSpec) -> PseudoModel:
    """Exact deterministic dynamics of ``spec`` (ignores joint noise)."""

    def predict(states, actions, rng):
        return np.stack([transition(spec, s, np.clip(a, -1, 1)) for s, a in zip(states, actions)])

    return predict


def fit_pseudo_model(data: OfflineDataset, cfg: DensityConfig, budget: int, rng: np.random.Generator) -> CvaeModel:
    """Transition CVAE trained for only ``budget`` iterations (the mismatch dial)."""
    ens = density.fit_transition_ensemble(data, replace(cfg, iterations=budget), rng, k=1)
    model = ens.members[0]
    model.meta.update(role="pseudo-transition", budget=budget)
    return model


def predict_next_states(model: PseudoModel, states, actions, rng) -> np.ndarray:
    # A CVAE is queried at its prior mode: with a KL weight below 1 the latent
    # carries information, so decoded prior draws mostly measure prior holes.
    if isinstance(model, CvaeModel):
        return density.sample(model, density.transition_inputs(states, actions), rng, mean_only=True)
    return np.asarray(model(states, actions, rng), dtype=np.float64)


def _draw(d_target: OfflineDataset, n_out: int, rng) -> np.ndarray:
    if n_out < 1:
        raise ValueError(f"n_out must be >= 1, got {n_out}")
    if len(d_target) == 0:
        raise ValueError("cannot augment an empty dataset")
    return rng.integers(0, len(d_target), size=n_out)


def _generated(d_target: OfflineDataset, idx: np.ndarray, next_states: np.ndarray, meta: dict) -> OfflineDataset:
    return d_target.select(
        idx,
        next_states=next_states,
        tags=np.full(len(idx), TAG_CODES["generated"]),
        meta={**meta, "parent": d_target.content_hash()},
    )


def model_augment(d_target: OfflineDataset, model: PseudoModel, n_out: int, rng: np.random.Generator) -> OfflineDataset:
    r_idx, r_model = nn_core.spawn(rng, 2)
    idx = _draw(d_target, n_out, r_idx)
    s2 = predict_next_states(model, d_target.states[idx], d_target.actions[idx], r_model)
    meta = {"generator": "model_augment"}
    if isinstance(model, CvaeModel):
        meta["budget"] = model.meta.get("budget")
    return _generated(d_target, idx, s2, meta)


def noise_augment(d_target: OfflineDataset, spec: NoiseSpec, n_out: int, rng: np.random.Generator) -> OfflineDataset:
    r_idx, r_noise = nn_core.spawn(rng, 2)
    idx = _draw(d_target, n_out, r_idx)
    s2 = d_target.next_states[idx]
    noise = 2.0 * (r_noise.random(s2.shape) - 0.5) * spec.amplitude
    return _generated(d_target, idx, s2 + noise, {"generator": "noise_augment", "amplitude": spec.amplitude})
