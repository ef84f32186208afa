"""Evaluation rollouts, normalized scores, transfer deltas and report files."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import envs
from .agent import ActorCriticState, act, policy, q_value
from .dataset import OfflineDataset
from .envs import EnvSpec


@dataclass
class EvalResult:
    returns: list
    score: float
    seed: int
    variant: str
    dataset: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns))


@dataclass(frozen=True)
class TransferDelta:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("transfer deltas must be finite")


def normalized_score(mean_return: float, random_ref: float, expert_ref: float) -> float:
    if expert_ref == random_ref:
        raise ValueError("expert and random references coincide")
    return 100.0 * (mean_return - random_ref) / (expert_ref - random_ref)


def evaluate_policy(
    fn: Callable[[np.ndarray], np.ndarray],
    spec: EnvSpec,
    n_episodes: int,
    rng: np.random.Generator,
    seed: int = 0,
    variant: str = "",
    dataset: str = "",
    references: tuple[float, float] | None = None,
) -> EvalResult:
    """Roll out ``fn(state) -> action`` on ``spec`` and score it."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    lo, hi = envs.references(spec.family) if references is None else references
    rets = envs.rollout_returns(spec, lambda s, g: fn(s.state), n_episodes, rng)
    return EvalResult(
        returns=[float(r) for r in rets],
        score=normalized_score(float(rets.mean()), lo, hi),
        seed=seed,
        variant=variant,
        dataset=dataset,
        meta={"references": [lo, hi]},
    )


def evaluate(
    ac: ActorCriticState,
    spec: EnvSpec,
    n_episodes: int,
    rng: np.random.Generator,
    seed: int = 0,
    variant: str = "",
    dataset: str = "",
) -> EvalResult:
    """Deterministic-policy rollouts on the target spec."""
    return evaluate_policy(lambda s: act(ac, s), spec, n_episodes, rng, seed, variant, dataset)


def transfer_deltas(score_10: float, score_cross: float, best_100: float) -> TransferDelta:
    if best_100 == 0:
        raise ZeroDivisionError("best 100%-target score is 0")
    return TransferDelta((score_10 - best_100) / best_100, (score_cross - best_100) / best_100)


def aggregate(results: Sequence[EvalResult]) -> tuple[float, float]:
    """Mean and sample std (ddof 1) of normalized scores; one result has std 0."""
    if not results:
        raise ValueError("nothing to aggregate")
    keys = {(r.variant, r.dataset) for r in results}
    if len(keys) > 1:
        raise ValueError(f"cannot aggregate across variants/datasets: {sorted(keys)}")
    scores = np.array([r.score for r in results])
    std = float(scores.std(ddof=1)) if len(scores) > 1 else 0.0
    return float(scores.mean()), std


def extrapolation_diagnostic(
    ac: ActorCriticState,
    dataset: OfflineDataset,
    oracle_spec: EnvSpec,
    rng: np.random.Generator,
    n: int,
    gamma: float = 0.99,
) -> float:
    """Mean |dataset TD target - oracle TD target| over ``n`` sampled rows.

    Both targets use the target actor and the min of the twin target critics.
    The oracle replays the commanded action through ``oracle_spec`` without
    joint noise.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    idx = rng.integers(0, len(dataset), size=n)
    s, a = dataset.states[idx], dataset.actions[idx]
    s2_data = dataset.next_states[idx]
    s2_oracle = np.stack([envs.transition(oracle_spec, si, np.clip(ai, -1.0, 1.0)) for si, ai in zip(s, a)])
    term_data = dataset.terminals[idx]
    term_oracle = np.array([envs.failed(oracle_spec, x) for x in s2_oracle])
    r = dataset.rewards[idx]
    y_data = r + gamma * (1.0 - term_data) * _target_value(ac, s2_data)
    y_oracle = r + gamma * (1.0 - term_oracle) * _target_value(ac, s2_oracle)
    return float(np.mean(np.abs(y_data - y_oracle)))


def _target_value(ac: ActorCriticState, next_states: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        s2 = ac.norm(next_states)
        a2 = policy(ac, s2, params=ac.actor_target.shadow)
        q1 = q_value(ac, ac.critic1_target.shadow, s2, a2)
        q2 = q_value(ac, ac.critic2_target.shadow, s2, a2)
        return torch.minimum(q1, q2).double().numpy()


# -- report files ----------------------------------------------------------------


REPORT_FIELDS = ("variant", "dataset", "seed", "score", "std")


def write_report(results: Sequence[EvalResult], path) -> Path:
    """One row per run (std over its episodes) plus one ``mean`` row per group."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    groups: dict = {}
    for r in results:
        groups.setdefault((r.variant, r.dataset), []).append(r)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for (variant, ds), rs in sorted(groups.items()):
            for r in sorted(rs, key=lambda r: r.seed):
                lo, hi = r.meta.get("references", (None, None))
                ep = np.array(r.returns)
                std = float(ep.std()) * 100.0 / (hi - lo) if lo is not None else float(ep.std())
                w.writerow([variant, ds, r.seed, f"{r.score:.6f}", f"{std:.6f}"])
            mean, std = aggregate(rs)
            w.writerow([variant, ds, "mean", f"{mean:.6f}", f"{std:.6f}"])
    return path


def write_deltas(deltas: dict[str, TransferDelta], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("task", "x", "y"))
        for task, d in sorted(deltas.items()):
            w.writerow([task, f"{d.x:.6f}", f"{d.y:.6f}"])
    return path


def scatter_svg(deltas: dict[str, TransferDelta], path) -> Path:
    """Transfer-delta scatter: x = 10%-target change, y = cross-domain change."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "bosa"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for task, d in sorted(deltas.items()):
        ax.scatter([d.x], [d.y])
        ax.annotate(task, (d.x, d.y), fontsize=7)
    ax.axhline(0, color="grey", lw=0.5)
    ax.axvline(0, color="grey", lw=0.5)
    ax.plot([-1, 1], [-1, 1], ls="--", color="grey", lw=0.5)
    ax.set_xlabel("(Score(10% target) - Best(100% target)) / Best")
    ax.set_ylabel("(Score(10% target + source) - Best(100% target)) / Best")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def result_to_dict(r: EvalResult) -> dict:
    return asdict(r)


def result_from_dict(d: dict) -> EvalResult:
    return EvalResult(**d)
