"""Offline transition datasets: collection, subsampling, mixing and storage.

A dataset keeps transitions as parallel numpy arrays.  On disk it is one JSON
header line followed by a little-endian float64 block with one row per
transition laid out as::

    state | action | reward | next_state | done | terminal | tag | episode
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import BehaviorSpec, EnvSpec, reset, scripted_policy, step, failed

TAGS = ("target", "source", "generated")
TAG_CODES = {name: i for i, name in enumerate(TAGS)}
STD_FLOOR = 1e-6
FILE_FORMAT = "bosa-dataset"


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    tag: str
    terminal: bool = False


@dataclass
class Batch:
    idx: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    terminals: np.ndarray
    tags: np.ndarray

    def __len__(self) -> int:
        return len(self.idx)

    def subset(self, keep: np.ndarray) -> "Batch":
        return Batch(*(getattr(self, f)[keep] for f in Batch.__dataclass_fields__))


def column_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean and population std with compensated summation."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        return np.zeros(x.shape[1]), np.ones(x.shape[1])
    n = x.shape[0]
    mean = np.array([math.fsum(col) / n for col in x.T])
    var = np.array([math.fsum((col - m) ** 2) / n for col, m in zip(x.T, mean)])
    return mean, np.maximum(np.sqrt(var), STD_FLOOR)


def _rows(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x if x.ndim == 2 else x.reshape(n, -1)


@dataclass
class OfflineDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    terminals: np.ndarray
    tags: np.ndarray
    episodes: np.ndarray
    env: dict | None = None
    behavior: dict | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)
    state_mean: np.ndarray | None = None
    state_std: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.rewards)
        self.states = _rows(self.states, n)
        self.next_states = _rows(self.next_states, n)
        self.actions = _rows(self.actions, n)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        self.terminals = np.asarray(self.terminals, dtype=bool)
        self.tags = np.asarray(self.tags, dtype=np.int64)
        self.episodes = np.asarray(self.episodes, dtype=np.int64)
        if self.states.shape != self.next_states.shape:
            raise ValueError(f"state/next-state shapes differ: {self.states.shape} vs {self.next_states.shape}")
        for name in ("actions", "dones", "terminals", "tags", "episodes"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")
        if self.state_mean is None or self.state_std is None:
            self.state_mean, self.state_std = column_stats(self.states)
        else:
            self.state_mean = np.asarray(self.state_mean, dtype=np.float64)
            self.state_std = np.maximum(np.asarray(self.state_std, dtype=np.float64), STD_FLOOR)

    # -- basic views -----------------------------------------------------

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def __getitem__(self, i: int) -> Transition:
        return Transition(
            self.states[i].copy(),
            self.actions[i].copy(),
            float(self.rewards[i]),
            self.next_states[i].copy(),
            bool(self.dones[i]),
            TAGS[self.tags[i]],
            bool(self.terminals[i]),
        )

    def tag_counts(self) -> dict[str, int]:
        return {name: int(np.sum(self.tags == code)) for name, code in TAG_CODES.items()}

    def select(self, keep: np.ndarray, **overrides) -> "OfflineDataset":
        """Rows ``keep`` (mask or index array) with freshly computed stats."""
        kwargs = dict(
            states=self.states[keep],
            actions=self.actions[keep],
            rewards=self.rewards[keep],
            next_states=self.next_states[keep],
            dones=self.dones[keep],
            terminals=self.terminals[keep],
            tags=self.tags[keep],
            episodes=self.episodes[keep],
            env=self.env,
            behavior=self.behavior,
            seed=self.seed,
            meta=dict(self.meta),
        )
        kwargs.update(overrides)
        return OfflineDataset(**kwargs)

    def with_tag(self, tag: str) -> "OfflineDataset":
        return self.select(self.tags == TAG_CODES[tag])

    # -- normalization ---------------------------------------------------

    def normalize(self, s: np.ndarray) -> np.ndarray:
        return (np.asarray(s, dtype=np.float64) - self.state_mean) / self.state_std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.state_std + self.state_mean

    # -- serialization ---------------------------------------------------

    def header(self) -> dict:
        return {
            "format": FILE_FORMAT,
            "version": 1,
            "n": len(self),
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "env": self.env,
            "behavior": self.behavior,
            "seed": self.seed,
            "stats": {"state_mean": self.state_mean.tolist(), "state_std": self.state_std.tolist()},
            "meta": self.meta,
        }

    def to_bytes(self) -> bytes:
        rows = np.column_stack(
            [
                self.states,
                self.actions,
                self.rewards,
                self.next_states,
                self.dones.astype(np.float64),
                self.terminals.astype(np.float64),
                self.tags.astype(np.float64),
                self.episodes.astype(np.float64),
            ]
        ) if len(self) else np.zeros((0, 2 * self.state_dim + self.action_dim + 5))
        head = json.dumps(self.header(), sort_keys=True).encode() + b"\n"
        return head + np.ascontiguousarray(rows, dtype="<f8").tobytes()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, blob: bytes) -> "OfflineDataset":
        nl = blob.index(b"\n")
        header = json.loads(blob[:nl])
        if header.get("format") != FILE_FORMAT:
            raise ValueError("not a dataset file")
        ds, da, n = header["state_dim"], header["action_dim"], header["n"]
        width = 2 * ds + da + 5
        rows = np.frombuffer(blob[nl + 1 :], dtype="<f8")
        if rows.size != n * width:
            raise ValueError(f"payload has {rows.size} values, expected {n * width}")
        rows = rows.reshape(n, width)
        c = np.cumsum([0, ds, da, 1, ds, 1, 1, 1, 1])
        return cls(
            states=rows[:, c[0] : c[1]].copy(),
            actions=rows[:, c[1] : c[2]].copy(),
            rewards=rows[:, c[2]].copy(),
            next_states=rows[:, c[3] : c[4]].copy(),
            dones=rows[:, c[4]] != 0,
            terminals=rows[:, c[5]] != 0,
            tags=rows[:, c[6]].astype(np.int64),
            episodes=rows[:, c[7]].astype(np.int64),
            env=header["env"],
            behavior=header["behavior"],
            seed=header["seed"],
            meta=header["meta"],
            state_mean=np.array(header["stats"]["state_mean"]),
            state_std=np.array(header["stats"]["state_std"]),
        )

    @classmethod
    def load(cls, path) -> "OfflineDataset":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def empty(cls, state_dim: int, action_dim: int, **kw) -> "OfflineDataset":
        return cls(
            states=np.zeros((0, state_dim)),
            actions=np.zeros((0, action_dim)),
            rewards=np.zeros(0),
            next_states=np.zeros((0, state_dim)),
            dones=np.zeros(0, bool),
            terminals=np.zeros(0, bool),
            tags=np.zeros(0, np.int64),
            episodes=np.zeros(0, np.int64),
            **kw,
        )


# -- operations ----------------------------------------------------------------


def collect(
    spec: EnvSpec,
    behavior: BehaviorSpec,
    n_transitions: int,
    seed: int,
    tag: str = "target",
) -> OfflineDataset:
    """Roll out a scripted behavior tier until exactly ``n_transitions`` are stored."""
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    if tag not in TAG_CODES:
        raise ValueError(f"unknown domain tag {tag!r}")
    rng = np.random.default_rng(seed)
    ds, da = spec.state_dim, spec.action_dim
    S = np.empty((n_transitions, ds))
    A = np.empty((n_transitions, da))
    R = np.empty(n_transitions)
    S2 = np.empty((n_transitions, ds))
    D = np.zeros(n_transitions, bool)
    T = np.zeros(n_transitions, bool)
    E = np.empty(n_transitions, np.int64)
    medium = BehaviorSpec("medium", behavior.noise_std)
    expert = BehaviorSpec("expert", behavior.noise_std)
    i = 0
    episode = 0
    while i < n_transitions:
        if behavior.quality == "medium-expert":
            tier = medium if episode % 2 == 0 else expert
        else:
            tier = behavior
        s = reset(spec, rng)
        done = False
        while not done and i < n_transitions:
            random_prob = 1.0 - i / n_transitions if behavior.quality == "medium-replay" else 0.0
            a = scripted_policy(spec, tier, s, rng, random_prob=random_prob)
            a = np.clip(a, -1.0, 1.0)
            nxt, r, done = step(spec, s, a, rng)
            S[i], A[i], R[i], S2[i] = s.state, a, r, nxt.state
            D[i] = done
            T[i] = failed(spec, nxt.state)
            E[i] = episode
            s = nxt
            i += 1
        episode += 1
    return OfflineDataset(
        states=S,
        actions=A,
        rewards=R,
        next_states=S2,
        dones=D,
        terminals=T,
        tags=np.full(n_transitions, TAG_CODES[tag]),
        episodes=E,
        env=spec.to_dict(),
        behavior=behavior.to_dict(),
        seed=seed,
        meta={"generator": "collect", "tag": tag},
    )


def subsample(data: OfflineDataset, fraction: float, seed: int) -> OfflineDataset:
    """Keep whole episodes totalling as close as possible to ``fraction`` of the rows."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return data.select(np.arange(len(data)), meta={**data.meta, "subsample": 1.0})
    episodes, counts = np.unique(data.episodes, return_counts=True)
    order = np.random.default_rng(seed).permutation(len(episodes))
    cum = np.cumsum(counts[order])
    goal = fraction * len(data)
    k = int(np.argmin(np.abs(cum - goal))) + 1
    chosen = episodes[order[:k]]
    keep = np.isin(data.episodes, chosen)
    return data.select(keep, meta={**data.meta, "subsample": fraction, "subsample_seed": seed})


def mix(target: OfflineDataset, source: OfflineDataset) -> OfflineDataset:
    """Union of two datasets; per-row domain tags are kept and stats recomputed."""
    if target.state_dim != source.state_dim or target.action_dim != source.action_dim:
        raise ValueError(
            f"incompatible dims: target ({target.state_dim}, {target.action_dim}) "
            f"vs source ({source.state_dim}, {source.action_dim})"
        )
    if target.env and source.env and target.env.get("reward_id") != source.env.get("reward_id"):
        raise ValueError("datasets use different reward definitions")
    offset = (int(target.episodes.max()) + 1) if len(target) else 0
    meta = {
        "generator": "mix",
        "parts": [target.meta, source.meta],
        "source_env": source.env,
    }
    return OfflineDataset(
        states=np.concatenate([target.states, source.states]),
        actions=np.concatenate([target.actions, source.actions]),
        rewards=np.concatenate([target.rewards, source.rewards]),
        next_states=np.concatenate([target.next_states, source.next_states]),
        dones=np.concatenate([target.dones, source.dones]),
        terminals=np.concatenate([target.terminals, source.terminals]),
        tags=np.concatenate([target.tags, source.tags]),
        episodes=np.concatenate([target.episodes, source.episodes + offset]),
        env=target.env or source.env,
        behavior=target.behavior,
        seed=target.seed,
        meta=meta,
    )


def sample_batch(
    data: OfflineDataset,
    batch_size: int,
    rng: np.random.Generator,
    normalized: bool = False,
) -> Batch:
    """Uniform sample with replacement; ``normalized`` rescales states and next states."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(data) == 0:
        raise ValueError("cannot sample from an empty dataset")
    idx = rng.integers(0, len(data), size=batch_size)
    s, s2 = data.states[idx], data.next_states[idx]
    if normalized:
        s, s2 = data.normalize(s), data.normalize(s2)
    return Batch(
        idx=idx,
        states=s,
        actions=data.actions[idx],
        rewards=data.rewards[idx],
        next_states=s2,
        dones=data.dones[idx],
        terminals=data.terminals[idx],
        tags=data.tags[idx],
    )
