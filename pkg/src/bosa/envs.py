"""Deterministic toy control tasks with tunable dynamics shift.

Two families stand in for locomotion benchmarks:

``point-mass-2d``
    state ``(px, py, vx, vy)``, action = force in ``[-1, 1]^2``.  The mass
    scale divides the force, so a lighter source body accelerates faster.
    Reward is a Gaussian bump around a fixed goal.

``pendulum-like``
    state ``(cos th, sin th, th_dot)`` with ``th = 0`` upright, 1-D torque.
    The episode fails once the pole falls past 60 degrees.

Rewards depend on ``(state, commanded action)`` only, never on the next state,
so target and source variants of a family share one reward function.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

POINT_MASS = "point-mass-2d"
PENDULUM = "pendulum-like"
TIERS = ("random", "medium", "expert", "medium-replay", "medium-expert")


@dataclass(frozen=True)
class FamilyDef:
    name: str
    state_dim: int
    action_dim: int
    horizon: int
    reward_id: str
    dt: float
    init_mean: tuple
    init_std: float
    # Monte-Carlo references on the unshifted family (1000 episodes each),
    # regenerate with ``reference_returns``.
    random_return: float
    expert_return: float


FAMILIES = {
    POINT_MASS: FamilyDef(
        name=POINT_MASS,
        state_dim=4,
        action_dim=2,
        horizon=50,
        reward_id="goal-gaussian",
        dt=0.1,
        init_mean=(0.0, 0.0, 0.0, 0.0),
        init_std=0.2,
        random_return=0.3174,
        expert_return=30.117,
    ),
    PENDULUM: FamilyDef(
        name=PENDULUM,
        state_dim=3,
        action_dim=1,
        horizon=100,
        reward_id="upright-cos",
        dt=0.05,
        init_mean=(0.0, 0.0),
        init_std=0.1,
        random_return=19.761,
        expert_return=99.963,
    ),
}

GOAL = np.array([1.0, 1.0])
GOAL_WIDTH = 0.3
PD_GAINS = {POINT_MASS: (4.0, 4.0), PENDULUM: (20.0, 5.0)}
PENDULUM_GRAVITY = 10.0
PENDULUM_MAX_TORQUE = 5.0
PENDULUM_FAIL_ANGLE = math.pi / 3
MEDIUM_ATTENUATION = 0.5
# Peak point-mass acceleration at unit mass; weak enough that braking has to be
# planned, which is what makes a mass shift change the optimal controller.
POINT_MASS_FORCE = 0.5


@dataclass(frozen=True)
class EnvSpec:
    family: str
    state_dim: int
    action_dim: int
    mass_scale: float = 1.0
    joint_noise: float = 0.0
    horizon: int = 50
    reward_id: str = "goal-gaussian"
    actuator_gain: float = 1.0
    init_std: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown environment family {self.family!r}")
        fam = FAMILIES[self.family]
        if (self.state_dim, self.action_dim) != (fam.state_dim, fam.action_dim):
            raise ValueError(f"{self.family} has dims ({fam.state_dim}, {fam.action_dim})")
        if not self.mass_scale > 0:
            raise ValueError(f"mass scale must be > 0, got {self.mass_scale}")
        if not self.joint_noise >= 0:
            raise ValueError(f"joint-noise amplitude must be >= 0, got {self.joint_noise}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.reward_id != fam.reward_id:
            raise ValueError(f"{self.family} uses reward {fam.reward_id!r}")
        if self.init_std is not None and self.init_std < 0:
            raise ValueError("init_std must be >= 0")

    @property
    def definition(self) -> FamilyDef:
        return FAMILIES[self.family]

    @property
    def initial_std(self) -> float:
        return self.definition.init_std if self.init_std is None else self.init_std

    def shifted(self, **changes) -> "EnvSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        return cls(**d)


def make_spec(family: str = POINT_MASS, **overrides) -> EnvSpec:
    if family not in FAMILIES:
        raise ValueError(f"unknown environment family {family!r}")
    fam = FAMILIES[family]
    kwargs = dict(
        family=family,
        state_dim=fam.state_dim,
        action_dim=fam.action_dim,
        horizon=fam.horizon,
        reward_id=fam.reward_id,
    )
    kwargs.update(overrides)
    return EnvSpec(**kwargs)


@dataclass
class EnvState:
    state: np.ndarray
    t: int = 0

    def copy(self) -> "EnvState":
        return EnvState(self.state.copy(), self.t)


@dataclass(frozen=True)
class BehaviorSpec:
    quality: str = "medium"
    noise_std: float = 0.5

    def __post_init__(self):
        if self.quality not in TIERS:
            raise ValueError(f"unknown behavior tier {self.quality!r}")
        if not self.noise_std >= 0:
            raise ValueError("exploration noise std must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorSpec":
        return cls(**d)


# -- dynamics ---------------------------------------------------------------


def reset(spec: EnvSpec, rng: np.random.Generator) -> EnvState:
    std = spec.initial_std
    if spec.family == POINT_MASS:
        state = np.zeros(4)
        state[:2] = np.asarray(spec.definition.init_mean[:2]) + std * rng.standard_normal(2)
    else:
        theta = spec.definition.init_mean[0] + std * rng.standard_normal()
        omega = spec.definition.init_mean[1] + std * rng.standard_normal()
        state = np.array([math.cos(theta), math.sin(theta), omega])
    return EnvState(state, 0)


def reward(spec: EnvSpec, state: np.ndarray, action: np.ndarray) -> float:
    """Shared reward; takes the commanded (clipped) action."""
    if spec.family == POINT_MASS:
        d2 = float(np.sum((state[:2] - GOAL) ** 2))
        return math.exp(-d2 / (2 * GOAL_WIDTH**2))
    theta = math.atan2(state[1], state[0])
    return math.cos(theta) - 0.01 * float(state[2]) ** 2 - 0.001 * float(action[0]) ** 2


def failed(spec: EnvSpec, state: np.ndarray) -> bool:
    if spec.family == PENDULUM:
        return abs(math.atan2(state[1], state[0])) > PENDULUM_FAIL_ANGLE
    return False


def transition(spec: EnvSpec, state: np.ndarray, executed: np.ndarray) -> np.ndarray:
    """Next state from an already-executed (clipped, possibly noised) action."""
    dt = spec.definition.dt
    if spec.family == POINT_MASS:
        accel = POINT_MASS_FORCE * spec.actuator_gain * executed / spec.mass_scale
        vel = state[2:] + dt * accel
        pos = state[:2] + dt * vel
        return np.concatenate([pos, vel])
    theta = math.atan2(state[1], state[0])
    omega = float(state[2])
    torque = spec.actuator_gain * PENDULUM_MAX_TORQUE * float(executed[0])
    omega = omega + dt * (PENDULUM_GRAVITY * math.sin(theta) + torque / spec.mass_scale)
    theta = theta + dt * omega
    return np.array([math.cos(theta), math.sin(theta), omega])


def executed_action(spec: EnvSpec, action: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
    a = np.clip(action, -1.0, 1.0)
    if spec.joint_noise > 0:
        if rng is None:
            raise ValueError("joint noise needs an rng stream")
        a = a + rng.uniform(-spec.joint_noise, spec.joint_noise, size=a.shape)
    return a


def step(
    spec: EnvSpec,
    state: EnvState,
    action,
    rng: np.random.Generator | None = None,
) -> tuple[EnvState, float, bool]:
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (spec.action_dim,):
        raise ValueError(f"action must have shape ({spec.action_dim},), got {action.shape}")
    if not np.all(np.isfinite(action)):
        raise ValueError(f"non-finite action {action}")
    if state.t >= spec.horizon:
        raise RuntimeError("episode already finished")
    commanded = np.clip(action, -1.0, 1.0)
    r = reward(spec, state.state, commanded)
    nxt = transition(spec, state.state, executed_action(spec, commanded, rng))
    t = state.t + 1
    done = t >= spec.horizon or failed(spec, nxt)
    return EnvState(nxt, t), r, done


# -- scripted behavior ------------------------------------------------------


def expert_action(spec: EnvSpec, state: np.ndarray) -> np.ndarray:
    """Hand-tuned PD controller for the unshifted family."""
    kp, kd = PD_GAINS[spec.family]
    if spec.family == POINT_MASS:
        a = kp * (GOAL - state[:2]) - kd * state[2:]
    else:
        theta = math.atan2(state[1], state[0])
        a = np.array([-(kp * theta + kd * state[2]) / PENDULUM_MAX_TORQUE])
    return np.clip(a, -1.0, 1.0)


def scripted_policy(
    spec: EnvSpec,
    behavior: BehaviorSpec,
    state: EnvState,
    rng: np.random.Generator,
    random_prob: float = 0.0,
) -> np.ndarray:
    """Action of a behavior tier.

    ``random_prob`` is the chance of replacing the action with a uniform one;
    the collector anneals it for the medium-replay tier.
    """
    d = spec.action_dim
    if behavior.quality == "random" or (random_prob > 0 and rng.random() < random_prob):
        return rng.uniform(-1.0, 1.0, size=d)
    base = expert_action(spec, state.state)
    if behavior.quality in ("medium", "medium-replay"):
        base = MEDIUM_ATTENUATION * base
    if behavior.noise_std > 0:
        base = base + behavior.noise_std * rng.standard_normal(d)
    return np.clip(base, -1.0, 1.0)


def rollout_returns(spec: EnvSpec, policy, n_episodes: int, rng: np.random.Generator) -> np.ndarray:
    """Undiscounted returns of ``policy(env_state, rng) -> action``."""
    out = np.empty(n_episodes)
    for i in range(n_episodes):
        s = reset(spec, rng)
        total = 0.0
        done = False
        while not done:
            s, r, done = step(spec, s, policy(s, rng), rng)
            total += r
        out[i] = total
    return out


def reference_returns(family: str, n_episodes: int = 1000, seed: int = 0) -> tuple[float, float]:
    """(random-tier mean return, expert-tier mean return) on the unshifted family."""
    spec = make_spec(family)
    rnd, exp = np.random.default_rng(seed).spawn(2)
    random_b = BehaviorSpec("random", 0.0)
    expert_b = BehaviorSpec("expert", 0.0)
    r = rollout_returns(spec, lambda s, g: scripted_policy(spec, random_b, s, g), n_episodes, rnd)
    e = rollout_returns(spec, lambda s, g: scripted_policy(spec, expert_b, s, g), n_episodes, exp)
    return float(r.mean()), float(e.mean())


def references(family: str) -> tuple[float, float]:
    fam = FAMILIES[family]
    if not (math.isfinite(fam.random_return) and math.isfinite(fam.expert_return)):
        raise KeyError(f"no reference returns stored for {family}")
    return fam.random_return, fam.expert_return
