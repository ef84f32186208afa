"""Flat-parameter MLPs, gradients, Adam and EMA tracking.

Every learned component in the package (actor, twin critics, CVAE encoders and
decoders, domain classifiers) is an :class:`MlpSpec` paired with a
:class:`ParamStore`.  A store keeps all weights of one network in a single flat
vector, so optimizer state, EMA shadows and checkpoints are plain vectors too.

Reverse-mode accumulation is delegated to ``torch.autograd``; the rest of the
machinery (parameter layout, Adam, EMA, checkpoint format) lives here.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

DEFAULT_DTYPE = torch.float32

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_ACTIVATIONS = {"relu": torch.relu, "tanh": torch.tanh}

CHECKPOINT_FORMAT = "bosa-params"


class ShapeError(ValueError):
    """Raised when an array does not have the dimension a network expects."""

    def __init__(self, what: str, expected, actual):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class GraphError(RuntimeError):
    """Raised when gradients are requested without a recorded forward pass."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, indices: Sequence[int]):
        self.indices = list(indices)
        shown = self.indices[:20]
        more = "" if len(self.indices) <= 20 else f" (+{len(self.indices) - 20} more)"
        super().__init__(f"non-finite gradient entries at indices {shown}{more}")


@dataclass(frozen=True)
class MlpSpec:
    """Shape of a fully connected network.

    ``depth`` counts affine layers, so ``depth=1`` is a single linear map and
    ``depth=3`` has two hidden layers of width ``hidden_dim``.
    """

    input_dim: int
    hidden_dim: int
    depth: int
    output_dim: int
    activation: str = "relu"
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "depth", "output_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"MlpSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1], got {self.dropout}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        widths = [self.input_dim] + [self.hidden_dim] * (self.depth - 1) + [self.output_dim]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_dims)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(**d)


class ParamStore:
    """Flat parameter vector with gradient accumulator and Adam moments."""

    def __init__(self, data: torch.Tensor, step: int = 0):
        data = torch.as_tensor(data)
        if data.ndim != 1:
            raise ShapeError("parameter vector rank", 1, data.ndim)
        self.data = data.detach().clone().requires_grad_(True)
        self.grad = torch.zeros_like(self.data, requires_grad=False)
        self.m = torch.zeros_like(self.grad)
        self.v = torch.zeros_like(self.grad)
        self.step = int(step)

    def __len__(self) -> int:
        return self.data.numel()

    @property
    def dtype(self) -> torch.dtype:
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad.zero_()

    def copy(self) -> "ParamStore":
        out = ParamStore(self.data, step=self.step)
        out.grad.copy_(self.grad)
        out.m.copy_(self.m)
        out.v.copy_(self.v)
        return out

    def numpy(self) -> np.ndarray:
        return self.data.detach().cpu().numpy().copy()

    def set_(self, values) -> None:
        values = torch.as_tensor(values, dtype=self.dtype)
        if values.shape != self.data.shape:
            raise ShapeError("parameter vector", tuple(self.data.shape), tuple(values.shape))
        with torch.no_grad():
            self.data.copy_(values)


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split ``rng`` into ``n`` independent child streams."""
    return list(rng.spawn(n))


def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def init_params(spec: MlpSpec, rng: np.random.Generator, dtype: torch.dtype = DEFAULT_DTYPE) -> ParamStore:
    """Weights and biases uniform in +-1/sqrt(fan_in), layer by layer."""
    chunks = []
    for fan_in, fan_out in spec.layer_dims:
        bound = 1.0 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return ParamStore(torch.as_tensor(np.concatenate(chunks), dtype=dtype))


def zeros_params(spec: MlpSpec, dtype: torch.dtype = DEFAULT_DTYPE) -> ParamStore:
    return ParamStore(torch.zeros(spec.n_params, dtype=dtype))


def layer_views(spec: MlpSpec, flat: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """(weight, bias) views into ``flat``; weights are stored (fan_in, fan_out) row-major."""
    if flat.numel() != spec.n_params:
        raise ShapeError("parameter count", spec.n_params, flat.numel())
    out = []
    offset = 0
    for fan_in, fan_out in spec.layer_dims:
        w = flat[offset : offset + fan_in * fan_out].view(fan_in, fan_out)
        offset += fan_in * fan_out
        b = flat[offset : offset + fan_out]
        offset += fan_out
        out.append((w, b))
    return out


def forward(
    spec: MlpSpec,
    params: ParamStore | torch.Tensor,
    x,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Evaluate the network on a single input vector or a batch (rows).

    Dropout is inverted dropout on hidden activations and only active when
    ``train_mode`` is set; it then needs an explicit ``rng`` stream.
    """
    flat = params.data if isinstance(params, ParamStore) else params
    x = torch.as_tensor(x, dtype=flat.dtype)
    if x.ndim == 0 or x.shape[-1] != spec.input_dim:
        raise ShapeError("network input dim", spec.input_dim, tuple(x.shape))
    act = _ACTIVATIONS[spec.activation]
    use_dropout = train_mode and spec.dropout > 0.0
    if use_dropout and rng is None:
        raise ValueError("dropout in train mode needs an rng stream")
    layers = layer_views(spec, flat)
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = act(h)
            if use_dropout:
                if spec.dropout >= 1.0:
                    h = h * 0.0
                else:
                    keep = rng.random(tuple(h.shape)) >= spec.dropout
                    h = h * torch.as_tensor(keep, dtype=h.dtype) / (1.0 - spec.dropout)
    return h


def backward(loss, *stores: ParamStore, accumulate: bool = True) -> list[torch.Tensor]:
    """Gradient of a scalar loss with respect to every store's flat vector.

    Gradients are added into ``store.grad`` unless ``accumulate`` is false.  A
    loss that does not depend on a store yields zeros for it.
    """
    if not isinstance(loss, torch.Tensor):
        raise GraphError("backward() needs the scalar produced by a forward pass, got %r" % (loss,))
    if loss.numel() != 1:
        raise ShapeError("loss", "scalar", tuple(loss.shape))
    if not stores:
        raise ValueError("backward() needs at least one ParamStore")
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, [s.data for s in stores], allow_unused=True)
    else:
        grads = [None] * len(stores)
    out = []
    for store, g in zip(stores, grads):
        g = torch.zeros_like(store.grad) if g is None else g.detach()
        if accumulate:
            store.grad.add_(g)
        out.append(g)
    return out


def adam_step(
    params: ParamStore,
    grad: torch.Tensor | None,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> ParamStore:
    """One bias-corrected Adam update, in place.  ``grad=None`` uses ``params.grad``."""
    g = params.grad if grad is None else torch.as_tensor(grad, dtype=params.dtype)
    if g.shape != params.data.shape:
        raise ShapeError("gradient length", len(params), tuple(g.shape))
    finite = torch.isfinite(g)
    if not bool(finite.all()):
        raise NonFiniteGradientError(torch.nonzero(~finite).flatten().tolist())
    params.step += 1
    t = params.step
    with torch.no_grad():
        params.m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        params.v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        m_hat = params.m / (1.0 - beta1**t)
        v_hat = params.v / (1.0 - beta2**t)
        params.data.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return params


@dataclass
class EmaTracker:
    """Shadow copy updated as ``shadow <- alpha * shadow + (1 - alpha) * param``."""

    shadow: torch.Tensor
    alpha: float

    def __post_init__(self):
        _check_alpha(self.alpha)
        self.shadow = torch.as_tensor(self.shadow).detach().clone()

    def __len__(self) -> int:
        return self.shadow.numel()


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0 or math.isnan(alpha):
        raise ValueError(f"EMA rate must lie in [0, 1], got {alpha}")


def make_ema(params: ParamStore, alpha: float) -> EmaTracker:
    return EmaTracker(params.data.detach().clone(), alpha)


def ema_update(tracker: EmaTracker, params: ParamStore | torch.Tensor) -> EmaTracker:
    _check_alpha(tracker.alpha)
    p = params.data if isinstance(params, ParamStore) else torch.as_tensor(params)
    if p.numel() != tracker.shadow.numel():
        raise ShapeError("EMA parameter length", tracker.shadow.numel(), p.numel())
    with torch.no_grad():
        tracker.shadow.mul_(tracker.alpha).add_(p.detach().to(tracker.shadow.dtype), alpha=1.0 - tracker.alpha)
    return tracker


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(
    path,
    spec: MlpSpec,
    params: ParamStore | torch.Tensor,
    seed: int | None = None,
    extra: dict | None = None,
) -> Path:
    """One JSON header line, then the flat vector as little-endian float64."""
    path = Path(path)
    flat = params.data if isinstance(params, ParamStore) else params
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "spec": spec.to_dict(),
        "n_params": int(flat.numel()),
        "step": int(params.step) if isinstance(params, ParamStore) else 0,
        "seed": seed,
        "dtype": str(flat.dtype).replace("torch.", ""),
    }
    if extra:
        header["extra"] = extra
    payload = np.ascontiguousarray(flat.detach().cpu().numpy(), dtype="<f8").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
    return path


def load_checkpoint(path) -> tuple[MlpSpec, ParamStore, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        payload = fh.read()
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a parameter checkpoint")
    spec = MlpSpec.from_dict(header["spec"])
    flat = np.frombuffer(payload, dtype="<f8")
    if flat.size != header["n_params"] or flat.size != spec.n_params:
        raise ShapeError(f"{path}: parameter count", spec.n_params, flat.size)
    dtype = getattr(torch, header.get("dtype", "float64"))
    store = ParamStore(torch.as_tensor(flat.copy(), dtype=dtype), step=header["step"])
    return spec, store, header
