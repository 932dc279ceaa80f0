"""Siamese capsule back-end: pair two embeddings index-wise and route the tuples.

Each index ``i`` of the enrollment and test embeddings forms a two-element
*part* ``(enroll[i], test[i])``.  Parts are L2-normalised one tuple at a time,
optionally passed through a primary-capsule stage, and routed by dynamic
routing to ``num_capsules`` higher capsules.  The concatenated capsule
outputs go through an affine head and a sigmoid to give the similarity score.

All forward functions accept either a single pair (``(D,)`` vectors) or a
batch (``(B, D)``); a batch is scored in one pass.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DimensionError, NumericalError, UsageError


@dataclass(frozen=True)
class BackendConfig:
    input_dim: int = 4096
    num_capsules: int = 4
    capsule_dim: int = 128
    routing_iters: int = 3
    eps: float = 1e-6
    use_primary_capsules: bool = False
    primary_channels: int = 8
    trainable_logits: bool = False

    def __post_init__(self):
        for name in ("input_dim", "num_capsules", "capsule_dim", "routing_iters", "primary_channels"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise UsageError(f"{name} must be a positive integer, got {value!r}")
        if not self.eps > 0:
            raise UsageError(f"eps must be positive, got {self.eps!r}")

    @property
    def part_dim(self) -> int:
        return self.primary_channels if self.use_primary_capsules else 2

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class BackendParams:
    """Trainable tensors of the back-end.

    ``prediction_weights`` has shape ``(D, J, capsule_dim, part_dim)``:
    one prediction matrix per (part, capsule).  Optional tensors are ``None``
    when the matching config switch is off.
    """

    prediction_weights: Tensor
    head_weights: Tensor
    head_bias: Tensor
    initial_logits: Tensor | None = None
    primary_map: Tensor | None = None
    primary_bias: Tensor | None = None

    def named(self) -> dict[str, Tensor]:
        out = {}
        for f in fields(self):
            t = getattr(self, f.name)
            if t is not None:
                out[f.name] = t
        return out

    def num_scalars(self) -> int:
        return int(np.sum([t.size for t in self.named().values()]))


def expected_shapes(config: BackendConfig) -> dict[str, tuple[int, ...]]:
    D, J, K, P = config.input_dim, config.num_capsules, config.capsule_dim, config.part_dim
    shapes = {
        "prediction_weights": (D, J, K, P),
        "head_weights": (J * K,),
        "head_bias": (),
    }
    if config.trainable_logits:
        shapes["initial_logits"] = (D, J)
    if config.use_primary_capsules:
        shapes["primary_map"] = (config.primary_channels, 2)
        shapes["primary_bias"] = (config.primary_channels,)
    return shapes


def parameter_count(config: BackendConfig) -> int:
    D, J, K, P = config.input_dim, config.num_capsules, config.capsule_dim, config.part_dim
    count = D * J * K * P + (J * K + 1)
    if config.trainable_logits:
        count += D * J
    if config.use_primary_capsules:
        count += 3 * config.primary_channels
    return count


def init_params(config: BackendConfig, seed=0, dtype=np.float32, head_scale: float = 0.0) -> BackendParams:
    """Glorot-uniform prediction matrices; head zeroed unless ``head_scale`` > 0.

    A zero head makes every initial score exactly 0.5.  ``head_scale`` is for
    gradient checks, where a zero head would hide the routing gradients.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    D, J, K, P = config.input_dim, config.num_capsules, config.capsule_dim, config.part_dim
    bound = math.sqrt(6.0 / (K + P))
    W = rng.uniform(-bound, bound, size=(D, J, K, P))
    if head_scale > 0:
        head = rng.uniform(-head_scale, head_scale, size=J * K)
        bias = rng.uniform(-head_scale, head_scale)
    else:
        head = np.zeros(J * K)
        bias = 0.0

    def param(x):
        return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)

    params = BackendParams(param(W), param(head), param(bias))
    if config.trainable_logits:
        params.initial_logits = param(np.zeros((D, J)))
    if config.use_primary_capsules:
        C = config.primary_channels
        pb = math.sqrt(6.0 / (2 + C))
        params.primary_map = param(rng.uniform(-pb, pb, size=(C, 2)))
        params.primary_bias = param(np.zeros(C))
    return params


def check_params(params: BackendParams, config: BackendConfig) -> None:
    want = expected_shapes(config)
    have = {name: t.shape for name, t in params.named().items()}
    if want != have:
        raise DimensionError(f"parameters {have} do not match config shapes {want}")


@dataclass
class RoutingState:
    """Result of dynamic routing.

    ``logits``/``coefficients`` are the values used in the last iteration.
    ``history`` holds ``(logits, coefficients, capsule_outputs)`` per
    iteration as plain arrays, for inspection.
    """

    logits: Tensor
    coefficients: Tensor
    capsule_outputs: Tensor
    predictions: Tensor
    history: list


def _batched(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    if x.ndim == ndim:
        return dc.reshape(x, (1,) + x.shape), True
    if x.ndim == ndim + 1:
        return x, False
    raise DimensionError(f"expected rank {ndim} or {ndim + 1}, got shape {x.shape}")


def _unbatch(x: Tensor) -> Tensor:
    return dc.reshape(x, x.shape[1:])


def pair_embeddings(enroll, test) -> Tensor:
    """Stack into parts: ``parts[..., i, :] == (enroll[..., i], test[..., i])``."""
    enroll, test = dc._as_tensor(enroll), dc._as_tensor(test)
    if enroll.shape != test.shape:
        raise DimensionError(f"enroll dimension {enroll.shape} does not match test dimension {test.shape}")
    return dc.stack([enroll, test], axis=-1)


def normalize_parts(parts: Tensor, eps: float = 1e-6) -> Tensor:
    return dc.l2_normalize(parts, eps=eps, axis=-1)


def primary_capsule_stage(parts: Tensor, params: BackendParams, config: BackendConfig) -> Tensor:
    """Shared per-position affine map 2 -> primary_channels, squashed per row."""
    if not config.use_primary_capsules or params.primary_map is None:
        raise UsageError("primary_capsule_stage called with primary capsules disabled")
    x, single = _batched(parts, 2)
    h = dc.add(dc.einsum("bip,cp->bic", x, params.primary_map), params.primary_bias)
    out = dc.squash(h, axis=-1)
    return _unbatch(out) if single else out


def dynamic_routing(inputs: Tensor, params: BackendParams, config: BackendConfig) -> RoutingState:
    """Route ``(D, part_dim)`` parts (or a batch of them) to the higher capsules."""
    x, single = _batched(inputs, 2)
    B, D, P = x.shape
    if D != config.input_dim or P != config.part_dim:
        raise DimensionError(f"routing input {(D, P)} does not match config {(config.input_dim, config.part_dim)}")
    J = config.num_capsules

    u = dc.einsum("ijkp,bip->bijk", params.prediction_weights, x)
    zeros = Tensor(np.zeros((B, D, J), dtype=u.dtype))
    logits = zeros if params.initial_logits is None else dc.add(zeros, params.initial_logits)

    history = []
    for it in range(config.routing_iters):
        c = dc.softmax(logits, axis=-1)
        s = dc.einsum("bij,bijk->bjk", c, u)
        out = dc.squash(s, axis=-1)
        if not (np.all(np.isfinite(out.data)) and np.all(np.isfinite(c.data))):
            raise NumericalError(f"non-finite value in dynamic routing at iteration {it}")
        history.append((logits.data, c.data, out.data))
        if it < config.routing_iters - 1:
            logits = dc.add(logits, dc.einsum("bijk,bjk->bij", u, out))

    state = RoutingState(logits, c, out, u, history)
    if single:
        state.logits = _unbatch(state.logits)
        state.coefficients = _unbatch(state.coefficients)
        state.capsule_outputs = _unbatch(state.capsule_outputs)
        state.predictions = _unbatch(state.predictions)
        state.history = [(a[0], b[0], o[0]) for a, b, o in history]
    return state


def score(enroll, test, params: BackendParams, config: BackendConfig) -> Tensor:
    """Similarity score(s) in (0, 1): a scalar for one pair, ``(B,)`` for a batch."""
    enroll, test = dc._as_tensor(enroll), dc._as_tensor(test)
    if enroll.shape[-1] != config.input_dim:
        raise DimensionError(f"embedding dimension {enroll.shape[-1]} does not match input_dim {config.input_dim}")
    parts = normalize_parts(pair_embeddings(enroll, test), config.eps)
    parts, single = _batched(parts, 2)
    if config.use_primary_capsules:
        parts = primary_capsule_stage(parts, params, config)
    state = dynamic_routing(parts, params, config)
    B = parts.shape[0]
    flat = dc.reshape(state.capsule_outputs, (B, config.num_capsules * config.capsule_dim))
    logit = dc.add(dc.einsum("bf,f->b", flat, params.head_weights), params.head_bias)
    out = dc.sigmoid(logit)
    return dc.reshape(out, ()) if single else out
