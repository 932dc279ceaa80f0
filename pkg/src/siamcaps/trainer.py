"""Triplet-driven training of the capsule back-end.

Each step samples ``batch_size`` triplets (anchor, same-speaker positive,
different-speaker negative), turns every triplet into one positive and one
negative labelled pair, averages binary cross-entropy over the ``2 *
batch_size`` pairs and applies one Adam step with a triangular cyclical
learning rate.

Checkpoint layout (little-endian)::

    b"SCKPT" | version u32
    config: input_dim u32, num_capsules u32, capsule_dim u32, routing_iters u32,
            eps f64, use_primary_capsules u8, primary_channels u32,
            trainable_logits u8
    step u64 | adam step u64
    tensor count u32, then per tensor:
        u16 name length, name UTF-8, u32 rank, rank x u32 dims, f32 data
    u32 length + RNG state (JSON, UTF-8)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .capsbackend import BackendConfig, BackendParams, check_params, expected_shapes, init_params, score
from .diffcore import Tensor
from .embedio import EmbeddingStore
from .errors import DataError, DimensionError, FormatError, NumericalError, UsageError

CKPT_MAGIC = b"SCKPT"
CKPT_VERSION = 1
_CONFIG = struct.Struct("<IIIIdBIB")


@dataclass(frozen=True)
class Triplet:
    anchor_utt: str
    positive_utt: str
    negative_utt: str


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 1e-4
    max_lr: float = 1e-2
    cycle_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    total_steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 0 or self.checkpoint_every < 0:
            raise UsageError("batch_size must be >= 1; total_steps and checkpoint_every must be >= 0")
        if not 0 < self.base_lr <= self.max_lr:
            raise UsageError(f"need 0 < base_lr <= max_lr, got {self.base_lr} and {self.max_lr}")
        if self.cycle_steps < 2:
            raise UsageError(f"cycle_steps must be >= 2, got {self.cycle_steps}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: BackendParams) -> "OptimizerState":
        named = params.named()
        return cls({k: np.zeros_like(t.data) for k, t in named.items()},
                   {k: np.zeros_like(t.data) for k, t in named.items()})


# --- sampling ---------------------------------------------------------------


def sample_triplet(store: EmbeddingStore, rng: np.random.Generator) -> Triplet:
    speakers = list(store.speakers)
    eligible = [s for s in speakers if len(store.speakers[s]) >= 2]
    if len(speakers) < 2 or not eligible:
        raise DataError("triplet sampling needs >= 2 speakers and one speaker with >= 2 utterances")
    anchor_spk = eligible[rng.integers(len(eligible))]
    utts = store.speakers[anchor_spk]
    a, p = rng.choice(len(utts), size=2, replace=False)
    others = [s for s in speakers if s != anchor_spk]
    neg_spk = others[rng.integers(len(others))]
    neg_utts = store.speakers[neg_spk]
    n = rng.integers(len(neg_utts))
    return Triplet(utts[a], utts[p], neg_utts[n])


def triplet_to_pairs(t: Triplet) -> list[tuple[str, str, int]]:
    return [(t.anchor_utt, t.positive_utt, 1), (t.anchor_utt, t.negative_utt, 0)]


def cyclical_lr(step: int, cfg: TrainConfig) -> float:
    """Triangular wave: ``base_lr`` at multiples of ``cycle_steps``, ``max_lr`` half-way."""
    half = cfg.cycle_steps / 2.0
    x = abs((step % cfg.cycle_steps) / half - 1.0)
    return cfg.base_lr + (cfg.max_lr - cfg.base_lr) * (1.0 - x)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float, cfg: TrainConfig) -> OptimizerState:
    """Bias-corrected Adam; updates ``params`` in place and returns ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        dtype = p.dtype
        m = (b1 * state.m[name] + (1.0 - b1) * g).astype(dtype)
        v = (b2 * state.v[name] + (1.0 - b2) * g * g).astype(dtype)
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data = (p.data - update).astype(dtype)
        if not np.all(np.isfinite(p.data)):
            raise NumericalError(f"parameter {name!r} became non-finite at step {t}")
    return state


# --- training loop ----------------------------------------------------------


@dataclass
class TrainResult:
    params: BackendParams
    optimizer: OptimizerState
    step: int
    rng: np.random.Generator
    trace: list[tuple[int, float, float]] = field(default_factory=list)


def batch_loss(store: EmbeddingStore, triplets, params: BackendParams, config: BackendConfig) -> Tensor:
    pairs = [pair for t in triplets for pair in triplet_to_pairs(t)]
    mat = store.matrix
    enroll = Tensor(mat[[store.index_of(a) for a, _, _ in pairs]])
    test = Tensor(mat[[store.index_of(b) for _, b, _ in pairs]])
    labels = np.array([y for _, _, y in pairs], dtype=mat.dtype)
    return dc.mean(dc.bce_loss(score(enroll, test, params, config), labels))


def train(store: EmbeddingStore, backend_cfg: BackendConfig, train_cfg: TrainConfig, *,
          resume: "Checkpoint | None" = None,
          checkpoint_dir=None,
          on_step: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Run training until ``train_cfg.total_steps`` steps have completed.

    With ``resume`` the run continues from the checkpoint's step, parameters,
    optimizer moments and sampler RNG, so the trace continues exactly where
    an uninterrupted run would be.  Checkpoints go to ``checkpoint_dir`` every
    ``checkpoint_every`` steps and once at the end.
    """
    if store.dim != backend_cfg.input_dim:
        raise DimensionError(f"store dimension {store.dim} does not match input_dim {backend_cfg.input_dim}")
    if resume is None:
        params = init_params(backend_cfg, seed=np.random.default_rng([train_cfg.seed, 0]))
        opt = OptimizerState.zeros_like(params)
        rng = np.random.default_rng([train_cfg.seed, 1])
        step = 0
    else:
        if resume.config != backend_cfg:
            raise UsageError(f"checkpoint config {resume.config} differs from requested {backend_cfg}")
        params, opt, step = resume.params, resume.optimizer, resume.step
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state

    result = TrainResult(params, opt, step, rng)
    named = params.named()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    every = train_cfg.checkpoint_every

    while result.step < train_cfg.total_steps:
        step = result.step
        lr = cyclical_lr(step, train_cfg)
        triplets = [sample_triplet(store, rng) for _ in range(train_cfg.batch_size)]
        tensors = list(named.values())
        with dc.GradTape() as tape:
            loss = batch_loss(store, triplets, params, backend_cfg)
        grads = dict(zip(named, tape.backward(loss, tensors)))
        adam_step(named, grads, opt, lr, train_cfg)
        result.step += 1
        value = loss.item()
        result.trace.append((step, lr, value))
        if on_step is not None:
            on_step(step, lr, value)
        if ckpt_dir is not None and every and result.step % every == 0:
            save_checkpoint(ckpt_dir / checkpoint_name(result.step), params, backend_cfg, opt, result.step, rng)

    if ckpt_dir is not None:
        final = ckpt_dir / checkpoint_name(result.step)
        if not final.exists() or not every or result.step % every:
            save_checkpoint(final, params, backend_cfg, opt, result.step, rng)
    return result


def checkpoint_name(step: int) -> str:
    return f"checkpoint_{step:07d}.sckpt"


# --- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    config: BackendConfig
    params: BackendParams
    optimizer: OptimizerState
    step: int
    rng_state: dict


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(path, params: BackendParams, config: BackendConfig, optimizer: OptimizerState,
                    step: int, rng) -> None:
    check_params(params, config)
    named = params.named()
    tensors = [(name, t.data) for name, t in named.items()]
    tensors += [(f"adam.m/{name}", optimizer.m[name]) for name in named]
    tensors += [(f"adam.v/{name}", optimizer.v[name]) for name in named]
    state = rng.bit_generator.state if isinstance(rng, np.random.Generator) else rng
    blob = json.dumps(state, sort_keys=True).encode("utf-8")
    chunks = [
        CKPT_MAGIC,
        struct.pack("<I", CKPT_VERSION),
        _CONFIG.pack(config.input_dim, config.num_capsules, config.capsule_dim, config.routing_iters,
                     config.eps, int(config.use_primary_capsules), config.primary_channels,
                     int(config.trainable_logits)),
        struct.pack("<QQ", step, optimizer.step),
        struct.pack("<I", len(tensors)),
    ]
    chunks += [_pack_tensor(name, arr) for name, arr in tensors]
    chunks += [struct.pack("<I", len(blob)), blob]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint: need {n} bytes", offset=self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        st = struct.Struct(fmt)
        return st.unpack(self.take(st.size))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(len(CKPT_MAGIC))
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CKPT_MAGIC!r}", offset=0)
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(CKPT_MAGIC))
    cfg_at = r.pos
    D, J, K, iters, eps, prim, chans, trl = r.unpack(_CONFIG.format)
    try:
        config = BackendConfig(D, J, K, iters, eps, bool(prim), chans, bool(trl))
    except UsageError as exc:
        raise FormatError(f"invalid config block: {exc}", offset=cfg_at) from None
    step, adam_t = r.unpack("<QQ")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        at = r.pos
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8", errors="replace")
        (rank,) = r.unpack("<I")
        if rank > 8:
            raise FormatError(f"implausible rank {rank} for tensor {name!r}", offset=at)
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}", offset=at)
        tensors[name] = data
    (blob_len,) = r.unpack("<I")
    blob_at = r.pos
    try:
        rng_state = json.loads(r.take(blob_len).decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"corrupt RNG state: {exc}", offset=blob_at) from None
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after checkpoint", offset=r.pos)

    shapes = expected_shapes(config)
    want = set(shapes) | {f"adam.m/{k}" for k in shapes} | {f"adam.v/{k}" for k in shapes}
    if set(tensors) != want:
        raise FormatError(f"tensor table {sorted(tensors)} does not match config (expected {sorted(want)})")
    for name, shape in shapes.items():
        for key in (name, f"adam.m/{name}", f"adam.v/{name}"):
            if tensors[key].shape != shape:
                raise FormatError(f"tensor {key!r} has shape {tensors[key].shape}, config needs {shape}")

    params = BackendParams(**{k: Tensor(tensors[k], requires_grad=True) for k in shapes})
    opt = OptimizerState({k: tensors[f"adam.m/{k}"] for k in shapes},
                         {k: tensors[f"adam.v/{k}"] for k in shapes}, adam_t)
    return Checkpoint(config, params, opt, step, rng_state)
