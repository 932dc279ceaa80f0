"""Speaker-embedding storage, synthetic generation and the cosine baseline.

Binary store layout (little-endian)::

    b"SEMB" | version u32 (=1) | record count u64 | dim u32
    per record: u16 len + utt_id UTF-8 | u16 len + speaker_id UTF-8 | dim x f32
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import Tensor
from .errors import DataError, DimensionError, DomainError, FormatError

STORE_MAGIC = b"SEMB"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sIQI")
_U16 = struct.Struct("<H")


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    utt_id: str
    speaker_id: str
    vector: np.ndarray

    def __post_init__(self):
        if not self.utt_id or not self.speaker_id:
            raise DataError("utt_id and speaker_id must be non-empty")
        vec = np.asarray(self.vector, dtype=np.float32)
        if vec.ndim != 1:
            raise DimensionError(f"embedding for {self.utt_id!r} must be 1-d, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise DataError(f"embedding for {self.utt_id!r} has non-finite values")
        object.__setattr__(self, "vector", vec)


class EmbeddingStore:
    """Ordered, immutable collection of equal-dimension embeddings."""

    def __init__(self, dim: int, records=()):
        self.dim = int(dim)
        self.records: tuple[EmbeddingRecord, ...] = tuple(records)
        self._index: dict[str, int] = {}
        self.speakers: dict[str, list[str]] = {}
        for k, rec in enumerate(self.records):
            if rec.vector.shape != (self.dim,):
                raise DimensionError(f"record {rec.utt_id!r} has dimension {rec.vector.shape[0]}, store has {self.dim}")
            if rec.utt_id in self._index:
                raise DataError(f"duplicate utt_id {rec.utt_id!r}")
            self._index[rec.utt_id] = k
            self.speakers.setdefault(rec.speaker_id, []).append(rec.utt_id)
        self._matrix = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __contains__(self, utt_id):
        return utt_id in self._index

    def __eq__(self, other):
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        if self.dim != other.dim or len(self) != len(other):
            return False
        return all(
            a.utt_id == b.utt_id and a.speaker_id == b.speaker_id and a.vector.tobytes() == b.vector.tobytes()
            for a, b in zip(self.records, other.records)
        )

    def __repr__(self):
        return f"EmbeddingStore(dim={self.dim}, records={len(self)}, speakers={len(self.speakers)})"

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.stack([r.vector for r in self.records]) if self.records else np.zeros((0, self.dim), np.float32)
            self._matrix.setflags(write=False)
        return self._matrix

    def index_of(self, utt_id: str) -> int:
        try:
            return self._index[utt_id]
        except KeyError:
            raise DataError(f"utterance {utt_id!r} not found in store") from None

    def vector(self, utt_id: str) -> np.ndarray:
        return self.records[self.index_of(utt_id)].vector

    def speaker_of(self, utt_id: str) -> str:
        return self.records[self.index_of(utt_id)].speaker_id

    def subset(self, utt_ids) -> "EmbeddingStore":
        return EmbeddingStore(self.dim, [self.records[self.index_of(u)] for u in utt_ids])


@dataclass(frozen=True)
class SynthSpec:
    num_speakers: int
    utterances_per_speaker: int
    dim: int
    between_speaker_std: float = 1.0
    within_speaker_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 2 or self.utterances_per_speaker < 2 or self.dim < 1:
            raise DataError("synthetic spec needs >= 2 speakers, >= 2 utterances each and dim >= 1")
        if not self.between_speaker_std > 0 or not self.within_speaker_std >= 0:
            raise DataError("between_speaker_std must be > 0 and within_speaker_std >= 0")


def generate_synthetic(spec: SynthSpec) -> EmbeddingStore:
    """Gaussian speakers: ``mean_s ~ N(0, sb^2 I)``, utterance = mean_s + ``N(0, sw^2 I)``."""
    rng = np.random.default_rng(spec.seed)
    S, U, D = spec.num_speakers, spec.utterances_per_speaker, spec.dim
    means = rng.normal(0.0, spec.between_speaker_std, size=(S, D))
    noise = rng.normal(0.0, 1.0, size=(S, U, D)) * spec.within_speaker_std
    vectors = (means[:, None, :] + noise).astype(np.float32)
    records = [
        EmbeddingRecord(f"s{s}_u{u}", f"s{s}", vectors[s, u])
        for s in range(S)
        for u in range(U)
    ]
    return EmbeddingStore(D, records)


def cosine_score(v1, v2) -> float:
    a = np.asarray(v1.data if isinstance(v1, Tensor) else v1, dtype=np.float64)
    b = np.asarray(v2.data if isinstance(v2, Tensor) else v2, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_score dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("cosine_score is undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def write_store(store: EmbeddingStore, path) -> None:
    chunks = [_HEADER.pack(STORE_MAGIC, STORE_VERSION, len(store), store.dim)]
    for rec in store.records:
        for text in (rec.utt_id, rec.speaker_id):
            raw = text.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise DataError(f"identifier too long for store format: {text[:40]!r}...")
            chunks.append(_U16.pack(len(raw)))
            chunks.append(raw)
        chunks.append(rec.vector.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_store(path) -> EmbeddingStore:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError("truncated store header", offset=len(buf))
    magic, version, count, dim = _HEADER.unpack_from(buf, 0)
    if magic != STORE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {STORE_MAGIC!r}", offset=0)
    if version != STORE_VERSION:
        raise FormatError(f"unsupported store version {version}", offset=4)
    pos = _HEADER.size
    vec_bytes = 4 * dim
    # every record needs at least two length prefixes and its vector
    if count * (4 + vec_bytes) > len(buf) - pos:
        raise FormatError(f"record count {count} x dim {dim} exceeds file size {len(buf)}", offset=8)

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated store: need {n} bytes", offset=pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    records = []
    for _ in range(count):
        ids = []
        for _field in range(2):
            (n,) = _U16.unpack(take(2))
            start = pos
            try:
                ids.append(take(n).decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise FormatError(f"invalid UTF-8 identifier: {exc}", offset=start) from None
        start = pos
        vec = np.frombuffer(take(vec_bytes), dtype="<f4").astype(np.float32)
        try:
            records.append(EmbeddingRecord(ids[0], ids[1], vec))
        except DataError as exc:
            raise FormatError(str(exc), offset=start) from None
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last record", offset=pos)
    return EmbeddingStore(dim, records)


def import_csv(path, dim: int) -> EmbeddingStore:
    """Read ``utt_id,speaker_id,f1,...,fD`` lines; blank lines are skipped."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != dim + 2:
                raise DataError(f"line {lineno}: expected {dim + 2} fields (utt, speaker, {dim} values), got {len(row)}")
            try:
                vec = np.array([float(v) for v in row[2:]], dtype=np.float32)
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
            try:
                records.append(EmbeddingRecord(row[0].strip(), row[1].strip(), vec))
            except DataError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    try:
        return EmbeddingStore(dim, records)
    except (DataError, DimensionError) as exc:
        raise DataError(f"{path}: {exc}") from None
