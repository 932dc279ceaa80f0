"""Verification trials, scoring and equal error rate."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .capsbackend import BackendConfig, BackendParams, score
from .diffcore import Tensor
from .embedio import EmbeddingStore
from .errors import DataError, DomainError


@dataclass(frozen=True)
class TrialRecord:
    label: int
    enroll_utt: str
    test_utt: str


@dataclass(frozen=True)
class ScoreRecord:
    trial: TrialRecord
    score: float


def read_trials(path) -> list[TrialRecord]:
    """Parse ``label enroll test`` lines (single-space separated, label 0 or 1)."""
    trials = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split(" ")
            if len(fields) != 3 or not all(fields):
                raise DataError(f"line {lineno}: expected 'label enroll test', got {line!r}")
            if fields[0] not in ("0", "1"):
                raise DataError(f"line {lineno}: label must be 0 or 1, got {fields[0]!r}")
            trials.append(TrialRecord(int(fields[0]), fields[1], fields[2]))
    return trials


def write_trials(trials, path) -> None:
    Path(path).write_text("".join(f"{t.label} {t.enroll_utt} {t.test_utt}\n" for t in trials), encoding="utf-8")


def make_trials(store: EmbeddingStore, num_trials: int, seed: int = 0) -> list[TrialRecord]:
    """Balanced trial list over ``store``: half same-speaker, half different-speaker.

    Positives cycle through every ordered same-speaker pair (shuffled) before
    repeating; negatives pick two distinct speakers, then one utterance each.
    """
    if num_trials < 2 or num_trials % 2:
        raise DataError(f"num_trials must be an even number >= 2, got {num_trials}")
    rng = np.random.default_rng(seed)
    speakers = list(store.speakers)
    ordered = [(a, b) for s in speakers for a in store.speakers[s] for b in store.speakers[s] if a != b]
    if not ordered or len(speakers) < 2:
        raise DataError("trial generation needs >= 2 speakers and one with >= 2 utterances")
    half = num_trials // 2
    positives = []
    while len(positives) < half:
        perm = rng.permutation(len(ordered))
        positives.extend(ordered[k] for k in perm[: half - len(positives)])
    negatives = []
    for _ in range(half):
        i, j = rng.choice(len(speakers), size=2, replace=False)
        ua = store.speakers[speakers[i]]
        ub = store.speakers[speakers[j]]
        negatives.append((ua[rng.integers(len(ua))], ub[rng.integers(len(ub))]))
    trials = [TrialRecord(1, a, b) for a, b in positives] + [TrialRecord(0, a, b) for a, b in negatives]
    return [trials[k] for k in rng.permutation(len(trials))]


def split_heldout(store: EmbeddingStore, heldout_per_speaker: int) -> tuple[EmbeddingStore, EmbeddingStore]:
    """Last ``heldout_per_speaker`` utterances of each speaker go to the held-out store."""
    train_ids, held_ids = [], []
    for utts in store.speakers.values():
        if len(utts) <= heldout_per_speaker:
            raise DataError(f"speaker with {len(utts)} utterances cannot hold out {heldout_per_speaker}")
        train_ids += utts[: len(utts) - heldout_per_speaker]
        held_ids += utts[len(utts) - heldout_per_speaker:]
    return store.subset(train_ids), store.subset(held_ids)


# --- scorers ----------------------------------------------------------------


class CosineScorer:
    name = "cosine"

    def score_pairs(self, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
        a = enroll.astype(np.float64)
        b = test.astype(np.float64)
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        if np.any(na == 0) or np.any(nb == 0):
            raise DomainError("cosine score is undefined for a zero embedding")
        return np.einsum("bd,bd->b", a, b) / (na * nb)


class CapsuleScorer:
    name = "capsule"

    def __init__(self, params: BackendParams, config: BackendConfig, batch_size: int = 256):
        self.params = params
        self.config = config
        self.batch_size = batch_size

    def score_pairs(self, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
        out = []
        for start in range(0, len(enroll), self.batch_size):
            stop = start + self.batch_size
            s = score(Tensor(enroll[start:stop]), Tensor(test[start:stop]), self.params, self.config)
            out.append(s.data.astype(np.float64))
        return np.concatenate(out) if out else np.zeros(0)


def score_trials(trials, store: EmbeddingStore, scorer) -> list[ScoreRecord]:
    missing = [u for t in trials for u in (t.enroll_utt, t.test_utt) if u not in store]
    if missing:
        raise DataError(f"utterance {missing[0]!r} not found in store ({len(set(missing))} missing)")
    mat = store.matrix
    enroll = mat[[store.index_of(t.enroll_utt) for t in trials]]
    test = mat[[store.index_of(t.test_utt) for t in trials]]
    scores = scorer.score_pairs(enroll, test)
    return [ScoreRecord(t, float(s)) for t, s in zip(trials, scores)]


def write_scores(records, path) -> None:
    Path(path).write_text(
        "".join(f"{r.trial.enroll_utt} {r.trial.test_utt} {r.score:.6f}\n" for r in records), encoding="utf-8"
    )


def read_scores(path) -> list[tuple[str, str, float]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 3:
                raise DataError(f"line {lineno}: expected 'enroll test score', got {line.rstrip()!r}")
            try:
                rows.append((fields[0], fields[1], float(fields[2])))
            except ValueError:
                raise DataError(f"line {lineno}: bad score {fields[2]!r}") from None
    return rows


# --- error rates ------------------------------------------------------------


def _split(scores) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scores, tuple) and len(scores) == 2 and not isinstance(scores[0], ScoreRecord):
        values, labels = (np.asarray(x) for x in scores)
    else:
        values = np.array([r.score for r in scores], dtype=np.float64)
        labels = np.array([r.trial.label for r in scores])
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pos, neg = values[labels == 1], values[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise DomainError("error rates need at least one positive and one negative trial")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise DomainError("scores must be finite")
    return pos, neg


def _rates(pos: np.ndarray, neg: np.ndarray):
    thresholds = np.unique(np.concatenate([pos, neg]))
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    # FAR(t): negatives accepted (score >= t); FRR(t): positives rejected (score < t)
    far = 1.0 - np.searchsorted(neg_sorted, thresholds, side="left") / len(neg)
    frr = np.searchsorted(pos_sorted, thresholds, side="left") / len(pos)
    return thresholds, far, frr


def det_points(scores) -> list[tuple[float, float]]:
    """``(FAR, FRR)`` at every distinct score threshold, in ascending threshold order.

    ``scores`` is a list of :class:`ScoreRecord` or a ``(values, labels)`` tuple.
    """
    _, far, frr = _rates(*_split(scores))
    return list(zip(far.tolist(), frr.tolist()))


def compute_eer(scores) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Thresholds are the distinct observed scores plus one point above the
    maximum (FAR 0, FRR 1).  The first threshold with FRR >= FAR is taken;
    when the two rates are not equal there, the crossing is linearly
    interpolated from the preceding threshold.
    """
    pos, neg = _split(scores)
    thresholds, far, frr = _rates(pos, neg)
    top = np.nextafter(thresholds[-1], np.inf)
    thresholds = np.append(thresholds, top)
    far = np.append(far, 0.0)
    frr = np.append(frr, 1.0)

    k = int(np.argmax(frr >= far))
    if frr[k] == far[k] or k == 0:
        return float(far[k]), float(thresholds[k])
    d0 = far[k - 1] - frr[k - 1]
    d1 = far[k] - frr[k]
    alpha = d0 / (d0 - d1)
    eer = far[k - 1] + alpha * (far[k] - far[k - 1])
    threshold = thresholds[k - 1] + alpha * (thresholds[k] - thresholds[k - 1])
    return float(eer), float(threshold)
