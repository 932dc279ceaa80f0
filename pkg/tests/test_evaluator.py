import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siamcaps.capsbackend import BackendConfig, init_params
from siamcaps.embedio import SynthSpec, generate_synthetic
from siamcaps.errors import DataError, DomainError
from siamcaps.evaluator import (
    CapsuleScorer,
    CosineScorer,
    ScoreRecord,
    TrialRecord,
    compute_eer,
    det_points,
    make_trials,
    read_scores,
    read_trials,
    score_trials,
    split_heldout,
    write_scores,
    write_trials,
)

from .oracles import brute_force_eer

FIXTURE_SCORES = np.array([0.9, 0.8, 0.4, 0.7, 0.3, 0.2])
FIXTURE_LABELS = np.array([1, 1, 1, 0, 0, 0])


def records(scores, labels):
    return [ScoreRecord(TrialRecord(int(y), f"e{k}", f"t{k}"), float(s)) for k, (s, y) in enumerate(zip(scores, labels))]


class TestTrialList:
    def test_single_positive(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_text("1 u1 u2\n")
        assert read_trials(p) == [TrialRecord(1, "u1", "u2")]

    @pytest.mark.parametrize("line", ["2 u1 u2", "1 u1", "1  u1 u2", "x u1 u2", "1 u1 u2 u3"])
    def test_malformed(self, tmp_path, line):
        p = tmp_path / "t.txt"
        p.write_text("0 a b\n" + line + "\n")
        with pytest.raises(DataError, match="line 2"):
            read_trials(p)

    def test_large_list_keeps_order(self, tmp_path):
        rng = np.random.default_rng(0)
        trials = [TrialRecord(int(rng.integers(2)), f"id{k}/a.wav", f"id{k + 1}/b.wav") for k in range(37_720)]
        p = tmp_path / "veri.txt"
        write_trials(trials, p)
        back = read_trials(p)
        assert len(back) == 37_720 and back == trials

    def test_make_trials_balanced(self):
        store = generate_synthetic(SynthSpec(10, 6, 4, seed=0))
        _, held = split_heldout(store, 4)
        trials = make_trials(held, 200, seed=1)
        assert sum(t.label for t in trials) == 100
        for t in trials:
            same = held.speaker_of(t.enroll_utt) == held.speaker_of(t.test_utt)
            assert same == bool(t.label)
            assert t.enroll_utt != t.test_utt
        assert make_trials(held, 200, seed=1) == trials

    def test_split_heldout(self):
        store = generate_synthetic(SynthSpec(3, 5, 2, seed=0))
        train, held = split_heldout(store, 2)
        assert len(train) == 9 and len(held) == 6
        assert not set(r.utt_id for r in train) & set(r.utt_id for r in held)
        with pytest.raises(DataError):
            split_heldout(store, 5)


@pytest.fixture(scope="module")
def store():
    return generate_synthetic(SynthSpec(4, 3, 6, seed=2))


class TestScoring:
    def test_cosine_identical(self, store):
        out = score_trials([TrialRecord(1, "s0_u0", "s0_u0")], store, CosineScorer())
        assert out[0].score == pytest.approx(1.0, abs=1e-12)

    def test_capsule_zero_head(self, store):
        cfg = BackendConfig(input_dim=6, num_capsules=2, capsule_dim=3)
        scorer = CapsuleScorer(init_params(cfg, 0), cfg)
        trials = make_trials(store, 20, seed=0)
        assert all(r.score == 0.5 for r in score_trials(trials, store, scorer))

    def test_order_and_determinism(self, store):
        cfg = BackendConfig(input_dim=6, num_capsules=2, capsule_dim=3)
        scorer = CapsuleScorer(init_params(cfg, 3, head_scale=0.5), cfg, batch_size=7)
        trials = make_trials(store, 40, seed=4)
        a = score_trials(trials, store, scorer)
        b = score_trials(trials, store, scorer)
        assert [r.trial for r in a] == trials
        assert [r.score for r in a] == [r.score for r in b]

    def test_missing_utterance(self, store):
        with pytest.raises(DataError, match="nope"):
            score_trials([TrialRecord(1, "s0_u0", "nope")], store, CosineScorer())

    def test_score_file_roundtrip(self, tmp_path, store):
        recs = score_trials(make_trials(store, 10, seed=0), store, CosineScorer())
        write_scores(recs, tmp_path / "s.txt")
        lines = (tmp_path / "s.txt").read_text().splitlines()
        assert all(len(line.split(" ")[2].split(".")[1]) == 6 for line in lines)
        rows = read_scores(tmp_path / "s.txt")
        assert [(e, t) for e, t, _ in rows] == [(r.trial.enroll_utt, r.trial.test_utt) for r in recs]


class TestEER:
    def test_perfect_separation(self):
        eer, thr = compute_eer(records([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]))
        assert eer == 0.0
        assert 0.2 < thr <= 0.8

    def test_three_vs_three_fixture(self):
        eer, thr = compute_eer(records(FIXTURE_SCORES, FIXTURE_LABELS))
        assert eer == pytest.approx(1 / 3, abs=1e-12)
        assert f"{100 * eer:.2f}" == "33.33"
        assert thr == pytest.approx(0.7)

    def test_label_independent_scores(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=10_000)
        labels = rng.integers(0, 2, size=10_000)
        eer, _ = compute_eer((scores, labels))
        assert abs(eer - 0.5) <= 0.03

    def test_single_class(self):
        with pytest.raises(DomainError):
            compute_eer(records([0.1, 0.2], [1, 1]))
        with pytest.raises(DomainError):
            det_points(records([0.1, 0.2], [0, 0]))

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 300))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        scores = np.round(rng.normal(size=n) + labels * rng.uniform(0, 2), int(rng.integers(1, 4)))
        eer, _ = compute_eer((scores, labels))
        assert eer == pytest.approx(brute_force_eer(scores.tolist(), labels.tolist()), abs=1e-12)

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_rank_statistic_and_permutation(self, seed):
        rng = np.random.default_rng(seed)
        n = 60
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = rng.normal(size=n) + labels
        base, _ = compute_eer((scores, labels))
        assert compute_eer((np.exp(3 * scores) + 1, labels))[0] == pytest.approx(base, abs=1e-12)
        perm = rng.permutation(n)
        assert compute_eer((scores[perm], labels[perm]))[0] == base

    def test_duplicate_trial_changes_eer_smoothly(self):
        rng = np.random.default_rng(3)
        labels = np.r_[np.ones(50, int), np.zeros(50, int)]
        scores = rng.normal(size=100) + labels
        base, _ = compute_eer((scores, labels))
        for k in range(100):
            dup_s = np.r_[scores, scores[k], scores[k]]
            dup_l = np.r_[labels, labels[k], labels[k]]
            eer, _ = compute_eer((dup_s, dup_l))
            assert abs(eer - base) <= 2 / 50


class TestDET:
    def test_two_trials(self):
        pts = det_points(records([1.0, 0.0], [1, 0]))
        assert pts == [(1.0, 0.0), (0.0, 0.0)]

    def test_all_equal_scores(self):
        assert len(det_points(records([0.5] * 6, [1, 0, 1, 0, 1, 0]))) == 1

    def test_monotone_and_brackets_eer(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 2, size=100)
        labels[:2] = [0, 1]
        scores = rng.normal(size=100) + labels
        pts = det_points((scores, labels))
        far = np.array([p[0] for p in pts])
        frr = np.array([p[1] for p in pts])
        assert np.all(np.diff(far) <= 0) and np.all(np.diff(frr) >= 0)
        eer, _ = compute_eer((scores, labels))
        curve = list(pts) + [(0.0, 1.0)]
        bracketed = any(
            min(a[0], b[0]) <= eer <= max(a[0], b[0]) and min(a[1], b[1]) <= eer <= max(a[1], b[1])
            for a, b in zip(curve, curve[1:])
        )
        assert bracketed
