import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siamcaps.embedio import (
    EmbeddingRecord,
    EmbeddingStore,
    SynthSpec,
    cosine_score,
    generate_synthetic,
    import_csv,
    read_store,
    write_store,
)
from siamcaps.errors import DataError, DimensionError, DomainError, FormatError

HEADER_BYTES = 20


def record_bytes(rec):
    return 2 + len(rec.utt_id.encode()) + 2 + len(rec.speaker_id.encode()) + 4 * rec.vector.size


class TestCosine:
    def test_fixtures(self):
        v = np.array([0.3, -1.2, 2.0])
        assert cosine_score(v, v) == pytest.approx(1.0, abs=1e-12)
        assert cosine_score([1.0, 0.0], [0.0, 1.0]) == 0.0
        assert cosine_score([1.0, 0.0], [1.0, 1.0]) == pytest.approx(math.sqrt(2) / 2, abs=1e-12)

    def test_zero_vector(self):
        with pytest.raises(DomainError):
            cosine_score([0.0, 0.0], [1.0, 0.0])

    @settings(max_examples=200)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_symmetry_and_scale(self, seed, alpha, beta):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=16), rng.normal(size=16)
        assert cosine_score(a, b) == cosine_score(b, a)
        assert cosine_score(alpha * a, beta * b) == pytest.approx(cosine_score(a, b), abs=1e-6)


class TestSynthetic:
    def test_zero_within_noise(self):
        store = generate_synthetic(SynthSpec(3, 4, 5, 1.0, 0.0, seed=1))
        for utts in store.speakers.values():
            first = store.vector(utts[0])
            for u in utts[1:]:
                assert store.vector(u).tobytes() == first.tobytes()

    def test_deterministic(self):
        spec = SynthSpec(4, 3, 8, 1.0, 0.5, seed=11)
        assert generate_synthetic(spec) == generate_synthetic(spec)
        assert generate_synthetic(spec) != generate_synthetic(SynthSpec(4, 3, 8, 1.0, 0.5, seed=12))

    def test_ids_and_layout(self):
        store = generate_synthetic(SynthSpec(2, 3, 4, seed=0))
        assert [r.utt_id for r in store][:4] == ["s0_u0", "s0_u1", "s0_u2", "s1_u0"]
        assert store.speaker_of("s1_u2") == "s1"
        assert len(store) == 6 and store.dim == 4

    def test_within_exceeds_between(self):
        store = generate_synthetic(SynthSpec(50, 20, 64, 1.0, 0.5, seed=7))
        rng = np.random.default_rng(0)
        spk = list(store.speakers)
        within, between = [], []
        for _ in range(1000):
            s = spk[rng.integers(len(spk))]
            a, b = rng.choice(store.speakers[s], size=2, replace=False)
            within.append(cosine_score(store.vector(a), store.vector(b)))
            s1, s2 = rng.choice(len(spk), size=2, replace=False)
            between.append(cosine_score(store.vector(store.speakers[spk[s1]][0]),
                                        store.vector(store.speakers[spk[s2]][0])))
        # margin: difference of means exceeds 5 standard errors
        diff = np.mean(within) - np.mean(between)
        se = math.sqrt(np.var(within) / 1000 + np.var(between) / 1000)
        assert diff > 5 * se

    @pytest.mark.parametrize("kw", [dict(num_speakers=1), dict(utterances_per_speaker=1), dict(dim=0),
                                    dict(between_speaker_std=0.0), dict(within_speaker_std=-1.0)])
    def test_invalid_spec(self, kw):
        base = dict(num_speakers=3, utterances_per_speaker=3, dim=2)
        base.update(kw)
        with pytest.raises(DataError):
            SynthSpec(**base)


class TestStoreFormat:
    def test_empty_store(self, tmp_path):
        path = tmp_path / "empty.semb"
        write_store(EmbeddingStore(4), path)
        assert path.stat().st_size == HEADER_BYTES
        assert path.read_bytes()[:4] == b"SEMB"
        assert read_store(path) == EmbeddingStore(4)

    def test_single_record_with_signed_zero(self, tmp_path):
        vec = np.array([-0.0, 0.0, 1.5, -2.25e-30], dtype=np.float32)
        store = EmbeddingStore(4, [EmbeddingRecord("utt-é", "spk", vec)])
        path = tmp_path / "one.semb"
        write_store(store, path)
        back = read_store(path)
        assert back == store
        assert np.signbit(back.records[0].vector[0])

    def test_header_layout(self, tmp_path):
        store = generate_synthetic(SynthSpec(2, 2, 3, seed=0))
        path = tmp_path / "s.semb"
        write_store(store, path)
        magic, version, count, dim = struct.unpack_from("<4sIQI", path.read_bytes())
        assert (magic, version, count, dim) == (b"SEMB", 1, 4, 3)

    def test_large_store_size(self, tmp_path):
        store = generate_synthetic(SynthSpec(50, 20, 4096, seed=3))
        path = tmp_path / "big.semb"
        write_store(store, path)
        assert path.stat().st_size == HEADER_BYTES + sum(record_bytes(r) for r in store)
        assert read_store(path) == store

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.semb"
        write_store(generate_synthetic(SynthSpec(2, 2, 3, seed=0)), path)
        raw = bytearray(path.read_bytes())
        raw[0:4] = b"XEMB"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="offset 0"):
            read_store(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.semb"
        write_store(generate_synthetic(SynthSpec(2, 2, 3, seed=0)), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(FormatError) as err:
            read_store(path)
        assert err.value.offset is not None

    def test_dimension_overflow(self, tmp_path):
        path = tmp_path / "o.semb"
        path.write_bytes(struct.pack("<4sIQI", b"SEMB", 1, 10, 2**31))
        with pytest.raises(FormatError, match="exceeds file size"):
            read_store(path)

    def test_store_invariants(self):
        v = np.zeros(2, np.float32)
        with pytest.raises(DataError):
            EmbeddingStore(2, [EmbeddingRecord("a", "s", v), EmbeddingRecord("a", "s", v)])
        with pytest.raises(DimensionError):
            EmbeddingStore(3, [EmbeddingRecord("a", "s", v)])
        with pytest.raises(DataError):
            EmbeddingRecord("", "s", v)


class TestCsvImport:
    def test_single_line(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("u1,s1,1.0,2.0\n")
        store = import_csv(path, 2)
        assert len(store) == 1
        assert store.vector("u1").tolist() == [1.0, 2.0]

    def test_wrong_field_count_reports_line(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("u1,s1,1.0,2.0\nu2,s1,1.0,2.0,3.0\n")
        with pytest.raises(DataError, match="line 2"):
            import_csv(path, 2)

    def test_bad_number(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("u1,s1,1.0,abc\n")
        with pytest.raises(DataError, match="line 1"):
            import_csv(path, 2)

    def test_external_512_dim_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        vecs = rng.normal(size=(6, 512)).astype(np.float32)
        lines = [",".join([f"utt{i}", f"spk{i % 3}"] + [repr(float(x)) for x in v]) for i, v in enumerate(vecs)]
        csv_path = tmp_path / "ext.csv"
        csv_path.write_text("\n".join(lines) + "\n")
        store = import_csv(csv_path, 512)
        np.testing.assert_array_equal(store.matrix, vecs)
        write_store(store, tmp_path / "ext.semb")
        assert read_store(tmp_path / "ext.semb") == store
        assert -1.0 <= cosine_score(store.vector("utt0"), store.vector("utt1")) <= 1.0
