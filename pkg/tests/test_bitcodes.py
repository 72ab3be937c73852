import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hashkv.bitcodes import (
    CodeMatrix,
    HashCode,
    load_codes,
    nxor_score_matrix,
    nxor_scores,
    pack_bits,
    save_codes,
    top_k_indices,
    unpack_bits,
)
from hashkv.errors import FormatError, ShapeError, TruncatedFileError


def reference_pack(bits):
    """Literal transcription of the chunk/shift/or packing loop."""
    n, d = bits.shape
    w = d // 32
    out = [[0] * w for _ in range(n)]
    for c in range(32):
        chunk = bits[:, c * w:(c + 1) * w]
        for i in range(n):
            for j in range(w):
                out[i][j] = ((out[i][j] << 1) | int(chunk[i, j])) & 0xFFFFFFFF
    return np.array(out, dtype=np.uint32)


def pm1(bits):
    return np.where(bits, 1, -1).astype(np.int64)


class TestPack:
    def test_single_msb(self):
        bits = np.zeros((1, 32), bool)
        bits[0, 0] = True
        assert pack_bits(bits).data.tolist() == [[0x80000000]]
        assert reference_pack(bits).tolist() == [[0x80000000]]

    def test_zero(self):
        assert pack_bits(np.zeros((1, 32), bool)).data.tolist() == [[0]]

    def test_two_word_layout(self):
        bits = np.zeros((1, 64), bool)
        bits[0, 1] = True
        assert reference_pack(bits).tolist() == [[0x00000000, 0x80000000]]
        assert pack_bits(bits).data.tolist() == [[0x00000000, 0x80000000]]

    @pytest.mark.parametrize("d", [31, 33, 0, 48])
    def test_rejects_bad_width(self, d):
        with pytest.raises(ShapeError):
            pack_bits(np.zeros((2, d), bool))

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(3)
        for d in (32, 64, 128, 256):
            bits = rng.random((7, d)) < 0.5
            np.testing.assert_array_equal(pack_bits(bits).data, reference_pack(bits))


class TestUnpack:
    def test_all_ones(self):
        codes = CodeMatrix(np.array([[0xFFFFFFFF]], dtype=np.uint32), 32)
        assert unpack_bits(codes).tolist() == [[True] * 32]

    def test_inverse_of_two_word_example(self):
        codes = CodeMatrix(np.array([[0x00000000, 0x80000000]], dtype=np.uint32), 64)
        expected = np.zeros((1, 64), bool)
        expected[0, 1] = True
        np.testing.assert_array_equal(unpack_bits(codes), expected)

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_roundtrip(self, n, words, seed):
        bits = np.random.default_rng(seed).random((n, 32 * words)) < 0.5
        np.testing.assert_array_equal(unpack_bits(pack_bits(bits)), bits)


class TestNxor:
    def test_identical(self):
        rng = np.random.default_rng(0)
        codes = pack_bits(rng.random((5, 128)) < 0.5)
        scores = nxor_scores(codes.row(2), codes)
        assert scores[2] == 128

    def test_complement(self):
        rng = np.random.default_rng(1)
        bits = rng.random((1, 64)) < 0.5
        index = pack_bits(bits)
        query = pack_bits(~bits).row(0)
        assert nxor_scores(query, index).tolist() == [0]

    def test_four_bit_example(self):
        q, r = np.array([1, 0, 1, 0], bool), np.array([1, 0, 0, 1], bool)
        m = int(np.sum(q == r))  # brute force per bit
        assert m == 2
        assert 2 * m - 4 == int(pm1(q) @ pm1(r)) == 0
        # pad both to one 32-bit word with identical zeros: 28 extra agreements
        pad = np.zeros(28, bool)
        qc = pack_bits(np.concatenate([q, pad])[None]).row(0)
        rc = pack_bits(np.concatenate([r, pad])[None])
        assert nxor_scores(qc, rc).tolist() == [m + 28]

    def test_length_mismatch(self):
        a = pack_bits(np.zeros((1, 32), bool))
        b = pack_bits(np.zeros((3, 64), bool))
        with pytest.raises(ShapeError):
            nxor_scores(a.row(0), b)

    def test_affine_identity_random(self):
        rng = np.random.default_rng(7)
        for L in (32, 64, 128, 256):
            bits = rng.random((200, L)) < 0.5
            qbits = rng.random((1, L)) < 0.5
            m = nxor_scores(pack_bits(qbits).row(0), pack_bits(bits))
            np.testing.assert_array_equal(2 * m.astype(np.int64) - L, pm1(bits) @ pm1(qbits[0]))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(11)
        L = 128
        bits = rng.random((50, L)) < 0.5
        qbits = rng.random((1, L)) < 0.5
        perm = rng.permutation(L)
        base = nxor_scores(pack_bits(qbits).row(0), pack_bits(bits))
        permuted = nxor_scores(pack_bits(qbits[:, perm]).row(0), pack_bits(bits[:, perm]))
        np.testing.assert_array_equal(base, permuted)

    def test_score_matrix_matches_rows(self):
        rng = np.random.default_rng(5)
        index = pack_bits(rng.random((300, 96)) < 0.5)
        queries = pack_bits(rng.random((20, 96)) < 0.5)
        full = nxor_score_matrix(queries, index, block=7)
        for i in range(20):
            np.testing.assert_array_equal(full[i], nxor_scores(queries.row(i), index))
        assert full.dtype == np.int32

    def test_hashcode_validates_length(self):
        with pytest.raises(ShapeError):
            HashCode(np.zeros(2, np.uint32), 32)


def sort_oracle(scores, k):
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]


class TestTopK:
    def test_unique_max(self):
        assert top_k_indices([3, 1, 2], 1).tolist() == [0]

    def test_tie_goes_to_lower_index(self):
        assert top_k_indices([2, 2, 1], 1).tolist() == [0]

    def test_full_set(self):
        assert sorted(top_k_indices([5, 1, 4, 4], 4).tolist()) == [0, 1, 2, 3]

    @pytest.mark.parametrize("k", [0, 4])
    def test_out_of_range(self, k):
        with pytest.raises(ValueError):
            top_k_indices([1, 2, 3], k)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.integers(0, 8), min_size=1, max_size=200), st.data())
    def test_matches_full_sort(self, scores, data):
        k = data.draw(st.integers(1, len(scores)))
        assert top_k_indices(scores, k).tolist() == sort_oracle(scores, k)

    def test_large_random_against_sort(self):
        rng = np.random.default_rng(0)
        for n in (10, 1000, 10_000):
            scores = rng.integers(0, 129, size=n)
            for k in sorted({1, min(20, n), max(1, n // 3), n}):
                expected = np.lexsort((np.arange(n), -scores))[:k]
                np.testing.assert_array_equal(top_k_indices(scores, k), expected)

    def test_float_with_neg_inf(self):
        scores = np.array([0.5, -np.inf, 0.5, 2.0, -np.inf])
        assert top_k_indices(scores, 4).tolist() == [3, 0, 2, 1]


class TestCodeFile:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        codes = pack_bits(rng.random((17, 128)) < 0.5)
        path = tmp_path / "codes.splc"
        save_codes(path, codes)
        raw = path.read_bytes()
        assert raw[:4] == b"SPLC"
        assert len(raw) == 16 + 17 * 4 * 4
        assert load_codes(path) == codes

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "codes.splc"
        save_codes(path, pack_bits(np.zeros((2, 32), bool)))
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(FormatError, match="offset 0"):
            load_codes(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "codes.splc"
        save_codes(path, pack_bits(np.zeros((4, 64), bool)))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(TruncatedFileError):
            load_codes(path)
