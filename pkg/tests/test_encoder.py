import numpy as np
import pytest

from helpers import central_difference, max_rel_error, random_token_batch

from dualmoco.encoder import (
    EncoderParams,
    Pooling,
    encode,
    encode_backward,
    encode_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from dualmoco.errors import (
    CorpusParseError,
    ShapeMismatchError,
    TokenOutOfRangeError,
    ZeroVectorError,
)
from dualmoco.numerics import l2_normalize


@pytest.fixture
def params():
    return init_params(vocab_size=10, d_emb=4, d_out=3, rng=np.random.default_rng(0))


class TestEncodeForward:
    def test_single_token_mean_equals_first(self, params):
        # mean pooling over one token is that token's embedding row, i.e.
        # exactly the first-token pooled vector
        for t in range(params.vocab_size):
            np.testing.assert_array_equal(
                encode(params, [t], Pooling.MEAN), encode(params, [t], Pooling.FIRST)
            )

    def test_max_pooling_elementwise(self):
        # rows 0,1 pool (elementwise max) to exactly row 2
        embedding = np.array([[1.0, -2.0], [3.0, 0.0], [3.0, 0.0], [0.0, 0.0]])
        params = EncoderParams(embedding, np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(
            encode(params, [0, 1], Pooling.MAX), encode(params, [2], Pooling.MEAN)
        )

    def test_output_unit_norm(self, params):
        rng = np.random.default_rng(1)
        for tokens in random_token_batch(rng, 30, params.vocab_size):
            for pooling in Pooling:
                h = encode(params, tokens, pooling)
                assert abs(np.linalg.norm(h) - 1.0) <= 1e-12
                assert h.shape == (params.d_out,)

    def test_matches_stated_composition(self, params):
        tokens = [2, 5, 5, 7]
        pooled = params.embedding[tokens].mean(axis=0)
        expected = l2_normalize(np.tanh(pooled @ params.proj_w + params.proj_b))
        np.testing.assert_array_equal(encode(params, tokens, Pooling.MEAN), expected)

    def test_token_out_of_range(self, params):
        with pytest.raises(TokenOutOfRangeError):
            encode(params, [0, 10], Pooling.MEAN)
        with pytest.raises(TokenOutOfRangeError):
            encode(params, [-1], Pooling.MEAN)
        with pytest.raises(TokenOutOfRangeError):
            encode(params, [], Pooling.MEAN)

    def test_zero_vector_with_contrived_params(self):
        params = EncoderParams(np.zeros((4, 3)), np.zeros((3, 2)), np.zeros(2))
        with pytest.raises(ZeroVectorError):
            encode(params, [0], Pooling.MEAN)

    def test_pooling_accepts_strings(self, params):
        np.testing.assert_array_equal(
            encode(params, [1, 2], "mean"), encode(params, [1, 2], Pooling.MEAN)
        )

    def test_permutation_invariance_of_mean_and_max(self, params):
        rng = np.random.default_rng(3)
        tokens = [1, 4, 7, 2]
        base_max = encode(params, tokens, Pooling.MAX)
        base_mean = encode(params, tokens, Pooling.MEAN)
        for _ in range(5):
            shuffled = [tokens[i] for i in rng.permutation(len(tokens))]
            # elementwise max is exactly order-free; mean only up to
            # float summation order
            np.testing.assert_array_equal(base_max, encode(params, shuffled, Pooling.MAX))
            np.testing.assert_allclose(base_mean, encode(params, shuffled, Pooling.MEAN), atol=1e-12)

    def test_first_token_is_order_sensitive(self, params):
        a = encode(params, [1, 4], Pooling.FIRST)
        b = encode(params, [4, 1], Pooling.FIRST)
        assert np.max(np.abs(a - b)) > 1e-6

    def test_deterministic(self, params):
        a = encode(params, [3, 1, 3], Pooling.MAX)
        b = encode(params, [3, 1, 3], Pooling.MAX)
        np.testing.assert_array_equal(a, b)


class TestEncodeBatch:
    def test_empty_batch(self, params):
        out = encode_batch(params, [], Pooling.MEAN)
        assert out.shape == (0, params.d_out)

    def test_singleton_matches_encode(self, params):
        tokens = [4, 4, 9]
        np.testing.assert_array_equal(
            encode_batch(params, [tokens], Pooling.MEAN)[0], encode(params, tokens, Pooling.MEAN)
        )

    def test_rows_match_encode_bitwise(self, params):
        rng = np.random.default_rng(5)
        batch = random_token_batch(rng, 16, params.vocab_size)
        for pooling in Pooling:
            out = encode_batch(params, batch, pooling)
            assert out.shape == (16, params.d_out)
            for i, tokens in enumerate(batch):
                np.testing.assert_array_equal(out[i], encode(params, tokens, pooling))

    def test_error_carries_batch_index(self, params):
        with pytest.raises(TokenOutOfRangeError, match="batch item 1"):
            encode_batch(params, [[0], [99]], Pooling.MEAN)


class TestEncodeBackward:
    def test_zero_upstream_gives_zero_grads(self, params):
        grads = encode_backward(params, [[1, 2], [3]], Pooling.MEAN, np.zeros((2, 3)))
        for g in grads.arrays():
            assert not g.any()

    def test_unused_vocab_rows_get_zero_grad(self, params):
        rng = np.random.default_rng(8)
        batch = [[1, 2], [2, 3]]
        grads = encode_backward(params, batch, Pooling.MEAN, rng.normal(size=(2, 3)))
        used = {1, 2, 3}
        for row in range(params.vocab_size):
            if row not in used:
                assert not grads.embedding[row].any()

    @pytest.mark.parametrize("pooling", list(Pooling))
    def test_matches_finite_differences(self, pooling):
        rng = np.random.default_rng(21)
        params = init_params(10, 4, 3, rng)
        batch = random_token_batch(rng, 2, 10, min_len=2, max_len=5)
        upstream = rng.normal(size=(2, 3))
        analytic = encode_backward(params, batch, pooling, upstream)

        def objective():
            return float(np.sum(upstream * encode_batch(params, batch, pooling)))

        numeric = central_difference(objective, params.arrays(), step=1e-6)
        assert max_rel_error(analytic.arrays(), numeric, floor=1e-3) < 1e-6

    def test_shape_mismatch(self, params):
        with pytest.raises(ShapeMismatchError):
            encode_backward(params, [[1]], Pooling.MEAN, np.zeros((2, 3)))
        with pytest.raises(ShapeMismatchError):
            encode_backward(params, [[1]], Pooling.MEAN, np.zeros((1, 4)))

    def test_normalization_jacobian_formula(self):
        # d/dz of g . (z/||z||) must equal (g - (g.h) h) / ||z||
        rng = np.random.default_rng(34)
        for _ in range(20):
            z = rng.normal(size=6)
            g = rng.normal(size=6)
            h = z / np.linalg.norm(z)
            analytic = (g - np.dot(g, h) * h) / np.linalg.norm(z)

            def objective():
                return float(np.dot(g, z / np.linalg.norm(z)))

            numeric = central_difference(objective, [z], step=1e-6)[0]
            assert max_rel_error([analytic], [numeric], floor=1e-3) < 1e-6

    def test_max_pool_ties_route_to_earliest_token(self):
        # identical rows tie on every dimension; the gradient must land on
        # the first token position only
        embedding = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
        params = EncoderParams(embedding, np.eye(2), np.zeros(2))
        grads = encode_backward(params, [[1, 0]], Pooling.MAX, np.array([[0.3, -0.2]]))
        assert grads.embedding[1].any()
        assert not grads.embedding[0].any()


class TestCheckpoint:
    def test_round_trip(self, params, tmp_path):
        other = init_params(10, 4, 3, np.random.default_rng(100))
        path = tmp_path / "enc.ckpt"
        save_checkpoint(str(path), params, other)
        got_a, got_b = load_checkpoint(str(path))
        for a, b in zip(params.arrays(), got_a.arrays()):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(other.arrays(), got_b.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_header_layout(self, params, tmp_path):
        path = tmp_path / "enc.ckpt"
        save_checkpoint(str(path), params, params)
        raw = path.read_bytes()
        assert raw[:4] == b"DMC1"
        assert int.from_bytes(raw[4:12], "little") == 10
        assert int.from_bytes(raw[12:20], "little") == 4
        assert int.from_bytes(raw[20:28], "little") == 3
        n_doubles = 2 * (10 * 4 + 4 * 3 + 3)
        assert len(raw) == 28 + 8 * n_doubles

    def test_bad_magic(self, params, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CorpusParseError, match="magic"):
            load_checkpoint(str(path))

    def test_truncated(self, params, tmp_path):
        path = tmp_path / "enc.ckpt"
        save_checkpoint(str(path), params, params)
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(CorpusParseError, match="truncated"):
            load_checkpoint(str(path))

    def test_trailing_bytes(self, params, tmp_path):
        path = tmp_path / "enc.ckpt"
        save_checkpoint(str(path), params, params)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(CorpusParseError, match="trailing"):
            load_checkpoint(str(path))

    def test_shape_mismatch_rejected(self, params, tmp_path):
        other = init_params(11, 4, 3, np.random.default_rng(2))
        with pytest.raises(ShapeMismatchError):
            save_checkpoint(str(tmp_path / "x.ckpt"), params, other)
