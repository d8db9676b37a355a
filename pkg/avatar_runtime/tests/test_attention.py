import unittest

import numpy as np

from avatar_runtime import tensor as T
from avatar_runtime.attention import (AttentionMask, ChunkLayout, RopeParams, attention, block_causal_mask,
                                      build_block_causal_mask, chunk_of, full_mask, merge_heads, rope_apply,
                                      split_heads)
from avatar_runtime.exceptions import LayoutError, MaskError, RopeError, ShapeError


def _visible(mask: AttentionMask, query: int):
    return {k for k, ok in zip(mask.key_frames, mask.allowed[mask.query_frames.index(query)]) if ok}


class ChunkLayoutTest(unittest.TestCase):

    def test_chunk_spans(self):
        layout = ChunkLayout(12, 3)
        self.assertEqual(layout.num_chunks, 4)
        self.assertEqual(layout.total_frames, 13)
        self.assertEqual(layout.chunk_span(1), (1, 3))
        self.assertEqual(layout.chunk_span(2), (4, 6))
        self.assertEqual([layout.chunk_of(f) for f in range(7)], [0, 1, 1, 1, 2, 2, 2])

    def test_invalid_layouts(self):
        with self.assertRaises(LayoutError):
            ChunkLayout(7, 3)
        with self.assertRaises(LayoutError):
            ChunkLayout(6, 0)
        with self.assertRaises(LayoutError):
            ChunkLayout(6, 3).chunk_span(0)
        with self.assertRaises(LayoutError):
            chunk_of(-1, 3)


class BlockCausalMaskTest(unittest.TestCase):

    def test_chunk_rule_examples(self):
        mask = build_block_causal_mask(ChunkLayout(6, 3))
        self.assertEqual(_visible(mask, 2), {0, 1, 2, 3})
        self.assertEqual(_visible(mask, 4), set(range(7)))
        self.assertEqual(_visible(mask, 0), {0})

    def test_matches_brute_force(self):
        layout = ChunkLayout(12, 3)
        mask = build_block_causal_mask(layout)
        for q in range(13):
            expected = {k for k in range(13) if layout.chunk_of(k) <= layout.chunk_of(q)}
            self.assertEqual(_visible(mask, q), expected)

    def test_chunk_size_one_is_frame_causal(self):
        mask = build_block_causal_mask(ChunkLayout(5, 1))
        np.testing.assert_array_equal(mask.allowed, np.tril(np.ones((6, 6), dtype=bool)))

    def test_single_chunk_is_bidirectional_after_reference(self):
        mask = build_block_causal_mask(ChunkLayout(6, 6))
        self.assertEqual(_visible(mask, 0), {0})
        for q in range(1, 7):
            self.assertEqual(_visible(mask, q), set(range(7)))

    def test_idempotent(self):
        layout = ChunkLayout(9, 3)
        self.assertEqual(build_block_causal_mask(layout), build_block_causal_mask(layout))

    def test_token_lift(self):
        tokens = block_causal_mask([0, 1], [0, 1], 1).tokens(2)
        np.testing.assert_array_equal(tokens, [[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1]])


class RopeTest(unittest.TestCase):

    def setUp(self):
        self.params = RopeParams(head_dim=8, max_index=12)
        self.rng = np.random.default_rng(0)

    def test_zero_index_is_identity(self):
        x = self.rng.standard_normal((3, 2, 8))
        np.testing.assert_allclose(rope_apply(x, [0, 0, 0], self.params).data, x, atol=1e-15)

    def test_relative_position_identity(self):
        for _ in range(1000):
            q, k = self.rng.standard_normal((2, 1, 8))
            m, n = self.rng.integers(0, 24, 2)
            s = int(self.rng.integers(0, 24))
            base = float(np.sum(rope_apply(q, [m], self.params).data * rope_apply(k, [n], self.params).data))
            shifted = float(np.sum(rope_apply(q, [m + s], self.params).data
                                   * rope_apply(k, [n + s], self.params).data))
            self.assertAlmostEqual(base, shifted, delta=1e-10)

    def test_preserves_norm(self):
        x = self.rng.standard_normal((4, 8))
        out = rope_apply(x, [1, 5, 9, 40], self.params).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1))

    def test_long_range_decay(self):
        params = RopeParams(head_dim=64)
        q = np.ones((1, 64))
        k = np.ones((1, 64))
        base = rope_apply(q, [0], params).data

        def score(d):
            return abs(float(np.sum(base * rope_apply(k, [d], params).data)))

        near = np.mean([score(d) for d in range(0, 16)])
        far = np.mean([score(d) for d in range(128, 257)])
        self.assertGreater(near, far)

    def test_errors(self):
        with self.assertRaises(RopeError):
            RopeParams(head_dim=7)
        with self.assertRaises(RopeError):
            RopeParams(head_dim=8, theta_base=1.0)
        with self.assertRaises(RopeError):
            rope_apply(np.ones((2, 6)), [0, 1], self.params)
        with self.assertRaises(ShapeError):
            rope_apply(np.ones((2, 8)), [0], self.params)

    def test_out_of_range(self):
        self.assertFalse(self.params.out_of_range(12))
        self.assertTrue(self.params.out_of_range(13))

    def test_gradient(self):
        x = T.parameter(self.rng.standard_normal((3, 8)))
        weights = self.rng.standard_normal((3, 8))
        error = T.gradcheck(lambda: T.tensor_sum(rope_apply(x, [2, 5, 7], self.params) * weights), [x])
        self.assertLess(error, 1e-4)


class AttentionTest(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(1)

    def test_single_key_returns_value(self):
        v = self.rng.standard_normal((2, 1, 4))
        for _ in range(3):
            q = self.rng.standard_normal((2, 5, 4))
            k = self.rng.standard_normal((2, 1, 4))
            out = attention(q, k, v).data
            np.testing.assert_allclose(out, np.broadcast_to(v, (2, 5, 4)))

    def test_all_true_mask_equals_unmasked(self):
        q, k, v = self.rng.standard_normal((3, 2, 4, 4))
        masked = attention(q, k, v, mask=np.ones((4, 4), dtype=bool)).data
        plain = attention(q, k, v).data
        np.testing.assert_allclose(masked, plain, atol=1e-15)

    def test_block_causal_matches_restricted_recompute(self):
        frames = list(range(7))
        tokens, heads, dim = 2, 2, 4
        mask = block_causal_mask(frames, frames, 3)
        q, k, v = self.rng.standard_normal((3, heads, len(frames) * tokens, dim))
        out = attention(q, k, v, mask=mask.tokens(tokens)).data
        for f in frames:
            keys = [key for key in frames if mask.allowed[f, key]]
            cols = np.concatenate([np.arange(key * tokens, (key + 1) * tokens) for key in keys])
            rows = slice(f * tokens, (f + 1) * tokens)
            expected = attention(q[:, rows], k[:, cols], v[:, cols]).data
            np.testing.assert_allclose(out[:, rows], expected, atol=1e-6)

    def test_key_permutation_equivariance(self):
        q, k, v = self.rng.standard_normal((3, 1, 4, 4))
        order = self.rng.permutation(4)
        mask = np.array([[1, 1, 0, 1]] * 4, dtype=bool)
        out = attention(q, k, v, mask=mask).data
        permuted = attention(q, k[:, order], v[:, order], mask=mask[:, order]).data
        np.testing.assert_allclose(out, permuted, atol=1e-12)

    def test_fully_masked_row(self):
        q, k, v = self.rng.standard_normal((3, 1, 2, 4))
        mask = np.array([[True, False], [False, False]])
        with self.assertRaises(MaskError):
            attention(q, k, v, mask=mask)
        out = attention(q, k, v, mask=mask, null_slot=True).data
        np.testing.assert_array_equal(out[0, 1], np.zeros(4))

    def test_shape_errors(self):
        with self.assertRaises(ShapeError):
            attention(np.ones((1, 2, 4)), np.ones((1, 2, 3)), np.ones((1, 2, 3)))
        with self.assertRaises(ShapeError):
            attention(np.ones((1, 2, 4)), np.ones((1, 2, 4)), np.ones((1, 2, 4)), mask=np.ones((2, 3)))

    def test_head_split_round_trip(self):
        x = T.as_tensor(self.rng.standard_normal((5, 8)))
        np.testing.assert_array_equal(merge_heads(split_heads(x, 2)).data, x.data)

    def test_full_mask(self):
        self.assertTrue(full_mask([0, 1], [0, 1, 2]).allowed.all())

    def test_gradient(self):
        q = T.parameter(self.rng.standard_normal((2, 6, 4)))
        k = T.parameter(self.rng.standard_normal((2, 6, 4)))
        v = T.parameter(self.rng.standard_normal((2, 6, 4)))
        mask = block_causal_mask([0, 1, 2], [0, 1, 2], 1).tokens(2)
        weights = self.rng.standard_normal((2, 6, 4))
        error = T.gradcheck(lambda: T.tensor_sum(attention(q, k, v, mask=mask) * weights), [q, k, v])
        self.assertLess(error, 1e-4)


if __name__ == "__main__":
    unittest.main()
