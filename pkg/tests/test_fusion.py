import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptfuse.core import Tensor, gradcheck, ops, precision
from conceptfuse.encoders import TokenSeq
from conceptfuse.fusion import (
    FusionConfig,
    frobenius,
    fuse,
    fuse_concat,
    fuse_naive,
    fuse_xattn,
    fuse_tokens,
)


def _seq(arr, modality):
    return TokenSeq(Tensor(np.asarray(arr, dtype=np.float64)), modality)


@pytest.fixture
def pair(rng):
    return _seq(rng.standard_normal((5, 6)), "text"), _seq(rng.standard_normal((4, 6)), "aligned")


def test_naive_alpha_zero_is_identity(pair):
    T, I = pair
    out = fuse_naive(T, I, 0.0)
    assert out.modality == "fused"
    assert out.tokens.data.tobytes() == T.tokens.data.tobytes()


def test_naive_alpha_one_is_image_mean(pair):
    T, I = pair
    out = fuse_naive(T, I, 1.0).tokens.data
    np.testing.assert_allclose(out, np.repeat(I.tokens.data.mean(0, keepdims=True), 5, axis=0), rtol=1e-6)


def test_naive_hand_example():
    T = _seq([[1.0, 0.0], [0.0, 2.0]], "text")
    I = _seq([[2.0, 2.0], [4.0, 0.0]], "aligned")  # mean [3, 1]
    out = fuse_naive(T, I, 0.5).tokens.data
    np.testing.assert_allclose(out, [[2.0, 0.5], [1.5, 1.5]])
    assert fuse_naive(T, I, 0.5).meta == {"strategy": "naive", "alpha": 0.5}


def test_concat_shape_and_slicing(rng):
    T = _seq(rng.standard_normal((16, 8)), "text")
    I = _seq(rng.standard_normal((16, 8)), "aligned")
    out = fuse_concat(T, I)
    assert out.tokens.shape == (32, 8)
    assert out.meta["text_rows"] == 16
    np.testing.assert_array_equal(out.tokens.data[:16], T.tokens.data)
    np.testing.assert_array_equal(out.tokens.data[16:], I.tokens.data)


def test_xattn_alpha_zero_is_identity(pair):
    T, I = pair
    assert fuse_xattn(T, I, 0.0).tokens.data.tobytes() == T.tokens.data.tobytes()


def test_xattn_single_image_token(rng):
    T = _seq(rng.standard_normal((3, 4)), "text")
    I = _seq(rng.standard_normal((1, 4)), "aligned")
    alpha = 0.25
    out = fuse_xattn(T, I, alpha, rescale=False).tokens.data
    expected = (1 - alpha) * T.tokens.data + alpha * np.repeat(I.tokens.data, 3, axis=0)
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_xattn_rescale_matches_text_norm(rng):
    T = _seq(rng.standard_normal((5, 6)) * 3, "text")
    I = _seq(rng.standard_normal((4, 6)) * 0.1, "aligned")
    alpha = 0.3
    out = fuse_xattn(T, I, alpha).tokens.data
    scaled_fused = out - (1 - alpha) * T.tokens.data  # = alpha * gamma * T_fused
    assert np.linalg.norm(scaled_fused) == pytest.approx(alpha * np.linalg.norm(T.tokens.data), rel=1e-5)


def test_xattn_rescale_is_per_sequence(rng):
    with precision(np.float64):
        T = Tensor(rng.standard_normal((2, 5, 6)) * np.array([1.0, 10.0])[:, None, None])
        I = Tensor(rng.standard_normal((2, 4, 6)))
        batched = fuse_tokens(T, I, FusionConfig("xattn", 0.3)).data
        for b in range(2):
            single = fuse_tokens(Tensor(T.data[b]), Tensor(I.data[b]), FusionConfig("xattn", 0.3)).data
            np.testing.assert_allclose(batched[b], single, rtol=1e-12)


def test_width_mismatch_and_bad_alpha(rng):
    T = _seq(rng.standard_normal((3, 4)), "text")
    with pytest.raises(ValueError):
        fuse_naive(T, _seq(rng.standard_normal((2, 5)), "aligned"), 0.3)
    with pytest.raises(ValueError):
        fuse_xattn(T, _seq(rng.standard_normal((2, 4)), "aligned"), 1.5)
    with pytest.raises(ValueError):
        fuse_concat(T, Tensor(np.zeros((0, 4))))
    with pytest.raises(ValueError):
        FusionConfig("sum").validate()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.floats(0, 1), st.integers(0, 2**31 - 1))
def test_naive_invariant_to_image_row_permutation(n, m, alpha, seed):
    r = np.random.default_rng(seed)
    I = r.standard_normal((m, 4))
    with precision(np.float64):
        T = _seq(r.standard_normal((n, 4)), "text")
        a = fuse_naive(T, _seq(I, "aligned"), alpha).tokens.data
        b = fuse_naive(T, _seq(I[r.permutation(m)], "aligned"), alpha).tokens.data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_concat_never_modifies_values(n, m, seed):
    r = np.random.default_rng(seed)
    T, I = r.standard_normal((n, 3)).astype(np.float32), r.standard_normal((m, 3)).astype(np.float32)
    out = fuse_concat(TokenSeq(Tensor(T), "text"), TokenSeq(Tensor(I), "aligned")).tokens.data
    assert out[:n].tobytes() == T.tobytes()
    assert out[n:].tobytes() == I.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["naive", "xattn"]), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_alpha_zero_identity_for_every_strategy(strategy, n, m, seed):
    r = np.random.default_rng(seed)
    T = r.standard_normal((n, 4)).astype(np.float32)
    out = fuse(TokenSeq(Tensor(T), "text"), TokenSeq(Tensor(r.standard_normal((m, 4))), "aligned"),
               FusionConfig(strategy, 0.0))
    assert out.tokens.data.tobytes() == T.tobytes()


@pytest.mark.parametrize("strategy", ["naive", "concat", "xattn"])
def test_fusion_gradients(strategy, rng):
    cfg = FusionConfig(strategy, 0.4)
    k = 5 + 3 if strategy == "concat" else 5
    w = Tensor(rng.standard_normal((k, 4)))
    errs = gradcheck(lambda t, i: ops.sum(ops.mul(fuse_tokens(t, i, cfg), w)),
                     [rng.standard_normal((5, 4)), rng.standard_normal((3, 4))])
    assert max(errs) < 1e-3


def test_frobenius_floor():
    assert frobenius(Tensor(np.zeros((2, 3))), floor=1e-8).data.item() == pytest.approx(1e-8)
    assert frobenius(Tensor([[3.0, 4.0]])).data.item() == pytest.approx(5.0)
