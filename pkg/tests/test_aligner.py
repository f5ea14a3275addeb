import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptfuse.aligner import (
    AlignTrainConfig,
    Aligner,
    kl_proxy,
    loss_align,
    loss_attn_recon,
    loss_infonce,
    loss_terms,
    train_aligner,
)
from conceptfuse.core import Adam, Tape, Tensor, gradcheck, ops, precision
from conceptfuse.encoders import DualEncoder, EncoderConfig, TokenSeq


def _np_infonce(mi, mt, tau):
    """Independent oracle: image->text cross-entropy over cosine / tau logits."""
    a = mi / np.linalg.norm(mi, axis=1, keepdims=True)
    b = mt / np.linalg.norm(mt, axis=1, keepdims=True)
    logits = a @ b.T / tau
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return float(-np.mean(np.diag(logp)))


def _np_attn_recon(a, t):
    s = a @ t.T / math.sqrt(a.shape[1])
    w = np.exp(s - s.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    k = min(len(a), len(t))
    return float(np.mean(((w @ t)[:k] - t[:k]) ** 2))


def _log_tau(tau):
    return Tensor([math.log(tau)])


def test_align_shape_contract():
    al = Aligner.initialize()
    out = al.align(TokenSeq(Tensor(np.random.default_rng(0).standard_normal((16, 48))), "image"))
    assert out.modality == "aligned"
    assert out.tokens.shape == (16, 64)


def test_align_rejects_wrong_modality_and_width():
    al = Aligner.initialize()
    with pytest.raises(ValueError):
        al.align(TokenSeq(Tensor(np.zeros((3, 48))), "text"))
    with pytest.raises(ValueError):
        al.align_tokens(Tensor(np.zeros((3, 40))))


def test_zero_second_layer_gives_zero_output():
    al = Aligner.initialize()
    al.params["l2.w"] = Tensor(np.zeros_like(al.params["l2.w"].data))
    out = al.align_tokens(Tensor(np.random.default_rng(1).standard_normal((7, 48)) * 10))
    np.testing.assert_array_equal(out.data, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_align_preserves_token_count(m, seed):
    al = Aligner.initialize(seed=seed % 7)
    out = al.align_tokens(Tensor(np.random.default_rng(seed).standard_normal((m, 48))))
    assert out.shape == (m, 64)


def test_infonce_identical_means_is_log_b():
    for B in (2, 5, 32):
        mu = Tensor(np.tile(np.arange(1.0, 9.0), (B, 1)))
        assert loss_infonce(mu, mu, _log_tau(0.07)).item() == pytest.approx(math.log(B), rel=1e-6)


def test_infonce_perfect_separation_limit():
    mu = Tensor(np.eye(2, 4))
    with precision(np.float64):
        values = [loss_infonce(Tensor(mu.data), Tensor(mu.data), _log_tau(tau)).item() for tau in (1.0, 0.1, 0.01)]
    assert values[0] > values[1] > values[2]
    assert values[2] < 1e-20


def test_infonce_matches_oracle(rng):
    mi, mt = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    with precision(np.float64):
        got = loss_infonce(Tensor(mi), Tensor(mt), _log_tau(0.3)).item()
    assert got == pytest.approx(_np_infonce(mi, mt, 0.3), rel=1e-10)


def test_infonce_needs_negatives():
    with pytest.raises(ValueError):
        loss_infonce(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))), _log_tau(0.07))


def test_attn_recon_single_text_token_is_zero(rng):
    t = rng.standard_normal((1, 8))
    assert loss_attn_recon(Tensor(rng.standard_normal((5, 8))), Tensor(t)).item() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("m,n", [(3, 5), (5, 3), (4, 4)])
def test_attn_recon_matches_oracle(m, n, rng):
    a, t = rng.standard_normal((m, 6)), rng.standard_normal((n, 6))
    with precision(np.float64):
        got = loss_attn_recon(Tensor(a), Tensor(t)).item()
    assert got == pytest.approx(_np_attn_recon(a, t), rel=1e-10)


def _batch(seed=0, B=4):
    r = np.random.default_rng(seed)
    return Tensor(r.standard_normal((B, 16, 48))), Tensor(r.standard_normal((B, 16, 64)))


def test_loss_align_lambda_zero_is_attention_term():
    al = Aligner.initialize()
    img, txt = _batch()
    total, terms = loss_align(al, img, txt, lam=0.0)
    assert total.item() == terms["attn"]
    assert total.item() == loss_attn_recon(al.align_tokens(img), txt).item()


def test_loss_align_default_weighting():
    al = Aligner.initialize()
    img, txt = _batch()
    total, terms = loss_align(al, img, txt)
    assert total.item() == pytest.approx(0.2 * terms["infonce"] + terms["attn"], rel=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5))
def test_loss_align_is_linear_in_lambda(l1, l2):
    al = Aligner.initialize()
    img, txt = _batch(3)
    with precision(np.float64):
        f = [loss_align(al, img, txt, lam)[0].item() for lam in (0.0, 1.0, l1, l2)]
    slope = f[1] - f[0]
    assert f[2] == pytest.approx(f[0] + l1 * slope, rel=1e-9, abs=1e-9)
    assert f[3] == pytest.approx(f[0] + l2 * slope, rel=1e-9, abs=1e-9)


def test_loss_align_rejects_negative_lambda():
    al = Aligner.initialize()
    with pytest.raises(ValueError):
        loss_align(al, *_batch(), lam=-0.1)


def test_composite_loss_gradients_match_finite_differences():
    al = Aligner.initialize(d_image=6, d_text=5)
    r = np.random.default_rng(2)
    img, txt = r.standard_normal((3, 4, 6)), r.standard_normal((3, 2, 5))
    names = list(al.params)

    def f(*ps):
        model = Aligner(type(al.params)(zip(names, ps)), 6, 5)
        return loss_align(model, Tensor(img), Tensor(txt), 0.2)[0]

    errs = gradcheck(f, [p.data for p in al.params.values()])
    assert max(errs) < 1e-3


def test_kl_proxy_zero_on_identical_sets(rng):
    t = rng.standard_normal((50, 4))
    assert kl_proxy(t, t) < 1e-9


def test_kl_proxy_shift_closed_form():
    base = np.array([[1.0, 1.0], [-1.0, -1.0]] * 50)  # zero mean, unit variance per coordinate
    shifted = base + np.array([0.3, 0.0])
    assert kl_proxy(shifted, base, var_eps=0.0) == pytest.approx(0.3**2 / 2, rel=1e-12)


def test_kl_proxy_width_mismatch():
    with pytest.raises(ValueError):
        kl_proxy(np.zeros((2, 3)), np.zeros((2, 4)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1.0))
def test_tau_stays_positive_after_updates(seed, lr):
    al = Aligner.initialize()
    params = al.params.trainable()
    al.params = params
    opt = Adam(list(params.values()), lr=lr)
    for k in range(5):
        img, txt = _batch(seed + k)
        opt.zero_grad()
        with Tape() as tape:
            nce, attn = loss_terms(al, img, txt)
            loss = ops.add(ops.scale(nce, 0.2), attn)
        tape.backward(loss)
        opt.step()
        assert al.tau > 0


def test_config_validation():
    with pytest.raises(ValueError):
        AlignTrainConfig(lambda_infonce=-1).validate()
    with pytest.raises(ValueError):
        AlignTrainConfig(epochs=-1).validate()
    with pytest.raises(ValueError):
        AlignTrainConfig(loss="contrastive").validate()


@pytest.fixture(scope="module")
def tiny_encoder():
    return DualEncoder.initialize(EncoderConfig())


def test_zero_epochs_returns_seeded_init(tiny_dataset, tiny_encoder):
    al, trace = train_aligner(tiny_dataset, tiny_encoder, AlignTrainConfig(epochs=0, batch_size=4))
    assert al.params.snapshot() == Aligner.initialize().params.snapshot()
    assert len(trace) == 1


def test_training_is_deterministic_and_leaves_encoder_untouched(tiny_dataset, tiny_encoder):
    before = tiny_encoder.params.snapshot()
    cfg = AlignTrainConfig(epochs=2, batch_size=8)
    a, ta = train_aligner(tiny_dataset, tiny_encoder, cfg)
    b, tb = train_aligner(tiny_dataset, tiny_encoder, cfg)
    assert a.params.snapshot() == b.params.snapshot()
    assert ta == tb
    assert tiny_encoder.params.snapshot() == before
    assert a.params.snapshot() != Aligner.initialize().params.snapshot()


def test_save_load_keeps_provenance(tmp_path, tiny_dataset, tiny_encoder):
    al, _ = train_aligner(tiny_dataset, tiny_encoder, AlignTrainConfig(epochs=1, batch_size=8, loss="attn"))
    al.save(tmp_path / "al")
    back = Aligner.load(tmp_path / "al")
    assert back.params.snapshot() == al.params.snapshot()
    assert back.meta["loss"] == "attn"
    assert back.meta["lambda_infonce"] == 0.2
    assert back.tau == pytest.approx(al.tau)
