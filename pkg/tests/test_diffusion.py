import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conceptfuse.core import Tensor, no_grad
from conceptfuse.diffusion import (
    DdimSchedule,
    Denoiser,
    DiffusionConfig,
    LatentCodec,
    ddim_sample,
    decode_latent,
    train_denoiser,
)
from conceptfuse.encoders import DualEncoder, TokenSeq
from conceptfuse.fusion import fuse_concat

SMALL = DiffusionConfig(hidden=32, attn_dim=16)


@pytest.fixture(scope="module")
def model():
    return Denoiser.initialize(SMALL)


def _cond(seed, k=16, d=64):
    return Tensor(np.random.default_rng(seed).standard_normal((k, d)))


def _noise(seed, L=64):
    return Tensor(np.random.default_rng(seed).standard_normal(L))


# ---------------------------------------------------------------- schedule

def test_schedule_is_monotone_and_starts_at_one():
    ab = DdimSchedule().alpha_bar
    assert len(ab) == 51
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert ab[-1] == pytest.approx(0.005)


def test_timestep_sequences():
    s = DdimSchedule()
    assert s.timesteps(50) == list(range(50, -1, -1))
    assert s.timesteps(1) == [50, 0]
    assert s.timesteps(5) == [50, 40, 30, 20, 10, 0]
    assert DdimSchedule.eta == 0.0
    for bad in (0, 51):
        with pytest.raises(ValueError):
            s.timesteps(bad)


# ---------------------------------------------------------------- sampler

def test_single_step_matches_hand_update(model):
    x, cond = _noise(0), _cond(1)
    ab = model.schedule.alpha_bar
    with no_grad():
        eps = model.predict_eps(x, 50, cond).data.astype(np.float64)
        got = ddim_sample(model, x, cond, steps=1).data
    x0 = (x.data - math.sqrt(1 - ab[50]) * eps) / math.sqrt(ab[50])
    expected = math.sqrt(ab[0]) * x0 + math.sqrt(1 - ab[0]) * eps
    np.testing.assert_allclose(got, expected, rtol=1e-5, atol=1e-5)


def test_sampling_is_byte_deterministic(model):
    x, cond = _noise(2), _cond(3)
    outs = {ddim_sample(model, x, cond, 50).data.tobytes() for _ in range(10)}
    assert len(outs) == 1


def test_batched_and_single_sampling_agree(model):
    xs = np.stack([_noise(s).data for s in range(3)])
    conds = np.stack([_cond(10 + s).data for s in range(3)])
    batched = ddim_sample(model, Tensor(xs), Tensor(conds), 10).data
    for b in range(3):
        single = ddim_sample(model, Tensor(xs[b]), Tensor(conds[b]), 10).data
        np.testing.assert_allclose(batched[b], single, rtol=1e-5, atol=1e-5)


def test_conditioning_of_any_row_count(model):
    x = _noise(4)
    T = TokenSeq(_cond(5), "text")
    I = TokenSeq(_cond(6, k=16), "aligned")
    fused = fuse_concat(T, I)
    assert fused.count == 32
    for cond in (T, fused, TokenSeq(_cond(7, k=1), "text")):
        assert ddim_sample(model, x, cond, 5).shape == (64,)


def test_conditioning_width_checked(model):
    with pytest.raises(ValueError):
        model.predict_eps(_noise(0), 10, _cond(0, d=48))


def test_sampling_never_mutates_weights(model):
    before = model.params.snapshot()
    ddim_sample(model, _noise(8), _cond(9), 20)
    assert model.params.snapshot() == before


# ---------------------------------------------------------------- codec

@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, 64, elements=st.floats(-1e3, 1e3, width=32)))
def test_decode_is_clamped(z):
    img = LatentCodec(scale=0.7).decode(Tensor(z)).data
    assert img.shape == (32, 32, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_codec_rows_are_orthonormal():
    enc = LatentCodec().enc
    np.testing.assert_allclose(enc @ enc.T, np.eye(64), atol=1e-10)


def test_codec_roundtrip_error(default_dataset, default_components):
    codec = default_components.denoiser.codec
    images = default_dataset.images[:500]
    back = codec.decode(Tensor(codec.encode(images))).data
    mae = float(np.abs(back - images).mean())
    assert mae < 0.15


# ---------------------------------------------------------------- training and persistence

def test_zero_epochs_is_seeded_init(tiny_dataset):
    enc = DualEncoder.initialize()
    model, trace = train_denoiser(tiny_dataset, enc, SMALL, epochs=0)
    assert model.params.snapshot() == Denoiser.initialize(SMALL).params.snapshot()
    assert len(trace) == 1


def test_save_load_predicts_identically(tmp_path, tiny_dataset):
    enc = DualEncoder.initialize()
    model, _ = train_denoiser(tiny_dataset, enc, DiffusionConfig(hidden=32, attn_dim=16, batch_size=16), epochs=1)
    model.save(tmp_path / "den")
    back = Denoiser.load(tmp_path / "den")
    x, cond = _noise(1), _cond(2)
    a = decode_latent(model, ddim_sample(model, x, cond, 10)).data
    b = decode_latent(back, ddim_sample(back, x, cond, 10)).data
    assert a.tobytes() == b.tobytes()


def test_default_training_reduces_validation_error(default_ws):
    trace = [json.loads(line) for line in (default_ws.denoiser / "trace.jsonl").read_text().splitlines()]
    assert trace[-1]["val_eps_mse"] < 0.5 * trace[0]["val_eps_mse"]


def test_trained_model_is_sensitive_to_conditioning(default_components, default_dataset):
    enc, model = default_components.encoder, default_components.denoiser
    rng = np.random.default_rng(0)
    samples = default_dataset.subset("test")
    changed = 0
    trials = 40
    for k in range(trials):
        a, b = rng.choice(len(samples), 2, replace=False)
        x = Tensor(rng.standard_normal(64))
        xa = ddim_sample(model, x, enc.encode_text(samples[a].captions[0]), 50).data
        xb = ddim_sample(model, x, enc.encode_text(samples[b].captions[0]), 50).data
        changed += not np.array_equal(xa, xb)
    assert changed / trials >= 0.95
