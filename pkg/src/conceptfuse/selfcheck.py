"""Finite-difference gradient checks and algebraic invariants.

Every check is deterministic, runs on freshly seeded small models (no
workspace needed) and is repeated for several seeds. ``run_selfcheck``
returns one result per named check.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .aligner import Aligner, kl_proxy, loss_align, loss_attn_recon, loss_infonce
from .core import ParamSet, Tensor, gradcheck, no_grad, ops, precision, vtf
from .diffusion import DiffusionConfig, Denoiser, LatentCodec, ddim_sample, decode_latent
from .encoders import DualEncoder, EncoderConfig, symmetric_infonce
from .fusion import concat_tokens, naive_tokens, xattn_tokens
from .pno import loss_pno, loss_reg

TOL = 1e-3
UNROLL_TOL = 5e-2


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tol: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:28s} worst={self.worst:.3e} tol={self.tol:.0e} ({self.seconds:.2f}s){self.detail}"


@dataclass
class Check:
    name: str
    fn: Callable[[int], float]  # seed -> worst relative error (or violation)
    tol: float = TOL


def _rand(rng, *shape, lo=None):
    x = rng.standard_normal(shape)
    if lo is not None:  # keep away from kinks at 0
        x = np.where(np.abs(x) < lo, np.sign(x + 1e-12) * lo, x)
    return x


def _scalarize(rng, shape):
    """Random fixed weights so a tensor-valued op can be checked through a scalar."""
    w = Tensor(rng.standard_normal(shape))
    return lambda y: ops.sum(ops.mul(y, w))


def _op_check(make_inputs, build, coords=None):
    def fn(seed):
        rng = np.random.default_rng([seed, 0x5C])
        inputs = make_inputs(rng)
        with precision(np.float64):
            out_shape = build(*[Tensor(x) for x in inputs]).shape
            reduce_ = _scalarize(rng, out_shape)
        return max(gradcheck(lambda *ts: reduce_(build(*ts)), inputs, max_coords=coords, rng=rng))
    return fn


# ---------------------------------------------------------------- small models

_SMALL_ENC = EncoderConfig(d_text=8, d_image=8, d_proj=6, n_max=5)
_SMALL_DIFF = DiffusionConfig(hidden=12, attn_dim=6, cond_dim=8, T_steps=50)


def _params64(params: ParamSet) -> ParamSet:
    with precision(np.float64):
        return ParamSet({k: Tensor(v.data, name=k) for k, v in params.items()})


def _small_encoder(seed: int) -> DualEncoder:
    enc = DualEncoder.initialize(EncoderConfig(**{**_SMALL_ENC.__dict__, "seed": seed}))
    enc.params = _params64(enc.params)
    return enc


def _small_denoiser(seed: int) -> Denoiser:
    cfg = DiffusionConfig(**{**_SMALL_DIFF.__dict__, "seed": seed})
    # small latent scale keeps decoded pixels away from the clamp at 0 and 1
    model = Denoiser.initialize(cfg, LatentCodec(seed, scale=0.02))
    model.params = _params64(model.params)
    return model


def _small_aligner(seed: int) -> Aligner:
    al = Aligner.initialize(_SMALL_ENC.d_image, _SMALL_ENC.d_text, seed)
    al.params = _params64(al.params)
    return al


def _with_params(obj, names, tensors):
    params = ParamSet(obj.params)
    params.update(zip(names, tensors))
    return params


# ---------------------------------------------------------------- composite checks

def _check_infonce(seed):
    rng = np.random.default_rng([seed, 1])
    mi, mt = _rand(rng, 4, 6), _rand(rng, 4, 6)
    lt = np.array([np.log(0.5)])
    return max(gradcheck(loss_infonce, [mi, mt, lt], rng=rng))


def _check_sym_infonce(seed):
    rng = np.random.default_rng([seed, 2])
    return max(gradcheck(lambda a, b: symmetric_infonce(ops.normalize(a), ops.normalize(b), 0.5),
                         [_rand(rng, 4, 5), _rand(rng, 4, 5)], rng=rng))


def _check_attn_recon(seed):
    rng = np.random.default_rng([seed, 3])
    return max(gradcheck(loss_attn_recon, [_rand(rng, 2, 3, 4), _rand(rng, 2, 5, 4)], rng=rng))


def _check_align_loss(seed):
    rng = np.random.default_rng([seed, 4])
    al = _small_aligner(seed)
    names = list(al.params)
    img, txt = _rand(rng, 3, 4, _SMALL_ENC.d_image), _rand(rng, 3, 5, _SMALL_ENC.d_text)

    def f(*ps):
        a = Aligner(_with_params(al, names, ps), al.d_image, al.d_text)
        return loss_align(a, Tensor(img), Tensor(txt), 0.2)[0]

    return max(gradcheck(f, [al.params[n].data for n in names], max_coords=12, rng=rng))


def _check_reg(seed):
    rng = np.random.default_rng([seed, 5])
    return max(gradcheck(loss_reg, [_rand(rng, 64)], rng=rng))


def _fusion_check(kind):
    def fn(seed):
        rng = np.random.default_rng([seed, 6])
        T, I = _rand(rng, 4, 5), _rand(rng, 3, 5)
        build = {
            "naive": lambda t, i: naive_tokens(t, i, 0.3),
            "concat": concat_tokens,
            "xattn": lambda t, i: xattn_tokens(t, i, 0.3, rescale=True),
        }[kind]
        with precision(np.float64):
            reduce_ = _scalarize(rng, build(Tensor(T), Tensor(I)).shape)
        return max(gradcheck(lambda t, i: reduce_(build(t, i)), [T, I], rng=rng))
    return fn


def _check_text_encoder(seed):
    rng = np.random.default_rng([seed, 7])
    enc = _small_encoder(seed)
    names = ["text.tok", "text.pos", "text.proj"]
    ids = rng.integers(0, len(enc.vocab), size=(2, _SMALL_ENC.n_max))

    def f(*ps):
        e = DualEncoder(_with_params(enc, names, ps), enc.config)
        z = e.project_tokens(e.text_tokens(ids), "text")
        return ops.sum(ops.mul(z, Tensor(np.linspace(-1, 1, z.size).reshape(z.shape))))

    return max(gradcheck(f, [enc.params[n].data for n in names], max_coords=10, rng=rng))


def _check_image_encoder(seed):
    rng = np.random.default_rng([seed, 8])
    enc = _small_encoder(seed)
    img = rng.uniform(0.2, 0.8, size=(32, 32, 3))

    def f(x):
        z = enc.project_tokens(enc.image_tokens(x), "image")
        return ops.sum(ops.mul(z, Tensor(np.linspace(-1, 1, z.size))))

    return max(gradcheck(f, [img], max_coords=12, rng=rng))


def _check_denoiser(seed):
    rng = np.random.default_rng([seed, 9])
    model = _small_denoiser(seed)
    x, cond = _rand(rng, 2, 64), _rand(rng, 2, 3, 8)
    t = np.array([5, 40])
    reduce_w = Tensor(rng.standard_normal((2, 64)))
    return max(gradcheck(lambda a, c: ops.sum(ops.mul(model.predict_eps(a, t, c), reduce_w)),
                         [x, cond], max_coords=12, rng=rng))


def _check_ddim(steps):
    def fn(seed):
        rng = np.random.default_rng([seed, 10])
        model = _small_denoiser(seed)
        enc = _small_encoder(seed)
        x_T, cond = _rand(rng, 64), _rand(rng, 4, 8)
        target = Tensor(ops.normalize(Tensor(rng.standard_normal(_SMALL_ENC.d_proj))).data)

        def f(x, c):
            img = decode_latent(model, ddim_sample(model, x, c, steps))
            z = enc.project_tokens(enc.image_tokens(img), "image")
            return ops.sum(ops.mul(z, target))

        return max(gradcheck(f, [x_T, cond], max_coords=3, rng=rng))
    return fn


def _check_fused_pipeline(seed):
    rng = np.random.default_rng([seed, 11])
    model, enc, al = _small_denoiser(seed), _small_encoder(seed), _small_aligner(seed)
    ref = rng.uniform(0.2, 0.8, size=(32, 32, 3))
    ids = rng.integers(1, len(enc.vocab), size=_SMALL_ENC.n_max)
    target = Tensor(ops.normalize(Tensor(rng.standard_normal(_SMALL_ENC.d_proj))).data)
    with no_grad(), precision(np.float64):
        T = enc.text_tokens(ids)
        I = enc.image_tokens(Tensor(ref))

    def f(x, w2):
        a = Aligner(_with_params(al, ["l2.w"], [w2]), al.d_image, al.d_text)
        cond = xattn_tokens(T, a.align_tokens(I), 0.3, rescale=True)
        img = decode_latent(model, ddim_sample(model, x, cond, 2))
        return ops.sum(ops.mul(enc.project_tokens(enc.image_tokens(img), "image"), target))

    return max(gradcheck(f, [_rand(rng, 64), al.params["l2.w"].data], max_coords=6, rng=rng))


def _check_pno_loss(seed):
    rng = np.random.default_rng([seed, 12])
    model, enc = _small_denoiser(seed), _small_encoder(seed)
    guide = rng.standard_normal(_SMALL_ENC.d_proj)
    guide /= np.linalg.norm(guide)
    cond = _rand(rng, 4, 8)
    return max(gradcheck(lambda x: loss_pno(model, enc, x, Tensor(cond), guide, 0.1, 5)[0],
                         [_rand(rng, 64)], max_coords=3, rng=rng))


# ---------------------------------------------------------------- invariants (violation size)

def _inv_fusion_identity(seed):
    rng = np.random.default_rng([seed, 20])
    T, I = Tensor(_rand(rng, 5, 8)), Tensor(_rand(rng, 3, 8))
    bad = 0.0
    bad += float(naive_tokens(T, I, 0.0).data.tobytes() != T.data.tobytes())
    bad += float(xattn_tokens(T, I, 0.0).data.tobytes() != T.data.tobytes())
    bad += float(ops.rows(concat_tokens(T, I), 0, 5).data.tobytes() != T.data.tobytes())
    return bad


def _inv_ddim_determinism(seed):
    rng = np.random.default_rng([seed, 21])
    model = Denoiser.initialize(DiffusionConfig(**{**_SMALL_DIFF.__dict__, "seed": seed}))
    x, c = Tensor(_rand(rng, 64)), Tensor(_rand(rng, 3, 8))
    with no_grad():
        first = ddim_sample(model, x, c, 10).data.tobytes()
        return float(any(ddim_sample(model, x, c, 10).data.tobytes() != first for _ in range(3)))


def _inv_kl_zero(seed):
    rng = np.random.default_rng([seed, 22])
    toks = rng.standard_normal((40, 6))
    return abs(kl_proxy(toks, toks)) * 1e6  # scaled: must stay below the 1e-3 tolerance


def _inv_vtf_roundtrip(seed):
    rng = np.random.default_rng([seed, 23])
    arr = rng.standard_normal((2, 3, 4)).astype(np.float32)
    buf = io.BytesIO(vtf.dumps(arr))
    return float(not np.array_equal(vtf.loads(buf.getvalue()), arr))


def _inv_clip_scale(seed):
    rng = np.random.default_rng([seed, 24])
    u, v = rng.standard_normal(6), rng.standard_normal(6)
    cos = lambda a, b: a @ b / (np.linalg.norm(a) * np.linalg.norm(b))  # noqa: E731
    return abs(cos(u, v) - cos(3 * u, v))


CHECKS: list[Check] = [
    Check("grad.matmul", _op_check(lambda r: [_rand(r, 2, 3, 4), _rand(r, 4, 5)], ops.matmul)),
    Check("grad.linear", _op_check(lambda r: [_rand(r, 3, 4), _rand(r, 4, 2), _rand(r, 2)], ops.linear)),
    Check("grad.layer_norm", _op_check(lambda r: [_rand(r, 3, 6), _rand(r, 6), _rand(r, 6)], ops.layer_norm)),
    Check("grad.softmax", _op_check(lambda r: [_rand(r, 3, 5)], ops.softmax)),
    Check("grad.log_softmax", _op_check(lambda r: [_rand(r, 3, 5)], ops.log_softmax)),
    Check("grad.attention", _op_check(lambda r: [_rand(r, 2, 3, 4), _rand(r, 2, 5, 4), _rand(r, 2, 5, 3)],
                                      ops.sdp_attention)),
    Check("grad.cosine", _op_check(lambda r: [_rand(r, 3, 4), _rand(r, 3, 4)], ops.cosine_sim)),
    Check("grad.normalize", _op_check(lambda r: [_rand(r, 3, 4)], ops.normalize)),
    Check("grad.elementwise", _op_check(
        lambda r: [_rand(r, 3, 4), _rand(r, 4), np.abs(_rand(r, 3, 4)) + 1.5],
        lambda a, b, c: ops.div(ops.add(ops.mul(ops.silu(a), b), ops.sub(ops.exp(ops.scale(a, 0.3)), b)),
                                ops.add(ops.sqrt(c), ops.log(c))))),
    Check("grad.relu_clip", _op_check(lambda r: [_rand(r, 4, 5, lo=0.05)],
                                      lambda a: ops.add(ops.relu(a), ops.clip(ops.scale(a, 0.1), -0.1, 0.1)))),
    Check("grad.shape_ops", _op_check(
        lambda r: [_rand(r, 2, 3, 4), _rand(r, 2, 2, 4)],
        lambda a, b: ops.permute(ops.reshape(ops.concat([a, ops.split(b, [1, 1])[1]]), (2, 2, 8)), (2, 0, 1)))),
    Check("grad.reductions", _op_check(
        lambda r: [_rand(r, 3, 4, 5)],
        lambda a: ops.add(ops.mean(a, axis=(0, 2), keepdims=True), ops.sum(ops.index(a, (1, slice(0, 2))))))),
    Check("grad.embedding", _op_check(lambda r: [_rand(r, 6, 3)], lambda t: ops.embedding(t, [[0, 2, 2], [5, 1, 0]]))),
    Check("grad.cross_entropy", _op_check(lambda r: [_rand(r, 4, 5)], lambda z: ops.cross_entropy(z, [0, 3, 1, 4]))),
    Check("loss.symmetric_infonce", _check_sym_infonce),
    Check("loss.infonce", _check_infonce),
    Check("loss.attn_recon", _check_attn_recon),
    Check("loss.align", _check_align_loss),
    Check("loss.reg", _check_reg),
    Check("fusion.naive", _fusion_check("naive")),
    Check("fusion.concat", _fusion_check("concat")),
    Check("fusion.xattn", _fusion_check("xattn")),
    Check("encoder.text", _check_text_encoder),
    Check("encoder.image", _check_image_encoder),
    Check("denoiser.eps", _check_denoiser),
    Check("ddim.unroll1", _check_ddim(1)),
    Check("pipeline.fused", _check_fused_pipeline),
    Check("ddim.unroll5", _check_ddim(5), UNROLL_TOL),
    Check("loss.pno_unroll5", _check_pno_loss, UNROLL_TOL),
    Check("invariant.fusion_identity", _inv_fusion_identity),
    Check("invariant.ddim_determinism", _inv_ddim_determinism),
    Check("invariant.kl_zero", _inv_kl_zero),
    Check("invariant.vtf_roundtrip", _inv_vtf_roundtrip),
    Check("invariant.clip_scale", _inv_clip_scale),
]


def run_selfcheck(seeds: int = 10, names: list[str] | None = None,
                  progress: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    results = []
    for check in CHECKS:
        if names and check.name not in names:
            continue
        start = time.perf_counter()
        worst, detail = 0.0, ""
        try:
            for seed in range(seeds):
                worst = max(worst, float(check.fn(seed)))
        except Exception as err:  # a crashing check is a failing check
            worst, detail = float("inf"), f" error: {type(err).__name__}: {err}"
        res = CheckResult(check.name, bool(worst < check.tol), worst, check.tol,
                          time.perf_counter() - start, detail)
        results.append(res)
        if progress:
            progress(res)
    return results
