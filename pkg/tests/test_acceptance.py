"""End-to-end acceptance criteria, each reported as one PASS/FAIL line.

The default-configuration pipeline is trained once per session (about a
minute on one core); every criterion reuses it.
"""

import time

import numpy as np
import pytest

from conceptfuse import pipeline as pl
from conceptfuse.aligner import image_token_bank, kl_proxy, pad_to_width
from conceptfuse.cli import main
from conceptfuse.core import Tensor
from conceptfuse.diffusion import ddim_sample, text_token_bank
from conceptfuse.fusion import FusionConfig
from conceptfuse.metrics import _cosine, clip_score, lpips, raw_image_embedding, raw_text_embedding
from conceptfuse.pno import PnoConfig, pno_optimize
from conceptfuse.selfcheck import CHECKS, run_selfcheck
from oracles import brute_clip, brute_lpips


@pytest.fixture(scope="module")
def pairs(default_dataset, default_cfg):
    return pl.evaluation_pairs(default_dataset, default_cfg.eval_pairs, default_cfg.seed)


@pytest.fixture(scope="module")
def mode_reports(default_ws, default_components, default_dataset, default_cfg, pairs):
    runs = [pl.generate_run(default_ws, default_components, default_dataset, pairs, mode, default_cfg, mode)
            for mode in pl.MODES]
    return {r.method: r for r in pl.evaluate_dirs(runs, default_components.encoder, default_dataset)}


@pytest.fixture(scope="module")
def ablation_reports(default_ws, default_dataset, default_cfg, pairs):
    runs = []
    for loss in ("infonce", "attn"):
        comp = pl.Components.load(default_ws, loss)
        runs.append(pl.generate_run(default_ws, comp, default_dataset, pairs, default_cfg.fusion, default_cfg,
                                    f"ablate-{loss}", aligner_label=loss))
    reports = pl.evaluate_dirs(runs, comp.encoder, default_dataset)
    return {r.method: r for r in reports}


def _text_only_batch(comp, prompts, seeds, steps):
    cond = pl.conditioning(comp, prompts, None, "text", FusionConfig())
    return cond, [pl.sample_images(comp.denoiser, np.stack([pl.initial_noise(s, k, 64) for k in range(len(prompts))]),
                                   cond, steps)[1] for s in seeds]


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_integrity(record_criterion):
    required = {"grad.matmul", "grad.layer_norm", "grad.softmax", "grad.attention", "grad.cosine",
                "loss.infonce", "loss.attn_recon", "loss.align", "loss.reg", "pipeline.fused",
                "ddim.unroll1", "ddim.unroll5", "loss.pno_unroll5"}
    names = {c.name for c in CHECKS}
    start = time.perf_counter()
    results = run_selfcheck(seeds=10)
    elapsed = time.perf_counter() - start
    failed = [r.name for r in results if not r.passed]
    worst_unroll = max(r.worst for r in results if r.tol > 1e-3)
    worst_other = max(r.worst for r in results if r.tol <= 1e-3)
    ok = required <= names and not failed and elapsed < 60
    record_criterion(1, "gradient integrity", ok,
                     f"{len(results)} checks x 10 seeds, worst {worst_other:.1e} (<1e-3), "
                     f"unrolls {worst_unroll:.1e} (<5e-2), {elapsed:.1f}s, failed={failed}")


# ---------------------------------------------------------------- 2

def test_criterion_2_fusion_identity(record_criterion, default_components, default_dataset, pairs):
    comp = default_components
    chosen = pairs[:10]
    prompts = [p.prompt for p in chosen]
    refs = np.stack([default_dataset.samples[p.reference_index].image for p in chosen])
    seeds = range(10)
    text_cond, text_images = _text_only_batch(comp, prompts, seeds, 50)
    mismatches = {}
    for strategy in ("naive", "concat", "xattn"):
        fused = pl.conditioning(comp, prompts, refs, strategy, FusionConfig(strategy, 0.0))
        if strategy == "concat":
            assert fused.shape[1] == text_cond.shape[1] + 16
            fused = Tensor(fused.data[:, : text_cond.shape[1]])  # strip the image suffix
        bad = 0
        for s, expected in zip(seeds, text_images):
            x_T = np.stack([pl.initial_noise(s, k, 64) for k in range(len(chosen))])
            bad += pl.sample_images(comp.denoiser, x_T, fused, 50)[1].tobytes() != expected.tobytes()
        mismatches[strategy] = bad
    record_criterion(2, "fusion identity", not any(mismatches.values()),
                     f"10 seeds x 10 prompts, byte mismatches per strategy {mismatches}")


# ---------------------------------------------------------------- 3

def test_criterion_3_ddim_determinism(record_criterion, default_components, pairs):
    comp = default_components
    cond = comp.encoder.encode_text(pairs[0].prompt)
    x_T = Tensor(pl.initial_noise(0, 0, 64))
    outs = {ddim_sample(comp.denoiser, x_T, cond, 50).data.tobytes() for _ in range(10)}
    record_criterion(3, "DDIM determinism", len(outs) == 1, f"{len(outs)} distinct outputs over 10 runs")


# ---------------------------------------------------------------- 4

def test_criterion_4_aligner_efficacy(record_criterion, default_ws, default_dataset, default_components):
    trace = pl._read_jsonl(default_ws.aligner("both") / "trace.jsonl")
    drop = 1 - trace[-1]["val_align"] / trace[0]["val_align"]
    enc, aligner = default_components.encoder, default_components.aligner
    test = default_dataset.subset("test")
    raw = image_token_bank(enc, test)
    aligned = aligner.align_tokens(Tensor(raw)).data
    text = text_token_bank(enc, test)
    kl_aligned = kl_proxy(aligned, text)
    kl_raw = kl_proxy(pad_to_width(raw, enc.config.d_text), text)
    ok = drop >= 0.30 and kl_aligned < kl_raw
    record_criterion(4, "aligner efficacy", ok,
                     f"val L_align {trace[0]['val_align']:.3f} -> {trace[-1]['val_align']:.3f} "
                     f"(drop {drop:.0%}, need >=30%); kl_proxy aligned {kl_aligned:.2f} < unaligned {kl_raw:.2f}")


# ---------------------------------------------------------------- 5

def test_criterion_5_directional_table(record_criterion, mode_reports):
    text, vcf = mode_reports["text"], mode_reports["concat"]
    n = len(text.samples)
    lp = pl.compare(vcf, text, "lpips", lower_is_better=True)
    cs = pl.compare(text, vcf, "clip_score", lower_is_better=False)
    ok = n >= 150 and lp["holds"] and cs["holds"]
    record_criterion(5, "directional comparison", ok,
                     f"n={n}; LPIPS concat {vcf.lpips:.1f} < text {text.lpips:.1f} (p={lp['p_value']:.1e}); "
                     f"CLIP text {text.clip_score:.3f} >= concat {vcf.clip_score:.3f} (p={cs['p_value']:.1e})")


# ---------------------------------------------------------------- 6

def test_criterion_6_ablation(record_criterion, ablation_reports):
    nce, attn = ablation_reports["ablate-infonce"], ablation_reports["ablate-attn"]
    lower_lpips = attn.lpips < nce.lpips
    lower_clip = attn.clip_score < nce.clip_score
    record_criterion(6, "aligner-objective ablation", lower_lpips and lower_clip,
                     f"attention-only vs InfoNCE-only: LPIPS {attn.lpips:.1f} vs {nce.lpips:.1f} "
                     f"(lower: {lower_lpips}); CLIP {attn.clip_score:.3f} vs {nce.clip_score:.3f} "
                     f"(lower: {lower_clip})")


# ---------------------------------------------------------------- 7

def test_criterion_7_pno(record_criterion, default_components, default_dataset, default_cfg, pairs):
    comp = default_components
    chosen = pairs[:20]
    prompts = [p.prompt for p in chosen]
    refs = np.stack([default_dataset.samples[p.reference_index].image for p in chosen])
    cond = pl.conditioning(comp, prompts, refs, default_cfg.fusion, default_cfg.fusion_config())
    gains, max_norm = [], 0.0
    for k in range(len(chosen)):
        x_T = pl.initial_noise(0, k, 64)
        state = pno_optimize(comp.denoiser, comp.encoder, x_T, Tensor(cond.data[k]), refs[k], default_cfg.pno)
        gains.append(state.cos_after - state.cos_before)
        max_norm = max(max_norm, max(r["clipped_norm"] for r in state.trace))
    gains = np.array(gains)
    improved = float((gains > 0).mean())

    strong = PnoConfig(steps=50, lr=0.1, lambda_reg=100.0)
    moments = []
    for k in range(3):
        x_T = pl.initial_noise(100 + k, k, 64) * 1.5 + 0.3
        state = pno_optimize(comp.denoiser, comp.encoder, x_T, Tensor(cond.data[k]), refs[k], strong)
        moments.append((abs(float(state.x_T.mean())), abs(float(state.x_T.var()) - 1)))
    worst_mean = max(m for m, _ in moments)
    worst_var = max(v for _, v in moments)
    ok = improved >= 0.8 and gains.mean() > 0 and max_norm <= 1.0 + 1e-6 and worst_mean < 0.05 and worst_var < 0.05
    record_criterion(7, "PNO efficacy", ok,
                     f"improved {improved:.0%} of 20, mean gain {gains.mean():+.4f}, max clipped norm "
                     f"{max_norm:.7f}; lambda_reg=100: |mean| {worst_mean:.4f}, |var-1| {worst_var:.4f}")


# ---------------------------------------------------------------- 8

def test_criterion_8_metric_contracts(record_criterion, default_components, default_dataset):
    enc = default_components.encoder
    rng = np.random.default_rng(8)
    worst_sym = worst_brute = worst_scale = 0.0
    identity_ok = bounded = True
    captions = [s.captions[0] for s in default_dataset.subset("test")[:10]]
    for k in range(10):
        a = rng.random((32, 32, 3)).astype(np.float32)
        b = rng.random((32, 32, 3)).astype(np.float32)
        identity_ok &= lpips(enc, a, a) == 0.0
        ab, ba = lpips(enc, a, b), lpips(enc, b, a)
        worst_sym = max(worst_sym, abs(ab - ba))
        worst_brute = max(worst_brute, abs(ab - brute_lpips(enc, a, b)) / ab)
        cs = clip_score(enc, a, captions[k])
        bounded &= -1.0 <= cs <= 1.0
        worst_brute = max(worst_brute, abs(cs - brute_clip(enc, a, captions[k])))
        zi, zt = raw_image_embedding(enc, a), raw_text_embedding(enc, captions[k])
        worst_scale = max(worst_scale, abs(_cosine(3 * zi, zt) - cs), abs(_cosine(zi, 3 * zt) - cs))
    ok = identity_ok and bounded and worst_sym < 1e-9 and worst_brute < 1e-6 and worst_scale < 1e-12
    record_criterion(8, "metric contracts", ok,
                     f"lpips(x,x)=0: {identity_ok}; symmetry {worst_sym:.1e}; brute force {worst_brute:.1e}; "
                     f"clip bounded: {bounded}; scale {worst_scale:.1e}")


# ---------------------------------------------------------------- 9

def test_criterion_9_reproducibility(record_criterion, tmp_path, small_config_path):
    reports = []
    for name in ("first", "second"):
        wd = tmp_path / name
        assert main(["reproduce", "--workdir", str(wd), "--config", str(small_config_path)]) == 0
        reports.append((wd / "report.jsonl").read_bytes())
    record_criterion(9, "reproducibility", reports[0] == reports[1] and len(reports[0]) > 0,
                     f"two reproduce runs, report sizes {len(reports[0])} / {len(reports[1])} bytes, "
                     f"identical: {reports[0] == reports[1]}")
