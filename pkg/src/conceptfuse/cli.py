"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 validation error (bad config,
missing prerequisite, bad input file), 3 numerical failure (non-finite
values, divergence, failed self-check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .config import ConfigError, RunConfig
from .core import NonFiniteError, Tensor
from .dataset import generate_dataset, save_dataset
from .images import read_ppm, write_ppm
from .pno import DivergenceError, pno_optimize

log = logging.getLogger("conceptfuse")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default="work", help="workspace directory (default: ./work)")
    common.add_argument("--config", help="JSON run configuration; unknown keys are rejected")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="conceptfuse", description="Text + reference-image guided toy diffusion pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--out", help="output directory (default: <workdir>/data)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", parents=[common], help="train encoders, denoiser or aligner")
    p.add_argument("component", choices=("encoders", "denoiser", "aligner"))
    p.add_argument("--loss", choices=("both", "infonce", "attn"), default="both",
                   help="aligner objective (ablations use infonce or attn)")
    p.add_argument("--epochs", type=int, help="override the component's epoch count")

    p = sub.add_parser("generate", parents=[common], help="generate one image")
    p.add_argument("--prompt", required=True)
    p.add_argument("--mode", choices=pl.MODES, default="text")
    ref = p.add_mutually_exclusive_group()
    ref.add_argument("--reference", help="reference image (P6 PPM, 32x32)")
    ref.add_argument("--reference-index", type=int, help="use dataset sample N as the reference")
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int, default=0, help="initial-noise seed")
    p.add_argument("--pno", action="store_true", help="refine tokens and noise towards the reference")
    p.add_argument("--pno-steps", type=int)
    p.add_argument("--out", required=True, help="output .ppm path; metadata goes next to it as .json")

    p = sub.add_parser("evaluate", parents=[common], help="score generated runs")
    p.add_argument("runs", nargs="+", help="run directories (each with manifest.jsonl)")
    p.add_argument("--out", help="report path (default: <workdir>/reports/evaluate.jsonl)")
    p.add_argument("--force", action="store_true", help="allow runs produced by different configs")

    p = sub.add_parser("selfcheck", parents=[common], help="gradient checks and invariants")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--only", nargs="*", help="run only these named checks")

    sub.add_parser("reproduce", parents=[common], help="full pipeline + comparison report")
    sub.add_parser("ablate", parents=[common], help="aligner objective ablation report")
    return parser


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg: RunConfig) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    size = cfg.data_size if args.size is None else args.size
    ws = pl.Workspace(args.workdir)
    out = Path(args.out) if args.out else ws.data
    ds = generate_dataset(seed, size, args.workers)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} samples to {out} (split {'/'.join(map(str, ds.split.sizes()))})")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    ws = pl.Workspace(args.workdir)
    if args.epochs is not None:
        if args.epochs < 0:
            raise ConfigError("--epochs must be >= 0")
        if args.component == "encoders":
            cfg.encoders.epochs = args.epochs
        elif args.component == "denoiser":
            cfg.denoiser.epochs = args.epochs
        else:
            cfg.epochs = args.epochs
    if args.component == "encoders":
        trace = pl.stage_train_encoders(ws, cfg)
        print(f"encoders: val accuracy {trace[0]['val_acc']:.3f} -> {trace[-1]['val_acc']:.3f}")
    elif args.component == "denoiser":
        trace = pl.stage_train_denoiser(ws, cfg)
        print(f"denoiser: val eps-MSE {trace[0]['val_eps_mse']:.4f} -> {trace[-1]['val_eps_mse']:.4f}")
    else:
        trace = pl.stage_train_aligner(ws, cfg, args.loss)
        print(f"aligner ({args.loss}): val L_align {trace[0]['val_align']:.4f} -> {trace[-1]['val_align']:.4f}")
    return EXIT_OK


def cmd_generate(args, cfg: RunConfig) -> int:
    if args.mode != "text" and args.reference is None and args.reference_index is None:
        raise UsageError(f"mode {args.mode!r} needs --reference or --reference-index")
    if args.pno and args.reference is None and args.reference_index is None:
        raise UsageError("--pno needs a reference image")
    if args.alpha is not None:
        cfg.alpha = args.alpha
    if args.pno_steps is not None:
        cfg.pno.steps = args.pno_steps
    cfg.validate()
    ws = pl.Workspace(args.workdir)
    comp = pl.Components.load(ws, "both" if args.mode != "text" else None)
    reference, ref_label = None, None
    if args.reference is not None:
        reference = read_ppm(args.reference)
        ref_label = str(args.reference)
    elif args.reference_index is not None:
        ds = ws.load_dataset()
        if not 0 <= args.reference_index < len(ds):
            raise ValueError(f"reference index {args.reference_index} outside the dataset")
        reference = ds.samples[args.reference_index].image
        ref_label = f"dataset:{args.reference_index}"
    refs = None if reference is None else reference[None]
    cond = pl.conditioning(comp, [args.prompt], refs, args.mode, cfg.fusion_config())
    x_T = pl.initial_noise(args.seed, 0, comp.denoiser.config.latent_dim)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"prompt": args.prompt, "mode": args.mode, "seed": args.seed, "reference": ref_label,
            "alpha": None if args.mode in ("text", "concat") else cfg.alpha,
            "ddim_steps": cfg.ddim_steps, "config_hash": cfg.hash(), "pno": None}
    if args.pno:
        state = pno_optimize(comp.denoiser, comp.encoder, x_T, Tensor(cond.data[0]), reference, cfg.pno)
        image = state.image
        state_dir = out.with_suffix("").with_name(out.stem + "-pno")
        state.save(state_dir)
        meta["pno"] = {"steps": cfg.pno.steps, "lr": cfg.pno.lr, "lambda_reg": cfg.pno.lambda_reg,
                       "grad_clip": cfg.pno.grad_clip, "cos_before": state.cos_before,
                       "cos_after": state.cos_after, "state": state_dir.name, "trace": state.trace}
    else:
        image = pl.sample_images(comp.denoiser, x_T[None], cond, cfg.ddim_steps)[1][0]
    write_ppm(out, image)
    out.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ws = pl.Workspace(args.workdir)
    reports = pl.evaluate_dirs(args.runs, ws.load_encoder(), ws.load_dataset(), force=args.force)
    out = Path(args.out) if args.out else ws.report("evaluate")
    pl.write_reports(out, reports)
    for r in reports:
        print(f"{r.method:16s} n={len(r.samples):4d} clip={r.clip_score:.4f} lpips={r.lpips:.2f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_selfcheck(args, cfg: RunConfig) -> int:
    from .selfcheck import CHECKS, run_selfcheck

    if args.only:
        unknown = sorted(set(args.only) - {c.name for c in CHECKS})
        if unknown:
            raise UsageError(f"unknown check(s): {', '.join(unknown)}")
    results = run_selfcheck(args.seeds, args.only, progress=lambda r: print(r.line(), flush=True))
    failed = [r.name for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    if failed:
        print(f"selfcheck FAILED ({len(failed)}/{len(results)}): {', '.join(failed)} [{total:.1f}s]")
        return EXIT_NUMERICAL
    print(f"selfcheck passed ({len(results)} checks, {total:.1f}s)")
    return EXIT_OK


def _print_table(reports) -> None:
    print(f"{'method':16s} {'CLIP':>8s} {'LPIPS':>10s}")
    for r in reports:
        print(f"{r.method:16s} {r.clip_score:8.4f} {r.lpips:10.2f}")


def cmd_reproduce(args, cfg: RunConfig) -> int:
    ws = pl.Workspace(args.workdir)
    ds = pl.stage_gen_data(ws, cfg.seed, cfg.data_size)
    pl.stage_train_encoders(ws, cfg)
    pl.stage_train_denoiser(ws, cfg)
    pl.stage_train_aligner(ws, cfg, "both")
    comp = pl.Components.load(ws)
    pairs = pl.evaluation_pairs(ds, cfg.eval_pairs, cfg.seed)
    runs = []
    for mode in pl.MODES:
        runs.append(pl.generate_run(ws, comp, ds, pairs, mode, cfg, mode))
    reports = pl.evaluate_dirs(runs, comp.encoder, ds)
    by = {r.method: r for r in reports}
    extra = []
    for mode in ("naive", "concat", "xattn"):
        extra.append(pl.compare(by[mode], by["text"], "lpips", lower_is_better=True))
        extra.append(pl.compare(by["text"], by[mode], "clip_score", lower_is_better=False))
    if cfg.pno_pairs:
        pno_cfg = dataclasses.replace(cfg, eval_seeds=cfg.eval_seeds[:1])
        pl.generate_run(ws, comp, ds, pairs[:cfg.pno_pairs], cfg.fusion, pno_cfg, f"{cfg.fusion}-pno", pno=True)
        extra.append(pl.pno_summary(ws, f"{cfg.fusion}-pno"))
    report = ws.root / "report.jsonl"
    pl.write_reports(report, reports, extra)
    _print_table(reports)
    for e in extra:
        if e["kind"] == "comparison":
            print(f"{e['better']} better than {e['than']} on {e['metric']}: "
                  f"{'yes' if e['holds'] else 'no'} (p={e['p_value']:.2e})")
        else:
            print(f"PNO improved {e['improved_fraction']:.0%} of {e['n']} pairs "
                  f"(mean {e['mean_improvement']:+.4f})")
    print(f"wrote {report}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    ws = pl.Workspace(args.workdir)
    ds = ws.load_dataset()
    pairs = pl.evaluation_pairs(ds, cfg.eval_pairs, cfg.seed)
    runs = []
    for loss in ("infonce", "attn", "both"):
        if not (ws.aligner(loss) / "manifest.json").exists():
            pl.stage_train_aligner(ws, cfg, loss)
        comp = pl.Components.load(ws, loss)
        runs.append(pl.generate_run(ws, comp, ds, pairs, cfg.fusion, cfg, f"ablate-{loss}", aligner_label=loss))
    reports = pl.evaluate_dirs(runs, comp.encoder, ds)
    by = {r.method: r for r in reports}
    extra = [pl.compare(by["ablate-attn"], by["ablate-infonce"], "lpips", lower_is_better=True),
             pl.compare(by["ablate-infonce"], by["ablate-attn"], "clip_score", lower_is_better=False)]
    out = ws.report("ablation")
    pl.write_reports(out, reports, extra)
    _print_table(reports)
    for e in extra:
        print(f"{e['better']} better than {e['than']} on {e['metric']}: {'yes' if e['holds'] else 'no'}")
    print(f"wrote {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "selfcheck": cmd_selfcheck,
    "reproduce": cmd_reproduce,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, DivergenceError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, pl.MissingArtifact, pl.MixedConfigError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
