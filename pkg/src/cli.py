"""CLI entrypoint: train, resume, translate, synthesize, evaluate, reenact.

Exit codes: 0 ok, 2 usage/config/provider errors, 3 numeric failure
(non-finite loss: the last good checkpoint stays on disk).
"""
from __future__ import annotations
import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import audit
from .audit import log_event
from .checkpoint_store import resolve_checkpoint, run_lock
from .config import SETTINGS, Config, config_hash, default_config, load_config, save_config
from .evaluation import EvaluationOrchestrator
from .guardrails import (ConfigError, DimensionError, MaskFormatError, MaskInvariantError, NonFiniteLossError,
                         NumericError, ProviderError, RunLockedError, UsageError)
from .image_io import read_raster, read_rgb, save_rgb, write_raster
from .ingest import decode_mask, encode_mask
from .manipulation import translate
from .metrics import export_pr_curves, format_report
from .synthesis import reenact
from .trainer import Trainer, build_state, load_datasets, load_state

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


def _resolve_config(args) -> Config:
    if args.config:
        return load_config(args.config)
    return default_config(args.stage, args.scale)


def _run_dir_for(cfg: Config, explicit: Optional[str]) -> Path:
    if explicit:
        return Path(explicit)
    return Path(SETTINGS.runs_dir) / f"{cfg.stage}-{cfg.scale}-{config_hash(cfg)[:8]}"


def _load_mask(path: str | Path, num_classes: int) -> torch.Tensor:
    return torch.from_numpy(decode_mask(read_raster(path), num_classes)).unsqueeze(0)


def _load_frozen(checkpoint: str, stage: str):
    state = load_state(checkpoint)
    if state.stage != stage:
        raise UsageError(f"{checkpoint} is a {state.stage} checkpoint, this command needs {stage}")
    state.nets.eval()
    return state


def _parse_bits(text: str, n: int) -> torch.Tensor:
    try:
        bits = [int(b) for b in text.replace(" ", "").split(",") if b != ""]
    except ValueError as e:
        raise UsageError(f"--target must be comma-separated 0/1 bits, got {text!r}") from e
    if len(bits) != n or any(b not in (0, 1) for b in bits):
        raise UsageError(f"--target needs {n} bits of 0/1, got {text!r}")
    return torch.tensor([bits], dtype=torch.long)


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, optim=dataclasses.replace(cfg.optim, steps=args.steps))
    run_dir = _run_dir_for(cfg, args.run_dir)
    audit.configure(run_dir)
    with run_lock(run_dir):
        save_config(cfg, run_dir / "config.yaml")
        train_set, _ = load_datasets(cfg)
        state = build_state(cfg)
        Trainer(state, train_set, run_dir).run()
    print(f"trained {cfg.stage} to step {state.step}; run dir {run_dir}")
    return EXIT_OK


def cmd_resume(args) -> int:
    ckpt = resolve_checkpoint(args.checkpoint)
    run_dir = Path(args.run_dir) if args.run_dir else ckpt.parent.parent
    audit.configure(run_dir)
    with run_lock(run_dir):
        state = load_state(ckpt)
        train_set, _ = load_datasets(state.config)
        until = args.steps if args.steps is not None else state.config.optim.steps
        Trainer(state, train_set, run_dir).run(until)
    print(f"resumed {state.stage} to step {state.step}; run dir {run_dir}")
    return EXIT_OK


def cmd_translate(args) -> int:
    if args.mode == "reference" and not args.ref:
        raise UsageError("--mode reference needs --ref")
    out_dir = Path(args.out)
    audit.configure(out_dir)
    state = _load_frozen(args.checkpoint, "manipulation")
    model = state.config.model
    x = _load_mask(args.mask, model.num_classes)
    target = _parse_bits(args.target, model.num_domains)
    reference = _load_mask(args.ref, model.num_classes) if args.ref else None
    rng = torch.Generator().manual_seed(args.seed)
    stem = Path(args.mask).stem
    written = []
    for k in range(args.num):
        out = translate(state.nets, x, target, mode=args.mode, reference=reference, rng=rng)
        path = out_dir / f"{stem}_{args.mode}_{k:02d}.png"
        write_raster(path, encode_mask(out[0]))
        written.append(str(path))
    log_event("translate", {"checkpoint": str(args.checkpoint), "mask": str(args.mask), "mode": args.mode,
                            "target": args.target, "num": args.num, "seed": args.seed, "outputs": written})
    print("\n".join(written))
    return EXIT_OK


def cmd_synthesize(args) -> int:
    if args.style == "reference" and not (args.ref_image and args.ref_mask):
        raise UsageError("--style reference needs --ref-image and --ref-mask")
    out_dir = Path(args.out)
    audit.configure(out_dir)
    state = _load_frozen(args.checkpoint, "synthesis")
    nets, model = state.nets, state.config.model
    rng = torch.Generator().manual_seed(args.seed)
    written = []
    with torch.no_grad():
        if args.style == "reference":
            ref_mask = _load_mask(args.ref_mask, model.num_classes)
            ref_image = torch.from_numpy(read_rgb(args.ref_image, size=ref_mask.shape[-2:])).unsqueeze(0)
            sm = nets.synth_encode(ref_image, ref_mask)
        else:
            sm = nets.synth_map(nets.sample_code(1, rng))
        for mask_path in args.mask:
            m = _load_mask(mask_path, model.num_classes)
            image = nets.synth_generate(m, sm, noise=nets.generator.make_noise(1, rng), clamp=True)
            path = out_dir / f"{Path(mask_path).stem}_{args.style}.png"
            save_rgb(path, image[0])
            written.append(str(path))
    log_event("synthesize", {"checkpoint": str(args.checkpoint), "style": args.style, "seed": args.seed,
                             "outputs": written})
    print("\n".join(written))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    audit.configure(out.parent)
    state = load_state(args.checkpoint)
    state.nets.eval()
    _, test_set = load_datasets(state.config)
    overrides = {"num_samples": args.num, "fid_samples": args.fid_samples, "seed": args.seed,
                 "embedding": args.embedding, "distance": args.distance, "attributes": args.attributes,
                 "pose": args.pose}
    ec = dataclasses.replace(state.config.evaluation, **{k: v for k, v in overrides.items() if v is not None})
    result = EvaluationOrchestrator(state.config, state.nets, test_set, ec).run()
    out.parent.mkdir(parents=True, exist_ok=True)
    result["report"].to_csv(out, index=False)
    if args.pr_dir and result["curves"]:
        export_pr_curves(result["curves"], args.pr_dir)
    log_event("evaluate", {"checkpoint": str(args.checkpoint), "report": str(out), **result["diagnostics"]})
    print(format_report(result["report"]))
    return EXIT_OK


def cmd_reenact(args) -> int:
    frames_dir = Path(args.masks)
    mask_paths = sorted(frames_dir.glob("*.png")) if frames_dir.is_dir() else []
    if not mask_paths:
        raise UsageError(f"no mask frames (*.png) in {frames_dir}")
    out_dir = Path(args.out)
    audit.configure(out_dir)
    state = _load_frozen(args.checkpoint, "synthesis")
    nets, model = state.nets, state.config.model
    ref_mask = _load_mask(args.style_mask, model.num_classes)
    ref_image = torch.from_numpy(read_rgb(args.style_image, size=ref_mask.shape[-2:])).unsqueeze(0)
    with torch.no_grad():
        sm = nets.synth_encode(ref_image, ref_mask)
    frames = [_load_mask(p, model.num_classes)[0] for p in mask_paths]
    video = reenact(nets, frames, sm, seed=args.seed, clamp=True)
    written = []
    for i, frame in enumerate(video):
        path = out_dir / f"frame_{i:05d}.png"
        save_rgb(path, frame)
        written.append(str(path))
    log_event("reenact", {"checkpoint": str(args.checkpoint), "frames": len(written), "seed": args.seed})
    print(f"wrote {len(written)} frames to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m src.cli",
                                     description="Semantic mask manipulation and mask-driven face synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a stage from a config file or the built-in defaults")
    p.add_argument("--config", help="YAML config; overrides --stage/--scale")
    p.add_argument("--stage", default="manipulation", choices=["manipulation", "synthesis"])
    p.add_argument("--scale", default="toy", choices=["toy", "full"])
    p.add_argument("--steps", type=int, help="Override optim.steps")
    p.add_argument("--run-dir", help="Run directory (default: $RUNS_DIR/<stage>-<scale>-<hash>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("resume", help="Continue training from a checkpoint or run directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, help="Total step count to reach")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("translate", help="Manipulate a semantic mask")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask", required=True, help="Class-index PNG")
    p.add_argument("--target", required=True, help="Comma-separated target bits, one per domain")
    p.add_argument("--mode", default="latent", choices=["latent", "reference"])
    p.add_argument("--ref", help="Reference mask PNG (reference mode)")
    p.add_argument("--num", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="outputs/translate")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("synthesize", help="Render RGB faces from semantic masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask", required=True, nargs="+")
    p.add_argument("--style", default="latent", choices=["latent", "reference"])
    p.add_argument("--ref-image")
    p.add_argument("--ref-mask")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="outputs/synthesize")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="Run the evaluation protocol on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--num", type=int, help="Override evaluation.num_samples")
    p.add_argument("--fid-samples", type=int, help="Override evaluation.fid_samples")
    p.add_argument("--seed", type=int, help="Override evaluation.seed")
    p.add_argument("--embedding", help="Override evaluation.embedding")
    p.add_argument("--distance", help="Override evaluation.distance")
    p.add_argument("--attributes", help="Override evaluation.attributes")
    p.add_argument("--pose", help="Override evaluation.pose")
    p.add_argument("--out", default="outputs/evaluation/report.csv")
    p.add_argument("--pr-dir", help="Directory for per-manipulation PR curve CSVs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reenact", help="Drive one style with a sequence of masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--masks", required=True, help="Directory of mask frames (*.png, sorted by name)")
    p.add_argument("--style-image", required=True)
    p.add_argument("--style-mask", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="outputs/reenact")
    p.set_defaults(func=cmd_reenact)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        log_event("config_error", {"command": args.command, "field": e.field_path, "error": str(e)})
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, NumericError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ProviderError, RunLockedError, MaskFormatError, MaskInvariantError, DimensionError,
            FileNotFoundError) as e:
        log_event("usage_error", {"command": args.command, "error": str(e)})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
