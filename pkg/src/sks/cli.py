"""Command-line entry point: ``sks <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import load_synthetic_config, load_train_config
from .data import generate_dataset, ingest_volume, save_dataset, assign_splits
from .fusion import AblationFlags
from .gradcheck import finite_difference_check
from .losses import cross_entropy, dice_loss
from .model import SKSModel
from .train import (ABLATION_FIELDS, CSV_FIELDS, evaluate_checkpoint, format_csv, infer, run_ablation,
                    train_coarse, train_seg)

log = logging.getLogger("sks")


def _apply_flags(cfg, args):
    if any(getattr(args, k, False) for k in ("no_coarse_branch", "no_prompt_skip", "no_rcs")):
        cfg.ablation = AblationFlags(
            no_coarse_branch=cfg.ablation.no_coarse_branch or args.no_coarse_branch,
            no_prompt_skip=cfg.ablation.no_prompt_skip or args.no_prompt_skip,
            no_rcs=cfg.ablation.no_rcs or args.no_rcs,
        )
    return cfg


def cmd_gen_data(args) -> int:
    cfg = load_synthetic_config(args.config)
    ds = generate_dataset(cfg, args.out or cfg.output)
    n_pos = sum(s.coarse_label for s in ds.samples)
    print(f"wrote {len(ds.samples)} samples ({n_pos} with lesions) to {ds.root}")
    return 0


def cmd_ingest(args) -> int:
    samples = ingest_volume(args.volume, args.mask, args.id, args.lesion_label)
    splits = {s.id: args.split for s in samples}
    save_dataset(args.out, samples, splits, {"source": "volume", "volume_id": args.id})
    print(f"wrote {len(samples)} slices of {args.id} to {args.out}")
    return 0


def cmd_train_coarse(args) -> int:
    cfg = _apply_flags(load_train_config(args.config), args)
    if args.out:
        cfg.checkpoint = args.out
    result = train_coarse(cfg)
    final = result.history[-1]
    print(f"coarse stage done in {result.seconds:.1f}s: train accuracy {final.get('train_accuracy')}, "
          f"checkpoint {result.checkpoint}")
    return 0


def cmd_train_seg(args) -> int:
    cfg = _apply_flags(load_train_config(args.config), args)
    if args.out:
        cfg.checkpoint = args.out
    result = train_seg(cfg, coarse=args.coarse or cfg.coarse_checkpoint)
    final = result.history[-1] if result.history else {}
    print(f"segmentation stage done in {result.seconds:.1f}s: train DSC {final.get('train_dsc')}, "
          f"checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    result = evaluate_checkpoint(args.ckpt, args.split, args.dataset)
    text = format_csv([result.row()], CSV_FIELDS)
    if args.csv:
        Path(args.csv).write_text(text)
    sys.stdout.write(text)
    per_case = np.mean(result.per_case_dsc) if result.per_case_dsc else float("nan")
    print(f"# mean per-case DSC {per_case:.4f} over {len(result.per_case_dsc)} images", file=sys.stderr)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_train_config(args.config)
    if args.coarse:
        cfg.coarse_checkpoint = args.coarse
    rows = run_ablation(cfg, args.out)
    sys.stdout.write(format_csv(rows, ABLATION_FIELDS))
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_infer(args) -> int:
    out = args.out or str(Path(args.input).with_suffix(""))
    mask, _ = infer(args.ckpt, args.input, out)
    print(f"wrote {out}.mask.pgm ({mask.shape[1]}x{mask.shape[0]}, {int(mask.sum())} foreground px) "
          f"and {out}.logits.skst")
    return 0


def gradcheck_model(cfg, samples: int, perturb: float, seed: int):
    """Check the full model's gradients at a random point near its initialization.

    Every parameter is offset by N(0, perturb²) so gradients are not
    vanishingly small, which would make the relative error meaningless.
    """
    with T.precision("f64"):
        model = SKSModel(cfg.model, cfg.ablation, seed=cfg.seed)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x9C])))
        for p in model.parameters():
            p.data = p.data + perturb * rng.standard_normal(p.shape)
        side, ch = cfg.model.image_size, cfg.model.in_channels
        image = rng.random((2, side, side, ch))
        mask = (rng.random((2, side, side, 1)) > 0.6).astype(np.float64)
        labels = np.array([0, 1])

        def loss_fn(m):
            out = m(T.Tensor(image))
            loss = dice_loss(T.sigmoid(out.mask_logits), mask)
            if out.coarse_logits is not None:
                loss = loss + cross_entropy(out.coarse_logits, labels)
            return loss

        return finite_difference_check(model, loss_fn, samples, h=1e-5, seed=seed)


def cmd_gradcheck(args) -> int:
    cfg = _apply_flags(load_train_config(args.config), args)
    t0 = time.perf_counter()
    report = gradcheck_model(cfg, args.samples, args.perturb, cfg.seed)
    elapsed = time.perf_counter() - t0
    ok = report.passed(args.tol)
    print(json.dumps({"checked": report.checked, "max_rel_error": report.max_rel_error,
                      "worst": list(report.worst) if report.worst else None, "seconds": round(elapsed, 2),
                      "tolerance": args.tol, "passed": ok}))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sks", description="Dual-branch coarse-to-fine lesion segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def ablation_flags(p):
        p.add_argument("--no-coarse-branch", action="store_true", help="drop the coarse branch (and FSS, prompt)")
        p.add_argument("--no-prompt-skip", action="store_true")
        p.add_argument("--no-rcs", action="store_true")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ingest", help="convert a HU volume + mask (SKST) into 2.5D samples")
    p.add_argument("--volume", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--lesion-label", type=int, default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train-coarse", help="stage 1: pretrain the coarse classification branch")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="checkpoint path (overrides config)")
    ablation_flags(p)
    p.set_defaults(func=cmd_train_coarse)

    p = sub.add_parser("train-seg", help="stage 2: train fine branch + decoder")
    p.add_argument("--config", required=True)
    p.add_argument("--coarse", help="stage-1 checkpoint (.skpt)")
    p.add_argument("--out", help="checkpoint path (overrides config)")
    ablation_flags(p)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("eval", help="DSC/JC/precision/recall of a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--dataset", help="dataset directory (defaults to the checkpoint's config)")
    p.add_argument("--csv", help="also write the row to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train + evaluate the four ablation variants")
    p.add_argument("--config", required=True)
    p.add_argument("--coarse", help="stage-1 checkpoint (overrides config)")
    p.add_argument("--out", default="ablation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("infer", help="predict a mask for one [H, W, 3] SKST image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", help="output prefix (default: input path without extension)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model's gradients")
    p.add_argument("--config", required=True)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--perturb", type=float, default=0.3)
    p.add_argument("--tol", type=float, default=1e-3)
    ablation_flags(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
