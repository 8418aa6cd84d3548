"""``dpcnet`` command line: synth, train, predict, evaluate, gradcheck.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck
from .config import ConfigError, config_to_dict, load_config
from .data import TARGET_SPACING, preprocess, resize, synth_phantom
from .inference import predict_volume
from .io import LabelVolume, MvolError, Volume, read_manifest, read_mvol, write_manifest, write_mvol
from .metrics import evaluate_class, write_report
from .model import build, count_params
from .trainer import CheckpointError, NonFiniteError, load_cases, load_checkpoint, save_checkpoint, train

log = logging.getLogger("dpcnet")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _shape(text: str):
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use N or DxHxW") from None
    if len(dims) == 1:
        dims = dims * 3
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use N or DxHxW")
    return tuple(dims)


def cmd_synth(args) -> int:
    if min(args.shape) < 32:
        raise UsageError(f"phantom shape must be at least 32 per axis, got {args.shape}")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_train = max(1, int(round(0.8 * args.count)))
    entries = []
    for i in range(args.count):
        v, l = synth_phantom([args.seed, i], args.shape, n_tumors=args.tumors)
        img, lab = f"case_{i:03d}_image.mvol", f"case_{i:03d}_label.mvol"
        write_mvol(out / img, v)
        write_mvol(out / lab, l)
        entries.append({"image": img, "label": lab, "split": "train" if i < n_train else "val"})
    write_manifest(out / "manifest.json", entries)
    print(f"wrote {args.count} phantoms ({n_train} train, {args.count - n_train} val) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.dry_run:
        counts = count_params(build(cfg.model, seed=cfg.train.seed))
        for k, v in counts.items():
            print(f"{k:8s} {v}")
        return EXIT_OK
    if cfg.data.manifest is None:
        raise ConfigError("data.manifest is required for training")
    out_dir = Path(args.out) if args.out else cfg.resolve(cfg.train.out_dir)
    try:
        entries = read_manifest(cfg.resolve(cfg.data.manifest))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"manifest: {exc}") from None
    tcfg = cfg.train_config()
    cases = load_cases(entries, cfg.data.target_spacing)
    if args.resume and (out_dir / "last.dpck").exists():
        model, state = load_checkpoint(out_dir / "last.dpck", cfg.model)
        print(f"resuming from epoch {state.epoch}")
    else:
        model, state = build(cfg.model, seed=tcfg.seed), None
    state, records = train(model, cases, tcfg, out_dir=out_dir, state=state)
    if records:
        r = records[-1]
        print(f"epoch {r.epoch} iter {r.iteration} train_loss {r.train_loss:.6f}")
    # Inference settings travel with the final checkpoint.
    state.extra = {"patch_size": list(tcfg.patch_size), "target_spacing": list(cfg.data.target_spacing), "run": config_to_dict(cfg)}
    save_checkpoint(model, state, out_dir / "final.dpck")
    print(f"wrote {out_dir / 'final.dpck'}")
    return EXIT_OK


def _restore_grid(labels: np.ndarray, shape) -> np.ndarray:
    return resize(labels, shape, order=0)


def cmd_predict(args) -> int:
    model, state = load_checkpoint(args.checkpoint)
    v = read_mvol(args.input)
    if not isinstance(v, Volume):
        raise UsageError(f"{args.input} is a label volume; predict needs an image")
    extra = state.extra
    patch = tuple(args.patch_size) if args.patch_size else tuple(extra.get("patch_size", (128, 128, 128)))
    target = tuple(extra.get("target_spacing", TARGET_SPACING))
    if any(p % 2 ** (model.config.levels - 1) for p in patch):
        raise UsageError(f"patch size {patch} is incompatible with {model.config.levels} levels")
    pv = preprocess(v, target)
    labels, probs = predict_volume(model, pv, patch)
    out = LabelVolume(_restore_grid(labels.labels, v.shape), v.spacing)
    write_mvol(args.out, out)
    if args.probs:
        pdir = Path(args.probs)
        pdir.mkdir(parents=True, exist_ok=True)
        for c in range(probs.shape[0]):
            pc = resize(probs[c].astype(np.float64), v.shape, order=1).astype(np.float32)
            write_mvol(pdir / f"prob_class{c}.mvol", Volume(pc, v.spacing, "normalized"))
    print(f"wrote {args.out} shape {out.shape} labels {sorted(int(x) for x in np.unique(out.labels))}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred, gt = read_mvol(args.pred), read_mvol(args.gt)
    for p, v in ((args.pred, pred), (args.gt, gt)):
        if not isinstance(v, LabelVolume):
            raise UsageError(f"{p} is not a label volume")
    if pred.shape != gt.shape:
        print(f"error: prediction shape {pred.shape} != ground truth shape {gt.shape}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        classes = [int(c) for c in args.classes.split(",") if c.strip()]
    except ValueError:
        raise UsageError(f"bad --classes {args.classes!r}") from None
    vid = Path(args.pred).stem
    rows = [evaluate_class(vid, pred.labels, gt.labels, c, gt.spacing) for c in classes]
    write_report(args.csv, rows)
    for r in rows:
        print(f"class {r.cls}: dsc {r.dsc:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(seed=args.seed, e2e=not args.skip_e2e)
    failed = []
    for r in results:
        status = "PASS" if r.report.passed else "FAIL"
        print(f"{r.name:20s} max_rel_err {r.report.max_rel_err:.3e} tol {r.tol:.0e} {status}")
        if not r.report.passed:
            failed.append(r.name)
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpcnet", description="Volumetric liver/tumor segmentation toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic phantoms and a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--shape", type=_shape, default=(64, 64, 64))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tumors", type=int, default=2)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides train.out_dir)")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.dpck if present")
    p.add_argument("--dry-run", action="store_true", help="build the model, print parameter counts, exit")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="segment an image volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=_shape, default=None)
    p.add_argument("--probs", help="directory for per-class probability maps")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="compare a prediction with ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", default="1,2")
    p.add_argument("--csv", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-e2e", action="store_true", help="only the per-op checks")
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def thread_count() -> int:
    raw = os.environ.get("DPCNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DPCNET_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("DPCNET_THREADS must be >= 1")
    return n


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=thread_count()):
            return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (MvolError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
