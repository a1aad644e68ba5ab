"""Command-line interface.

    msfpt train --manifest M --config C --out CKPT [--seed S]
    msfpt score --ref A --dist B --ckpt CKPT [--scales 1,2,3,0.5] [--patches M]
    msfpt evaluate --manifest M --ckpt CKPT --report R.json [--patches M]
    msfpt dump-features --image X --scale S --ckpt CKPT --out X.fvol
    msfpt make-synthetic --out DIR [--pairs N] [--size S] [--seed S]

Failures print one JSON line ``{"error": <code>, "message": <text>}`` on
stderr and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from threadpoolctl import threadpool_limits

from .backbone import FeatureVolume, extract_features, resize_to_scale, to_canonical
from .checkpoint import Checkpoint, load_checkpoint
from .config import ModelConfig, TrainConfig, parse_scale, parse_scales
from .data import decode_image, load_manifest, save_fvol, write_synthetic_dataset
from .errors import ConfigError, MsfptError
from .metrics import correlations
from .model import ensemble_pair
from .train import train


def worker_threads() -> int:
    """Thread cap from ``MSFPT_THREADS`` (0 or unset = automatic)."""
    raw = os.environ.get("MSFPT_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MSFPT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("MSFPT_THREADS must be >= 0")
    return n


def thread_limit():
    n = worker_threads()
    return threadpool_limits(limits=n) if n > 0 else contextlib.nullcontext()


def load_run_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Read ``{"model": {...} | "preset": "desk"|"paper", "train": {...}}``."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    preset = raw.get("preset", "desk")
    if preset not in ("desk", "paper"):
        raise ConfigError(f"unknown preset {preset!r}")
    base = ModelConfig.desk() if preset == "desk" else ModelConfig.paper()
    model = dataclasses.replace(base, **raw.get("model", {})) if raw.get("model") else base
    if "train" not in raw:
        raise ConfigError(f"{path}: missing 'train' section")
    return model, TrainConfig.from_dict(raw["train"])


class Scorer:
    """A loaded checkpoint plus its MOS normalisation and training patch size."""

    def __init__(self, ckpt: Checkpoint):
        self.store = ckpt.store
        norm = ckpt.meta.get("mos_norm") or {"min": 0.0, "max": 1.0}
        self.lo, self.hi = float(norm["min"]), float(norm["max"])
        train_meta = ckpt.meta.get("train") or {}
        self.patch = train_meta.get("patch_size")

    def denormalize(self, v: float) -> float:
        span = self.hi - self.lo if self.hi > self.lo else 1.0
        return v * span + self.lo

    def score(self, ref, dist, patches: int = 1, scales=None):
        H, W = ref.shape[-2:]
        patch = self.patch if self.patch is not None else min(H, W)
        return ensemble_pair(ref, dist, patches, self.store, patch, scales)


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_run_config(args.config)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    manifest = load_manifest(args.manifest)
    stream = None if args.quiet else sys.stdout
    train(manifest, train_cfg, model_cfg, out=args.out, stream=stream, log_path=args.log)
    return 0


def cmd_score(args) -> int:
    scorer = Scorer(load_checkpoint(args.ckpt))
    scales = parse_scales(args.scales) if args.scales else None
    ref, dist = decode_image(args.ref), decode_image(args.dist)
    final, per = scorer.score(ref, dist, args.patches, scales)
    out = {
        "final": final,
        "final_raw": scorer.denormalize(final),
        "per_scale": per.as_dict(),
        "per_scale_raw": {k: scorer.denormalize(v) for k, v in per.as_dict().items()},
        "patches": args.patches,
    }
    print(json.dumps(out))
    return 0


def evaluate_manifest(manifest, scorer: Scorer, patches: int = 1, threads: int = 0) -> dict:
    """Score every row (possibly concurrently) and assemble the report in manifest order."""
    def job(row):
        final, _ = scorer.score(decode_image(row.ref_path), decode_image(row.dist_path), patches)
        return final

    t0 = time.perf_counter()
    workers = threads if threads > 0 else min(8, os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        finals = list(pool.map(job, manifest.rows))
    elapsed = time.perf_counter() - t0
    preds = [scorer.denormalize(f) for f in finals]
    metrics = correlations(preds, manifest.mos)
    return {
        "plcc": metrics["plcc"],
        "srcc": metrics["srcc"],
        "krcc": metrics["krcc"],
        "main_score": metrics["main_score"],
        "n": len(manifest),
        "rows": [
            {"ref_path": str(r.ref_path), "dist_path": str(r.dist_path), "mos": r.mos,
             "pred": p, "pred_norm": f}
            for r, p, f in zip(manifest.rows, preds, finals)
        ],
        "config": {"model": scorer.store.config.to_dict(), "patches": patches,
                   "mos_norm": {"min": scorer.lo, "max": scorer.hi}},
        "timing": {"seconds": elapsed, "per_row": elapsed / len(manifest)},
    }


def cmd_evaluate(args) -> int:
    scorer = Scorer(load_checkpoint(args.ckpt))
    manifest = load_manifest(args.manifest)
    report = evaluate_manifest(manifest, scorer, args.patches, worker_threads())
    report["config"]["checkpoint"] = str(args.ckpt)
    Path(args.report).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(json.dumps({k: report[k] for k in ("plcc", "srcc", "krcc", "main_score", "n")}))
    return 0


def cmd_dump_features(args) -> int:
    store = load_checkpoint(args.ckpt).store
    s = parse_scale(args.scale)
    img = decode_image(args.image)
    f = extract_features(resize_to_scale(img, s), store, s)
    if args.canonical:
        f = to_canonical(f, store.config.grid)
    save_fvol(FeatureVolume(f.data, s), args.out)
    print(json.dumps({"out": str(args.out), "shape": list(f.shape), "scale": s}))
    return 0


def cmd_make_synthetic(args) -> int:
    path = write_synthetic_dataset(args.out, args.pairs, args.size, seed=args.seed)
    print(json.dumps({"manifest": str(path)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msfpt", description="Multi-scale transformer FR-IQA")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train all scale transformers")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--log", help="also write step,lr,loss lines here")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="score one reference/distorted pair")
    s.add_argument("--ref", required=True)
    s.add_argument("--dist", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scales")
    s.add_argument("--patches", type=int, default=1)
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("evaluate", help="score a manifest and write a report")
    e.add_argument("--manifest", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--patches", type=int, default=1)
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("dump-features", help="write backbone features of one image as .fvol")
    d.add_argument("--image", required=True)
    d.add_argument("--scale", required=True)
    d.add_argument("--ckpt", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--canonical", action="store_true", help="resize to the model grid first")
    d.set_defaults(func=cmd_dump_features)

    m = sub.add_parser("make-synthetic", help="write a graded blur/noise dataset")
    m.add_argument("--out", required=True)
    m.add_argument("--pairs", type=int, default=8)
    m.add_argument("--size", type=int, default=64)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_synthetic)
    return p


def _fail(code: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "patches", 1) < 1:
        return _fail("config", "--patches must be >= 1")
    try:
        with thread_limit():
            return args.func(args)
    except MsfptError as e:
        return _fail(e.code, str(e))
    except FileNotFoundError as e:
        return _fail("missing_file", f"{e.filename or e}: not found")
    except (OSError, ValueError) as e:
        return _fail("error", str(e).splitlines()[0] if str(e) else type(e).__name__)


if __name__ == "__main__":
    sys.exit(main())
