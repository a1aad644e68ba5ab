"""Training loop: paired augmentation, per-scale L1 losses, Adam, cosine schedule."""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import TextIO

import numpy as np

from .backbone import scale_features
from .checkpoint import save_checkpoint
from .config import ModelConfig, TrainConfig
from .data import Manifest, decode_image
from .errors import InputTooSmallError, MsfptError, NonFiniteError
from .model import transformer_score
from .nn import ParamStore, init_params
from .optim import AdamState, adam_step, cosine_lr, l1_loss
from .tensor import Tensor


class TrainingError(MsfptError, RuntimeError):
    code = "training"


@dataclass(frozen=True)
class Transform:
    top: int
    left: int
    hflip: bool = False
    vflip: bool = False
    rot: int = 0  # quarter turns, counter-clockwise


def center_transform(shape, patch: int) -> Transform:
    H, W = shape[-2:]
    if H < patch or W < patch:
        raise InputTooSmallError(f"image {H}x{W} smaller than patch {patch}")
    return Transform((H - patch) // 2, (W - patch) // 2)


def sample_transform(shape, patch: int, rng: np.random.Generator, enabled: bool = True) -> Transform:
    """Draw crop offset, flips and a k*90 degree rotation (fixed draw order)."""
    if not enabled:
        return center_transform(shape, patch)
    H, W = shape[-2:]
    if H < patch or W < patch:
        raise InputTooSmallError(f"image {H}x{W} smaller than patch {patch}")
    top = int(rng.integers(0, H - patch + 1))
    left = int(rng.integers(0, W - patch + 1))
    hflip = bool(rng.integers(0, 2))
    vflip = bool(rng.integers(0, 2))
    rot = int(rng.integers(0, 4))
    return Transform(top, left, hflip, vflip, rot)


def apply_transform(img: np.ndarray, t: Transform, patch: int) -> np.ndarray:
    out = img[..., t.top:t.top + patch, t.left:t.left + patch]
    if t.hflip:
        out = out[..., :, ::-1]
    if t.vflip:
        out = out[..., ::-1, :]
    if t.rot:
        out = np.rot90(out, t.rot, axes=(-2, -1))
    return np.ascontiguousarray(out)


def augment(ref, dist, patch: int, rng: np.random.Generator, enabled: bool = True):
    """Apply one shared random crop/flip/rotation to both images of a pair."""
    r = ref.data if isinstance(ref, Tensor) else np.asarray(ref)
    d = dist.data if isinstance(dist, Tensor) else np.asarray(dist)
    if r.shape != d.shape:
        raise ValueError(f"pair shapes differ: {r.shape} vs {d.shape}")
    t = sample_transform(r.shape, patch, rng, enabled)
    return apply_transform(r, t, patch), apply_transform(d, t, patch)


@dataclass
class TrainResult:
    store: ParamStore
    history: list[tuple[int, float, float]]
    optimizer: AdamState
    mos_norm: tuple[float, float]
    checkpoint: Path | None = None


class _FeatureCache:
    """Canonical per-scale features of augmented pairs, keyed by (row, transform, scale).

    Backbone weights are frozen, so features are a pure function of the key.
    Items are processed one at a time so values never depend on batch makeup.
    """

    def __init__(self, store: ParamStore, limit: int):
        self.store = store
        self.limit = limit
        self.entries: dict = {}

    def get(self, key, ref: np.ndarray, dist: np.ndarray, s: float):
        hit = self.entries.get(key)
        if hit is not None:
            return hit
        f_ref, f_diff = scale_features(Tensor(ref), Tensor(dist), s, self.store)
        value = (f_ref.data.data, f_diff.data.data)
        if len(self.entries) < self.limit:
            self.entries[key] = value
        return value


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    pool: list[int] = []
    while True:
        while len(pool) < batch_size:
            pool.extend(int(i) for i in rng.permutation(n))
        yield pool[:batch_size]
        del pool[:batch_size]


def normalize_mos(mos: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    lo, hi = float(mos.min()), float(mos.max())
    span = hi - lo if hi > lo else 1.0
    return (mos - lo) / span, (lo, hi)


def train(manifest: Manifest, cfg: TrainConfig, model_cfg: ModelConfig, out=None,
          stream: TextIO | None = sys.stdout, log_path=None, feature_cache: int = 50_000) -> TrainResult:
    """Train all scale transformers on shared batches; optionally write a checkpoint to ``out``.

    Emits ``step,lr,loss`` CSV lines every ``cfg.log_every`` steps (and on the
    last step) to ``stream`` and ``log_path``.
    """
    if len(manifest) == 0:
        raise TrainingError("empty manifest")
    store = init_params(model_cfg, cfg.seed)
    dtype = np.dtype(model_cfg.dtype)
    images: dict[Path, np.ndarray] = {}

    def image(p: Path) -> np.ndarray:
        if p not in images:
            images[p] = decode_image(p).data.astype(dtype)
        return images[p]

    targets, mos_norm = normalize_mos(manifest.mos)
    targets = targets.astype(dtype)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 0x7472])))
    batches = _batches(len(manifest), cfg.batch_size, rng)
    cache = _FeatureCache(store, feature_cache)
    opt = AdamState()
    history: list[tuple[int, float, float]] = []
    trainable = store.trainable()

    sinks: list[TextIO] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    if stream is not None:
        sinks.append(stream)
    if log_fh is not None:
        sinks.append(log_fh)

    def emit(line: str) -> None:
        for s in sinks:
            s.write(line + "\n")
            s.flush()

    try:
        emit("step,lr,loss")
        for step in range(cfg.total_steps):
            lr = cosine_lr(step, cfg.total_steps, cfg.lr)
            idx = next(batches)
            pairs = []
            for i in idx:
                row = manifest.rows[i]
                r, d = image(row.ref_path), image(row.dist_path)
                if r.shape != d.shape:
                    raise TrainingError(f"row {i}: reference and distorted sizes differ")
                t = sample_transform(r.shape, cfg.patch_size, rng, cfg.augment)
                pairs.append((i, t, apply_transform(r, t, cfg.patch_size), apply_transform(d, t, cfg.patch_size)))
            y = Tensor(targets[idx])
            try:
                total = None
                for s in model_cfg.scales:
                    feats = [cache.get((i, t, s), r, d, s) for i, t, r, d in pairs]
                    f_ref = Tensor(np.stack([f[0] for f in feats]))
                    f_diff = Tensor(np.stack([f[1] for f in feats]))
                    loss_s = l1_loss(transformer_score(f_ref, f_diff, store, s), y)
                    total = loss_s if total is None else total + loss_s
                store.zero_grad()
                total.backward()
            except NonFiniteError as e:
                raise TrainingError(f"non-finite value at step {step}: {e}") from None
            for name, p in trainable.items():
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise TrainingError(f"non-finite gradient for {name} at step {step}")
            adam_step(trainable, opt, lr, cfg)
            loss = total.item()
            history.append((step, lr, loss))
            if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
                emit(f"{step},{lr:.6e},{loss:.6f}")
    finally:
        if log_fh is not None:
            log_fh.close()
    store.zero_grad()

    result = TrainResult(store, history, opt, mos_norm)
    if out is not None:
        save_checkpoint(store, out, opt, training_meta(cfg, mos_norm))
        result.checkpoint = Path(out)
    return result


def training_meta(cfg: TrainConfig, mos_norm: tuple[float, float]) -> dict:
    return {"train": cfg.to_dict(), "mos_norm": {"min": mos_norm[0], "max": mos_norm[1]}}
