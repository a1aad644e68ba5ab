"""Per-scale transformer encoder/decoder, quality head and cross-scale averaging.

Each scale owns an independent parameter group (``scale1.*``, ``scale2.*``,
...).  The encoder sees difference features, the decoder sees reference
features and attends to the encoder output, and the head reads the decoder's
quality-token row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import FeatureVolume, check_image, scale_features
from .config import parse_scale, scale_key, scale_label
from .errors import DimensionError, InputTooSmallError
from .nn import LinearLayer, ParamStore, linear_forward, mha_forward, mlp_forward
from .tensor import Tensor


def embed_sequence(f: Tensor, reduce_w: Tensor, quality_emb: Tensor, pos_emb: Tensor,
                   grid: tuple[int, int] | None = None) -> Tensor:
    """Project C×h×w features to D channels, flatten to h*w tokens (row-major),
    prepend the quality token and add the positional embedding.

    Accepts a leading batch axis.
    """
    h, w = f.shape[-2:]
    if grid is not None and (h, w) != tuple(grid):
        raise DimensionError(f"expected canonical {tuple(grid)} features, got {h}x{w}")
    D = reduce_w.shape[0]
    if pos_emb.shape != (1 + h * w, D) or quality_emb.shape != (1, D):
        raise DimensionError(f"embedding shapes {quality_emb.shape}, {pos_emb.shape} do not fit {D}x{h}x{w}")
    lead = f.shape[:-3]
    y = T.conv2d(f, reduce_w)
    y = T.transpose(T.reshape(y, (*lead, D, h * w)))
    q = quality_emb if not lead else T.broadcast_to(quality_emb, (*lead, 1, D))
    y = T.concat([q, y], axis=-2)
    pos = pos_emb if not lead else T.broadcast_to(pos_emb, y.shape)
    return y + pos


def _ln(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    gamma, beta = store.layer_norm(prefix)
    return T.layer_norm(x, gamma, beta, store.config.ln_eps)


def encode(seq: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """Post-norm self-attention encoder; output has the input's shape."""
    y = seq
    for i in range(store.config.n_layers):
        p = f"{prefix}.encoder.layer{i}"
        y = _ln(mha_forward(store.mha(f"{p}.mha"), y, y, y) + y, store, f"{p}.ln1")
        y = _ln(mlp_forward(store.mlp(f"{p}.mlp"), y) + y, store, f"{p}.ln2")
    return y


def decode(seq: Tensor, enc_out: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """Self-attention, cross-attention onto ``enc_out`` (keys and values), then MLP."""
    if seq.shape != enc_out.shape:
        raise DimensionError(f"decoder input {seq.shape} and encoder output {enc_out.shape} differ")
    z = seq
    for i in range(store.config.n_layers):
        p = f"{prefix}.decoder.layer{i}"
        z = _ln(mha_forward(store.mha(f"{p}.self_mha"), z, z, z) + z, store, f"{p}.ln1")
        z = _ln(mha_forward(store.mha(f"{p}.cross_mha"), z, enc_out, enc_out) + z, store, f"{p}.ln2")
        z = _ln(mlp_forward(store.mlp(f"{p}.mlp"), z) + z, store, f"{p}.ln3")
    return z


def head_score(dec_out: Tensor, fc1: LinearLayer, fc2: LinearLayer) -> Tensor:
    """FC -> ReLU -> FC on the quality-token row; returns one score per batch item."""
    first = T.index(dec_out, (..., 0, slice(None)))
    out = linear_forward(fc2, T.relu(linear_forward(fc1, first)))
    return T.reshape(out, out.shape[:-1])


def transformer_score(f_ref: Tensor, f_diff: Tensor, store: ParamStore, s: float) -> Tensor:
    """Score canonical (reference, difference) features with scale ``s``'s transformer."""
    p = scale_key(s)
    grid = store.config.grid

    def emb(stream, f):
        e = f"{p}.{stream}.embed"
        return embed_sequence(f, store[f"{e}.reduce"], store[f"{e}.quality"], store[f"{e}.pos"], grid)

    enc_out = encode(emb("encoder", f_diff), store, p)
    dec_out = decode(emb("decoder", f_ref), enc_out, store, p)
    return head_score(dec_out, store.linear(f"{p}.head.fc1"), store.linear(f"{p}.head.fc2"))


def scale_forward(ref: Tensor, dist: Tensor, s: float, store: ParamStore) -> Tensor:
    """Differentiable score(s) for an image pair (or batch of pairs) at one scale."""
    f_ref, f_diff = scale_features(ref, dist, s, store)
    return transformer_score(f_ref.data, f_diff.data, store, s)


def score_features(f_ref: FeatureVolume, f_diff: FeatureVolume, store: ParamStore) -> float:
    """Score precomputed canonical features (e.g. imported ``.fvol`` volumes)."""
    if f_ref.scale_id != f_diff.scale_id:
        raise DimensionError("reference and difference volumes come from different scales")
    if f_ref.channels != store.config.channels:
        raise DimensionError(f"volume has {f_ref.channels} channels, model expects {store.config.channels}")
    return transformer_score(f_ref.data, f_diff.data, store, f_ref.scale_id).item()


def _as_image(x, store: ParamStore) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.dtype != np.dtype(store.config.dtype):
        t = Tensor(t.data.astype(store.config.dtype))
    return check_image(t)


def score_scale(ref, dist, s: float, store: ParamStore) -> float:
    ref, dist = _as_image(ref, store), _as_image(dist, store)
    if ref.shape != dist.shape:
        raise DimensionError(f"reference {ref.shape} and distorted {dist.shape} differ in size")
    return scale_forward(ref, dist, parse_scale(s), store).item()


@dataclass
class ScaleScores:
    """Per-scale predictions keyed by scale id, in processing order."""

    scores: dict[float, float] = field(default_factory=dict)

    def __getitem__(self, s) -> float:
        return self.scores[parse_scale(s)]

    @property
    def s1(self):
        return self.scores.get(1.0)

    @property
    def s2(self):
        return self.scores.get(2.0)

    @property
    def s3(self):
        return self.scores.get(3.0)

    @property
    def s05(self):
        return self.scores.get(0.5)

    def mean(self) -> float:
        total = 0.0
        for v in self.scores.values():
            total += v
        return total / len(self.scores)

    def as_dict(self) -> dict[str, float]:
        return {scale_label(s): v for s, v in self.scores.items()}


def score_pair(ref, dist, store: ParamStore, scales=None) -> tuple[float, ScaleScores]:
    """Final score = arithmetic mean of the per-scale scores (all model scales by default)."""
    scales = store.config.scales if scales is None else tuple(parse_scale(s) for s in scales)
    for s in scales:
        if s not in store.config.scales:
            raise DimensionError(f"model has no transformer for scale {s}")
    per = ScaleScores({s: score_scale(ref, dist, s, store) for s in scales})
    return per.mean(), per


def patch_grid(H: int, W: int, patch: int, M: int) -> list[tuple[int, int]]:
    """Top-left corners of ``M`` patches on a uniform grid.

    Columns = ceil(sqrt(M)), rows = ceil(M / columns); offsets span the full
    range (corners included) and the first ``M`` positions in row-major order
    are used.  ``M == 1`` gives the centre patch.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if H < patch or W < patch:
        raise InputTooSmallError(f"image {H}x{W} smaller than patch {patch}")
    if M == 1:
        return [((H - patch) // 2, (W - patch) // 2)]
    cols = int(np.ceil(np.sqrt(M)))
    rows = int(np.ceil(M / cols))

    def offsets(n, span):
        if n == 1:
            return [span // 2]
        return [int(round(i * span / (n - 1))) for i in range(n)]

    ys, xs = offsets(rows, H - patch), offsets(cols, W - patch)
    return [(y, x) for y in ys for x in xs][:M]


def ensemble_pair(ref, dist, M: int, store: ParamStore, patch: int, scales=None) -> tuple[float, ScaleScores]:
    """Score ``M`` deterministic patches.

    Returns the mean of the patch final scores and the per-scale patch means.
    """
    ref, dist = _as_image(ref, store), _as_image(dist, store)
    if ref.shape != dist.shape:
        raise DimensionError("reference and distorted images differ in size")
    H, W = ref.shape[-2:]
    corners = patch_grid(H, W, patch, M)
    total = 0.0
    per_total: dict[float, float] = {}
    for y, x in corners:
        win = (slice(None), slice(y, y + patch), slice(x, x + patch))
        final, per = score_pair(Tensor(ref.data[win]), Tensor(dist.data[win]), store, scales)
        total += final
        for s, v in per.scores.items():
            per_total[s] = per_total.get(s, 0.0) + v
    n = len(corners)
    return total / n, ScaleScores({s: v / n for s, v in per_total.items()})


def ensemble_score(ref, dist, M: int, store: ParamStore, patch: int, scales=None) -> float:
    """Mean of the final scores of ``M`` deterministic patches."""
    return ensemble_pair(ref, dist, M, store, patch, scales)[0]
