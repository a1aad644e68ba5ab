"""Manifests, image decoding, the ``.fvol`` feature-volume format and synthetic data."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .backbone import FeatureVolume
from .config import REFERENCE_FEATURE_SIZES, N_BLOCKS, parse_scale
from .errors import (DimensionError, FormatError, ImageDecodeError, ManifestError,
                     TruncatedFileError, VersionError)
from .tensor import Tensor

MANIFEST_HEADER = ("ref_path", "dist_path", "mos")


@dataclass(frozen=True)
class ManifestRow:
    ref_path: Path
    dist_path: Path
    mos: float


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @property
    def mos(self) -> np.ndarray:
        return np.array([r.mos for r in self.rows], dtype=np.float64)


def load_manifest(path) -> Manifest:
    """Parse a ``ref_path,dist_path,mos`` CSV; relative paths resolve against its directory.

    Row numbers in errors are file line numbers (the header is row 1).
    """
    path = Path(path)
    root = path.parent.resolve()
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except UnicodeDecodeError as e:
        raise ManifestError(f"manifest is not UTF-8: {e}") from None
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
        raise ManifestError(f"expected header {','.join(MANIFEST_HEADER)}", row=1)
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != 3:
            raise ManifestError(f"expected 3 fields, got {len(rec)}", row=lineno)
        ref, dist, mos_text = (c.strip() for c in rec)
        try:
            mos = float(mos_text)
        except ValueError:
            raise ManifestError(f"bad mos value {mos_text!r}", row=lineno) from None
        if not math.isfinite(mos):
            raise ManifestError(f"non-finite mos {mos_text!r}", row=lineno)
        ref_p, dist_p = root / ref, root / dist
        for p in (ref_p, dist_p):
            if not p.is_file():
                raise ManifestError(f"missing file {p}", row=lineno)
        rows.append(ManifestRow(ref_p, dist_p, mos))
    if not rows:
        raise ManifestError(f"manifest {path} has no rows")
    return Manifest(rows, root)


def write_manifest(path, rows) -> None:
    """Write ``(ref, dist, mos)`` rows; paths are written relative to the manifest when possible."""
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for ref, dist, mos in rows:
            w.writerow([_rel(ref, base), _rel(dist, base), repr(float(mos))])


def _rel(p, base: Path) -> str:
    p = Path(p).resolve()
    try:
        return p.relative_to(base).as_posix()
    except ValueError:
        return str(p)


# ---------------------------------------------------------------------------
# images


def decode_image(path) -> Tensor:
    """Decode an 8-bit PNG/BMP to a 3×H×W float32 tensor in [0, 1] (grayscale is replicated)."""
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "BMP"):
                raise ImageDecodeError(f"{path}: unsupported format {im.format}")
            if im.mode not in ("L", "RGB"):
                raise ImageDecodeError(f"{path}: unsupported mode {im.mode} (need 8-bit L or RGB)")
            arr = np.asarray(im.convert("RGB") if im.mode == "L" else im, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ImageDecodeError(f"{path}: {e}") from None
    return Tensor(arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def encode_image(img, path) -> None:
    """Write a 3×H×W array in [0, 1] as an 8-bit image (format from the suffix)."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, "RGB").save(path)


# ---------------------------------------------------------------------------
# feature volumes

FVOL_MAGIC = b"FVOL"
FVOL_VERSION = 1
_FVOL_HEADER = struct.Struct("<4sIIIIf")
PAPER_CHANNELS = 320 * N_BLOCKS


def fvol_bytes(f: FeatureVolume) -> bytes:
    if f.data.ndim != 3:
        raise DimensionError("only single volumes (C×H×W) can be written")
    C, H, W = f.shape
    head = _FVOL_HEADER.pack(FVOL_MAGIC, FVOL_VERSION, C, H, W, f.scale_id)
    return head + np.ascontiguousarray(f.data.data, dtype="<f4").tobytes()


def save_fvol(f: FeatureVolume, path) -> None:
    Path(path).write_bytes(fvol_bytes(f))


def parse_fvol(buf: bytes, paper_shape: bool = False) -> FeatureVolume:
    if len(buf) < _FVOL_HEADER.size:
        raise TruncatedFileError(f"fvol header needs {_FVOL_HEADER.size} bytes, got {len(buf)}")
    magic, version, C, H, W, scale = _FVOL_HEADER.unpack_from(buf)
    if magic != FVOL_MAGIC:
        raise FormatError("not an .fvol file (bad magic)")
    if version != FVOL_VERSION:
        raise VersionError(f"unsupported fvol version {version}")
    if min(C, H, W) < 1:
        raise DimensionError(f"bad fvol shape {C}x{H}x{W}")
    try:
        scale = parse_scale(scale)
    except Exception:
        raise FormatError(f"bad scale id {scale}") from None
    expected = C * H * W * 4
    payload = buf[_FVOL_HEADER.size:]
    if len(payload) != expected:
        raise TruncatedFileError(f"fvol payload is {len(payload)} bytes, header implies {expected}")
    if paper_shape:
        native = REFERENCE_FEATURE_SIZES[scale]
        if C != PAPER_CHANNELS:
            raise DimensionError(f"paper-shape volumes have {PAPER_CHANNELS} channels, got {C}")
        if (H, W) not in ((21, 21), (native, native)):
            raise DimensionError(f"paper-shape scale {scale} volume must be 21x21 or {native}x{native}, got {H}x{W}")
    data = np.frombuffer(payload, dtype="<f4").reshape(C, H, W).astype(np.float32)
    return FeatureVolume(Tensor(data), scale, source="imported")


def load_fvol(path, paper_shape: bool = False) -> FeatureVolume:
    return parse_fvol(Path(path).read_bytes(), paper_shape)


# ---------------------------------------------------------------------------
# synthetic data


def noise_texture(size: int, seed: int, smooth: float = 1.5) -> np.ndarray:
    """Smoothed Gaussian noise, rescaled per channel to [0, 1]; shape 3×size×size."""
    rng = np.random.default_rng(seed)
    x = gaussian_filter(rng.standard_normal((3, size, size)), sigma=(0, smooth, smooth), mode="wrap")
    lo = x.min(axis=(1, 2), keepdims=True)
    hi = x.max(axis=(1, 2), keepdims=True)
    return (x - lo) / (hi - lo)


def distort(img: np.ndarray, kind: str, strength: float, seed: int) -> np.ndarray:
    if kind == "blur":
        out = gaussian_filter(img, sigma=(0, strength, strength), mode="reflect")
    elif kind == "noise":
        out = img + np.random.default_rng(seed).normal(0.0, strength, img.shape)
    else:
        raise ValueError(f"unknown distortion {kind!r}")
    return np.clip(out, 0.0, 1.0)


def synthetic_pairs(n_pairs: int = 8, size: int = 64, n_refs: int = 2, seed: int = 0):
    """Graded blur/noise distortions of seeded noise textures.

    Pair ``k`` (0-based) uses reference ``k % n_refs``, alternates blur and
    noise, and has strength proportional to ``k+1``; MOS falls linearly from 1
    to 0.2 with ``k``.
    """
    refs = [noise_texture(size, seed * 1000 + i) for i in range(n_refs)]
    out = []
    for k in range(n_pairs):
        level = k + 1
        if k % 2 == 0:
            dist = distort(refs[k % n_refs], "blur", 0.4 * level, seed)
        else:
            dist = distort(refs[k % n_refs], "noise", 0.025 * level, seed * 1000 + 500 + k)
        mos = 1.0 - 0.8 * k / max(n_pairs - 1, 1)
        out.append((refs[k % n_refs], dist, mos))
    return out


def write_synthetic_dataset(directory, n_pairs: int = 8, size: int = 64, n_refs: int = 2, seed: int = 0) -> Path:
    """Write PNGs plus ``manifest.csv`` into ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    written = set()
    for k, (ref, dist, mos) in enumerate(synthetic_pairs(n_pairs, size, n_refs, seed)):
        ref_path = directory / f"ref_{k % n_refs}.png"
        if ref_path not in written:
            encode_image(ref, ref_path)
            written.add(ref_path)
        dist_path = directory / f"dist_{k:03d}.png"
        encode_image(dist, dist_path)
        rows.append((ref_path, dist_path, mos))
    manifest = directory / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest
