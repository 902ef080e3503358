"""Controlled input variants and geometric/temporal preprocessing.

Seven variants factor an RGB-D clip into its identity cues:

    RGB          3ch  raw color frames (background included)
    Depth        1ch  raw depth frames (background included)
    BinaryHand   1ch  near-class silhouette from per-frame Otsu on depth
    Hand3D       1ch  depth masked to the silhouette
    GrayHand     1ch  grayscale masked to the silhouette
    ColorHand    3ch  color masked to the silhouette
    ColorHand3D  4ch  ColorHand stacked with Hand3D

`apply_variant` outputs keep natural units (uint8 / millimeters) so the
structural identities between variants hold exactly; `normalize_variant`
maps to [0,1] floats for the network. Spatial preprocessing resizes to
171x128 (bilinear), crops 112x112 (random in train, centered in test),
and clips shorter than 16 frames are padded by repeating end frames.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import cv2
import numpy as np

from .seeds import rng_for

RESIZE_H, RESIZE_W = 128, 171
CROP = 112
MIN_CLIP_LEN = 16
DEPTH_NORM_RANGE = (300.0, 1500.0)  # mm clipped then scaled to [0,1]

_LUMA = np.array([0.299, 0.587, 0.114])


class InputVariant(str, Enum):
    RGB = "RGB"
    Depth = "Depth"
    BinaryHand = "BinaryHand"
    Hand3D = "Hand3D"
    GrayHand = "GrayHand"
    ColorHand = "ColorHand"
    ColorHand3D = "ColorHand3D"

    @property
    def channels(self) -> int:
        return _CHANNELS[self]

    @property
    def needs_depth(self) -> bool:
        return self in (InputVariant.Depth, InputVariant.BinaryHand,
                        InputVariant.Hand3D, InputVariant.ColorHand3D)

    @property
    def needs_rgb(self) -> bool:
        return self in (InputVariant.RGB, InputVariant.GrayHand,
                        InputVariant.ColorHand, InputVariant.ColorHand3D)


_CHANNELS = {
    InputVariant.RGB: 3,
    InputVariant.Depth: 1,
    InputVariant.BinaryHand: 1,
    InputVariant.Hand3D: 1,
    InputVariant.GrayHand: 1,
    InputVariant.ColorHand: 3,
    InputVariant.ColorHand3D: 4,
}

ALL_VARIANTS = tuple(InputVariant)


class ModalityMissingError(ValueError):
    """A variant requires a modality the clip does not carry."""


class DegenerateDepthWarning(UserWarning):
    """Depth frame had fewer than two distinct valid values."""


@dataclass(frozen=True)
class ProcessedClip:
    """Network-ready tensor: (T,112,112,C) float32 in [0,1], T >= 16."""

    data: np.ndarray
    variant: InputVariant
    source_clip_id: str = ""


class OtsuResult(NamedTuple):
    threshold: int
    degenerate: bool


def otsu_threshold(hist) -> OtsuResult:
    """Threshold maximizing between-class variance of {<=t} vs {>t}.

    Comparison uses exact integer arithmetic, so ties resolve to the smallest
    threshold without floating-point ambiguity. A histogram with all mass in
    one bin returns that bin flagged degenerate.
    """
    h = [int(c) for c in hist]
    if len(h) != 256:
        raise ValueError(f"expected a 256-bin histogram, got {len(h)} bins")
    if any(c < 0 for c in h):
        raise ValueError("histogram counts must be nonnegative")
    total = sum(h)
    if total == 0:
        raise ValueError("histogram must contain at least one count")
    occupied = [i for i, c in enumerate(h) if c > 0]
    if len(occupied) == 1:
        return OtsuResult(occupied[0], True)

    s_total = sum(i * c for i, c in enumerate(h))
    best_t, best_num, best_den = 0, -1, 1
    w0 = 0
    s0 = 0
    for t in range(256):
        w0 += h[t]
        s0 += t * h[t]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        s1 = s_total - s0
        # between-class variance ~ (s0*w1 - s1*w0)^2 / (w0*w1); compare as fractions
        num = (s0 * w1 - s1 * w0) ** 2
        den = w0 * w1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return OtsuResult(best_t, False)


def binarize_depth(depth_frame: np.ndarray) -> np.ndarray:
    """Foreground mask of the depth-nearer class; zero-depth pixels stay 0.

    Valid (nonzero) depths are quantized to 256 bins over the frame's own
    range before the Otsu split, which adapts to per-frame camera distance.
    """
    d = np.asarray(depth_frame)
    had_channel = False
    if d.ndim == 3 and d.shape[-1] == 1:
        d = d[..., 0]
        had_channel = True
    if d.ndim != 2:
        raise ValueError(f"expected an HxW depth frame, got shape {depth_frame.shape}")
    d = d.astype(np.int64)
    valid = d > 0
    vals = d[valid]
    mask = np.zeros(d.shape, dtype=np.uint8)
    if vals.size == 0 or np.unique(vals).size < 2:
        warnings.warn("depth frame has fewer than two distinct valid values; returning empty mask",
                      DegenerateDepthWarning, stacklevel=2)
        return mask[..., None] if had_channel else mask
    dmin, dmax = int(vals.min()), int(vals.max())
    bins = np.clip((d - dmin) * 256 // (dmax - dmin), 0, 255)
    hist = np.bincount(bins[valid].ravel(), minlength=256)[:256]
    t = otsu_threshold(hist).threshold
    low = valid & (bins <= t)
    high = valid & (bins > t)
    # nearer class = smaller mean depth = the hand
    if d[low].mean() <= d[high].mean():
        mask[low] = 1
    else:
        mask[high] = 1
    return mask[..., None] if had_channel else mask


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma, rounded half-up, as uint8. Accepts any (...,3) array."""
    arr = np.asarray(rgb)
    if arr.shape[-1] != 3:
        raise ValueError(f"expected trailing RGB axis of size 3, got shape {arr.shape}")
    lum = np.floor(arr.astype(np.float64) @ _LUMA + 0.5)
    return np.clip(lum, 0, 255).astype(np.uint8)


def clip_masks(depth: np.ndarray) -> np.ndarray:
    """Per-frame silhouettes for a (T,H,W,1) depth stack, uint8 (T,H,W)."""
    return np.stack([binarize_depth(depth[t, :, :, 0]) for t in range(depth.shape[0])])


def apply_variant(raw, v: InputVariant, masks: np.ndarray | None = None) -> np.ndarray:
    """Build a variant tensor (T,H,W,C) in natural units from a RawClip.

    Exact identities, asserted in tests: GrayHand == to_gray(ColorHand)
    pixelwise, BinaryHand == (Hand3D > 0), and the ColorHand3D channel
    slices equal ColorHand and Hand3D. ``masks`` short-circuits silhouette
    recomputation when the caller already binarized the depth stack.
    """
    v = InputVariant(v)
    if v.needs_rgb and raw.rgb is None:
        raise ModalityMissingError(f"variant {v.value} requires RGB frames")
    if v.needs_depth and raw.depth is None:
        raise ModalityMissingError(f"variant {v.value} requires depth frames")

    if v is InputVariant.RGB:
        return raw.rgb
    if v is InputVariant.Depth:
        return raw.depth

    if masks is None:
        if raw.depth is None:
            raise ModalityMissingError(
                f"variant {v.value} requires a hand mask (depth frames or explicit masks)")
        masks = clip_masks(raw.depth)
    if v is InputVariant.BinaryHand:
        return masks[..., None].astype(np.uint8)
    if v is InputVariant.Hand3D:
        return (raw.depth * masks[..., None]).astype(np.uint16)
    if v is InputVariant.GrayHand:
        gray = to_gray(raw.rgb)
        return (gray * masks).astype(np.uint8)[..., None]
    if v is InputVariant.ColorHand:
        return (raw.rgb * masks[..., None]).astype(np.uint8)
    # ColorHand3D: color slice + masked-depth slice, stacked as float32
    color = (raw.rgb * masks[..., None]).astype(np.float32)
    hand3d = (raw.depth * masks[..., None]).astype(np.float32)
    return np.concatenate([color, hand3d], axis=-1)


def normalize_variant(arr: np.ndarray, v: InputVariant,
                      depth_range: tuple[float, float] = DEPTH_NORM_RANGE) -> np.ndarray:
    """Scale a natural-units variant tensor to float32 [0,1].

    Depth channels are clipped to ``depth_range`` mm then scaled; invalid
    (zero) readings map to 0.
    """
    v = InputVariant(v)
    lo, hi = depth_range

    def _depth01(x):
        return (np.clip(x.astype(np.float32), lo, hi) - lo) / (hi - lo)

    if v in (InputVariant.RGB, InputVariant.GrayHand, InputVariant.ColorHand):
        return arr.astype(np.float32) / 255.0
    if v in (InputVariant.Depth, InputVariant.Hand3D):
        return _depth01(arr)
    if v is InputVariant.BinaryHand:
        return arr.astype(np.float32)
    out = np.empty(arr.shape, dtype=np.float32)
    out[..., :3] = arr[..., :3].astype(np.float32) / 255.0
    out[..., 3:] = _depth01(arr[..., 3:])
    return out


def resize_and_crop(clip: np.ndarray, mode: str, seed: int = 0, *,
                    binary: bool = False) -> np.ndarray:
    """Bilinear resize to 171x128 then a 112x112 crop.

    Train mode places the crop uniformly at random (seeded); test mode
    centers it at origin (8, 29). Binary inputs are re-thresholded at 0.5
    after interpolation.
    """
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    clip = np.asarray(clip, dtype=np.float32)
    t, _, _, c = clip.shape
    resized = np.empty((t, RESIZE_H, RESIZE_W, c), dtype=np.float32)
    for i in range(t):
        frame = cv2.resize(clip[i], (RESIZE_W, RESIZE_H), interpolation=cv2.INTER_LINEAR)
        resized[i] = frame if c > 1 else frame[..., None]
    if mode == "test":
        y0 = (RESIZE_H - CROP) // 2
        x0 = (RESIZE_W - CROP) // 2
    else:
        rng = rng_for("crop", seed)
        y0 = int(rng.integers(0, RESIZE_H - CROP + 1))
        x0 = int(rng.integers(0, RESIZE_W - CROP + 1))
    out = resized[:, y0:y0 + CROP, x0:x0 + CROP, :]
    if binary:
        out = (out >= 0.5).astype(np.float32)
    return out


def pad_clip(clip: np.ndarray, min_len: int = MIN_CLIP_LEN) -> np.ndarray:
    """Pad short clips to ``min_len`` by repeating first/last frames.

    ceil(d/2) copies of frame 0 lead, floor(d/2) copies of the last frame
    trail; the original frames stay contiguous in the middle.
    """
    t = clip.shape[0]
    if t < 1:
        raise ValueError("clip must have at least one frame")
    if t >= min_len:
        return clip
    d = min_len - t
    front = d - d // 2
    back = d // 2
    pieces = [np.repeat(clip[:1], front, axis=0), clip, np.repeat(clip[-1:], back, axis=0)]
    return np.concatenate(pieces, axis=0)


def sample_window_offset(num_frames: int, seed: int) -> int:
    """Uniform start offset in [0, T-16], seeded."""
    if num_frames < MIN_CLIP_LEN:
        raise ValueError(f"clip must be padded to >= {MIN_CLIP_LEN} frames first")
    rng = rng_for("window", seed)
    return int(rng.integers(0, num_frames - MIN_CLIP_LEN + 1))


def sample_training_window(clip: np.ndarray, seed: int) -> np.ndarray:
    """A random 16-consecutive-frame window of a padded clip."""
    off = sample_window_offset(clip.shape[0], seed)
    return clip[off:off + MIN_CLIP_LEN]


def process_clip(raw, variant: InputVariant, mode: str = "test", seed: int = 0,
                 source_clip_id: str = "", masks: np.ndarray | None = None) -> ProcessedClip:
    """Full pipeline: variant -> normalize -> resize/crop -> pad."""
    variant = InputVariant(variant)
    natural = apply_variant(raw, variant, masks=masks)
    normed = normalize_variant(natural, variant)
    sized = resize_and_crop(normed, mode, seed, binary=(variant is InputVariant.BinaryHand))
    padded = pad_clip(sized)
    return ProcessedClip(data=padded, variant=variant, source_clip_id=source_clip_id)


class VariantClips:
    """Variant tensors for a manifest with an in-memory raw-frame cache.

    Every draw is a pure function of (record, seeds), so instances can be
    shared across epochs and evaluation passes.
    """

    def __init__(self, manifest, variant: InputVariant, cache: bool = True):
        from .corpus import read_clip  # deferred to keep module import light
        self._read_clip = read_clip
        self.manifest = manifest
        self.records = list(manifest.records)
        self.variant = InputVariant(variant)
        self._cache: dict[int, tuple] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.records)

    def _raw_and_masks(self, idx: int):
        if self._cache is not None and idx in self._cache:
            return self._cache[idx]
        raw = self._read_clip(self.records[idx])
        masks = clip_masks(raw.depth) if raw.depth is not None else None
        if self._cache is not None:
            self._cache[idx] = (raw, masks)
        return raw, masks

    def natural(self, idx: int) -> np.ndarray:
        raw, masks = self._raw_and_masks(idx)
        return apply_variant(raw, self.variant, masks=masks)

    def processed(self, idx: int, mode: str = "test", seed: int = 0) -> ProcessedClip:
        raw, masks = self._raw_and_masks(idx)
        return process_clip(raw, self.variant, mode=mode, seed=seed,
                            source_clip_id=self.records[idx].clip_id, masks=masks)

    def train_window(self, idx: int, crop_seed: int, window_seed: int) -> np.ndarray:
        """Seeded (16,112,112,C) training window for one clip."""
        clip = self.processed(idx, mode="train", seed=crop_seed)
        return sample_training_window(clip.data, window_seed)


# --- packed tensor files ------------------------------------------------------
#
# Layout (little-endian): magic b"PCLP", u32 version=1, u32 T, H, W, C,
# u32 dtype code (0=float32, 1=uint8, 2=uint16), then row-major data.

_PACK_MAGIC = b"PCLP"
_PACK_DTYPES = {0: np.float32, 1: np.uint8, 2: np.uint16}
_PACK_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1, np.dtype(np.uint16): 2}


def write_packed_clip(path: str | Path, data: np.ndarray) -> None:
    data = np.ascontiguousarray(data)
    if data.ndim != 4:
        raise ValueError("packed clips must be rank-4 (T,H,W,C)")
    code = _PACK_CODES.get(data.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {data.dtype}")
    header = _PACK_MAGIC + struct.pack("<5I", 1, *data.shape) + struct.pack("<I", code)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.astype(data.dtype.newbyteorder("<"), copy=False).tobytes())


def read_packed_clip(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _PACK_MAGIC:
            raise ValueError(f"{path}: not a packed clip file")
        version, t, h, w, c = struct.unpack("<5I", fh.read(20))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        (code,) = struct.unpack("<I", fh.read(4))
        dtype = _PACK_DTYPES.get(code)
        if dtype is None:
            raise ValueError(f"{path}: unknown dtype code {code}")
        data = np.frombuffer(fh.read(), dtype=np.dtype(dtype).newbyteorder("<"))
    return data.reshape(t, h, w, c).astype(dtype)
