"""Procedural synthetic RGB-D gesture corpus generator.

Each subject carries an independently controllable signature: 2D silhouette
(scale/aspect), 3D depth profile (offset/curvature), procedural skin speckle
(frequency/phase), hue, and motion tempo. Factors are isolated so desk-scale
experiments can attribute classifier accuracy to exactly one cue:

  * hue is rendered at constant gray-equivalent luminance, so converting to
    grayscale makes hue-only subjects pixel-identical inside the hand mask;
  * depth parameters never touch the RGB channels;
  * shape parameters change the silhouette but not the texture field.

The "hand" is a rotated superellipse with three finger-like lobes, moved
along per-gesture parametric paths and deformed by a per-gesture schedule.
Hand depth stays in [300, 1020] mm and background depth in [1650, 1975] mm,
so depth frames are sharply bimodal and near-threshold segmentation recovers
the exact rendered silhouette.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ablate import to_gray
from .corpus import ClipRecord, Manifest, RawClip, save_manifest, write_clip
from .seeds import derive_seed, rng_for

PRESETS = ("clean", "confounded", "hue-only", "shape-only", "depth-only", "texture-only")

# Constant-luminance colorization: chroma directions orthogonal to the
# grayscale weight vector, so adding chroma never changes the float luma.
_LUMA_W = np.array([0.299, 0.587, 0.114])
_CHROMA_U = np.array([0.587, -0.299, 0.0])
_CHROMA_U = _CHROMA_U / np.linalg.norm(_CHROMA_U)
_CHROMA_V = np.cross(_LUMA_W, _CHROMA_U)
_CHROMA_V = _CHROMA_V / np.linalg.norm(_CHROMA_V)
CHROMA_AMP = 45.0

HAND_BASE_RADIUS = 18.0
HAND_GRAY_LEVEL = 128.0
TEXTURE_AMP = 16.0
SPECKLE_AMP = 3

BG_DEPTH_MIN = 1650.0


@dataclass(frozen=True)
class SubjectSignature:
    shape_scale: float = 1.0
    aspect: float = 1.0
    depth_offset_mm: float = 550.0
    depth_curvature: float = 60.0
    texture_freq: float = 1.1
    texture_phase: float = 0.7
    hue_deg: float = 140.0
    tempo: float = 1.0

    def __post_init__(self):
        if self.shape_scale <= 0 or self.aspect <= 0 or self.tempo <= 0 or self.texture_freq <= 0:
            raise ValueError("shape_scale, aspect, tempo, texture_freq must be positive")
        if not (300.0 <= self.depth_offset_mm <= 800.0):
            raise ValueError(f"depth_offset_mm must lie in [300, 800], got {self.depth_offset_mm}")


@dataclass(frozen=True)
class GestureScript:
    """Parametric trajectory + deformation schedule for one gesture class.

    ``family`` selects the path shape (0 sweep-x, 1 sweep-y, 2 circle,
    3 diagonal); the deformation fields modulate finger spread and blob
    rotation over time. Scripts with different gesture ids always differ in
    family or schedule.
    """

    gesture_id: int
    family: int
    deform_freq: float
    deform_amp: float
    deform_phase: float
    exponent: float
    rot_speed: float
    rot_phase: float
    base_length: int = 14

    def center_at(self, tau: float, frame_hw: tuple[int, int]) -> tuple[float, float]:
        h, w = frame_hw
        if self.family == 0:
            cx = 44.0 + 2.2 * tau
            cy = h / 2.0 + 6.0 * math.sin(0.25 * tau)
        elif self.family == 1:
            cx = w / 2.0 + 6.0 * math.sin(0.23 * tau + 1.0)
            cy = 44.0 + 1.35 * tau
        elif self.family == 2:
            cx = w / 2.0 + 19.0 * math.cos(0.11 * tau)
            cy = h / 2.0 + 19.0 * math.sin(0.11 * tau)
        else:
            cx = 44.0 + 1.8 * tau
            cy = 44.0 + 0.9 * tau
        margin = 42.0
        return (
            float(np.clip(cx, margin, w - margin)),
            float(np.clip(cy, margin, h - margin)),
        )

    def spread_at(self, tau: float) -> float:
        return self.deform_amp * math.sin(2.0 * math.pi * self.deform_freq * tau / 32.0 + self.deform_phase)

    def angle_at(self, tau: float) -> float:
        return self.rot_phase + self.rot_speed * tau


@dataclass(frozen=True)
class BackgroundStyle:
    name: str
    base_rgb: tuple[float, float, float]
    stripe_amp: tuple[float, float, float]
    stripe_freq: float
    stripe_angle: float
    depth_relief: float = 250.0
    noise_amp: int = 4
    # high-contrast band across the top rows (a "wall poster"): the carrier
    # of subject-correlated background shortcuts in the confounded preset
    banner_rgb: tuple[float, float, float] | None = None
    banner_rows: int = 26
    banner_freq: float = 4.0


@dataclass
class SynthConfig:
    subjects: list[SubjectSignature]
    gestures: list[GestureScript]
    repeats_per_cell: int = 2
    places: tuple[str, ...] = ("indoor", "outdoor")
    frame_size: tuple[int, int] = (128, 176)  # (H, W)
    length_jitter: int = 3
    seed: int = 0
    background_mode: str = "by-place"  # "by-place" | "subject-keyed-indoor"
    depth_dropout: float = 0.0         # fraction of background pixels with no depth reading
    preset: str = ""

    def __post_init__(self):
        if self.repeats_per_cell < 1:
            raise ValueError("repeats_per_cell must be >= 1")
        h, w = self.frame_size
        if h < 112 or w < 112:
            raise ValueError(f"frame_size must be at least 112x112, got {self.frame_size}")
        if self.background_mode not in ("by-place", "subject-keyed-indoor"):
            raise ValueError(f"unknown background_mode {self.background_mode!r}")
        if not (0.0 <= self.depth_dropout < 1.0):
            raise ValueError("depth_dropout must lie in [0, 1)")
        for p in self.places:
            if p not in ("indoor", "outdoor"):
                raise ValueError(f"unknown place {p!r}")


def colorize_constant_luma(gray: np.ndarray, hue_deg: float) -> np.ndarray:
    """Map integer gray values to RGB with identical rounded-luma.

    The chroma offset lies in the plane orthogonal to the grayscale weights,
    and a small per-pixel blue/red correction absorbs integer rounding, so
    ``to_gray`` of the result reproduces ``gray`` exactly.
    """
    gray = np.asarray(gray)
    if gray.min() < CHROMA_AMP + 2 or gray.max() > 255 - CHROMA_AMP - 2:
        raise ValueError("gray values leave insufficient chroma headroom")
    h = math.radians(hue_deg)
    d = CHROMA_AMP * (math.cos(h) * _CHROMA_U + math.sin(h) * _CHROMA_V)
    rgb = np.floor(gray[..., None].astype(np.float64) + d + 0.5)
    target = gray.astype(np.int64)
    for ch, step_order in ((2, None), (0, None)):  # blue first (finest luma step), then red
        for _ in range(8):
            lum = np.floor(rgb @ _LUMA_W + 0.5).astype(np.int64)
            off = lum - target
            if not off.any():
                break
            adj = np.sign(off)
            movable = (off != 0) & (rgb[..., ch] - adj >= 0) & (rgb[..., ch] - adj <= 255)
            rgb[..., ch] = np.where(movable, rgb[..., ch] - adj, rgb[..., ch])
            if not movable.any():
                break
    lum = np.floor(rgb @ _LUMA_W + 0.5).astype(np.int64)
    if (lum != target).any():
        raise RuntimeError("constant-luminance correction failed to converge")
    return rgb.astype(np.uint8)


def _grid(frame_hw):
    h, w = frame_hw
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return xx, yy


def _hand_mask_and_rho(sig, script, tau, center, xx, yy):
    """Binary silhouette plus a normalized radial coordinate for depth."""
    cx, cy = center
    theta = script.angle_at(tau)
    spread = script.spread_at(tau)
    ct, st = math.cos(theta), math.sin(theta)
    dx, dy = xx - cx, yy - cy
    xl = dx * ct + dy * st
    yl = -dx * st + dy * ct
    a = HAND_BASE_RADIUS * sig.shape_scale * math.sqrt(sig.aspect)
    b = HAND_BASE_RADIUS * sig.shape_scale / math.sqrt(sig.aspect)
    n = script.exponent
    core = (np.abs(xl / a) ** n + np.abs(yl / b) ** n) <= 1.0
    rho2 = (xl / a) ** 2 + (yl / b) ** 2
    mask = core
    rf = 5.5 * sig.shape_scale
    for k in (-1, 0, 1):
        psi = math.pi / 2.0 + k * (0.62 + 0.18 * spread)
        fx_l = (b * 0.95 + rf * 0.5) * math.cos(psi)
        fy_l = (b * 0.95 + rf * 0.5) * math.sin(psi)
        fx = cx + fx_l * ct - fy_l * st
        fy = cy + fx_l * st + fy_l * ct
        rk = rf * (1.0 + 0.18 * spread * k)
        finger = (xx - fx) ** 2 + (yy - fy) ** 2 <= rk ** 2
        mask = mask | finger
    return mask, np.sqrt(np.clip(rho2, 0.0, 1.5625))


def _render_background(style: BackgroundStyle, frame_hw, rng: np.random.Generator):
    h, w = frame_hw
    xx, yy = _grid(frame_hw)
    diag = math.hypot(h, w)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    wave = np.sin(
        2.0 * math.pi * style.stripe_freq
        * (xx * math.cos(style.stripe_angle) + yy * math.sin(style.stripe_angle)) / diag
        + phase
    )
    noise = rng.integers(-style.noise_amp, style.noise_amp + 1, size=(h, w, 1))
    rgb = np.asarray(style.base_rgb)[None, None, :] + np.asarray(style.stripe_amp)[None, None, :] * wave[..., None]
    if style.banner_rgb is not None:
        rows = min(style.banner_rows, h)
        bands = np.sin(2.0 * math.pi * style.banner_freq * xx[:rows] / w) >= 0.0
        banner = np.where(bands[..., None], np.asarray(style.banner_rgb)[None, None, :],
                          255.0 - np.asarray(style.banner_rgb)[None, None, :])
        rgb[:rows] = banner
    rgb = np.clip(np.floor(rgb + noise + 0.5), 0, 255).astype(np.uint8)
    relief = 0.5 + 0.5 * np.sin(
        2.0 * math.pi * 1.7 * (xx * math.sin(style.stripe_angle) - yy * math.cos(style.stripe_angle)) / diag
        + 0.7 * phase
    )
    depth = 1700.0 + style.depth_relief * relief + rng.integers(-25, 26, size=(h, w))
    depth = np.maximum(depth, BG_DEPTH_MIN)
    return rgb, depth.astype(np.uint16)


def background_style(mode: str, place: str, subject_idx: int, num_subjects: int) -> BackgroundStyle:
    """Pick the clip background. In confounded mode, indoor clips carry a
    vivid subject-keyed banner along the top rows, reproducing
    place-correlated identity shortcuts away from the hand region."""
    if mode == "subject-keyed-indoor" and place == "indoor":
        phi = 2.0 * math.pi * subject_idx / max(num_subjects, 1)
        banner = tuple(127.5 + 127.5 * math.cos(phi + off) for off in (0.0, 2.094, 4.189))
        return BackgroundStyle(
            name=f"keyed-{subject_idx}",
            base_rgb=(168.0, 142.0, 118.0),
            stripe_amp=(26.0, 20.0, 16.0),
            stripe_freq=3.1,
            stripe_angle=0.4,
            banner_rgb=banner,
            banner_freq=2.0 + 2.0 * subject_idx,
        )
    if place == "indoor":
        return BackgroundStyle(
            name="indoor",
            base_rgb=(168.0, 142.0, 118.0),
            stripe_amp=(26.0, 20.0, 16.0),
            stripe_freq=3.1,
            stripe_angle=0.4,
        )
    return BackgroundStyle(
        name="outdoor",
        base_rgb=(108.0, 138.0, 168.0),
        stripe_amp=(18.0, 24.0, 28.0),
        stripe_freq=5.3,
        stripe_angle=1.25,
    )


def render_clip(
    sig: SubjectSignature,
    script: GestureScript,
    place_style: BackgroundStyle,
    length: int,
    seed: int,
    frame_hw: tuple[int, int] = (128, 176),
    return_masks: bool = False,
    depth_dropout: float = 0.0,
):
    """Render one clip; fully deterministic given all arguments.

    Returns a RawClip, or (RawClip, masks) with the uint8 (T,H,W) ground-truth
    silhouettes when ``return_masks`` is set.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    h, w = frame_hw
    rng = np.random.Generator(np.random.PCG64(seed))
    bg_rgb, bg_depth = _render_background(place_style, frame_hw, rng)
    speckle = rng.integers(-SPECKLE_AMP, SPECKLE_AMP + 1, size=(h, w)).astype(np.float64)
    dropout = None
    if depth_dropout > 0.0:
        dropout = rng.random(size=(h, w)) < depth_dropout

    xx, yy = _grid(frame_hw)
    rgb_frames = np.empty((length, h, w, 3), dtype=np.uint8)
    depth_frames = np.empty((length, h, w, 1), dtype=np.uint16)
    masks = np.empty((length, h, w), dtype=np.uint8)

    tex_angle = 0.35
    ct0, st0 = math.cos(tex_angle), math.sin(tex_angle)
    for t in range(length):
        tau = t * sig.tempo
        center = script.center_at(tau, frame_hw)
        mask, rho = _hand_mask_and_rho(sig, script, tau, center, xx, yy)

        depth = bg_depth.copy()
        # radial coordinate capped at 1 so hand depth never exceeds
        # offset + curvature (keeps >= 700 mm clearance to the background)
        hand_depth = sig.depth_offset_mm + sig.depth_curvature * np.minimum(rho, 1.0) ** 2
        depth[mask] = np.floor(hand_depth[mask] + 0.5).astype(np.uint16)
        if dropout is not None:
            depth[dropout & ~mask] = 0

        u = xx - center[0]
        v = yy - center[1]
        tex = (
            np.sin(2.0 * math.pi * sig.texture_freq * (u * ct0 + v * st0) / 24.0 + sig.texture_phase)
            * np.cos(2.0 * math.pi * sig.texture_freq * (-u * st0 + v * ct0) / 31.0 + 0.6 * sig.texture_phase)
        )
        gray = np.clip(np.floor(HAND_GRAY_LEVEL + TEXTURE_AMP * tex + speckle + 0.5), 60, 200).astype(np.int64)

        rgb = bg_rgb.copy()
        rgb[mask] = colorize_constant_luma(gray[mask], sig.hue_deg)
        rgb_frames[t] = rgb
        depth_frames[t, :, :, 0] = depth
        masks[t] = mask.astype(np.uint8)

    clip = RawClip(rgb=rgb_frames, depth=depth_frames)
    return (clip, masks) if return_masks else clip


def generate_corpus(cfg: SynthConfig, out_dir: str | Path) -> Manifest:
    """Render every (subject, gesture, place, repeat) cell and write a corpus.

    Per-cell randomness (length jitter, background phase, speckle field) is
    keyed by (seed, gesture, place, repeat) only — deliberately independent
    of the subject — so cells matched across subjects differ only through
    the subject signatures themselves.
    """
    out_dir = Path(out_dir)
    clips_dir = out_dir / "clips"
    clips_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for si, sig in enumerate(cfg.subjects):
        subject_id = si + 1
        for script in cfg.gestures:
            for place in cfg.places:
                for rep in range(cfg.repeats_per_cell):
                    cell_seed = derive_seed(cfg.seed, "cell", script.gesture_id, place, rep)
                    jitter_rng = rng_for(cfg.seed, "len", script.gesture_id, place, rep)
                    length = script.base_length
                    if cfg.length_jitter > 0:
                        length += int(jitter_rng.integers(-cfg.length_jitter, cfg.length_jitter + 1))
                    length = max(length, 1)
                    style = background_style(cfg.background_mode, place, si, len(cfg.subjects))
                    clip = render_clip(
                        sig, script, style, length, cell_seed, cfg.frame_size,
                        depth_dropout=cfg.depth_dropout,
                    )
                    clip_id = f"s{subject_id:02d}_g{script.gesture_id:02d}_{place}_r{rep:02d}"
                    clip_path = clips_dir / clip_id
                    write_clip(clip_path, clip.rgb, clip.depth)
                    records.append(ClipRecord(
                        clip_id=clip_id,
                        subject_id=subject_id,
                        gesture_id=script.gesture_id,
                        place=place,
                        num_frames=length,
                        path=str(clip_path),
                        has_depth=True,
                    ))
    manifest = Manifest(
        records=records,
        provenance=f"synthgen preset={cfg.preset or 'custom'} seed={cfg.seed} "
                   f"cells={len(cfg.subjects)}x{len(cfg.gestures)}x{len(cfg.places)}x{cfg.repeats_per_cell}",
    )
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


# --- preset parameter grids -------------------------------------------------

_HUES = (15.0, 105.0, 195.0, 285.0)
_SHAPE_SCALES = (0.72, 0.94, 1.14, 1.34)
_ASPECTS = (0.75, 1.30, 1.00, 1.55)
_DEPTH_OFFSETS = (350.0, 500.0, 650.0, 800.0)
_CURVATURES = (25.0, 115.0, 60.0, 140.0)
_TEX_FREQS = (0.6, 1.25, 1.9, 2.7)
_TEX_PHASES = (0.4, 2.1, 3.8, 5.5)
_TEMPOS = (0.85, 1.0, 1.15, 1.3)


def _pick(table: Sequence[float], i: int, lo: float, hi: float) -> float:
    if i < len(table):
        return table[i]
    # golden-ratio spread for indices beyond the hand-tuned grid
    frac = (i * 0.6180339887498949) % 1.0
    return lo + (hi - lo) * frac


def make_subject(preset: str, i: int) -> SubjectSignature:
    base = SubjectSignature()
    kw: dict = {}
    if preset in ("hue-only", "clean", "confounded"):
        kw["hue_deg"] = _pick(_HUES, i, 0.0, 345.0)
    if preset in ("shape-only", "clean", "confounded"):
        kw["shape_scale"] = _pick(_SHAPE_SCALES, i, 0.72, 1.34)
        kw["aspect"] = _pick(_ASPECTS, i, 0.75, 1.55)
    if preset in ("depth-only", "clean"):
        kw["depth_offset_mm"] = _pick(_DEPTH_OFFSETS, i, 350.0, 800.0)
        kw["depth_curvature"] = _pick(_CURVATURES, i, 25.0, 140.0)
    if preset in ("texture-only", "clean"):
        kw["texture_freq"] = _pick(_TEX_FREQS, i, 0.6, 2.7)
        kw["texture_phase"] = _pick(_TEX_PHASES, i, 0.0, 6.0)
    if preset == "clean":
        kw["tempo"] = _pick(_TEMPOS, i, 0.85, 1.3)
    return SubjectSignature(
        shape_scale=kw.get("shape_scale", base.shape_scale),
        aspect=kw.get("aspect", base.aspect),
        depth_offset_mm=kw.get("depth_offset_mm", base.depth_offset_mm),
        depth_curvature=kw.get("depth_curvature", base.depth_curvature),
        texture_freq=kw.get("texture_freq", base.texture_freq),
        texture_phase=kw.get("texture_phase", base.texture_phase),
        hue_deg=kw.get("hue_deg", base.hue_deg),
        tempo=kw.get("tempo", base.tempo),
    )


def make_gesture(gesture_id: int, base_length: int = 14) -> GestureScript:
    if gesture_id < 1:
        raise ValueError("gesture_id must be >= 1")
    variant = (gesture_id - 1) // 4
    return GestureScript(
        gesture_id=gesture_id,
        family=(gesture_id - 1) % 4,
        deform_freq=1.0 + 0.5 * variant,
        deform_amp=0.9,
        deform_phase=0.9 * gesture_id,
        exponent=2.0 + 0.7 * (variant % 2),
        rot_speed=0.02 + 0.012 * (variant % 3),
        rot_phase=0.3 * gesture_id,
        base_length=base_length,
    )


def make_config(
    preset: str,
    n_subjects: int = 4,
    n_gestures: int = 4,
    repeats: int = 2,
    base_length: int = 14,
    length_jitter: int = 3,
    frame_size: tuple[int, int] = (128, 176),
    places: tuple[str, ...] = ("indoor", "outdoor"),
    seed: int = 0,
) -> SynthConfig:
    """Build a SynthConfig for one of the named factor presets."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; known: {PRESETS}")
    subjects = [make_subject(preset, i) for i in range(n_subjects)]
    gestures = [make_gesture(g, base_length) for g in range(1, n_gestures + 1)]
    return SynthConfig(
        subjects=subjects,
        gestures=gestures,
        repeats_per_cell=repeats,
        places=places,
        frame_size=frame_size,
        length_jitter=length_jitter,
        seed=seed,
        background_mode="subject-keyed-indoor" if preset == "confounded" else "by-place",
        preset=preset,
    )
