"""Dataset manifests, clip storage I/O, and split/pairing logic.

On-disk contracts:
  * Manifest: JSON Lines, one clip record per line with snake_case keys.
    Free-text provenance lives in a sidecar ``<manifest>.meta.json``.
  * Clip storage: ``<path>/rgb/%06d.png`` (8-bit RGB) and, when depth is
    present, ``<path>/depth/%06d.png`` (16-bit grayscale, millimeters,
    0 = sensor gave no reading).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

PLACES = ("indoor", "outdoor")

# Subject id lists used for gesture-based verification on EgoGesture
# (30 train / 10 validation / 10 test).
EGOGESTURE_VERIFICATION_SUBJECTS = {
    "train": (3, 4, 5, 6, 8, 10, 15, 16, 17, 20, 21, 22, 23, 25, 26, 27,
              30, 32, 36, 38, 39, 40, 42, 43, 44, 45, 46, 48, 49, 50),
    "val": (2, 9, 11, 14, 18, 19, 28, 31, 41, 47),
    "test": (1, 7, 12, 13, 24, 29, 33, 34, 35, 37),
}

# Gesture classes kept for training in the seen/unseen generalization split:
# the even ids 2..82 out of 83 classes.
EGOGESTURE_SEEN_GESTURES = tuple(range(2, 83, 2))

SPLIT_PRESETS = (
    "egogesture-place",
    "egogesture-verification-subjects",
    "egogesture-even-gestures",
)


class ManifestError(ValueError):
    """Raised when a manifest violates its invariants or cannot be parsed."""


class ClipIOError(IOError):
    """Raised when clip frames are missing or unreadable."""


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    subject_id: int
    gesture_id: int
    place: str
    num_frames: int
    path: str
    has_depth: bool

    def __post_init__(self):
        if self.place not in PLACES:
            raise ManifestError(f"clip {self.clip_id!r}: place must be one of {PLACES}, got {self.place!r}")
        if self.subject_id < 1 or self.gesture_id < 1:
            raise ManifestError(f"clip {self.clip_id!r}: subject_id and gesture_id must be >= 1")
        if self.num_frames < 1:
            raise ManifestError(f"clip {self.clip_id!r}: num_frames must be >= 1")


@dataclass
class Manifest:
    records: list[ClipRecord] = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.clip_id in seen:
                raise ManifestError(f"duplicate clip_id {r.clip_id!r}")
            seen.add(r.clip_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subject_ids(self) -> list[int]:
        return sorted({r.subject_id for r in self.records})

    def gesture_ids(self) -> list[int]:
        return sorted({r.gesture_id for r in self.records})

    def by_id(self, clip_id: str) -> ClipRecord:
        for r in self.records:
            if r.clip_id == clip_id:
                return r
        raise KeyError(clip_id)


@dataclass(frozen=True)
class RawClip:
    """Frame stack for one clip: RGB uint8 (T,H,W,3), depth uint16 mm (T,H,W,1) or None."""

    rgb: np.ndarray
    depth: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return self.rgb.shape[0]


@dataclass(frozen=True)
class Pair:
    clip_id_a: str
    clip_id_b: str
    label: str  # "same" | "different"


@dataclass
class PairSet:
    pairs: list[Pair] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def num_positive(self) -> int:
        return sum(1 for p in self.pairs if p.label == "same")


_RECORD_FIELDS = ("clip_id", "subject_id", "gesture_id", "place", "num_frames", "path", "has_depth")


def load_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    """Parse a JSON-Lines manifest, enforcing uniqueness and file existence.

    Relative record paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    base = path.parent
    records: list[ClipRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            missing = [k for k in _RECORD_FIELDS if k not in obj]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing fields {missing}")
            rec = ClipRecord(
                clip_id=str(obj["clip_id"]),
                subject_id=int(obj["subject_id"]),
                gesture_id=int(obj["gesture_id"]),
                place=str(obj["place"]),
                num_frames=int(obj["num_frames"]),
                path=str((base / obj["path"]).resolve()) if not Path(obj["path"]).is_absolute() else obj["path"],
                has_depth=bool(obj["has_depth"]),
            )
            if rec.clip_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate clip_id {rec.clip_id!r}")
            seen.add(rec.clip_id)
            records.append(rec)
    if check_files:
        absent = []
        for rec in records:
            rgb_dir = Path(rec.path) / "rgb"
            if not rgb_dir.is_dir():
                absent.append(str(rgb_dir))
            if rec.has_depth and not (Path(rec.path) / "depth").is_dir():
                absent.append(str(Path(rec.path) / "depth"))
        if absent:
            raise ManifestError("manifest references missing storage: " + ", ".join(absent))
    provenance = ""
    meta_path = Path(str(path) + ".meta.json")
    if meta_path.exists():
        provenance = json.loads(meta_path.read_text(encoding="utf-8")).get("provenance", "")
    return Manifest(records=records, provenance=provenance)


def save_manifest(m: Manifest, path: str | Path) -> None:
    """Write JSON Lines; record paths are stored relative to the manifest dir."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with open(path, "w", encoding="utf-8") as fh:
        for r in m.records:
            p = Path(r.path)
            try:
                rel = str(p.resolve().relative_to(base))
            except ValueError:
                rel = str(p)
            obj = {
                "clip_id": r.clip_id,
                "subject_id": r.subject_id,
                "gesture_id": r.gesture_id,
                "place": r.place,
                "num_frames": r.num_frames,
                "path": rel,
                "has_depth": r.has_depth,
            }
            fh.write(json.dumps(obj) + "\n")
    if m.provenance:
        meta_path = Path(str(path) + ".meta.json")
        meta_path.write_text(json.dumps({"provenance": m.provenance}) + "\n", encoding="utf-8")


def split_by_place(m: Manifest) -> tuple[Manifest, Manifest]:
    """Indoor records for training, outdoor for evaluation; order preserved."""
    train = [r for r in m.records if r.place == "indoor"]
    ev = [r for r in m.records if r.place == "outdoor"]
    return (Manifest(train, m.provenance), Manifest(ev, m.provenance))


def split_outdoor_val_test(outdoor: Manifest) -> tuple[Manifest, Manifest]:
    """Divide outdoor clips into validation/test halves.

    Assumption (flagged): the first floor(n/2) clips in clip_id order form
    the validation set. The source protocol does not state its rule.
    """
    ordered = sorted(outdoor.records, key=lambda r: r.clip_id)
    half = len(ordered) // 2
    return (Manifest(ordered[:half], outdoor.provenance), Manifest(ordered[half:], outdoor.provenance))


def split_subjects(
    m: Manifest,
    train_ids: Iterable[int],
    val_ids: Iterable[int],
    test_ids: Iterable[int],
) -> tuple[Manifest, Manifest, Manifest]:
    """Route records by subject_id into disjoint train/val/test manifests."""
    train_s, val_s, test_s = set(train_ids), set(val_ids), set(test_ids)
    overlap = (train_s & val_s) | (train_s & test_s) | (val_s & test_s)
    if overlap:
        raise ManifestError(f"subject id sets overlap on {sorted(overlap)}")
    present = {r.subject_id for r in m.records}
    uncovered = present - (train_s | val_s | test_s)
    if uncovered:
        raise ManifestError(f"subject ids not covered by any set: {sorted(uncovered)}")
    buckets = {"train": [], "val": [], "test": []}
    for r in m.records:
        if r.subject_id in train_s:
            buckets["train"].append(r)
        elif r.subject_id in val_s:
            buckets["val"].append(r)
        else:
            buckets["test"].append(r)
    return (
        Manifest(buckets["train"], m.provenance),
        Manifest(buckets["val"], m.provenance),
        Manifest(buckets["test"], m.provenance),
    )


def split_gestures_even(m: Manifest) -> tuple[Manifest, Manifest]:
    """Seen = even gesture ids, unseen = odd; order preserved."""
    seen = [r for r in m.records if r.gesture_id % 2 == 0]
    unseen = [r for r in m.records if r.gesture_id % 2 == 1]
    return (Manifest(seen, m.provenance), Manifest(unseen, m.provenance))


def enumerate_verification_pairs(indoor: Manifest, outdoor: Manifest) -> PairSet:
    """All (indoor, outdoor) pairs sharing a gesture, labeled by subject match.

    Deterministic order: sorted by (clip_id_a, clip_id_b).
    """
    if not indoor.records or not outdoor.records:
        raise ManifestError("both manifests must be nonempty to enumerate pairs")
    by_gesture: dict[int, list[ClipRecord]] = {}
    for r in outdoor.records:
        by_gesture.setdefault(r.gesture_id, []).append(r)
    pairs: list[Pair] = []
    for a in indoor.records:
        for b in by_gesture.get(a.gesture_id, ()):
            label = "same" if a.subject_id == b.subject_id else "different"
            pairs.append(Pair(a.clip_id, b.clip_id, label))
    pairs.sort(key=lambda p: (p.clip_id_a, p.clip_id_b))
    return PairSet(pairs)


def get_split_preset(name: str):
    """Resolve a named split to a callable Manifest -> tuple of Manifests."""
    if name == "egogesture-place":
        def _place(m: Manifest):
            train, outdoor = split_by_place(m)
            val, test = split_outdoor_val_test(outdoor)
            return train, val, test
        return _place
    if name == "egogesture-verification-subjects":
        ids = EGOGESTURE_VERIFICATION_SUBJECTS
        return lambda m: split_subjects(m, ids["train"], ids["val"], ids["test"])
    if name == "egogesture-even-gestures":
        return split_gestures_even
    raise KeyError(f"unknown split preset {name!r}; known: {SPLIT_PRESETS}")


def _frame_path(clip_dir: Path, kind: str, index: int) -> Path:
    return clip_dir / kind / f"{index:06d}.png"


def write_clip(clip_dir: str | Path, rgb: np.ndarray, depth: np.ndarray | None = None) -> None:
    """Store frames as numbered PNGs: 8-bit RGB plus optional 16-bit depth."""
    clip_dir = Path(clip_dir)
    if rgb.ndim != 4 or rgb.shape[-1] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"rgb must be uint8 (T,H,W,3), got {rgb.dtype} {rgb.shape}")
    (clip_dir / "rgb").mkdir(parents=True, exist_ok=True)
    for t in range(rgb.shape[0]):
        Image.fromarray(rgb[t], mode="RGB").save(_frame_path(clip_dir, "rgb", t))
    if depth is not None:
        if depth.ndim != 4 or depth.shape[-1] != 1 or depth.dtype != np.uint16:
            raise ValueError(f"depth must be uint16 (T,H,W,1), got {depth.dtype} {depth.shape}")
        if depth.shape[0] != rgb.shape[0]:
            raise ValueError("rgb and depth frame counts differ")
        (clip_dir / "depth").mkdir(parents=True, exist_ok=True)
        for t in range(depth.shape[0]):
            Image.fromarray(depth[t, :, :, 0]).save(_frame_path(clip_dir, "depth", t))


def read_clip(r: ClipRecord) -> RawClip:
    """Load the frames referenced by a record; errors name the frame index."""
    clip_dir = Path(r.path)
    rgb_frames = []
    for t in range(r.num_frames):
        p = _frame_path(clip_dir, "rgb", t)
        if not p.exists():
            raise ClipIOError(f"clip {r.clip_id!r}: missing rgb frame {t} ({p})")
        try:
            with Image.open(p) as img:
                rgb_frames.append(np.asarray(img.convert("RGB"), dtype=np.uint8))
        except ClipIOError:
            raise
        except Exception as e:
            raise ClipIOError(f"clip {r.clip_id!r}: corrupt rgb frame {t} ({p}): {e}") from e
    rgb = np.stack(rgb_frames, axis=0)
    depth = None
    if r.has_depth:
        depth_frames = []
        for t in range(r.num_frames):
            p = _frame_path(clip_dir, "depth", t)
            if not p.exists():
                raise ClipIOError(f"clip {r.clip_id!r}: missing depth frame {t} ({p})")
            try:
                with Image.open(p) as img:
                    arr = np.asarray(img)
            except Exception as e:
                raise ClipIOError(f"clip {r.clip_id!r}: corrupt depth frame {t} ({p}): {e}") from e
            depth_frames.append(arr.astype(np.uint16)[..., None])
        depth = np.stack(depth_frames, axis=0)
    return RawClip(rgb=rgb, depth=depth)


def records_subset(m: Manifest, clip_ids: Sequence[str]) -> Manifest:
    wanted = set(clip_ids)
    return Manifest([r for r in m.records if r.clip_id in wanted], m.provenance)


def relabel(m: Manifest, **overrides) -> Manifest:
    """Clone a manifest with per-record field overrides (testing helper)."""
    return Manifest([replace(r, **overrides) for r in m.records], m.provenance)
