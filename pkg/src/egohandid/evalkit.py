"""Sliding-window inference and the evaluation battery: accuracy tables
(overall / per-gesture / length strata / seen-unseen), cosine pair
verification with EER and ROC, and class-activation-map aggregation.

Clips are scored by averaging over 16-frame windows at stride 8, with an
end-aligned tail window so no frame is dropped (``drop_tail`` restores the
strict stride-only reading).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np
import torch

from .ablate import CROP, InputVariant, VariantClips
from .corpus import Manifest, PairSet
from .net import VideoClassifier, compute_cam
from .seeds import derive_seed

WINDOW_LEN = 16
WINDOW_STRIDE = 8


@dataclass(frozen=True)
class WindowPlan:
    offsets: tuple[int, ...]
    window_len: int = WINDOW_LEN
    stride: int = WINDOW_STRIDE


def plan_windows(num_frames: int, drop_tail: bool = False) -> WindowPlan:
    """Start offsets of 16-frame windows at stride 8 over a clip.

    Clips shorter than 16 frames are planned as if padded to 16. When the
    stride leaves trailing frames uncovered, a final window is end-aligned
    at T-16 unless ``drop_tail`` is set.
    """
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    t = max(num_frames, WINDOW_LEN)
    offsets = list(range(0, t - WINDOW_LEN + 1, WINDOW_STRIDE))
    if not drop_tail and offsets[-1] + WINDOW_LEN < t:
        offsets.append(t - WINDOW_LEN)
    return WindowPlan(tuple(offsets))


def _clip_windows_tensor(data: np.ndarray, drop_tail: bool = False) -> torch.Tensor:
    plan = plan_windows(data.shape[0], drop_tail=drop_tail)
    wins = np.stack([
        np.transpose(data[o:o + WINDOW_LEN], (3, 0, 1, 2)) for o in plan.offsets
    ]).astype(np.float32)
    return torch.from_numpy(wins)


def predict_clip(model: VideoClassifier, clip_data: np.ndarray,
                 drop_tail: bool = False) -> dict[str, np.ndarray]:
    """Per-head probabilities, averaged uniformly over planned windows."""
    x = _clip_windows_tensor(clip_data, drop_tail)
    model.eval()
    with torch.no_grad():
        out = model(x)
    return {h: torch.softmax(lg, dim=1).mean(dim=0).numpy() for h, lg in out.logits.items()}


def embed_clip(model: VideoClassifier, clip_data: np.ndarray,
               drop_tail: bool = False) -> np.ndarray:
    """Mean pooled penultimate features over planned windows."""
    x = _clip_windows_tensor(clip_data, drop_tail)
    model.eval()
    with torch.no_grad():
        out = model(x)
    return out.features.mean(dim=0).numpy()


def nearest_rank_quantile(values, q: float) -> float:
    """Nearest-rank quantile: element at rank floor(q*n)+1 (1-based, capped)."""
    vals = sorted(values)
    if not vals:
        raise ValueError("empty value list")
    rank = min(len(vals), int(np.floor(q * len(vals))) + 1)
    return vals[rank - 1]


@dataclass
class EvalReport:
    head: str
    overall_accuracy: float
    num_clips: int
    per_gesture: dict[int, dict] = field(default_factory=dict)
    strata: dict[str, dict] = field(default_factory=dict)
    strata_boundaries: tuple[float, float] | None = None
    seen_unseen: dict[str, dict] = field(default_factory=dict)
    confusion: dict[str, int] = field(default_factory=dict)
    length_mean: float = 0.0
    length_median: float = 0.0
    predictions: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "head": self.head,
            "overall_accuracy": self.overall_accuracy,
            "num_clips": self.num_clips,
            "per_gesture": {str(k): v for k, v in self.per_gesture.items()},
            "strata": self.strata,
            "strata_boundaries": self.strata_boundaries,
            "seen_unseen": self.seen_unseen,
            "confusion": self.confusion,
            "length_mean": self.length_mean,
            "length_median": self.length_median,
        }


def _acc(correct: int, count: int) -> dict:
    return {"correct": correct, "count": count,
            "accuracy": (correct / count) if count else None}


def evaluate(model: VideoClassifier, manifest: Manifest, variant: InputVariant,
             head: str = "subject", groupings: tuple[str, ...] = ("gesture", "length"),
             seen_gestures: set[int] | None = None, drop_tail: bool = False,
             clips: VariantClips | None = None) -> EvalReport:
    """Top-1 accuracy overall and per requested grouping.

    Length strata use nearest-rank 25%/75% quantiles of the evaluated set:
    short <= q25 < medium <= q75 < long.
    """
    if len(manifest) == 0:
        raise ValueError("evaluation manifest is empty")
    if model.label_maps is None or head not in model.label_maps:
        raise ValueError(f"model carries no label map for head {head!r}")
    label_map = model.label_maps[head]
    clips = clips or VariantClips(manifest, variant)

    rows = []
    for i, rec in enumerate(clips.records):
        probs = predict_clip(model, clips.processed(i).data, drop_tail=drop_tail)[head]
        pred_id = label_map[int(np.argmax(probs))]
        true_id = rec.subject_id if head == "subject" else rec.gesture_id
        rows.append({
            "clip_id": rec.clip_id, "true": true_id, "pred": pred_id,
            "gesture_id": rec.gesture_id, "num_frames": rec.num_frames,
            "correct": pred_id == true_id,
        })

    n = len(rows)
    n_correct = sum(r["correct"] for r in rows)
    report = EvalReport(head=head, overall_accuracy=n_correct / n, num_clips=n, predictions=rows)

    lengths = [r["num_frames"] for r in rows]
    report.length_mean = float(np.mean(lengths))
    report.length_median = float(np.median(lengths))

    for r in rows:
        key = f"{r['true']}->{r['pred']}"
        report.confusion[key] = report.confusion.get(key, 0) + 1

    if "gesture" in groupings:
        for gid in sorted({r["gesture_id"] for r in rows}):
            sub = [r for r in rows if r["gesture_id"] == gid]
            report.per_gesture[gid] = _acc(sum(r["correct"] for r in sub), len(sub))

    if "length" in groupings:
        q25 = nearest_rank_quantile(lengths, 0.25)
        q75 = nearest_rank_quantile(lengths, 0.75)
        report.strata_boundaries = (q25, q75)
        buckets = {"short": [], "medium": [], "long": []}
        for r in rows:
            if r["num_frames"] <= q25:
                buckets["short"].append(r)
            elif r["num_frames"] <= q75:
                buckets["medium"].append(r)
            else:
                buckets["long"].append(r)
        for name, sub in buckets.items():
            report.strata[name] = _acc(sum(r["correct"] for r in sub), len(sub))

    if seen_gestures is not None:
        for name, keep in (("seen", True), ("unseen", False)):
            sub = [r for r in rows if (r["gesture_id"] in seen_gestures) == keep]
            report.seen_unseen[name] = _acc(sum(r["correct"] for r in sub), len(sub))

    return report


# --- pair verification -----------------------------------------------------------


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def fpr_fnr_curve(scores: np.ndarray, labels: np.ndarray):
    """Error rates at every distinct threshold (decision: same iff score >= t).

    Returns (thresholds, fpr, fnr) including a final point above the max
    score where everything is rejected.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    if pos.size == 0 or neg.size == 0:
        raise ValueError("EER undefined: need both positive and negative pairs")
    thresholds = np.unique(scores)
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    fpr = np.empty(thresholds.size)
    fnr = np.empty(thresholds.size)
    for i, t in enumerate(thresholds):
        fpr[i] = np.sum(neg >= t) / neg.size
        fnr[i] = np.sum(pos < t) / pos.size
    return thresholds, fpr, fnr


def equal_error_rate(scores, labels) -> tuple[float, float]:
    """EER and its threshold; linear interpolation at the FNR/FPR crossing."""
    thr, fpr, fnr = fpr_fnr_curve(scores, labels)
    diff = fnr - fpr  # nondecreasing: fnr rises while fpr falls
    # diff starts at -1 (everything accepted) and ends at +1, so the first
    # nonnegative index always has a predecessor
    idx = int(np.argmax(diff >= 0))
    if diff[idx] == 0:
        return float(fpr[idx]), float(thr[idx])
    f1, n1, f2, n2 = fpr[idx - 1], fnr[idx - 1], fpr[idx], fnr[idx]
    denom = (n2 - n1) - (f2 - f1)
    alpha = (f1 - n1) / denom
    eer = f1 + alpha * (f2 - f1)
    threshold = thr[idx - 1] + alpha * (thr[idx] - thr[idx - 1])
    return float(eer), float(threshold)


@dataclass
class VerificationReport:
    eer: float
    eer_threshold: float
    num_pairs: int
    num_positive: int
    pair_scores: list[dict] = field(default_factory=list)
    roc: list[dict] = field(default_factory=list)        # threshold, fpr, tpr
    fpr_fnr: list[dict] = field(default_factory=list)    # threshold, fpr, fnr

    def as_dict(self) -> dict:
        return {
            "eer": self.eer,
            "eer_threshold": self.eer_threshold,
            "num_pairs": self.num_pairs,
            "num_positive": self.num_positive,
            "roc": self.roc,
            "fpr_fnr": self.fpr_fnr,
        }


def verify(model: VideoClassifier, pairs: PairSet, manifest: Manifest,
           variant: InputVariant, drop_tail: bool = False) -> VerificationReport:
    """Cosine-score every pair and sweep thresholds for EER/ROC."""
    if not pairs.pairs:
        raise ValueError("empty pair set")
    clips = VariantClips(manifest, variant)
    id_to_idx = {r.clip_id: i for i, r in enumerate(clips.records)}
    embeddings: dict[str, np.ndarray] = {}
    needed = {p.clip_id_a for p in pairs.pairs} | {p.clip_id_b for p in pairs.pairs}
    for cid in sorted(needed):
        if cid not in id_to_idx:
            raise KeyError(f"pair references unknown clip {cid!r}")
        embeddings[cid] = embed_clip(model, clips.processed(id_to_idx[cid]).data, drop_tail=drop_tail)

    scores = np.array([
        cosine_similarity(embeddings[p.clip_id_a], embeddings[p.clip_id_b]) for p in pairs.pairs
    ])
    labels = np.array([p.label == "same" for p in pairs.pairs])
    eer, eer_thr = equal_error_rate(scores, labels)
    thr, fpr, fnr = fpr_fnr_curve(scores, labels)
    report = VerificationReport(
        eer=eer, eer_threshold=eer_thr,
        num_pairs=len(pairs.pairs), num_positive=int(labels.sum()),
        pair_scores=[
            {"a": p.clip_id_a, "b": p.clip_id_b, "label": p.label, "score": float(s)}
            for p, s in zip(pairs.pairs, scores)
        ],
        roc=[{"threshold": float(t), "fpr": float(f), "tpr": float(1.0 - n)}
             for t, f, n in zip(thr, fpr, fnr)],
        fpr_fnr=[{"threshold": float(t), "fpr": float(f), "fnr": float(n)}
                 for t, f, n in zip(thr, fpr, fnr)],
    )
    return report


# --- CAM aggregation -------------------------------------------------------------


def clip_cam(model: VideoClassifier, clip_data: np.ndarray, head: str,
             class_index: int | None = None) -> np.ndarray:
    """Spatial CAM for one clip, upsampled to 112x112.

    Uses the clip-level predicted class when ``class_index`` is None; maps
    are averaged over windows and time before bilinear upsampling.
    """
    x = _clip_windows_tensor(clip_data)
    model.eval()
    with torch.no_grad():
        out = model(x)
    if class_index is None:
        probs = torch.softmax(out.logits[head], dim=1).mean(dim=0).numpy()
        class_index = int(np.argmax(probs))
    weights = model.heads[head].weight.detach().numpy()
    maps = out.last_maps.numpy()  # (N, K, T', h, w)
    cams = [compute_cam(maps[i], weights, class_index)[0].mean(axis=0) for i in range(maps.shape[0])]
    cam = np.mean(cams, axis=0)
    return cv2.resize(cam.astype(np.float32), (CROP, CROP), interpolation=cv2.INTER_LINEAR)


def average_cam(model: VideoClassifier, clip_datas: list[np.ndarray], head: str,
                class_indices: list[int] | None = None) -> tuple[np.ndarray, tuple[int, int]]:
    """Mean CAM over clips plus its peak pixel (ties: smallest row-major)."""
    if not clip_datas:
        raise ValueError("empty clip list")
    cams = []
    for i, data in enumerate(clip_datas):
        ci = None if class_indices is None else class_indices[i]
        cams.append(clip_cam(model, data, head, ci))
    mean_cam = np.mean(cams, axis=0)
    peak = np.unravel_index(int(np.argmax(mean_cam)), mean_cam.shape)
    return mean_cam, (int(peak[0]), int(peak[1]))


def mean_mask(mask_clips: list[np.ndarray]) -> np.ndarray:
    """Mean hand-presence map over processed binary clips (T,112,112,1)."""
    if not mask_clips:
        raise ValueError("empty clip list")
    return np.mean([c.mean(axis=(0, 3)) for c in mask_clips], axis=0)


def peak_distance(cam: np.ndarray, mask_map: np.ndarray) -> float:
    """Euclidean pixel distance between the CAM peak and the mask peak."""
    p1 = np.unravel_index(int(np.argmax(cam)), cam.shape)
    p2 = np.unravel_index(int(np.argmax(mask_map)), mask_map.shape)
    return float(np.hypot(p1[0] - p2[0], p1[1] - p2[1]))


# --- feature probing -------------------------------------------------------------


def linear_probe_accuracy(train_x: np.ndarray, train_y: np.ndarray,
                          test_x: np.ndarray, test_y: np.ndarray,
                          seed: int = 0, steps: int = 400, lr: float = 0.05) -> float:
    """Accuracy of a fresh linear classifier trained on frozen features."""
    classes = sorted(set(int(v) for v in train_y))
    index = {v: i for i, v in enumerate(classes)}
    ytr = torch.tensor([index[int(v)] for v in train_y], dtype=torch.long)
    yte = np.array([index.get(int(v), -1) for v in test_y])
    xtr = torch.tensor(np.asarray(train_x), dtype=torch.float32)
    xte = torch.tensor(np.asarray(test_x), dtype=torch.float32)
    mu, sd = xtr.mean(dim=0, keepdim=True), xtr.std(dim=0, keepdim=True).clamp_min(1e-6)
    xtr = (xtr - mu) / sd
    xte = (xte - mu) / sd
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed("probe", seed))
        probe = torch.nn.Linear(xtr.shape[1], len(classes))
        opt = torch.optim.Adam(probe.parameters(), lr=lr)
        for _ in range(steps):
            opt.zero_grad()
            loss = torch.nn.functional.cross_entropy(probe(xtr), ytr)
            loss.backward()
            opt.step()
        with torch.no_grad():
            pred = probe(xte).argmax(dim=1).numpy()
    return float(np.mean(pred == yte))


# --- plots -----------------------------------------------------------------------


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_roc(report: VerificationReport, path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot([r["fpr"] for r in report.roc], [r["tpr"] for r in report.roc], marker=".")
    ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(f"ROC (EER {report.eer:.3f})")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_fpr_fnr(report: VerificationReport, path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 4))
    thr = [r["threshold"] for r in report.fpr_fnr]
    ax.plot(thr, [r["fpr"] for r in report.fpr_fnr], label="FPR")
    ax.plot(thr, [r["fnr"] for r in report.fpr_fnr], label="FNR")
    ax.axhline(report.eer, ls="--", c="gray", lw=0.8)
    ax.set_xlabel("Cosine threshold")
    ax.set_ylabel("Error rate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_length_histogram(lengths, path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(list(lengths), bins=20, color="steelblue", edgecolor="black", lw=0.4)
    ax.set_xlabel("Frames per clip")
    ax.set_ylabel("Count")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_per_gesture_bar(report: EvalReport, path) -> None:
    plt = _plt()
    items = sorted(report.per_gesture.items(), key=lambda kv: kv[1]["accuracy"] or 0.0)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(items) + 1), 3.5))
    ax.bar([str(k) for k, _ in items], [v["accuracy"] or 0.0 for _, v in items], color="steelblue")
    ax.set_xlabel("Gesture class")
    ax.set_ylabel("Accuracy")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_cam(cam: np.ndarray, path, peak: tuple[int, int] | None = None) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(cam, cmap="magma")
    if peak is not None:
        ax.plot([peak[1]], [peak[0]], marker="x", c="cyan", ms=10)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
