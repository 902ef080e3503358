"""Training objectives: single-task, joint multi-task, and adversarial
subject-invariance via gradient reversal.

The adversarial objective trains the shared extractor and gesture head to
minimize the gesture loss minus lambda times the subject loss, while the
subject head itself descends on its own loss. Both updates happen in one
backward pass through the reversal connector; a literal two-phase
alternation is available behind ``literal_alternation`` for A/B checks.

Optimization recipe defaults: Adam, batch 32, lr 1e-4, 20 epochs with a
x0.1 decay entering epoch 10 (0-based), shuffled seeded mini-batches.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .ablate import InputVariant, VariantClips
from .corpus import Manifest
from .net import VideoClassifier, save_checkpoint
from .seeds import derive_seed, rng_for

OBJECTIVES = ("single_subject", "single_gesture", "joint", "adversarial")

DETERMINISTIC_ENV = "EHI_DETERMINISTIC"


@dataclass
class TrainConfig:
    objective: str = "single_gesture"
    batch_size: int = 32
    lr: float = 1e-4
    epochs: int = 20
    lr_decay_epoch: int = 10
    lr_decay_factor: float = 0.1
    adv_lambda: float = 0.1
    adv_lambda_warmup: bool = True
    literal_alternation: bool = False
    seed: int = 0
    variant: str = "RGB"
    deterministic: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; known: {OBJECTIVES}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.adv_lambda < 0:
            raise ValueError("adv_lambda must be nonnegative")
        InputVariant(self.variant)

    @property
    def primary_head(self) -> str:
        return "subject" if self.objective == "single_subject" else "gesture"


@dataclass
class LossReport:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    _COLUMNS = ("step", "epoch", "loss_gesture", "loss_subject", "total", "lr")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self._COLUMNS)
            writer.writeheader()
            for row in self.steps:
                writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in self._COLUMNS})

    def summary(self) -> dict:
        return {
            "num_steps": len(self.steps),
            "num_epochs": len(self.epochs),
            "final_total": self.steps[-1]["total"] if self.steps else None,
            "epochs": self.epochs,
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n")


@dataclass
class TrainResult:
    report: LossReport
    label_maps: dict[str, list[int]]
    best_state: dict | None = None
    best_val_accuracy: float | None = None
    best_epoch: int | None = None


def loss_classification(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the batch."""
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    n = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= n:
        bad = labels[(labels < 0) | (labels >= n)][0].item()
        raise IndexError(f"label {bad} out of range for {n} classes")
    return F.cross_entropy(logits, labels)


def loss_joint(loss_gesture: torch.Tensor, loss_subject: torch.Tensor) -> torch.Tensor:
    """Unit-weighted sum of the two task losses."""
    return loss_gesture + loss_subject


def make_label_maps(manifest: Manifest) -> dict[str, list[int]]:
    return {"subject": manifest.subject_ids(), "gesture": manifest.gesture_ids()}


def _labels_for(records, label_map: list[int], kind: str) -> torch.Tensor:
    index = {v: i for i, v in enumerate(label_map)}
    ids = [r.subject_id if kind == "subject" else r.gesture_id for r in records]
    missing = [i for i in ids if i not in index]
    if missing:
        raise ValueError(f"{kind} ids {sorted(set(missing))} absent from the training label map")
    return torch.tensor([index[i] for i in ids], dtype=torch.long)


def to_model_input(windows: list[np.ndarray]) -> torch.Tensor:
    """Stack (T,H,W,C) float windows into a (B,C,T,H,W) tensor."""
    arr = np.stack([np.transpose(w, (3, 0, 1, 2)) for w in windows])
    return torch.from_numpy(np.ascontiguousarray(arr))


@contextmanager
def deterministic_mode(enabled: bool):
    """Single-threaded, deterministic-kernels torch context."""
    if not enabled:
        yield
        return
    old_threads = torch.get_num_threads()
    old_flag = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(old_threads)
        torch.use_deterministic_algorithms(old_flag)


def deterministic_requested(cfg: TrainConfig | None = None) -> bool:
    if os.environ.get(DETERMINISTIC_ENV, "") == "1":
        return True
    return bool(cfg and cfg.deterministic)


def _objective_losses(model, x, ys, yg, objective, lam):
    """Forward pass and per-head losses for one batch; returns (total, lg, lp)."""
    if objective == "single_subject":
        out = model(x)
        lp = loss_classification(out.logits["subject"], ys)
        return lp, None, lp
    if objective == "single_gesture":
        out = model(x)
        lg = loss_classification(out.logits["gesture"], yg)
        return lg, lg, None
    if objective == "joint":
        out = model(x)
        lg = loss_classification(out.logits["gesture"], yg)
        lp = loss_classification(out.logits["subject"], ys)
        return loss_joint(lg, lp), lg, lp
    # adversarial: reversal scales the subject gradient by -lam below the head
    out = model(x, reverse_subject_lambda=lam)
    lg = loss_classification(out.logits["gesture"], yg)
    lp = loss_classification(out.logits["subject"], ys)
    return lg + lp, lg, lp


def step_adversarial(model: VideoClassifier, x: torch.Tensor, subject_labels: torch.Tensor,
                     gesture_labels: torch.Tensor, lam: float,
                     optimizer: torch.optim.Optimizer) -> dict:
    """One adversarial update through the gradient-reversal connector.

    Shared parameters receive grad(L_gesture) - lam * grad(L_subject); the
    subject head receives its plain +grad(L_subject).
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    total, lg, lp = _objective_losses(model, x, subject_labels, gesture_labels, "adversarial", lam)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return {"loss_gesture": lg.item(), "loss_subject": lp.item(), "total": total.item()}


def _validation_accuracy(model, val_clips: VariantClips, label_map: list[int], head: str) -> float:
    from .evalkit import predict_clip
    index = {v: i for i, v in enumerate(label_map)}
    correct = 0
    model.eval()
    for i, rec in enumerate(val_clips.records):
        probs = predict_clip(model, val_clips.processed(i).data)[head]
        pred = int(np.argmax(probs))
        true_id = rec.subject_id if head == "subject" else rec.gesture_id
        if index.get(true_id, -1) == pred:
            correct += 1
    model.train()
    return correct / len(val_clips.records)


def train(model: VideoClassifier, manifest: Manifest, cfg: TrainConfig,
          val_manifest: Manifest | None = None, log=None) -> TrainResult:
    """Run the configured objective; returns the loss report and best state.

    The model is trained in place and ends at the final epoch; the state
    with the best validation accuracy (primary task) is kept alongside.
    Batch order is a pure function of (seed, epoch).
    """
    if len(manifest) == 0:
        raise ValueError("training manifest is empty")
    variant = InputVariant(cfg.variant)
    if model.cfg.in_channels != variant.channels:
        raise ValueError(
            f"model expects {model.cfg.in_channels} channels but variant "
            f"{variant.value} provides {variant.channels}")
    needed = {"single_subject": ("subject",), "single_gesture": ("gesture",)}.get(
        cfg.objective, ("subject", "gesture"))
    for h in needed:
        if h not in model.heads:
            raise ValueError(f"objective {cfg.objective!r} needs a {h!r} head")

    label_maps = make_label_maps(manifest)
    model.label_maps = label_maps
    clips = VariantClips(manifest, variant)
    ys_all = _labels_for(clips.records, label_maps["subject"], "subject")
    yg_all = _labels_for(clips.records, label_maps["gesture"], "gesture")
    val_clips = VariantClips(val_manifest, variant) if val_manifest and len(val_manifest) else None

    report = LossReport()
    best_state = None
    best_acc = None
    best_epoch = None

    with deterministic_mode(deterministic_requested(cfg)):
        if cfg.literal_alternation and cfg.objective == "adversarial":
            main_params = [p for n, p in model.named_parameters() if not n.startswith("heads.subject")]
            sub_params = list(model.heads["subject"].parameters())
            opt_main = torch.optim.Adam(main_params, lr=cfg.lr)
            opt_sub = torch.optim.Adam(sub_params, lr=cfg.lr)
            optimizers = [opt_main, opt_sub]
        else:
            optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
            optimizers = [optimizer]

        n = len(clips)
        steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
        step = 0
        model.train()
        for epoch in range(cfg.epochs):
            lr_now = cfg.lr * (cfg.lr_decay_factor if epoch >= cfg.lr_decay_epoch else 1.0)
            for opt in optimizers:
                for group in opt.param_groups:
                    group["lr"] = lr_now
            order = rng_for(cfg.seed, "order", epoch).permutation(n)
            epoch_totals = []
            for b0 in range(0, n, cfg.batch_size):
                idxs = order[b0:b0 + cfg.batch_size]
                windows = [
                    clips.train_window(
                        int(i),
                        crop_seed=derive_seed(cfg.seed, "crop", epoch, clips.records[int(i)].clip_id),
                        window_seed=derive_seed(cfg.seed, "win", epoch, clips.records[int(i)].clip_id),
                    )
                    for i in idxs
                ]
                x = to_model_input(windows)
                ys = ys_all[idxs]
                yg = yg_all[idxs]

                lam = cfg.adv_lambda
                if cfg.objective == "adversarial" and cfg.adv_lambda_warmup and epoch == 0:
                    lam = cfg.adv_lambda * min(1.0, (step + 1) / steps_per_epoch)

                if cfg.literal_alternation and cfg.objective == "adversarial":
                    # phase 1: extractor + gesture head descend L_g - lam*L_p
                    out = model(x)
                    lg = loss_classification(out.logits["gesture"], yg)
                    lp_a = loss_classification(out.logits["subject"], ys)
                    opt_main.zero_grad()
                    (lg - lam * lp_a).backward()
                    opt_main.step()
                    # phase 2: subject head descends its own loss at the new extractor
                    out_b = model(x)
                    lp = loss_classification(out_b.logits["subject"], ys)
                    opt_sub.zero_grad()
                    lp.backward()
                    opt_sub.step()
                    opt_main.zero_grad()
                    total = lg + lp
                else:
                    total, lg, lp = _objective_losses(model, x, ys, yg, cfg.objective, lam)
                    optimizer.zero_grad()
                    total.backward()
                    optimizer.step()

                entry = {
                    "step": step,
                    "epoch": epoch,
                    "loss_gesture": None if lg is None else lg.item(),
                    "loss_subject": None if lp is None else lp.item(),
                    "total": total.item(),
                    "lr": lr_now,
                }
                report.steps.append(entry)
                epoch_totals.append(total.item())
                step += 1

            val_acc = None
            if val_clips is not None:
                val_acc = _validation_accuracy(model, val_clips, label_maps[cfg.primary_head], cfg.primary_head)
                if best_acc is None or val_acc > best_acc:
                    best_acc = val_acc
                    best_epoch = epoch
                    best_state = copy.deepcopy(model.state_dict())
            epoch_row = {
                "epoch": epoch,
                "mean_total": float(np.mean(epoch_totals)),
                "val_accuracy": val_acc,
                "lr": lr_now,
            }
            report.epochs.append(epoch_row)
            if log:
                log(f"epoch {epoch}: mean loss {epoch_row['mean_total']:.4f}"
                    + (f", val acc {val_acc:.3f}" if val_acc is not None else ""))

    return TrainResult(report=report, label_maps=label_maps, best_state=best_state,
                       best_val_accuracy=best_acc, best_epoch=best_epoch)


def save_train_checkpoints(model: VideoClassifier, result: TrainResult, cfg: TrainConfig,
                           out_dir: str | Path, optimizer=None, provenance: str = "") -> dict:
    """Write final (and, when validated, best) checkpoints plus loss files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    final_path = out_dir / "ckpt.pt"
    save_checkpoint(final_path, model, optimizer=optimizer, epoch=cfg.epochs - 1,
                    train_config=asdict(cfg), provenance=provenance)
    paths = {"final": str(final_path)}
    if result.best_state is not None:
        current = copy.deepcopy(model.state_dict())
        model.load_state_dict(result.best_state)
        best_path = out_dir / "ckpt.best.pt"
        save_checkpoint(best_path, model, epoch=result.best_epoch or 0,
                        train_config=asdict(cfg),
                        provenance=f"{provenance} best_val={result.best_val_accuracy}")
        model.load_state_dict(current)
        paths["best"] = str(best_path)
    result.report.to_csv(out_dir / "loss.csv")
    result.report.save_json(out_dir / "loss.json")
    paths["loss_csv"] = str(out_dir / "loss.csv")
    paths["loss_json"] = str(out_dir / "loss.json")
    return paths
