"""Video classifier family: 3D-conv ResNet-18, its 2D temporal-average
variant, a small 4-block model for CPU-scale runs, gradient reversal, class
activation maps, and checkpoint I/O.

Inputs are (B, C, 16, 112, 112). The penultimate pooled vector is the clip
embedding used for verification; the final conv block's activations feed CAM.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .seeds import derive_seed

ARCHS = ("resnet18_3d", "resnet18_2d_avg", "tiny3d")
HEADS = ("subject", "gesture")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "tiny3d"
    in_channels: int = 3
    width_multiplier: float = 1.0
    num_subject_classes: int = 0
    num_gesture_classes: int = 0
    heads: tuple[str, ...] = ("subject",)
    grl_lambda: float = 0.1

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; known: {ARCHS}")
        if self.in_channels not in (1, 3, 4):
            raise ValueError(f"in_channels must be 1, 3, or 4, got {self.in_channels}")
        if not (0.0 < self.width_multiplier <= 1.0):
            raise ValueError("width_multiplier must lie in (0, 1]")
        if not self.heads or any(h not in HEADS for h in self.heads):
            raise ValueError(f"heads must be a nonempty subset of {HEADS}, got {self.heads}")
        if self.grl_lambda < 0:
            raise ValueError("grl_lambda must be nonnegative")
        for h in self.heads:
            n = self.num_subject_classes if h == "subject" else self.num_gesture_classes
            if n < 2:
                raise ValueError(f"head {h!r} needs >= 2 classes, got {n}")


@dataclass
class NetOutputs:
    features: torch.Tensor            # (B, D) pooled penultimate
    last_maps: torch.Tensor           # (B, K, T', h, w) final conv activations
    logits: dict[str, torch.Tensor] = field(default_factory=dict)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grad_reverse(x: torch.Tensor, lam: float) -> torch.Tensor:
    """Identity forward; gradient scaled by -lam on the way back."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return _GradReverse.apply(x, float(lam))


def _w(ch: int, mult: float) -> int:
    return max(1, int(round(ch * mult)))


class _BasicBlock(nn.Module):
    def __init__(self, conv, bn, cin, cout, stride):
        super().__init__()
        self.conv1 = conv(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = bn(cout)
        self.conv2 = conv(cout, cout, 3, stride=1, padding=1, bias=False)
        self.bn2 = bn(cout)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(conv(cin, cout, 1, stride=stride, bias=False), bn(cout))
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


def _resnet18_backbone(conv, bn, pool, in_channels, mult):
    chans = [_w(c, mult) for c in (64, 128, 256, 512)]
    stem_conv = (
        conv(in_channels, chans[0], (7, 7, 7), stride=(1, 2, 2), padding=(3, 3, 3), bias=False)
        if conv is nn.Conv3d
        else conv(in_channels, chans[0], 7, stride=2, padding=3, bias=False)
    )
    stem = nn.Sequential(stem_conv, bn(chans[0]), nn.ReLU(inplace=True), pool)
    layers = []
    cin = chans[0]
    for i, cout in enumerate(chans):
        stride = 1 if i == 0 else 2
        layers.append(nn.Sequential(
            _BasicBlock(conv, bn, cin, cout, stride),
            _BasicBlock(conv, bn, cout, cout, 1),
        ))
        cin = cout
    return stem, nn.ModuleList(layers), chans[-1]


class VideoClassifier(nn.Module):
    """Shared backbone with one linear classification head per task."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.label_maps: dict[str, list[int]] | None = None
        if cfg.arch == "resnet18_3d":
            pool = nn.MaxPool3d(kernel_size=3, stride=2, padding=1)
            self.stem, self.layers, self.feature_dim = _resnet18_backbone(
                nn.Conv3d, nn.BatchNorm3d, pool, cfg.in_channels, cfg.width_multiplier)
            self._per_frame = False
        elif cfg.arch == "resnet18_2d_avg":
            pool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
            self.stem, self.layers, self.feature_dim = _resnet18_backbone(
                nn.Conv2d, nn.BatchNorm2d, pool, cfg.in_channels, cfg.width_multiplier)
            self._per_frame = True
        else:  # tiny3d: reduced 4-block stack for CPU-scale experiments
            c = [_w(ch, cfg.width_multiplier) for ch in (16, 32, 64, 96)]
            self.stem = nn.Sequential(
                nn.Conv3d(cfg.in_channels, c[0], (3, 5, 5), stride=(1, 2, 2), padding=(1, 2, 2), bias=False),
                nn.BatchNorm3d(c[0]), nn.ReLU(inplace=True), nn.MaxPool3d(2),
            )
            self.layers = nn.ModuleList([
                nn.Sequential(_BasicBlock(nn.Conv3d, nn.BatchNorm3d, c[0], c[1], 2)),
                nn.Sequential(_BasicBlock(nn.Conv3d, nn.BatchNorm3d, c[1], c[2], 2)),
                nn.Sequential(_BasicBlock(nn.Conv3d, nn.BatchNorm3d, c[2], c[3], 2)),
            ])
            self.feature_dim = c[3]
            self._per_frame = False
        self.heads = nn.ModuleDict()
        for h in cfg.heads:
            n = cfg.num_subject_classes if h == "subject" else cfg.num_gesture_classes
            self.heads[h] = nn.Linear(self.feature_dim, n)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv3d, nn.Conv2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, (nn.BatchNorm3d, nn.BatchNorm2d)):
                nn.init.constant_(m.weight, 1.0)
                nn.init.constant_(m.bias, 0.0)

    def _backbone_maps(self, x: torch.Tensor) -> torch.Tensor:
        if self._per_frame:
            b, c, t, h, w = x.shape
            frames = x.permute(0, 2, 1, 3, 4).reshape(b * t, c, h, w)
            maps = self.stem(frames)
            for layer in self.layers:
                maps = layer(maps)
            _, k, hh, ww = maps.shape
            return maps.view(b, t, k, hh, ww).permute(0, 2, 1, 3, 4)
        maps = self.stem(x)
        for layer in self.layers:
            maps = layer(maps)
        return maps

    def forward(self, x: torch.Tensor, reverse_subject_lambda: float | None = None) -> NetOutputs:
        if x.dim() != 5:
            raise ValueError(f"expected (B,C,T,H,W) input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"model expects {self.cfg.in_channels} channels, got {x.shape[1]}")
        maps = self._backbone_maps(x)
        feats = maps.mean(dim=(2, 3, 4))
        logits = {}
        for h, head in self.heads.items():
            inp = feats
            if h == "subject" and reverse_subject_lambda is not None:
                inp = grad_reverse(feats, reverse_subject_lambda)
            logits[h] = head(inp)
        return NetOutputs(features=feats, last_maps=maps, logits=logits)


def build_model(cfg: ModelConfig, seed: int | None = None) -> VideoClassifier:
    """Construct a model; with a seed, initialization is reproducible."""
    if seed is None:
        return VideoClassifier(cfg)
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed("model-init", seed))
        return VideoClassifier(cfg)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def compute_cam(last_maps: np.ndarray, head_weights: np.ndarray,
                class_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Class activation map: per-position weighted sum of feature maps.

    Returns (raw_cam, normalized_cam) of shape (T',h,w); the normalized copy
    is min-max scaled to [0,1] for rendering.
    """
    maps = np.asarray(last_maps, dtype=np.float64)
    weights = np.asarray(head_weights, dtype=np.float64)
    if maps.ndim != 4:
        raise ValueError(f"expected (K,T',h,w) maps, got shape {maps.shape}")
    if weights.ndim != 2 or weights.shape[1] != maps.shape[0]:
        raise ValueError(f"weights (num_classes,K) must match maps K={maps.shape[0]}")
    if not (0 <= class_index < weights.shape[0]):
        raise IndexError(f"class_index {class_index} out of range [0, {weights.shape[0]})")
    cam = np.tensordot(weights[class_index], maps, axes=([0], [0]))
    lo, hi = cam.min(), cam.max()
    norm = np.zeros_like(cam) if hi == lo else (cam - lo) / (hi - lo)
    return cam, norm


# --- checkpoints ----------------------------------------------------------------

CHECKPOINT_FORMAT = "ehi-checkpoint-v1"


def save_checkpoint(path: str | Path, model: VideoClassifier, *,
                    optimizer: torch.optim.Optimizer | None = None,
                    epoch: int = 0, train_config: dict | None = None,
                    provenance: str = "") -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(model.cfg),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "rng_state": {"torch": torch.get_rng_state()},
        "label_maps": model.label_maps,
        "train_config": train_config,
        "provenance": provenance,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[VideoClassifier, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    mc = payload["model_config"]
    mc["heads"] = tuple(mc["heads"])
    cfg = ModelConfig(**mc)
    model = VideoClassifier(cfg)
    model.load_state_dict(payload["model_state"])
    model.label_maps = payload.get("label_maps")
    return model, payload


def adapt_stem_weight(weight: torch.Tensor, in_channels: int) -> torch.Tensor:
    """Fit a 3-channel pretrained stem kernel to 1 or 4 input channels.

    1 channel takes the mean over RGB; 4 channels keep RGB and append the
    mean as the extra (depth) channel.
    """
    if weight.shape[1] != 3:
        raise ValueError(f"expected a 3-channel stem kernel, got {weight.shape[1]}")
    if in_channels == 3:
        return weight
    mean = weight.mean(dim=1, keepdim=True)
    if in_channels == 1:
        return mean
    if in_channels == 4:
        return torch.cat([weight, mean], dim=1)
    raise ValueError(f"cannot adapt stem to {in_channels} channels")


def load_pretrained_backbone(model: VideoClassifier, weights_path: str | Path) -> list[str]:
    """Load externally pretrained backbone weights by canonical layer name.

    The file must hold a state dict (optionally under a 'model_state' or
    'state_dict' key) using this package's layer names with a 3-channel stem
    ('stem.0.weight'); the stem is channel-adapted automatically. Head
    weights are never loaded. Returns the list of skipped keys.
    """
    blob = torch.load(weights_path, map_location="cpu", weights_only=False)
    for key in ("model_state", "state_dict"):
        if isinstance(blob, dict) and key in blob:
            blob = blob[key]
            break
    own = model.state_dict()
    loaded, skipped = {}, []
    for name, tensor in blob.items():
        if name.startswith("heads."):
            skipped.append(name)
            continue
        if name == "stem.0.weight":
            tensor = adapt_stem_weight(tensor, model.cfg.in_channels)
        if name in own and own[name].shape == tensor.shape:
            loaded[name] = tensor
        else:
            skipped.append(name)
    missing = [k for k in own if k not in loaded and not k.startswith("heads.")]
    if missing:
        raise ValueError(f"pretrained file missing backbone keys, e.g. {missing[:3]}")
    own.update(loaded)
    model.load_state_dict(own)
    return skipped
