"""Learnable components: residual backbones, the HGD face/gaze models, the
landmark-feature stack used without head-pose labels, and the Wing loss.

Tensors are channels-first, ``(B, C, H, W)``. Angle outputs are in degrees.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn
import torch.nn.functional as F

HEAD_FEATURE = 64
GAZE_FEATURE = 64
LANDMARK_FEATURE = 200
N_LANDMARKS = 16
N_ZONES = 9
AUX_SIZES = (200, 200, 100, 50, 2)
FINAL_SIZES = (600, 300, 100, 32, 2)

# depth -> (block, blocks per stage)
RESNET_LAYOUTS = {
    10: ("basic", (1, 1, 1, 1)),
    18: ("basic", (2, 2, 2, 2)),
    34: ("basic", (3, 4, 6, 3)),
    56: ("basic", (9, 9, 9)),
    101: ("bottleneck", (3, 4, 23, 3)),
}


def wing_loss(pred: torch.Tensor, target: torch.Tensor, w: float = 10.0, eps: float = 2.0) -> torch.Tensor:
    """Mean Wing loss: ``w*ln(1+|x|/eps)`` below ``w``, ``|x| - C`` above it."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    x = (pred - target).abs()
    c = w - w * math.log(1.0 + w / eps)
    loss = torch.where(x < w, w * torch.log1p(x / eps), x - c)
    return loss.mean()


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.shortcut is None else self.shortcut(x)))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, planes, stride=1):
        super().__init__()
        cout = planes * self.expansion
        self.conv1 = nn.Conv2d(cin, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + (x if self.shortcut is None else self.shortcut(x)))


@dataclass
class BackboneConfig:
    depth: int = 34
    in_channels: int = 1
    input_hw: tuple[int, int] = (224, 224)
    width: int = 64

    def __post_init__(self):
        if self.depth not in RESNET_LAYOUTS:
            raise ValueError(f"depth must be one of {sorted(RESNET_LAYOUTS)}, got {self.depth}")
        self.input_hw = tuple(self.input_hw)


class ResNet(nn.Module):
    """Residual backbone returning a pooled feature vector.

    The stem adapts to the input: a strided 7x7 conv plus max pooling from
    96 px on the short side, a stride-2 3x3 conv from 48 px, otherwise a
    stride-1 3x3 conv.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        kind, layout = RESNET_LAYOUTS[cfg.depth]
        block = BasicBlock if kind == "basic" else Bottleneck
        w = cfg.width
        if min(cfg.input_hw) >= 96:
            self.stem = nn.Sequential(
                nn.Conv2d(cfg.in_channels, w, 7, 2, 3, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, 2, 1),
            )
        else:
            stride = 2 if min(cfg.input_hw) >= 48 else 1
            self.stem = nn.Sequential(
                nn.Conv2d(cfg.in_channels, w, 3, stride, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)
            )
        stages = []
        cin = w
        for i, n in enumerate(layout):
            planes = w * 2**i
            for j in range(n):
                stride = 2 if (j == 0 and i > 0) else 1
                stages.append(block(cin, planes, stride))
                cin = planes * block.expansion
        self.stages = nn.Sequential(*stages)
        self.out_features = cin
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def check_input(self, x: torch.Tensor) -> None:
        c, (h, w) = self.cfg.in_channels, self.cfg.input_hw
        if x.ndim != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise ValueError(f"expected input (B, {c}, {h}, {w}), got {tuple(x.shape)}")

    def forward(self, x):
        self.check_input(x)
        x = self.stages(self.stem(x))
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


def mlp(sizes, in_features: int) -> nn.ModuleList:
    layers = []
    for n in sizes:
        layers.append(nn.Linear(in_features, n))
        in_features = n
    return nn.ModuleList(layers)


def _check_width(x: torch.Tensor, width: int, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"{what} must be (B, {width}), got {tuple(x.shape)}")


class FaceModel(nn.Module):
    """Face image to (64-d head feature, head pose)."""

    def __init__(self, backbone: BackboneConfig, angle_scale: float = 30.0):
        super().__init__()
        self.backbone = ResNet(backbone)
        self.fc1 = nn.Linear(self.backbone.out_features, 128)
        self.fc2 = nn.Linear(128, HEAD_FEATURE)
        self.out = nn.Linear(HEAD_FEATURE, 2)
        self.angle_scale = angle_scale

    def forward(self, face):
        x = F.relu(self.fc1(self.backbone(face)))
        feature = F.relu(self.fc2(x))
        return feature, self.out(feature) * self.angle_scale


class GazeModel(nn.Module):
    """Eye tensor (+ head feature, + LDA vector) to gaze.

    The 64-unit gaze feature is the third layer from the output. With
    ``use_head`` the fusion input is ``64 + 64 + lda_dim`` wide, otherwise
    ``64 + lda_dim``. ``n_out`` is 2 (one eye), 4 (both eyes) or 9 (zone
    logits, returned unscaled).
    """

    def __init__(
        self,
        backbone: BackboneConfig,
        n_out: int = 2,
        use_head: bool = True,
        lda_dim: int = 0,
        angle_scale: float = 30.0,
    ):
        super().__init__()
        self.backbone = ResNet(backbone)
        self.fc3 = nn.Linear(self.backbone.out_features, GAZE_FEATURE)
        self.use_head = use_head
        self.lda_dim = lda_dim
        self.fusion_in = GAZE_FEATURE + (HEAD_FEATURE if use_head else 0) + lda_dim
        self.fc2 = nn.Linear(self.fusion_in, 64)
        self.out = nn.Linear(64, n_out)
        self.n_out = n_out
        self.angle_scale = 1.0 if n_out == N_ZONES else angle_scale

    def gaze_feature(self, eye):
        return F.relu(self.fc3(self.backbone(eye)))

    def fuse(self, gaze_feature, head_feature=None, lda=None):
        parts = [gaze_feature]
        if self.use_head:
            if head_feature is None:
                raise ValueError("this gaze model fuses a head feature but none was given")
            _check_width(head_feature, HEAD_FEATURE, "head_feature")
            parts.append(head_feature)
        if self.lda_dim:
            if lda is None:
                raise ValueError(f"this gaze model expects an LDA vector of width {self.lda_dim}")
            _check_width(lda, self.lda_dim, "lda vector")
            parts.append(lda)
        x = torch.cat(parts, dim=1)
        return self.out(F.relu(self.fc2(x))) * self.angle_scale

    def forward(self, eye, head_feature=None, lda=None):
        return self.fuse(self.gaze_feature(eye), head_feature, lda)


class HGD(nn.Module):
    """Face branch feeding its head feature into the gaze branch's fusion layers."""

    def __init__(self, face: FaceModel | None, gaze: GazeModel):
        super().__init__()
        if (face is None) == gaze.use_head:
            raise ValueError("gaze.use_head must be True exactly when a face model is given")
        self.face = face
        self.gaze = gaze

    def forward(self, face_x, eye_x, lda=None):
        """Returns ``(gaze_pred, head_pred or None)``."""
        if self.face is None:
            return self.gaze(eye_x, None, lda), None
        feature, head = self.face(face_x)
        return self.gaze(eye_x, feature, lda), head


class LandmarkDetector(nn.Module):
    """Eye crop to 32 normalised landmark coordinates and a 200-d feature."""

    def __init__(self, backbone: BackboneConfig):
        super().__init__()
        self.backbone = ResNet(backbone)
        self.fc = nn.Linear(self.backbone.out_features, LANDMARK_FEATURE)
        self.out = nn.Linear(LANDMARK_FEATURE, 2 * N_LANDMARKS)

    def forward(self, eye):
        feature = F.relu(self.fc(self.backbone(eye)))
        # centred at 0.5 so an untrained detector predicts the crop centre
        return self.out(feature) + 0.5, feature


class AuxModule(nn.Module):
    """Five linear layers 200-200-100-50-2; the tap is the second 200-unit activation."""

    def __init__(self, angle_scale: float = 30.0):
        super().__init__()
        self.layers = mlp(AUX_SIZES, LANDMARK_FEATURE)
        self.angle_scale = angle_scale

    def forward(self, feature):
        _check_width(feature, LANDMARK_FEATURE, "landmark feature")
        x = feature
        tap = None
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
            if i == 1:
                tap = x
        return x * self.angle_scale, tap


class FinalGazeModel(nn.Module):
    """Five linear layers 600-300-100-32-2 over the concatenated 600-d feature."""

    def __init__(self, angle_scale: float = 30.0):
        super().__init__()
        self.layers = mlp(FINAL_SIZES, sum((LANDMARK_FEATURE, AUX_SIZES[1], AUX_SIZES[1])))
        self.angle_scale = angle_scale

    def forward(self, concat):
        _check_width(concat, FINAL_SIZES[0], "final-model input")
        x = concat
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x * self.angle_scale


class NoHPStack(nn.Module):
    def __init__(self, detector: LandmarkDetector, gaze_module: AuxModule, head_module: AuxModule, final: FinalGazeModel):
        super().__init__()
        self.detector = detector
        self.gaze_module = gaze_module
        self.head_module = head_module
        self.final = final

    def features(self, eye):
        _, feat = self.detector(eye)
        _, gtap = self.gaze_module(feat)
        _, htap = self.head_module(feat)
        concat = torch.cat([feat, gtap, htap], dim=1)
        _check_width(concat, FINAL_SIZES[0], "concatenated feature")
        return concat

    def forward(self, eye):
        return self.final(self.features(eye))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# checkpoints


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, model: nn.Module, config: dict, seed: int) -> Path:
    """Write ``<path>`` (torch state dict) and ``<path>.json`` (config echo, counts, hash, seed)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {
        "config": config,
        "parameter_count": count_parameters(model),
        "state_sha256": state_hash(model),
        "file_sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
        "seed": seed,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Return ``(state_dict, sidecar)``; the sidecar's file hash is verified."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    if digest != sidecar["file_sha256"]:
        raise ValueError(f"checkpoint {path} does not match its sidecar hash")
    state = torch.load(path, map_location="cpu", weights_only=True)
    return state, sidecar


def backbone_dict(cfg: BackboneConfig) -> dict:
    d = asdict(cfg)
    d["input_hw"] = list(cfg.input_hw)
    return d
