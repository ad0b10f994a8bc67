"""Training regimes: implicit multi-task, explicit two-stage, the three-stage
pipeline without head-pose labels, and the 9-zone classifier."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import SampleSet, Strategy, batch_indices, merge_eyes, targets_for
from .geometry import aem, vem
from .nets import (
    HGD,
    AuxModule,
    BackboneConfig,
    FaceModel,
    FinalGazeModel,
    GazeModel,
    LandmarkDetector,
    NoHPStack,
    N_ZONES,
    wing_loss,
)
from .preprocess import HogConfig, LdaTransform, assemble_input, fit_lda, hog_descriptor, mhog

REGIMES = ("implicit", "explicit", "nohp", "classifier")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    lr_decay: float = 0.1
    decay_every: int = 30
    beta: float = 0.3
    seed: int = 0
    strategy: str = "SEM"
    use_face: bool = True
    head_task: bool = True
    use_mhog: bool = False
    use_lda: bool = False
    depth: int = 34
    width: int = 64
    wing_w: float = 10.0
    wing_eps: float = 2.0
    patience: int = 10
    min_delta: float = 0.05

    def __post_init__(self):
        self.strategy = Strategy(self.strategy).value
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.epochs < 1 or self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("epochs, batch_size and decay_every must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step size for a 0-based epoch index within a stage."""
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)


# --------------------------------------------------------------------------
# history


@dataclass
class TrainHistory:
    """Per-epoch metric records plus stage boundaries and warnings."""

    records: list[dict] = field(default_factory=list)
    boundaries: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add_epoch(self, stage: str, **metrics) -> dict:
        epoch = len(self.records)
        for k, v in metrics.items():
            if isinstance(v, float) and not math.isfinite(v):
                raise TrainingError(f"non-finite metric {k}={v} at epoch {epoch} ({stage})")
        rec = {"epoch": epoch, "stage": stage, **metrics}
        self.records.append(rec)
        return rec

    def mark_boundary(self, before: str, after: str) -> None:
        self.boundaries.append({"epoch": len(self.records), "from": before, "to": after})

    def metric(self, name: str, stage: str | None = None) -> list[float]:
        return [r[name] for r in self.records if name in r and (stage is None or r["stage"] == stage)]

    def stages(self) -> list[str]:
        seen = []
        for r in self.records:
            if r["stage"] not in seen:
                seen.append(r["stage"])
        return seen

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        lines = [json.dumps({"type": "meta", **self.meta}, sort_keys=True)]
        lines += [json.dumps({"type": "epoch", **r}, sort_keys=True) for r in self.records]
        lines += [json.dumps({"type": "boundary", **b}, sort_keys=True) for b in self.boundaries]
        lines += [json.dumps({"type": "warning", "message": w}) for w in self.warnings]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TrainHistory":
        h = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "meta":
                h.meta = rec
            elif kind == "epoch":
                h.records.append(rec)
            elif kind == "boundary":
                h.boundaries.append(rec)
            elif kind == "warning":
                h.warnings.append(rec["message"])
        return h

    def max_metric_difference(self, other: "TrainHistory", skip=("seconds",)) -> float:
        """Largest absolute difference over shared numeric metrics; inf if the shapes differ."""
        if len(self.records) != len(other.records):
            return math.inf
        worst = 0.0
        for a, b in zip(self.records, other.records):
            if set(a) != set(b):
                return math.inf
            for k, v in a.items():
                if k in skip or not isinstance(v, (int, float)):
                    continue
                worst = max(worst, abs(v - b[k]))
        return worst


# --------------------------------------------------------------------------
# data


@dataclass
class TensorData:
    """Network-ready tensors for one split. One row per input unit."""

    eyes: torch.Tensor  # (N, C, H, W)
    targets: torch.Tensor  # (N, 2) or (N, 4), degrees
    head: torch.Tensor  # (N, 2)
    strategy: str
    face: torch.Tensor | None = None  # (N, 1, Hf, Wf)
    lda: torch.Tensor | None = None  # (N, k)
    landmarks: torch.Tensor | None = None  # (N, 32) normalised x/y
    subjects: list[str] = field(default_factory=list)
    eye_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.eyes.shape[0]

    def batch(self, idx) -> "TensorData":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        pick = lambda t: None if t is None else t[idx]  # noqa: E731
        return TensorData(
            self.eyes[idx], self.targets[idx], self.head[idx], self.strategy,
            pick(self.face), pick(self.lda), pick(self.landmarks),
        )

    @property
    def eye_hw(self) -> tuple[int, int]:
        return tuple(self.eyes.shape[2:])


def _nchw(arrays) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.stack(arrays).transpose(0, 3, 1, 2)))


def _eye_input(img, use_mhog: bool, hog: HogConfig) -> np.ndarray:
    return assemble_input(img, mhog(img, hog) if use_mhog else None, use_mhog=use_mhog)


def lda_descriptors(sample_set: SampleSet, strategy, hog: HogConfig | None = None):
    """HoG descriptors and matching gaze labels, one row per input unit."""
    strategy = Strategy(strategy)
    desc, gaze = [], []
    for s in sample_set:
        left, right = s.image("left_eye"), s.image("right_eye")
        if strategy is Strategy.SEM:
            desc += [hog_descriptor(left, hog), hog_descriptor(right, hog)]
            gaze += [s.gaze_left, s.gaze_right]
        else:
            desc.append(np.concatenate([hog_descriptor(left, hog), hog_descriptor(right, hog)]))
            gaze.append(np.mean([s.gaze_left, s.gaze_right], axis=0))
    return np.asarray(desc), np.asarray(gaze, dtype=np.float64)


def fit_lda_for(sample_set: SampleSet, strategy, hog: HogConfig | None = None) -> LdaTransform:
    desc, gaze = lda_descriptors(sample_set, strategy, hog)
    return fit_lda(desc, gaze)


def prepare(
    sample_set: SampleSet,
    strategy,
    use_mhog: bool = False,
    lda: LdaTransform | None = None,
    with_face: bool = True,
    with_landmarks: bool = False,
    hog: HogConfig | None = None,
) -> TensorData:
    """Convert samples to tensors. SEM yields one row per eye (left first)."""
    strategy = Strategy(strategy)
    hog = hog or HogConfig()
    if len(sample_set) == 0:
        raise ValueError("cannot prepare an empty sample set")
    if with_landmarks and strategy is not Strategy.SEM:
        raise ValueError("landmark targets are per eye and need the SEM strategy")
    eyes, targets, heads, faces, lms, subjects, names = [], [], [], [], [], [], []
    for s in sample_set:
        left = _eye_input(s.image("left_eye"), use_mhog, hog)
        right = _eye_input(s.image("right_eye"), use_mhog, hog)
        face = None
        if with_face:
            if s.face is None:
                raise ValueError(f"sample of subject {s.subject_id!r} has no face image")
            face = assemble_input(s.image("face"), use_mhog=False)
        units = ("left", "right") if strategy is Strategy.SEM else ("both",)
        for e in units:
            eye = e if e != "both" else "left"
            eyes.append(merge_eyes(left, right, strategy, eye=eye))
            targets.append(targets_for(s, strategy, eye=eye))
            heads.append(s.head)
            subjects.append(s.subject_id)
            names.append(e)
            if with_face:
                faces.append(face)
            if with_landmarks:
                if not s.eye_landmarks or eye not in s.eye_landmarks:
                    raise ValueError(f"sample of subject {s.subject_id!r} is missing {eye} eye landmarks")
                h, w = s.image(f"{eye}_eye").shape[:2]
                pts = np.asarray(s.eye_landmarks[eye], dtype=np.float64)
                lms.append((pts / [w, h]).ravel())
    lda_t = None
    if lda is not None:
        desc, _ = lda_descriptors(sample_set, strategy, hog)
        lda_t = torch.from_numpy(lda.transform(desc).astype(np.float32))
    return TensorData(
        eyes=_nchw(eyes).float(),
        targets=torch.tensor(np.asarray(targets), dtype=torch.float32),
        head=torch.tensor(np.asarray(heads), dtype=torch.float32),
        strategy=strategy.value,
        face=_nchw(faces).float() if with_face else None,
        lda=lda_t,
        landmarks=torch.tensor(np.asarray(lms), dtype=torch.float32) if with_landmarks else None,
        subjects=subjects,
        eye_names=names,
    )


# --------------------------------------------------------------------------
# zones


@dataclass(frozen=True)
class ZoneGrid:
    """Rows split pitch (top row = highest pitch), columns split yaw (left = most negative).

    Ids run 1..rows*cols row-major from the top-left cell.
    """

    yaw: tuple[float, float] = (-60.0, 60.0)
    pitch: tuple[float, float] = (-30.0, 30.0)
    rows: int = 3
    cols: int = 3

    def __post_init__(self):
        if not (self.yaw[0] < self.yaw[1] and self.pitch[0] < self.pitch[1]):
            raise ValueError("zone grid ranges must be increasing")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("zone grid needs at least one row and column")

    @property
    def k(self) -> int:
        return self.rows * self.cols

    def assign(self, gaze) -> tuple[np.ndarray, int]:
        """Zone ids for (n, 2) gaze angles and the number that fell outside the grid.

        Outside points take the nearest zone, which for an axis-aligned grid
        is the zone of the clipped point.
        """
        g = np.asarray(gaze, dtype=np.float64).reshape(-1, 2)
        yaw, pitch = g[:, 0], g[:, 1]
        outside = (yaw < self.yaw[0]) | (yaw > self.yaw[1]) | (pitch < self.pitch[0]) | (pitch > self.pitch[1])
        fy = (np.clip(yaw, *self.yaw) - self.yaw[0]) / (self.yaw[1] - self.yaw[0])
        fp = (self.pitch[1] - np.clip(pitch, *self.pitch)) / (self.pitch[1] - self.pitch[0])
        col = np.minimum((fy * self.cols).astype(np.int64), self.cols - 1)
        row = np.minimum((fp * self.rows).astype(np.int64), self.rows - 1)
        return row * self.cols + col + 1, int(outside.sum())


def unit_gaze(targets: torch.Tensor | np.ndarray) -> np.ndarray:
    """One (yaw, pitch) per unit; dual-eye targets are averaged over the eyes."""
    t = np.asarray(targets, dtype=np.float64)
    return t if t.shape[1] == 2 else 0.5 * (t[:, :2] + t[:, 2:])


# --------------------------------------------------------------------------
# models


@dataclass
class ModelSpec:
    """Everything needed to rebuild a network from a checkpoint sidecar."""

    kind: str  # "hgd" | "nohp"
    eye_hw: tuple[int, int]
    eye_channels: int
    depth: int
    width: int
    face_hw: tuple[int, int] | None = None
    use_face: bool = True
    lda_dim: int = 0
    n_out: int = 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eye_hw"] = list(self.eye_hw)
        d["face_hw"] = None if self.face_hw is None else list(self.face_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["eye_hw"] = tuple(d["eye_hw"])
        if d.get("face_hw") is not None:
            d["face_hw"] = tuple(d["face_hw"])
        return cls(**d)


def spec_for(cfg: TrainConfig, data: TensorData, regime: str = "implicit") -> ModelSpec:
    if regime == "nohp":
        return ModelSpec("nohp", data.eye_hw, data.eyes.shape[1], cfg.depth, cfg.width, use_face=False)
    if cfg.use_face and data.face is None:
        raise ValueError("use_face is set but the data carries no face tensors")
    n_out = N_ZONES if regime == "classifier" else Strategy(cfg.strategy).n_targets
    return ModelSpec(
        "hgd",
        data.eye_hw,
        data.eyes.shape[1],
        cfg.depth,
        cfg.width,
        face_hw=tuple(data.face.shape[2:]) if cfg.use_face else None,
        use_face=cfg.use_face,
        lda_dim=0 if data.lda is None else data.lda.shape[1],
        n_out=n_out,
    )


def build_model(spec: ModelSpec, seed: int = 0):
    torch.manual_seed(seed)
    eye_bb = BackboneConfig(spec.depth, spec.eye_channels, spec.eye_hw, spec.width)
    if spec.kind == "nohp":
        return NoHPStack(LandmarkDetector(eye_bb), AuxModule(), AuxModule(), FinalGazeModel())
    face = None
    if spec.use_face:
        face = FaceModel(BackboneConfig(spec.depth, 1, spec.face_hw, spec.width))
    gaze = GazeModel(eye_bb, n_out=spec.n_out, use_head=spec.use_face, lda_dim=spec.lda_dim)
    return HGD(face, gaze)


# --------------------------------------------------------------------------
# loops


def _check_finite(batch_index: int, **parts) -> None:
    if not all(torch.isfinite(v).all() for v in parts.values()):
        values = ", ".join(f"{k}={v.item():.6g}" for k, v in parts.items())
        raise TrainingError(f"non-finite loss at batch {batch_index}: {values}")


def loss_components(model: HGD, batch: TensorData, cfg: TrainConfig) -> dict[str, torch.Tensor]:
    """Gaze loss, head loss and their weighted total for one batch."""
    gaze_pred, head_pred = model(batch.face, batch.eyes, batch.lda)
    gaze = wing_loss(gaze_pred, batch.targets, cfg.wing_w, cfg.wing_eps)
    out = {"gaze": gaze, "pred": gaze_pred}
    if head_pred is not None and cfg.head_task:
        head = wing_loss(head_pred, batch.head, cfg.wing_w, cfg.wing_eps)
        out["head"] = head
        out["total"] = gaze + cfg.beta * head
    else:
        out["total"] = gaze
    return out


def _angle_metrics(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    p, t = pred.reshape(-1, 2), target.reshape(-1, 2)
    return aem(p, t), float(np.mean(vem(p, t)))


@torch.no_grad()
def predict(model, data: TensorData, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Eval-mode outputs in input order. Keys: ``gaze`` plus ``head`` or ``landmarks`` where applicable."""
    was_training = model.training
    model.eval()
    out: dict[str, list] = {}
    try:
        for start in range(0, len(data), batch_size):
            b = data.batch(np.arange(start, min(start + batch_size, len(data))))
            if isinstance(model, NoHPStack):
                coords, feat = model.detector(b.eyes)
                out.setdefault("landmarks", []).append(coords.numpy())
                out.setdefault("aux_gaze", []).append(model.gaze_module(feat)[0].numpy())
                out.setdefault("gaze", []).append(model(b.eyes).numpy())
            else:
                g, h = model(b.face, b.eyes, b.lda)
                out.setdefault("gaze", []).append(g.numpy())
                if h is not None:
                    out.setdefault("head", []).append(h.numpy())
    finally:
        model.train(was_training)
    return {k: np.concatenate(v).astype(np.float64) for k, v in out.items()}


def _val_metrics(model, val: TensorData | None, classify: bool = False, grid: ZoneGrid | None = None) -> dict:
    if val is None:
        return {}
    p = predict(model, val)
    if classify:
        labels, _ = grid.assign(unit_gaze(val.targets))
        return {"val_accuracy": float(np.mean(p["gaze"].argmax(1) + 1 == labels))}
    a, v = _angle_metrics(p["gaze"], val.targets.numpy())
    out = {"val_aem": a, "val_vem": v}
    if "head" in p:
        out["val_head_aem"] = aem(p["head"], val.head.numpy())
    return out


def _run_stage(
    stage: str,
    history: TrainHistory,
    params,
    n: int,
    cfg: TrainConfig,
    step,
    train_mode,
    val_fn,
    plateau_key: str | None = None,
    seed_offset: int = 0,
    restore_best: torch.nn.Module | None = None,
) -> bool:
    """Generic epoch loop. ``step(idx)`` returns (loss tensor, metrics dict).

    With ``plateau_key`` the loop stops once that metric has not improved
    by ``cfg.min_delta`` for ``cfg.patience`` epochs, and ``restore_best``
    (if given) is reset to its state at the lowest value seen. Returns True
    if a plateau stop triggered.
    """
    params = [p for p in params if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    best, wait = math.inf, 0
    lowest, best_state = math.inf, None
    stopped = False
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        train_mode()
        sums: dict[str, float] = {}
        weight = 0
        for bi, idx in enumerate(batch_indices(n, cfg.batch_size, cfg.seed + seed_offset, epoch)):
            loss, metrics = step(idx, bi)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in metrics.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            weight += len(idx)
        rec = {k: v / weight for k, v in sums.items()}
        rec.update(val_fn())
        rec["lr"] = lr
        rec["stage_epoch"] = epoch
        rec["seconds"] = time.perf_counter() - t0
        rec = history.add_epoch(stage, **rec)
        if plateau_key is not None:
            value = rec[plateau_key]
            if restore_best is not None and value < lowest:
                lowest = value
                best_state = {k: v.detach().clone() for k, v in restore_best.state_dict().items()}
                history.meta[f"{stage}_best_epoch"] = rec["epoch"]
            if value < best - cfg.min_delta:
                best, wait = value, 0
            else:
                wait += 1
                if wait >= cfg.patience:
                    stopped = True
                    break
    if best_state is not None:
        restore_best.load_state_dict(best_state)
    return stopped


def _meta(regime: str, cfg: TrainConfig, spec: ModelSpec | None = None) -> dict:
    meta = {"regime": regime, "config": cfg.to_dict()}
    if spec is not None:
        meta["model"] = spec.to_dict()
    return meta


def train_implicit(model: HGD, train: TensorData, cfg: TrainConfig, val: TensorData | None = None):
    """Joint face/gaze training on ``gaze + beta * head`` with one optimizer.

    With ``cfg.head_task`` off (or no face branch) only the gaze loss drives
    the update.
    """
    history = TrainHistory(meta=_meta("implicit", cfg))

    def step(idx, bi):
        parts = loss_components(model, train.batch(idx), cfg)
        _check_finite(bi, **{k: v for k, v in parts.items() if k != "pred"})
        a, v = _angle_metrics(parts["pred"].detach().numpy(), train.targets[idx].numpy())
        m = {"train_gaze_loss": parts["gaze"].item(), "train_total_loss": parts["total"].item(),
             "train_aem": a, "train_vem": v}
        if "head" in parts:
            m["train_head_loss"] = parts["head"].item()
        return parts["total"], m

    _run_stage("implicit", history, model.parameters(), len(train), cfg, step, model.train,
               lambda: _val_metrics(model, val))
    return model, history


def train_explicit(model: HGD, train: TensorData, cfg: TrainConfig, val: TensorData | None = None):
    """Stage 1 fits the face model on head pose until a plateau and keeps its
    best-validation weights; stage 2 freezes it and trains the gaze branch on
    its features."""
    if model.face is None:
        raise ValueError("explicit training needs a face model")
    history = TrainHistory(meta=_meta("explicit", cfg))
    face = model.face
    head_data = val if val is not None else train

    def step1(idx, bi):
        b = train.batch(idx)
        _, head = face(b.face)
        loss = wing_loss(head, b.head, cfg.wing_w, cfg.wing_eps)
        _check_finite(bi, head=loss)
        return loss, {"train_head_loss": loss.item(), "train_head_aem": aem(head.detach().numpy(), b.head.numpy())}

    def head_val():
        face.eval()
        with torch.no_grad():
            preds = np.concatenate([
                face(head_data.face[i : i + 256])[1].numpy() for i in range(0, len(head_data), 256)
            ])
        return {"val_head_aem": aem(preds, head_data.head.numpy())}

    converged = _run_stage("explicit-face", history, face.parameters(), len(train), cfg, step1, face.train,
                           head_val, plateau_key="val_head_aem", restore_best=face)
    if not converged:
        history.warnings.append(f"face model did not plateau within {cfg.epochs} epochs; continuing")
    history.mark_boundary("explicit-face", "explicit-gaze")

    for p in face.parameters():
        p.requires_grad_(False)

    def gaze_train_mode():
        model.gaze.train()
        face.eval()

    def step2(idx, bi):
        b = train.batch(idx)
        with torch.no_grad():
            feat, _ = face(b.face)
        pred = model.gaze(b.eyes, feat, b.lda)
        loss = wing_loss(pred, b.targets, cfg.wing_w, cfg.wing_eps)
        _check_finite(bi, gaze=loss)
        a, v = _angle_metrics(pred.detach().numpy(), b.targets.numpy())
        return loss, {"train_gaze_loss": loss.item(), "train_aem": a, "train_vem": v}

    _run_stage("explicit-gaze", history, model.gaze.parameters(), len(train), cfg, step2, gaze_train_mode,
               lambda: _val_metrics(model, val), seed_offset=1)
    return model, history


def _pixel_scale(data: TensorData) -> torch.Tensor:
    h, w = data.eye_hw
    return torch.tensor([w, h] * (data.landmarks.shape[1] // 2), dtype=torch.float32)


def landmark_error_px(pred: np.ndarray, target: np.ndarray, hw: tuple[int, int]) -> float:
    """Mean Euclidean landmark error in pixels for normalised (n, 32) coordinates."""
    h, w = hw
    d = (np.asarray(pred).reshape(-1, 2) - np.asarray(target).reshape(-1, 2)) * [w, h]
    return float(np.mean(np.hypot(d[:, 0], d[:, 1])))


def train_nohp(
    stack: NoHPStack,
    synth: TensorData,
    target: TensorData,
    cfg: TrainConfig,
    synth_val: TensorData | None = None,
    target_val: TensorData | None = None,
    stage_epochs: tuple[int, int, int] | None = None,
):
    """Three stages: landmark detector, then gaze/head modules on its frozen
    feature, then the final model on the 600-d concatenation."""
    if synth.landmarks is None:
        raise ValueError("synthetic data carries no landmark labels")
    if Strategy(synth.strategy) is not Strategy.SEM or Strategy(target.strategy) is not Strategy.SEM:
        raise ValueError("the landmark pipeline works on single eyes (SEM)")
    history = TrainHistory(meta=_meta("nohp", cfg))
    ea, eb, ec = stage_epochs or (cfg.epochs,) * 3
    scale = _pixel_scale(synth)
    det = stack.detector

    def step_a(idx, bi):
        b = synth.batch(idx)
        coords, _ = det(b.eyes)
        loss = wing_loss(coords * scale, b.landmarks * scale, cfg.wing_w, cfg.wing_eps)
        _check_finite(bi, landmarks=loss)
        err = landmark_error_px(coords.detach().numpy(), b.landmarks.numpy(), synth.eye_hw)
        return loss, {"train_landmark_loss": loss.item(), "train_landmark_px": err}

    def val_a():
        if synth_val is None:
            return {}
        p = predict(stack, synth_val)["landmarks"]
        return {"val_landmark_px": landmark_error_px(p, synth_val.landmarks.numpy(), synth_val.eye_hw)}

    _run_stage("nohp-landmarks", history, det.parameters(), len(synth), _with_epochs(cfg, ea), step_a,
               det.train, val_a)
    history.mark_boundary("nohp-landmarks", "nohp-modules")

    freeze(det)
    modules = [stack.gaze_module, stack.head_module]

    def mode_b():
        det.eval()
        for m in modules:
            m.train()

    def step_b(idx, bi):
        b = synth.batch(idx)
        with torch.no_grad():
            _, feat = det(b.eyes)
        g, _ = stack.gaze_module(feat)
        h, _ = stack.head_module(feat)
        lg = wing_loss(g, b.targets, cfg.wing_w, cfg.wing_eps)
        lh = wing_loss(h, b.head, cfg.wing_w, cfg.wing_eps)
        _check_finite(bi, gaze=lg, head=lh)
        a, _ = _angle_metrics(g.detach().numpy(), b.targets.numpy())
        return lg + lh, {"train_gaze_loss": lg.item(), "train_head_loss": lh.item(), "train_aem": a}

    def val_b():
        if synth_val is None:
            return {}
        p = predict(stack, synth_val)["aux_gaze"]
        return {"val_aem": aem(p, synth_val.targets.numpy())}

    params_b = [p for m in modules for p in m.parameters()]
    _run_stage("nohp-modules", history, params_b, len(synth), _with_epochs(cfg, eb), step_b, mode_b, val_b,
               seed_offset=1)
    history.mark_boundary("nohp-modules", "nohp-final")

    for m in modules:
        freeze(m)

    def mode_c():
        stack.eval()
        stack.final.train()

    def step_c(idx, bi):
        b = target.batch(idx)
        with torch.no_grad():
            concat = stack.features(b.eyes)
        pred = stack.final(concat)
        loss = wing_loss(pred, b.targets, cfg.wing_w, cfg.wing_eps)
        _check_finite(bi, gaze=loss)
        a, _ = _angle_metrics(pred.detach().numpy(), b.targets.numpy())
        return loss, {"train_gaze_loss": loss.item(), "train_aem": a}

    def val_c():
        if target_val is None:
            return {}
        return {"val_aem": aem(predict(stack, target_val)["gaze"], target_val.targets.numpy())}

    _run_stage("nohp-final", history, stack.final.parameters(), len(target), _with_epochs(cfg, ec), step_c,
               mode_c, val_c, seed_offset=2)
    return stack, history


def _with_epochs(cfg: TrainConfig, epochs: int) -> TrainConfig:
    return TrainConfig.from_dict({**cfg.to_dict(), "epochs": epochs})


def freeze(module: torch.nn.Module) -> None:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


def train_classifier(
    model: HGD,
    train: TensorData,
    cfg: TrainConfig,
    val: TensorData | None = None,
    grid: ZoneGrid | None = None,
):
    """Cross-entropy on zone ids; the face branch is trained jointly with the
    weighted head loss as in the implicit regime."""
    grid = grid or ZoneGrid()
    if model.gaze.n_out != grid.k:
        raise ValueError(f"classifier has {model.gaze.n_out} logits but the grid has {grid.k} zones")
    labels, outside = grid.assign(unit_gaze(train.targets))
    y = torch.from_numpy(labels - 1)
    history = TrainHistory(meta={**_meta("classifier", cfg), "grid": asdict(grid), "outside_grid": outside})
    if outside:
        history.warnings.append(f"{outside} training labels outside the zone grid were assigned to the nearest zone")

    def step(idx, bi):
        b = train.batch(idx)
        logits, head = model(b.face, b.eyes, b.lda)
        ce = F.cross_entropy(logits, y[idx])
        total = ce
        m = {"train_ce": ce.item()}
        if head is not None and cfg.head_task:
            lh = wing_loss(head, b.head, cfg.wing_w, cfg.wing_eps)
            total = ce + cfg.beta * lh
            m["train_head_loss"] = lh.item()
        _check_finite(bi, ce=ce, total=total)
        m["train_accuracy"] = float((logits.argmax(1) == y[idx]).float().mean())
        return total, m

    _run_stage("classifier", history, model.parameters(), len(train), cfg, step, model.train,
               lambda: _val_metrics(model, val, classify=True, grid=grid))
    return model, history
