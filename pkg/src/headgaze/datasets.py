"""Sample model, manifest I/O, cross-subject splits, batching and eye merging.

A manifest is a UTF-8 text file with one JSON object per line.  The first
line is a header ``{"format": "headgaze-manifest", "version": 1}``; every
following line is one sample.  Angles are ``[yaw, pitch]`` in degrees and
image fields are paths to 8-bit grayscale PNG files relative to the
manifest's directory.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .geometry import AnglePair

MANIFEST_FORMAT = "headgaze-manifest"
MANIFEST_VERSION = 1
IMAGE_FIELDS = ("face", "left_eye", "right_eye")


class SchemaError(ValueError):
    """A manifest record is malformed."""


class Strategy(str, enum.Enum):
    """How the two eye crops are combined into one network input."""

    SEM = "SEM"  # single eye, one unit per eye
    BEH = "BEH"  # both eyes side by side
    BEV = "BEV"  # both eyes stacked vertically
    BEC = "BEC"  # both eyes stacked on the channel axis

    @property
    def dual(self) -> bool:
        return self is not Strategy.SEM

    @property
    def n_targets(self) -> int:
        return 4 if self.dual else 2


@dataclass(frozen=True)
class Sample:
    subject_id: str
    left_eye: np.ndarray | Path
    right_eye: np.ndarray | Path
    head: AnglePair
    gaze_left: AnglePair
    gaze_right: AnglePair
    face: np.ndarray | Path | None = None
    camera_id: str = "cam0"
    landmarks: tuple[tuple[float, float], ...] | None = None
    # 16 (x, y) points per eye in eye-crop pixels: 8 interior margin then 8 iris
    eye_landmarks: dict[str, np.ndarray] | None = None
    illumination: str | None = None
    split: str | None = None
    gaze_duplicated: bool = False
    extra: dict = field(default_factory=dict)

    def image(self, name: str) -> np.ndarray:
        """Return one of ``face``, ``left_eye``, ``right_eye`` as a uint8 array."""
        ref = getattr(self, name)
        if ref is None:
            raise ValueError(f"sample of subject {self.subject_id!r} has no {name} image")
        if isinstance(ref, np.ndarray):
            return ref
        return load_gray(ref)

    def gaze(self, eye: str) -> AnglePair:
        return self.gaze_left if eye == "left" else self.gaze_right


@dataclass(frozen=True)
class SampleSet:
    samples: tuple[Sample, ...] = ()
    source: Path | None = None
    split: str | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return replace(self, samples=self.samples[i])
        return self.samples[i]

    def subjects(self) -> list[str]:
        return sorted({s.subject_id for s in self.samples})

    def with_split(self, tag: str) -> "SampleSet":
        """Samples whose split tag equals ``tag``."""
        return SampleSet(tuple(s for s in self.samples if s.split == tag), self.source, tag)

    def subset(self, indices: Sequence[int]) -> "SampleSet":
        return replace(self, samples=tuple(self.samples[i] for i in indices))


def load_gray(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def save_gray(path: str | Path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


# --------------------------------------------------------------------------
# manifest


def _pair(value, name: str, lineno: int) -> AnglePair:
    try:
        yaw, pitch = (float(v) for v in value)
    except (TypeError, ValueError):
        raise SchemaError(f"line {lineno}: field {name!r} must be [yaw, pitch]") from None
    if not (np.isfinite(yaw) and np.isfinite(pitch)):
        raise SchemaError(f"line {lineno}: field {name!r} is not finite")
    if abs(yaw) >= 90 or abs(pitch) >= 90:
        raise SchemaError(f"line {lineno}: field {name!r} outside (-90, 90): {value}")
    return AnglePair(yaw, pitch)


def _record_to_sample(rec: dict, root: Path, lineno: int) -> Sample:
    for name in ("subject_id", "left_eye", "right_eye", "head"):
        if name not in rec:
            raise SchemaError(f"line {lineno}: missing field {name!r}")
    images = {}
    for name in IMAGE_FIELDS:
        ref = rec.get(name)
        if ref is None:
            images[name] = None
            continue
        path = root / ref
        if not path.is_file():
            raise FileNotFoundError(f"line {lineno}: image not found: {path}")
        images[name] = path

    duplicated = bool(rec.get("gaze_duplicated", False))
    if "gaze_left" in rec and "gaze_right" in rec:
        gl = _pair(rec["gaze_left"], "gaze_left", lineno)
        gr = _pair(rec["gaze_right"], "gaze_right", lineno)
    elif "gaze" in rec:
        gl = gr = _pair(rec["gaze"], "gaze", lineno)
        duplicated = True
    else:
        raise SchemaError(f"line {lineno}: missing field 'gaze_left'/'gaze_right' (or 'gaze')")

    landmarks = rec.get("landmarks")
    if landmarks is not None:
        landmarks = tuple((float(x), float(y)) for x, y in landmarks)
    eye_lm = rec.get("eye_landmarks")
    if eye_lm is not None:
        eye_lm = {k: np.asarray(v, dtype=np.float64) for k, v in eye_lm.items()}
        for k, v in eye_lm.items():
            if v.shape != (16, 2):
                raise SchemaError(f"line {lineno}: eye_landmarks[{k!r}] must be 16 points")

    return Sample(
        subject_id=str(rec["subject_id"]),
        camera_id=str(rec.get("camera_id", "cam0")),
        face=images["face"],
        left_eye=images["left_eye"],
        right_eye=images["right_eye"],
        head=_pair(rec["head"], "head", lineno),
        gaze_left=gl,
        gaze_right=gr,
        landmarks=landmarks,
        eye_landmarks=eye_lm,
        illumination=rec.get("illumination"),
        split=rec.get("split"),
        gaze_duplicated=duplicated,
        extra=dict(rec.get("extra", {})),
    )


def load_manifest(path: str | Path) -> SampleSet:
    path = Path(path)
    root = path.parent
    samples = []
    with open(path, encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise SchemaError(f"{path}: missing header line")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: line 1: header is not JSON ({exc})") from None
        if header.get("format") != MANIFEST_FORMAT:
            raise SchemaError(f"{path}: line 1: not a {MANIFEST_FORMAT} file")
        if header.get("version") != MANIFEST_VERSION:
            raise SchemaError(f"{path}: unsupported manifest version {header.get('version')!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}: line {lineno}: {exc}") from None
            samples.append(_record_to_sample(rec, root, lineno))
    return SampleSet(tuple(samples), source=path)


def _relref(ref, root: Path, stem: str, name: str) -> str | None:
    if ref is None:
        return None
    if isinstance(ref, np.ndarray):
        rel = Path("images") / f"{stem}_{name}.png"
        (root / rel.parent).mkdir(parents=True, exist_ok=True)
        save_gray(root / rel, ref)
        return rel.as_posix()
    return Path(os.path.relpath(Path(ref).resolve(), root.resolve())).as_posix()


def sample_to_record(sample: Sample, root: Path, stem: str) -> dict:
    rec = {
        "subject_id": sample.subject_id,
        "camera_id": sample.camera_id,
        "face": _relref(sample.face, root, stem, "face"),
        "left_eye": _relref(sample.left_eye, root, stem, "left"),
        "right_eye": _relref(sample.right_eye, root, stem, "right"),
        "head": [float(v) for v in sample.head],
        "gaze_left": [float(v) for v in sample.gaze_left],
        "gaze_right": [float(v) for v in sample.gaze_right],
        "landmarks": None if sample.landmarks is None else [list(p) for p in sample.landmarks],
        "eye_landmarks": None
        if sample.eye_landmarks is None
        else {k: np.asarray(v).tolist() for k, v in sample.eye_landmarks.items()},
        "illumination": sample.illumination,
        "split": sample.split,
        "gaze_duplicated": sample.gaze_duplicated,
        "extra": sample.extra,
    }
    return rec


def manifest_header() -> str:
    return json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION})


def dump_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)


def save_manifest(sample_set: SampleSet | Sequence[Sample], path: str | Path) -> Path:
    """Write a manifest; in-memory images are stored as PNGs under ``images/``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [manifest_header()]
    for i, s in enumerate(sample_set):
        lines.append(dump_record(sample_to_record(s, path.parent, f"{i:06d}")))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# eye merging


def _as_hwc(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f"eye image must be (H, W) or (H, W, C), got {arr.shape}")
    return arr


def merge_eyes(left, right, strategy: Strategy | str, eye: str = "left") -> np.ndarray:
    """Combine two eye crops into one (H, W, C)-style array.

    SEM returns the crop named by ``eye``. BEC stacks channels left first.
    """
    strategy = Strategy(strategy)
    left, right = _as_hwc(left), _as_hwc(right)
    if left.shape != right.shape:
        raise ValueError(f"eye shapes differ: {left.shape} vs {right.shape}")
    if strategy is Strategy.SEM:
        if eye not in ("left", "right"):
            raise ValueError(f"eye must be 'left' or 'right', got {eye!r}")
        return left if eye == "left" else right
    axis = {Strategy.BEH: 1, Strategy.BEV: 0, Strategy.BEC: 2}[strategy]
    return np.concatenate([left, right], axis=axis)


def merged_shape(eye_shape: tuple[int, int, int], strategy: Strategy | str) -> tuple[int, int, int]:
    h, w, c = eye_shape
    return {
        Strategy.SEM: (h, w, c),
        Strategy.BEH: (h, 2 * w, c),
        Strategy.BEV: (2 * h, w, c),
        Strategy.BEC: (h, w, 2 * c),
    }[Strategy(strategy)]


def split_channels(tensor: np.ndarray, n_first: int) -> tuple[np.ndarray, np.ndarray]:
    return tensor[..., :n_first], tensor[..., n_first:]


@dataclass(frozen=True)
class InputUnit:
    eye_tensor: np.ndarray
    targets: np.ndarray
    head_target: AnglePair
    face_tensor: np.ndarray | None = None
    subject_id: str = ""
    eye: str = "both"


def targets_for(sample: Sample, strategy: Strategy | str, eye: str = "left") -> np.ndarray:
    """Gaze targets: (yaw, pitch) for SEM, (l_yaw, l_pitch, r_yaw, r_pitch) otherwise."""
    if Strategy(strategy).dual:
        return np.array([*sample.gaze_left, *sample.gaze_right], dtype=np.float64)
    return np.array(sample.gaze(eye), dtype=np.float64)


def make_units(sample: Sample, strategy: Strategy | str) -> list[InputUnit]:
    """Input units for one sample; SEM yields one unit per eye."""
    strategy = Strategy(strategy)
    left, right = sample.image("left_eye"), sample.image("right_eye")
    face = None if sample.face is None else _as_hwc(sample.image("face"))
    eyes = ("left", "right") if strategy is Strategy.SEM else ("both",)
    return [
        InputUnit(
            eye_tensor=merge_eyes(left, right, strategy, eye=e if e != "both" else "left"),
            targets=targets_for(sample, strategy, eye=e if e != "both" else "left"),
            head_target=sample.head,
            face_tensor=face,
            subject_id=sample.subject_id,
            eye=e,
        )
        for e in eyes
    ]


# --------------------------------------------------------------------------
# splits and batching


def split_cross_subject(sample_set: SampleSet, held_out) -> tuple[SampleSet, SampleSet]:
    """Partition by subject: samples of ``held_out`` subjects go to the test side."""
    held = {str(s) for s in held_out}
    if not held:
        raise ValueError("held_out must name at least one subject")
    present = set(sample_set.subjects())
    unknown = held - present
    if unknown:
        raise ValueError(f"unknown subject ids: {sorted(unknown)}")
    train = tuple(s for s in sample_set if s.subject_id not in held)
    test = tuple(s for s in sample_set if s.subject_id in held)
    return (
        SampleSet(train, sample_set.source, "train"),
        SampleSet(test, sample_set.source, "test"),
    )


def batch_indices(n: int, batch_size: int, seed: int, epoch: int = 0) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batch_iter(sample_set, batch_size: int, seed: int, epoch: int = 0) -> Iterator[list]:
    """Shuffled batches; the order is a pure function of (seed, epoch)."""
    items = list(sample_set)
    for idx in batch_indices(len(items), batch_size, seed, epoch):
        yield [items[i] for i in idx]
