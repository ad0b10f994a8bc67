"""Procedural face and eye renderer with exact pose, gaze and landmark labels.

Everything lives in a subject-centred frame measured in interocular
distances (IOD): +x toward the subject's left, +y up, +z toward the camera.
Images are orthographic projections along z, with image x growing with
+x, so a subject turning to their left moves the nose toward image right.

Per-eye gaze is the direction from the eyeball centre to a finite target
point, so the two eyes generally disagree (vergence). The eye-in-head
direction is recovered with :func:`decompose_eye`, which makes
``compose_gaze(head, eye_in_head) == gaze`` hold by construction.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from matplotlib.path import Path as MplPath
from scipy.ndimage import gaussian_filter

from .datasets import (
    Sample,
    SampleSet,
    dump_record,
    manifest_header,
    sample_to_record,
    save_gray,
)
from .geometry import (
    AnglePair,
    angles_to_vector,
    decompose_eye,
    head_rotation,
    normalize,
    vector_to_angles,
)

# head-frame geometry, IOD units, origin at the head's rotation centre
EYE_X = 0.5
EYE_DEPTH = 0.75
EYEBALL_R = 0.19
LID_R = 0.21
CORNER_DEG = 50.0
UPPER_LID_DEG = 32.0
LOWER_LID_DEG = 18.0
IRIS_DEG = 30.0
PUPIL_DEG = 12.0

FIDUCIALS = {
    "left_eye": (EYE_X, 0.0, EYE_DEPTH),
    "right_eye": (-EYE_X, 0.0, EYE_DEPTH),
    "nose_tip": (0.0, -0.45, 1.05),
    "mouth_left": (0.32, -0.85, 0.78),
    "mouth_right": (-0.32, -0.85, 0.78),
    "chin": (0.0, -1.3, 0.6),
}

EYE_CROP_IOD = 0.7  # eye crop width, 0.35 IOD either side of the eye centre
FACE_CROP_IOD = 3.2
FACE_CENTER = (0.0, -0.35)


class ConfigurationError(ValueError):
    pass


@dataclass
class SceneRanges:
    head_yaw: tuple[float, float] = (-30.0, 30.0)
    head_pitch: tuple[float, float] = (-20.0, 20.0)
    eye_yaw: tuple[float, float] = (-30.0, 30.0)
    eye_pitch: tuple[float, float] = (-20.0, 20.0)
    target_x: tuple[float, float] = (-25.0, 25.0)
    target_y: tuple[float, float] = (-15.0, 15.0)
    target_z: tuple[float, float] = (6.0, 14.0)
    aperture: tuple[float, float] = (0.6, 1.0)
    brightness: tuple[float, float] = (-20.0, 20.0)
    contrast: tuple[float, float] = (0.8, 1.2)
    noise: tuple[float, float] = (0.0, 4.0)

    def validate(self) -> None:
        for name, (lo, hi) in asdict(self).items():
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ConfigurationError(f"range {name} is invalid: ({lo}, {hi})")
        lo, hi = self.aperture
        if lo < 0.3 or hi > 1.0:
            raise ConfigurationError("aperture must lie within [0.3, 1.0]")
        for name in ("head_yaw", "head_pitch", "eye_yaw", "eye_pitch"):
            lo, hi = getattr(self, name)
            if lo <= -90 or hi >= 90:
                raise ConfigurationError(f"{name} must lie inside (-90, 90)")
        if self.target_z[0] <= EYE_DEPTH + LID_R:
            raise ConfigurationError("target_z must place targets in front of the eyes")


@dataclass
class Appearance:
    skin: float = 150.0
    sclera: float = 215.0
    iris: float = 95.0
    pupil: float = 25.0


@dataclass
class Photometrics:
    brightness: float = 0.0
    contrast: float = 1.0
    noise: float = 0.0


@dataclass
class SceneParams:
    head: AnglePair
    target: np.ndarray
    aperture: float = 1.0
    photometrics: Photometrics = field(default_factory=Photometrics)
    appearance: Appearance = field(default_factory=Appearance)
    seed: int = 0

    @property
    def rotation(self) -> np.ndarray:
        return head_rotation(self.head)

    def eye_center(self, side: str) -> np.ndarray:
        return self.rotation @ np.array(FIDUCIALS[f"{side}_eye"])

    @property
    def eye_centers(self) -> np.ndarray:
        return np.stack([self.eye_center("left"), self.eye_center("right")])

    def gaze(self, side: str) -> AnglePair:
        d = normalize(np.asarray(self.target, dtype=np.float64) - self.eye_center(side))
        return AnglePair(*vector_to_angles(d).tolist())

    def eye_in_head(self, side: str) -> AnglePair:
        return AnglePair(*decompose_eye(self.head, self.gaze(side)).tolist())


def look_at(head, eye_in_head, distance: float = 1e6) -> np.ndarray:
    """Target point seen from the eye midpoint along ``R(head) T(eye_in_head)``."""
    rot = head_rotation(head)
    mid = rot @ np.array([0.0, 0.0, EYE_DEPTH])
    return mid + distance * (rot @ angles_to_vector(eye_in_head))


def _draw(rng: np.random.Generator, bounds: tuple[float, float], k: int) -> np.ndarray:
    lo, hi = bounds
    return np.full(k, float(lo)) if lo == hi else rng.uniform(lo, hi, size=k)


def sample_scene(
    rng: np.random.Generator,
    ranges: SceneRanges | None = None,
    appearance: Appearance | None = None,
    batch: int = 32,
    max_tries: int = 20_000,
) -> SceneParams:
    """Draw a head pose and target; resample until both eyes' eye-in-head
    directions fall within the configured limits.

    Candidates are drawn ``batch`` at a time and the first feasible one is
    kept. Raises ConfigurationError when more than 99% of draws are rejected.
    """
    ranges = ranges or SceneRanges()
    ranges.validate()
    tries = 0
    while tries < max_tries:
        heads = np.stack([_draw(rng, ranges.head_yaw, batch), _draw(rng, ranges.head_pitch, batch)], -1)
        targets = np.stack(
            [_draw(rng, ranges.target_x, batch), _draw(rng, ranges.target_y, batch), _draw(rng, ranges.target_z, batch)],
            -1,
        )
        apertures = _draw(rng, ranges.aperture, batch)
        photo = np.stack(
            [_draw(rng, ranges.brightness, batch), _draw(rng, ranges.contrast, batch), _draw(rng, ranges.noise, batch)],
            -1,
        )
        seeds = rng.integers(2**31 - 1, size=batch)
        rots = head_rotation(heads)
        ok = np.ones(batch, dtype=bool)
        for side in ("left", "right"):
            centers = rots @ np.array(FIDUCIALS[f"{side}_eye"])
            d = normalize(targets - centers)
            ok &= d[:, 2] > 0
            g = vector_to_angles(d)
            ok &= np.all(np.abs(g) < 90, axis=-1)
            e = vector_to_angles(normalize(np.einsum("bji,bj->bi", rots, d)))
            ok &= (e[:, 0] >= ranges.eye_yaw[0] - 1e-9) & (e[:, 0] <= ranges.eye_yaw[1] + 1e-9)
            ok &= (e[:, 1] >= ranges.eye_pitch[0] - 1e-9) & (e[:, 1] <= ranges.eye_pitch[1] + 1e-9)
        hits = np.flatnonzero(ok)
        if hits.size:
            i = int(hits[0])
            return SceneParams(
                head=AnglePair(float(heads[i, 0]), float(heads[i, 1])),
                target=targets[i],
                aperture=float(apertures[i]),
                photometrics=Photometrics(*map(float, photo[i])),
                appearance=appearance or Appearance(),
                seed=int(seeds[i]),
            )
        tries += batch
        if tries >= 20 * batch:
            raise ConfigurationError(f"scene ranges are infeasible: all {tries} draws rejected")
    raise ConfigurationError(f"no feasible scene after {tries} draws")


# --------------------------------------------------------------------------
# eye geometry


@dataclass
class LandmarkSet:
    interior_margin: np.ndarray  # (8, 2) pixels
    iris: np.ndarray  # (8, 2) pixels
    iris_visible: np.ndarray  # (8,) bool

    def as_array(self) -> np.ndarray:
        """(16, 2): margin points then iris points."""
        return np.concatenate([self.interior_margin, self.iris])

    @property
    def occluded(self) -> bool:
        return not bool(self.iris_visible.any())


@dataclass
class EyeGeometry:
    """Projected (x, y) geometry of one eye in the subject frame."""

    center: np.ndarray  # eyeball centre, 3D
    corner_mid: np.ndarray  # (x, y) midpoint of the two corners
    gaze_dir: np.ndarray  # unit 3D
    margin_dense: np.ndarray  # (M, 2) closed lid contour
    margin_points: np.ndarray  # (8, 2)
    iris_points: np.ndarray  # (8, 2)
    iris_center: np.ndarray  # (2,)


def _lid_point(rot: np.ndarray, center: np.ndarray, yaw: float, pitch: float) -> np.ndarray:
    return center + LID_R * (rot @ angles_to_vector((yaw, pitch)))


def eye_geometry(scene: SceneParams, side: str, n_dense: int = 24) -> EyeGeometry:
    rot = scene.rotation
    center = scene.eye_center(side)
    up = UPPER_LID_DEG * scene.aperture
    low = LOWER_LID_DEG * scene.aperture

    def arc(t: np.ndarray, height: float) -> np.ndarray:
        yaws = -CORNER_DEG + 2 * CORNER_DEG * t
        pitches = height * np.sin(np.pi * t)
        return np.array([_lid_point(rot, center, y, p)[:2] for y, p in zip(yaws, pitches)])

    t_dense = np.linspace(0.0, 1.0, n_dense + 1)
    upper_dense = arc(t_dense, up)
    lower_dense = arc(t_dense[::-1], -low)
    margin_dense = np.concatenate([upper_dense, lower_dense[1:-1]])

    q = np.array([0.25, 0.5, 0.75])
    corners = arc(np.array([0.0, 1.0]), 0.0)
    margin_points = np.concatenate([corners[:1], arc(q, up), corners[1:], arc(q[::-1], -low)])

    g = angles_to_vector(scene.gaze(side))
    ref_up = np.array([0.0, 1.0, 0.0])
    b = normalize(ref_up - np.dot(ref_up, g) * g)
    a = np.cross(b, g)
    rho = math.radians(IRIS_DEG)
    phis = 2 * np.pi * np.arange(8) / 8
    ring = np.array(
        [center + EYEBALL_R * (math.cos(rho) * g + math.sin(rho) * (math.cos(p) * a + math.sin(p) * b)) for p in phis]
    )
    return EyeGeometry(
        center=center,
        corner_mid=corners.mean(axis=0),
        gaze_dir=g,
        margin_dense=margin_dense,
        margin_points=margin_points,
        iris_points=ring[:, :2],
        iris_center=(center + EYEBALL_R * math.cos(rho) * g)[:2],
    )


def _shade_eye(xs: np.ndarray, ys: np.ndarray, geom: EyeGeometry, app: Appearance):
    """Intensities and inside-margin mask for plane coordinates (xs, ys)."""
    pts = np.stack([xs.ravel(), ys.ravel()], -1)
    inside = MplPath(geom.margin_dense).contains_points(pts).reshape(xs.shape)
    dx = xs - geom.center[0]
    dy = ys - geom.center[1]
    r2 = dx**2 + dy**2
    on_ball = r2 < EYEBALL_R**2
    dz = np.sqrt(np.clip(EYEBALL_R**2 - r2, 0.0, None))
    cosang = (dx * geom.gaze_dir[0] + dy * geom.gaze_dir[1] + dz * geom.gaze_dir[2]) / EYEBALL_R
    ang = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))

    val = app.sclera - 45.0 * np.clip(r2 / EYEBALL_R**2, 0.0, 1.0)
    iris = on_ball & (ang < IRIS_DEG)
    val = np.where(iris, app.iris + 35.0 * (ang / IRIS_DEG) ** 2, val)
    val = np.where(on_ball & (ang < PUPIL_DEG), app.pupil, val)
    return val, inside


def _photometric(img: np.ndarray, scene: SceneParams, salt: int) -> np.ndarray:
    ph = scene.photometrics
    rng = np.random.default_rng([scene.seed, salt])
    out = ph.contrast * (img - 128.0) + 128.0 + ph.brightness
    if ph.noise > 0:
        out = out + rng.normal(0.0, ph.noise, size=img.shape)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


@dataclass
class EyeRender:
    image: np.ndarray
    landmarks: LandmarkSet
    gaze: AnglePair
    eye_in_head: AnglePair

    @property
    def occluded(self) -> bool:
        return self.landmarks.occluded


def render_eye(scene: SceneParams, side: str, size: tuple[int, int] = (64, 96)) -> EyeRender:
    """Grayscale eye crop centred on the midpoint of the eye corners.

    The crop is ``EYE_CROP_IOD`` wide. Iris landmarks are the projections of
    eight evenly spaced points on the iris boundary circle; an iris point is
    marked invisible when it falls outside the lid margin.
    """
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    h, w = size
    geom = eye_geometry(scene, side)
    scale = w / EYE_CROP_IOD
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    def to_px(p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        return np.stack([cx + scale * (p[:, 0] - geom.corner_mid[0]), cy - scale * (p[:, 1] - geom.corner_mid[1])], -1)

    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    xs = geom.corner_mid[0] + (cols - cx) / scale
    ys = geom.corner_mid[1] - (rows - cy) / scale
    app = scene.appearance
    val, inside = _shade_eye(xs, ys, geom, app)
    # skin with a soft crease above the upper lid
    skin = app.skin + 12.0 * np.tanh((ys - geom.corner_mid[1]) / 0.2)
    img = np.where(inside, val, skin)
    img = gaussian_filter(img, 0.6)

    margin_px = to_px(geom.margin_points)
    iris_px = to_px(geom.iris_points)
    visible = MplPath(geom.margin_dense).contains_points(geom.iris_points)
    landmarks = LandmarkSet(margin_px, iris_px, visible)
    return EyeRender(
        image=_photometric(img, scene, salt=1 if side == "left" else 2),
        landmarks=landmarks,
        gaze=scene.gaze(side),
        eye_in_head=scene.eye_in_head(side),
    )


# --------------------------------------------------------------------------
# face


def face_fiducials(scene: SceneParams, size: tuple[int, int] = (224, 224)) -> dict[str, np.ndarray]:
    """Pixel positions of the projected fiducials.

    ``left_eye``/``right_eye`` are the eye-corner midpoints, i.e. the
    geometric eye centres an eye cropper should use.
    """
    h, w = size
    scale = w / FACE_CROP_IOD
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    rot = scene.rotation
    out = {}
    for name, p in FIDUCIALS.items():
        xy = (rot @ np.array(p))[:2]
        if name.endswith("_eye"):
            xy = eye_geometry(scene, name[: -len("_eye")]).corner_mid
        out[name] = np.array([cx + scale * (xy[0] - FACE_CENTER[0]), cy - scale * (xy[1] - FACE_CENTER[1])])
    return out


def fiducial_model() -> dict[str, np.ndarray]:
    """Head-frame 3D points matching :func:`face_fiducials` (eyes at corner midpoints)."""
    corner_depth = LID_R * math.cos(math.radians(CORNER_DEG))
    pts = {k: np.array(v, dtype=np.float64) for k, v in FIDUCIALS.items()}
    pts["left_eye"] = pts["left_eye"] + [0.0, 0.0, corner_depth]
    pts["right_eye"] = pts["right_eye"] + [0.0, 0.0, corner_depth]
    return pts


def face_pixel_scale(size: tuple[int, int] = (224, 224)) -> float:
    return size[1] / FACE_CROP_IOD


def _blob(xs, ys, c, sx, sy) -> np.ndarray:
    return np.exp(-0.5 * (((xs - c[0]) / sx) ** 2 + ((ys - c[1]) / sy) ** 2))


def render_face(scene: SceneParams, size: tuple[int, int] = (224, 224)) -> np.ndarray:
    h, w = size
    scale = w / FACE_CROP_IOD
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    xs = FACE_CENTER[0] + (cols - cx) / scale
    ys = FACE_CENTER[1] - (rows - cy) / scale
    rot = scene.rotation
    app = scene.appearance

    # head: sphere-like ellipsoid around the rotation centre, lit from the camera
    hc = rot @ np.array([0.0, -0.35, 0.0])
    ax, ay = 1.0, 1.4
    q = ((xs - hc[0]) / ax) ** 2 + ((ys - hc[1]) / ay) ** 2
    head_mask = q < 1.0
    shade = np.sqrt(np.clip(1.0 - q, 0.0, 1.0))
    img = np.where(head_mask, app.skin * (0.55 + 0.45 * shade), 40.0)

    proj = {k: (rot @ np.array(v))[:2] for k, v in FIDUCIALS.items()}
    img = img + 45.0 * _blob(xs, ys, proj["nose_tip"], 0.09, 0.12)
    img = img - 35.0 * _blob(xs, ys, proj["nose_tip"] + [0.0, -0.12], 0.14, 0.04)
    mouth_mid = 0.5 * (proj["mouth_left"] + proj["mouth_right"])
    half = 0.5 * np.linalg.norm(proj["mouth_left"] - proj["mouth_right"]) + 0.05
    img = img - 60.0 * _blob(xs, ys, mouth_mid, half, 0.045)
    for k in ("mouth_left", "mouth_right"):
        img = img - 40.0 * _blob(xs, ys, proj[k], 0.05, 0.05)
    img = img + 25.0 * _blob(xs, ys, proj["chin"], 0.25, 0.12)
    for side in ("left", "right"):
        brow = (rot @ (np.array(FIDUCIALS[f"{side}_eye"]) + [0.0, 0.28, 0.15]))[:2]
        img = img - 50.0 * _blob(xs, ys, brow, 0.2, 0.04)

    for side in ("left", "right"):
        geom = eye_geometry(scene, side)
        val, inside = _shade_eye(xs, ys, geom, app)
        img = np.where(inside & head_mask, val, img)

    img = gaussian_filter(img, 0.7)
    return _photometric(img, scene, salt=3)


# --------------------------------------------------------------------------
# dataset generation


@dataclass
class GeneratorConfig:
    ranges: SceneRanges = field(default_factory=SceneRanges)
    face_size: tuple[int, int] = (224, 224)
    eye_size: tuple[int, int] = (64, 96)
    train_ratio: float = 0.9
    samples_per_subject: int = 50
    seed: int = 0
    render_face: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["face_size"] = list(self.face_size)
        d["eye_size"] = list(self.eye_size)
        d["ranges"] = {k: list(v) for k, v in d["ranges"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        ranges = SceneRanges(**{k: tuple(v) for k, v in d.pop("ranges", {}).items()})
        for k in ("face_size", "eye_size"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(ranges=ranges, **d)


def subject_appearance(seed: int, subject: int) -> Appearance:
    rng = np.random.default_rng([seed, 1_000_003, subject])
    return Appearance(
        skin=float(rng.uniform(120, 185)),
        sclera=float(rng.uniform(200, 230)),
        iris=float(rng.uniform(60, 120)),
        pupil=float(rng.uniform(10, 35)),
    )


def _fiducial_tuple(scene: SceneParams, size) -> tuple[tuple[float, float], ...]:
    fid = face_fiducials(scene, size)
    return tuple((float(fid[k][0]), float(fid[k][1])) for k in FIDUCIALS)


def split_tags(n: int, train_ratio: float) -> list[str]:
    n_train = int(round(train_ratio * n))
    return ["train"] * n_train + ["test"] * (n - n_train)


def generate_sample(index: int, config: GeneratorConfig, max_resample: int = 100):
    """Render one sample. Returns ``(scene, face or None, left EyeRender, right EyeRender)``."""
    subject = index // config.samples_per_subject
    rng = np.random.default_rng([config.seed, index])
    app = subject_appearance(config.seed, subject)
    for _ in range(max_resample):
        scene = sample_scene(rng, config.ranges, appearance=app)
        left = render_eye(scene, "left", config.eye_size)
        right = render_eye(scene, "right", config.eye_size)
        if not (left.occluded or right.occluded):
            break
    else:
        raise ConfigurationError(f"sample {index}: iris occluded in every draw")
    face = render_face(scene, config.face_size) if config.render_face else None
    return scene, face, left, right


def generate_dataset(
    n: int,
    config: GeneratorConfig | None,
    out_dir: str | Path,
    refiner: Callable[[np.ndarray], np.ndarray] | None = None,
    manifest_name: str = "manifest.jsonl",
) -> Path:
    """Render ``n`` samples into ``out_dir`` and write their manifest.

    The first ``round(train_ratio * n)`` samples are tagged ``train`` and the
    rest ``test``. Sample ``i`` draws from its own ``(seed, i)`` random
    stream. ``refiner`` is applied to every image before it is written. If
    anything fails, files written by this call are removed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    config = config or GeneratorConfig()
    config.ranges.validate()
    out_dir = Path(out_dir)
    created_root = not out_dir.exists()
    out_dir.mkdir(parents=True, exist_ok=True)
    img_dir = out_dir / "images"
    created_img = not img_dir.exists()
    written: list[Path] = []
    tags = split_tags(n, config.train_ratio)
    fx = face_pixel_scale(config.face_size)
    try:
        img_dir.mkdir(exist_ok=True)
        lines = [manifest_header()]
        for i in range(n):
            scene, face, left, right = generate_sample(i, config)
            stem = f"{i:06d}"
            paths = {}
            for name, img in (("face", face), ("left", left.image), ("right", right.image)):
                if img is None:
                    continue
                if refiner is not None:
                    img = np.asarray(refiner(img))
                p = img_dir / f"{stem}_{name}.png"
                save_gray(p, img)
                written.append(p)
                paths[name] = p
            sample = Sample(
                subject_id=f"s{i // config.samples_per_subject:04d}",
                camera_id="synth",
                face=paths.get("face"),
                left_eye=paths["left"],
                right_eye=paths["right"],
                head=AnglePair(*map(float, scene.head)),
                gaze_left=left.gaze,
                gaze_right=right.gaze,
                landmarks=None if face is None else _fiducial_tuple(scene, config.face_size),
                eye_landmarks={"left": left.landmarks.as_array(), "right": right.landmarks.as_array()},
                split=tags[i],
                extra={
                    "eye_in_head_left": list(left.eye_in_head),
                    "eye_in_head_right": list(right.eye_in_head),
                    "iris_visible_left": left.landmarks.iris_visible.astype(int).tolist(),
                    "iris_visible_right": right.landmarks.iris_visible.astype(int).tolist(),
                    "target": np.asarray(scene.target).tolist(),
                    "aperture": scene.aperture,
                    "face_px_per_iod": fx,
                },
            )
            lines.append(dump_record(sample_to_record(sample, out_dir, stem)))
        manifest = out_dir / manifest_name
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(manifest)
        cfg_path = out_dir / "generation_config.json"
        cfg_path.write_text(
            json.dumps({"n": n, "config": config.to_dict()}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        written.append(cfg_path)
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        if created_img and img_dir.exists() and not any(img_dir.iterdir()):
            img_dir.rmdir()
        if created_root:
            shutil.rmtree(out_dir, ignore_errors=True)
        raise
    return manifest


def generate_set(n: int, config: GeneratorConfig | None = None) -> SampleSet:
    """In-memory variant of :func:`generate_dataset` (no files)."""
    config = config or GeneratorConfig()
    samples = []
    tags = split_tags(n, config.train_ratio)
    for i in range(n):
        scene, face, left, right = generate_sample(i, config)
        samples.append(
            Sample(
                subject_id=f"s{i // config.samples_per_subject:04d}",
                camera_id="synth",
                face=face,
                left_eye=left.image,
                right_eye=right.image,
                head=AnglePair(*map(float, scene.head)),
                gaze_left=left.gaze,
                gaze_right=right.gaze,
                landmarks=None if face is None else _fiducial_tuple(scene, config.face_size),
                eye_landmarks={"left": left.landmarks.as_array(), "right": right.landmarks.as_array()},
                split=tags[i],
                extra={
                    "eye_in_head_left": list(left.eye_in_head),
                    "eye_in_head_right": list(right.eye_in_head),
                },
            )
        )
    return SampleSet(tuple(samples))


# --------------------------------------------------------------------------
# UnityEyes annotations


def _parse_vec(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.strip("()").split(",")])


def _resample_closed(points: np.ndarray, k: int) -> np.ndarray:
    idx = np.round(np.linspace(0, len(points), k, endpoint=False)).astype(int) % len(points)
    return points[idx]


def load_unityeyes(json_path: str | Path, image_path: str | Path | None = None) -> dict:
    """Read a UnityEyes annotation file into this toolkit's label layout.

    Returns a dict with ``image`` (grayscale array or None), ``landmarks``
    (16 x 2: 8 interior-margin then 8 iris points, top-left pixel origin),
    ``gaze`` and ``head`` as AnglePairs.
    """
    from .datasets import load_gray

    json_path = Path(json_path)
    data = json.loads(json_path.read_text())
    image = None
    if image_path is None:
        guess = json_path.with_suffix(".jpg")
        image_path = guess if guess.exists() else None
    if image_path is not None:
        image = load_gray(image_path)
    height = image.shape[0] if image is not None else None

    def pts(key):
        arr = np.array([_parse_vec(p)[:2] for p in data[key]])
        if height is not None:
            arr[:, 1] = height - arr[:, 1]
        return arr

    margin = _resample_closed(pts("interior_margin_2d"), 8)
    iris = _resample_closed(pts("iris_2d"), 8)
    look = _parse_vec(data["eye_details"]["look_vec"])[:3]
    # UnityEyes looks down -z with y up; mirror into this toolkit's +z-forward frame
    gaze = vector_to_angles(normalize(np.array([-look[0], look[1], -look[2]])))
    pitch, yaw = _parse_vec(data["head_pose"])[:2]
    wrap = lambda a: (a + 180.0) % 360.0 - 180.0  # noqa: E731
    return {
        "image": image,
        "landmarks": np.concatenate([margin, iris]),
        "gaze": AnglePair(*gaze.tolist()),
        "head": AnglePair(float(wrap(yaw)), float(-wrap(pitch))),
    }
