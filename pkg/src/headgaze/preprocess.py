"""Region cropping, multilevel HoG channels and the LDA projection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.ndimage import map_coordinates, zoom

LDA_FORMAT = "headgaze-lda"
LDA_VERSION = 1


# --------------------------------------------------------------------------
# cropping


def _sample_window(image: np.ndarray, center, width: float, height: float, out_hw) -> np.ndarray:
    """Bilinear resample of an axis-aligned window; out-of-image pixels replicate the edge."""
    oh, ow = out_hw
    cx, cy = center
    # pixel centres of the output grid mapped into source coordinates
    xs = cx + (np.arange(ow) - (ow - 1) / 2.0) * (width / ow)
    ys = cy + (np.arange(oh) - (oh - 1) / 2.0) * (height / oh)
    # snap to a dyadic grid so integer shifts of (image, centre) give identical weights
    xs = np.round(xs * 2.0**20) / 2.0**20
    ys = np.round(ys * 2.0**20) / 2.0**20
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = map_coordinates(image.astype(np.float64), [yy, xx], order=1, mode="nearest")
    if np.issubdtype(image.dtype, np.integer):
        out = np.clip(np.rint(out), 0, 255).astype(image.dtype)
    return out


def crop_regions(
    image: np.ndarray,
    landmarks: dict,
    face_size: tuple[int, int] = (224, 224),
    eye_size: tuple[int, int] = (64, 96),
    eye_width_factor: float = 0.35,
):
    """Cut face and eye crops from a grayscale frame using precomputed landmarks.

    ``landmarks`` must hold ``left_eye`` and ``right_eye`` centres as (x, y)
    pixels, and optionally ``face_box`` as (x0, y0, x1, y1). Without a box the
    face region is a square 3.2 interocular distances wide, centred 0.35
    interocular distances below the eye midpoint. Eye crops are
    ``2 * eye_width_factor`` interocular distances wide with the aspect
    ratio of ``eye_size``. Returns ``(face, left_eye, right_eye)``.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a grayscale image, got shape {image.shape}")
    h, w = image.shape
    left = np.asarray(landmarks["left_eye"], dtype=np.float64)
    right = np.asarray(landmarks["right_eye"], dtype=np.float64)
    for name, p in (("left_eye", left), ("right_eye", right)):
        if not (0 <= p[0] <= w - 1 and 0 <= p[1] <= h - 1):
            raise ValueError(f"landmark {name} at {p.tolist()} lies outside the {w}x{h} image")
    iod = float(np.linalg.norm(left - right))
    if iod < 4.0:
        raise ValueError(f"interocular distance {iod:.2f}px is degenerate (< 4px)")

    box = landmarks.get("face_box")
    if box is not None:
        x0, y0, x1, y1 = map(float, box)
        fc, fw, fh = ((x0 + x1) / 2, (y0 + y1) / 2), x1 - x0, y1 - y0
    else:
        mid = (left + right) / 2
        fc, fw = (mid[0], mid[1] + 0.35 * iod), 3.2 * iod
        fh = fw * face_size[0] / face_size[1]
    face = _sample_window(image, fc, fw, fh, face_size)

    ew = 2 * eye_width_factor * iod
    eh = ew * eye_size[0] / eye_size[1]
    left_crop = _sample_window(image, left, ew, eh, eye_size)
    right_crop = _sample_window(image, right, ew, eh, eye_size)
    return face, left_crop, right_crop


# --------------------------------------------------------------------------
# multilevel HoG


@dataclass(frozen=True)
class HogConfig:
    cell_sizes: tuple[int, ...] = (8, 16, 32)
    bins: int = 9
    eps: float = 1e-6

    def __post_init__(self):
        if len(self.cell_sizes) < 1:
            raise ValueError("HogConfig needs at least one level")
        if self.bins < 2:
            raise ValueError("HogConfig needs at least two orientation bins")


def _gradients(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(image, dtype=np.float64)
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = img[:, 2:] - img[:, :-2]
    gy[1:-1, :] = img[2:, :] - img[:-2, :]
    mag = np.hypot(gx, gy)
    # unsigned orientation in [0, 180); bin 0 is the horizontal-gradient bin
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    return mag, ang


def hog_cells(image: np.ndarray, cell: int, bins: int = 9, eps: float = 1e-6) -> np.ndarray:
    """Per-cell orientation histograms, L2-normalised; shape (rows, cols, bins).

    Bins are centred on ``k * 180 / bins`` degrees.
    """
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[..., 0]
    h, w = image.shape
    if h < cell or w < cell:
        raise ValueError(f"image {h}x{w} is smaller than the {cell}px cell")
    mag, ang = _gradients(image)
    width = 180.0 / bins
    idx = np.rint(ang / width).astype(int) % bins
    rows, cols = h // cell, w // cell
    mag = mag[: rows * cell, : cols * cell]
    idx = idx[: rows * cell, : cols * cell]
    cell_id = (np.arange(rows * cell)[:, None] // cell) * cols + (np.arange(cols * cell)[None, :] // cell)
    hist = np.zeros((rows * cols, bins))
    np.add.at(hist, (cell_id.ravel(), idx.ravel()), mag.ravel())
    hist = hist.reshape(rows, cols, bins)
    norm = np.sqrt(np.sum(hist**2, axis=-1, keepdims=True) + eps**2)
    return hist / norm


def _upsample(grid: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grid.shape == shape:
        return grid.copy()
    factors = (shape[0] / grid.shape[0], shape[1] / grid.shape[1])
    out = zoom(grid, factors, order=1, mode="nearest", grid_mode=True)
    return np.clip(out[: shape[0], : shape[1]], 0.0, 1.0)


def mhog(image: np.ndarray, cfg: HogConfig | None = None) -> np.ndarray:
    """One spatial channel per HoG level; shape (H, W, levels), values in [0, 1].

    Each cell contributes the energy of its dominant orientation bin, which is
    upsampled bilinearly back to the input resolution.
    """
    cfg = cfg or HogConfig()
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[..., 0]
    h, w = image.shape
    if h < max(cfg.cell_sizes) or w < max(cfg.cell_sizes):
        raise ValueError(f"image {h}x{w} is smaller than the largest cell {max(cfg.cell_sizes)}")
    channels = []
    for cell in cfg.cell_sizes:
        hist = hog_cells(image, cell, cfg.bins, cfg.eps)
        channels.append(_upsample(hist.max(axis=-1), (h, w)))
    return np.stack(channels, axis=-1)


def hog_descriptor(image: np.ndarray, cfg: HogConfig | None = None) -> np.ndarray:
    """Flattened per-cell histograms of every level."""
    cfg = cfg or HogConfig()
    return np.concatenate([hog_cells(image, c, cfg.bins, cfg.eps).ravel() for c in cfg.cell_sizes])


# --------------------------------------------------------------------------
# LDA


@dataclass
class LdaTransform:
    mean: np.ndarray  # (d,)
    projection: np.ndarray  # (d, k), orthonormal columns
    centroids: np.ndarray  # (classes, k)
    classes: np.ndarray  # (classes, 2) integer (yaw bin, pitch bin)
    bin_width: float = 10.0
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.projection.shape[1]

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x - self.mean) @ self.projection

    def save(self, path: str | Path) -> Path:
        """Text header line (JSON) followed by little-endian float64/int64 blocks."""
        path = Path(path)
        header = {
            "format": LDA_FORMAT,
            "version": LDA_VERSION,
            "dim": self.dim,
            "k": self.k,
            "classes": int(len(self.classes)),
            "bin_width": float(self.bin_width),
        }
        with open(path, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode("ascii"))
            fh.write(np.ascontiguousarray(self.mean, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.projection, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.centroids, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.classes, dtype="<i8").tobytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "LdaTransform":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("ascii"))
            if header.get("format") != LDA_FORMAT or header.get("version") != LDA_VERSION:
                raise ValueError(f"{path}: not a version {LDA_VERSION} {LDA_FORMAT} file")
            d, k, c = header["dim"], header["k"], header["classes"]

            def read(dtype, count, shape):
                buf = fh.read(8 * count)
                if len(buf) != 8 * count:
                    raise ValueError(f"{path}: truncated payload")
                return np.frombuffer(buf, dtype=dtype).reshape(shape).copy()

            mean = read("<f8", d, (d,))
            proj = read("<f8", d * k, (d, k))
            cent = read("<f8", c * k, (c, k))
            classes = read("<i8", c * 2, (c, 2))
        return cls(mean, proj, cent, classes, header["bin_width"])


def gaze_bins(gaze: np.ndarray, bin_width: float) -> np.ndarray:
    return np.floor(np.asarray(gaze, dtype=np.float64) / bin_width).astype(np.int64)


def fit_lda(
    descriptors: np.ndarray,
    gaze_labels: np.ndarray,
    bin_width: float = 10.0,
    shrinkage: float = 1e-3,
    max_k: int = 32,
) -> LdaTransform:
    """Fisher LDA on pseudo-classes obtained by quantising (yaw, pitch).

    The within-class scatter gets ``shrinkage`` added to its diagonal before
    the generalised eigenproblem is solved; ``k = min(classes - 1, max_k)``.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    labels = gaze_bins(gaze_labels, bin_width)
    if x.ndim != 2 or labels.shape != (len(x), 2):
        raise ValueError("descriptors must be (n, d) and gaze_labels (n, 2)")
    classes, inverse = np.unique(labels, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    if len(classes) < 2:
        raise ValueError("fit_lda needs at least two occupied gaze bins")
    mean = x.mean(axis=0)
    d = x.shape[1]
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    means = np.zeros((len(classes), d))
    for c in range(len(classes)):
        xc = x[inverse == c]
        mc = xc.mean(axis=0)
        means[c] = mc
        dc = xc - mc
        sw += dc.T @ dc
        dm = (mc - mean)[:, None]
        sb += len(xc) * (dm @ dm.T)
    sw[np.diag_indices(d)] += shrinkage
    try:
        evals, evecs = scipy.linalg.eigh(sb, sw)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            f"within-class scatter is singular after shrinkage {shrinkage:g}; try a larger value"
        ) from exc
    k = min(len(classes) - 1, max_k)
    order = np.argsort(evals)[::-1][:k]
    proj, _ = np.linalg.qr(evecs[:, order])
    # QR may flip signs; align each column with its discriminant direction
    signs = np.sign(np.sum(proj * evecs[:, order], axis=0))
    proj = proj * np.where(signs == 0, 1.0, signs)
    centroids = (means - mean) @ proj
    return LdaTransform(mean, proj, centroids, classes, float(bin_width))


def fisher_criterion(values: np.ndarray, labels: np.ndarray) -> float:
    """Two-class Fisher ratio ``(m1 - m2)^2 / (s1^2 + s2^2)`` of 1-D projections."""
    values = np.asarray(values, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    ids = np.unique(labels)
    if len(ids) != 2:
        raise ValueError("fisher_criterion needs exactly two classes")
    a, b = values[labels == ids[0]], values[labels == ids[1]]
    return float((a.mean() - b.mean()) ** 2 / (a.var() + b.var()))


# --------------------------------------------------------------------------
# input assembly


def to_unit_range(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[..., None]
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.float32)


def assemble_input(image: np.ndarray, extra_channels: np.ndarray | None = None, use_mhog: bool = True) -> np.ndarray:
    """Image channels first, then the extra (e.g. mHoG) channels; all in [0, 1]."""
    base = to_unit_range(image)
    if not use_mhog or extra_channels is None:
        return base
    extra = np.asarray(extra_channels, dtype=np.float32)
    if extra.ndim == 2:
        extra = extra[..., None]
    if extra.shape[:2] != base.shape[:2]:
        raise ValueError(f"spatial shapes differ: {base.shape[:2]} vs {extra.shape[:2]}")
    return np.concatenate([base, extra], axis=-1)
