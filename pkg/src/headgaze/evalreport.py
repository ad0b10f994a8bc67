"""Evaluation metrics, zone confusion matrices and report rendering."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasets import SampleSet
from .geometry import aem, vem
from .training import TensorData, ZoneGrid, predict, prepare, unit_gaze

SUMMARY_FORMAT = "headgaze-summary"
SUMMARY_VERSION = 1

# file names written by render_reports
SUMMARY_FILE = "summary.json"
LOSS_PLOT = "loss_curves.png"
AEM_PLOT = "aem_by_epoch.png"
SCATTER_PLOT = "head_gaze_scatter.png"
CONFUSION_PLOT = "confusion.png"


def config_hash(config: dict | None) -> str:
    if not config:
        return ""
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Confusion:
    matrix: np.ndarray  # (k, k) row-stochastic where supported
    counts: np.ndarray  # (k, k) raw tallies
    empty_rows: list[int]  # 1-based zone ids with no true samples

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0

    @property
    def balanced_accuracy(self) -> float:
        support = self.counts.sum(axis=1)
        rows = support > 0
        return float(np.mean(np.diag(self.counts)[rows] / support[rows]))

    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "counts": self.counts.tolist(),
            "empty_rows": self.empty_rows,
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Confusion":
        return cls(np.asarray(d["matrix"], dtype=np.float64), np.asarray(d["counts"], dtype=np.int64),
                   list(d["empty_rows"]))


def confusion(preds, labels, k: int = 9) -> Confusion:
    """Row i holds the distribution of predicted zones for true zone i (ids 1..k)."""
    preds = np.asarray(preds).ravel()
    labels = np.asarray(labels).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    for name, ids in (("preds", preds), ("labels", labels)):
        if ids.size and (ids.min() < 1 or ids.max() > k or not np.all(ids == np.round(ids))):
            raise ValueError(f"{name} must be integer zone ids in [1, {k}]")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels.astype(np.int64) - 1, preds.astype(np.int64) - 1), 1)
    support = counts.sum(axis=1)
    matrix = np.zeros((k, k))
    rows = support > 0
    matrix[rows] = counts[rows] / support[rows, None]
    return Confusion(matrix, counts, [int(i) + 1 for i in np.nonzero(~rows)[0]])


@dataclass
class MetricsReport:
    split: str
    n_units: int  # evaluated network inputs (one per eye under SEM)
    n_pairs: int  # (yaw, pitch) pairs scored
    aem: float | None  # None for classifier-only reports
    vem: float | None
    per_eye: dict = field(default_factory=dict)
    per_subject: dict = field(default_factory=dict)
    head_aem: float | None = None
    confusion: Confusion | None = None
    outside_grid: int = 0
    config_hash: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = None if self.confusion is None else self.confusion.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        if d.get("confusion") is not None:
            d["confusion"] = Confusion.from_dict(d["confusion"])
        return cls(**d)


def _canonical(pred: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort angle pairs so reductions do not depend on input order."""
    order = np.lexsort((pred[:, 1], pred[:, 0], ref[:, 1], ref[:, 0]))
    return pred[order], ref[order]


def _errors(pred: np.ndarray, ref: np.ndarray) -> dict:
    p, r = _canonical(pred, ref)
    return {"aem": aem(p, r), "vem": float(np.mean(vem(p, r))), "n": int(len(p))}


def report_from_predictions(
    pred,
    targets,
    subjects,
    eye_names,
    split: str = "test",
    head_pred=None,
    head_targets=None,
    config: dict | None = None,
) -> MetricsReport:
    """Aggregate angle errors. Rows with four targets carry (left, right) pairs,
    and both eyes count as separate angle pairs."""
    pred = np.asarray(pred, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(pred) == 0:
        raise ValueError("cannot evaluate an empty set")
    if pred.shape != targets.shape or pred.shape[1] not in (2, 4):
        raise ValueError(f"prediction/target shapes incompatible: {pred.shape} vs {targets.shape}")
    subjects = list(subjects)
    if pred.shape[1] == 4:
        p_pairs = pred.reshape(-1, 2)
        t_pairs = targets.reshape(-1, 2)
        eyes = np.tile(["left", "right"], len(pred))
        subj = np.repeat(subjects, 2)
    else:
        p_pairs, t_pairs = pred, targets
        eyes = np.asarray(eye_names)
        subj = np.asarray(subjects)
    overall = _errors(p_pairs, t_pairs)
    per_eye = {e: _errors(p_pairs[eyes == e], t_pairs[eyes == e]) for e in sorted(set(eyes.tolist()))}
    per_subject = {s: _errors(p_pairs[subj == s], t_pairs[subj == s]) for s in sorted(set(subj.tolist()))}
    head = None
    if head_pred is not None:
        hp, ht = _canonical(np.asarray(head_pred, dtype=np.float64), np.asarray(head_targets, dtype=np.float64))
        head = aem(hp, ht)
    return MetricsReport(
        split=split,
        n_units=len(pred),
        n_pairs=overall["n"],
        aem=overall["aem"],
        vem=overall["vem"],
        per_eye=per_eye,
        per_subject=per_subject,
        head_aem=head,
        config_hash=config_hash(config),
    )


def evaluate(model, data, cfg, lda=None, split: str = "test", classify: bool = False, grid=None) -> MetricsReport:
    """Run ``model`` over ``data`` (a SampleSet or prepared TensorData) and aggregate.

    With ``classify`` a 9-logit model is scored by argmax and a regression
    model by mapping its predicted angles onto the zone grid.
    """
    if isinstance(data, SampleSet):
        if len(data) == 0:
            raise ValueError("cannot evaluate an empty set")
        data = prepare(data, cfg.strategy, use_mhog=cfg.use_mhog, lda=lda,
                       with_face=getattr(model, "face", None) is not None)
    if not isinstance(data, TensorData) or len(data) == 0:
        raise ValueError("cannot evaluate an empty set")
    out = predict(model, data)
    targets = data.targets.numpy().astype(np.float64)
    grid = grid or ZoneGrid()
    logits = out["gaze"].shape[1] == grid.k and targets.shape[1] != grid.k
    if logits:
        # classifier outputs carry no angles, so only the confusion is reported
        labels, outside = grid.assign(unit_gaze(targets))
        conf = confusion(out["gaze"].argmax(1) + 1, labels, grid.k)
        return MetricsReport(split, len(targets), 0, None, None, confusion=conf, outside_grid=outside,
                             config_hash=config_hash(cfg.to_dict()))
    report = report_from_predictions(
        out["gaze"], targets, data.subjects, data.eye_names, split,
        out.get("head"), data.head.numpy() if "head" in out else None, cfg.to_dict(),
    )
    if classify:
        labels, outside = grid.assign(unit_gaze(targets))
        pred_ids, _ = grid.assign(unit_gaze(out["gaze"]))
        report.confusion = confusion(pred_ids, labels, grid.k)
        report.outside_grid = outside
    return report


# --------------------------------------------------------------------------
# rendering


def scatter_limits(values: np.ndarray, pad: float = 2.0) -> list[float]:
    """Axis range covering every value with a small margin."""
    values = np.asarray(values, dtype=np.float64)
    return [float(np.floor(values.min() - pad)), float(np.ceil(values.max() + pad))]


def _history_summary(history) -> dict:
    if history is None or not history.records:
        return {"epochs": 0}
    last = {k: v for k, v in history.records[-1].items() if k != "seconds"}
    return {
        "epochs": len(history.records),
        "stages": history.stages(),
        "boundaries": history.boundaries,
        "warnings": history.warnings,
        "final": last,
    }


def _plot_curves(history, keys, ylabel, path):
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for k in keys:
        xs = [r["epoch"] for r in history.records if k in r]
        ys = [r[k] for r in history.records if k in r]
        ax.plot(xs, ys, label=k)
    for b in history.boundaries:
        ax.axvline(b["epoch"] - 0.5, color="gray", linestyle="--", linewidth=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _plot_scatter(head, gaze, limits, path):
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for i, (ax, name) in enumerate(zip(axes, ("yaw", "pitch"))):
        ax.scatter(head[:, i], gaze[:, i], s=4, alpha=0.5)
        ax.set_xlim(limits[name]["head"])
        ax.set_ylim(limits[name]["gaze"])
        ax.set_xlabel(f"head {name} (deg)")
        ax.set_ylabel(f"gaze {name} (deg)")
        ax.set_title(name)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _plot_confusion(conf: Confusion, path):
    import matplotlib.pyplot as plt

    k = conf.matrix.shape[0]
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(conf.matrix, vmin=0, vmax=1, cmap="Blues")
    ticks = np.arange(k)
    ax.set_xticks(ticks, [str(i + 1) for i in ticks])
    ax.set_yticks(ticks, [str(i + 1) for i in ticks])
    for i in range(k):
        for j in range(k):
            v = conf.matrix[i, j]
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7, color="white" if v > 0.5 else "black")
    ax.set_xlabel("predicted zone")
    ax.set_ylabel("true zone")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def render_reports(report: MetricsReport | None, history, sample_set: SampleSet | None, out_dir) -> list[Path]:
    """Write PNG plots and ``summary.json`` into ``out_dir``; returns the written paths.

    Curves need a non-empty history, the scatter needs samples and the heatmap
    a confusion matrix. Files written by a failing call are removed.
    """
    import matplotlib

    matplotlib.use("Agg")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    summary = {
        "format": SUMMARY_FORMAT,
        "version": SUMMARY_VERSION,
        "report": None if report is None else report.to_dict(),
        "history": _history_summary(history),
    }
    try:
        if history is not None and history.records:
            loss_keys = sorted({k for r in history.records for k in r if k.endswith("_loss") or k == "train_ce"})
            aem_keys = sorted({k for r in history.records for k in r if k.endswith("aem") or k.endswith("_px")
                               or k.endswith("accuracy")})
            for keys, label, name in ((loss_keys, "loss", LOSS_PLOT), (aem_keys, "error / accuracy", AEM_PLOT)):
                if keys:
                    _plot_curves(history, keys, label, out / name)
                    written.append(out / name)
        if sample_set is not None and len(sample_set):
            head = np.array([s.head for s in sample_set for _ in range(2)], dtype=np.float64)
            gaze = np.array([g for s in sample_set for g in (s.gaze_left, s.gaze_right)], dtype=np.float64)
            limits = {
                name: {"head": scatter_limits(head[:, i]), "gaze": scatter_limits(gaze[:, i])}
                for i, name in enumerate(("yaw", "pitch"))
            }
            summary["scatter_limits"] = limits
            _plot_scatter(head, gaze, limits, out / SCATTER_PLOT)
            written.append(out / SCATTER_PLOT)
        if report is not None and report.confusion is not None:
            _plot_confusion(report.confusion, out / CONFUSION_PLOT)
            written.append(out / CONFUSION_PLOT)
        summary["files"] = [p.name for p in written] + [SUMMARY_FILE]
        (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        written.append(out / SUMMARY_FILE)
    except Exception:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    return written
