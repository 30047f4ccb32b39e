"""Depth-map quality metrics (NRMSE, Hausdorff, SSIM) and the dataset report."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .io import ManifestRecord, read_depth

# reference SSIM values reported for raw -> domain-adapted inputs
TABLE1_SSIM = {"phantom": (0.52, 0.77), "porcine": (0.33, 0.59)}
# relative SSIM gains as quoted alongside those tables
QUOTED_IMPROVEMENT = {"phantom": 0.48, "porcine": 0.88}

HD_EMBEDDING = "points (row/(H-1), col/(W-1), depth/R) with R the finite range of the truth map (1 if constant)"


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    return pred, truth


def _truth_range(truth: np.ndarray) -> float:
    t = truth[np.isfinite(truth)]
    if t.size == 0:
        raise ValueError("truth has no finite depth")
    return float(t.max() - t.min())


def nrmse(pred, truth) -> float:
    """RMS error over pixels finite in both maps, divided by the truth's range."""
    pred, truth = _pair(pred, truth)
    r = _truth_range(truth)
    if r == 0:
        raise ValueError("nrmse is undefined for a constant truth map")
    ok = np.isfinite(pred) & np.isfinite(truth)
    if not ok.any():
        raise ValueError("no pixel is finite in both maps")
    return float(np.sqrt(np.mean((pred[ok] - truth[ok]) ** 2)) / r)


def _points(depth: np.ndarray, scale: float) -> np.ndarray:
    h, w = depth.shape
    rows, cols = np.nonzero(np.isfinite(depth))
    if rows.size == 0:
        raise ValueError("depth map has no finite pixel")
    return np.stack([rows / max(h - 1, 1), cols / max(w - 1, 1), depth[rows, cols] / scale], axis=1)


def _directed(a: np.ndarray, b: np.ndarray, chunk: int = 512) -> float:
    worst = 0.0
    for s in range(0, len(a), chunk):
        blk = a[s:s + chunk]
        d0 = blk[:, None, 0] - b[None, :, 0]
        d1 = blk[:, None, 1] - b[None, :, 1]
        d2 = blk[:, None, 2] - b[None, :, 2]
        sq = d0 * d0 + d1 * d1 + d2 * d2
        worst = max(worst, float(np.sqrt(sq.min(axis=1).max())))
    return worst


def hausdorff(pred, truth) -> float:
    """Symmetric Hausdorff distance between the finite pixels of two maps.

    Each pixel becomes a 3-D point; see ``HD_EMBEDDING``.
    """
    pred, truth = _pair(pred, truth)
    r = _truth_range(truth)
    scale = r if r > 0 else 1.0
    a, b = _points(pred, scale), _points(truth, scale)
    return max(_directed(a, b), _directed(b, a))


def ssim(pred, truth, window: int = 8) -> float:
    """Mean SSIM over all fully finite ``window`` x ``window`` windows (stride 1).

    Both maps are shifted and scaled by the truth's min and range first, so the
    dynamic range is 1 and ``C1 = 0.01^2``, ``C2 = 0.03^2``.  Window statistics
    use uniform weights and population (co)variances.
    """
    pred, truth = _pair(pred, truth)
    if pred.ndim != 2 or min(pred.shape) < window:
        raise ValueError(f"ssim needs 2-D maps of at least {window}x{window}, got {pred.shape}")
    finite = truth[np.isfinite(truth)]
    if finite.size == 0:
        raise ValueError("truth has no finite depth")
    lo, r = float(finite.min()), float(finite.max() - finite.min())
    scale = r if r > 0 else 1.0
    x = (pred - lo) / scale
    y = (truth - lo) / scale
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    ok = np.isfinite(wx).all(axis=(2, 3)) & np.isfinite(wy).all(axis=(2, 3))
    if not ok.any():
        raise ValueError("no fully finite window")
    wx, wy = wx[ok], wy[ok]
    mx, my = wx.mean(axis=(1, 2)), wy.mean(axis=(1, 2))
    dx, dy = wx - mx[:, None, None], wy - my[:, None, None]
    vx, vy = (dx * dx).mean(axis=(1, 2)), (dy * dy).mean(axis=(1, 2))
    cov = (dx * dy).mean(axis=(1, 2))
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(math.fsum(s) / len(s))


@dataclass
class EvalReport:
    tag: str
    indices: List[int] = field(default_factory=list)
    rows: List[tuple] = field(default_factory=list)  # (nrmse, hd, ssim)

    @property
    def means(self) -> tuple:
        if not self.rows:
            raise ValueError("empty report")
        cols = list(zip(*self.rows))
        return tuple(math.fsum(c) / len(c) for c in cols)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "nrmse", "hd", "ssim"])
            for i, row in zip(self.indices, self.rows):
                w.writerow([i] + [_fmt(v) for v in row])
            w.writerow(["mean"] + [_fmt(v) for v in self.means])


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def score_maps(pred, truth) -> tuple:
    return nrmse(pred, truth), hausdorff(pred, truth), ssim(pred, truth)


def evaluate(pred_records: Sequence[ManifestRecord], truth_records: Sequence[ManifestRecord], tag: str) -> EvalReport:
    """Score every prediction against the truth record with the same index."""
    truth_by_index = {r.index: r for r in truth_records}
    pred_idx = [r.index for r in pred_records]
    if len(set(pred_idx)) != len(pred_idx) or set(pred_idx) != set(truth_by_index):
        raise ValueError("prediction and truth manifests do not cover the same indices")
    report = EvalReport(tag)
    for r in pred_records:
        report.indices.append(r.index)
        report.rows.append(score_maps(read_depth(r.depth_path), read_depth(truth_by_index[r.index].depth_path)))
    return report


def evaluate_arrays(preds, truths, tag: str, indices=None) -> EvalReport:
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions for {len(truths)} truth maps")
    report = EvalReport(tag)
    for k, (p, t) in enumerate(zip(preds, truths)):
        report.indices.append(k if indices is None else int(indices[k]))
        report.rows.append(score_maps(p, t))
    return report


def relative_change(before: float, after: float) -> float:
    """``(after - before) / before``."""
    return (after - before) / before


def improvement_summary(raw: EvalReport, adapted: EvalReport) -> str:
    r_n, r_h, r_s = raw.means
    a_n, a_h, a_s = adapted.means
    lines = [
        f"condition\tnrmse\thd\tssim",
        f"{raw.tag}\t{_fmt(r_n)}\t{_fmt(r_h)}\t{_fmt(r_s)}",
        f"{adapted.tag}\t{_fmt(a_n)}\t{_fmt(a_h)}\t{_fmt(a_s)}",
        f"ssim_improvement\t{relative_change(r_s, a_s):+.4f}",
        f"nrmse_reduction\t{-relative_change(r_n, a_n):+.4f}",
        f"hd_reduction\t{-relative_change(r_h, a_h):+.4f}",
        f"ssim_ratio\t{a_s / r_s:.4f}",
        f"nrmse_ratio\t{a_n / r_n:.4f}",
        f"hd_embedding\t{HD_EMBEDDING}",
    ]
    for name, (before, after) in TABLE1_SSIM.items():
        computed = relative_change(before, after)
        quoted = QUOTED_IMPROVEMENT[name]
        note = "" if abs(computed - quoted) < 0.005 else f" (quoted {quoted:.0%}; does not match)"
        lines.append(f"reference_{name}\tssim {before} -> {after}\timprovement {computed:+.1%}{note}")
    return "\n".join(lines) + "\n"


def write_summary(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")
