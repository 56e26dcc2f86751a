"""EER, minimum DCF, DET and minDCF-vs-prior curves, and report files (CSV summaries, SVG plots).

A trial is accepted when its score is >= the threshold. Thresholds sweep every
distinct score plus +inf, so the first vertex accepts everything and the last
rejects everything.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure
from scipy.special import expit, ndtri

from plda import ScoreSet
from utils import DataError, atomic_write, write_text_atomic

log = logging.getLogger(__name__)

DET_TICKS = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4)
PLOT_CLIP = 1e-4
PRIOR_GRID = expit(np.linspace(-7.0, 0.0, 71))


@dataclass(frozen=True)
class OperatingPoint:
    p_target: float
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.p_target < 1.0:
            raise DataError(f"p_target must lie in (0, 1), got {self.p_target}")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise DataError(f"DCF costs must be positive, got c_miss={self.c_miss} c_fa={self.c_fa}")

    @property
    def label(self) -> str:
        return f"min_dcf@{self.p_target:g}"

    @property
    def normalizer(self) -> float:
        return min(self.c_miss * self.p_target, self.c_fa * (1.0 - self.p_target))


DEFAULT_OPERATING_POINTS = (OperatingPoint(0.001), OperatingPoint(0.01), OperatingPoint(0.005))


@dataclass(frozen=True, eq=False)
class DetCurve:
    thresholds: np.ndarray
    p_fa: np.ndarray
    p_miss: np.ndarray

    def __len__(self) -> int:
        return self.thresholds.size


def _split(scores: np.ndarray, is_target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    if scores.shape != is_target.shape:
        raise DataError(f"{scores.size} scores but {is_target.size} keys")
    targets, nontargets = np.sort(scores[is_target]), np.sort(scores[~is_target])
    if targets.size == 0 or nontargets.size == 0:
        raise DataError(f"need both classes, got {targets.size} target and {nontargets.size} nontarget trials")
    return targets, nontargets


def det_points(scores: np.ndarray, is_target: np.ndarray) -> DetCurve:
    targets, nontargets = _split(scores, is_target)
    thresholds = np.append(np.unique(np.concatenate([targets, nontargets])), np.inf)
    p_miss = np.searchsorted(targets, thresholds, side="left") / targets.size
    p_fa = 1.0 - np.searchsorted(nontargets, thresholds, side="left") / nontargets.size
    return DetCurve(thresholds, p_fa, p_miss)


def _eer_from_curve(curve: DetCurve) -> float:
    d = curve.p_miss - curve.p_fa
    i = int(np.argmax(d >= 0))
    if i == 0:
        return float(curve.p_miss[0])
    d0, d1 = d[i - 1], d[i]
    alpha = -d0 / (d1 - d0)
    return float(curve.p_fa[i - 1] + alpha * (curve.p_fa[i] - curve.p_fa[i - 1]))


def compute_eer(scores: np.ndarray, is_target: np.ndarray) -> float:
    """Equal error rate in percent, linearly interpolated between bracketing vertices."""
    return 100.0 * _eer_from_curve(det_points(scores, is_target))


def _dcf(curve: DetCurve, op: OperatingPoint) -> np.ndarray:
    return (op.c_miss * op.p_target * curve.p_miss + op.c_fa * (1.0 - op.p_target) * curve.p_fa) / op.normalizer


def compute_min_dcf(scores: np.ndarray, is_target: np.ndarray, op: OperatingPoint) -> float:
    """Normalized minimum detection cost over all thresholds."""
    return float(_dcf(det_points(scores, is_target), op).min())


def effective_prior(op: OperatingPoint) -> float:
    """Target prior that gives unit-cost DCF the same decision threshold as ``op``."""
    miss = op.c_miss * op.p_target
    return miss / (miss + op.c_fa * (1.0 - op.p_target))


def _min_dcf_over_priors(curve: DetCurve, priors: np.ndarray) -> np.ndarray:
    p = np.asarray(priors, dtype=np.float64)[:, None]
    cost = p * curve.p_miss[None, :] + (1.0 - p) * curve.p_fa[None, :]
    return cost.min(axis=1) / np.minimum(p, 1.0 - p)[:, 0]


def min_dcf_curve(
    scores: np.ndarray, is_target: np.ndarray, priors: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Unit-cost normalized minimum DCF at each effective prior (default: logit-spaced from 1e-3 to 0.5)."""
    priors = PRIOR_GRID if priors is None else np.asarray(priors, dtype=np.float64)
    if np.any((priors <= 0.0) | (priors >= 1.0)):
        raise DataError("effective priors must lie in (0, 1)")
    return priors, _min_dcf_over_priors(det_points(scores, is_target), priors)


def probit(p: np.ndarray | float) -> np.ndarray | float:
    return ndtri(p)


@dataclass
class ConditionResult:
    name: str
    eer: float
    min_dcf: dict[str, float]
    curve: DetCurve
    num_trials: int = 0
    operating_points: Sequence[OperatingPoint] = field(default=DEFAULT_OPERATING_POINTS, repr=False)


def evaluate_condition(
    name: str, scores: ScoreSet, operating_points: Sequence[OperatingPoint] = DEFAULT_OPERATING_POINTS
) -> ConditionResult:
    values, is_target = scores.keyed()
    curve = det_points(values, is_target)
    min_dcf = {op.label: float(_dcf(curve, op).min()) for op in operating_points}
    eer = 100.0 * _eer_from_curve(curve)
    log.info("%s: EER %.3f%% over %d trials", name, eer, values.size)
    return ConditionResult(name, eer, min_dcf, curve, int(values.size), tuple(operating_points))


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def _csv_text(rows: list[list[str]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def write_curve_csv(curve: DetCurve, path: Path | str) -> Path:
    rows = [["threshold", "p_fa", "p_miss"]]
    for t, pfa, pm in zip(curve.thresholds, curve.p_fa, curve.p_miss):
        rows.append(["inf" if math.isinf(t) else f"{t:.6f}", f"{pfa:.6f}", f"{pm:.6f}"])
    return write_text_atomic(path, _csv_text(rows))


def write_summary_csv(
    results: Sequence[ConditionResult], operating_points: Sequence[OperatingPoint], path: Path | str
) -> Path:
    """One row per condition, plus an ``average`` row when there is more than one."""
    rows = [["condition", "eer", *(op.label for op in operating_points)]]
    for r in results:
        rows.append([r.name, f"{r.eer:.3f}", *(f"{r.min_dcf[op.label]:.4f}" for op in operating_points)])
    if len(results) > 1:
        eer = float(np.mean([r.eer for r in results]))
        dcf = [float(np.mean([r.min_dcf[op.label] for r in results])) for op in operating_points]
        rows.append(["average", f"{eer:.3f}", *(f"{v:.4f}" for v in dcf)])
    return write_text_atomic(path, _csv_text(rows))


def write_min_dcf_csv(curve: DetCurve, path: Path | str, priors: np.ndarray = PRIOR_GRID) -> Path:
    rows = [["prior", "min_dcf"]]
    for p, v in zip(priors, _min_dcf_over_priors(curve, priors)):
        rows.append([f"{p:.6g}", f"{v:.6f}"])
    return write_text_atomic(path, _csv_text(rows))


def plot_det(
    results: Sequence[ConditionResult], operating_points: Sequence[OperatingPoint], path: Path | str
) -> Path:
    """DET curves on probit axes; the min-DCF vertex of each operating point is marked."""
    fig = Figure(figsize=(5.5, 5.5))
    ax = fig.add_subplot()
    markers = "os^vDP"
    for r in results:
        x = probit(np.clip(r.curve.p_fa, PLOT_CLIP, 1 - PLOT_CLIP))
        y = probit(np.clip(r.curve.p_miss, PLOT_CLIP, 1 - PLOT_CLIP))
        (line,) = ax.plot(x, y, drawstyle="steps-post", label=f"{r.name} (EER {r.eer:.2f}%)")
        for k, op in enumerate(operating_points):
            i = int(np.argmin(_dcf(r.curve, op)))
            ax.plot(x[i], y[i], markers[k % len(markers)], color=line.get_color(), markersize=5)
    ticks = probit(np.array(DET_TICKS))
    labels = [f"{100 * t:g}" for t in DET_TICKS]
    for axis_ticks, axis_labels in ((ax.set_xticks, ax.set_xticklabels), (ax.set_yticks, ax.set_yticklabels)):
        axis_ticks(ticks)
        axis_labels(labels)
    lim = (probit(DET_TICKS[0]), probit(DET_TICKS[-1]))
    ax.set_xlim(*lim)
    ax.set_ylim(*lim)
    ax.set_xlabel("False alarm probability (%)")
    ax.set_ylabel("Miss probability (%)")
    ax.grid(True, linewidth=0.4)
    ax.set_title(" / ".join(op.label for op in operating_points), fontsize=8)
    if results:
        ax.legend(fontsize=7, loc="upper right")
    with matplotlib.rc_context({"svg.hashsalt": "svk-det", "svg.fonttype": "none"}):
        with atomic_write(path) as tmp:
            fig.savefig(tmp, format="svg", metadata={"Date": None})
    return Path(path)


def plot_min_dcf(
    results: Sequence[ConditionResult], operating_points: Sequence[OperatingPoint], path: Path | str,
    priors: np.ndarray = PRIOR_GRID,
) -> Path:
    """Normalized minDCF against the effective prior; dashed lines mark the configured operating points."""
    fig = Figure(figsize=(5.5, 4.0))
    ax = fig.add_subplot()
    for r in results:
        ax.plot(priors, _min_dcf_over_priors(r.curve, priors), label=r.name)
    for op in operating_points:
        ax.axvline(effective_prior(op), color="0.5", linestyle="--", linewidth=0.6)
    ax.set_xscale("logit")
    ax.set_xlim(priors[0], priors[-1])
    ax.set_ylim(bottom=0.0)
    ax.set_xlabel("Effective target prior")
    ax.set_ylabel("Normalized minDCF")
    ax.grid(True, linewidth=0.4)
    if results:
        ax.legend(fontsize=7, loc="upper right")
    with matplotlib.rc_context({"svg.hashsalt": "svk-mindcf", "svg.fonttype": "none"}):
        with atomic_write(path) as tmp:
            fig.savefig(tmp, format="svg", metadata={"Date": None})
    return Path(path)


def emit_report(
    results: Sequence[ConditionResult],
    out_dir: Path | str,
    operating_points: Sequence[OperatingPoint] = DEFAULT_OPERATING_POINTS,
) -> list[Path]:
    out_dir = Path(out_dir)
    written = [write_summary_csv(results, operating_points, out_dir / "summary.csv")]
    if not results:
        return written
    for r in results:
        written.append(write_curve_csv(r.curve, out_dir / f"det_{r.name}.csv"))
        written.append(write_min_dcf_csv(r.curve, out_dir / f"mindcf_{r.name}.csv"))
    written.append(plot_det(results, operating_points, out_dir / "det.svg"))
    written.append(plot_min_dcf(results, operating_points, out_dir / "min_dcf.svg"))
    log.info("Wrote report for %d conditions to %s", len(results), out_dir)
    return written
