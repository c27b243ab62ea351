"""Scoring of predicted centroids: presence, localization error, identification and per-region reports."""
import logging
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .landmarks import REGION_NAMES, REGIONS, LandmarkSet  # noqa: E402
from .volume import argmax_location, voxel_to_world  # noqa: E402

logger = logging.getLogger(__name__)

ID_RADIUS_MM = 20.0
REPORT_COLUMNS = ["region", "method", "mean_mm", "std_mm", "id_rate", "count"]
CASE_COLUMNS = ["case", "label", "region", "error_mm", "identified"]


def detect_presence(stack, threshold):
    """Labels whose channel maximum exceeds the threshold, in channel order."""
    if not threshold > 0:
        raise ValueError(f"presence threshold must be positive, got {threshold}")
    maxima = stack.data.max(axis=(1, 2, 3))
    return tuple(label for label, peak in zip(stack.labels, maxima) if peak > threshold)


def stack_landmarks(stack, present=None):
    """Argmax centroid (mm) of every channel; `present` lists the labels to mark present."""
    present = set(stack.labels if present is None else present)
    positions, flags = [], []
    for label, channel in zip(stack.labels, stack.channels):
        index, _ = argmax_location(channel)
        positions.append(voxel_to_world(index, channel))
        flags.append(label in present)
    return LandmarkSet.from_arrays(stack.labels, np.array(positions), flags)


def _check_aligned(pred, gt):
    if tuple(pred.labels) != tuple(gt.labels):
        raise ValueError(f"prediction labels {pred.labels} do not match ground truth {gt.labels}")


def localization_errors(pred, gt):
    """Euclidean distance (mm) per label present in both sets."""
    _check_aligned(pred, gt)
    both = pred.present & gt.present
    dist = np.linalg.norm(pred.positions - gt.positions, axis=1)
    return {label: float(d) for label, d, ok in zip(gt.labels, dist, both) if ok}


def identify(pred, gt, radius=ID_RADIUS_MM):
    """Per ground-truth-present label: within `radius` of its own centroid and closer to it than to any other."""
    _check_aligned(pred, gt)
    truth = gt.positions[gt.present]
    truth_labels = [label for label, ok in zip(gt.labels, gt.present) if ok]
    out = {}
    for label, position, pred_ok, gt_ok in zip(gt.labels, pred.positions, pred.present, gt.present):
        if not gt_ok:
            continue
        if not pred_ok:
            out[label] = False
            continue
        dist = np.linalg.norm(truth - position, axis=1)
        own = truth_labels.index(label)
        others = np.delete(dist, own)
        out[label] = bool(dist[own] < radius and (others.size == 0 or dist[own] < others.min()))
    return out


def identification_rate(pred, gt, radius=ID_RADIUS_MM):
    """Identified fraction of the ground-truth-present labels; None when there are none."""
    flags = identify(pred, gt, radius)
    if not flags:
        return None
    return sum(flags.values()) / len(flags)


@dataclass
class RegionStats:
    region: str
    mean: float = None
    std: float = None
    id_rate: float = None
    count: int = 0

    @property
    def absent(self):
        return self.count == 0 and self.id_rate is None


@dataclass
class EvalReport:
    method: str
    regions: dict = field(default_factory=dict)
    cases: pd.DataFrame = None

    def region(self, name):
        return self.regions[name]

    def rows(self):
        for name in REGION_NAMES:
            s = self.regions[name]
            yield {
                "region": name,
                "method": self.method,
                "mean_mm": s.mean,
                "std_mm": s.std,
                "id_rate": s.id_rate,
                "count": s.count,
            }

    def per_label_mean(self):
        errors = self.cases.dropna(subset=["error_mm"])
        return errors.groupby("label", sort=False)["error_mm"].mean()


def region_of(label, regions=REGIONS):
    return regions.get(label)


def region_report(errors, identifications, method="", regions=REGIONS):
    """Per-region mean / population std of errors and identification rate.

    `errors` has columns label, error_mm; `identifications` has label, identified.
    A region with no rows reports None instead of zero.
    """
    errors = pd.DataFrame(errors, columns=["label", "error_mm"]) if not isinstance(errors, pd.DataFrame) else errors
    identifications = (
        pd.DataFrame(identifications, columns=["label", "identified"])
        if not isinstance(identifications, pd.DataFrame)
        else identifications
    )
    stats = {}
    for name in REGION_NAMES:
        if name == "All":
            e, ids = errors, identifications
        else:
            members = [label for label, region in regions.items() if region == name]
            e = errors[errors["label"].isin(members)]
            ids = identifications[identifications["label"].isin(members)]
        values = e["error_mm"].to_numpy(dtype=float)
        s = RegionStats(name, count=int(values.size))
        if values.size:
            s.mean = float(values.mean())
            s.std = float(values.std(ddof=0))
        if len(ids):
            s.id_rate = float(ids["identified"].astype(bool).mean())
        stats[name] = s
    return EvalReport(method, stats)


def evaluate_cases(method, predictions, truths, radius=ID_RADIUS_MM, regions=REGIONS):
    """Score aligned lists of predicted and ground-truth landmark sets, in case order."""
    rows = []
    for case, (pred, gt) in enumerate(zip(predictions, truths)):
        errors = localization_errors(pred, gt)
        ids = identify(pred, gt, radius)
        for label in gt.labels:
            if label not in errors and label not in ids:
                continue
            rows.append(
                {
                    "case": case,
                    "label": label,
                    "region": regions.get(label, ""),
                    "error_mm": errors.get(label, np.nan),
                    "identified": ids.get(label, np.nan),
                }
            )
    cases = pd.DataFrame(rows, columns=CASE_COLUMNS)
    report = region_report(
        cases.dropna(subset=["error_mm"])[["label", "error_mm"]],
        cases.dropna(subset=["identified"])[["label", "identified"]],
        method,
        regions,
    )
    report.cases = cases
    overall = report.regions["All"]
    logger.info("%s: mean %s mm, id rate %s over %d landmarks", method, _fmt(overall.mean), _fmt(overall.id_rate), overall.count)
    return report


def _fmt(value):
    return "n/a" if value is None else f"{value:.3f}"


def write_report_csv(reports, path):
    df = pd.DataFrame([row for report in reports for row in report.rows()], columns=REPORT_COLUMNS)
    df.to_csv(path, index=False, float_format="%.6f")
    return df


def write_case_errors(reports, path):
    frames = [r.cases.assign(method=r.method) for r in reports if r.cases is not None]
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=CASE_COLUMNS + ["method"])
    df.to_csv(path, index=False, float_format="%.6f")
    return df


def plot_refinement_errors(before, after, path, labels=None):
    """Per-label mean error before and after refinement as an SVG line chart."""
    b, a = before.per_label_mean(), after.per_label_mean()
    labels = [l for l in (labels or list(dict.fromkeys(list(b.index) + list(a.index)))) if l in b.index or l in a.index]
    plt.rcParams["svg.hashsalt"] = "vertebra-locator"
    fig, ax = plt.subplots(figsize=(8, 4))
    x = np.arange(len(labels))
    ax.plot(x, [b.get(l, np.nan) for l in labels], "o-", color="#c0392b", label=before.method)
    ax.plot(x, [a.get(l, np.nan) for l in labels], "s-", color="#2471a3", label=after.method)
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylabel("mean error (mm)")
    ax.set_title("Localization error before and after refinement")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
