"""Confusion counts and the five segmentation metrics, with aggregation.

Per-image metrics are macro-averaged (unweighted per-image mean with
population std), mirroring a mean +/- std presentation.  Precision is
included as an optional sixth column.

Zero-denominator rule, applied uniformly: a metric whose denominator is
zero has no error pixels of the kinds it penalizes, so it reports 1.0.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UsageError

METRIC_NAMES = ("acc", "sn", "sp", "j", "d")


@dataclass
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class MetricsReport:
    per_image: dict  # id -> dict of metric -> value
    aggregate: dict  # metric -> (mean, std)
    folds: list | None = None  # list of (fold ids, aggregate dict)
    include_precision: bool = False
    columns: tuple = field(default=METRIC_NAMES)


def confusion(pred, gt, threshold=0.5):
    """Per-image confusion counts for N x 1 x H x W probability maps."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} and gt {gt.shape} differ")
    if pred.ndim == 3:
        pred, gt = pred[None], gt[None]
    binary = pred >= threshold
    truth = gt >= 0.5
    out = []
    for p, g in zip(binary, truth):
        tp = int(np.count_nonzero(p & g))
        tn = int(np.count_nonzero(~p & ~g))
        fp = int(np.count_nonzero(p & ~g))
        fn = int(np.count_nonzero(~p & g))
        out.append(Confusion(tp=tp, tn=tn, fp=fp, fn=fn))
    return out


def _ratio(num, den):
    return num / den if den > 0 else 1.0


def metrics_from(c: Confusion, include_precision=False):
    values = {
        "acc": _ratio(c.tp + c.tn, c.total),
        "sn": _ratio(c.tp, c.tp + c.fn),
        "sp": _ratio(c.tn, c.tn + c.fp),
        "j": _ratio(c.tp, c.tp + c.fp + c.fn),
        "d": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
    }
    if include_precision:
        values["pr"] = _ratio(c.tp, c.tp + c.fp)
    return values


def _aggregate_rows(rows, columns):
    agg = {}
    for name in columns:
        vals = np.array([row[name] for row in rows], dtype=np.float64)
        agg[name] = (float(vals.mean()), float(vals.std()))  # population std
    return agg


def aggregate(per_image, folds=None, include_precision=False) -> MetricsReport:
    """Mean and population std over per-image metric dicts (id -> values)."""
    if not per_image:
        raise UsageError("aggregate over an empty report set")
    columns = METRIC_NAMES + (("pr",) if include_precision else ())
    agg = _aggregate_rows(list(per_image.values()), columns)
    fold_aggs = None
    if folds is not None:
        fold_aggs = []
        for fold_ids in folds:
            rows = [per_image[i] for i in fold_ids if i in per_image]
            if not rows:
                raise UsageError("fold contains no evaluated ids")
            fold_aggs.append((list(fold_ids), _aggregate_rows(rows, columns)))
    return MetricsReport(
        per_image=dict(per_image),
        aggregate=agg,
        folds=fold_aggs,
        include_precision=include_precision,
        columns=columns,
    )


def evaluate(pred_by_id, gt_by_id, threshold=0.5, folds=None, include_precision=False):
    """Confusion + metrics for matching id -> map dicts, then aggregate."""
    per_image = {}
    for sid, pred in pred_by_id.items():
        c = confusion(pred[None], gt_by_id[sid][None], threshold)[0]
        per_image[sid] = metrics_from(c, include_precision)
    return aggregate(per_image, folds=folds, include_precision=include_precision)


# ---------------------------------------------------------------------------
# report emission


def to_text(report: MetricsReport) -> str:
    cols = report.columns
    buf = io.StringIO()
    width = max([len(i) for i in report.per_image] + [9])
    header = "id".ljust(width) + "".join(f"  {c:>8}" for c in cols)
    buf.write(header + "\n")
    buf.write("-" * len(header) + "\n")
    for sid, row in report.per_image.items():
        buf.write(sid.ljust(width) + "".join(f"  {row[c]:8.4f}" for c in cols) + "\n")
    buf.write("-" * len(header) + "\n")
    mean_row = "mean".ljust(width)
    std_row = "std".ljust(width)
    for c in cols:
        mean, std = report.aggregate[c]
        mean_row += f"  {mean:8.4f}"
        std_row += f"  {std:8.4f}"
    buf.write(mean_row + "\n")
    buf.write(std_row + "\n")
    if report.folds:
        for i, (_ids, agg) in enumerate(report.folds):
            line = f"fold{i + 1}".ljust(width)
            for c in cols:
                line += f"  {agg[c][0]:8.4f}"
            buf.write(line + "\n")
    return buf.getvalue()


def to_csv(report: MetricsReport) -> str:
    cols = report.columns
    lines = ["id," + ",".join(cols)]
    for sid, row in report.per_image.items():
        lines.append(sid + "," + ",".join(f"{row[c]:.6f}" for c in cols))
    return "\n".join(lines) + "\n"
