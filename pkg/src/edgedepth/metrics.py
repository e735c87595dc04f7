"""Seven-metric depth evaluation (AbsRel, SqRel, RMSE, RMSE_log, delta<1.25^k)
with optional median scaling and foreground/background breakdown."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EvalError(ValueError):
    pass


@dataclass
class MetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int
    scale_factor: float = 1.0

    def row(self):
        return [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log,
                self.delta1, self.delta2, self.delta3, self.n_pixels]


def evaluate(pred, gt, valid=None, median_scale: bool = True,
             min_depth: float = 0.1, max_depth: float = 100.0) -> MetricReport:
    """Standard Eigen-style metrics; thresholds use strict ratio < 1.25^k.

    Predictions are optionally median-scaled by median(gt)/median(pred),
    then clamped to [min_depth, max_depth].
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise EvalError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if valid is not None:
        v = np.asarray(valid, dtype=bool).ravel()
        pred, gt = pred[v], gt[v]
    if pred.size == 0:
        raise EvalError("empty valid mask")
    if np.any(gt <= 0) or np.any(pred <= 0):
        raise EvalError("depths must be strictly positive")

    scale = 1.0
    if median_scale:
        scale = float(np.median(gt) / np.median(pred))
        pred = pred * scale
    pred = np.clip(pred, min_depth, max_depth)

    diff = pred - gt
    ratio = np.maximum(pred / gt, gt / pred)
    return MetricReport(
        abs_rel=float(np.mean(np.abs(diff) / gt)),
        sq_rel=float(np.mean(diff ** 2 / gt)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(pred) - np.log(gt)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        n_pixels=int(pred.size),
        scale_factor=scale)


def per_category_error(pred, gt, mask, valid=None, **kwargs):
    """Evaluate foreground (mask==1) and background (mask==0) separately.

    Returns (foreground report | None, background report | None); a region
    with zero pixels yields None.
    """
    mask = np.asarray(mask, dtype=bool)
    base = np.ones(mask.shape, dtype=bool) if valid is None \
        else np.asarray(valid, dtype=bool)
    out = []
    for region in (mask, ~mask):
        sel = base & region
        if sel.sum() == 0:
            out.append(None)
        else:
            out.append(evaluate(pred, gt, valid=sel, **kwargs))
    return tuple(out)


CSV_HEADER = "abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3,n_pixels"


def merge_reports(reports) -> MetricReport:
    """Pixel-weighted average of per-sample reports."""
    reports = list(reports)
    if not reports:
        raise EvalError("no reports to merge")
    n = np.array([r.n_pixels for r in reports], dtype=np.float64)
    wsum = n.sum()

    def avg(field):
        return float(sum(getattr(r, field) * w for r, w in zip(reports, n)) / wsum)

    return MetricReport(abs_rel=avg("abs_rel"), sq_rel=avg("sq_rel"),
                        rmse=avg("rmse"), rmse_log=avg("rmse_log"),
                        delta1=avg("delta1"), delta2=avg("delta2"),
                        delta3=avg("delta3"), n_pixels=int(wsum),
                        scale_factor=avg("scale_factor"))


def write_csv(path_or_file, reports, aggregate: MetricReport | None = None):
    """One row per sample plus an aggregate row."""
    close = False
    if isinstance(path_or_file, (str, bytes)):
        f = open(path_or_file, "w")
        close = True
    else:
        f = path_or_file
    try:
        f.write(CSV_HEADER + "\n")
        for r in reports:
            f.write(",".join(repr(v) if isinstance(v, float) else str(v)
                             for v in r.row()) + "\n")
        agg = aggregate if aggregate is not None else merge_reports(reports)
        f.write(",".join(repr(v) if isinstance(v, float) else str(v)
                         for v in agg.row()) + "\n")
    finally:
        if close:
            f.close()
