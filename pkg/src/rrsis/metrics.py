"""Referring-segmentation metrics: per-sample IoU, Pr@t, mIoU and oIoU.

Thresholds compare exact rationals (``IoU > t`` strictly) and the means are
accumulated as fractions, so reports depend only on the pixel counts and not
on sample order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

THRESHOLDS = ("0.5", "0.6", "0.7", "0.8", "0.9")


def _as_binary(mask, name: str) -> np.ndarray:
    a = np.asarray(mask)
    if a.dtype == bool:
        return a
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} mask must be binary (0/1)")
    return a.astype(bool)


def counts(pred, gt) -> tuple[int, int]:
    """Return ``(intersection, union)`` pixel counts."""
    p, g = _as_binary(pred, "prediction"), _as_binary(gt, "ground-truth")
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p | g))


def _ratio(inter: int, union: int) -> Fraction:
    return Fraction(inter, union) if union else Fraction(1)


def iou(pred, gt) -> float:
    return float(_ratio(*counts(pred, gt)))


@dataclass
class MetricReport:
    pr: dict[str, float]
    miou: float
    oiou: float
    n: int

    def to_dict(self) -> dict:
        out = {f"pr@{t}": self.pr[t] for t in THRESHOLDS}
        out.update(miou=self.miou, oiou=self.oiou, n=self.n)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self, name: str = "model") -> str:
        cols = [f"Pr@{t}" for t in THRESHOLDS] + ["oIoU", "mIoU"]
        vals = [self.pr[t] for t in THRESHOLDS] + [self.oiou, self.miou]
        width = max(len(name), 6)
        head = f"{'Method':<{width}} " + " ".join(f"{c:>7}" for c in cols)
        row = f"{name:<{width}} " + " ".join(f"{v:>7.2f}" for v in vals)
        return head + "\n" + row


def evaluate(samples) -> MetricReport:
    """Score a non-empty sequence of ``(pred, gt)`` binary mask pairs."""
    pairs = [counts(p, g) for p, g in samples]
    if not pairs:
        raise ValueError("cannot evaluate an empty sample list")
    return report_from_counts(pairs)


def report_from_counts(pairs) -> MetricReport:
    n = len(pairs)
    ious = [_ratio(i, u) for i, u in pairs]
    pr = {}
    for t in THRESHOLDS:
        thr = Fraction(t)
        pr[t] = float(Fraction(100 * sum(1 for x in ious if x > thr), n))
    miou = float(100 * sum(ious, Fraction(0)) / n)
    total_i = sum(i for i, _ in pairs)
    total_u = sum(u for _, u in pairs)
    oiou = float(100 * _ratio(total_i, total_u))
    return MetricReport(pr=pr, miou=miou, oiou=oiou, n=n)
