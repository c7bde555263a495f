"""OTB-style precision/success metrics and rect-file I/O."""
import decimal
import json
import re
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError, InvalidInputError
from ..featext import BoundingBox

PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.round(np.arange(21) * 0.05, 10)


@dataclass(frozen=True)
class MetricReport:
    precision_curve: tuple
    precision_at_20: float
    success_curve: tuple
    auc: float

    def to_dict(self):
        return {"precision_curve": list(self.precision_curve),
                "precision_at_20": self.precision_at_20,
                "success_curve": list(self.success_curve),
                "auc": self.auc}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["precision_curve"]), d["precision_at_20"], tuple(d["success_curve"]), d["auc"])


def _arr(boxes):
    return np.array([b.as_tuple() if isinstance(b, BoundingBox) else tuple(b) for b in boxes],
                    dtype=np.float64).reshape(-1, 4)


def _pair(pred, gt):
    p, g = _arr(pred), _arr(gt)
    if len(p) != len(g):
        raise InvalidInputError(f"{len(p)} predictions for {len(g)} ground-truth boxes")
    if not len(p):
        raise InvalidInputError("no boxes")
    return p, g


def center_errors(pred, gt):
    p, g = _pair(pred, gt)
    pc = p[:, :2] + p[:, 2:] / 2.0
    gc = g[:, :2] + g[:, 2:] / 2.0
    return np.hypot(*(pc - gc).T)


def overlaps(pred, gt):
    p, g = _pair(pred, gt)
    x1 = np.maximum(p[:, 0], g[:, 0])
    y1 = np.maximum(p[:, 1], g[:, 1])
    x2 = np.minimum(p[:, 0] + p[:, 2], g[:, 0] + g[:, 2])
    y2 = np.minimum(p[:, 1] + p[:, 3], g[:, 1] + g[:, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = p[:, 2] * p[:, 3] + g[:, 2] * g[:, 3] - inter
    return inter / union


def precision_curve(pred, gt):
    """Fraction of frames with center error <= t for t = 0..50 px."""
    err = center_errors(pred, gt)
    curve = (err[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    return curve, float(curve[20])


def success_curve(pred, gt):
    """Fraction of frames with IoU > t on t = 0, 0.05, ..., 1, and its AUC.

    The AUC is the left Riemann sum over [0, 1] with 0.05 bins, i.e. the
    mean over t = 0..0.95; the t = 1 point is reported but always 0.
    """
    iou = overlaps(pred, gt)
    curve = (iou[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    return curve, float(curve[:-1].mean())


def evaluate(pred, gt):
    pc, p20 = precision_curve(pred, gt)
    sc, auc = success_curve(pred, gt)
    return MetricReport(tuple(float(v) for v in pc), p20, tuple(float(v) for v in sc), auc)


# --- rect files ------------------------------------------------------------------

_SPLIT = re.compile(r"[,\t]|\s+")


# The 1-indexed origin shift is done in exact decimal arithmetic on both
# sides, so writing and re-reading a box is bit-exact for any float.
_EXACT = decimal.Context(prec=1000)


def _fmt(v, shift=0):
    d = _EXACT.add(decimal.Decimal(repr(float(v))), shift)
    if d == d.to_integral_value():
        return str(int(d))
    return format(d, "f")


def _parse_field(text, shift=0):
    try:
        return float(_EXACT.subtract(decimal.Decimal(text), shift))
    except decimal.InvalidOperation:
        raise ValueError(text) from None


def format_rects(boxes):
    """One "x,y,w,h" line per box, 1-indexed origin."""
    lines = []
    for b in boxes:
        x, y, w, h = b.as_tuple()
        lines.append(",".join((_fmt(x, 1), _fmt(y, 1), _fmt(w), _fmt(h))))
    return "\n".join(lines) + "\n"


def parse_rects(text, name="<rects>"):
    boxes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = [p for p in _SPLIT.split(line) if p]
        if len(parts) != 4:
            raise FormatError(f"{name}: expected 4 fields, got {len(parts)}", lineno)
        try:
            x, y, w, h = (_parse_field(p, k) for p, k in zip(parts, (1, 1, 0, 0)))
        except ValueError:
            raise FormatError(f"{name}: non-numeric field in {line!r}", lineno) from None
        try:
            boxes.append(BoundingBox(x, y, w, h))
        except InvalidInputError as exc:
            raise FormatError(f"{name}: {exc}", lineno) from None
    return boxes


def read_rects(path):
    with open(path) as fh:
        return parse_rects(fh.read(), str(path))


def write_rects(boxes, path):
    with open(path, "w") as fh:
        fh.write(format_rects(boxes))
