"""Training loss, Dice scores and slice-stratified reporting."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .autodiff.ops import ShapeError
from .autodiff.tensor import make_result

BACKGROUND, PZ, TZ = 0, 1, 2
ZONES = {"PZ": PZ, "TZ": TZ}
PROB_EPS = 1e-7


class SliceCategory(str, enum.Enum):
    NON_PROSTATE = "non_prostate"
    BASE_END = "base_end"
    MIDDLE = "middle"
    APEX_END = "apex_end"


SUBSETS = ("all_slices", "prostate_slices", "base_end", "middle", "apex_end")


def validate_labels(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() > 2):
        raise ValueError("mask labels must lie in {0, 1, 2}")
    return mask


def one_hot(labels: np.ndarray, num_classes: int = 3, dtype=np.float32) -> np.ndarray:
    """N x H x W labels -> N x C x H x W indicators."""
    labels = validate_labels(labels)
    return (labels[:, None] == np.arange(num_classes)[None, :, None, None]).astype(dtype)


def cross_entropy_loss(probs: Tensor, target, eps: float = PROB_EPS) -> Tensor:
    """Mean per-pixel binary cross entropy averaged over the three classes.

    ``probs`` are softmax outputs (N x 3 x H x W) and ``target`` the label
    masks (N x H x W). Probabilities are clamped to [eps, 1 - eps]; the
    clamp passes no gradient where it is active.
    """
    target = np.asarray(target)
    if probs.ndim != 4 or target.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ShapeError(f"probabilities {probs.shape} do not match targets {target.shape}")
    c = probs.shape[1]
    y = one_hot(target, c, probs.dtype)
    p = probs.data
    pc = np.clip(p, eps, 1 - eps)
    inside = (p >= eps) & (p <= 1 - eps)
    per_elem = -y * np.log(pc) - (1 - y) * np.log(1 - pc)
    count = p.shape[0] * p.shape[2] * p.shape[3]
    loss = per_elem.sum() / (c * count)

    def backward(g):
        dp = (-y / pc + (1 - y) / (1 - pc)) * inside / (c * count)
        return (g * dp.astype(p.dtype, copy=False),)

    return make_result(np.asarray(loss, dtype=p.dtype), (probs,), backward, "cross_entropy")


def dsc(pred, truth, zone) -> float | None:
    """Dice coefficient of one zone pooled over every voxel given.

    Returns None when the zone is absent from both masks.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    label = ZONES[zone] if isinstance(zone, str) else int(zone)
    x = pred == label
    y = truth == label
    nx, ny = int(x.sum()), int(y.sum())
    if nx + ny == 0:
        return None
    return 2.0 * int(np.logical_and(x, y).sum()) / (nx + ny)


def categorize_slice(truth_slice) -> SliceCategory:
    s = np.asarray(truth_slice)
    has_pz = bool((s == PZ).any())
    has_tz = bool((s == TZ).any())
    if has_pz and has_tz:
        return SliceCategory.MIDDLE
    if has_tz:
        return SliceCategory.BASE_END
    if has_pz:
        return SliceCategory.APEX_END
    return SliceCategory.NON_PROSTATE


def categorize_volume(truth) -> list:
    """Category of each slice of a (slices, H, W) mask."""
    return [categorize_slice(s) for s in np.asarray(truth)]


def stratified_report(pred, truth) -> dict:
    """zone -> subset -> DSC (None marks an absent cell) for one volume."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 3:
        raise ShapeError(f"volumes must share (slices, H, W) geometry: {pred.shape} vs {truth.shape}")
    cats = categorize_volume(truth)
    subsets = {
        "all_slices": [True] * len(cats),
        "prostate_slices": [c is not SliceCategory.NON_PROSTATE for c in cats],
        "base_end": [c is SliceCategory.BASE_END for c in cats],
        "middle": [c is SliceCategory.MIDDLE for c in cats],
        "apex_end": [c is SliceCategory.APEX_END for c in cats],
    }
    row = {}
    for zone in ZONES:
        row[zone] = {}
        for name, keep in subsets.items():
            idx = np.flatnonzero(keep)
            row[zone][name] = dsc(pred[idx], truth[idx], zone) if idx.size else None
    return row


def _mean_sd(values):
    if not values:
        return None, None
    mean = float(np.mean(values))
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else None
    return mean, sd


@dataclass
class SegReport:
    """Per-patient stratified DSC rows plus cohort summaries."""

    rows: dict = field(default_factory=dict)
    label: str = ""

    def add(self, patient: str, row: dict) -> None:
        self.rows[patient] = row

    def values(self, zone: str, subset: str) -> dict:
        """patient -> DSC for every patient with a present cell."""
        return {p: r[zone][subset] for p, r in self.rows.items() if r[zone][subset] is not None}

    def summary(self) -> dict:
        out = {}
        for zone in ZONES:
            out[zone] = {}
            for subset in SUBSETS:
                vals = list(self.values(zone, subset).values())
                if not vals:
                    out[zone][subset] = None
                    continue
                mean, sd = _mean_sd(vals)
                out[zone][subset] = {"mean": mean, "sd": sd, "n": len(vals)}
        return out

    def mean_dsc(self, subset: str = "prostate_slices") -> float:
        """Average of the PZ and TZ cohort means for a subset."""
        s = self.summary()
        means = [s[z][subset]["mean"] for z in ZONES if s[z][subset] is not None]
        return float(np.mean(means)) if means else float("nan")

    def to_dict(self) -> dict:
        return {"label": self.label, "patients": self.rows, "summary": self.summary()}

    @classmethod
    def from_dict(cls, d: dict) -> "SegReport":
        return cls(rows=dict(d["patients"]), label=d.get("label", ""))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        header = ["patient"] + [f"{z}_{s}" for s in SUBSETS for z in ZONES]
        writer.writerow(header)
        for patient, row in sorted(self.rows.items()):
            writer.writerow([patient] + [_fmt_value(row[z][s]) for s in SUBSETS for z in ZONES])
        summary = self.summary()
        writer.writerow(["mean±SD"] + [format_cell(summary[z][s]) for s in SUBSETS for z in ZONES])
        return buf.getvalue()

    def save(self, path) -> None:
        path = str(path)
        text = self.to_csv() if path.endswith(".csv") else self.to_json()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)

    @classmethod
    def load(cls, path) -> "SegReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _fmt_value(v) -> str:
    return "" if v is None else f"{v:.4f}"


def format_cell(cell) -> str:
    """'0.74±0.08' style; SD omitted when undefined, empty when absent."""
    if cell is None:
        return ""
    mean, sd = cell["mean"], cell["sd"]
    if sd is None or (isinstance(sd, float) and math.isnan(sd)):
        return f"{mean:.2f}"
    return f"{mean:.2f}±{sd:.2f}"
