"""Segmentation metrics and the per-run report structure."""

import json
from dataclasses import dataclass, field

import numpy as np


def confusion(pred, gt, class_count):
    """class_count x class_count counts, rows = ground truth, cols = prediction."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if m.size and (m.min() < 0 or m.max() >= class_count):
            raise ValueError(f"{name} contains labels outside [0, {class_count})")
    idx = gt.astype(np.int64) * class_count + pred.astype(np.int64)
    return np.bincount(idx, minlength=class_count * class_count).reshape(
        class_count, class_count
    )


def miou(pred, gt, class_count):
    """Per-class IoU (NaN where a class is absent from both masks) and the mean.

    Classes missing from both prediction and ground truth are excluded from
    the mean; a class present in only one of them scores 0 and is included.
    """
    cm = confusion(pred, gt, class_count)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    iou = np.full(class_count, np.nan)
    seen = union > 0
    iou[seen] = inter[seen] / union[seen]
    mean = float(np.nanmean(iou[seen])) if seen.any() else float("nan")
    return iou, mean


@dataclass
class DomainMetrics:
    domain: str
    miou_baseline: float
    miou: float
    iou: list  # per class; None where the class never appeared
    attention_mean: list | None = None  # mean fusion weight per style


@dataclass
class MetricsReport:
    config_hash: str
    seed: int
    domains: list = field(default_factory=list)
    # wall-clock lives outside the deterministic payload; see to_meta_json
    wall_clock_s: float = 0.0

    def to_csv(self) -> str:
        """Deterministic byte-stable CSV (no timings)."""
        k = max((len(d.iou) for d in self.domains), default=0)
        n = max((len(d.attention_mean or []) for d in self.domains), default=0)
        cols = ["config", "seed", "domain", "miou_baseline", "miou"]
        cols += [f"iou_{i}" for i in range(k)]
        cols += [f"attention_{i}" for i in range(n)]
        lines = [",".join(cols)]
        for d in self.domains:
            row = [self.config_hash, str(self.seed), d.domain,
                   _fmt(d.miou_baseline), _fmt(d.miou)]
            row += [_fmt(v) for v in d.iou] + [""] * (k - len(d.iou))
            att = d.attention_mean or []
            row += [_fmt(v) for v in att] + [""] * (n - len(att))
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def to_meta_json(self) -> str:
        """The non-deterministic sidecar: wall-clock timing only."""
        return json.dumps({"wall_clock_s": self.wall_clock_s}, indent=2) + "\n"


def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return f"{float(v):.6f}"
