from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclass
class MetricReport:
    miou: float | None = None
    area_fractions: list[float] = field(default_factory=list)
    component_counts: list[int] = field(default_factory=list)
    step: int | None = None

    def single_instance_rate(self, area_target: float) -> float:
        """Share of masks with exactly one component and area in [a/2, 2a]."""
        if not self.component_counts:
            return 0.0
        ok = [
            c == 1 and 0.5 * area_target <= f <= 2.0 * area_target
            for c, f in zip(self.component_counts, self.area_fractions)
        ]
        return float(np.mean(ok))


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(getattr(mask, "data", mask)) >= threshold


def iou(pred, gt, threshold: float = 0.5) -> float:
    """Foreground IoU of a soft prediction (binarized) against a binary mask."""
    p = binarize(pred, threshold)
    g = np.asarray(getattr(gt, "data", gt)) >= 0.5
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def miou(pred, gt, threshold: float = 0.5) -> float:
    """Mean IoU over a batch; a single mask pair is a batch of one.

    Inputs are (H, W), (1, H, W) or (N, 1, H, W).
    """
    p = np.asarray(getattr(pred, "data", pred))
    g = np.asarray(getattr(gt, "data", gt))
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    if p.ndim <= 3:
        return iou(p, g, threshold)
    return float(np.mean([iou(a, b, threshold) for a, b in zip(p, g)]))


def connected_components(mask, connectivity: int = 4) -> int:
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 4 or 8")
    m = np.asarray(getattr(mask, "data", mask)).astype(bool)
    m = m.reshape(m.shape[-2:]) if m.ndim > 2 else m
    _, count = ndimage.label(m, structure=_STRUCTURES[connectivity])
    return int(count)


def mask_report(masks, threshold: float = 0.5, connectivity: int = 4) -> MetricReport:
    """Area fractions and component counts for a stack of soft masks (N, 1, H, W)."""
    m = np.asarray(getattr(masks, "data", masks))
    report = MetricReport()
    for mask in m:
        b = binarize(mask, threshold)
        report.area_fractions.append(float(b.mean()))
        report.component_counts.append(connected_components(b, connectivity))
    return report
