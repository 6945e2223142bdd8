"""Overlap and surface-distance segmentation metrics.

Foreground is every non-background voxel (label != 0). Surfaces are
foreground voxels with at least one six-connected background neighbor;
voxels on the volume border count as surface. Distances are Euclidean
between voxel centers in voxel units (isotropic unit spacing).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import UndefinedMetricError
from .grids import LabelMap


@dataclass
class MetricsRecord:
    """Per-case metric row; asd/hd are None when a foreground was empty."""

    case_id: str
    dsc: float
    jaccard: float
    asd: float | None
    hd: float | None

    CSV_HEADER = "case_id,dsc,jaccard,asd,hd"

    def csv_row(self) -> str:
        asd = "" if self.asd is None else repr(self.asd)
        hd = "" if self.hd is None else repr(self.hd)
        return f"{self.case_id},{self.dsc!r},{self.jaccard!r},{asd},{hd}"


def _foreground(lm: LabelMap) -> np.ndarray:
    return lm.data != 0


def dsc_jaccard(pred: LabelMap, truth: LabelMap) -> tuple[float, float]:
    """(2|A&B|/(|A|+|B|), |A&B|/|A|B|); both-empty counts as perfect."""
    if pred.dims != truth.dims:
        raise ValueError(f"dims mismatch: {pred.dims} vs {truth.dims}")
    a, b = _foreground(pred), _foreground(truth)
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0, 1.0
    inter = int((a & b).sum())
    return 2.0 * inter / (na + nb), inter / (na + nb - inter)


def surface_voxels(fg: np.ndarray) -> np.ndarray:
    """Coordinates of foreground voxels with a six-connected background neighbor."""
    padded = np.pad(fg, 1)
    interior = np.ones_like(fg)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return np.argwhere(fg & ~interior)


def surface_distances(pred: LabelMap, truth: LabelMap) -> tuple[float, float]:
    """(average symmetric surface distance, Hausdorff distance) in voxels."""
    if pred.dims != truth.dims:
        raise ValueError(f"dims mismatch: {pred.dims} vs {truth.dims}")
    a, b = _foreground(pred), _foreground(truth)
    if not a.any() or not b.any():
        raise UndefinedMetricError("surface distances need nonempty foregrounds")
    sa = surface_voxels(a).astype(np.float64)
    sb = surface_voxels(b).astype(np.float64)
    d_ab = cKDTree(sb).query(sa)[0]
    d_ba = cKDTree(sa).query(sb)[0]
    asd = (d_ab.sum() + d_ba.sum()) / (len(d_ab) + len(d_ba))
    hd = max(d_ab.max(), d_ba.max())
    return float(asd), float(hd)


def evaluate_case(case_id: str, pred: LabelMap, truth: LabelMap) -> MetricsRecord:
    dsc, jac = dsc_jaccard(pred, truth)
    try:
        asd, hd = surface_distances(pred, truth)
    except UndefinedMetricError:
        asd = hd = None
    return MetricsRecord(case_id, dsc, jac, asd, hd)


def summarize(records: list[MetricsRecord]) -> dict[str, float]:
    """Mean metrics over cases; undefined surface values are excluded."""
    out = {
        "dsc": float(np.mean([r.dsc for r in records])),
        "jaccard": float(np.mean([r.jaccard for r in records])),
    }
    defined = [r for r in records if r.asd is not None]
    out["asd"] = float(np.mean([r.asd for r in defined])) if defined else float("nan")
    out["hd"] = float(np.mean([r.hd for r in defined])) if defined else float("nan")
    out["n_undefined"] = float(len(records) - len(defined))
    return out
