"""Overlap and surface-distance evaluation.

Dice, Jaccard, Hausdorff distance (HD), and Average Symmetric Surface
Distance (ASSD), per class and macro-averaged.

Conventions (documented so numbers are comparable across tools):
surfaces are voxel centers of 6-connectivity boundary voxels, with faces on
the array boundary counting as exposed; HD is the exact maximum (an HD95
column is available but clearly optional); a class empty in both volumes is
*absent* from the report rather than scored 0, while a class empty in
exactly one of the two gets dice = jaccard = 0 and absent surface metrics.

Two independent distance routes are kept: the production path runs on a
Euclidean distance transform, and ``surface_distances_bruteforce`` does the
O(|S_p|*|S_g|) direct search. They must agree to 1e-9 and the test suite
holds them to that.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptySurface, ShapeMismatch
from .volume import CLASS_NAMES, FOREGROUND_CLASSES, Volume3


def _require_same_grid(pred: Volume3, gt: Volume3) -> None:
    if pred.dims != gt.dims:
        raise ShapeMismatch(f"pred dims {pred.dims} != gt dims {gt.dims}")
    if not np.allclose(pred.spacing, gt.spacing, rtol=0.0, atol=1e-9):
        raise ShapeMismatch(f"pred spacing {pred.spacing} != gt spacing {gt.spacing}")


def overlap(pred: Volume3, gt: Volume3, c: int) -> tuple[float | None, float | None]:
    """Dice and Jaccard for class c; (None, None) when empty in both."""
    _require_same_grid(pred, gt)
    p = pred.data == c
    g = gt.data == c
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return None, None
    if np_ == 0 or ng == 0:
        return 0.0, 0.0
    inter = int((p & g).sum())
    dice = 2.0 * inter / (np_ + ng)
    jaccard = inter / (np_ + ng - inter)
    return dice, jaccard


def _surface_mask(labels: Volume3, c: int) -> np.ndarray:
    """Voxels of class c with at least one 6-neighbor (or array face) not c."""
    m = labels.data == c
    interior = np.ones_like(m)
    interior[1:] &= m[:-1]
    interior[:-1] &= m[1:]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    interior[:, :, 1:] &= m[:, :, :-1]
    interior[:, :, :-1] &= m[:, :, 1:]
    # boundary slabs keep interior=True only if the shifted test above kept
    # them, but a face on the array edge is exposed by definition:
    interior[0] = False
    interior[-1] = False
    interior[:, 0] = False
    interior[:, -1] = False
    interior[:, :, 0] = False
    interior[:, :, -1] = False
    return m & ~interior


def surface_voxels(labels: Volume3, c: int) -> np.ndarray:
    """Indices (k, 3) of the 6-connectivity surface voxels of class c."""
    return np.argwhere(_surface_mask(labels, c))


def surface_distances(
    pred: Volume3, gt: Volume3, c: int, spacing: tuple[float, float, float] | None = None
) -> tuple[float, float]:
    """HD and ASSD (mm) between the class-c surfaces, distance-transform route."""
    _require_same_grid(pred, gt)
    sp = tuple(float(s) for s in (spacing if spacing is not None else pred.spacing))
    sp_mask = _surface_mask(pred, c)
    sg_mask = _surface_mask(gt, c)
    n_p, n_g = int(sp_mask.sum()), int(sg_mask.sum())
    if n_p == 0 or n_g == 0:
        raise EmptySurface(f"class {c} has an empty surface (pred {n_p}, gt {n_g} voxels)")
    dt_g = ndimage.distance_transform_edt(~sg_mask, sampling=sp)
    dt_p = ndimage.distance_transform_edt(~sp_mask, sampling=sp)
    d_pg = dt_g[sp_mask]
    d_gp = dt_p[sg_mask]
    hd = max(float(d_pg.max()), float(d_gp.max()))
    assd = (float(d_pg.sum()) + float(d_gp.sum())) / (n_p + n_g)
    return hd, assd


def surface_distances_bruteforce(
    pred: Volume3, gt: Volume3, c: int, spacing: tuple[float, float, float] | None = None
) -> tuple[float, float]:
    """Same contract as surface_distances via direct pairwise search."""
    _require_same_grid(pred, gt)
    sp = np.asarray(spacing if spacing is not None else pred.spacing, dtype=np.float64)
    a = surface_voxels(pred, c) * sp
    b = surface_voxels(gt, c) * sp
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptySurface(f"class {c} has an empty surface")
    dmat = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    d_pg = dmat.min(axis=1)
    d_gp = dmat.min(axis=0)
    hd = max(float(d_pg.max()), float(d_gp.max()))
    assd = (float(d_pg.sum()) + float(d_gp.sum())) / (a.shape[0] + b.shape[0])
    return hd, assd


def _hd95(pred: Volume3, gt: Volume3, c: int, sp: tuple) -> float:
    """Optional robust variant: max of the directed 95th percentiles."""
    sp_mask = _surface_mask(pred, c)
    sg_mask = _surface_mask(gt, c)
    dt_g = ndimage.distance_transform_edt(~sg_mask, sampling=sp)
    dt_p = ndimage.distance_transform_edt(~sp_mask, sampling=sp)
    return max(
        float(np.percentile(dt_g[sp_mask], 95.0)),
        float(np.percentile(dt_p[sg_mask], 95.0)),
    )


@dataclass(frozen=True)
class ClassMetrics:
    dice: float | None
    jaccard: float | None
    hd_mm: float | None
    assd_mm: float | None
    gt_voxels: int
    pred_voxels: int
    hd95_mm: float | None = None


@dataclass(frozen=True)
class MetricsReport:
    """Per-class metrics plus macro averages over GT-present classes."""

    case_id: str
    spacing: tuple[float, float, float]
    per_class: dict[int, ClassMetrics]
    macro: dict[str, float | None] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "spacing": list(self.spacing),
            "classes": {
                CLASS_NAMES[c]: {
                    "dice": m.dice,
                    "jaccard": m.jaccard,
                    "hd_mm": m.hd_mm,
                    "assd_mm": m.assd_mm,
                    "hd95_mm": m.hd95_mm,
                    "gt_voxels": m.gt_voxels,
                    "pred_voxels": m.pred_voxels,
                }
                for c, m in sorted(self.per_class.items())
            },
            "macro": dict(self.macro),
        }


def evaluate_case(
    pred: Volume3,
    gt: Volume3,
    spacing: tuple[float, float, float] | None = None,
    case_id: str = "",
    include_hd95: bool = False,
) -> MetricsReport:
    """All four metrics per foreground class plus macro averages.

    Macro averages run over classes nonempty in ground truth; metrics that
    are absent for such a class (surface distances when the prediction is
    empty) are excluded from their average rather than counted as 0.
    """
    _require_same_grid(pred, gt)
    sp = tuple(float(s) for s in (spacing if spacing is not None else pred.spacing))
    per_class: dict[int, ClassMetrics] = {}
    for c in FOREGROUND_CLASSES:
        n_p = int((pred.data == c).sum())
        n_g = int((gt.data == c).sum())
        dice, jaccard = overlap(pred, gt, c)
        hd = assd = hd95 = None
        if n_p > 0 and n_g > 0:
            hd, assd = surface_distances(pred, gt, c, sp)
            if include_hd95:
                hd95 = _hd95(pred, gt, c, sp)
        per_class[c] = ClassMetrics(dice, jaccard, hd, assd, n_g, n_p, hd95)

    macro: dict[str, float | None] = {}
    gt_present = [c for c in FOREGROUND_CLASSES if per_class[c].gt_voxels > 0]
    for key in ("dice", "jaccard", "hd_mm", "assd_mm"):
        vals = [getattr(per_class[c], key) for c in gt_present]
        vals = [v for v in vals if v is not None]
        macro[key] = float(np.mean(vals)) if vals else None
    return MetricsReport(case_id=case_id, spacing=sp, per_class=per_class, macro=macro)
