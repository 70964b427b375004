"""Overlap metrics, connected components, points of origin, and the
statistical comparisons behind the method-versus-method report.

The point of origin of a relapse component approximates its centre of
volume: the component is repeatedly eroded with a full 3x3x3 structuring
element until the next erosion would leave nothing, and the PO is the
rounded centroid of the surviving voxels (falling back to the nearest
survivor if the rounded centroid is not itself foreground).
"""

import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import ndimage
from scipy.special import betainc

from .errors import DegenerateInputError, GeometryError, ValidationError
from .volgrid import Grid3D, Mask3D, grids_equal, voxel_volume_cc

__all__ = [
    "dice",
    "precision",
    "recall",
    "LabeledComponents",
    "connected_components",
    "PointOfOrigin",
    "point_of_origin",
    "points_of_origin",
    "po_inclusion",
    "mask_volume_cc",
    "median_iqr",
    "paired_t_test",
    "fisher_exact_2x2",
    "fisher_table_probabilities",
    "MethodReport",
    "Comparison",
    "evaluate_method",
    "build_report",
    "write_report_json",
    "write_report_text",
]


# ---------------------------------------------------------------------------
# Overlap metrics. Empty-mask conventions: both empty -> perfect agreement;
# empty prediction against a non-empty truth scores 0; any prediction
# against an empty truth has recall 1 (nothing to find).
# ---------------------------------------------------------------------------

def _counts(pred: Mask3D, gt: Mask3D):
    if not grids_equal(pred.grid, gt.grid):
        raise GeometryError("prediction and ground-truth grids differ")
    p = pred.count
    g = gt.count
    inter = int(np.count_nonzero(np.logical_and(pred.data, gt.data)))
    return p, g, inter


def dice(pred: Mask3D, gt: Mask3D) -> float:
    p, g, inter = _counts(pred, gt)
    if p + g == 0:
        return 1.0
    return 2.0 * inter / (p + g)


def precision(pred: Mask3D, gt: Mask3D) -> float:
    p, g, inter = _counts(pred, gt)
    if p == 0:
        return 1.0 if g == 0 else 0.0
    return inter / p


def recall(pred: Mask3D, gt: Mask3D) -> float:
    p, g, inter = _counts(pred, gt)
    if g == 0:
        return 1.0
    return inter / g


# ---------------------------------------------------------------------------
# Connected components and points of origin
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledComponents:
    """Integer label per voxel (0 = background), labels 1..count."""

    labels: np.ndarray  # (nz, ny, nx) int32
    count: int
    connectivity: int

    def component_mask(self, label: int) -> np.ndarray:
        if not (1 <= label <= self.count):
            raise ValidationError(f"label {label} out of range 1..{self.count}")
        return self.labels == label

    def component_voxels(self, label: int) -> np.ndarray:
        """Voxel indices of one component as an (n, 3) array in (i, j, k) order."""
        kk, jj, ii = np.nonzero(self.component_mask(label))
        return np.stack([ii, jj, kk], axis=-1)


def connected_components(mask: Mask3D, connectivity: int = 26) -> LabeledComponents:
    """Label foreground under 26- (default) or 6-connectivity."""
    if connectivity == 26:
        structure = np.ones((3, 3, 3), dtype=bool)
    elif connectivity == 6:
        structure = ndimage.generate_binary_structure(3, 1)
    else:
        raise ValidationError(f"connectivity must be 6 or 26, got {connectivity}")
    labels, count = ndimage.label(mask.data, structure=structure)
    return LabeledComponents(labels.astype(np.int32), int(count), connectivity)


def _erode_full_3x3x3(fg: np.ndarray) -> np.ndarray:
    """Binary erosion with the full 3x3x3 structuring element.

    A voxel survives iff all 27 voxels of its neighbourhood are foreground;
    outside the array counts as background.
    """
    padded = np.pad(fg, 1)
    out = padded[1:-1, 1:-1, 1:-1].copy()
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dz == dy == dx == 0:
                    continue
                out &= padded[1 + dz:padded.shape[0] - 1 + dz,
                              1 + dy:padded.shape[1] - 1 + dy,
                              1 + dx:padded.shape[2] - 1 + dx]
    return out


@dataclass(frozen=True)
class PointOfOrigin:
    voxel: tuple  # (i, j, k)
    label: int
    position_mm: tuple


def point_of_origin(component_fg: np.ndarray, grid: Grid3D, label: int = 1) -> PointOfOrigin:
    """Erode a single component until the next erosion would be empty, then
    take the rounded centroid of the survivors (nearest survivor when the
    centroid rounds off the mask, lowest linear index on ties)."""
    fg = np.asarray(component_fg, dtype=bool)
    if not fg.any():
        raise DegenerateInputError("component is empty")
    survivors = fg
    while True:
        eroded = _erode_full_3x3x3(survivors)
        if not eroded.any():
            break
        survivors = eroded
    kk, jj, ii = np.nonzero(survivors)
    centroid = np.array([ii.mean(), jj.mean(), kk.mean()])
    vox = tuple(int(np.floor(c + 0.5)) for c in centroid)
    i, j, k = vox
    if not (0 <= k < fg.shape[0] and 0 <= j < fg.shape[1] and 0 <= i < fg.shape[2]) \
            or not survivors[k, j, i]:
        pts = np.stack([ii, jj, kk], axis=-1).astype(np.float64)
        d2 = ((pts - centroid) ** 2).sum(axis=1)
        nx, ny = fg.shape[2], fg.shape[1]
        linear = pts[:, 0] + nx * (pts[:, 1] + ny * pts[:, 2])
        best = np.lexsort((linear, d2))[0]
        vox = tuple(int(v) for v in pts[best])
    pos = grid.voxel_to_physical(np.array(vox, dtype=np.float64))
    return PointOfOrigin(vox, label, tuple(float(x) for x in pos))


def points_of_origin(mask: Mask3D, connectivity: int = 26):
    """One PO per connected component, ordered by component label."""
    comps = connected_components(mask, connectivity)
    return [point_of_origin(comps.component_mask(lab), mask.grid, lab)
            for lab in range(1, comps.count + 1)]


def po_inclusion(pred: Mask3D, pos) -> tuple:
    """(number of POs inside the prediction, total POs)."""
    included = 0
    for po in pos:
        i, j, k = po.voxel
        if pred.data[k, j, i]:
            included += 1
    return included, len(pos)


def mask_volume_cc(mask: Mask3D) -> float:
    return mask.count * voxel_volume_cc(mask.grid)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def median_iqr(values) -> tuple:
    """(median, q1, q3) with linear-interpolation quantiles at q*(n-1)."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("median_iqr of an empty sequence")
    q1, med, q3 = np.quantile(arr, [0.25, 0.5, 0.75], method="linear")
    return float(med), float(q1), float(q3)


def _student_t_two_sided_p(t: float, df: int) -> float:
    # P(|T| >= t) via the regularized incomplete beta function.
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(a, b) -> tuple:
    """Two-sided paired t-test; returns (t, p)."""
    a = np.asarray(list(a), dtype=np.float64)
    b = np.asarray(list(b), dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("paired_t_test needs two equal-length 1D sequences")
    n = a.size
    if n < 2:
        raise ValidationError("paired_t_test needs n >= 2")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return float(t), _student_t_two_sided_p(abs(t), n - 1)


def fisher_table_probabilities(table):
    """Exact hypergeometric probabilities of every table sharing the margins.

    Returns (a_values, probabilities): the possible top-left cells and the
    probability of each completed table, as floats summing to 1.
    """
    (a, b), (c, d) = table
    for v in (a, b, c, d):
        if int(v) != v or v < 0:
            raise ValidationError("fisher_exact_2x2 needs non-negative integer cells")
    a, b, c, d = int(a), int(b), int(c), int(d)
    r1, c1, n = a + b, a + c, a + b + c + d
    lo = max(0, c1 - (n - r1))
    hi = min(r1, c1)
    a_values = list(range(lo, hi + 1))
    denom = math.comb(n, c1)
    probs = [Fraction(math.comb(r1, x) * math.comb(n - r1, c1 - x), denom) for x in a_values]
    return a_values, [float(p) for p in probs]


def fisher_exact_2x2(table) -> float:
    """Two-sided Fisher exact p: total probability of all same-margin tables
    no more probable than the observed one. Exact integer arithmetic, so no
    tolerance slack is needed in the comparison."""
    (a, b), (c, d) = (tuple(int(v) for v in row) for row in table)
    r1, c1, n = a + b, a + c, a + b + c + d
    if n == 0:
        return 1.0
    lo = max(0, c1 - (n - r1))
    hi = min(r1, c1)
    # Integer weights share the common denominator comb(n, c1); comparing
    # weights compares probabilities exactly.
    weights = {x: math.comb(r1, x) * math.comb(n - r1, c1 - x) for x in range(lo, hi + 1)}
    observed = weights[a]
    p = Fraction(sum(w for w in weights.values() if w <= observed), math.comb(n, c1))
    return float(p)


# ---------------------------------------------------------------------------
# Method reports (the comparison-table artifact)
# ---------------------------------------------------------------------------

@dataclass
class MethodReport:
    method: str
    case_ids: list
    dice: list
    precision: list
    recall: list
    volumes_cc: list
    po_included: int
    po_total: int

    def summary(self) -> dict:
        d_med, d_q1, d_q3 = median_iqr(self.dice)
        v_med, v_q1, v_q3 = median_iqr(self.volumes_cc)
        return {
            "method": self.method,
            "n_cases": len(self.case_ids),
            "dice_median": d_med, "dice_q1": d_q1, "dice_q3": d_q3,
            "dice_mean": float(np.mean(self.dice)),
            "vol_cc_median": v_med, "vol_cc_q1": v_q1, "vol_cc_q3": v_q3,
            "po_included": self.po_included, "po_total": self.po_total,
        }


@dataclass(frozen=True)
class Comparison:
    comparison: str
    statistic: float
    p: float


def evaluate_method(name: str, predictions, cases) -> MethodReport:
    """Per-case metrics of one method's predictions against the relapse truth."""
    if len(predictions) != len(cases):
        raise ValidationError("one prediction per case required")
    dices, precs, recs, vols = [], [], [], []
    included = total = 0
    for pred, case in zip(predictions, cases):
        if case.relapse is None:
            raise ValidationError(f"case {case.id} has no relapse ground truth")
        dices.append(dice(pred, case.relapse))
        precs.append(precision(pred, case.relapse))
        recs.append(recall(pred, case.relapse))
        vols.append(mask_volume_cc(pred))
        inc, tot = po_inclusion(pred, points_of_origin(case.relapse))
        included += inc
        total += tot
    return MethodReport(name, [c.id for c in cases], dices, precs, recs, vols, included, total)


def build_report(method_predictions: dict, cases, best_cnn: str = None):
    """Evaluate every method and run the method comparisons.

    ``method_predictions`` maps method name -> list of Mask3D (one per
    case, same order as ``cases``). ``best_cnn`` names the CNN variant
    selected on validation data; it anchors the baseline comparisons.
    Returns (reports, comparisons).
    """
    reports = {name: evaluate_method(name, preds, cases)
               for name, preds in method_predictions.items()}
    comparisons = []

    def add_t(name, x, y):
        if len(x) < 2:
            return  # a paired test needs at least two cases
        t, p = paired_t_test(x, y)
        comparisons.append(Comparison(name, t, p))

    if "ai_random" in reports and "ai_finetune" in reports:
        add_t("ai_random_vs_ai_finetune_dice_paired_t",
              reports["ai_random"].dice, reports["ai_finetune"].dice)
    if best_cnn is not None and best_cnn in reports:
        best = reports[best_cnn]
        for base in ("suvmax", "gtv"):
            if base not in reports:
                continue
            other = reports[base]
            add_t(f"{best_cnn}_vs_{base}_dice_paired_t", best.dice, other.dice)
            add_t(f"{best_cnn}_vs_{base}_volume_paired_t", best.volumes_cc, other.volumes_cc)
            table = [[best.po_included, best.po_total - best.po_included],
                     [other.po_included, other.po_total - other.po_included]]
            comparisons.append(Comparison(f"{best_cnn}_vs_{base}_po_fisher_exact",
                                          float(best.po_included), fisher_exact_2x2(table)))
    return list(reports.values()), comparisons


def write_report_json(path: str, reports, comparisons, extra: dict = None) -> None:
    payload = {
        "methods": [r.summary() for r in reports],
        "comparisons": [{"comparison": c.comparison, "statistic": c.statistic, "p": c.p}
                        for c in comparisons],
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


def write_report_text(path: str, reports, comparisons) -> None:
    """Human-readable comparison table."""
    lines = []
    header = (f"{'method':<12} {'dice med (IQR)':>24} {'vol cc med (IQR)':>26} "
              f"{'PO':>7} {'dice mean':>10}")
    lines.append(header)
    lines.append("-" * len(header))
    for r in reports:
        s = r.summary()
        lines.append(
            f"{s['method']:<12} "
            f"{s['dice_median']:>8.3f} ({s['dice_q1']:.3f}, {s['dice_q3']:.3f})"
            f"{s['vol_cc_median']:>12.2f} ({s['vol_cc_q1']:.2f}, {s['vol_cc_q3']:.2f})"
            f"{s['po_included']:>4d}/{s['po_total']:<3d}"
            f"{s['dice_mean']:>9.3f}")
    if comparisons:
        lines.append("")
        lines.append(f"{'comparison':<42} {'statistic':>12} {'p':>10}")
        lines.append("-" * 66)
        for c in comparisons:
            lines.append(f"{c.comparison:<42} {c.statistic:>12.4f} {c.p:>10.4g}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
