"""Non-learned predictors: SUVmax percentile thresholding and GTV passthrough.

The SUVmax method takes the hottest PET voxel inside the GTV as reference,
keeps every voxel at or above percent/100 of it, and removes voxels inside
the brain mask (the brain is FDG-avid and would otherwise dominate). The
operating percent is chosen by sweeping 1..100 on the validation cases.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, GeometryError, ValidationError
from .volgrid import Mask3D, Volume3D, grids_equal

__all__ = [
    "suvmax_of_gtv",
    "suvmax_threshold_predict",
    "SuvSweepResult",
    "suvmax_sweep",
    "gtv_baseline_predict",
    "write_sweep_csv",
]


def suvmax_of_gtv(pet: Volume3D, gtv: Mask3D) -> float:
    """Highest PET value over the GTV foreground."""
    if not grids_equal(pet.grid, gtv.grid):
        raise GeometryError("PET and GTV grids differ")
    if gtv.count < 1:
        raise DegenerateInputError("GTV is empty; SUVmax undefined")
    return float(pet.data[gtv.data.astype(bool)].max())


def suvmax_threshold_predict(pet: Volume3D, gtv: Mask3D, brain: Mask3D,
                             percent: int) -> Mask3D:
    """Voxels with PET >= (percent/100) * SUVmax, minus the brain mask."""
    if not (1 <= int(percent) <= 100):
        raise ValidationError(f"percent must be in 1..100, got {percent}")
    if brain is not None and not grids_equal(pet.grid, brain.grid):
        raise GeometryError("PET and brain grids differ")
    threshold = (int(percent) / 100.0) * suvmax_of_gtv(pet, gtv)
    fg = pet.data.astype(np.float64) >= threshold
    if brain is not None:
        fg &= ~brain.data.astype(bool)
    return Mask3D(pet.grid, fg.astype(np.uint8))


@dataclass(frozen=True)
class SuvSweepResult:
    """Mean validation Dice for every percent 1..100 and the winner."""

    entries: tuple  # 100 pairs (percent, mean_dice)
    best_percent: int

    @property
    def best_mean_dice(self) -> float:
        return dict(self.entries)[self.best_percent]


def suvmax_sweep(val_cases) -> SuvSweepResult:
    """Try every percent on the validation cases; ties go to the lowest percent."""
    if not val_cases:
        raise ValidationError("sweep needs at least one validation case")
    prepared = []
    for case in val_cases:
        if case.relapse is None:
            raise ValidationError(f"case {case.id} has no relapse ground truth")
        suvmax = suvmax_of_gtv(case.pet, case.gtv)
        outside_brain = ~case.brain.data.astype(bool) if case.brain is not None else True
        prepared.append((case.pet.data.astype(np.float64), suvmax, outside_brain,
                         case.relapse.data.astype(bool)))
    entries = []
    for percent in range(1, 101):
        dices = []
        for pet, suvmax, outside_brain, relapse in prepared:
            pred = (pet >= (percent / 100.0) * suvmax) & outside_brain
            p = int(pred.sum())
            g = int(relapse.sum())
            inter = int(np.count_nonzero(pred & relapse))
            dices.append(1.0 if p + g == 0 else 2.0 * inter / (p + g))
        entries.append((percent, float(np.mean(dices))))
    best = max(entries, key=lambda e: (e[1], -e[0]))[0]
    return SuvSweepResult(tuple(entries), best)


def gtv_baseline_predict(case) -> Mask3D:
    """The GTV contour, used directly as the prediction."""
    return case.gtv


def write_sweep_csv(path: str, result: SuvSweepResult) -> None:
    with open(path, "w") as f:
        f.write("percent,mean_dice\n")
        for percent, mean_dice in result.entries:
            f.write(f"{percent},{mean_dice!r}\n")
