"""Deterministic synthetic PET/CT cohort generator.

Stands in for the private clinical cohorts. Each case is a head-like soft
tissue ellipsoid on an air background, a tumour ellipsoid (the GTV) with a
Gaussian PET uptake bump peaking at a voxel centre inside it, a fixed
FDG-avid brain ellipsoid near the top of the volume, and a relapse
ellipsoid centered at the uptake peak (optionally offset).

The relapse radii are a fraction of the tumour radii, and the uptake
falloff is sized so the PET value on the relapse boundary is a known
fraction of the peak. With zero noise, zero offset, and zero background
uptake, thresholding at that fraction of SUVmax reproduces the relapse
mask up to voxel discretization, so the percentile sweep's optimum is
known by construction. Pretraining-task cases are generated identically
but expose no relapse mask: their training label is the GTV.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import analysis, preprocess, volgrid
from .errors import GenerationError, ValidationError
from .seeding import derived_rng
from .volgrid import Grid3D, Mask3D, Volume3D

__all__ = [
    "PhantomParams",
    "generate_case",
    "generate_cohort",
    "write_cohort",
    "load_answer_key",
    "SWEEP_CALIBRATION_OVERRIDES",
]


@dataclass(frozen=True)
class PhantomParams:
    dims: tuple = (56, 56, 48)  # (nx, ny, nz)
    spacing_mm: tuple = (2.0, 2.0, 2.0)
    seed: int = 0

    # head-like soft tissue region
    body_radii_frac: tuple = (0.42, 0.42, 0.46)  # of the physical half-extent

    # tumour ellipsoid (the GTV); center as fraction of volume extent
    tumour_center_frac: tuple = ((0.35, 0.62), (0.35, 0.62), (0.30, 0.55))
    tumour_radii_mm: tuple = (9.0, 15.0)

    # PET uptake
    uptake_peak: tuple = (4.0, 8.0)
    pet_background: float = 0.4  # uptake inside the body
    pet_noise_sd: float = 0.05

    # relapse rule: sub-ellipsoid centered at the uptake peak
    relapse_radii_frac: tuple = (0.45, 0.62)  # of the tumour radii
    relapse_boundary_fraction: float = 0.38  # PET value at the relapse boundary / peak
    relapse_offset_mm: float = 1.5  # max |offset| per axis

    # fixed brain ellipsoid, FDG avid
    brain_center_frac: tuple = (0.5, 0.5, 0.85)
    brain_radii_mm: tuple = (16.0, 16.0, 11.0)
    brain_uptake_frac: tuple = (0.75, 1.0)  # of the tumour peak
    brain_falloff: float = 0.45  # uptake sigma / brain radii

    # CT tissue values (HU) and noise
    ct_air: float = -1000.0
    ct_body: float = 40.0
    ct_tumour: float = 65.0
    ct_brain: float = 30.0
    ct_noise_sd: float = 15.0

    # cohort-level sanity: required fraction of relapse-task cases whose
    # relapse overlaps the GTV
    min_gtv_overlap_frac: float = 0.8

    def __post_init__(self):
        if not (0.0 < self.relapse_boundary_fraction < 1.0):
            raise ValidationError("relapse_boundary_fraction must be in (0, 1)")
        if min(self.dims) < 8:
            raise ValidationError("phantom dims too small to hold the scene")


# Overrides that make the analytic answer key exact (used by the sweep
# recovery experiments): no noise, no background uptake, no relapse offset.
SWEEP_CALIBRATION_OVERRIDES = dict(pet_noise_sd=0.0, ct_noise_sd=0.0,
                                   pet_background=0.0, relapse_offset_mm=0.0)


def _axis_coords_mm(grid: Grid3D):
    nx, ny, nz = grid.dims
    sx, sy, sz = grid.spacing
    ox, oy, oz = grid.origin
    x = ox + sx * np.arange(nx)
    y = oy + sy * np.arange(ny)
    z = oz + sz * np.arange(nz)
    return x, y, z


def _ellipsoid(grid: Grid3D, center_mm, radii_mm) -> np.ndarray:
    """Boolean (nz, ny, nx) array of voxel centres inside the ellipsoid."""
    x, y, z = _axis_coords_mm(grid)
    q = ((x[None, None, :] - center_mm[0]) / radii_mm[0]) ** 2 \
        + ((y[None, :, None] - center_mm[1]) / radii_mm[1]) ** 2 \
        + ((z[:, None, None] - center_mm[2]) / radii_mm[2]) ** 2
    return q <= 1.0


def _gaussian_bump(grid: Grid3D, center_mm, sigma_mm) -> np.ndarray:
    x, y, z = _axis_coords_mm(grid)
    q = ((x[None, None, :] - center_mm[0]) / sigma_mm[0]) ** 2 \
        + ((y[None, :, None] - center_mm[1]) / sigma_mm[1]) ** 2 \
        + ((z[:, None, None] - center_mm[2]) / sigma_mm[2]) ** 2
    return np.exp(-0.5 * q)


def _snap_to_voxel_center(grid: Grid3D, point_mm):
    """Nearest voxel centre (assumes identity direction, which phantoms use)."""
    idx = np.floor(np.asarray(grid.physical_to_voxel(point_mm)) + 0.5).astype(int)
    idx = np.clip(idx, 0, np.array(grid.dims) - 1)
    return grid.voxel_to_physical(idx.astype(np.float64)), tuple(int(v) for v in idx)


def generate_case(params: PhantomParams, case_index: int, role: str = "relapse-task"):
    """One deterministic case; returns (PatientCase, key_entry).

    The key entry records the uptake peak voxel, the PET fraction at the
    relapse boundary (exact only in calibration conditions), and whether
    those conditions held.
    """
    if role not in preprocess.ROLES:
        raise ValidationError(f"unknown role {role!r}")
    rng = derived_rng(params.seed, "phantom", case_index)
    grid = Grid3D(params.dims, params.spacing_mm)
    nx, ny, nz = grid.dims
    extent = np.array([nx * grid.spacing[0], ny * grid.spacing[1], nz * grid.spacing[2]])

    # All draws happen in a fixed order so (seed, index) pins the case.
    tumour_center = np.array([rng.uniform(lo, hi) for lo, hi in params.tumour_center_frac]) * extent
    tumour_radii = rng.uniform(*params.tumour_radii_mm, size=3)
    peak_value = rng.uniform(*params.uptake_peak)
    relapse_frac = rng.uniform(*params.relapse_radii_frac)
    offset = rng.uniform(-params.relapse_offset_mm, params.relapse_offset_mm, size=3)
    brain_peak = rng.uniform(*params.brain_uptake_frac) * peak_value
    ct_noise = rng.normal(0.0, 1.0, size=(nz, ny, nx))
    pet_noise = rng.normal(0.0, 1.0, size=(nz, ny, nx))

    peak_mm, peak_voxel = _snap_to_voxel_center(grid, tumour_center)
    body = _ellipsoid(grid, extent / 2.0, params.body_radii_frac * extent)
    gtv = _ellipsoid(grid, peak_mm, tumour_radii)
    brain_center = np.array(params.brain_center_frac) * extent
    brain = _ellipsoid(grid, brain_center, np.array(params.brain_radii_mm))

    relapse_radii = relapse_frac * tumour_radii
    relapse = _ellipsoid(grid, peak_mm + offset, relapse_radii)

    if not gtv.any():
        raise GenerationError(f"case {case_index}: empty GTV (radii {tumour_radii})")
    if not relapse.any():
        raise GenerationError(f"case {case_index}: empty relapse (radii {relapse_radii})")

    # Uptake falloff sized so pet(boundary of relapse) = fraction * peak.
    sigma = relapse_radii / math.sqrt(-2.0 * math.log(params.relapse_boundary_fraction))
    pet = peak_value * _gaussian_bump(grid, peak_mm, sigma)
    pet += brain_peak * _gaussian_bump(grid, brain_center, params.brain_falloff * np.array(params.brain_radii_mm))
    pet += params.pet_background * body
    pet += params.pet_noise_sd * pet_noise

    ct = np.full((nz, ny, nx), params.ct_air)
    ct[body] = params.ct_body
    ct[brain] = params.ct_brain
    ct[gtv] = params.ct_tumour
    ct += params.ct_noise_sd * ct_noise

    prefix = "rel" if role == "relapse-task" else "pre"
    case = preprocess.PatientCase(
        id=f"{prefix}_{case_index:03d}",
        ct=Volume3D(grid, ct.astype(np.float32)),
        pet=Volume3D(grid, pet.astype(np.float32)),
        gtv=Mask3D(grid, gtv.astype(np.uint8)),
        relapse=Mask3D(grid, relapse.astype(np.uint8)) if role == "relapse-task" else None,
        brain=Mask3D(grid, brain.astype(np.uint8)),
        meta={"role": role},
    )
    exact = (params.pet_noise_sd == 0.0 and params.pet_background == 0.0
             and params.relapse_offset_mm == 0.0)
    key_entry = {
        "id": case.id,
        "role": role,
        "peak_voxel": list(peak_voxel),
        "uptake_peak": float(peak_value),
        "relapse_boundary_fraction": params.relapse_boundary_fraction,
        "boundary_fraction_exact": exact,
    }
    if case.relapse is not None:
        key_entry["points_of_origin"] = [
            {"voxel": list(po.voxel), "position_mm": list(po.position_mm), "component": po.label}
            for po in analysis.points_of_origin(case.relapse)
        ]
    return case, key_entry


def generate_cohort(params: PhantomParams, n_relapse: int, n_pretrain: int = 0):
    """n_relapse relapse-task cases then n_pretrain pretraining-task cases,
    plus the analytic answer key. Case indices are global, so cohorts of
    different sizes share their common prefix."""
    if n_relapse < 1:
        raise ValidationError("need at least one relapse-task case")
    cases, key_entries = [], []
    for i in range(n_relapse + n_pretrain):
        role = "relapse-task" if i < n_relapse else "pretrain-task"
        case, entry = generate_case(params, i, role)
        cases.append(case)
        key_entries.append(entry)
    overlapping = sum(
        1 for c in cases[:n_relapse]
        if np.count_nonzero(np.logical_and(c.relapse.data, c.gtv.data)) > 0)
    if overlapping < params.min_gtv_overlap_frac * n_relapse:
        raise GenerationError(
            f"only {overlapping}/{n_relapse} relapse masks overlap their GTV "
            f"(required fraction {params.min_gtv_overlap_frac})")
    key = {"params": asdict(params), "cases": key_entries}
    return cases, key


def write_cohort(out_dir: str, cases, key) -> str:
    """VF32 files, cohort manifest, and answer key; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for case in cases:
        files = {}
        for name, obj, kind in (("ct", case.ct, "ct"), ("pet", case.pet, "pet"),
                                ("gtv", case.gtv, "mask"), ("relapse", case.relapse, "mask"),
                                ("brain", case.brain, "mask")):
            if obj is None:
                files[name] = None
                continue
            rel = f"{case.id}_{name}.vf32"
            volgrid.save_vf32(os.path.join(out_dir, rel), obj, kind)
            files[name] = rel
        entries.append({"id": case.id, "role": case.meta.get("role", "relapse-task"), **files})
    manifest_path = os.path.join(out_dir, "cohort.json")
    preprocess.write_manifest(manifest_path, entries)
    with open(os.path.join(out_dir, "answer_key.json"), "w") as f:
        json.dump(key, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest_path


def load_answer_key(out_dir: str) -> dict:
    with open(os.path.join(out_dir, "answer_key.json")) as f:
        return json.load(f)


def sweep_calibration_params(base: PhantomParams, boundary_fraction: float) -> PhantomParams:
    """Params whose analytic sweep optimum is exactly ``boundary_fraction``."""
    return replace(base, relapse_boundary_fraction=boundary_fraction,
                   **SWEEP_CALIBRATION_OVERRIDES)
