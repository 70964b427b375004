"""Per-patient normalization, cropping, and cohort partitioning.

The network input for one case is a two-channel crop centered on the GTV:
channel 0 the clipped/mapped CT, channel 1 the z-scored PET, with axis
order [channel, z, y, x]. The crop extent rule measures, over the training
and validation cases, the largest distance from the GTV centroid to any
voxel of the fused GTV-plus-relapse region, and pads it by a fraction.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import volgrid
from .errors import DegenerateInputError, ValidationError
from .seeding import derived_rng
from .volgrid import Grid3D, Mask3D, Volume3D, grids_equal

__all__ = [
    "PatientCase",
    "CohortSplit",
    "CropSpec",
    "TrainingSample",
    "CT_CLIP_HU",
    "normalize_ct",
    "normalize_pet_zscore",
    "normalize_case",
    "ingest_case",
    "gtv_centroid_voxel",
    "compute_crop_extent",
    "assemble_input",
    "make_samples",
    "split_cohort",
    "save_split",
    "load_split",
    "write_manifest",
    "read_manifest",
    "load_case",
    "load_cohort",
]

CT_CLIP_HU = 1024.0
CT_FILL_NORMALIZED = -1.0  # air, after clipping/mapping
PET_FILL = 0.0


@dataclass(frozen=True)
class PatientCase:
    """One subject: CT, PET (on the CT grid), GTV, relapse, brain mask."""

    id: str
    ct: Volume3D
    pet: Volume3D
    gtv: Mask3D
    relapse: Mask3D = None  # absent for pretraining-task cases
    brain: Mask3D = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, other in (("pet", self.pet), ("gtv", self.gtv),
                            ("relapse", self.relapse), ("brain", self.brain)):
            if other is not None and not grids_equal(self.ct.grid, other.grid):
                raise ValidationError(f"case {self.id}: {name} grid differs from ct grid")
        if self.gtv.count < 1:
            raise ValidationError(f"case {self.id}: GTV is empty")
        if self.relapse is not None and self.relapse.count < 1:
            raise ValidationError(f"case {self.id}: relapse mask present but empty")

    @property
    def grid(self) -> Grid3D:
        return self.ct.grid


def ingest_case(case_id, ct, pet, gtv, relapse=None, brain=None, meta=None) -> PatientCase:
    """Bring raw per-modality inputs onto the CT grid.

    PET is resampled with trilinear interpolation, masks with nearest
    neighbour; inputs already on the CT grid pass through unchanged.
    """
    if not grids_equal(ct.grid, pet.grid):
        pet = volgrid.resample_linear(pet, ct.grid, fill=PET_FILL)
    masks = {}
    for name, m in (("gtv", gtv), ("relapse", relapse), ("brain", brain)):
        if m is not None and not grids_equal(ct.grid, m.grid):
            m = volgrid.resample_nearest_mask(m, ct.grid)
        masks[name] = m
    if masks["brain"] is None:
        nz, ny, nx = ct.data.shape
        masks["brain"] = Mask3D(ct.grid, np.zeros((nz, ny, nx), dtype=np.uint8))
    return PatientCase(case_id, ct, pet, masks["gtv"], masks["relapse"], masks["brain"],
                       meta or {})


def normalize_ct(ct: Volume3D) -> Volume3D:
    """Clip to [-1024, 1024] HU and map linearly to [-1, 1]."""
    out = np.clip(ct.data, -CT_CLIP_HU, CT_CLIP_HU) / np.float32(CT_CLIP_HU)
    return Volume3D(ct.grid, out)


def normalize_pet_zscore(pet: Volume3D) -> Volume3D:
    """Patient-level z-score over every voxel (population standard deviation)."""
    data = pet.data.astype(np.float64)
    mu = data.mean()
    sd = data.std()
    if sd == 0.0:
        raise DegenerateInputError("PET volume has zero variance; z-score undefined")
    return Volume3D(pet.grid, ((data - mu) / sd).astype(np.float32))


def normalize_case(case: PatientCase) -> PatientCase:
    """Normalized copy of a case (CT clipped/mapped, PET z-scored)."""
    return PatientCase(case.id, normalize_ct(case.ct), normalize_pet_zscore(case.pet),
                       case.gtv, case.relapse, case.brain, dict(case.meta))


def gtv_centroid_voxel(gtv: Mask3D) -> tuple:
    """Foreground voxel-index mean, rounded half-up, as (i, j, k)."""
    if gtv.count < 1:
        raise ValidationError("GTV mask is empty")
    kk, jj, ii = np.nonzero(gtv.data)
    return (int(np.floor(ii.mean() + 0.5)),
            int(np.floor(jj.mean() + 0.5)),
            int(np.floor(kk.mean() + 0.5)))


@dataclass(frozen=True)
class CropSpec:
    """Crop box extents in voxels (cx, cy, cz) and the padding that sized them."""

    dims: tuple
    padding_fraction: float = 0.15

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValidationError(f"crop dims must be three positive ints, got {self.dims}")
        object.__setattr__(self, "dims", dims)

    def validate_pooling(self, pool_factor: int) -> None:
        for d in self.dims:
            if d % pool_factor != 0:
                raise ValidationError(
                    f"crop dims {self.dims} not divisible by pooling factor {pool_factor}")


# The full-size clinical crop box; not recomputable without the clinical
# cohort, so it is recorded as the default.
DEFAULT_CLINICAL_CROP = CropSpec((160, 224, 128))


def compute_crop_extent(cases, padding_fraction: float = 0.15, levels: int = 3) -> CropSpec:
    """Crop extents covering the fused GTV+relapse of every case.

    Radius = the largest distance (mm) from a case's GTV centroid to any
    foreground voxel of its GTV union relapse. Half-extent per axis is
    radius*(1+padding); dims are rounded up to the pooling multiple.
    """
    if not cases:
        raise ValidationError("need at least one case to size the crop")
    radius = 0.0
    spacing = np.zeros(3)
    for case in cases:
        spacing = np.maximum(spacing, np.array(case.grid.spacing))
        centroid = gtv_centroid_voxel(case.gtv)
        c_mm = case.grid.voxel_to_physical(np.array(centroid, dtype=np.float64))
        fused = case.gtv.data.astype(bool)
        if case.relapse is not None:
            fused = fused | case.relapse.data.astype(bool)
        kk, jj, ii = np.nonzero(fused)
        pts = case.grid.voxel_to_physical(np.stack([ii, jj, kk], axis=-1).astype(np.float64))
        radius = max(radius, float(np.max(np.linalg.norm(pts - c_mm, axis=1))))
    half = radius * (1.0 + padding_fraction)
    align = 2 ** (levels - 1)
    dims = []
    for s in spacing:
        n = int(np.ceil(2.0 * half / s))
        n = max(n, 1)
        dims.append(((n + align - 1) // align) * align)
    return CropSpec(tuple(dims), padding_fraction)


def assemble_input(case: PatientCase, spec: CropSpec, require_label: bool = True,
                   label_mask: Mask3D = None):
    """Two-channel network input and label for one normalized case.

    Returns (input [2, cz, cy, cx] float32, label [1, cz, cy, cx] float32).
    The crop centers on the GTV centroid voxel. ``label_mask`` defaults to
    the relapse mask; it is None in the returned tuple when the case has no
    label and ``require_label`` is False.
    """
    center = gtv_centroid_voxel(case.gtv)
    ct_crop = volgrid.crop_centered(case.ct, center, spec.dims, fill=CT_FILL_NORMALIZED)
    pet_crop = volgrid.crop_centered(case.pet, center, spec.dims, fill=PET_FILL)
    x = np.stack([ct_crop.data, pet_crop.data]).astype(np.float32)
    target = label_mask if label_mask is not None else case.relapse
    if target is None:
        if require_label:
            raise ValidationError(f"case {case.id} has no label mask")
        return x, None
    lab_crop = volgrid.crop_centered(target, center, spec.dims, fill=0)
    y = lab_crop.data.astype(np.float32)[None]
    return x, y


@dataclass(frozen=True)
class TrainingSample:
    case_id: str
    input: np.ndarray  # [2, cz, cy, cx] float32
    label: np.ndarray  # [1, cz, cy, cx] float32 in {0, 1}


def make_samples(cases, spec: CropSpec, target: str = "relapse"):
    """Assemble TrainingSamples; ``target`` picks relapse or GTV labels."""
    if target not in ("relapse", "gtv"):
        raise ValidationError(f"target must be 'relapse' or 'gtv', got {target!r}")
    samples = []
    for case in cases:
        label_mask = case.gtv if target == "gtv" else None
        x, y = assemble_input(case, spec, label_mask=label_mask)
        samples.append(TrainingSample(case.id, x, y))
    return samples


# ---------------------------------------------------------------------------
# Cohort partition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CohortSplit:
    train: tuple
    val: tuple
    test: tuple
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "val", tuple(self.val))
        object.__setattr__(self, "test", tuple(self.test))
        ids = self.train + self.val + self.test
        if len(set(ids)) != len(ids):
            raise ValidationError("split lists overlap")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_cohort(ids, seed: int) -> CohortSplit:
    """Deterministic 6:2:2 partition.

    Validation and test each take round(0.2 n) cases, training the
    remainder; this reproduces a 23/7/7 partition of 37 cases.
    """
    ids = list(ids)
    n = len(ids)
    if n < 3:
        raise ValidationError(f"need at least 3 cases to split, got {n}")
    if len(set(ids)) != n:
        raise ValidationError("duplicate case ids")
    order = derived_rng(seed, "split").permutation(n)
    shuffled = [ids[i] for i in order]
    r = _round_half_up(0.2 * n)
    n_train = n - 2 * r
    if n_train < 1 or r < 1:
        raise ValidationError(f"cohort of {n} cannot be split 6:2:2 with non-empty groups")
    return CohortSplit(shuffled[:n_train], shuffled[n_train:n_train + r],
                       shuffled[n_train + r:], seed)


def save_split(path: str, split: CohortSplit) -> None:
    with open(path, "w") as f:
        json.dump({"seed": split.seed, "train": list(split.train),
                   "val": list(split.val), "test": list(split.test)}, f, indent=1)
        f.write("\n")


def load_split(path: str) -> CohortSplit:
    with open(path) as f:
        d = json.load(f)
    return CohortSplit(d["train"], d["val"], d["test"], d["seed"])


# ---------------------------------------------------------------------------
# Cohort manifest: list of case entries with VF32 paths and a task role.
# ---------------------------------------------------------------------------

ROLES = ("relapse-task", "pretrain-task")


def write_manifest(path: str, entries) -> None:
    for e in entries:
        if e.get("role") not in ROLES:
            raise ValidationError(f"case {e.get('id')}: role must be one of {ROLES}")
    with open(path, "w") as f:
        json.dump({"cases": list(entries)}, f, indent=1)
        f.write("\n")


def read_manifest(path: str):
    if not os.path.exists(path):
        raise IOError(f"manifest not found: {path}")
    with open(path) as f:
        data = json.load(f)
    return data["cases"]


def load_case(entry, base_dir: str) -> PatientCase:
    """Load one manifest entry's VF32 files and ingest onto the CT grid."""
    def p(rel):
        return os.path.join(base_dir, rel)

    ct = volgrid.load_vf32(p(entry["ct"]))
    pet = volgrid.load_vf32(p(entry["pet"]))
    gtv = volgrid.load_vf32(p(entry["gtv"]))
    relapse = volgrid.load_vf32(p(entry["relapse"])) if entry.get("relapse") else None
    brain = volgrid.load_vf32(p(entry["brain"])) if entry.get("brain") else None
    meta = {"role": entry["role"], **entry.get("meta", {})}
    return ingest_case(entry["id"], ct, pet, gtv, relapse, brain, meta)


def load_cohort(manifest_path: str):
    """All cases from a manifest, in manifest order."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    return [load_case(e, base) for e in read_manifest(manifest_path)]
