import dataclasses

import numpy as np
import pytest

from lrrseg import analysis, baselines, phantom, preprocess
from lrrseg.errors import DegenerateInputError, ValidationError
from lrrseg.volgrid import Grid3D, Mask3D, Volume3D


def make_case(pet_values, gtv_voxels, brain_voxels=(), relapse_voxels=None, spacing=(1, 1, 1)):
    pet_values = np.asarray(pet_values, dtype=np.float32)
    nz, ny, nx = pet_values.shape
    g = Grid3D((nx, ny, nz), spacing)

    def mask_from(voxels):
        m = np.zeros((nz, ny, nx), dtype=np.uint8)
        for i, j, k in voxels:
            m[k, j, i] = 1
        return Mask3D(g, m)

    ct = Volume3D(g, np.zeros((nz, ny, nx), dtype=np.float32))
    return preprocess.PatientCase(
        "t", ct, Volume3D(g, pet_values), mask_from(gtv_voxels),
        mask_from(relapse_voxels) if relapse_voxels else None, mask_from(brain_voxels))


class TestSuvmax:
    def test_constant_pet_in_gtv(self):
        pet = np.full((3, 3, 3), 2.5, dtype=np.float32)
        case = make_case(pet, [(0, 0, 0), (1, 1, 1)])
        assert baselines.suvmax_of_gtv(case.pet, case.gtv) == 2.5

    def test_single_voxel_gtv(self):
        rng = np.random.default_rng(0)
        pet = rng.uniform(0, 10, size=(4, 4, 4)).astype(np.float32)
        case = make_case(pet, [(2, 1, 3)])
        assert baselines.suvmax_of_gtv(case.pet, case.gtv) == pet[3, 1, 2]

    def test_masked_max_oracle(self):
        rng = np.random.default_rng(1)
        pet = rng.uniform(0, 10, size=(6, 6, 6)).astype(np.float32)
        voxels = [(int(i), int(j), int(k)) for i, j, k in rng.integers(0, 6, size=(10, 3))]
        case = make_case(pet, voxels)
        expected = max(pet[k, j, i] for i, j, k in voxels)
        assert baselines.suvmax_of_gtv(case.pet, case.gtv) == expected

    def test_empty_gtv_rejected(self):
        g = Grid3D((2, 2, 2), (1, 1, 1))
        pet = Volume3D(g, np.ones((2, 2, 2), dtype=np.float32))
        with pytest.raises(DegenerateInputError):
            baselines.suvmax_of_gtv(pet, Mask3D(g, np.zeros((2, 2, 2), dtype=np.uint8)))


class TestThresholdPredict:
    def test_percent_100_keeps_only_argmax(self):
        pet = np.zeros((4, 4, 4), dtype=np.float32)
        pet[1, 1, 1] = 5.0
        pet[2, 2, 2] = 5.0
        pet[0, 0, 0] = 4.9
        case = make_case(pet, [(1, 1, 1)])
        pred = baselines.suvmax_threshold_predict(case.pet, case.gtv, case.brain, 100)
        assert pred.count == 2
        assert pred.data[1, 1, 1] == 1 and pred.data[2, 2, 2] == 1

    def test_brain_exclusion_can_empty_the_mask(self):
        pet = np.zeros((3, 3, 3), dtype=np.float32)
        pet[1, 1, 1] = 7.0
        case = make_case(pet, [(1, 1, 1)], brain_voxels=[(1, 1, 1)])
        pred = baselines.suvmax_threshold_predict(case.pet, case.gtv, case.brain, 100)
        assert pred.count == 0

    def test_gaussian_bump_brute_force_at_38(self):
        params = phantom.sweep_calibration_params(
            phantom.PhantomParams(dims=(30, 30, 26), seed=9), 0.38)
        case, _ = phantom.generate_case(params, 0)
        suvmax = baselines.suvmax_of_gtv(case.pet, case.gtv)
        expected = (case.pet.data.astype(np.float64) >= 0.38 * suvmax) \
            & ~case.brain.data.astype(bool)
        pred = baselines.suvmax_threshold_predict(case.pet, case.gtv, case.brain, 38)
        assert np.array_equal(pred.data.astype(bool), expected)

    def test_monotone_in_percent(self):
        rng = np.random.default_rng(2)
        pet = rng.uniform(0, 8, size=(6, 6, 6)).astype(np.float32)
        case = make_case(pet, [(3, 3, 3)], brain_voxels=[(0, 0, 0), (1, 0, 0)])
        prev = None
        for percent in range(1, 101, 7):
            cur = baselines.suvmax_threshold_predict(case.pet, case.gtv, case.brain, percent)
            if prev is not None:
                assert np.all(prev.data >= cur.data)  # higher percent -> subset
            prev = cur

    def test_percent_range_validated(self):
        case = make_case(np.ones((2, 2, 2), dtype=np.float32), [(0, 0, 0)])
        for bad in (0, 101):
            with pytest.raises(ValidationError):
                baselines.suvmax_threshold_predict(case.pet, case.gtv, case.brain, bad)


class TestSweep:
    def test_constructed_optimum_at_40(self):
        rng = np.random.default_rng(3)
        cases = []
        for s in range(3):
            pet = rng.uniform(0.0, 1.0, size=(8, 8, 8)).astype(np.float32)
            pet[4, 4, 4] = 1.0  # SUVmax 1 inside GTV
            case = make_case(pet, [(4, 4, 4)])
            relapse = Mask3D(case.grid, (pet >= 0.40).astype(np.uint8))
            cases.append(dataclasses.replace(case, relapse=relapse))
        result = baselines.suvmax_sweep(cases)
        assert result.best_percent == 40
        assert result.best_mean_dice == 1.0
        assert len(result.entries) == 100

    def test_recovers_constructed_boundary_fraction(self):
        for target in (30, 50):
            params = phantom.sweep_calibration_params(
                phantom.PhantomParams(dims=(32, 32, 28), seed=4), target / 100.0)
            cases, _ = phantom.generate_cohort(params, 4)
            result = baselines.suvmax_sweep(cases)
            assert abs(result.best_percent - target) <= 2
            assert result.best_mean_dice > 0.9

    def test_ties_resolve_to_lowest_percent(self):
        # two-valued PET: every percent in (50, 100] gives one mask, the rest
        # another; the best region's lowest percent must win
        pet = np.zeros((4, 4, 4), dtype=np.float32)
        pet[1, 1, 1] = 4.0
        pet[2, 2, 2] = 2.0
        case = make_case(pet, [(1, 1, 1)])
        relapse = Mask3D(case.grid, (pet >= 4.0).astype(np.uint8))
        result = baselines.suvmax_sweep([dataclasses.replace(case, relapse=relapse)])
        assert result.best_percent == 51

    def test_csv_output(self, tmp_path):
        params = phantom.PhantomParams(dims=(24, 24, 20), seed=5)
        cases, _ = phantom.generate_cohort(params, 2)
        result = baselines.suvmax_sweep(cases)
        path = tmp_path / "sweep.csv"
        baselines.write_sweep_csv(str(path), result)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "percent,mean_dice"
        assert len(lines) == 101


class TestGtvBaseline:
    def test_identity(self):
        params = phantom.PhantomParams(dims=(24, 24, 20), seed=6)
        case, _ = phantom.generate_case(params, 0)
        assert baselines.gtv_baseline_predict(case) is case.gtv

    def test_dice_when_relapse_is_half_of_gtv(self):
        gtv = np.zeros((4, 4, 4), dtype=np.uint8)
        gtv.reshape(-1)[:10] = 1
        relapse = np.zeros((4, 4, 4), dtype=np.uint8)
        relapse.reshape(-1)[:5] = 1
        g = Grid3D((4, 4, 4), (1, 1, 1))
        d = analysis.dice(Mask3D(g, gtv), Mask3D(g, relapse))
        assert d == pytest.approx(2 * 5 / (10 + 5))

    def test_po_inclusion_matches_membership(self):
        params = phantom.PhantomParams(dims=(28, 28, 24), seed=7)
        cases, _ = phantom.generate_cohort(params, 5)
        for case in cases:
            pos = analysis.points_of_origin(case.relapse)
            inc, tot = analysis.po_inclusion(baselines.gtv_baseline_predict(case), pos)
            expected = sum(1 for p in pos if case.gtv.data[p.voxel[2], p.voxel[1], p.voxel[0]])
            assert (inc, tot) == (expected, len(pos))
