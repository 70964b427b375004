import math
from collections import deque

import numpy as np
import pytest
import scipy.stats

from lrrseg import analysis
from lrrseg.errors import GeometryError, ValidationError
from lrrseg.volgrid import Grid3D, Mask3D


def mask_of(data, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data, dtype=np.uint8)
    nz, ny, nx = data.shape
    return Mask3D(Grid3D((nx, ny, nz), spacing), data)


def random_mask(rng, dims=(10, 9, 8), p=0.3, spacing=(1.0, 1.0, 1.0)):
    nx, ny, nz = dims
    return mask_of((rng.random((nz, ny, nx)) < p).astype(np.uint8), spacing)


def bfs_components(data, connectivity):
    """Brute-force BFS labeling oracle."""
    if connectivity == 26:
        offsets = [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1)
                   for dx in (-1, 0, 1) if (dz, dy, dx) != (0, 0, 0)]
    else:
        offsets = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    nz, ny, nx = data.shape
    labels = np.zeros_like(data, dtype=np.int32)
    count = 0
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                if data[k, j, i] and labels[k, j, i] == 0:
                    count += 1
                    q = deque([(k, j, i)])
                    labels[k, j, i] = count
                    while q:
                        ck, cj, ci = q.popleft()
                        for dz, dy, dx in offsets:
                            nk, nj, ni = ck + dz, cj + dy, ci + dx
                            if 0 <= nk < nz and 0 <= nj < ny and 0 <= ni < nx \
                                    and data[nk, nj, ni] and labels[nk, nj, ni] == 0:
                                labels[nk, nj, ni] = count
                                q.append((nk, nj, ni))
    return labels, count


class TestOverlapMetrics:
    def test_identical_masks(self):
        rng = np.random.default_rng(0)
        m = random_mask(rng)
        assert analysis.dice(m, m) == 1.0
        assert analysis.precision(m, m) == 1.0
        assert analysis.recall(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4, 4)), np.zeros((4, 4, 4))
        d1, d2 = a
        d1[0, 0, 0] = 1
        d2[3, 3, 3] = 1
        p, g = mask_of(d1), mask_of(d2)
        assert analysis.dice(p, g) == 0.0
        assert analysis.precision(p, g) == 0.0
        assert analysis.recall(p, g) == 0.0

    def test_counting_example(self):
        # |P| = 10, |G| = 20, |P∩G| = 5
        d_p = np.zeros((3, 3, 4))
        d_g = np.zeros((3, 3, 4))
        flat_p = d_p.reshape(-1)
        flat_g = d_g.reshape(-1)
        flat_p[:10] = 1
        flat_g[5:25] = 1
        p, g = mask_of(d_p), mask_of(d_g)
        assert analysis.dice(p, g) == pytest.approx(1 / 3)
        assert analysis.precision(p, g) == pytest.approx(0.5)
        assert analysis.recall(p, g) == pytest.approx(0.25)

    def test_empty_conventions(self):
        empty = mask_of(np.zeros((2, 2, 2)))
        ones = mask_of(np.ones((2, 2, 2)))
        assert analysis.dice(empty, empty) == 1.0
        assert analysis.precision(empty, ones) == 0.0
        assert analysis.recall(ones, empty) == 1.0

    def test_grid_mismatch(self):
        a = mask_of(np.zeros((2, 2, 2)))
        b = mask_of(np.zeros((2, 2, 2)), spacing=(2.0, 2.0, 2.0))
        with pytest.raises(GeometryError):
            analysis.dice(a, b)

    def test_brute_force_equivalence_and_identity(self):
        """Count-based oracle on 100 random pairs + the 2PR/(P+R) identity."""
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = random_mask(rng, p=float(rng.uniform(0.05, 0.6)))
            b = random_mask(rng, p=float(rng.uniform(0.05, 0.6)))
            pa, ga = int(a.data.sum()), int(b.data.sum())
            inter = int(np.sum(a.data.astype(int) * b.data.astype(int)))
            d = analysis.dice(a, b)
            p = analysis.precision(a, b)
            r = analysis.recall(a, b)
            if pa + ga:
                assert d == 2 * inter / (pa + ga)
            if pa:
                assert p == inter / pa
            if ga:
                assert r == inter / ga
            if p + r > 0:
                assert abs(d - 2 * p * r / (p + r)) < 1e-12
            # symmetry and the precision/recall transpose identity
            assert analysis.dice(b, a) == d
            assert analysis.recall(b, a) == p or pa == 0


class TestConnectedComponents:
    def test_cube_is_one_component(self):
        d = np.zeros((5, 5, 5))
        d[1:4, 1:4, 1:4] = 1
        comps = analysis.connected_components(mask_of(d))
        assert comps.count == 1
        assert comps.component_voxels(1).shape == (27, 3)

    def test_diagonal_touch_connectivity(self):
        d = np.zeros((4, 4, 4))
        d[0, 0, 0] = 1
        d[1, 1, 1] = 1
        assert analysis.connected_components(mask_of(d), 26).count == 1
        assert analysis.connected_components(mask_of(d), 6).count == 2

    def test_matches_bfs_oracle_up_to_relabeling(self):
        rng = np.random.default_rng(2)
        for trial in range(20):
            conn = 26 if trial % 2 == 0 else 6
            m = random_mask(rng, dims=(8, 7, 6), p=0.25)
            comps = analysis.connected_components(m, conn)
            oracle_labels, oracle_count = bfs_components(m.data.astype(bool), conn)
            assert comps.count == oracle_count
            # same partition: label pairs must biject
            fg = m.data.astype(bool)
            pairs = set(zip(comps.labels[fg].tolist(), oracle_labels[fg].tolist()))
            assert len(pairs) == oracle_count
            assert len({a for a, _ in pairs}) == oracle_count
            assert len({b for _, b in pairs}) == oracle_count


class TestPointOfOrigin:
    def test_cube_center(self):
        d = np.zeros((5, 5, 5))
        d[1:4, 1:4, 1:4] = 1
        po = analysis.point_of_origin(d.astype(bool), Grid3D((5, 5, 5), (1, 1, 1)))
        assert po.voxel == (2, 2, 2)

    def test_single_voxel(self):
        d = np.zeros((3, 3, 3))
        d[1, 2, 0] = 1
        po = analysis.point_of_origin(d.astype(bool), Grid3D((3, 3, 3), (1, 1, 1)))
        assert po.voxel == (0, 2, 1)

    def test_bar_7x3x3(self):
        d = np.zeros((5, 5, 9))
        d[1:4, 1:4, 1:8] = 1  # 7 long in x, 3 in y and z
        po = analysis.point_of_origin(d.astype(bool), Grid3D((9, 5, 5), (1, 1, 1)))
        assert po.voxel == (4, 2, 2)

    def test_po_lies_inside_component(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            m = random_mask(rng, dims=(9, 9, 9), p=0.4)
            if m.count == 0:
                continue
            for po in analysis.points_of_origin(m):
                i, j, k = po.voxel
                assert m.data[k, j, i] == 1

    def test_physical_position(self):
        d = np.zeros((3, 3, 3))
        d[1, 1, 1] = 1
        g = Grid3D((3, 3, 3), (2.0, 2.0, 2.0), (10.0, 20.0, 30.0))
        po = analysis.point_of_origin(d.astype(bool), g)
        assert po.position_mm == (12.0, 22.0, 32.0)


class TestPoInclusion:
    def test_truth_includes_all_pos(self):
        rng = np.random.default_rng(4)
        m = random_mask(rng, p=0.35)
        pos = analysis.points_of_origin(m)
        inc, tot = analysis.po_inclusion(m, pos)
        assert inc == tot == len(pos)

    def test_empty_prediction_includes_none(self):
        rng = np.random.default_rng(5)
        m = random_mask(rng, p=0.35)
        pos = analysis.points_of_origin(m)
        empty = mask_of(np.zeros_like(m.data))
        assert analysis.po_inclusion(empty, pos) == (0, len(pos))

    def test_two_components_one_inside_gtv(self):
        relapse = np.zeros((8, 8, 8))
        relapse[1, 1, 1] = 1  # PO (1,1,1)
        relapse[6, 6, 6] = 1  # PO (6,6,6)
        gtv = np.zeros((8, 8, 8))
        gtv[0:3, 0:3, 0:3] = 1
        pos = analysis.points_of_origin(mask_of(relapse))
        inc, tot = analysis.po_inclusion(mask_of(gtv), pos)
        assert (inc, tot) == (1, 2)


class TestMaskVolume:
    def test_examples(self):
        d = np.zeros((10, 10, 10))
        d.reshape(-1)[:1000] = 1
        m = mask_of(d, spacing=(1.0, 1.0, 2.0))
        assert analysis.mask_volume_cc(m) == pytest.approx(2.0)
        assert analysis.mask_volume_cc(mask_of(np.zeros((2, 2, 2)))) == 0.0
        assert analysis.mask_volume_cc(mask_of(np.ones((10, 10, 10)))) == pytest.approx(1.0)


class TestMedianIqr:
    def test_examples(self):
        assert analysis.median_iqr([1, 2, 3, 4, 5]) == (3.0, 2.0, 4.0)
        assert analysis.median_iqr([1, 1, 1]) == (1.0, 1.0, 1.0)

    def test_matches_numpy_linear_method(self):
        rng = np.random.default_rng(6)
        vals = rng.normal(size=7)
        med, q1, q3 = analysis.median_iqr(vals)
        assert med == np.quantile(vals, 0.5)
        assert q1 == np.quantile(vals, 0.25)
        assert q3 == np.quantile(vals, 0.75)


class TestPairedT:
    def test_identical_sequences(self):
        assert analysis.paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == (0.0, 1.0)

    def test_zero_mean_difference(self):
        t, p = analysis.paired_t_test([1.0, 0.0], [0.0, 1.0])
        assert t == 0.0 and p == 1.0

    def test_hand_computed_example(self):
        t, p = analysis.paired_t_test([2.0, 4.0, 6.0], [1.0, 2.0, 3.0])  # d = {1,2,3}
        assert t == pytest.approx(2.0 * math.sqrt(3.0), abs=1e-9)
        assert p == pytest.approx(0.0742, abs=1e-3)

    def test_against_scipy(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n = int(rng.integers(2, 15))
            a = rng.normal(size=n)
            b = rng.normal(size=n)
            t, p = analysis.paired_t_test(a, b)
            ref = scipy.stats.ttest_rel(a, b)
            assert t == pytest.approx(ref.statistic, rel=1e-10)
            assert p == pytest.approx(ref.pvalue, rel=1e-9)

    def test_antisymmetry(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=6)
        b = rng.normal(size=6)
        t_ab, p_ab = analysis.paired_t_test(a, b)
        t_ba, p_ba = analysis.paired_t_test(b, a)
        assert t_ab == pytest.approx(-t_ba, rel=1e-12)
        assert p_ab == pytest.approx(p_ba, rel=1e-12)

    def test_constant_nonzero_difference(self):
        t, p = analysis.paired_t_test([2.0, 2.0, 2.0], [1.0, 1.0, 1.0])
        assert math.isinf(t) and p == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            analysis.paired_t_test([1.0], [1.0, 2.0])


class TestFisherExact:
    def test_po_comparison_table(self):
        # 6/7 vs 5/7 POs captured: all same-margin tables are at most as probable
        assert analysis.fisher_exact_2x2([[6, 1], [5, 2]]) == 1.0

    def test_two_equiprobable_tables(self):
        assert analysis.fisher_exact_2x2([[1, 0], [0, 1]]) == 1.0

    def test_perfect_separation(self):
        assert analysis.fisher_exact_2x2([[5, 0], [0, 5]]) == pytest.approx(2 / 252, abs=1e-12)

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            table = rng.integers(0, 12, size=(2, 2)).tolist()
            _, probs = analysis.fisher_table_probabilities(table)
            assert abs(sum(probs) - 1.0) < 1e-12

    def test_against_scipy(self):
        rng = np.random.default_rng(10)
        for _ in range(40):
            table = rng.integers(0, 10, size=(2, 2))
            p = analysis.fisher_exact_2x2(table.tolist())
            ref = scipy.stats.fisher_exact(table, alternative="two-sided").pvalue
            assert p == pytest.approx(ref, rel=1e-9, abs=1e-12)

    def test_rejects_negative_or_fractional(self):
        with pytest.raises(ValidationError):
            analysis.fisher_table_probabilities([[1, -2], [0, 3]])
        with pytest.raises(ValidationError):
            analysis.fisher_table_probabilities([[0.5, 1], [2, 3]])


class TestReports:
    def _cases_and_preds(self):
        from lrrseg import phantom
        params = phantom.PhantomParams(dims=(20, 20, 18), seed=11)
        cases, _ = phantom.generate_cohort(params, 4)
        preds = {
            "gtv": [c.gtv for c in cases],
            "ai_random": [c.relapse for c in cases],  # oracle predictor
        }
        return cases, preds

    def test_report_shape_and_values(self):
        cases, preds = self._cases_and_preds()
        reports, comparisons = analysis.build_report(preds, cases, best_cnn="ai_random")
        by_name = {r.method: r for r in reports}
        assert by_name["ai_random"].dice == [1.0] * 4
        assert by_name["ai_random"].po_included == by_name["ai_random"].po_total
        s = by_name["gtv"].summary()
        for key in ("dice_median", "dice_q1", "dice_q3", "vol_cc_median",
                    "vol_cc_q1", "vol_cc_q3", "po_included", "po_total", "dice_mean"):
            assert key in s
        names = [c.comparison for c in comparisons]
        assert "ai_random_vs_gtv_dice_paired_t" in names
        assert "ai_random_vs_gtv_po_fisher_exact" in names

    def test_report_files(self, tmp_path):
        cases, preds = self._cases_and_preds()
        reports, comparisons = analysis.build_report(preds, cases, best_cnn="ai_random")
        jpath = tmp_path / "report.json"
        tpath = tmp_path / "report.txt"
        analysis.write_report_json(str(jpath), reports, comparisons)
        analysis.write_report_text(str(tpath), reports, comparisons)
        import json
        data = json.loads(jpath.read_text())
        assert {m["method"] for m in data["methods"]} == {"gtv", "ai_random"}
        assert all({"comparison", "statistic", "p"} <= set(c) for c in data["comparisons"])
        assert "method" in tpath.read_text()
