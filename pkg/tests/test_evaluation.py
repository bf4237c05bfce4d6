import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from icp_reasoner.datasets import gen_synthetic_pair, gen_synthetic_set
from icp_reasoner.evaluation import (
    EvalMode,
    Reference,
    build_report,
    classification_metrics,
    evaluate_run,
    extract_transform,
    per_axis_mse,
    prediction_from_trajectory,
    reports_csv,
    reports_json,
    rre_argument,
    rte_rre,
    score,
    step_mse,
    summarize,
)
from icp_reasoner.geometry import PointCloud, RigidTransform, apply_transform, rotation_about_axis
from icp_reasoner.icp import IcpConfig
from icp_reasoner.trajectory import normalize, record_trajectory

from conftest import random_rotation, random_transform

I = RigidTransform.identity()
RZ90 = rotation_about_axis([0, 0, 1], math.pi / 2)
# (2/3 + 12/13) / 2 = 31/39
BAL_ACC = 0.7948717948717948717948718


class TestRteRre:
    def test_equal(self, rng):
        t = random_transform(rng)
        assert rte_rre(t, t) == (0.0, 0.0)

    def test_quarter_turn(self):
        _, rre = rte_rre(RigidTransform(RZ90, np.zeros(3)), I)
        assert rre == pytest.approx(math.pi / 2, abs=1e-15)

    def test_translation(self):
        rte, rre = rte_rre(RigidTransform(np.eye(3), [3.0, 4, 0]), I)
        assert rte == 5.0 and rre == 0.0

    def test_half_turn(self):
        r = rotation_about_axis([1, 0, 0], math.pi)
        assert rte_rre(RigidTransform(r, np.zeros(3)), I)[1] == pytest.approx(math.pi, abs=1e-7)

    @given(st.floats(0.0, math.pi), st.integers(0, 10 ** 6))
    def test_matches_angle(self, angle, seed):
        rng = np.random.default_rng(seed)
        axis = rng.normal(size=3)
        r0 = random_rotation(rng)
        r = rotation_about_axis(axis, angle) @ r0
        _, rre = rte_rre(RigidTransform(r, np.zeros(3)), RigidTransform(r0, np.zeros(3)))
        assert rre == pytest.approx(angle, abs=2e-7)
        assert 0.0 <= rre <= math.pi

    @given(st.integers(0, 10 ** 6))
    def test_clamp_leaves_in_range_values(self, seed):
        rng = np.random.default_rng(seed)
        c = rre_argument(random_rotation(rng), random_rotation(rng))
        assert abs(min(1.0, max(-1.0, c)) - c) <= 1e-12


class TestExtract:
    def test_exact(self, rng, cloud):
        t = random_transform(rng)
        rec = extract_transform(cloud, apply_transform(cloud, t))
        rte, rre = rte_rre(rec, t)
        assert rte < 1e-9 and rre < 1e-9

    def test_identity(self, cloud):
        rte, rre = rte_rre(extract_transform(cloud, cloud), I)
        assert rte < 1e-12 and rre < 1e-12

    def test_noise_bound(self):
        sigma = 0.01
        for seed in range(100):
            rng = np.random.default_rng(seed)
            src = PointCloud(rng.uniform(-1, 1, (32, 3)))
            t = random_transform(rng, 45, 1.0)
            noisy = PointCloud(t.apply(src.points) + rng.normal(0, sigma, (32, 3)))
            assert rte_rre(extract_transform(src, noisy), t)[0] < 5 * sigma


class TestClassification:
    def test_perfect(self):
        m = np.eye(4, dtype=int)
        s = classification_metrics(m, m)
        assert (s.f1, s.precision, s.recall, s.balanced_accuracy) == (1.0, 1.0, 1.0, 1.0)

    def test_disjoint(self):
        assert classification_metrics(np.eye(4), np.eye(4)[::-1]).f1 == 0.0

    def test_confusion_example(self):
        truth = np.zeros((4, 4), int)
        pred = np.zeros((4, 4), int)
        truth[0, 0] = truth[1, 1] = truth[2, 2] = 1
        pred[0, 0] = pred[1, 1] = pred[3, 3] = 1
        s = classification_metrics(pred, truth)
        assert s.precision == pytest.approx(2 / 3, abs=1e-15)
        assert s.recall == pytest.approx(2 / 3, abs=1e-15)
        assert s.f1 == pytest.approx(2 / 3, abs=1e-15)
        assert s.balanced_accuracy == pytest.approx(BAL_ACC, abs=1e-15)

    @given(st.integers(0, 10 ** 6))
    def test_permutation_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.integers(0, 2, (6, 6)), rng.integers(0, 2, (6, 6))
        p, q = rng.permutation(6), rng.permutation(6)
        assert classification_metrics(a, b) == classification_metrics(a[np.ix_(p, q)], b[np.ix_(p, q)])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            classification_metrics(np.eye(3), np.eye(4))


class TestPerAxisMse:
    def test_identical(self, cloud):
        assert per_axis_mse(cloud, cloud).tolist() == [0.0, 0.0, 0.0]

    def test_offset(self, cloud):
        out = per_axis_mse(cloud.with_points(cloud.points + [0.1, 0, 0]), cloud)
        assert np.allclose(out, [0.01, 0, 0], atol=1e-15)

    def test_brute_force(self, rng):
        a, b = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        mask = rng.random(20) < 0.7
        mask[0] = True
        acc = [0.0, 0.0, 0.0]
        for i in range(20):
            if mask[i]:
                for k in range(3):
                    acc[k] += (a[i, k] - b[i, k]) ** 2
        want = [v / mask.sum() for v in acc]
        got = per_axis_mse(PointCloud(a, mask=mask), PointCloud(b, mask=mask))
        assert np.allclose(got, want, atol=1e-12, rtol=0)

    def test_mismatch(self, cloud):
        with pytest.raises(ValueError):
            per_axis_mse(cloud, PointCloud(cloud.points[:-1]))


class TestRun:
    def easy(self, k=6):
        return gen_synthetic_set(k, 16, seed=3, coord_range=1.0, max_rot_deg=10, max_trans=0.05)

    def test_classical_easy_regime(self):
        rep = evaluate_run(self.easy(), IcpConfig("p2p"), EvalMode.CLASSICAL, Reference.GROUND_TRUTH)
        assert rep.summary()["rte"]["median"] < 1e-6
        assert len(rep.scores) == 6

    def test_oracle_substitution(self):
        preds = []
        for s in self.easy(3):
            tr = normalize(record_trajectory(s.src, s.tgt, IcpConfig("gicp", max_iter=5)))
            preds.append(prediction_from_trajectory(s, tr))
        rep = build_report(preds, EvalMode.CLASSICAL, Reference.ALGORITHM)
        for sc in rep.scores:
            assert sc.f1 == 1.0 and sc.rte == 0.0 and sc.rre == 0.0
            assert sc.mse_xyz == [0.0, 0.0, 0.0]
        assert all(v == 0.0 for row in rep.step_mse for v in row)

    def test_step_mse_uses_shorter(self):
        s = self.easy(1)[0]
        tr = normalize(record_trajectory(s.src, s.tgt, IcpConfig()))
        assert len(step_mse(tr.hints, tr.hints[:1])) == 1

    def test_summary(self):
        out = summarize([1, 2, 3, 4, 100])
        assert out["median"] == 3 and out["q1"] == 2 and out["q3"] == 4 and out["outliers"] == 1
        assert summarize([])["count"] == 0

    def test_report_rows(self):
        samples = self.easy(4)
        reps = [evaluate_run(samples, IcpConfig(), EvalMode.CLASSICAL, r) for r in Reference]
        rows = list(csv.DictReader(io.StringIO(reports_csv(reps))))
        assert len(rows) == 8 and {r["family"] for r in rows} == {"T", "GT"}
        doc = json.loads(reports_json(reps, "bench", include_runtime=False))
        assert set(doc["bench"]) == {"T", "GT"}
        assert "runtime" not in doc["bench"]["T"]["metrics"]

    def test_nar_needs_params(self):
        with pytest.raises(TypeError):
            evaluate_run(self.easy(1), IcpConfig(), EvalMode.NAR, icp_cfg=IcpConfig())
