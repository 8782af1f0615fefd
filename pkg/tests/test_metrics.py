"""Metric correctness against brute-force oracles."""

import numpy as np
import pytest

from gridcast.dst import (CLASS_FREE, CLASS_OCCUPIED, CLASS_UNKNOWN,
                          EpisodeRecord, BOX_DTYPE, classify_masses,
                          scripted_crossing_episode)
from gridcast.metrics import (EvalReport, PersistenceModel, evaluate,
                              image_similarity, mobbm, mse)
from gridcast.tensor import GridcastError, ShapeError, Tensor


def is_oracle(m1, m2):
    """Quadratic scan over all same-class cell pairs."""
    h, w = m1.shape
    cap = float(h + w)
    total = 0.0
    for cls in (CLASS_FREE, CLASS_OCCUPIED, CLASS_UNKNOWN):
        for a, b in ((m1, m2), (m2, m1)):
            cells = np.argwhere(a == cls)
            if len(cells) == 0:
                continue
            others = np.argwhere(b == cls)
            if len(others) == 0:
                total += cap
                continue
            acc = 0.0
            for r, c in cells:
                acc += min(abs(int(r) - int(ro)) + abs(int(c) - int(co))
                           for ro, co in others)
            total += acc / len(cells)
    return total


class TestMse:
    def test_identical_zero(self):
        a = np.random.default_rng(0).uniform(0, 1, (2, 8, 8))
        assert mse(a, a) == 0.0

    def test_constant_offset(self):
        a = np.full((2, 4, 4), 0.3)
        assert mse(a + 0.1, a) == pytest.approx(0.01)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (2, 5, 5))
        b = rng.uniform(0, 1, (2, 5, 5))
        acc = 0.0
        for ch in range(2):
            for r in range(5):
                for c in range(5):
                    acc += (a[ch, r, c] - b[ch, r, c]) ** 2
        assert mse(a, b) == pytest.approx(acc / 50, rel=1e-12)

    def test_accepts_tensors(self):
        a = Tensor(np.zeros((2, 3, 3)))
        b = np.full((2, 3, 3), 0.5)
        assert mse(a, b) == pytest.approx(0.25)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse(np.zeros((2, 3, 3)), np.zeros((2, 4, 4)))


class TestImageSimilarity:
    def test_worked_example_against_oracle(self):
        m1 = np.full((3, 3), CLASS_FREE)
        m2 = np.full((3, 3), CLASS_FREE)
        m1[0, 0] = CLASS_OCCUPIED
        m2[1, 1] = CLASS_OCCUPIED
        value = image_similarity(m1, m2)
        assert value == pytest.approx(is_oracle(m1, m2), abs=1e-12)
        # occupied: 2 each way; free: the two swapped cells sit at
        # distance 1 from a free cell, averaged over 8 free cells
        assert value == pytest.approx(4.25)

    def test_identity_and_symmetry(self):
        rng = np.random.default_rng(2)
        m1 = rng.integers(0, 3, (8, 8))
        m2 = rng.integers(0, 3, (8, 8))
        assert image_similarity(m1, m1) == 0.0
        assert image_similarity(m1, m2) == image_similarity(m2, m1)

    def test_matches_oracle_randomized(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            m1 = rng.integers(0, 3, (8, 8))
            m2 = rng.integers(0, 3, (8, 8))
            assert image_similarity(m1, m2) == \
                pytest.approx(is_oracle(m1, m2), abs=1e-12)

    def test_translation_monotonicity(self):
        base = np.full((9, 9), CLASS_FREE)
        base[3:6, 1:3] = CLASS_OCCUPIED
        shift1 = np.roll(base, 1, axis=1)
        shift2 = np.roll(base, 2, axis=1)
        d1 = image_similarity(base, shift1)
        d2 = image_similarity(base, shift2)
        assert 0 < d1 < d2

    def test_class_absent_in_both_ignored(self):
        m1 = np.full((4, 4), CLASS_FREE)
        m2 = np.full((4, 4), CLASS_FREE)
        assert image_similarity(m1, m2) == 0.0

    def test_class_missing_on_one_side_capped(self):
        m1 = np.full((4, 4), CLASS_FREE)
        m2 = np.full((4, 4), CLASS_FREE)
        m2[0, 0] = CLASS_UNKNOWN
        value = image_similarity(m1, m2)
        assert value == pytest.approx(is_oracle(m1, m2), abs=1e-12)
        # unknown present only in m2 contributes the 4+4 cap once
        assert value >= 8.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            image_similarity(np.zeros((3, 3)), np.zeros((4, 4)))


def _single_box(steps, h=16, w=16, res=1.0):
    """One centered 3x3-cell box at every step."""
    return [[(0.0, 0.0, 3.0 * res, 3.0 * res, 0.0)] for _ in range(steps)]


class TestMobbm:
    def test_identical_is_one(self):
        labels = np.full((4, 16, 16), CLASS_FREE)
        labels[:, 7:10, 7:10] = CLASS_OCCUPIED
        out = mobbm(labels, labels, _single_box(4), 1.0)
        np.testing.assert_allclose(out, 1.0)

    def test_vanished_object_is_zero(self):
        target = np.full((2, 16, 16), CLASS_FREE)
        target[:, 7:10, 7:10] = CLASS_OCCUPIED
        pred = np.full((2, 16, 16), CLASS_FREE)
        out = mobbm(pred, target, _single_box(2), 1.0)
        np.testing.assert_allclose(out, 0.0)

    def test_half_retained(self):
        target = np.full((1, 16, 16), CLASS_FREE)
        target[:, 7:10, 7:10] = CLASS_OCCUPIED
        pred = np.full((1, 16, 16), CLASS_FREE)
        pred[0, 7, 7:10] = CLASS_OCCUPIED          # 3 of 9
        pred[0, 8, 7:9] = CLASS_OCCUPIED           # +2, one short of half
        out = mobbm(pred, target, _single_box(1), 1.0)
        assert out[0] == pytest.approx(5 / 9)

    def test_outside_box_occupancy_ignored(self):
        target = np.full((1, 16, 16), CLASS_FREE)
        target[:, 7:10, 7:10] = CLASS_OCCUPIED
        pred = np.array(target)
        pred[0, 0, :] = CLASS_OCCUPIED
        out = mobbm(pred, target, _single_box(1), 1.0)
        assert out[0] == pytest.approx(1.0)

    def test_empty_box_table_warns(self):
        labels = np.full((3, 8, 8), CLASS_FREE)
        with pytest.warns(UserWarning, match="empty box table"):
            out = mobbm(labels, labels, [[], [], []], 1.0)
        assert np.all(np.isnan(out))

    def test_zero_target_step_skipped(self):
        target = np.full((2, 16, 16), CLASS_FREE)
        target[0, 7:10, 7:10] = CLASS_OCCUPIED     # step 1 box is empty
        pred = np.array(target)
        with pytest.warns(UserWarning, match="skipped"):
            out = mobbm(pred, target, _single_box(2), 1.0)
        assert out[0] == pytest.approx(1.0)
        assert np.isnan(out[1])

    def test_shape_checks(self):
        with pytest.raises(ShapeError):
            mobbm(np.zeros((2, 4, 4)), np.zeros((3, 4, 4)),
                  _single_box(2), 1.0)
        with pytest.raises(ShapeError):
            mobbm(np.zeros((2, 4, 4)), np.zeros((2, 4, 4)),
                  _single_box(3), 1.0)


def _static_episode(length=12, h=16, w=16):
    """Constant belief with one parked box; the persistence fixed point."""
    masses = np.zeros((length, 2, h, w), dtype=np.float32)
    masses[:, 1] = 0.8
    masses[:, 0, 6:9, 6:9] = 0.85
    masses[:, 1, 6:9, 6:9] = 0.0
    rows = [(t, 1, 0.5, 0.5, 3.0, 3.0, 0.0) for t in range(length)]
    return EpisodeRecord(masses, np.zeros((length, 3), dtype=np.float32),
                         np.array(rows, dtype=BOX_DTYPE), 1.0)


class TestPersistence:
    def test_repeats_last_frame(self):
        frames = np.arange(2 * 2 * 3 * 3, dtype=float).reshape(2, 2, 3, 3)
        out = PersistenceModel().predict(frames, 4)
        assert out.shape == (4, 2, 3, 3)
        for t in range(4):
            np.testing.assert_array_equal(out[t], frames[-1])

    def test_rejects_bad_input(self):
        with pytest.raises(ShapeError):
            PersistenceModel().predict(np.zeros((3, 3)), 2)


class TestEvaluate:
    def test_static_world_is_perfect(self):
        ep = _static_episode()
        report = evaluate(PersistenceModel(), [ep], n_context=4, horizon=6)
        assert report.horizon == 6
        np.testing.assert_allclose(report.mse_steps, 0.0, atol=1e-12)
        np.testing.assert_allclose(report.is_steps, 0.0, atol=1e-12)
        np.testing.assert_allclose(report.mobbm_steps, 1.0)

    def test_moving_object_mobbm_decays(self):
        ep = scripted_crossing_episode("right", length=20)
        report = evaluate(PersistenceModel(), [ep], n_context=5, horizon=15)
        vals = report.mobbm_steps
        finite = vals[np.isfinite(vals)]
        assert finite[0] < 1.0
        diffs = np.diff(finite)
        assert np.all(diffs <= 1e-12)
        assert finite[-1] == 0.0

    def test_array_lengths_match_horizon(self):
        ep = _static_episode(length=10)
        report = evaluate(PersistenceModel(), [ep, ep], n_context=3,
                          horizon=7)
        report.validate()
        assert report.n_episodes == 2
        assert len(report.mse_steps) == 7
        # identical episodes leave no spread
        np.testing.assert_allclose(report.mse_err, 0.0)

    def test_too_short_episode_rejected(self):
        ep = _static_episode(length=5)
        with pytest.raises(GridcastError):
            evaluate(PersistenceModel(), [ep], n_context=4, horizon=6)
        with pytest.raises(GridcastError):
            evaluate(PersistenceModel(), [], n_context=1, horizon=1)


class TestEvalReport:
    def _report(self):
        ep = _static_episode()
        return evaluate(PersistenceModel(), [ep], n_context=4, horizon=5,
                        model_id="persistence", dataset_id="static")

    def test_text_roundtrip(self):
        report = self._report()
        back = EvalReport.from_text(report.to_text())
        assert back.model_id == "persistence"
        assert back.dataset_id == "static"
        assert back.horizon == report.horizon
        np.testing.assert_allclose(back.mse_steps, report.mse_steps)
        np.testing.assert_allclose(back.mobbm_steps, report.mobbm_steps)

    def test_summary_keys(self):
        s = self._report().summary()
        assert set(s) == {"mse", "is", "mobbm"}
        assert s["mobbm"] == pytest.approx(1.0)

    def test_from_text_rejects_junk(self):
        with pytest.raises(GridcastError):
            EvalReport.from_text("hello\nworld\n")

    def test_validate_checks_lengths(self):
        report = self._report()
        report.mse_steps = report.mse_steps[:-1]
        with pytest.raises(ShapeError):
            report.validate()
