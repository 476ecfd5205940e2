import numpy as np
import pytest

from intenreg.errors import DegenerateInputError, DimensionError, RegistrationError
from intenreg.evalharness import (
    DiceMatrix,
    delta_matrix,
    dice,
    mean_dice,
    mean_intensity_difference,
    pairwise_evaluation,
    pairwise_matrix,
    per_label_dice,
    read_matrix_csv,
    region_report,
    write_matrix_csv,
    write_region_csv,
)
from intenreg.imgcore import warp
from intenreg.losses import LossConfig
from intenreg.optdirect import DirectEngine, IdentityEngine, StopRule
from intenreg.phantom import PhantomConfig, generate_corpus

from oracles import dice_bruteforce


def hand_maps():
    # label 1: 6 pixels in A, 4 in B, 3 shared
    a = np.zeros((4, 4), dtype=int)
    b = np.zeros((4, 4), dtype=int)
    a[0, 0:3] = 1
    a[1, 0:3] = 1
    b[0, 0:3] = 1
    b[2, 0] = 1
    return a, b


class TestDice:
    def test_hand_06(self):
        a, b = hand_maps()
        assert dice(a, b, 1) == pytest.approx(0.6, abs=1e-15)
        assert dice_bruteforce(a, b, 1) == pytest.approx(0.6, abs=1e-15)

    def test_identical_and_disjoint(self, rng):
        m = rng.integers(0, 4, size=(6, 6))
        assert all(dice(m, m, k) == 1.0 for k in range(4))
        a = np.zeros((2, 2), dtype=int)
        b = np.zeros((2, 2), dtype=int)
        a[0] = 1
        b[1] = 1
        assert dice(a, b, 1) == 0.0

    def test_empty_in_both(self):
        z = np.zeros((3, 3), dtype=int)
        assert dice(z, z, 5) == 1.0

    def test_matches_bruteforce(self, rng):
        for _ in range(25):
            a = rng.integers(0, 4, size=(9, 7))
            b = rng.integers(0, 4, size=(9, 7))
            for lab in range(5):
                assert dice(a, b, lab) == dice_bruteforce(a, b, lab)

    def test_mean_dice_hand_08(self):
        a, b = hand_maps()
        a[3, 3] = b[3, 3] = 2  # perfect; label 3 absent from both
        assert per_label_dice(a, b) == {1: pytest.approx(0.6), 2: 1.0}
        assert mean_dice(a, b) == pytest.approx(0.8, abs=1e-15)

    def test_mean_dice_symmetric(self, rng):
        a, b = rng.integers(0, 4, size=(2, 8, 8))
        assert mean_dice(a, b) == mean_dice(b, a)

    def test_label_in_one_map_scores_zero(self):
        a = np.array([[1, 2]])
        b = np.array([[1, 1]])
        assert mean_dice(a, b) == pytest.approx((2 / 3 + 0.0) / 2)

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            mean_dice(np.zeros((3, 3), dtype=int), np.zeros((3, 3), dtype=int))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dice(np.zeros((2, 2), dtype=int), np.zeros((3, 2), dtype=int), 0)


class TestIntensityDifference:
    def test_examples(self, rng):
        assert mean_intensity_difference(np.array([[0.0, 1.0]]), np.array([[1.0, 1.0]])) == 0.5
        img = rng.random((5, 5))
        assert mean_intensity_difference(img, warp(img, np.zeros((2, 5, 5)))) == 0.0

    def test_bounds(self, rng):
        v = mean_intensity_difference(rng.random((6, 6)), rng.random((6, 6)))
        assert 0.0 <= v <= 1.0


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(PhantomConfig(height=32, width=32, seed=2), 4)


class FailingEngine:
    tag = "flaky"

    def __call__(self, target, source, source_labels=None):
        if target is source:
            raise RegistrationError("refusing identical pair")
        return IdentityEngine()(target, source)


class TestPairwise:
    def test_identity_engine_equals_pre_registration(self, corpus):
        dm = pairwise_matrix(IdentityEngine(), corpus)
        assert dm.values.shape == (4, 4) and dm.model_tag == "identity"
        for i, t in enumerate(corpus):
            for j, s in enumerate(corpus):
                assert dm.values[i, j] == pytest.approx(mean_dice(t.labels, s.labels), abs=1e-15)
        assert np.all(np.diag(dm.values) == 1.0)

    def test_single_sample(self, corpus):
        eng = DirectEngine(LossConfig(), lr=0.05, stop=StopRule(max_iters=50))
        dm = pairwise_matrix(eng, corpus[:1])
        assert dm.values.shape == (1, 1) and dm.values[0, 0] == pytest.approx(1.0, abs=1e-6)

    def test_direct_engine_diagonal_and_determinism(self, corpus):
        eng = DirectEngine(LossConfig(alpha=0.5), lr=0.05, stop=StopRule(max_iters=40))
        a = pairwise_matrix(eng, corpus[:3])
        b = pairwise_matrix(eng, corpus[:3])
        ident = pairwise_matrix(IdentityEngine(), corpus[:3])
        assert np.array_equal(a.values, b.values)
        assert np.all(np.diag(a.values) >= np.diag(ident.values))
        assert np.all((a.values >= 0) & (a.values <= 1))

    def test_failures_recorded_as_nan(self, corpus):
        dm, _ = pairwise_evaluation(FailingEngine(), corpus[:3])
        assert np.all(np.isnan(np.diag(dm.values)))
        assert np.isfinite(dm.values[0, 1])
        assert sorted((i, j) for i, j, _ in dm.failures) == [(0, 0), (1, 1), (2, 2)]

    def test_workers_match_serial(self, corpus):
        a = pairwise_matrix(IdentityEngine(), corpus, workers=2)
        b = pairwise_matrix(IdentityEngine(), corpus)
        assert np.array_equal(a.values, b.values)

    def test_region_report(self, corpus):
        rep = region_report(IdentityEngine(), corpus)
        dm = pairwise_matrix(IdentityEngine(), corpus)
        assert sorted(rep.per_label) == [1, 2, 3, 4]
        assert np.mean(list(rep.per_label.values())) == pytest.approx(dm.values.mean(), abs=1e-12)

    def test_region_report_degenerate(self):
        same = generate_corpus(PhantomConfig(height=32, width=32, deform_amplitude=0,
                                             intensity_jitter=0, noise_sigma=0), 3)
        rep = region_report(IdentityEngine(), same)
        assert rep.per_label == {1: 1.0, 2: 1.0, 3: 1.0, 4: 1.0}


class TestDelta:
    def test_hand(self):
        a = DiceMatrix(np.array([[1.0, 0.5], [0.25, 1.0]]), "a")
        b = DiceMatrix(np.array([[0.5, 0.5], [0.5, 1.0]]), "b")
        d = delta_matrix(a, b)
        np.testing.assert_array_equal(d.values, [[0.5, 0.0], [-0.25, 0.0]])
        assert d.model_tag == "a-minus-b"

    def test_self_zero_and_antisymmetric(self, rng):
        a = DiceMatrix(rng.random((5, 5)), "a")
        b = DiceMatrix(rng.random((5, 5)), "b")
        assert not delta_matrix(a, a).values.any()
        assert np.array_equal(delta_matrix(a, b).values, -delta_matrix(b, a).values)

    def test_size_mismatch(self):
        with pytest.raises(DimensionError):
            delta_matrix(DiceMatrix(np.zeros((2, 2)), "a"), DiceMatrix(np.zeros((3, 3)), "b"))


class TestCSV:
    def test_round_trip(self, rng, tmp_path):
        vals = rng.random((3, 3))
        vals[1, 2] = np.nan
        write_matrix_csv(DiceMatrix(vals, "direct_mse_0"), tmp_path / "m.csv")
        back = read_matrix_csv(tmp_path / "m.csv")
        assert back.model_tag == "direct_mse_0"
        assert np.array_equal(back.values, vals, equal_nan=True)
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == "# model=direct_mse_0 n=3"

    def test_region_csv(self, tmp_path, corpus):
        write_region_csv(region_report(IdentityEngine(), corpus), tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "label,mean_dice" and len(lines) == 5
