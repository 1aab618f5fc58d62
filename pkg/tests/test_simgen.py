import math

import numpy as np
import pandas as pd
import pytest

from counterdkl.dataset import Dataset, read_csv, write_csv
from counterdkl.errors import DegenerateSplit, InvalidDims, LabelGap
from counterdkl.schemas import DgpConfig, DgpName, SplitSpec
from counterdkl.simgen import (
    B2_BETAS,
    GroundTruthOracle,
    OracleSpec,
    gen_b1,
    gen_b2,
    gen_classification_source,
    gen_confounded,
    gen_ope_synth,
    generate,
    read_classification_source,
    sidecar_path,
    split,
)


class TestB1:
    def test_shapes_and_ranges(self):
        data, oracle = gen_b1(200, seed=1)
        assert data.X.shape == (200, 1) and data.Y.shape == (200, 1)
        assert data.n_actions == 2 and data.dgp == "b1"
        assert np.all(np.abs(data.X) <= 3.0)
        assert set(np.unique(data.A)) <= {0, 1}

    def test_surfaces(self):
        _, oracle = gen_b1(10, seed=0)
        assert oracle.true_surface(np.zeros((1, 1)), 0)[0] == pytest.approx(2.3)
        assert oracle.true_surface(np.zeros((1, 1)), 1)[0] == pytest.approx(5.3)

    def test_behavior_policy(self):
        _, oracle = gen_b1(10, seed=0)
        np.testing.assert_allclose(oracle.behavior_probs(np.array([[-0.2]])), [[0.5, 0.5]])

    def test_deterministic(self):
        a, _ = gen_b1(30, seed=5)
        b, _ = gen_b1(30, seed=5)
        c, _ = gen_b1(30, seed=6)
        np.testing.assert_array_equal(a.Y, b.Y)
        assert not np.array_equal(a.X, c.X)

    def test_noise_level(self):
        data, oracle = gen_b1(4000, seed=11)
        resid = data.Y[:, 0] - oracle.true_surface(data.X, 0)
        resid = np.where(data.A == 1, data.Y[:, 0] - oracle.true_surface(data.X, 1), resid)
        assert resid.std() == pytest.approx(0.75, abs=0.05)


class TestB2:
    def test_shapes(self):
        data, oracle = gen_b2(50, 10, seed=0)
        assert data.X.shape == (50, 10) and data.Y.shape == (50, 2)
        assert oracle.n_actions == 4 and oracle.n_outcomes == 2

    def test_surface_at_origin(self):
        _, oracle = gen_b2(10, 7, seed=0)
        x = np.zeros((1, 7))
        assert oracle.true_surface(x, 0, 0)[0] == pytest.approx(3.2)
        assert oracle.true_surface(x, 1, 0)[0] == pytest.approx(2.2)
        assert oracle.true_surface(x, 0, 1)[0] == pytest.approx(1.1)
        assert oracle.true_surface(x, 2, 1)[0] == pytest.approx(3.1)

    def test_uniform_policy_at_origin(self):
        _, oracle = gen_b2(10, 7, seed=0)
        np.testing.assert_allclose(oracle.behavior_probs(np.zeros((1, 7))), [[0.25] * 4])

    def test_first_and_last_actions_share_coefficients(self):
        assert B2_BETAS[0] == B2_BETAS[3]

    def test_extra_covariates_do_not_matter(self):
        _, oracle = gen_b2(10, 9, seed=0)
        x = np.zeros((1, 9))
        x2 = x.copy()
        x2[0, 7:] = 2.0
        for a in range(4):
            assert oracle.true_surface(x, a, 0)[0] == oracle.true_surface(x2, a, 0)[0]

    @pytest.mark.parametrize("p", [1, 6])
    def test_needs_seven_covariates(self, p):
        with pytest.raises(InvalidDims):
            gen_b2(20, p, seed=0)

    def test_needs_enough_units(self):
        with pytest.raises(InvalidDims):
            gen_b2(3, 7, seed=0)

    def test_regenerate_outcomes(self):
        data, oracle = gen_b2(25, 7, seed=3)
        np.testing.assert_array_equal(oracle.regenerate_outcomes(data.X, data.A), data.Y)


class TestConfounded:
    def test_gamma_zero_equals_b2(self):
        a, oracle = gen_confounded(40, 8, 0.0, seed=2)
        b, _ = gen_b2(40, 8, seed=2)
        np.testing.assert_array_equal(a.A, b.A)
        np.testing.assert_array_equal(a.Y, b.Y)
        assert oracle.dgp == DgpName.B2

    def test_policy_at_origin(self):
        _, oracle = gen_confounded(10, 7, 1.0, seed=0)
        e = math.e
        expected = np.array([1.0, 1.0, e, e]) / (2.0 + 2.0 * e)
        np.testing.assert_allclose(oracle.behavior_probs(np.zeros((1, 7)))[0], expected)

    def test_negative_gamma(self):
        with pytest.raises(InvalidDims):
            gen_confounded(10, 7, -1.0, seed=0)

    def test_gamma_shifts_actions_up(self):
        low, _ = gen_confounded(3000, 7, 0.0, seed=4)
        high, _ = gen_confounded(3000, 7, 3.0, seed=4)
        assert np.mean(high.A >= 2) > np.mean(low.A >= 2)


class TestOpeSynth:
    def test_from_labels(self):
        x, labels = gen_classification_source(100, 4, 3, seed=0)
        data, oracle = gen_ope_synth(x, labels, seed=1)
        np.testing.assert_array_equal(data.A, labels)
        assert data.n_actions == 3 and data.n_outcomes == 1
        betas = np.asarray(oracle.spec.betas)
        assert betas.shape == (3, 4)
        assert set(np.unique(betas)) <= {0.0, 0.2, 0.4}
        np.testing.assert_allclose(oracle.true_surface(x, 2), np.exp(x @ betas[2]))
        np.testing.assert_allclose(oracle.behavior_probs(x[:2]).sum(axis=1), 1.0)
        assert oracle.noise_var()[0] == pytest.approx(0.5)

    def test_label_gap(self):
        with pytest.raises(LabelGap):
            gen_ope_synth(np.zeros((3, 2)), np.array([0, 2, 2]), seed=0)
        with pytest.raises(LabelGap):
            gen_ope_synth(np.zeros((3, 2)), np.array([1, 1, 2]), seed=0)

    def test_classification_source_covers_all_classes(self):
        _, labels = gen_classification_source(12, 3, 5, seed=7)
        assert set(labels.tolist()) == set(range(5))

    def test_read_classification_source(self, tmp_path):
        path = tmp_path / "source.csv"
        pd.DataFrame({"f0": [0.1, 0.2, 0.3], "f1": [1.0, 2.0, 3.0], "label": [0, 1, 0]}).to_csv(path, index=False)
        x, labels = read_classification_source(path)
        assert x.shape == (3, 2)
        np.testing.assert_array_equal(labels, [0, 1, 0])


class TestOracleSidecar:
    def test_save_and_load(self, tmp_path):
        data, oracle = gen_b2(20, 7, seed=8)
        path = oracle.save(sidecar_path(tmp_path / "data.csv"))
        assert path.name == "data.oracle.json"
        loaded = GroundTruthOracle.load(path)
        assert loaded.spec == oracle.spec
        np.testing.assert_array_equal(loaded.regenerate_outcomes(data.X, data.A), data.Y)

    def test_wrong_covariate_count(self):
        oracle = GroundTruthOracle(OracleSpec(dgp=DgpName.B1, seed=0, p=1, n_actions=2, n_outcomes=1))
        with pytest.raises(InvalidDims):
            oracle.true_surface(np.zeros((2, 3)), 0)
        with pytest.raises(InvalidDims):
            oracle.true_surface(np.zeros((2, 1)), 2)


class TestSplit:
    def test_sizes(self):
        data, _ = gen_b1(10, seed=0)
        train, test = split(data, SplitSpec(train_fraction=0.8, seed=0))
        assert train.n_units == 8 and test.n_units == 2

    def test_disjoint_and_seeded(self):
        data, _ = gen_b1(30, seed=0)
        train, test = split(data, SplitSpec(seed=3))
        again, _ = split(data, SplitSpec(seed=3))
        rows = {tuple(r) for r in train.X} | {tuple(r) for r in test.X}
        assert len(rows) == 30
        np.testing.assert_array_equal(train.X, again.X)

    def test_degenerate(self):
        data, _ = gen_b1(2, seed=0)
        with pytest.raises(DegenerateSplit):
            split(data, SplitSpec(train_fraction=0.9))


class TestGenerate:
    @pytest.mark.parametrize(
        "config, actions, outcomes",
        [
            (DgpConfig(name=DgpName.B1, n=20), 2, 1),
            (DgpConfig(name=DgpName.B2, n=20, p=7), 4, 2),
            (DgpConfig(name=DgpName.CONFOUNDED, n=20, p=7, gamma=0.5), 4, 2),
            (DgpConfig(name=DgpName.OPE_SYNTH, n=20, p=3, n_actions=3), 3, 1),
        ],
    )
    def test_dispatch(self, config, actions, outcomes):
        data, oracle = generate(config, seed=0)
        assert (data.n_actions, data.n_outcomes) == (actions, outcomes)
        assert (config.num_actions, config.num_outcomes) == (actions, outcomes)
        assert oracle.n_actions == actions


class TestDatasetCsv:
    def test_round_trip(self, tmp_path):
        data, _ = gen_b2(15, 7, seed=6)
        path = write_csv(data, tmp_path / "b2.csv")
        assert path.read_text(encoding="utf-8").splitlines()[0] == "x0,x1,x2,x3,x4,x5,x6,a,y0,y1"
        loaded = read_csv(path, n_actions=4)
        np.testing.assert_array_equal(loaded.X, data.X)
        np.testing.assert_array_equal(loaded.A, data.A)
        np.testing.assert_array_equal(loaded.Y, data.Y)

    def test_rejects_bad_actions(self):
        with pytest.raises(ValueError):
            Dataset(X=[[0.0]], A=[2], Y=[0.0], n_actions=2)


class TestBehaviorPolicies:
    @pytest.mark.parametrize(
        "config",
        [
            DgpConfig(name=DgpName.B1, n=500),
            DgpConfig(name=DgpName.B2, n=500, p=10),
            DgpConfig(name=DgpName.CONFOUNDED, n=500, p=10, gamma=2.0),
            DgpConfig(name=DgpName.OPE_SYNTH, n=500, p=4, n_actions=3),
        ],
        ids=lambda c: c.name.value,
    )
    def test_probabilities_strictly_inside_unit_interval(self, config):
        data, oracle = generate(config, seed=8)
        probs = oracle.behavior_probs(data.X)
        assert np.all(probs > 0.0) and np.all(probs < 1.0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_b2_arm_frequencies_follow_probabilities(self):
        data, oracle = gen_b2(100_000, 10, seed=21)
        expected = oracle.behavior_probs(data.X).mean(axis=0)
        observed = np.bincount(data.A, minlength=4) / data.n_units
        np.testing.assert_allclose(observed, expected, atol=0.01)

    def test_boosted_share_tends_to_one(self):
        shares = []
        for gamma in (0.0, 1.0, 2.0, 4.0, 8.0, 12.0):
            data, _ = gen_confounded(20_000, 7, gamma, seed=6)
            shares.append(float(np.mean(data.A >= 2)))
        assert all(b > a for a, b in zip(shares, shares[1:]))
        assert shares[-1] >= 0.99


class TestB2Surfaces:
    def test_second_outcome_shift_of_second_action(self, rng):
        _, oracle = gen_b2(10, 9, seed=0)
        x = rng.uniform(-3.0, 3.0, (50, 9))
        diff = oracle.true_surface(x, 1, 1) - oracle.true_surface(x, 0, 1)
        np.testing.assert_allclose(diff, -2.0 + 0.2 * x[:, 5], atol=1e-12)
