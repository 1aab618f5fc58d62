import math

import numpy as np
import pytest

from counterdkl import causal
from counterdkl.coregion import CoregionFactor, KernelComponent, TaskIndex
from counterdkl.dataset import Dataset
from counterdkl.errors import DimensionMismatch, Divergence, EmptyDataset, ModelFormatError, TaskOutOfRange
from counterdkl.gp_model import (
    Adam,
    ThetaParams,
    block_layout,
    build_model,
    destandardize,
    fit,
    init_params,
    load_model,
    nll,
    nll_grad,
    save_model,
    standardize,
)
from counterdkl.kernels import BaseKernelParams, kernel_eval
from counterdkl.schemas import FitConfig, KernelKind, ModelVariant, ParamGroup, PriorMean
from tests.conftest import central_diff, random_dataset

TRAINABLE = [v for v in ModelVariant if v != ModelVariant.ORACLE]
LOG_2PI = math.log(2.0 * math.pi)


def single_theta(p: int = 1, log_noise: float = 0.0, log_sv: float = 0.0, ls: float = 1.0) -> ThetaParams:
    base = BaseKernelParams(np.full(p, math.log(ls)), log_sv)
    return ThetaParams(components=(KernelComponent(KernelKind.RBF, base),), log_noise=np.array([log_noise]))


def one_action_data(rng, n: int, p: int = 1) -> Dataset:
    x = rng.uniform(-2.0, 2.0, (n, p))
    y = np.sin(2.0 * x[:, 0]) + 0.3 * rng.standard_normal(n)
    return Dataset(X=x, A=np.zeros(n, dtype=int), Y=y, n_actions=1)


def perturbed(thetas, rng, scale=0.1):
    return [t.with_vector(t.to_vector() + scale * rng.standard_normal(t.to_vector().size)) for t in thetas]


class TestStandardize:
    def test_zero_mean_unit_variance(self, small_data):
        train, record = standardize(small_data)
        np.testing.assert_allclose(train.X.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(train.Y.std(axis=0), 1.0)
        np.testing.assert_allclose(destandardize(record, train.Y), small_data.Y, rtol=0, atol=1e-12)

    def test_already_standardized_is_identity(self, small_data):
        train, _ = standardize(small_data)
        again, _ = standardize(train)
        np.testing.assert_allclose(again.X, train.X, rtol=0, atol=1e-12)
        np.testing.assert_allclose(again.Y, train.Y, rtol=0, atol=1e-12)

    def test_constant_column_passes_through(self, rng):
        x = np.column_stack([np.full(5, 3.0), rng.standard_normal(5)])
        train, record = standardize(Dataset(X=x, A=np.zeros(5), Y=rng.standard_normal(5), n_actions=1))
        np.testing.assert_array_equal(train.X[:, 0], 3.0)
        assert record.x_constant.tolist() == [True, False]

    def test_needs_two_units(self):
        with pytest.raises(EmptyDataset):
            standardize(Dataset(X=[[0.0]], A=[0], Y=[1.0], n_actions=1))


class TestBlockLayout:
    @pytest.mark.parametrize(
        "variant, count",
        [(ModelVariant.GP, 4), (ModelVariant.DKL, 4), (ModelVariant.COUNTER_GP, 2), (ModelVariant.COUNTER_DKL, 2), (ModelVariant.MOGP, 1), (ModelVariant.MODKL, 1)],
    )
    def test_block_counts(self, variant, count):
        assert len(block_layout(variant, 2, 2)) == count

    def test_oracle_has_no_blocks(self):
        with pytest.raises(ValueError):
            block_layout(ModelVariant.ORACLE, 2, 1)


class TestNll:
    def test_single_point_hand_value(self):
        data = Dataset(X=[[0.0]], A=[0], Y=[0.0], n_actions=1)
        value = nll([single_theta()], ModelVariant.GP, data)
        assert value == pytest.approx(0.5 * math.log(2.0) + 0.5 * LOG_2PI, abs=1e-6)
        assert value == pytest.approx(1.26551, abs=1e-5)

    def test_single_point_nonzero_target(self):
        data = Dataset(X=[[0.0]], A=[0], Y=[2.0], n_actions=1)
        assert nll([single_theta()], ModelVariant.GP, data) == pytest.approx(2.26551, abs=1e-5)

    def test_noise_gradient_hand_value(self):
        data = Dataset(X=[[0.0]], A=[0], Y=[0.0], n_actions=1)
        grads = nll_grad([single_theta()], ModelVariant.GP, data)
        assert grads[0]["log_noise"][0] == pytest.approx(0.25, abs=1e-6)

    def test_wrong_block_count(self, small_data):
        with pytest.raises(ValueError):
            nll([single_theta(3)], ModelVariant.GP, small_data)

    @pytest.mark.parametrize("variant", TRAINABLE)
    @pytest.mark.parametrize("seed", range(25))
    def test_gradient_matches_finite_differences(self, variant, seed):
        rng = np.random.default_rng(seed)
        data = random_dataset(rng, n=20, p=3, d=2, m=2)
        config = FitConfig(hidden=[4, 2], rank=1)
        thetas = perturbed(init_params(variant, 2, 2, 3, config, rng), rng)
        grads = nll_grad(thetas, variant, data)

        for b, theta in enumerate(thetas):
            analytic = np.concatenate([g.ravel() for g in grads[b].values()])
            rest = lambda vec: nll([*thetas[:b], theta.with_vector(vec), *thetas[b + 1:]], variant, data)
            np.testing.assert_allclose(analytic, central_diff(rest, theta.to_vector()), rtol=1e-4, atol=1e-6)

    def test_gradient_keys_follow_parameters(self, rng):
        thetas = init_params(ModelVariant.MODKL, 2, 2, 3, FitConfig(hidden=[3, 2]), rng)
        grads = nll_grad(thetas, ModelVariant.MODKL, random_dataset(rng))
        assert list(grads[0].keys()) == list(thetas[0].named_arrays().keys())
        for name, arr in thetas[0].named_arrays().items():
            assert grads[0][name].shape == arr.shape


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        out = Adam(learning_rate=0.1).step(np.array([1.0, -2.0]), np.array([1.0, -3.0]))
        np.testing.assert_allclose(out, [0.9, -1.9], atol=1e-7)

    def test_zero_gradient_keeps_parameters(self):
        out = Adam().step(np.array([1.5]), np.array([0.0]))
        np.testing.assert_array_equal(out, [1.5])


class TestFit:
    def test_zero_iterations(self, small_data):
        model = fit(ModelVariant.GP, small_data, FitConfig(iterations=0))
        assert len(model.trajectory) == 1

    def test_trajectory_length_and_best_iterate(self, small_data):
        model = fit(ModelVariant.COUNTER_GP, small_data, FitConfig(iterations=15))
        assert len(model.trajectory) == 16
        assert model.final_nll == min(model.trajectory)
        assert model.final_nll <= model.trajectory[0]

    def test_deterministic(self, small_data):
        config = FitConfig(iterations=5, hidden=[4, 2], seed=3)
        a = fit(ModelVariant.COUNTER_DKL, small_data, config)
        b = fit(ModelVariant.COUNTER_DKL, small_data, config)
        assert a.trajectory == b.trajectory
        np.testing.assert_array_equal(a.thetas[0].to_vector(), b.thetas[0].to_vector())

    def test_oracle_not_trainable(self, small_data):
        with pytest.raises(ValueError):
            fit(ModelVariant.ORACLE, small_data)

    def test_frozen_groups_stay_at_initialization(self, small_data):
        config = FitConfig(iterations=10, freeze=[ParamGroup.KERNEL, ParamGroup.COREGION])
        model = fit(ModelVariant.COUNTER_GP, small_data, config)
        init = fit(ModelVariant.COUNTER_GP, small_data, config.model_copy(update={"iterations": 0}))
        mask = model.thetas[0].group_mask([ParamGroup.KERNEL, ParamGroup.COREGION])
        np.testing.assert_array_equal(model.thetas[0].to_vector()[mask], init.thetas[0].to_vector()[mask])
        assert not np.array_equal(model.thetas[0].to_vector()[~mask], init.thetas[0].to_vector()[~mask])

    def test_noise_only_matches_grid_search(self, rng):
        data = one_action_data(rng, 30)
        config = FitConfig(iterations=1000, freeze=[ParamGroup.KERNEL, ParamGroup.MEAN], learning_rate=0.05)
        model = fit(ModelVariant.GP, data, config)
        train, _ = standardize(data)
        theta = model.thetas[0]
        grid = np.arange(-6.0, 2.0 + 1e-9, 1e-3)
        values = []
        for v in grid:
            arrays = dict(theta.named_arrays())
            arrays["log_noise"] = np.array([v])
            values.append(nll([theta.with_arrays(arrays)], ModelVariant.GP, train))
        best = int(np.argmin(values))
        assert model.final_nll <= values[best] + 1e-3
        assert theta.log_noise[0] == pytest.approx(grid[best], abs=0.05)

    def test_unstable_learning_rate_diverges(self, small_data):
        with pytest.raises(Divergence) as info:
            fit(ModelVariant.GP, small_data, FitConfig(learning_rate=1e6, iterations=3))
        assert info.value.iteration >= 1


class TestPriorMean:
    def test_zero_prior_keeps_means_at_zero(self, small_data):
        model = fit(ModelVariant.COUNTER_GP, small_data, FitConfig(iterations=10, prior_mean=PriorMean.ZERO))
        for theta in model.thetas:
            np.testing.assert_array_equal(theta.mean, 0.0)

    def test_constant_prior_starts_at_task_averages(self, small_data):
        model = fit(ModelVariant.COUNTER_GP, small_data, FitConfig(iterations=0))
        train = model.train_data
        for m, theta in enumerate(model.thetas):
            expected = [train.Y[train.A == a, m].mean() for a in range(2)]
            np.testing.assert_allclose(theta.mean, expected, atol=1e-12)

    def test_unobserved_task_mean_starts_at_zero(self, rng):
        data = Dataset(X=rng.standard_normal((6, 1)), A=np.zeros(6), Y=rng.standard_normal(6) + 4.0, n_actions=2)
        model = fit(ModelVariant.COUNTER_GP, data, FitConfig(iterations=0))
        assert model.thetas[0].mean[1] == 0.0

    def test_far_query_reverts_to_task_mean(self, rng):
        data = one_action_data(rng, 10)
        theta = single_theta(log_sv=math.log(0.5))
        theta = theta.with_arrays({**theta.named_arrays(), "mean": np.array([2.5])})
        model = build_model(ModelVariant.GP, data, [theta], standardize_data=False)
        mean, var = model.predict_batch(np.array([[100.0]]), TaskIndex(0))
        assert mean[0] == pytest.approx(2.5, abs=1e-12)
        assert var[0] == pytest.approx(0.5, abs=1e-12)

    def test_arm_offset_is_learned(self, rng):
        x = rng.uniform(-2.0, 2.0, (40, 1))
        a = np.arange(40) % 2
        y = np.sin(x[:, 0]) + 3.0 * a + 0.1 * rng.standard_normal(40)
        model = fit(ModelVariant.COUNTER_GP, Dataset(X=x, A=a, Y=y, n_actions=2), FitConfig(iterations=100))
        effect = causal.cate_batch(model, np.linspace(-1.5, 1.5, 7).reshape(-1, 1), 1, 0)
        np.testing.assert_allclose(effect, 3.0, atol=0.3)


class TestPosterior:
    @pytest.mark.parametrize("seed", range(50))
    def test_matches_explicit_inverse(self, seed):
        rng = np.random.default_rng(seed)
        n, p = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        noise, sv, prior = rng.uniform(0.05, 0.5), rng.uniform(0.5, 2.0), rng.uniform(-1.0, 1.0)
        data = one_action_data(rng, n, p=p)
        theta = single_theta(p=p, log_noise=math.log(noise), log_sv=math.log(sv), ls=rng.uniform(0.3, 2.0))
        theta = theta.with_arrays({**theta.named_arrays(), "mean": np.array([prior])})
        model = build_model(ModelVariant.GP, data, [theta], standardize_data=False)
        jitter = model.posteriors[0].factor.jitter_used

        base = theta.components[0].base
        k = np.array([[kernel_eval(KernelKind.RBF, base, a, b) for b in data.X] for a in data.X])
        k_inv = np.linalg.inv(k + (noise + jitter) * np.eye(n))
        queries = rng.uniform(-2.0, 2.0, (4, p))
        mean, var = model.predict_batch(queries, TaskIndex(0))
        for q, xq in enumerate(queries):
            ks = np.array([kernel_eval(KernelKind.RBF, base, xq, b) for b in data.X])
            assert mean[q] == pytest.approx(prior + ks @ k_inv @ (data.Y[:, 0] - prior), abs=1e-8)
            assert var[q] == pytest.approx(sv - ks @ k_inv @ ks, abs=1e-8)

    def test_predict_band(self, rng):
        data = one_action_data(rng, 6)
        model = build_model(ModelVariant.GP, data, [single_theta()], standardize_data=False)
        pred = model.predict(np.array([0.3]), TaskIndex(0))
        half = 1.96 * math.sqrt(pred.variance)
        assert pred.lower95 == pytest.approx(pred.mean - half)
        assert pred.upper95 == pytest.approx(pred.mean + half)

    def test_diagonal_coregion_matches_independent_gps(self, small_data):
        base = BaseKernelParams(np.log([0.9, 1.2, 1.5]), math.log(1.3))
        noise = [0.1, 0.3]
        gp_thetas = [
            ThetaParams(components=(KernelComponent(KernelKind.RBF, base),), log_noise=np.array([math.log(noise[a])]))
            for m in range(2) for a in range(2)
        ]
        identity = CoregionFactor(L=np.zeros((2, 1)), log_diag=np.zeros(2))
        counter_thetas = [
            ThetaParams(
                components=(KernelComponent(KernelKind.RBF, base, action_factor=identity),),
                log_noise=np.log(noise), n_actions=2,
            )
            for _ in range(2)
        ]
        assert nll(gp_thetas, ModelVariant.GP, small_data) == pytest.approx(
            nll(counter_thetas, ModelVariant.COUNTER_GP, small_data), abs=1e-8
        )
        gp = build_model(ModelVariant.GP, small_data, gp_thetas)
        counter = build_model(ModelVariant.COUNTER_GP, small_data, counter_thetas)
        queries = np.linspace(-2.0, 2.0, 15).reshape(5, 3)
        for a in range(2):
            for m in range(2):
                mg, vg = gp.predict_batch(queries, TaskIndex(a, m))
                mc, vc = counter.predict_batch(queries, TaskIndex(a, m))
                np.testing.assert_allclose(mg, mc, atol=1e-8)
                np.testing.assert_allclose(vg, vc, atol=1e-8)

    def test_variance_does_not_grow_with_more_data(self, rng, small_data):
        thetas = init_params(ModelVariant.COUNTER_GP, 2, 2, 3, FitConfig(), rng)
        fewer = build_model(ModelVariant.COUNTER_GP, small_data.subset(np.arange(15)), thetas, standardize_data=False)
        more = build_model(ModelVariant.COUNTER_GP, small_data.subset(np.arange(16)), thetas, standardize_data=False)
        queries = rng.uniform(-2.0, 2.0, (10, 3))
        for a in range(2):
            _, v_few = fewer.predict_batch(queries, TaskIndex(a, 0))
            _, v_more = more.predict_batch(queries, TaskIndex(a, 0))
            assert np.all(v_more <= v_few + 1e-10)

    def test_permutation_invariance(self, rng, small_data):
        thetas = init_params(ModelVariant.MOGP, 2, 2, 3, FitConfig(), rng)
        perm = rng.permutation(small_data.n_units)
        a = build_model(ModelVariant.MOGP, small_data, thetas)
        b = build_model(ModelVariant.MOGP, small_data.subset(perm), thetas)
        queries = rng.uniform(-2.0, 2.0, (6, 3))
        for task in (TaskIndex(0, 0), TaskIndex(1, 1)):
            np.testing.assert_allclose(a.predict_batch(queries, task)[0], b.predict_batch(queries, task)[0], atol=1e-8)

    def test_unobserved_block_returns_prior(self, rng):
        x = rng.standard_normal((5, 1))
        data = Dataset(X=x, A=np.zeros(5), Y=rng.standard_normal(5), n_actions=2)
        model = build_model(ModelVariant.GP, data, [single_theta(), single_theta()], standardize_data=False)
        mean, var = model.predict_batch(np.zeros((3, 1)), TaskIndex(1))
        np.testing.assert_array_equal(mean, 0.0)
        np.testing.assert_allclose(var, 1.0)

    def test_query_errors(self, small_data):
        model = fit(ModelVariant.GP, small_data, FitConfig(iterations=0))
        with pytest.raises(TaskOutOfRange):
            model.predict_batch(np.zeros((1, 3)), TaskIndex(2, 0))
        with pytest.raises(TaskOutOfRange):
            model.predict_batch(np.zeros((1, 3)), TaskIndex(0, 2))
        with pytest.raises(DimensionMismatch):
            model.predict_batch(np.zeros((1, 2)), TaskIndex(0, 0))


class TestSerialization:
    def test_round_trip(self, tmp_path, small_data):
        model = fit(ModelVariant.COUNTER_DKL, small_data, FitConfig(iterations=3, hidden=[4, 2]))
        path = save_model(model, tmp_path / "model.json")
        loaded = load_model(path)
        assert loaded.variant == ModelVariant.COUNTER_DKL
        assert loaded.trajectory == model.trajectory
        queries = np.linspace(-1.0, 1.0, 9).reshape(3, 3)
        for task in (TaskIndex(0, 0), TaskIndex(1, 1)):
            np.testing.assert_allclose(model.predict_batch(queries, task)[0], loaded.predict_batch(queries, task)[0], rtol=1e-12)

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{\"format\": \"something\"}", encoding="utf-8")
        with pytest.raises(ModelFormatError):
            load_model(path)
