import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contextflow.geometry import SpatialSlice
from contextflow.sampler import IntegrationConfig, integrate, ivp_sample, n_steps, next_step_sample
from contextflow.trainer import LongitudinalDataset
from contextflow.velocity import DivergenceError, init_field

from test_velocity import randomized_field


def exp_field(t, X):
    return X


def dataset(rng, times=(0.0, 0.5, 1.0), n=5, d=2):
    return LongitudinalDataset([SpatialSlice(t, rng.standard_normal((n, d)), rng.uniform(0, 1, (n, 2)))
                                for t in times])


class TestConfig:
    @pytest.mark.parametrize("kw", [{"method": "midpoint"}, {"steps_per_unit_time": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            IntegrationConfig(**kw)

    def test_step_count(self):
        cfg = IntegrationConfig(steps_per_unit_time=100)
        assert n_steps(0.0, 1.0, cfg) == 100
        assert n_steps(0.0, 0.3, cfg) == 30
        assert n_steps(0.0, 0.305, cfg) == 31
        assert n_steps(0.0, 1e-6, cfg) == 1


class TestIntegrate:
    @pytest.mark.parametrize("method", ["euler", "rk4"])
    def test_zero_field(self, rng, method):
        X0 = rng.standard_normal((4, 3))
        out = integrate(init_field(3, (5,)), X0, 0.1, 0.9, IntegrationConfig(method))
        np.testing.assert_array_equal(out, X0)

    @pytest.mark.parametrize("method", ["euler", "rk4"])
    def test_constant_field(self, rng, method):
        X0 = rng.standard_normal((4, 2))
        c = np.array([1.5, -2.0])
        out = integrate(lambda t, X: np.broadcast_to(c, X.shape), X0, 0.2, 0.7, IntegrationConfig(method))
        np.testing.assert_allclose(out, X0 + 0.5 * c, rtol=0, atol=1e-13)

    def test_time_only_field(self):
        # dx/dt = 3 t^2 is a cubic; rk4 (Simpson per step) integrates it exactly
        out = integrate(lambda t, X: np.full_like(X, 3 * t * t), np.zeros((1, 1)), 0.0, 1.0,
                        IntegrationConfig("rk4", 7))
        assert out[0, 0] == pytest.approx(1.0, abs=1e-14)

    def test_exponential(self):
        X0 = np.ones((1, 1))
        rk4 = integrate(exp_field, X0, 0.0, 1.0, IntegrationConfig("rk4", 100))[0, 0]
        euler = integrate(exp_field, X0, 0.0, 1.0, IntegrationConfig("euler", 1000))[0, 0]
        assert abs(rk4 - math.e) < 1e-6
        assert abs(euler - math.e) < 1e-2

    def test_euler_is_first_order(self):
        errs = [abs(integrate(exp_field, np.ones((1, 1)), 0, 1, IntegrationConfig("euler", n))[0, 0] - math.e)
                for n in (200, 400)]
        assert 1.8 < errs[0] / errs[1] < 2.2

    def test_zero_interval_and_reversed(self, rng):
        X0 = rng.standard_normal((2, 2))
        out = integrate(exp_field, X0, 0.5, 0.5)
        np.testing.assert_array_equal(out, X0)
        assert out is not X0
        with pytest.raises(ValueError):
            integrate(exp_field, X0, 0.5, 0.4)

    def test_divergence_names_the_step(self):
        with pytest.raises(DivergenceError, match="step 1 of"):
            integrate(lambda t, X: np.full_like(X, np.inf), np.zeros((1, 1)), 0, 1)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31), st.sampled_from(["euler", "rk4"]))
    def test_rows_are_independent(self, n, seed, method):
        g = np.random.default_rng(seed)
        f = randomized_field(2, (6,), seed % 100)
        X0 = g.standard_normal((n, 2))
        cfg = IntegrationConfig(method, 20)
        batch = integrate(f, X0, 0.0, 0.5, cfg)
        for k in range(n):
            np.testing.assert_array_equal(integrate(f, X0[k:k + 1], 0.0, 0.5, cfg)[0], batch[k])


class TestSampling:
    def test_zero_field(self, rng):
        ds = dataset(rng)
        f = init_field(2, (4,))
        np.testing.assert_array_equal(ivp_sample(f, ds, 2), ds[0].expr)
        np.testing.assert_array_equal(next_step_sample(f, ds, 2), ds[1].expr)

    def test_ivp_to_first_slice_is_identity(self, rng):
        ds = dataset(rng)
        np.testing.assert_array_equal(ivp_sample(randomized_field(2, (4,), 0), ds, 0), ds[0].expr)

    def test_modes_agree_on_second_slice(self, rng):
        ds = dataset(rng)
        f = randomized_field(2, (4,), 1)
        np.testing.assert_array_equal(ivp_sample(f, ds, 1), next_step_sample(f, ds, 1))

    def test_next_step_uses_preceding_slice(self, rng):
        ds = dataset(rng)
        f = randomized_field(2, (4,), 2)
        np.testing.assert_array_equal(next_step_sample(f, ds, 2), integrate(f, ds[1].expr, 0.5, 1.0))

    def test_errors(self, rng):
        ds = dataset(rng)
        f = init_field(2, (4,))
        with pytest.raises(ValueError, match="held out"):
            next_step_sample(f, ds, 2, unavailable=(1,))
        with pytest.raises(IndexError):
            next_step_sample(f, ds, 0)
        with pytest.raises(IndexError):
            ivp_sample(f, ds, 3)
