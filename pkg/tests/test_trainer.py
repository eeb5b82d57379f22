import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contextflow.geometry import SpatialSlice
from contextflow.trainer import (
    LongitudinalDataset,
    TrainConfig,
    make_coupling,
    sample_conditional_path,
    slice_profiles,
    train,
    training_pairs,
)
from contextflow.transport import SinkhornConfig, exact_ot, max_normalize, sample_pairs, sinkhorn_eot
from contextflow.velocity import DivergenceError, forward, init_field

from conftest import random_slice


def shifted_dataset(rng, n=48, d=2, shift=(1.0, 0.5), n_slices=2):
    X = rng.standard_normal((n, d))
    coords = rng.uniform(0, 1, (n, 2))
    times = np.linspace(0, 1, n_slices)
    c = np.asarray(shift)
    return LongitudinalDataset([SpatialSlice(t, X + k * c, coords, rng.standard_normal((n, 2)))
                                for k, t in enumerate(times)])


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [
        {"coupling_mode": "sinkhorn"}, {"lam": 1.1}, {"alpha": -0.1}, {"epsilon": -1.0},
        {"sigma": -0.1}, {"batch_size": 0}, {"coupling_mode": "paer", "epsilon": 0.0}, {"radius": 0.0},
    ])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        cfg = TrainConfig(coupling_mode="pacm", alpha=0.3, holdout=[2], hidden=[8, 8])
        d = json.loads(json.dumps(cfg.to_dict()))
        assert TrainConfig.from_dict(d) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"coupling": "eot"})


class TestDataset:
    def test_requires_normalized_increasing_times(self, rng):
        a, b = random_slice(rng, 3, time=0.0), random_slice(rng, 3, time=1.0)
        LongitudinalDataset([a, b])
        with pytest.raises(ValueError):
            LongitudinalDataset([b, a])
        with pytest.raises(ValueError):
            LongitudinalDataset([a, random_slice(rng, 3, time=0.5)])
        with pytest.raises(ValueError):
            LongitudinalDataset([a])
        with pytest.raises(ValueError):
            LongitudinalDataset([a, random_slice(rng, 3, d=4, time=1.0)])


class TestConditionalPath:
    def test_boundary_midpoint_and_slope(self, rng):
        xi, xj = np.array([0.0]), np.array([2.0])
        x, u = sample_conditional_path(xi, xj, 0.0, 0.5, 0.0, 0.0, rng)
        assert x.tolist() == [0.0] and u.tolist() == [4.0]
        x, _ = sample_conditional_path(xi, xj, 0.0, 0.5, 0.25, 0.0, rng)
        assert x.tolist() == [1.0]

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            sample_conditional_path([0.0], [1.0], 0.5, 0.5, 0.5, 0.0, rng)
        with pytest.raises(ValueError):
            sample_conditional_path([0.0], [1.0], 0.0, 0.5, 0.7, 0.0, rng)

    def test_noise_statistics(self):
        g = np.random.default_rng(0)
        N = 20000
        xi, xj = np.zeros((N, 1)), np.ones((N, 1))
        x, _ = sample_conditional_path(xi, xj, 0.0, 1.0, np.full(N, 0.5), 0.2, g)
        se = 0.2 / np.sqrt(N)
        assert abs(x.mean() - 0.5) < 3 * se
        assert abs(x.std() - 0.2) < 0.2 * 3 / np.sqrt(2 * N)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.0, 1.0))
    def test_noise_free_samples_lie_on_the_segment(self, seed, frac):
        g = np.random.default_rng(seed)
        xi, xj = g.standard_normal(3), g.standard_normal(3)
        t_i, t_j = 0.2, 0.7
        t = t_i + frac * (t_j - t_i)
        x, u = sample_conditional_path(xi, xj, t_i, t_j, t, 0.0, g)
        np.testing.assert_allclose(x, xi + frac * (xj - xi), atol=1e-12)
        np.testing.assert_allclose(u, (xj - xi) / 0.5, rtol=1e-12)


class TestMakeCoupling:
    def test_random_is_product(self, rng):
        a, b = random_slice(rng, 3), random_slice(rng, 4, time=1.0)
        cp = make_coupling(a, b, TrainConfig(coupling_mode="random"))
        np.testing.assert_array_equal(cp.plan, np.full((3, 4), 1 / 12))

    def test_eot_uses_normalized_cost(self, rng):
        a, b = random_slice(rng, 5), random_slice(rng, 6, time=1.0)
        cfg = TrainConfig(coupling_mode="eot", epsilon=0.2)
        C = ((a.expr[:, None] - b.expr[None]) ** 2).sum(-1)
        ref = sinkhorn_eot(C / C.max(), SinkhornConfig(epsilon=0.2))
        np.testing.assert_allclose(make_coupling(a, b, cfg).plan, ref.plan, atol=1e-14)

    def test_pacm_alpha_one_equals_eot(self, rng):
        a, b = random_slice(rng, 5), random_slice(rng, 5, time=1.0)
        eot = make_coupling(a, b, TrainConfig(coupling_mode="eot"))
        pacm = make_coupling(a, b, TrainConfig(coupling_mode="pacm", alpha=1.0, lam=0.3, radius=0.5))
        np.testing.assert_allclose(pacm.plan, eot.plan, atol=1e-14)
        assert "diffuse" in pacm.meta["note"]

    def test_paer_with_uniform_prior_equals_eot(self, rng):
        # identical neighborhood profiles everywhere give a constant TPM
        n = 6
        base = random_slice(rng, n)
        same = SpatialSlice(0.0, base.expr, np.zeros((n, 2)), base.lr_features)
        other = SpatialSlice(1.0, rng.standard_normal((n, 3)), np.zeros((n, 2)), rng.standard_normal((n, 2)))
        cfg = TrainConfig(coupling_mode="paer", lam=0.5, radius=1.0)
        paer = make_coupling(same, other, cfg)
        eot = make_coupling(same, other, TrainConfig(coupling_mode="eot"))
        np.testing.assert_allclose(paer.plan, eot.plan, atol=1e-12)

    def test_exact_when_epsilon_zero(self, rng):
        a, b = random_slice(rng, 6), random_slice(rng, 6, time=1.0)
        cp = make_coupling(a, b, TrainConfig(coupling_mode="eot", epsilon=0.0))
        assert cp.meta["solver"] == "assignment"

    def test_small_epsilon_pairs_agree_with_exact_assignment(self):
        hits = 0
        total = 0
        for seed in range(10):
            g = np.random.default_rng(seed)
            a, b = random_slice(g, 8), random_slice(g, 8, time=1.0)
            cp = make_coupling(a, b, TrainConfig(coupling_mode="eot", epsilon=1e-3, sinkhorn_max_iters=20000))
            C = max_normalize(((a.expr[:, None] - b.expr[None]) ** 2).sum(-1))
            target = exact_ot(C).plan > 0
            pairs = sample_pairs(cp, 500, g)
            hits += int(target[pairs[:, 0], pairs[:, 1]].sum())
            total += len(pairs)
        assert hits / total >= 0.95

    def test_lr_prior_needs_lr_features(self, rng):
        a, b = random_slice(rng, 3, p=0), random_slice(rng, 3, p=0, time=1.0)
        with pytest.raises(ValueError):
            make_coupling(a, b, TrainConfig(coupling_mode="paer", lam=0.5))

    def test_whole_slice_profiles_differ_from_batch_profiles(self, rng):
        s = random_slice(rng, 40)
        full = slice_profiles(s, 0.3).subset(np.arange(5))
        local = slice_profiles(s.subset(np.arange(5)), 0.3)
        assert not np.allclose(full.expr_means, local.expr_means)


class TestTrain:
    def test_zero_epochs_keeps_init(self, rng):
        ds = shifted_dataset(rng)
        res = train(ds, TrainConfig(epochs=0, hidden=(4,)))
        assert res.log == [] and res.optimizer.step == 0
        assert np.all(forward(res.field, 0.5, ds[0].expr) == 0)

    def test_deterministic(self, rng):
        ds = shifted_dataset(rng, n_slices=3)
        cfg = TrainConfig(coupling_mode="paer", epochs=5, batch_size=16, hidden=(8,), seed=3, lam=0.5)
        a, b = train(ds, cfg), train(ds, cfg)
        assert json.dumps(a.log) == json.dumps(b.log)
        assert all(np.array_equal(p, q) for p, q in zip(a.field.params, b.field.params))
        c = train(ds, TrainConfig(**{**cfg.to_dict(), "seed": 4}))
        assert json.dumps(c.log) != json.dumps(a.log)

    def test_log_records(self, rng):
        ds = shifted_dataset(rng, n_slices=3)
        res = train(ds, TrainConfig(epochs=3, batch_size=8, hidden=(4,)))
        assert [r["epoch"] for r in res.log] == [0, 1, 2]
        assert [p["pair"] for p in res.log[0]["pairs"]] == [[0, 1], [1, 2]]
        assert all(np.isfinite(r["loss"]) for r in res.log)
        assert res.optimizer.step == 3
        json.dumps(res.log)

    def test_per_pair_updates(self, rng):
        ds = shifted_dataset(rng, n_slices=3)
        res = train(ds, TrainConfig(epochs=2, batch_size=8, hidden=(4,), per_pair_update=True))
        assert res.optimizer.step == 4

    def test_holdout_isolation(self, rng):
        ds = shifted_dataset(rng, n_slices=5)
        res = train(ds, TrainConfig(epochs=4, batch_size=8, hidden=(4,), holdout=(2,), coupling_mode="pacm"))
        assert res.slice_usage[2] == 0
        assert training_pairs(5, (2,)) == [(0, 1), (1, 3), (3, 4)]
        assert {tuple(p["pair"]) for p in res.log[0]["pairs"]} == {(0, 1), (1, 3), (3, 4)}

    def test_holdout_is_an_input_not_a_side_channel(self, rng):
        # replacing the held-out slice's data must not change anything
        ds = shifted_dataset(rng, n_slices=3)
        swapped = LongitudinalDataset([ds[0], random_slice(rng, 48, d=2, time=0.5), ds[2]])
        cfg = TrainConfig(epochs=3, batch_size=8, hidden=(4,), holdout=(1,), coupling_mode="paer", lam=0.5)
        assert json.dumps(train(ds, cfg).log) == json.dumps(train(swapped, cfg).log)

    def test_errors(self, rng):
        ds = shifted_dataset(rng, n_slices=3)
        with pytest.raises(ValueError):
            train(ds, TrainConfig(holdout=(0, 1), epochs=1))
        with pytest.raises(ValueError):
            train(ds, TrainConfig(holdout=(7,), epochs=1))

    def test_divergence_reports_epoch(self, rng):
        ds = shifted_dataset(rng)
        field = init_field(2, (4,), seed=0)
        field.weights[-1][:] = 1e300
        field.biases[-1][:] = 1e300
        with pytest.raises(DivergenceError, match="epoch 0"):
            train(ds, TrainConfig(epochs=2, hidden=(4,)), field=field)

    def test_learns_constant_velocity(self):
        g = np.random.default_rng(5)
        c = np.array([1.0, 0.5])
        ds = shifted_dataset(g, n=64, shift=c)
        cfg = TrainConfig(coupling_mode="eot", epsilon=0.005, epochs=400, lr=1e-2,
                          hidden=(32, 32), batch_size=64, seed=1)
        res = train(ds, cfg)
        X = np.concatenate([ds[0].expr, ds[1].expr])
        T = np.repeat([0.0, 1.0], 64)
        err = np.linalg.norm(forward(res.field, T, X) - c, axis=1).mean()
        assert err < 0.1 * np.linalg.norm(c)
