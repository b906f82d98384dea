import numpy as np
import pytest

from mambasl import gradcheck
from mambasl.config import BlockConfig, ModelConfig, SsmConfig
from mambasl.errors import DataError
from mambasl.model import (ModelParams, active_param_names, adaptive_pool,
                           aggregate, empty_params, init_params,
                           input_projection, kernel_size, model_backward,
                           model_forward, param_count, predict,
                           resolved_kernel)


class TestKernelSize:
    @pytest.mark.parametrize("length,expected", [
        (100, 3), (1751, 35), (17984, 359), (1, 1), (2, 2), (3, 3), (150, 3),
    ])
    def test_policy(self, length, expected):
        assert kernel_size(length) == expected

    def test_fixed_override(self):
        cfg = ModelConfig(d_x=2, d_y=2, fixed_k=5)
        assert resolved_kernel(cfg, 1000) == 5
        cfg = ModelConfig(d_x=2, d_y=2)
        assert resolved_kernel(cfg, 1751) == 35


class TestInputProjection:
    def test_pointwise(self):
        gen = np.random.default_rng(0)
        x = gen.normal(size=(2, 5, 3))
        w = gen.normal(size=(4, 3, 1))
        b = gen.normal(size=4)
        y = input_projection(x, w, b, np.array([5, 5]))
        np.testing.assert_allclose(y, x @ w[:, :, 0].T + b, rtol=1e-12)

    def test_sliding_sum(self):
        x = np.ones((1, 4, 1))
        w = np.ones((1, 1, 3))
        y = input_projection(x, w, np.zeros(1), np.array([4]))
        np.testing.assert_allclose(y[0, :, 0], [1.0, 2.0, 3.0, 3.0], rtol=1e-12)

    def test_causality(self):
        gen = np.random.default_rng(1)
        x = gen.normal(size=(1, 7, 2))
        w = gen.normal(size=(3, 2, 4))
        b = gen.normal(size=3)
        y0 = input_projection(x, w, b, np.array([7]))
        x2 = x.copy()
        x2[0, 4:] += 5.0
        y1 = input_projection(x2, w, b, np.array([7]))
        np.testing.assert_array_equal(y0[0, :4], y1[0, :4])

    def test_padding_zeroed(self):
        gen = np.random.default_rng(2)
        x = gen.normal(size=(2, 6, 2))
        w = gen.normal(size=(3, 2, 2))
        y = input_projection(x, w, np.ones(3), np.array([2, 6]))
        np.testing.assert_array_equal(y[0, 2:], 0.0)


class TestAdaptivePool:
    def test_zero_gates_uniform(self):
        gen = np.random.default_rng(3)
        f = gen.normal(size=(2, 4, 3))
        l_t = gen.normal(size=(2, 4, 2))
        mask = np.array([[True] * 4, [True, True, True, False]])
        out, alpha, _ = adaptive_pool(f, l_t, np.zeros((2, 3)), np.zeros(2), mask)
        np.testing.assert_allclose(alpha[0], 0.25, rtol=1e-12)
        np.testing.assert_allclose(alpha[1], [1 / 3, 1 / 3, 1 / 3, 0.0], rtol=1e-12)
        np.testing.assert_allclose(out[1], l_t[1, :3].mean(0), rtol=1e-12)

    def test_two_head_by_hand(self):
        f = np.array([[[2.0], [-3.0]]])               # [1, 2, 1]
        l_t = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        gate_w = np.array([[1.0], [-1.0]])
        out, alpha, heads = adaptive_pool(f, l_t, gate_w, np.zeros(2),
                                          np.ones((1, 2), dtype=bool))
        np.testing.assert_allclose(alpha[0], [0.26894, 0.73106], atol=1e-5)
        np.testing.assert_array_equal(heads[0], [0, 1])
        np.testing.assert_allclose(out[0], alpha[0], rtol=1e-12)

    def test_single_valid_step(self):
        gen = np.random.default_rng(4)
        f = gen.normal(size=(1, 5, 3))
        l_t = gen.normal(size=(1, 5, 4))
        mask = np.zeros((1, 5), dtype=bool)
        mask[0, 0] = True
        out, alpha, _ = adaptive_pool(f, l_t, gen.normal(size=(3, 3)),
                                      gen.normal(size=3), mask)
        np.testing.assert_array_equal(alpha[0], [1, 0, 0, 0, 0])
        np.testing.assert_array_equal(out[0], l_t[0, 0])

    def test_alpha_is_distribution_over_valid_steps(self):
        gen = np.random.default_rng(5)
        for _ in range(20):
            b, seq, d_m, h = 3, 6, 4, 2
            f = gen.normal(size=(b, seq, d_m))
            l_t = gen.normal(size=(b, seq, 2))
            lengths = gen.integers(1, seq + 1, b)
            mask = np.arange(seq)[None] < lengths[:, None]
            _, alpha, _ = adaptive_pool(f, l_t, gen.normal(size=(h, d_m)),
                                        gen.normal(size=h), mask)
            assert (alpha >= 0).all()
            np.testing.assert_allclose(alpha.sum(1), 1.0, rtol=1e-9)
            np.testing.assert_array_equal(alpha[~mask], 0.0)

    def test_no_valid_steps_rejected(self):
        with pytest.raises(DataError):
            adaptive_pool(np.zeros((1, 3, 2)), np.zeros((1, 3, 2)),
                          np.zeros((1, 2)), np.zeros(1),
                          np.zeros((1, 3), dtype=bool))


class TestAggregate:
    L_T = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    MASK = np.ones((1, 2), dtype=bool)

    def test_avg(self):
        out, _ = aggregate(None, self.L_T, "avg", self.MASK)
        np.testing.assert_allclose(out[0], [0.5, 0.5], rtol=1e-12)

    def test_max(self):
        out, _ = aggregate(None, self.L_T, "max", self.MASK)
        np.testing.assert_allclose(out[0], [1.0, 1.0], rtol=1e-12)

    def test_last_respects_mask(self):
        l_t = np.array([[[1.0], [2.0], [99.0]]])
        mask = np.array([[True, True, False]])
        out, _ = aggregate(None, l_t, "last", mask)
        assert out[0, 0] == 2.0

    def test_full_is_affine_map_of_features(self):
        gen = np.random.default_rng(6)
        f = gen.normal(size=(2, 3, 4))
        w = gen.normal(size=(12, 5))
        b = gen.normal(size=5)
        out, _ = aggregate(f, None, "full", np.ones((2, 3), dtype=bool),
                           full_w=w, full_b=b)
        np.testing.assert_allclose(out, f.reshape(2, -1) @ w + b, rtol=1e-12)

    def test_full_rejects_variable_length(self):
        mask = np.array([[True, True, False]])
        with pytest.raises(DataError):
            aggregate(np.zeros((1, 3, 2)), None, "full", mask,
                      full_w=np.zeros((6, 2)), full_b=np.zeros(2))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            aggregate(None, self.L_T, "median", self.MASK)


def tiny_cfg(aggregation="adaptive", depth=1, fixed_k=None, theta=(1, 1, 1),
             dropout=0.0, n_heads=2):
    return ModelConfig(
        d_x=3, d_y=3, d_m=4, depth=depth, n_heads=n_heads, dropout=dropout,
        aggregation=aggregation, fixed_k=fixed_k,
        ssm=SsmConfig(d_state=2, theta_dt=theta[0], theta_b=theta[1],
                      theta_c=theta[2]),
        block=BlockConfig())


def tiny_batch(seed=0, batch=3, seq=8, d_x=3, variable=True):
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(batch, seq, d_x))
    lengths = (np.maximum(seq - 2 * np.arange(batch), 1) if variable
               else np.full(batch, seq))
    mask = np.arange(seq)[None] < lengths[:, None]
    return np.where(mask[:, :, None], x, 0.0), lengths


class TestModelForward:
    def test_zero_gates_equal_avg_pooling(self):
        seq = 8
        cfg_ad = tiny_cfg("adaptive")
        cfg_avg = tiny_cfg("avg")
        params = init_params(cfg_ad, seq, seed=1, dtype=np.float64)
        assert not params.gate_w.any()
        x, lengths = tiny_batch(seed=1, seq=seq)
        logits_ad, _ = model_forward(x, lengths, params, cfg_ad)
        logits_avg, _ = model_forward(x, lengths, params, cfg_avg)
        np.testing.assert_array_equal(logits_ad, logits_avg)

    def test_gate_bias_shift_invariance(self):
        seq = 8
        cfg = tiny_cfg("adaptive")
        params = init_params(cfg, seq, seed=2, dtype=np.float64)
        params.gate_w[...] = np.random.default_rng(7).normal(size=params.gate_w.shape)
        x, lengths = tiny_batch(seed=2, seq=seq)
        base, _ = model_forward(x, lengths, params, cfg)
        params.gate_b += 3.7
        shifted, _ = model_forward(x, lengths, params, cfg)
        np.testing.assert_allclose(shifted, base, rtol=1e-9, atol=1e-12)

    def test_fixed_k_matches_policy(self):
        seq = 200                       # policy kernel = 4
        cfg_policy = tiny_cfg()
        cfg_fixed = tiny_cfg(fixed_k=kernel_size(seq))
        p1 = init_params(cfg_policy, seq, seed=3, dtype=np.float64)
        p2 = init_params(cfg_fixed, seq, seed=3, dtype=np.float64)
        assert p1.k == p2.k
        x, lengths = tiny_batch(seed=3, seq=seq)
        a, _ = model_forward(x, lengths, p1, cfg_policy)
        b, _ = model_forward(x, lengths, p2, cfg_fixed)
        np.testing.assert_array_equal(a, b)

    def test_batch_permutation_equivariance(self):
        cfg = tiny_cfg()
        params = init_params(cfg, 8, seed=4, dtype=np.float64)
        x, lengths = tiny_batch(seed=4, batch=4)
        logits, _ = model_forward(x, lengths, params, cfg)
        perm = np.array([2, 0, 3, 1])
        permuted, _ = model_forward(x[perm], lengths[perm], params, cfg)
        np.testing.assert_array_equal(permuted, logits[perm])

    def test_dropout_zero_train_eval_identical(self):
        from mambasl import rng as rngmod
        cfg = tiny_cfg(dropout=0.0)
        params = init_params(cfg, 8, seed=5, dtype=np.float64)
        x, lengths = tiny_batch(seed=5)
        a, _ = model_forward(x, lengths, params, cfg, train_mode=True,
                             rng=rngmod.stream(0, rngmod.STREAM_DROPOUT))
        b, _ = model_forward(x, lengths, params, cfg, train_mode=False)
        np.testing.assert_array_equal(a, b)

    def test_dropout_masks_differ_by_step(self):
        from mambasl import rng as rngmod
        cfg = tiny_cfg(dropout=0.5)
        params = init_params(cfg, 8, seed=6, dtype=np.float64)
        x, lengths = tiny_batch(seed=6)
        a, _ = model_forward(x, lengths, params, cfg, train_mode=True,
                             rng=rngmod.stream(0, rngmod.STREAM_DROPOUT, 0))
        b, _ = model_forward(x, lengths, params, cfg, train_mode=True,
                             rng=rngmod.stream(0, rngmod.STREAM_DROPOUT, 1))
        assert not np.array_equal(a, b)

    def test_unused_gates_get_zero_grad(self):
        cfg = tiny_cfg("avg")
        params = init_params(cfg, 8, seed=7, dtype=np.float64)
        x, lengths = tiny_batch(seed=7)
        logits, cache = model_forward(x, lengths, params, cfg)
        grads = model_backward(cache, np.ones_like(logits))
        np.testing.assert_array_equal(grads.gate_w, 0.0)
        np.testing.assert_array_equal(grads.gate_b, 0.0)
        assert "gates.w" not in active_param_names(cfg)

    def test_full_mode_rejects_variable_lengths(self):
        cfg = tiny_cfg("full")
        params = init_params(cfg, 8, seed=8, dtype=np.float64)
        x, lengths = tiny_batch(seed=8, variable=True)
        with pytest.raises(DataError):
            model_forward(x, lengths, params, cfg)


class TestPredict:
    def test_argmax(self):
        assert predict(np.array([0.1, 2.0, -1.0])) == 1

    def test_tie_lowest_index(self):
        assert predict(np.array([1.0, 1.0, 1.0])) == 0

    def test_softmax_monotone(self):
        gen = np.random.default_rng(9)
        for _ in range(50):
            logits = gen.normal(size=5)
            e = np.exp(logits - logits.max())
            assert predict(logits) == int(np.argmax(e / e.sum()))

    def test_batched(self):
        out = predict(np.array([[0.0, 1.0], [3.0, -1.0]]))
        np.testing.assert_array_equal(out, [1, 0])


class TestParamCount:
    def test_formula_matches_construction(self):
        gen = np.random.default_rng(10)
        for trial in range(10):
            cfg = ModelConfig(
                d_x=int(gen.integers(1, 5)), d_y=int(gen.integers(2, 6)),
                d_m=int(gen.integers(3, 9)), depth=int(gen.integers(1, 4)),
                n_heads=int(gen.integers(1, 4)),
                aggregation=["adaptive", "avg", "max", "last", "full"][trial % 5],
                ssm=SsmConfig(d_state=int(gen.integers(1, 5)),
                              theta_dt=int(gen.integers(0, 2)),
                              theta_b=int(gen.integers(0, 2)),
                              theta_c=int(gen.integers(0, 2)),
                              use_d=int(gen.integers(0, 2)),
                              share_a=bool(gen.integers(0, 2))),
                block=BlockConfig(expand=int(gen.integers(1, 3))))
            max_len = int(gen.integers(4, 30))
            params = empty_params(cfg, max_len)
            active = set(active_param_names(cfg))
            built = sum(a.size for n, a in params.flat().items() if n in active)
            assert param_count(cfg, params.k, max_len) == built, cfg

    def test_tv_step_adds_low_rank_map(self):
        base = dict(d_x=3, d_y=2, d_m=8)
        on = ModelConfig(ssm=SsmConfig(theta_dt=1), **base)
        off = ModelConfig(ssm=SsmConfig(theta_dt=0), **base)
        j = on.d_inner
        r = on.ssm.resolve_rank(j)
        diff = param_count(on, 3) - param_count(off, 3)
        assert diff == 2 * j * r

    @pytest.mark.parametrize("field", ["theta_b", "theta_c"])
    def test_tv_maps_same_size_as_ti(self, field):
        base = dict(d_x=3, d_y=2, d_m=8)
        on = ModelConfig(ssm=SsmConfig(**{field: 1}), **base)
        off = ModelConfig(ssm=SsmConfig(**{field: 0}), **base)
        assert param_count(on, 3) == param_count(off, 3)

    def test_gates_counted_only_for_adaptive(self):
        base = dict(d_x=3, d_y=2, d_m=8, n_heads=4)
        ad = ModelConfig(aggregation="adaptive", **base)
        avg = ModelConfig(aggregation="avg", **base)
        assert param_count(ad, 3) - param_count(avg, 3) == 4 * (8 + 1)


class TestModelGradients:
    @pytest.mark.parametrize("mode", ["adaptive", "avg", "max", "last", "full"])
    def test_each_aggregation_matches_finite_differences(self, mode):
        cfg, params, x, lengths, labels = gradcheck.make_case(
            length=6, d_x=2, d_m=4, d_state=2, d_y=3, batch=3, n_heads=2,
            depth=1, use_d=1, aggregation=mode, seed=11)
        checks = gradcheck.check_model_case(mode, cfg, params, x, lengths, labels)
        worst = max(c.max_rel_err for c in checks)
        assert worst < 1e-4, [(c.name, c.max_rel_err) for c in checks if not c.ok]

    def test_zero_upstream_gives_zero_grads(self):
        cfg = tiny_cfg()
        params = init_params(cfg, 8, seed=12, dtype=np.float64)
        x, lengths = tiny_batch(seed=12)
        logits, cache = model_forward(x, lengths, params, cfg)
        grads = model_backward(cache, np.zeros_like(logits))
        for name, arr in grads.flat().items():
            np.testing.assert_array_equal(arr, 0.0, err_msg=name)

    def test_gate_grads_route_to_winning_heads(self):
        cfg = tiny_cfg("adaptive", n_heads=2)
        params = init_params(cfg, 8, seed=13, dtype=np.float64)
        # bias head 1 far above head 0: only head 1 can win
        params.gate_b[...] = [-100.0, 100.0]
        x, lengths = tiny_batch(seed=13)
        logits, cache = model_forward(x, lengths, params, cfg)
        grads = model_backward(cache, np.ones_like(logits))
        np.testing.assert_array_equal(grads.gate_w[0], 0.0)
        assert np.abs(grads.gate_w[1]).max() > 0.0


class TestParamsPlumbing:
    def test_flat_round_trip_names(self):
        cfg = tiny_cfg(depth=2)
        params = init_params(cfg, 8, seed=14)
        flat = params.flat()
        assert "conv_in.w" in flat and "blocks.1.ssm.a_log" in flat
        assert "clf.w" in flat and "gates.w" in flat
        rebuilt = empty_params(cfg, 8, dtype=np.float32)
        for name, arr in rebuilt.flat().items():
            assert flat[name].shape == arr.shape, name

    def test_zeros_like_shapes(self):
        cfg = tiny_cfg()
        params = init_params(cfg, 8, seed=15)
        z = params.zeros_like()
        for name, arr in z.flat().items():
            assert not arr.any(), name
            assert arr.shape == params.flat()[name].shape

    def test_init_deterministic_in_seed(self):
        cfg = tiny_cfg()
        a = init_params(cfg, 8, seed=16)
        b = init_params(cfg, 8, seed=16)
        c = init_params(cfg, 8, seed=17)
        flat_a, flat_b, flat_c = a.flat(), b.flat(), c.flat()
        assert all(np.array_equal(flat_a[n], flat_b[n]) for n in flat_a)
        assert any(not np.array_equal(flat_a[n], flat_c[n]) for n in flat_a)
