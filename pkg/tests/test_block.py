import numpy as np
import pytest

from mambasl.block import (RMS_EPS, BlockParams, block_backward,
                           block_forward, depthwise_causal_conv, rmsnorm,
                           silu)
from mambasl.config import BlockConfig, SsmConfig
from mambasl.gradcheck import finite_difference, relative_error
from mambasl.ssm import scan_forward

from test_ssm import make_params


def make_block(d_m, expand=1, d_conv=3, d_state=2, r=2, seed=0):
    j = expand * d_m
    gen = np.random.default_rng(seed)
    return BlockParams(
        w_in=gen.normal(0, 0.5, (d_m, 2 * j)),
        conv_k=gen.normal(0, 0.5, (j, d_conv)),
        conv_b=gen.normal(0, 0.1, j),
        w_out=gen.normal(0, 0.5, (j, d_m)),
        norm_gamma=gen.uniform(0.5, 1.5, d_m),
        ssm=make_params(j, d_state, r, seed=seed + 1),
    )


class TestSilu:
    def test_zero(self):
        assert silu(0.0) == 0.0

    def test_linear_asymptote(self):
        # gap is exactly 20*sigma(-20) ~= 4.1e-8
        assert abs(silu(20.0) - 20.0) < 1e-7
        assert abs(silu(30.0) - 30.0) < 1e-8

    def test_unit_value(self):
        np.testing.assert_allclose(silu(1.0), 0.731059, atol=1e-6)


class TestRmsNorm:
    def test_scale_invariance(self):
        gen = np.random.default_rng(0)
        x = gen.normal(size=(3, 5, 4))
        gamma = gen.uniform(0.5, 1.5, 4)
        base = rmsnorm(x, gamma)
        # invariance is exact up to the epsilon in the denominator
        for alpha in (0.5, 3.0, 100.0):
            np.testing.assert_allclose(rmsnorm(alpha * x, gamma), base,
                                       rtol=1e-3, atol=1e-5)

    def test_unit_power_near_identity(self):
        x = np.array([[1.0, -1.0, 1.0, -1.0]])  # mean square exactly 1
        out = rmsnorm(x, np.ones(4))
        np.testing.assert_allclose(out, x / np.sqrt(1.0 + RMS_EPS), rtol=1e-12)

    def test_gamma_scales_output(self):
        x = np.random.default_rng(1).normal(size=(2, 3))
        np.testing.assert_allclose(rmsnorm(x, 2.0 * np.ones(3)),
                                   2.0 * rmsnorm(x, np.ones(3)), rtol=1e-12)


class TestCausalConv:
    def test_delta_kernel_is_identity(self):
        gen = np.random.default_rng(2)
        x = gen.normal(size=(2, 6, 3))
        k = np.zeros((3, 4))
        k[:, -1] = 1.0
        y = depthwise_causal_conv(x, k, np.zeros(3), np.array([6, 6]))
        np.testing.assert_allclose(y, x, rtol=1e-12)

    def test_sliding_sum(self):
        x = np.array([[[1.0], [2.0], [3.0]]])
        y = depthwise_causal_conv(x, np.ones((1, 2)), np.zeros(1), np.array([3]))
        np.testing.assert_allclose(y[0, :, 0], [1.0, 3.0, 5.0], rtol=1e-12)

    def test_causality(self):
        gen = np.random.default_rng(3)
        x = gen.normal(size=(1, 8, 2))
        k = gen.normal(size=(2, 4))
        b = gen.normal(size=2)
        y0 = depthwise_causal_conv(x, k, b, np.array([8]))
        x2 = x.copy()
        x2[0, 5:] += 10.0
        y1 = depthwise_causal_conv(x2, k, b, np.array([8]))
        np.testing.assert_array_equal(y0[0, :5], y1[0, :5])

    def test_bias_and_masking(self):
        x = np.zeros((1, 4, 2))
        k = np.zeros((2, 3))
        b = np.array([1.0, -2.0])
        y = depthwise_causal_conv(x, k, b, np.array([2]))
        np.testing.assert_array_equal(y[0, :2], np.broadcast_to(b, (2, 2)))
        np.testing.assert_array_equal(y[0, 2:], 0.0)


def _cfgs(d_m, expand=1, d_conv=3, d_state=2, use_norm=True, residual=False,
          theta=(1, 1, 1), use_d=1):
    bc = BlockConfig(expand=expand, d_conv=d_conv, use_norm=use_norm,
                     use_block_residual=residual)
    sc = SsmConfig(d_state=d_state, theta_dt=theta[0], theta_b=theta[1],
                   theta_c=theta[2], use_d=use_d)
    return bc, sc


class TestBlockForward:
    def test_zero_gate_annihilates_ssm_path(self):
        d_m = 4
        p = make_block(d_m, seed=4)
        p.w_in[:, d_m:] = 0.0  # gate branch pre-activation forced to 0
        gen = np.random.default_rng(4)
        x = gen.normal(size=(2, 5, d_m))
        lengths = np.array([5, 3])
        bc, sc = _cfgs(d_m, residual=False)
        f, _ = block_forward(x, lengths, p, bc, sc)
        np.testing.assert_array_equal(f, 0.0)
        bc_res, _ = _cfgs(d_m, residual=True)
        f_res, _ = block_forward(x, lengths, p, bc_res, sc)
        np.testing.assert_array_equal(f_res, x)

    def test_identity_wiring_reduces_to_gated_scan(self):
        d_m = 3
        p = make_block(d_m, d_conv=2, seed=5)
        p.w_in = np.hstack([np.eye(d_m), np.eye(d_m)])
        p.conv_k = np.zeros((d_m, 2))
        p.conv_k[:, -1] = 1.0
        p.conv_b[...] = 0.0
        bc, sc = _cfgs(d_m, d_conv=2, use_norm=False)
        gen = np.random.default_rng(5)
        x = gen.normal(size=(1, 6, d_m))
        lengths = np.array([6])
        f, _ = block_forward(x, lengths, p, bc, sc)
        y_ref, _ = scan_forward(silu(x), lengths, p.ssm, sc)
        np.testing.assert_allclose(f, (y_ref * silu(x)) @ p.w_out, rtol=1e-10)

    def test_padded_rows_zero(self):
        d_m = 4
        p = make_block(d_m, seed=6)
        x = np.random.default_rng(6).normal(size=(2, 7, d_m))
        x[0, 3:] = 0.0
        bc, sc = _cfgs(d_m, residual=True)
        f, _ = block_forward(x, np.array([3, 7]), p, bc, sc)
        np.testing.assert_array_equal(f[0, 3:], 0.0)

    def test_end_to_end_causality(self):
        d_m = 4
        p = make_block(d_m, seed=7)
        bc, sc = _cfgs(d_m)
        gen = np.random.default_rng(7)
        x = gen.normal(size=(1, 9, d_m))
        f0, _ = block_forward(x, np.array([9]), p, bc, sc)
        x2 = x.copy()
        x2[0, 6:] += gen.normal(size=(3, d_m))
        f1, _ = block_forward(x2, np.array([9]), p, bc, sc)
        np.testing.assert_array_equal(f0[0, :6], f1[0, :6])


def _block_loss(x, lengths, p, bc, sc, dout):
    f, _ = block_forward(x, lengths, p, bc, sc)
    return float((f * dout).sum())


def _flatten_block(p):
    arrays = {"x~w_in": p.w_in, "x~conv_k": p.conv_k, "x~conv_b": p.conv_b,
              "x~w_out": p.w_out, "x~norm_gamma": p.norm_gamma}
    arrays = {k.split("~")[1]: v for k, v in arrays.items()}
    arrays.update({f"ssm.{k}": getattr(p.ssm, k) for k in vars(p.ssm)})
    return arrays


class TestBlockBackward:
    def test_zero_sensitivity(self):
        d_m = 4
        p = make_block(d_m, seed=8)
        bc, sc = _cfgs(d_m, residual=True)
        x = np.random.default_rng(8).normal(size=(2, 5, d_m))
        _, cache = block_forward(x, np.array([5, 4]), p, bc, sc)
        dx, g = block_backward(cache, np.zeros_like(x))
        np.testing.assert_array_equal(dx, 0.0)
        flat = _flatten_block(g)
        for k, arr in flat.items():
            np.testing.assert_array_equal(arr, 0.0, err_msg=k)

    @pytest.mark.parametrize("use_norm", [True, False])
    @pytest.mark.parametrize("residual", [True, False])
    def test_matches_finite_differences(self, use_norm, residual):
        d_m = 4
        p = make_block(d_m, expand=1, d_conv=3, d_state=2, seed=9)
        bc, sc = _cfgs(d_m, use_norm=use_norm, residual=residual)
        gen = np.random.default_rng(9)
        x = gen.normal(size=(2, 6, d_m))
        lengths = np.array([6, 4])
        dout = gen.normal(size=x.shape)

        _, cache = block_forward(x, lengths, p, bc, sc)
        dx, g = block_backward(cache, dout)
        arrays = {"x": x}
        arrays.update(_flatten_block(p))
        num = finite_difference(
            lambda: _block_loss(x, lengths, p, bc, sc, dout), arrays)
        ana = {"x": dx}
        ana.update(_flatten_block(g))
        for k in arrays:
            assert relative_error(ana[k], num[k]) < 1e-4, k

    def test_residual_adds_passthrough_gradient(self):
        d_m = 4
        p = make_block(d_m, seed=10)
        gen = np.random.default_rng(10)
        x = gen.normal(size=(2, 5, d_m))
        lengths = np.array([5, 5])
        dout = gen.normal(size=x.shape)
        bc_off, sc = _cfgs(d_m, residual=False)
        bc_on, _ = _cfgs(d_m, residual=True)
        _, c_off = block_forward(x, lengths, p, bc_off, sc)
        _, c_on = block_forward(x, lengths, p, bc_on, sc)
        dx_off, _ = block_backward(c_off, dout)
        dx_on, _ = block_backward(c_on, dout)
        np.testing.assert_array_equal(dx_on, dx_off + dout)
