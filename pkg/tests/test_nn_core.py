import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mrccs.errors import ConfigError, UsageError
from mrccs.nn_core import (AdamState, Conv, ConvSpec, adam_step, backward, concat, conv_forward,
                           depth_to_space, lr_at_epoch, mean_pool, param_store, space_to_depth)

from conftest import rel_inf


def brute_conv(x, w, stride, pad):
    """Direct sliding-window sum over a zero-padded single-sample input."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh, ow = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((o, oh, ow))
    for oc in range(o):
        for i in range(oh):
            for j in range(ow):
                win = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[oc, i, j] = np.sum(win * w[oc])
    return out


class TestConv:
    def test_zero_input_gives_zero(self):
        spec = ConvSpec(1, 3)
        w = torch.randn(spec.weight_shape)
        assert torch.equal(conv_forward(torch.zeros(1, 4, 4), spec, w), torch.zeros(3, 4, 4))

    def test_identity_kernel(self):
        spec = ConvSpec(1, 1, kernel=1)
        x = torch.rand(1, 5, 7)
        assert torch.equal(conv_forward(x, spec, torch.ones(1, 1, 1, 1)), x)

    def test_stride2_all_ones_matches_neighborhood_sums(self):
        x = torch.arange(16, dtype=torch.float32).reshape(1, 4, 4)
        spec = ConvSpec(1, 1, stride=2)
        out = conv_forward(x, spec, torch.ones(1, 1, 3, 3))
        expected = brute_conv(x.numpy(), np.ones((1, 1, 3, 3)), 2, 1)
        assert out.shape == (1, 2, 2)
        # padded 3x3 neighborhoods of (0,0), (0,2), (2,0), (2,2)
        np.testing.assert_array_equal(expected, [[[10, 24], [51, 90]]])
        np.testing.assert_allclose(out.numpy(), expected)

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("groups,cin,cout", [(1, 3, 5), (2, 2, 6)])
    def test_matches_brute_force(self, stride, groups, cin, cout):
        g = torch.Generator().manual_seed(3)
        spec = ConvSpec(cin, cout, stride=stride, groups=groups)
        x = torch.randn(cin, 6, 10, generator=g, dtype=torch.float64)
        w = torch.randn(spec.weight_shape, generator=g, dtype=torch.float64)
        out = conv_forward(x, spec, w).numpy()
        ipg, opg = cin // groups, cout // groups
        for gi in range(groups):
            ref = brute_conv(x[gi * ipg:(gi + 1) * ipg].numpy(), w[gi * opg:(gi + 1) * opg].numpy(), stride, 1)
            np.testing.assert_allclose(out[gi * opg:(gi + 1) * opg], ref, atol=1e-12)

    def test_output_dims_ceil(self):
        spec = ConvSpec(1, 1, stride=2)
        assert spec.output_hw(7, 8) == (4, 4)
        assert conv_forward(torch.rand(1, 7, 8), spec, torch.rand(1, 1, 3, 3)).shape == (1, 4, 4)

    def test_channel_mismatch_names_dims(self):
        with pytest.raises(ConfigError, match="expects 2 input channels, got 3"):
            conv_forward(torch.rand(3, 4, 4), ConvSpec(2, 1), torch.rand(1, 2, 3, 3))

    def test_bad_groups(self):
        with pytest.raises(ConfigError):
            ConvSpec(3, 4, groups=2)


class TestMeanPool:
    def test_block_mean(self):
        x = torch.tensor([[[1.0, 3.0], [5.0, 7.0]]])
        assert mean_pool(x).item() == 4.0

    def test_constant(self):
        assert torch.equal(mean_pool(torch.full((2, 6, 4), 0.37)), torch.full((2, 3, 2), 0.37))

    def test_matches_per_block_oracle(self):
        x = torch.rand(2, 4, 4, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        a = x.numpy()
        ref = np.array([[[a[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].mean() for j in range(2)]
                         for i in range(2)] for c in range(2)])
        np.testing.assert_allclose(mean_pool(x).numpy(), ref, atol=1e-15)

    def test_odd_dims_rejected(self):
        with pytest.raises(ConfigError):
            mean_pool(torch.rand(1, 3, 4))


class TestDepthToSpace:
    def test_paper_shape(self):
        assert depth_to_space(torch.rand(64, 12, 12), 8).shape == (1, 96, 96)

    def test_r1_identity(self):
        x = torch.rand(3, 5, 5)
        assert torch.equal(depth_to_space(x, 1), x)

    def test_2x2_hand_mapping(self):
        x = torch.tensor([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1)
        assert depth_to_space(x, 2).tolist() == [[[1.0, 2.0], [3.0, 4.0]]]

    def test_index_convention(self):
        r, c, h, w = 3, 2, 2, 3
        x = torch.rand(c * r * r, h, w)
        out = depth_to_space(x, r)
        for cc in range(c):
            for hh in range(h):
                for ww in range(w):
                    for i in range(r):
                        for j in range(r):
                            assert out[cc, hh * r + i, ww * r + j] == x[cc * r * r + i * r + j, hh, ww]

    def test_agrees_with_pixel_shuffle(self):
        x = torch.rand(2, 16, 3, 5)
        assert torch.equal(depth_to_space(x, 2), torch.nn.functional.pixel_shuffle(x, 2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_space_to_depth_inverts(self, r, c, h, w, seed):
        x = torch.rand(c * r * r, h, w, generator=torch.Generator().manual_seed(seed))
        assert torch.equal(space_to_depth(depth_to_space(x, r), r), x)
        y = torch.rand(c, h * r, w * r, generator=torch.Generator().manual_seed(seed))
        assert torch.equal(depth_to_space(space_to_depth(y, r), r), y)

    def test_bad_channels(self):
        with pytest.raises(ConfigError):
            depth_to_space(torch.rand(6, 2, 2), 2)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_bias_free_ops_are_linear(alpha, beta, seed):
    g = torch.Generator().manual_seed(seed)
    x, z = torch.rand(2, 4, 8, 8, generator=g).unbind(0)
    spec = ConvSpec(4, 8, stride=2, groups=2)
    w = torch.randn(spec.weight_shape, generator=g)
    ops = [
        lambda t: conv_forward(t, spec, w),
        mean_pool,
        lambda t: depth_to_space(t, 2),
        lambda t: concat(t, 2 * t),
    ]
    for op in ops:
        lhs = op(alpha * x + beta * z)
        rhs = alpha * op(x) + beta * op(z)
        if rhs.abs().max() > 1e-3:
            assert rel_inf(lhs, rhs) <= 1e-4


class TestBackward:
    def test_square(self):
        p = torch.nn.Parameter(torch.tensor(3.0))
        params = {"p": p}
        backward(p**2, params)
        assert p.grad.item() == 6.0

    def test_without_forward(self):
        p = torch.nn.Parameter(torch.tensor(1.0))
        with pytest.raises(UsageError):
            backward(torch.tensor(1.0), {"p": p})

    def test_non_scalar(self):
        p = torch.nn.Parameter(torch.ones(2))
        with pytest.raises(UsageError):
            backward(p * 2, {"p": p})

    def test_zero_network_zero_grads(self):
        conv = Conv(ConvSpec(1, 1, has_bias=True))
        with torch.no_grad():
            conv.weight.zero_()
        x = torch.zeros(1, 1, 4, 4)
        loss = ((conv(x) - 0.0) ** 2).sum()
        params = param_store(conv)
        backward(loss, params)
        for p in params.values():
            assert torch.count_nonzero(p.grad) == 0

    def test_unused_param_gets_zero_grad(self):
        a, b = torch.nn.Parameter(torch.tensor(2.0)), torch.nn.Parameter(torch.tensor(5.0))
        backward(a * 3, {"a": a, "b": b})
        assert a.grad.item() == 3.0 and b.grad.item() == 0.0

    def test_single_kernel_net_matches_finite_differences(self):
        g = torch.Generator().manual_seed(0)
        conv = Conv(ConvSpec(1, 1), g)
        x, t = torch.rand(2, 1, 1, 6, 6, generator=g).unbind(0)
        params = param_store(conv)
        backward(((conv(x) - t) ** 2).sum(), params)
        w = conv.weight
        h = 1e-3
        for idx in np.ndindex(*w.shape):
            with torch.no_grad():
                orig = w[idx].item()
                w[idx] = orig + h
                fp = ((conv(x) - t) ** 2).sum().item()
                w[idx] = orig - h
                fm = ((conv(x) - t) ** 2).sum().item()
                w[idx] = orig
            fd = (fp - fm) / (2 * h)
            ad = w.grad[idx].item()
            assert abs(ad - fd) <= 1e-2 * max(abs(fd), 1e-2)

    def test_deterministic(self):
        def run():
            conv = Conv(ConvSpec(2, 4, stride=2, has_bias=True), torch.Generator().manual_seed(9))
            x = torch.rand(3, 2, 8, 8, generator=torch.Generator().manual_seed(1))
            params = param_store(conv)
            out = conv(x)
            backward((out**2).sum(), params)
            return out.detach(), [p.grad.clone() for p in params.values()]

        (o1, g1), (o2, g2) = run(), run()
        assert torch.equal(o1, o2)
        assert all(torch.equal(a, b) for a, b in zip(g1, g2))


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = torch.nn.Parameter(torch.full((3, 2), 0.5))
        p.grad = torch.ones_like(p)
        adam_step({"p": p}, AdamState(), lr=0.01)
        np.testing.assert_allclose(p.detach().numpy(), 0.5 - 0.01 / (1 + 1e-8), atol=1e-6)

    def test_zero_grad_no_move(self):
        p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
        p.grad = torch.zeros_like(p)
        adam_step({"p": p}, AdamState(), lr=0.1)
        assert p.tolist() == [1.0, -2.0]

    def test_scalar_recurrence_two_steps(self):
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.05
        p = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
        state = AdamState()
        m = v = 0.0
        expected = 0.0
        for t in (1, 2):
            p.grad = torch.ones_like(p)
            adam_step({"p": p}, state, lr)
            m = b1 * m + (1 - b1)
            v = b2 * v + (1 - b2)
            expected -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert state.step == 2
        assert p.item() == pytest.approx(expected, abs=1e-12)

    def test_requires_grad(self):
        p = torch.nn.Parameter(torch.zeros(1))
        with pytest.raises(UsageError):
            adam_step({"p": p}, AdamState(), 0.1)


class TestSchedule:
    def test_values(self):
        assert lr_at_epoch(0) == 1e-3
        assert lr_at_epoch(59) == 1e-3
        assert lr_at_epoch(60) == 2.5e-4
        assert lr_at_epoch(185) == pytest.approx(1e-3 / 4**5, rel=1e-12)
        assert lr_at_epoch(185) == pytest.approx(9.7656e-7, rel=1e-4)

    def test_quarters_exactly_at_milestones(self):
        lrs = [lr_at_epoch(e) for e in range(200)]
        drops = [e for e in range(1, 200) if lrs[e] != lrs[e - 1]]
        assert drops == [60, 90, 120, 150, 180]
        for e in drops:
            assert lrs[e] == lrs[e - 1] / 4

    @pytest.mark.parametrize("epoch", [-1, 200])
    def test_out_of_range(self, epoch):
        with pytest.raises(ConfigError):
            lr_at_epoch(epoch)
