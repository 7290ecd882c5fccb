import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from trajllm.nn.lane import (
    LaneAwareModule,
    MambaBlock,
    MambaLayer,
    lane_loss,
    lane_scores,
    masked_instance_norm,
    select_top_c,
)
from trajllm.nn.ssm import selective_scan, selective_scan_reference


def _random_scan(rng, L, D, N):
    x = rng.normal(size=(L, D))
    delta = np.log1p(np.exp(rng.normal(size=(L, D))))
    A = -np.exp(rng.normal(size=(D, N)))
    B = rng.normal(size=(L, N))
    C = rng.normal(size=(L, N))
    return x, delta, A, B, C


def _t(*arrays, batch=True):
    out = []
    for a, is_seq in zip(arrays, (True, True, False, True, True)):
        t = torch.as_tensor(a, dtype=torch.float64)
        out.append(t[None] if batch and is_seq else t)
    return out


class TestSelectiveScan:
    def test_hand_cases(self):
        A, delta = np.array([[-1.0]]), np.full((2, 1), math.log(2))
        y = selective_scan_reference(np.ones((2, 1)), delta, A, np.ones((2, 1)), np.ones((2, 1)))
        assert round(y[0, 0], 4) == 0.6931 and round(y[1, 0], 4) == 1.0397
        for method in ("fused", "sequential", "chunked"):
            yt = selective_scan(*_t(np.ones((2, 1)), delta, A, np.ones((2, 1)), np.ones((2, 1))), method=method)
            assert [round(v, 4) for v in yt[0, :, 0].tolist()] == [0.6931, 1.0397]

    def test_zero_readout(self):
        rng = np.random.default_rng(0)
        x, delta, A, B, _ = _random_scan(rng, 7, 3, 4)
        y = selective_scan(*_t(x, delta, A, B, np.zeros((7, 4))))
        assert torch.equal(y, torch.zeros_like(y))

    @pytest.mark.parametrize("method", ["fused", "sequential", "chunked"])
    def test_matches_reference(self, method):
        rng = np.random.default_rng(1)
        for _ in range(10):
            L = int(rng.integers(1, 65))
            x, delta, A, B, C = _random_scan(rng, L, 6, 4)
            got = selective_scan(*_t(x, delta, A, B, C), method=method)[0].numpy()
            np.testing.assert_allclose(got, selective_scan_reference(x, delta, A, B, C), atol=1e-5, rtol=0)

    def test_nonpositive_delta_asserts(self):
        with pytest.raises(AssertionError):
            selective_scan_reference(np.ones((1, 1)), np.zeros((1, 1)), -np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)))

    def test_fused_gradcheck(self):
        rng = np.random.default_rng(2)
        args = [t.requires_grad_() for t in _t(*_random_scan(rng, 5, 2, 3))]
        assert torch.autograd.gradcheck(lambda *a: selective_scan(*a, method="fused"), args)

    def test_fused_grad_equals_autograd(self):
        rng = np.random.default_rng(3)
        base = _t(*_random_scan(rng, 9, 3, 2))
        grads = {}
        for m in ("fused", "sequential"):
            args = [t.clone().requires_grad_() for t in base]
            selective_scan(*args, method=m).pow(2).sum().backward()
            grads[m] = [a.grad for a in args]
        for a, b in zip(grads["fused"], grads["sequential"]):
            torch.testing.assert_close(a, b)


class TestMamba:
    def test_block_shape_and_determinism(self):
        torch.manual_seed(0)
        block = MambaBlock(32, expand=2)
        F_in = torch.randn(2, 64, 32)
        q1, q2 = block(F_in), block(F_in)
        assert q1.shape == (2, 64, 32) and torch.equal(q1, q2)

    def test_init_ranges(self):
        block = MambaBlock(8, d_state=4)
        assert torch.equal(block.A[0], -torch.arange(1, 5, dtype=torch.float32))
        dt = torch.nn.functional.softplus(block.delta_bias)
        assert (dt >= 1e-3 - 1e-9).all() and (dt <= 0.1 + 1e-9).all()

    def test_delta_kernel_conv_reduces_to_silu(self):
        torch.manual_seed(1)
        block = MambaBlock(4)
        with torch.no_grad():
            block.conv.weight.zero_()
            block.conv.weight[:, 0, -1] = 1.0  # current position only
            block.conv.bias.zero_()
        F_in = torch.randn(1, 6, 4)
        torch.testing.assert_close(block.branch_m(F_in), torch.nn.functional.silu(block.in_proj_m(F_in)))

    def test_conv_is_causal(self):
        torch.manual_seed(2)
        block = MambaBlock(4)
        F_in = torch.randn(1, 8, 4)
        F2 = F_in.clone()
        F2[0, 5:] += 3.0
        assert torch.equal(block(F_in)[0, :5], block(F2)[0, :5])

    def test_layer_zero_weights_is_identity(self):
        torch.manual_seed(3)
        layer = MambaLayer(8, dropout=0.1).eval()
        with torch.no_grad():
            layer.block.out_proj.weight.zero_()
            layer.block.out_proj.bias.zero_()
            for m in layer.ffn:
                if isinstance(m, torch.nn.Linear):
                    m.weight.zero_(); m.bias.zero_()
        F_in = torch.randn(2, 10, 8)
        assert torch.equal(layer(F_in), F_in)

    def test_eval_ignores_dropout_seed(self):
        layer = MambaLayer(8, dropout=0.5).eval()
        F_in = torch.randn(1, 6, 8)
        torch.manual_seed(0); a = layer(F_in)
        torch.manual_seed(1); b = layer(F_in)
        assert torch.equal(a, b)

    def test_instance_norm_constant_channel(self):
        x = torch.ones(1, 5, 3)
        out = masked_instance_norm(x)
        assert torch.isfinite(out).all() and torch.equal(out, torch.zeros_like(out))

    def test_padding_trim_equivalence(self):
        torch.manual_seed(4)
        mod = LaneAwareModule(8, t_f=12, n_layers=3, dropout=0.0).eval()
        s = torch.randn(1, 8)
        f = torch.randn(1, 6, 8)
        mask = torch.tensor([[True] * 4 + [False] * 2])
        S_full, p_full = mod(s, f, mask)
        S_cut, p_cut = mod(s, f[:, :4], mask[:, :4])
        torch.testing.assert_close(S_full[:, :4], S_cut, atol=1e-5, rtol=0)
        torch.testing.assert_close(p_full[:, :4], p_cut, atol=1e-6, rtol=0)
        assert torch.equal(p_full[:, 4:], torch.zeros_like(p_full[:, 4:]))

    def test_stack_depth_default(self):
        mod = LaneAwareModule(8)
        mod(torch.randn(1, 8), torch.randn(1, 3, 8), torch.ones(1, 3, dtype=torch.bool))
        assert len(mod.layers) == 3 and mod.mamba_calls == 3


class TestLaneStream:
    def test_shape(self):
        mod = LaneAwareModule(128)
        assert mod.build_lane_stream(torch.randn(1, 128), torch.randn(1, 64, 128),
                                     torch.ones(1, 64, dtype=torch.bool)).shape == (1, 64, 128)

    def test_zero_inputs(self):
        mod = LaneAwareModule(8)
        with torch.no_grad():
            mod.stream_proj.bias.zero_()
        F_in = mod.build_lane_stream(torch.zeros(1, 8), torch.zeros(1, 4, 8), torch.ones(1, 4, dtype=torch.bool))
        assert torch.equal(F_in, torch.zeros_like(F_in))

    def test_dense_oracle(self):
        mod = LaneAwareModule(8).double()
        s, f = torch.randn(2, 8, dtype=torch.float64), torch.randn(2, 5, 8, dtype=torch.float64)
        mask = torch.tensor([[True] * 5, [True] * 3 + [False] * 2])
        W, b = mod.stream_proj.weight.detach().numpy(), mod.stream_proj.bias.detach().numpy()
        want = np.zeros((2, 5, 8))
        for i in range(2):
            for l in range(5):
                if mask[i, l]:
                    want[i, l] = np.concatenate([s[i].numpy(), f[i, l].numpy()]) @ W.T + b
        np.testing.assert_allclose(mod.build_lane_stream(s, f, mask).detach().numpy(), want, atol=1e-6)


class TestScores:
    def test_uniform(self):
        p = lane_scores(torch.zeros(1, 8, 12), torch.ones(1, 8, dtype=torch.bool))
        assert torch.allclose(p, torch.full_like(p, 1 / 8))

    def test_softmax_oracle_and_mask(self):
        logits = torch.randn(2, 6, 12, dtype=torch.float64)
        mask = torch.tensor([[True] * 6, [True] * 4 + [False] * 2])
        p = lane_scores(logits, mask)
        for i in range(2):
            n = int(mask[i].sum())
            e = np.exp(logits[i, :n].numpy())
            np.testing.assert_allclose(p[i, :n].numpy(), e / e.sum(0), atol=1e-6)
            assert (p[i, n:] == 0).all()
        torch.testing.assert_close(p.sum(1), torch.ones(2, 12, dtype=torch.float64))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-50, 50, allow_nan=False))
    def test_shift_invariance(self, c):
        logits = torch.randn(1, 5, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        mask = torch.ones(1, 5, dtype=torch.bool)
        torch.testing.assert_close(lane_scores(logits + c, mask), lane_scores(logits, mask))

    def test_all_masked(self):
        with pytest.raises(ValueError):
            lane_scores(torch.zeros(1, 3, 2), torch.zeros(1, 3, dtype=torch.bool))


class TestTopC:
    def _field(self, means, T=4):
        return torch.tensor(means, dtype=torch.float64)[None, :, None].expand(1, len(means), T)

    def test_argsort_example(self):
        probs = self._field([0.5, 0.3, 0.2])
        feats = torch.arange(6, dtype=torch.float64).view(1, 3, 2)
        cand = select_top_c(probs, torch.ones(1, 3, dtype=torch.bool), feats, 2)
        assert cand.indices.tolist() == [[0, 1]]
        assert torch.equal(cand.features, feats[:, :2])

    def test_all_lanes(self):
        probs = self._field([0.2, 0.5, 0.3])
        cand = select_top_c(probs, torch.ones(1, 3, dtype=torch.bool), torch.randn(1, 3, 2), 3)
        assert cand.indices.tolist() == [[1, 2, 0]]

    def test_clamp_warns(self, caplog):
        probs = self._field([0.6, 0.4, 0.0])
        mask = torch.tensor([[True, True, False]])
        cand = select_top_c(probs, mask, torch.randn(1, 3, 2), 3)
        assert cand.indices.shape == (1, 2) and "clamping" in caplog.text

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_brute_force_sort(self, seed):
        rng = np.random.default_rng(seed)
        L = int(rng.integers(3, 10))
        # coarse values force ties
        p = rng.integers(0, 4, size=(L, 5)).astype(np.float64)
        mask = np.ones(L, bool)
        cand = select_top_c(torch.tensor(p)[None], torch.tensor(mask)[None], torch.randn(1, L, 2), 3)
        means = p.mean(1)
        order = sorted(range(L), key=lambda i: (-means[i], i))[:3]
        assert cand.indices[0].tolist() == order
        sc = cand.scores[0].tolist()
        assert sc == sorted(sc, reverse=True)
        assert np.allclose(sc, means[order])


class TestLaneLoss:
    def test_uniform_closed_form(self):
        probs = torch.full((1, 8, 12), 1 / 8, dtype=torch.float64)
        labels = torch.zeros(1, 12, 8, dtype=torch.long)
        labels[0, :, 3] = 1
        loss = lane_loss(probs, labels, torch.ones(1, 8, dtype=torch.bool))
        assert abs(float(loss) - 12 * math.log(8)) < 1e-9
        assert round(float(loss), 3) == 24.953

    def test_perfect(self):
        labels = torch.zeros(1, 12, 4, dtype=torch.long)
        labels[0, :, 1] = 1
        probs = labels.transpose(1, 2).double()
        loss = lane_loss(probs, labels, torch.ones(1, 4, dtype=torch.bool))
        assert abs(float(loss) - 12 * -math.log(1 - 1e-7)) < 1e-12

    def test_label_on_masked_lane(self):
        labels = torch.zeros(1, 2, 3, dtype=torch.long)
        labels[0, :, 2] = 1
        with pytest.raises(ValueError, match="masked lane"):
            lane_loss(torch.full((1, 3, 2), 0.5), labels, torch.tensor([[True, True, False]]))

    def test_gradcheck(self):
        logits = torch.randn(2, 5, 3, dtype=torch.float64, requires_grad=True)
        mask = torch.tensor([[True] * 5, [True] * 4 + [False]])
        labels = torch.zeros(2, 3, 5, dtype=torch.long)
        labels[0, :, 1] = 1
        labels[1, :, 3] = 1
        assert torch.autograd.gradcheck(lambda z: lane_loss(lane_scores(z, mask), labels, mask), (logits,),
                                        eps=1e-5, atol=1e-8, rtol=1e-4)
