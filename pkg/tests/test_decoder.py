import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from trajllm.nn.decoder import (
    LaneGuidedAttention,
    LaplaceDecoder,
    MixtureHead,
    TrajectoryMixture,
    assemble_decoder_input,
    laplace_nll,
    mode_classification_loss,
    sample_latent,
    total_loss,
    winner_mode,
    wta_regression_loss,
)

T = 12


class TestLaneGuidedAttention:
    def test_single_candidate(self):
        torch.manual_seed(0)
        att = LaneGuidedAttention(8, 2)
        s, c = torch.randn(3, 8), torch.randn(3, 1, 8)
        want = s + att.attn.out_proj(att.attn.v_proj(c))[:, 0]
        torch.testing.assert_close(att(s, c), want)

    def test_shape(self):
        assert LaneGuidedAttention(128)(torch.randn(2, 128), torch.randn(2, 2, 128)).shape == (2, 128)

    def test_dense_oracle(self):
        torch.manual_seed(1)
        att = LaneGuidedAttention(2, 1).double()
        s, c = torch.randn(1, 2, dtype=torch.float64), torch.randn(1, 2, 2, dtype=torch.float64)
        W = {n: p.detach().numpy() for n, p in att.attn.named_parameters()}
        q = s[0].numpy() @ W["q_proj.weight"].T + W["q_proj.bias"]
        k = c[0].numpy() @ W["k_proj.weight"].T + W["k_proj.bias"]
        v = c[0].numpy() @ W["v_proj.weight"].T + W["v_proj.bias"]
        w = np.exp(k @ q / math.sqrt(2))
        w /= w.sum()
        want = s[0].numpy() + (w @ v) @ W["out_proj.weight"].T + W["out_proj.bias"]
        np.testing.assert_allclose(att(s, c)[0].detach().numpy(), want, atol=1e-6)

    def test_empty(self):
        with pytest.raises(ValueError):
            LaneGuidedAttention(4, 1)(torch.randn(1, 4), torch.randn(1, 0, 4))


class TestAssemble:
    def test_shape(self):
        e = assemble_decoder_input(torch.randn(1, 128), torch.randn(1, 128), torch.randn(1, 16), torch.randn(5, 32))
        assert e.shape == (1, 5, 304)

    def test_seeded_latent(self):
        a = sample_latent(2, 16, torch.Generator().manual_seed(9))
        b = sample_latent(2, 16, torch.Generator().manual_seed(9))
        assert torch.equal(a, b)

    def test_rows_differ_only_in_mode_part(self):
        modes = torch.randn(4, 3)
        e = assemble_decoder_input(torch.randn(1, 5), torch.randn(1, 5), torch.randn(1, 2), modes)[0]
        for i in range(4):
            for j in range(i + 1, 4):
                d = e[i] - e[j]
                assert torch.equal(d[:12], torch.zeros(12))
                assert torch.equal(d[12:], modes[i] - modes[j]) and d.abs().sum() > 0


class TestMixtureHead:
    def test_invariants(self):
        torch.manual_seed(0)
        head = MixtureHead(20, 16, T)
        mix = head(torch.randn(64, 5, 20) * 10)
        assert mix.mu.shape == (64, 5, T, 2)
        torch.testing.assert_close(mix.pi.sum(1), torch.ones(64))
        assert (mix.b >= 1e-3).all()

    def test_identical_rows(self):
        head = MixtureHead(6, 8, T)
        e = torch.randn(1, 1, 6).expand(1, 5, 6)
        mu = head(e).mu
        assert all(torch.equal(mu[0, 0], mu[0, k]) for k in range(5))

    def test_scale_floor_with_huge_negative_logits(self):
        head = MixtureHead(2, 4, T)
        with torch.no_grad():
            head.b_head[-1].bias.fill_(-1e4)
        assert (head(torch.zeros(1, 3, 2)).b >= 1e-3).all()


class TestLaplaceNll:
    y = torch.randn(T, 2, dtype=torch.float64)

    def test_examples(self):
        one = torch.ones(T, 2, dtype=torch.float64)
        assert abs(float(laplace_nll(self.y, self.y, one)) - 2 * math.log(2)) < 1e-12
        assert abs(float(laplace_nll(self.y, self.y, 0.5 * one))) < 1e-12
        assert abs(float(laplace_nll(self.y, self.y + 1, one)) - 2 * (math.log(2) + 1)) < 1e-12

    def test_summation_oracle(self):
        rng = np.random.default_rng(0)
        y, mu = rng.normal(size=(T, 2)), rng.normal(size=(T, 2))
        b = rng.uniform(0.1, 2, size=(T, 2))
        want = sum(math.log(2 * b[t, a]) + abs(y[t, a] - mu[t, a]) / b[t, a] for t in range(T) for a in range(2)) / T
        got = laplace_nll(*(torch.tensor(v) for v in (y, mu, b)))
        assert abs(float(got) - want) < 1e-12

    def test_nonpositive_scale(self):
        with pytest.raises(AssertionError):
            laplace_nll(self.y, self.y, torch.zeros(T, 2, dtype=torch.float64))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, T - 1), st.integers(0, 1))
    def test_midpoint_convexity(self, seed, t, axis):
        rng = np.random.default_rng(seed)
        y = torch.tensor(rng.normal(size=(T, 2)))
        b = torch.tensor(rng.uniform(0.1, 2, size=(T, 2)))
        m0 = torch.tensor(rng.normal(size=(T, 2)))
        m1 = m0.clone()
        m1[t, axis] += float(rng.normal() * 5)
        mid = laplace_nll(y, (m0 + m1) / 2, b)
        assert float(mid) <= (float(laplace_nll(y, m0, b)) + float(laplace_nll(y, m1, b))) / 2 + 1e-12

    def test_gradcheck(self):
        y = torch.randn(T, 2, dtype=torch.float64)
        mu = (y + torch.randn(T, 2, dtype=torch.float64) + 0.3).requires_grad_()
        b = (torch.rand(T, 2, dtype=torch.float64) + 0.5).requires_grad_()
        assert torch.autograd.gradcheck(lambda m, s: laplace_nll(y, m, s), (mu, b), eps=1e-6, rtol=1e-4)


def _mixture(mu, b=None):
    K = mu.shape[1]
    pi = torch.full((mu.shape[0], K), 1.0 / K, dtype=mu.dtype)
    return TrajectoryMixture(pi, mu, torch.ones_like(mu) if b is None else b)


class TestWta:
    def test_exact_match_winner(self):
        gt = torch.randn(1, T, 2, dtype=torch.float64)
        mu = gt[:, None].repeat(1, 5, 1, 1) + torch.arange(5, dtype=torch.float64)[None, :, None, None] - 2
        loss, k = wta_regression_loss(_mixture(mu), gt)
        assert k.tolist() == [2] and abs(float(loss) - 2 * math.log(2)) < 1e-12

    def test_dominance(self):
        gt = torch.zeros(1, T, 2)
        mu = torch.stack([gt[0] + 1, gt[0] + 3])[None]
        assert winner_mode(mu, gt).tolist() == [0]

    def test_brute_force_scan(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            mu, gt = rng.normal(size=(1, 5, T, 2)), rng.normal(size=(1, T, 2))
            errs = [sum(math.hypot(*(mu[0, k, t] - gt[0, t])) for t in range(T)) for k in range(5)]
            assert int(winner_mode(torch.tensor(mu), torch.tensor(gt))) == errs.index(min(errs))

    def test_tie_lowest_index(self):
        gt = torch.zeros(1, T, 2)
        mu = torch.ones(1, 3, T, 2)
        assert winner_mode(mu, gt).tolist() == [0]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-100, 100), st.floats(-100, 100))
    def test_translation_invariance(self, seed, dx, dy):
        rng = np.random.default_rng(seed)
        mu, gt = torch.tensor(rng.normal(size=(2, 4, T, 2))), torch.tensor(rng.normal(size=(2, T, 2)))
        shift = torch.tensor([dx, dy], dtype=torch.float64)
        k0 = winner_mode(mu, gt)
        k1 = winner_mode(mu + shift, gt + shift)
        # translation leaves distances equal up to rounding; compare against those rounded distances
        err = torch.linalg.vector_norm(mu + shift - (gt + shift)[:, None], dim=-1).sum(-1)
        assert torch.equal(k1, err.argmin(1))
        base_err = torch.linalg.vector_norm(mu - gt[:, None], dim=-1).sum(-1)
        gap = (base_err.sort(1).values[:, 1] - base_err.sort(1).values[:, 0])
        assert torch.equal(k0[gap > 1e-6], k1[gap > 1e-6])

    def test_gradient_only_through_winner(self):
        gt = torch.zeros(1, T, 2, dtype=torch.float64)
        mu = torch.randn(1, 3, T, 2, dtype=torch.float64)
        mu[0, 1] = 0.01
        mu.requires_grad_()
        b = torch.ones(1, 3, T, 2, dtype=torch.float64, requires_grad=True)
        loss, k = wta_regression_loss(TrajectoryMixture(torch.ones(1, 3) / 3, mu, b), gt)
        loss.backward()
        assert k.tolist() == [1]
        assert mu.grad[0, [0, 2]].abs().sum() == 0 and mu.grad[0, 1].abs().sum() > 0


class TestClassification:
    def test_confident(self):
        assert float(mode_classification_loss(torch.tensor([[0.0, 1.0, 0.0]]), torch.tensor([1]))) < 1e-12

    def test_uniform(self):
        loss = mode_classification_loss(torch.full((3, 5), 0.2, dtype=torch.float64), torch.tensor([0, 2, 4]))
        assert abs(float(loss) - math.log(5)) < 1e-12

    def test_clamped(self):
        assert abs(float(mode_classification_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([1]))) - -math.log(1e-7)) < 1e-4

    def test_gradcheck(self):
        logits = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
        k = torch.tensor([0, 3, 1, 4])
        assert torch.autograd.gradcheck(lambda z: mode_classification_loss(torch.softmax(z, 1), k), (logits,),
                                        eps=1e-6, rtol=1e-4)


def test_total_loss_arithmetic():
    assert total_loss(1.0, 2.0, 0.5, 1.0) == 3.5
    assert abs(total_loss(2.0, 1.0, 1.0, 0.7) - 3.4) < 1e-12
    assert total_loss(123.0, 1.0, 1.0, 0.0) == 2.0


def test_decoder_without_candidates_skips_guidance():
    torch.manual_seed(0)
    dec = LaplaceDecoder(8, 3, 4, 4, T, 2)
    g, s, o = torch.randn(2, 8), torch.randn(2, 8), torch.randn(2, 4)
    mix = dec(g, s, None, o)
    ref = dec.head(assemble_decoder_input(g, s, o, dec.mode_embeddings))
    assert torch.equal(mix.mu, ref.mu)
