import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from helpers import fd_input_check, fd_param_check
from lip2speech.blocks import (
    ConformerBlock,
    FFTBlock,
    FFTStack,
    MultiHeadAttention,
    VariancePredictor,
    init_parameters,
    lengths_to_pad_mask,
    positional_encoding,
)

GRAD_TOL = 1e-3


def identity_attention(dim=2):
    mha = MultiHeadAttention(dim, 1)
    with torch.no_grad():
        for lin in (mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj):
            lin.weight.copy_(torch.eye(dim))
            lin.bias.zero_()
    return mha


class TestPositionalEncoding:
    def test_row_zero(self):
        pe = positional_encoding(5, 8)
        assert torch.equal(pe[0], torch.tensor([0.0, 1.0] * 4))

    def test_range_and_determinism(self):
        pe = positional_encoding(200, 64)
        assert pe.abs().max() <= 1.0
        assert torch.equal(pe, positional_encoding(200, 64))

    def test_odd_dim(self):
        with pytest.raises(ValueError):
            positional_encoding(4, 7)


class TestAttention:
    def test_identical_keys(self):
        mha = identity_attention()
        key = torch.tensor([[[0.3, -1.0]] * 4])
        value = torch.tensor([[[2.0, 5.0]] * 4])
        out = mha(torch.randn(1, 3, 2), key, value)
        assert torch.allclose(out, torch.tensor([2.0, 5.0]).expand(1, 3, 2))

    def test_hand_computed_softmax(self):
        mha = identity_attention()
        q = torch.tensor([[[1.0, 0.0]]], dtype=torch.float64)
        k = torch.tensor([[[2.0, 0.0], [0.0, 0.0]]], dtype=torch.float64)
        v = torch.tensor([[[1.0, 3.0], [5.0, -1.0]]], dtype=torch.float64)
        mha.double()
        a = math.exp(2 / math.sqrt(2))
        w1, w2 = a / (a + 1), 1 / (a + 1)
        expected = torch.tensor([[[w1 * 1 + w2 * 5, w1 * 3 + w2 * -1]]], dtype=torch.float64)
        assert torch.allclose(mha(q, k, v), expected, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permutation_properties(self, seed):
        torch.manual_seed(seed)
        mha = MultiHeadAttention(8, 2).double().eval()
        q, k = torch.randn(1, 5, 8, dtype=torch.float64), torch.randn(1, 6, 8, dtype=torch.float64)
        v = torch.randn(1, 6, 8, dtype=torch.float64)
        out = mha(q, k, v)
        pk = torch.randperm(6)
        assert torch.allclose(mha(q, k[:, pk], v[:, pk]), out, atol=1e-12)
        pq = torch.randperm(5)
        assert torch.allclose(mha(q[:, pq], k, v), out[:, pq], atol=1e-12)

    def test_key_padding_ignored(self):
        mha = MultiHeadAttention(8, 2).eval()
        q, k = torch.randn(1, 3, 8), torch.randn(1, 4, 8)
        mask = torch.tensor([[False, False, True, True]])
        a = mha(q, k, k, mask)
        k2 = k.clone()
        k2[:, 2:] = 100.0
        assert torch.allclose(a, mha(q, k2, k2, mask))

    def test_weights_sum_to_one(self):
        _, w = MultiHeadAttention(8, 2)(torch.randn(2, 3, 8), torch.randn(2, 4, 8), torch.randn(2, 4, 8),
                                        return_weights=True)
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)))

    def test_errors(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(10, 3)
        with pytest.raises(ValueError):
            MultiHeadAttention(8, 2)(torch.randn(1, 2, 4), torch.randn(1, 2, 8), torch.randn(1, 2, 8))


class TestShapes:
    def test_fft_block(self):
        blk = FFTBlock(512, 8).eval()
        x = torch.randn(1, 10, 512)
        y = blk(x)
        assert y.shape == (1, 10, 512) and torch.isfinite(y).all()
        assert torch.equal(y, blk(x))

    def test_conformer_block_and_stack(self):
        blocks = torch.nn.Sequential(*[ConformerBlock(512, 8) for _ in range(8)]).eval()
        x = torch.randn(1, 16, 512)
        assert ConformerBlock(512, 8)(x).shape == (1, 16, 512)
        assert blocks(x).shape == (1, 16, 512)

    def test_variance_predictor(self):
        vp = VariancePredictor(512).eval()
        x = torch.randn(1, 10, 512)
        assert vp(x).shape == (1, 10)
        assert torch.equal(vp(x), vp(x))

    def test_padding_zeroed(self):
        mask = lengths_to_pad_mask(torch.tensor([3, 5]), 5)
        x = torch.randn(2, 5, 8)
        for m in (FFTBlock(8, 2, 3), ConformerBlock(8, 2, 3)):
            assert torch.all(m.eval()(x, mask)[0, 3:] == 0)
        assert torch.all(VariancePredictor(8).eval()(x, mask)[0, 3:] == 0)

    def test_padding_does_not_leak(self):
        mask = lengths_to_pad_mask(torch.tensor([3]), 5)
        x = torch.randn(1, 5, 8)
        x2 = x.clone()
        x2[:, 3:] = 50.0
        for m in (FFTBlock(8, 2, 3), ConformerBlock(8, 2, 3), VariancePredictor(8)):
            m.eval()
            assert torch.allclose(m(x, mask), m(x2, mask), atol=1e-6)

    def test_init(self):
        lin = torch.nn.Linear(16, 4)
        init_parameters(lin)
        assert lin.weight.abs().max() <= 0.25 and torch.all(lin.bias == 0)


def _seeded(factory):
    torch.manual_seed(0)
    return factory().double().eval()


@pytest.mark.parametrize("name,factory", [
    ("fft_block", lambda: FFTBlock(8, 2, kernel=3, expansion=2, dropout=0.0)),
    ("fft_stack", lambda: FFTStack(2, 8, 2, kernel=3, expansion=2, dropout=0.0)),
    ("conformer", lambda: ConformerBlock(8, 2, kernel=3, expansion=2, dropout=0.0)),
    ("variance", lambda: VariancePredictor(8, dropout=0.0, output_scale=100.0)),
])
def test_gradients(name, factory):
    m = _seeded(factory)
    x = torch.randn(1, 4, 8, dtype=torch.float64)
    assert fd_input_check(lambda t: m(t), [x]) < GRAD_TOL
    assert fd_param_check(m, lambda: m(x)) < GRAD_TOL


def test_attention_gradient():
    m = _seeded(lambda: MultiHeadAttention(8, 2))
    q, k = torch.randn(1, 3, 8, dtype=torch.float64), torch.randn(1, 4, 8, dtype=torch.float64)
    assert fd_input_check(lambda a, b: m(a, b, b), [q, k]) < GRAD_TOL


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x ** 2

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 2.1 * x  # 5% too large


def test_checker_detects_wrong_gradient():
    x = torch.randn(1, 3, 4, dtype=torch.float64)
    assert fd_input_check(_WrongGrad.apply, [x]) > 1e-2
    assert fd_input_check(lambda t: t ** 2, [x]) < 1e-6
