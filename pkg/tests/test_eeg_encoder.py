import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from bmtse.attention import SelfAttention
from bmtse.eeg_encoder import (AdaptiveSpectralGain, EEGEncoder, EncoderConfig, LSTConv, SConv,
                               standardize_eeg)
from bmtse.errors import ConfigError
from bmtse.training import finite_difference_check, randomize_parameters


def tiny_cfg(**kw):
    base = dict(channels=4, samples=32, temporal_dim=8, temporal_stride=4, spatial_dim=8, d_model=8,
                heads=2, k_short=3, k_long=7, k_spatial=3, gn_groups=2, pool_window=3)
    base.update(kw)
    return EncoderConfig(**base)


def test_ls_tconv_shape():
    out = LSTConv(32, 15, 65, 4)(torch.randn(2, 16, 256))
    assert out.shape == (2, 32, 64)


def test_ls_tconv_zero_input_zero_bias():
    m = LSTConv(8, 3, 7, 4)
    with torch.no_grad():
        m.short.bias.zero_()
        m.long.bias.zero_()
    assert torch.count_nonzero(m(torch.zeros(1, 3, 32))) == 0


def test_ls_tconv_indivisible_stride():
    with pytest.raises(ConfigError):
        LSTConv(8, 3, 7, 3)(torch.zeros(1, 2, 32))
    with pytest.raises(ConfigError):
        EncoderConfig(samples=250, temporal_stride=4)


def test_ls_tconv_impulse_matches_direct_convolution():
    torch.manual_seed(0)
    m = LSTConv(4, 3, 7, 1).double()
    with torch.no_grad():
        m.short.bias.zero_()
        m.long.bias.zero_()
    t, t0 = 32, 15
    x = torch.zeros(1, 1, t, dtype=torch.float64)
    x[..., t0] = 1.0
    out = m(x)[0].detach().numpy()
    xs = x[0, 0].numpy()
    for conv, rows in ((m.short, range(0, 2)), (m.long, range(2, 4))):
        for j, r in enumerate(rows):
            w = conv.weight[j, 0, 0].detach().numpy()
            ref = np.correlate(np.pad(xs, w.size // 2), w, mode="valid")
            expected = F.gelu(torch.from_numpy(ref)).numpy()
            np.testing.assert_allclose(out[r], expected, atol=1e-12)
            k = w.size // 2
            np.testing.assert_allclose(out[r, t0 - k: t0 + k + 1], F.gelu(torch.from_numpy(w[::-1].copy())).numpy(),
                                       atol=1e-12)


def test_sconv_shape_and_errors():
    assert SConv(16, 9)(torch.randn(2, 16, 256)).shape == (2, 16, 16)
    with pytest.raises(ConfigError):
        SConv(64, 3)(torch.randn(1, 2, 32))


def test_sconv_constant_channel_identity_kernel():
    m = SConv(8, 3).double()
    with torch.no_grad():
        m.conv.weight.zero_()
        m.conv.weight[0, 0, 1] = 1.0
        m.conv.bias.zero_()
    x = torch.zeros(1, 3, 32, dtype=torch.float64)
    x[0, 1] = 0.7
    out = m(x)[0, 1]
    # interior bins are pure; the first/last pooled bins share the zero padding only through the kernel, which is identity
    assert torch.allclose(out, torch.full_like(out, F.gelu(torch.tensor(0.7, dtype=torch.float64)).item()))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_channel_permutation(seed):
    torch.manual_seed(0)
    enc = EEGEncoder(tiny_cfg()).double()
    randomize_parameters(enc, seed=1)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 4, 32, generator=g, dtype=torch.float64)
    perm = torch.randperm(4, generator=g)
    t1, s1 = enc.branches(x)
    t2, s2 = enc.branches(x[:, perm])
    assert torch.allclose(s2, s1[:, perm], atol=1e-12)
    assert torch.allclose(t2, t1, atol=1e-12)


def test_asg_zero_gate_is_half():
    asg = AdaptiveSpectralGain(8, 2, 3, 1e-6).double()
    with torch.no_grad():
        asg.gate_scale.zero_()
    e = torch.randn(2, 8, 10, dtype=torch.float64)
    out = asg(e)
    assert out.shape == (2, 16, 10)
    assert torch.equal(out[:, :8], 0.5 * e)


def test_asg_log_branch_hand_values():
    asg = AdaptiveSpectralGain(4, 2, 5, 1e-6).double()
    L0 = asg(torch.zeros(1, 4, 9, dtype=torch.float64))[:, 4:]
    assert torch.allclose(L0, torch.full_like(L0, math.log(1e-6)))
    assert L0[0, 0, 0].item() == pytest.approx(-13.815510557964274, abs=1e-12)
    L1 = asg(torch.ones(1, 4, 9, dtype=torch.float64))[:, 4:]
    assert torch.allclose(L1, torch.full_like(L1, math.log(1 + 1e-6)), atol=1e-15)


def test_asg_bad_groups():
    with pytest.raises(ConfigError):
        AdaptiveSpectralGain(6, 4, 3, 1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.booleans())
def test_asg_properties(seed, pool_features):
    g = torch.Generator().manual_seed(seed)
    asg = AdaptiveSpectralGain(8, 4, 3, 1e-6, pool_features=pool_features).double()
    with torch.no_grad():
        asg.gate_scale.normal_(generator=g)
        asg.gate_shift.normal_(generator=g)
    e = 3 * torch.randn(2, 8, 12, generator=g, dtype=torch.float64)
    gate = asg.gate(e)
    assert torch.all((gate > 0) & (gate < 1))
    out = asg(e)
    assert out.shape == (2, 16, 12)
    assert torch.all(out[:, :8].abs() <= e.abs())
    assert torch.equal(asg.log_power(-e), asg.log_power(e))


def test_uniform_attention_closed_form():
    attn = SelfAttention(4, 1).double()
    with torch.no_grad():
        attn.q.weight.zero_()
        attn.q.bias.zero_()
        attn.k.weight.zero_()
        attn.v.weight.copy_(torch.eye(4))
        attn.v.bias.zero_()
        attn.out.weight.copy_(torch.eye(4))
        attn.out.bias.zero_()
    x = torch.tensor([[[1.0, 0, 2, -1], [0, 3, 1, 1], [2, 2, -2, 0]]], dtype=torch.float64)
    y, w = attn(x, return_weights=True)
    assert torch.allclose(w, torch.full_like(w, 1 / 3))
    expected = F.layer_norm(x + x.mean(dim=1, keepdim=True), (4,))
    assert torch.allclose(y, expected, atol=1e-12)


def test_attention_rows_sum_to_one():
    attn = SelfAttention(64, 4)
    w = attn.attention_weights(torch.randn(3, 80, 64))
    assert w.shape == (3, 4, 80, 80)
    assert torch.allclose(w.sum(-1), torch.ones(3, 4, 80), atol=1e-6)


def test_encoder_default_shape_and_nondegeneracy():
    torch.manual_seed(0)
    enc = EEGEncoder(EncoderConfig())
    x = torch.randn(2, 16, 256)
    e = enc(x)
    assert e.data.shape == (2, 80, 64)
    assert e.temporal.shape == (2, 64, 64)
    assert torch.dist(e.data[0], e.data[1]) > 0
    assert torch.equal(enc(x).data, e.data)


def test_encoder_rejects_wrong_shape():
    enc = EEGEncoder(tiny_cfg())
    with pytest.raises(ConfigError):
        enc(torch.zeros(1, 5, 32))


def test_standardize_eeg():
    x = 50 * np.random.default_rng(0).standard_normal((2, 16, 256)) + 10
    z = standardize_eeg(x)
    assert np.all(np.abs(z.mean(-1)) < 1e-5)
    assert np.all(np.abs(z.std(-1) - 1) < 1e-3)


@pytest.mark.parametrize("flags", [{}, {"use_temporal": False}, {"use_spatial": False}, {"use_asg": False}])
def test_encoder_gradients_match_finite_differences(flags):
    torch.manual_seed(0)
    enc = EEGEncoder(tiny_cfg(**flags)).double()
    randomize_parameters(enc, seed=2)
    x = torch.randn(1, 4, 32, dtype=torch.float64)
    probe = torch.randn(1, enc.cfg.n_tokens, 8, dtype=torch.float64)
    params = dict(enc.named_parameters())
    n_entries = sum(p.numel() for p in params.values())
    max_err, records = finite_difference_check(lambda: (enc(x).data * probe).sum(), params,
                                               n_samples=None)
    assert len(records) == n_entries  # every parameter entry
    assert max_err < 1e-4
