import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from helpers import analytic_grad, central_difference, param_fd_check, rel_error, tiny_spec
from tscl.backbone import (EncoderSpec, build_encoder, encode, full_attention, num_active_queries,
                           param_count, probsparse_attention, tcn_receptive_field)
from tscl.checkpoint import load_state, save_state, state_checksum
from tscl.errors import CheckpointCorrupt, InvalidSpec, ShapeMismatch

BUDGETS = {"LSTM": 660_000, "TCN": 637_000, "Transformer": 655_000}


@pytest.mark.parametrize("kind", sorted(BUDGETS))
def test_default_parameter_budget(kind):
    count = param_count(build_encoder(EncoderSpec.default(kind, 7), seed=0))
    assert abs(count - BUDGETS[kind]) <= 0.02 * BUDGETS[kind], count


def test_default_tcn_shape():
    enc = build_encoder(EncoderSpec.default("TCN", 7), 0)
    with torch.no_grad():
        out = encode(enc, torch.randn(2, 24, 7))
    assert out.shape == (2, 24, 320)


@pytest.mark.parametrize("kind", ["LSTM", "TCN", "Transformer"])
@given(B=st.integers(1, 3), L=st.integers(1, 12))
def test_shape_invariance(kind, B, L):
    enc = build_encoder(tiny_spec(kind, m=3, d=8), 0)
    with torch.no_grad():
        out = enc(torch.randn(B, L, 3))
    assert out.shape == (B, L, 8)
    assert torch.isfinite(out).all()


@pytest.mark.parametrize("kind", ["LSTM", "TCN", "Transformer"])
def test_zero_input_deterministic(kind):
    spec = EncoderSpec.default(kind, 7)
    x = torch.zeros(1, 16, 7)
    with torch.no_grad():
        a = build_encoder(spec, 5)(x)
        b = build_encoder(spec, 5)(x)
    assert torch.equal(a, b)


def test_seed_controls_init():
    spec = tiny_spec("TCN")
    a, b = build_encoder(spec, 0), build_encoder(spec, 1)
    assert state_checksum(a) == state_checksum(build_encoder(spec, 0))
    assert state_checksum(a) != state_checksum(b)


def test_wrong_feature_arity():
    enc = build_encoder(tiny_spec("TCN", m=3), 0)
    with pytest.raises(ShapeMismatch):
        enc(torch.randn(1, 5, 4))


def test_heads_must_divide_hidden():
    with pytest.raises(InvalidSpec):
        build_encoder(EncoderSpec.default("Transformer", 7, hidden_dim=130), 0)


# -------------------------------------------------------------- causality
def test_tcn_causality_paired_forward():
    enc = build_encoder(EncoderSpec.default("TCN", 7), 0)
    x = torch.randn(1, 24, 7)
    y = x.clone()
    y[0, 10] += 1.0
    with torch.no_grad():
        a, b = enc(x), enc(y)
    assert torch.equal(a[:, :10], b[:, :10])
    assert not torch.equal(a[:, 10:], b[:, 10:])


def test_tcn_causality_by_finite_differences():
    enc = build_encoder(tiny_spec("TCN"), 0).double()
    x = torch.randn(1, 6, 2, dtype=torch.float64)
    for s in range(5):
        grad = analytic_grad(lambda v: enc(v)[0, s].sum(), x)
        numeric = central_difference(lambda v: enc(v)[0, s].sum(), x)
        assert torch.all(grad[0, s + 1:] == 0)
        assert numeric[0, s + 1:].abs().max() < 1e-9


def test_tcn_receptive_field_default():
    spec = EncoderSpec.default("TCN", 7)
    # eleven blocks, dilations 1..1024, two convs of kernel 3 per block
    assert tcn_receptive_field(spec) == 1 + sum(2 * d * 2 for d in [2 ** i for i in range(11)])
    assert build_encoder(spec, 0).dilations() == [2 ** i for i in range(11)]


# --------------------------------------------------------- gradient checks
@pytest.mark.parametrize("kind", ["LSTM", "TCN", "Transformer"])
def test_input_gradient_matches_finite_differences(kind):
    torch.manual_seed(0)
    enc = build_encoder(tiny_spec(kind, m=2, d=8), 0).double()
    w = torch.randn(6, 8, dtype=torch.float64)
    x = torch.randn(1, 6, 2, dtype=torch.float64)

    def f(v):
        return (enc(v)[0] * w).sum()

    assert rel_error(analytic_grad(f, x), central_difference(f, x)) < 1e-4


@pytest.mark.parametrize("kind", ["LSTM", "TCN", "Transformer"])
def test_parameter_gradient_matches_finite_differences(kind):
    enc = build_encoder(tiny_spec(kind, m=2, d=8), 0).double()
    x = torch.randn(2, 6, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    param = next(p for name, p in enc.named_parameters() if "weight" in name)
    assert param_fd_check(lambda: (enc(x) ** 2).mean(), param) < 1e-4


def test_probsparse_transformer_gradient():
    enc = build_encoder(tiny_spec("Transformer", attention="probsparse", sparsity_factor=1.0), 0).double()
    x = torch.randn(1, 6, 2, dtype=torch.float64)
    w = torch.randn(6, 8, dtype=torch.float64)

    def f(v):
        return (enc(v)[0] * w).sum()

    assert rel_error(analytic_grad(f, x), central_difference(f, x)) < 1e-4


# -------------------------------------------------------------- probsparse
def probsparse_oracle(q, k, v, u):
    """Straightforward loop over queries for one (batch, head)."""
    L, E = q.shape
    scores = q @ k.T / math.sqrt(E)
    spread = np.array([scores[i].max() - scores[i].mean() for i in range(L)])
    chosen = sorted(range(L), key=lambda i: -spread[i])[:u]
    out = np.tile(v.mean(axis=0), (L, 1))
    for i in chosen:
        w = np.exp(scores[i] - scores[i].max())
        out[i] = (w / w.sum()) @ v
    return out


def test_probsparse_matches_brute_force_oracle(rng):
    q, k, v = (rng.normal(size=(8, 4)) for _ in range(3))
    factor = 1.0
    assert num_active_queries(8, factor) == 3
    got = probsparse_attention(*(torch.tensor(a)[None, None] for a in (q, k, v)), factor)[0, 0]
    np.testing.assert_allclose(got.numpy(), probsparse_oracle(q, k, v, 3), atol=1e-6)


def test_probsparse_degenerates_to_full_attention():
    q, k, v = torch.randn(3, 2, 2, 5, 4).unbind(0)
    assert num_active_queries(5, 5.0) >= 5
    torch.testing.assert_close(probsparse_attention(q, k, v, 5.0), full_attention(q, k, v),
                               atol=1e-6, rtol=0)


def test_probsparse_single_step_returns_v():
    q, k, v = torch.randn(3, 1, 2, 1, 4).unbind(0)
    torch.testing.assert_close(probsparse_attention(q, k, v, 5.0), v)


# -------------------------------------------------------------- checkpoint
def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    enc = build_encoder(tiny_spec("Transformer"), 3)
    save_state(enc.state_dict(), enc.spec.to_dict(), tmp_path / "ckpt")
    state, spec = load_state(tmp_path / "ckpt")
    for name, tensor in enc.state_dict().items():
        assert torch.equal(state[name], tensor)
    assert spec["kind"] == "Transformer"


def test_checkpoint_corruption_detected(tmp_path):
    enc = build_encoder(tiny_spec("TCN"), 0)
    save_state(enc.state_dict(), enc.spec.to_dict(), tmp_path / "ckpt")
    victim = sorted((tmp_path / "ckpt" / "params").iterdir())[0]
    blob = bytearray(victim.read_bytes())
    blob[-1] ^= 0xFF
    victim.write_bytes(bytes(blob))
    with pytest.raises(CheckpointCorrupt):
        load_state(tmp_path / "ckpt")
