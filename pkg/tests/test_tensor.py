import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segbert import nn
from segbert.gradcheck import check
from segbert.nn import (Adam, CheckpointError, DegenerateMaskError, MultiHeadAttention, PoisonedGradientError,
                        causal_mask, load_checkpoint, save_checkpoint, scaled_positional_encoding)
from segbert.tensor import DimensionError, GraphStateError, Tensor, layer_norm, mse, parameter


def identity_attention(d, heads=1):
    att = MultiHeadAttention(d, heads, np.random.default_rng(0))
    for lin in (att.Wq, att.Wk, att.Wv, att.Wo):
        lin.W.data = np.eye(d)
        lin.b.data = np.zeros(d)
    return att


def scalar_attention_oracle(Q, K, V):
    n, d = len(Q), len(Q[0])
    out = [[0.0] * d for _ in range(n)]
    for i in range(n):
        scores = [sum(Q[i][c] * K[j][c] for c in range(d)) / math.sqrt(d) for j in range(len(K))]
        top = max(scores)
        ex = [math.exp(s - top) for s in scores]
        z = sum(ex)
        for c in range(d):
            out[i][c] = sum(ex[j] / z * V[j][c] for j in range(len(K)))
    return np.array(out)


class TestAttention:
    def test_single_key_returns_projected_value(self):
        rng = np.random.default_rng(1)
        att = MultiHeadAttention(4, 1, rng)
        q, kv = Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4)))
        out = att(q, kv).data
        v = kv.data @ att.Wv.W.data.T + att.Wv.b.data
        np.testing.assert_allclose(out, v @ att.Wo.W.data.T + att.Wo.b.data, atol=1e-14)

    def test_causal_mask_isolates_first_row(self):
        rng = np.random.default_rng(2)
        att = MultiHeadAttention(4, 2, rng)
        x = rng.normal(size=(3, 4))
        base = att(Tensor(x), Tensor(x), causal_mask(3)).data
        y = x.copy()
        y[1:] += rng.normal(size=(2, 4))
        pert = att(Tensor(y), Tensor(y), causal_mask(3)).data
        assert np.array_equal(base[0], pert[0])

    def test_identity_projections_match_scalar_loop(self):
        rng = np.random.default_rng(3)
        Q, M = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        att = identity_attention(4)
        # identity projections: keys and values are both the memory rows
        got = att(Tensor(Q), Tensor(M)).data
        assert np.max(np.abs(got - scalar_attention_oracle(Q.tolist(), M.tolist(), M.tolist()))) < 1e-12

    def test_fully_masked_row_rejected(self):
        att = identity_attention(4)
        mask = np.ones((2, 2), dtype=bool)
        mask[1] = False
        x = Tensor(np.ones((2, 4)))
        with pytest.raises(DegenerateMaskError):
            att(x, x, mask)

    def test_heads_must_divide_width(self):
        with pytest.raises(DimensionError):
            MultiHeadAttention(6, 4, np.random.default_rng(0))

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(1, 8), m=st.integers(1, 8), seed=st.integers(0, 10**6))
    def test_softmax_rows_sum_to_one(self, n, m, seed):
        rng = np.random.default_rng(seed)
        att = MultiHeadAttention(8, 2, rng)
        mask = rng.random((n, m)) < 0.7
        mask[:, 0] = True
        att(Tensor(rng.normal(size=(n, 8))), Tensor(rng.normal(size=(m, 8))), mask)
        np.testing.assert_allclose(att.last_weights.sum(axis=-1), 1.0, atol=1e-9)

    @settings(max_examples=15, deadline=None)
    @given(n=st.integers(2, 8), seed=st.integers(0, 10**6))
    def test_causal_isolation_property(self, n, seed):
        rng = np.random.default_rng(seed)
        att = MultiHeadAttention(8, 2, rng)
        x = rng.normal(size=(n, 8))
        t = int(rng.integers(n - 1))
        y = x.copy()
        y[t + 1:] += 1.0
        a = att(Tensor(x), Tensor(x), causal_mask(n)).data
        b = att(Tensor(y), Tensor(y), causal_mask(n)).data
        assert np.array_equal(a[: t + 1], b[: t + 1])


class TestLayerNorm:
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))

    def test_constant_row_collapses_to_zero(self):
        out = layer_norm(Tensor(np.full((1, 3), 4.2)), self.one, self.zero, 1e-5).data
        assert np.array_equal(out, np.zeros((1, 3)))

    def test_closed_form_row(self):
        out = layer_norm(Tensor([[1.0, 2.0, 3.0]]), self.one, self.zero, 0.0).data
        # mean 2, population variance 2/3 -> (x - 2) / sqrt(2/3)
        np.testing.assert_allclose(out, [[-math.sqrt(1.5), 0.0, math.sqrt(1.5)]], atol=1e-15)

    def test_zero_gamma_gives_beta(self):
        beta = Tensor([0.5, -1.0, 2.0])
        out = layer_norm(Tensor(np.random.default_rng(0).normal(size=(4, 3))), Tensor(np.zeros(3)), beta).data
        assert np.array_equal(out, np.broadcast_to(beta.data, (4, 3)))

    def test_rows_standardised(self):
        x = np.random.default_rng(5).normal(3.0, 2.0, size=(6, 16))
        out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-12).data
        assert np.all(np.abs(out.mean(axis=1)) < 1e-9)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-6)


class TestPositionalEncoding:
    def test_zero_alpha(self):
        assert np.array_equal(scaled_positional_encoding(5, 6, 0.0), np.zeros((5, 6)))

    def test_position_zero_pattern(self):
        row = scaled_positional_encoding(1, 6, 0.7)[0]
        np.testing.assert_array_equal(row, [0.0, 0.7, 0.0, 0.7, 0.0, 0.7])

    def test_position_one_direct_formula(self):
        row = scaled_positional_encoding(2, 4, 1.0)[1]
        expect = [math.sin(1.0), math.cos(1.0), math.sin(1.0 / 10000 ** 0.5), math.cos(1.0 / 10000 ** 0.5)]
        np.testing.assert_allclose(row, expect, rtol=0, atol=1e-15)


class TestBackward:
    def test_linear_sum_gradient(self):
        W = parameter(np.random.default_rng(0).normal(size=(3, 4)))
        x = np.array([1.0, -2.0, 0.5, 3.0])
        (W @ Tensor(x)).sum().backward()
        assert np.array_equal(W.grad, np.broadcast_to(x, (3, 4)))

    def test_quadratic_minimum_has_zero_grad(self):
        x = parameter([1.0, 2.0, 3.0])
        mse(x, np.array([1.0, 2.0, 3.0])).backward()
        assert np.array_equal(x.grad, np.zeros(3))

    def test_backward_without_graph(self):
        with pytest.raises(GraphStateError):
            Tensor([1.0]).backward()

    def test_non_scalar_needs_seed(self):
        with pytest.raises(GraphStateError):
            (parameter(np.ones(3)) * 2.0).backward()

    def test_fan_out_accumulates(self):
        x = parameter([3.0])
        (x * x + x).sum().backward()
        assert x.grad[0] == 7.0

    def test_unreachable_parameter_stays_zero(self):
        lin = nn.Linear(2, 2, np.random.default_rng(0))
        other = nn.Linear(2, 2, np.random.default_rng(1))
        for p in lin.parameters() + other.parameters():
            p.zero_grad()
        lin(Tensor(np.ones((1, 2)))).sum().backward()
        assert all(np.array_equal(p.grad, np.zeros_like(p.data)) for p in other.parameters())
        assert np.any(lin.W.grad != 0)

    def test_composite_graph_finite_differences(self):
        rng = np.random.default_rng(7)
        enc = nn.EncoderLayer(8, 2, 16, rng)
        dec = nn.DecoderLayer(8, 2, 16, rng)
        x = rng.normal(size=(5, 8))
        y = rng.normal(size=(5, 8))
        fn = lambda: mse(dec(enc(Tensor(x)), enc(Tensor(y)), causal_mask(5)), y)
        assert check(fn, enc.parameters() + dec.parameters(), samples=100, rng=rng) < 1e-5


LAYER_BUILDERS = {
    "linear": lambda d, rng: nn.Linear(d, 5, rng),
    "layer_norm": lambda d, rng: nn.LayerNorm(d),
    "feed_forward": lambda d, rng: nn.FeedForward(d, 7, rng),
    "attention": lambda d, rng: nn.MultiHeadAttention(d, 2 if d % 2 == 0 else 1, rng),
    "conv1d": lambda d, rng: nn.Conv1d(d, 3, 3, rng),
    "pos_enc": lambda d, rng: nn.ScaledPositionalEncoding(d),
    "prenet": lambda d, rng: nn.Prenet(d, 6, 4, rng),
}


@pytest.mark.parametrize("kind", sorted(LAYER_BUILDERS))
@settings(max_examples=6, deadline=None)
@given(n=st.integers(1, 8), d=st.integers(2, 32), seed=st.integers(0, 10**6))
def test_layer_gradient_check(kind, n, d, seed):
    rng = np.random.default_rng(seed)
    layer = LAYER_BUILDERS[kind](d, rng)
    for name, p in layer.named_parameters():
        if name.endswith("b") or name.endswith("bias") or name == "beta":
            p.data = rng.normal(scale=0.5, size=p.shape)
    x = parameter(rng.normal(size=(n, d)))
    probe = rng.normal(size=(n, 64))

    def fn():
        out = layer(x, x) if kind == "attention" else layer(x)
        return (out * probe[:, : out.shape[1]]).sum()
    assert check(fn, [x] + layer.parameters(), samples=40, rng=rng) < 1e-5


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = parameter(np.array([1.5, -2.0]))
        p.grad = np.zeros(2)
        before = p.data.copy()
        Adam([p]).step()
        assert np.array_equal(p.data, before)

    def test_first_step_moves_by_lr(self):
        p = parameter(np.array([0.0]))
        p.grad = np.array([1.0])
        Adam([p], lr=1e-3).step()
        # m_hat = v_hat = 1 -> step = lr / (1 + eps)
        assert abs(p.data[0] + 1e-3) < 1e-12

    def test_quadratic_descent(self):
        p = parameter(np.array([5.0, -3.0]))
        opt = Adam([p], lr=1e-2)
        losses = []
        for _ in range(1000):
            p.zero_grad()
            loss = (p * p).sum()
            losses.append(float(loss.data))
            loss.backward()
            opt.step()
        assert all(losses[i + 100] < losses[i] for i in range(len(losses) - 100))
        assert opt.step_count == 1000

    def test_nan_gradient_aborts_without_update(self):
        p = parameter(np.array([1.0, 2.0]))
        p.grad = np.array([np.nan, 0.0])
        opt = Adam([p])
        with pytest.raises(PoisonedGradientError):
            opt.step()
        assert np.array_equal(p.data, [1.0, 2.0]) and opt.step_count == 0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        tensors = {"a.W": np.arange(6.0).reshape(2, 3), "scalar": np.array(3.5), "ünï": np.ones((2, 1, 2))}
        save_checkpoint(tmp_path / "c.sbtc", tensors)
        back = load_checkpoint(tmp_path / "c.sbtc")
        assert list(back) == list(tensors)
        for k in tensors:
            assert np.array_equal(back[k], tensors[k]) and back[k].shape == tensors[k].shape

    def test_header_layout(self, tmp_path):
        save_checkpoint(tmp_path / "c", {"w": np.array([1.0])})
        raw = (tmp_path / "c").read_bytes()
        assert raw[:4] == b"SBTC"
        assert raw[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
        assert len(raw) == 12 + 4 + 1 + 4 + 4 + 8

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:],
        lambda b: b[:-3],
        lambda b: b + b"\0",
    ])
    def test_corruption_detected(self, tmp_path, mutate):
        save_checkpoint(tmp_path / "c", {"w": np.ones((2, 2))})
        (tmp_path / "c").write_bytes(mutate((tmp_path / "c").read_bytes()))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c")

    def test_model_state_round_trip(self, tmp_path):
        m = nn.EncoderLayer(8, 2, 16, np.random.default_rng(0))
        save_checkpoint(tmp_path / "m", m.state_dict())
        m2 = nn.EncoderLayer(8, 2, 16, np.random.default_rng(99))
        m2.load_state_dict(load_checkpoint(tmp_path / "m"))
        x = Tensor(np.random.default_rng(1).normal(size=(3, 8)))
        assert np.array_equal(m(x).data, m2(x).data)


def test_determinism_same_seed():
    def run():
        rng = np.random.default_rng(11)
        layer = nn.DecoderLayer(8, 2, 16, rng)
        x = Tensor(rng.normal(size=(4, 8)))
        return layer(x, x, causal_mask(4)).data
    assert np.array_equal(run(), run())
