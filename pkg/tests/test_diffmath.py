import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbhsu.diffmath import (
    ParamStore,
    Tensor,
    concat,
    dropout,
    dump_tensors,
    embedding,
    grad_check,
    layer_norm,
    linear,
    load_tensors,
    masked_softmax,
    multi_head_attention,
    no_grad,
    quick_gelu,
    softmax_cross_entropy,
    softmax_cross_entropy_sum,
    tsum,
)
from tbhsu.errors import NonFiniteValue, ParseError, ShapeMismatch, TargetOutOfRange


def scalar(t):
    return tsum(t)


class TestTensor:
    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteValue):
            Tensor([1.0, np.nan])
        with pytest.raises(NonFiniteValue):
            Tensor([np.inf])

    def test_shared_subexpression_gradient(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x + x
        y.sum().backward()
        assert x.grad.tolist() == [7.0]

    def test_broadcast_gradient(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.arange(3.0), requires_grad=True)
        (a * b + b).sum().backward()
        assert a.grad.tolist() == [[0, 1, 2]] * 2
        assert b.grad.tolist() == [4.0, 4.0, 4.0]

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2
        assert not y.requires_grad


class TestQuickGelu:
    def test_values(self):
        # oracle values from 40-digit mpmath evaluation of x * sigmoid(1.702 x)
        out = quick_gelu(Tensor([0.0, 10.0, -10.0])).data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(9.999999594203870, rel=1e-14)
        assert out[2] == pytest.approx(-4.057961294855310e-07, rel=1e-9)

    def test_gradient_formula(self):
        x = np.linspace(-6, 6, 25)
        t = Tensor(x, requires_grad=True)
        quick_gelu(t).sum().backward()
        s = 1 / (1 + np.exp(-1.702 * x))
        np.testing.assert_allclose(t.grad, s + 1.702 * x * s * (1 - s), rtol=1e-12)


class TestLayerNorm:
    def test_constant_row(self):
        out = layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert out.data.tolist() == [[0.0, 0.0, 0.0]]

    def test_unit_variance(self):
        out = layer_norm(Tensor([[-1.0, 1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        assert out.data.tolist() == [[-1.0, 1.0]]

    def test_random_row_against_formula(self):
        rng = np.random.default_rng(1)
        x, g, b = rng.normal(size=(4, 7)), rng.normal(size=7), rng.normal(size=7)
        out = layer_norm(Tensor(x), Tensor(g), Tensor(b), eps=1e-5).data
        for r in range(4):
            mu = sum(x[r]) / 7
            var = sum((v - mu) ** 2 for v in x[r]) / 7
            expected = [(x[r][j] - mu) / math.sqrt(var + 1e-5) * g[j] + b[j] for j in range(7)]
            np.testing.assert_allclose(out[r], expected, rtol=1e-12, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))

    def test_grad_check_chain(self):
        rng = np.random.default_rng(2)
        ps = ParamStore()
        ps.add("x", rng.normal(size=(3, 5)))
        ps.add("g", rng.normal(size=5))
        ps.add("b", rng.normal(size=5))
        ps.add("g2", rng.normal(size=5))
        ps.add("b2", rng.normal(size=5))
        w = rng.normal(size=(3, 5))

        def f():
            h = layer_norm(ps["x"], ps["g"], ps["b"])
            h = layer_norm(h, ps["g2"], ps["b2"])
            return tsum(h * Tensor(w))

        assert grad_check(f, ps, h=1e-5).max_rel_error <= 1e-6


def straight_line_attention(x, mask, w_qkv, b_qkv, w_out, b_out, n_heads):
    """Independent per-head loop recomputation."""
    t, d = x.shape
    dh = d // n_heads
    q_all = x @ w_qkv[:, :d] + b_qkv[:d]
    k_all = x @ w_qkv[:, d : 2 * d] + b_qkv[d : 2 * d]
    v_all = x @ w_qkv[:, 2 * d :] + b_qkv[2 * d :]
    heads = []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        out = np.zeros((t, dh))
        for i in range(t):
            logits = [q_all[i, sl] @ k_all[j, sl] / math.sqrt(dh) if mask[j] else None for j in range(t)]
            m = max(l for l in logits if l is not None)
            e = [math.exp(l - m) if l is not None else 0.0 for l in logits]
            z = sum(e)
            out[i] = sum(e[j] / z * v_all[j, sl] for j in range(t))
        heads.append(out)
    return np.concatenate(heads, axis=1) @ w_out + b_out


def attn_params(rng, d, scale=0.5):
    return {
        "w_qkv": Tensor(rng.normal(size=(d, 3 * d)) * scale),
        "b_qkv": Tensor(rng.normal(size=3 * d) * scale),
        "w_out": Tensor(rng.normal(size=(d, d)) * scale),
        "b_out": Tensor(rng.normal(size=d) * scale),
    }


class TestAttention:
    def test_single_token(self):
        rng = np.random.default_rng(0)
        p = attn_params(rng, 4)
        x = rng.normal(size=(1, 4))
        out = multi_head_attention(Tensor(x), np.array([True]), p, 2).data
        v = x @ p["w_qkv"].data[:, 8:] + p["b_qkv"].data[8:]
        np.testing.assert_allclose(out, v @ p["w_out"].data + p["b_out"].data, rtol=1e-12)

    def test_equal_tokens_uniform_weights(self):
        d = 3
        eye = np.eye(d)
        p = {
            "w_qkv": Tensor(np.concatenate([eye, eye, eye], axis=1)),
            "b_qkv": Tensor(np.zeros(3 * d)),
            "w_out": Tensor(eye),
            "b_out": Tensor(np.zeros(d)),
        }
        x = Tensor(np.tile([0.3, -0.2, 0.9], (2, 1)))
        _, w = multi_head_attention(x, np.array([True, True]), p, 1, return_weights=True)
        np.testing.assert_allclose(w[0], [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)

    def test_against_straight_line(self):
        rng = np.random.default_rng(3)
        p = attn_params(rng, 6)
        x = rng.normal(size=(3, 6))
        mask = np.array([True, True, True])
        out = multi_head_attention(Tensor(x), mask, p, 1).data
        ref = straight_line_attention(x, mask, *(p[k].data for k in ("w_qkv", "b_qkv", "w_out", "b_out")), 1)
        np.testing.assert_allclose(out, ref, rtol=1e-11, atol=1e-12)

    def test_masked_keys_and_multi_head(self):
        rng = np.random.default_rng(4)
        p = attn_params(rng, 8)
        x = rng.normal(size=(5, 8))
        mask = np.array([True, True, False, True, False])
        out, w = multi_head_attention(Tensor(x), mask, p, 2, return_weights=True)
        ref = straight_line_attention(x, mask, *(p[k].data for k in ("w_qkv", "b_qkv", "w_out", "b_out")), 2)
        np.testing.assert_allclose(out.data, ref, rtol=1e-11, atol=1e-12)
        assert np.all(w[..., ~mask] == 0.0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 9))
    def test_permutation_equivariance(self, seed, t):
        rng = np.random.default_rng(seed)
        p = attn_params(rng, 8, scale=0.3)
        x = rng.normal(size=(t, 8))
        mask = rng.random(t) < 0.7
        mask[0] = True
        perm = rng.permutation(t)
        out = multi_head_attention(Tensor(x), mask, p, 2).data
        out_p = multi_head_attention(Tensor(x[perm]), mask[perm], p, 2).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-10)

    def test_shape_errors(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ShapeMismatch):
            multi_head_attention(Tensor(np.ones((2, 6))), None, attn_params(rng, 6), 4)
        with pytest.raises(ShapeMismatch):
            multi_head_attention(Tensor(np.ones((2, 4))), None, attn_params(rng, 6), 2)

    def test_grad_check(self):
        rng = np.random.default_rng(5)
        ps = ParamStore()
        for k, v in attn_params(rng, 4).items():
            ps.add(k, v)
        ps.add("x", rng.normal(size=(2, 3, 4)))
        mask = np.array([[True, True, False], [True, True, True]])
        w = rng.normal(size=(2, 3, 4))

        def f():
            return tsum(multi_head_attention(ps["x"], mask, {k: ps[k] for k in ("w_qkv", "b_qkv", "w_out", "b_out")}, 2) * Tensor(w))

        # a key bias shifts every logit of a row equally, so its gradient is exactly zero;
        # finite differences then only see rounding noise, hence the larger absolute floor
        ps.zero_grad()
        f().backward()
        assert np.abs(ps["b_qkv"].grad[4:8]).max() < 1e-14
        assert grad_check(f, ps, abs_floor=1e-6).max_rel_error <= 1e-4


class TestSoftmaxAndCrossEntropy:
    def test_uniform(self):
        assert softmax_cross_entropy(np.zeros(4), 2).item() == pytest.approx(1.3862943611198906, rel=1e-15)

    def test_confident(self):
        assert softmax_cross_entropy(np.array([100.0, 0.0, 0.0]), 0).item() == pytest.approx(0.0, abs=1e-40)

    def test_random_against_mpmath(self):
        # 40-digit mpmath: log(sum(exp(l))) - l[1]
        logits = np.array([0.3, -1.2, 2.5, 0.0, -0.7])
        assert softmax_cross_entropy(logits, 1).item() == pytest.approx(3.929820321938670, rel=1e-14)

    def test_gradient(self):
        logits = Tensor([0.3, -1.2, 2.5], requires_grad=True)
        softmax_cross_entropy(logits, 2).backward()
        p = np.exp(logits.data) / np.exp(logits.data).sum()
        np.testing.assert_allclose(logits.grad, p - np.array([0, 0, 1]), rtol=1e-12)

    def test_target_errors(self):
        with pytest.raises(TargetOutOfRange):
            softmax_cross_entropy(np.zeros(3), 3)
        with pytest.raises(TargetOutOfRange):
            softmax_cross_entropy_sum(Tensor(np.zeros((2, 3))), np.array([0, 5]))

    def test_ignore_index(self):
        logits = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        loss = softmax_cross_entropy_sum(logits, np.array([1, -1, 2]))
        ref = softmax_cross_entropy(logits.data[0], 1).item() + softmax_cross_entropy(logits.data[2], 2).item()
        assert loss.item() == pytest.approx(ref, rel=1e-14)
        loss.backward()
        assert np.all(logits.grad[1] == 0)

    def test_masked_softmax_large_logits(self):
        s = masked_softmax(Tensor([[1000.0, 0.0, -1000.0]]), np.array([[True, True, False]])).data
        assert s[0, 2] == 0.0 and s[0, 0] == pytest.approx(1.0)


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(np.ones(5))
        assert dropout(x, 0.0, np.random.default_rng(0)) is x
        assert dropout(x, 0.5, None, training=False) is x

    def test_reproducible(self):
        x = Tensor(np.ones(100))
        a = dropout(x, 0.3, np.random.default_rng(7)).data
        b = dropout(x, 0.3, np.random.default_rng(7)).data
        assert np.array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, 1 / 0.7}


class TestMisc:
    def test_embedding_equals_one_hot(self):
        rng = np.random.default_rng(0)
        table = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        ids = np.array([[0, 4, 4], [2, 1, 0]])
        out = embedding(table, ids)
        one_hot = np.eye(5)[ids]
        np.testing.assert_allclose(out.data, one_hot @ table.data, rtol=1e-15)
        out.sum().backward()
        np.testing.assert_array_equal(table.grad[:, 0], one_hot.reshape(-1, 5).sum(axis=0))

    def test_concat_and_linear_grad(self):
        rng = np.random.default_rng(1)
        ps = ParamStore()
        ps.add("a", rng.normal(size=(2, 1, 3)))
        ps.add("b", rng.normal(size=(2, 4, 3)))
        ps.add("w", rng.normal(size=(3, 2)))
        ps.add("c", rng.normal(size=2))

        def f():
            z = concat([ps["a"], ps["b"]], axis=1)
            return tsum(quick_gelu(linear(z, ps["w"], ps["c"])))

        assert grad_check(f, ps).max_rel_error <= 1e-6

    def test_grad_check_sum_of_squares(self):
        ps = ParamStore()
        ps.add("x", np.random.default_rng(0).normal(size=(4, 3)))
        rep = grad_check(lambda: tsum(ps["x"] * ps["x"]), ps, h=1e-5)
        assert rep.max_rel_error <= 1e-9 and rep.n_checked == 12

    def test_grad_check_sampling(self):
        ps = ParamStore()
        ps.add("x", np.ones((10, 10)))
        assert grad_check(lambda: tsum(ps["x"] * ps["x"]), ps, max_coords=7).n_checked == 7

    def test_param_store_order_and_bytes(self):
        ps = ParamStore()
        ps.add("z", np.ones(2))
        ps.add("a", np.arange(6.0).reshape(2, 3))
        assert ps.names() == ["z", "a"]
        back = ParamStore.from_bytes(ps.to_bytes())
        assert back.names() == ["z", "a"]
        np.testing.assert_array_equal(back["a"].data, ps["a"].data)
        with pytest.raises(KeyError):
            ps.add("z", np.ones(1))

    def test_tensor_file_header(self):
        blob = dump_tensors({"w": np.array([[1.5, -2.0]])})
        assert blob[:8] == b"TBHSUTNS"
        assert blob[-16:] == np.array([1.5, -2.0], dtype="<f8").tobytes()
        with pytest.raises(ParseError):
            load_tensors(b"XXXXXXXX" + blob[8:])
        with pytest.raises(ParseError):
            load_tensors(blob[:20])
