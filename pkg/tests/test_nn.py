import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from lsflow.nn import (
    MLP,
    CheckpointError,
    MultiHeadAttention,
    NumericError,
    ParamStore,
    ShapeError,
    dense_block,
    grad_check,
    gradient,
    load_checkpoint,
    multi_head_attention,
    nonfinite_guard,
    relative_error,
    save_checkpoint,
    sinusoidal_encode,
)


def _store(module, seed=0, dtype=torch.float64, **kw):
    module = module.to(dtype)
    store = ParamStore(module)
    store.initialize(seed, **kw)
    return store


class TestDenseBlock:
    def test_identity_layer(self):
        layer = nn.Linear(3, 3).double()
        with torch.no_grad():
            layer.weight.copy_(torch.eye(3))
            layer.bias.zero_()
        x = torch.randn(4, 3, dtype=torch.float64)
        assert torch.equal(dense_block(x, [layer], "linear"), x)

    def test_zero_input_gives_bias(self):
        layer = nn.Linear(2, 3).double()
        with torch.no_grad():
            layer.bias.copy_(torch.tensor([1.0, -2.0, 0.5]))
        out = dense_block(torch.zeros(5, 2, dtype=torch.float64), [layer], "linear")
        assert torch.equal(out, layer.bias.detach().expand(5, 3))

    def test_hand_affine(self):
        layer = nn.Linear(1, 1).double()
        with torch.no_grad():
            layer.weight.fill_(2.0)
            layer.bias.fill_(1.0)
        assert dense_block(torch.tensor([[3.0]], dtype=torch.float64), [layer], "relu").item() == 7.0

    def test_final_activation_flag(self):
        mlp = MLP([2, 2], "relu", final_activation=True).double()
        with torch.no_grad():
            mlp.layers[0].weight.copy_(-torch.eye(2))
            mlp.layers[0].bias.zero_()
        assert torch.equal(mlp(torch.ones(1, 2, dtype=torch.float64)), torch.zeros(1, 2, dtype=torch.float64))

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            MLP([3, 4])(torch.zeros(2, 5))

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            MLP([3, 4], "swish")


class TestAttention:
    def test_single_token(self):
        attn = MultiHeadAttention(4, 2).double()
        _store(attn, random_bias=True)
        x = torch.randn(1, 4, dtype=torch.float64)
        v = x @ attn.qkv.weight[8:].T
        assert torch.allclose(attn(x), attn.proj(v), atol=1e-14)

    def test_identical_tokens(self):
        attn = MultiHeadAttention(6, 3).double()
        _store(attn)
        x = torch.randn(1, 6, dtype=torch.float64).expand(2, 6)
        out = attn(x)
        assert torch.equal(out[0], out[1])

    def test_hand_computed(self):
        attn = MultiHeadAttention(2, 1).double()
        with torch.no_grad():
            attn.qkv.weight.copy_(torch.tensor([[1.0, 0], [0, 1], [1, 0], [0, 1], [1, 0], [0, 2]]))
            attn.proj.weight.copy_(torch.eye(2))
            attn.proj.bias.zero_()
        x = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        # q = k = x, v = x * [1, 2]; scores = I / sqrt(2)
        s = 1 / math.sqrt(2)
        a_same = math.exp(s) / (math.exp(s) + 1)
        expected = torch.tensor([[a_same, 2 * (1 - a_same)], [1 - a_same, 2 * a_same]], dtype=torch.float64)
        assert torch.allclose(attn(x), expected, atol=1e-15)

    def test_duplication_invariance(self):
        # duplicating every token leaves each output unchanged
        attn = MultiHeadAttention(4, 2).double()
        _store(attn, random_bias=True)
        x = torch.randn(3, 4, dtype=torch.float64)
        out = attn(x)
        dup = attn(torch.cat((x, x)))
        assert torch.allclose(dup[:3], out, atol=1e-13)

    def test_batched_axes(self):
        attn = MultiHeadAttention(4, 2).double()
        _store(attn)
        x = torch.randn(2, 5, 4, dtype=torch.float64)
        out = multi_head_attention(x, 2, attn.qkv, attn.proj)
        assert torch.allclose(out[1], attn(x[1]), atol=1e-14)

    def test_indivisible_heads(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(5, 2)


class TestSinusoidal:
    def test_zero_input(self):
        out = sinusoidal_encode(torch.zeros(1, 1), 8)
        assert out.tolist() == [[0.0, 1.0] * 4]

    def test_shape(self):
        assert sinusoidal_encode(torch.zeros(2, 5, 3), 6).shape == (2, 5, 18)

    def test_periodicity_at_base_frequency(self):
        v = torch.tensor([[0.7]], dtype=torch.float64)
        a = sinusoidal_encode(v, 4)
        b = sinusoidal_encode(v + 2 * math.pi, 4)
        assert torch.allclose(a[..., :2], b[..., :2], atol=1e-12)

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError):
            sinusoidal_encode(torch.zeros(1, 1), 5)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=6))
    def test_bounded(self, vals):
        out = sinusoidal_encode(torch.tensor([vals], dtype=torch.float64), 8)
        assert out.abs().max().item() <= 1.0


class TestParamStore:
    def test_order_and_names(self):
        store = _store(MLP([3, 4, 2]))
        assert store.names() == ["layers.0.weight", "layers.0.bias", "layers.1.weight", "layers.1.bias"]
        assert store.numel() == 3 * 4 + 4 + 4 * 2 + 2

    def test_seeded_init_is_reproducible(self):
        a, b = _store(MLP([3, 4, 2]), seed=5), _store(MLP([3, 4, 2]), seed=5)
        for (_, p), (_, q) in zip(a.items(), b.items()):
            assert torch.equal(p, q)

    def test_zero_prefix(self):
        store = _store(MLP([3, 4, 2]), zero=["layers.1."])
        assert not store["layers.1.weight"].any()
        assert store["layers.0.weight"].any()

    def test_adding_a_parameter_keeps_others(self):
        a = _store(MLP([3, 4]))
        b = _store(nn.ModuleDict({"layers": MLP([3, 4]).layers, "extra": nn.Linear(2, 2)}))
        assert torch.equal(a["layers.0.weight"], b["layers.0.weight"])

    def test_load_state_mismatch(self):
        store = _store(MLP([3, 4]))
        with pytest.raises(CheckpointError):
            store.load_state({"layers.0.weight": torch.zeros(4, 3)})


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        store = _store(MLP([3, 5, 2]), random_bias=True)
        store.save(tmp_path / "c.bin")
        other = _store(MLP([3, 5, 2]), seed=9)
        other.load(tmp_path / "c.bin")
        for (_, p), (_, q) in zip(store.items(), other.items()):
            assert torch.equal(p, q)

    def test_f32_round_trip(self, tmp_path):
        t = {"a": torch.randn(2, 3), "b": torch.randn(4)}
        save_checkpoint(tmp_path / "c.bin", t)
        back = load_checkpoint(tmp_path / "c.bin")
        assert list(back) == ["a", "b"] and all(torch.equal(t[k], back[k]) for k in t)

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "c.bin", {"a": torch.randn(8)})
        raw = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "c.bin").write_bytes(raw[:-3])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.bin")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"nope" * 8)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.bin")


class TestGradient:
    def test_quadratic(self):
        store = _store(MLP([2, 3]))
        g = gradient(lambda s: (s["layers.0.weight"] ** 2).sum(), store)
        assert torch.equal(g["layers.0.weight"], 2 * store["layers.0.weight"].detach())
        assert not g["layers.0.bias"].any()

    def test_linearity(self):
        store = _store(MLP([3, 4, 2], "gelu"), random_bias=True)
        x = torch.randn(5, 3, dtype=torch.float64)

        def l1(s):
            return s.module(x).pow(2).sum()

        def l2(s):
            return s.module(x).sin().sum()

        a, b = 0.3, -1.7
        g1, g2 = gradient(l1, store), gradient(l2, store)
        g = gradient(lambda s: a * l1(s) + b * l2(s), store)
        for name in g:
            assert torch.allclose(g[name], a * g1[name] + b * g2[name], rtol=0, atol=1e-10)

    def test_nonfinite_loss(self):
        store = _store(MLP([2, 2]))
        with pytest.raises(NumericError):
            gradient(lambda s: s["layers.0.weight"].sum() * float("nan"), store)

    def test_guard_names_module(self):
        mlp = MLP([2, 2]).double()
        with pytest.raises(NumericError, match="layers.0"):
            with nonfinite_guard(mlp):
                mlp(torch.tensor([[float("inf"), 0.0]], dtype=torch.float64))


class TestGradCheck:
    def test_two_layer_mlp(self):
        store = _store(MLP([4, 6, 3], "gelu"), random_bias=True)
        x = torch.randn(7, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        report = grad_check(lambda s: s.module(x).pow(2).mean(), store, h=1e-5)
        assert report.overall_max < 1e-4
        assert set(report.per_param) == set(store.names())

    def test_linear_model_exact(self):
        store = _store(nn.Linear(3, 2), random_bias=True)
        x = torch.randn(4, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        c = torch.randn(4, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
        report = grad_check(lambda s: (s.module(x) * c).sum(), store, h=1e-3)
        assert report.overall_max < 1e-8

    def test_zero_step(self):
        store = _store(nn.Linear(2, 2))
        with pytest.raises(ValueError):
            grad_check(lambda s: s.module.weight.sum(), store, h=0.0)

    def test_requires_f64(self):
        store = _store(nn.Linear(2, 2), dtype=torch.float32)
        with pytest.raises(ValueError):
            grad_check(lambda s: s.module.weight.sum(), store)

    def test_cap_probes_every_parameter(self):
        store = _store(MLP([30, 30, 2]), random_bias=True)
        x = torch.randn(3, 30, dtype=torch.float64)
        report = grad_check(lambda s: s.module(x).sum(), store, cap=50)
        assert all(n >= 1 for n in report.probes.values())
        assert sum(report.probes.values()) < store.numel()

    def test_relative_error_floor(self):
        assert relative_error(0.0, 1e-12) == pytest.approx(1e-4)
        assert relative_error(2.0, 1.0) == 0.5
