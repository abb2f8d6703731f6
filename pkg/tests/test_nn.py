import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from csimask import nn as cnn
from csimask.errors import ConfigError, DataFormatError, DimensionError, NumericalError

D = torch.float64


def test_layer_config_validation():
    cnn.LayerConfig().validate(16, 16)
    with pytest.raises(ConfigError):
        cnn.LayerConfig(d_m=10, n_heads=4).validate()
    with pytest.raises(ConfigError):
        cnn.LayerConfig(s_p=3).validate(16, 16)
    with pytest.raises(ConfigError):
        cnn.LayerConfig(n_trans=0).validate()
    assert cnn.VARIANTS == {"S": 1, "M": 3, "L": 6}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(seed, c):
    x = torch.randn(3, 7, dtype=D, generator=torch.Generator().manual_seed(seed)) * 20
    s = cnn.softmax(x)
    torch.testing.assert_close(s.sum(-1), torch.ones(3, dtype=D))
    torch.testing.assert_close(cnn.softmax(x + c), s)
    assert (s >= 0).all()


def test_softmax_extreme_inputs_stay_finite():
    s = cnn.softmax(torch.tensor([[1000.0, -1000.0, 999.0]], dtype=D))
    assert torch.isfinite(s).all()


def test_functional_ops_match_torch_reference():
    torch.manual_seed(0)
    x = torch.randn(2, 5, 8, dtype=D)
    torch.testing.assert_close(cnn.gelu(x), torch.nn.functional.gelu(x, approximate="tanh"))
    torch.testing.assert_close(cnn.leaky_relu(x), torch.nn.functional.leaky_relu(x, 0.3))
    torch.testing.assert_close(cnn.layer_norm(x), torch.nn.functional.layer_norm(x, (8,)))
    w, b = torch.randn(4, 8, dtype=D), torch.randn(4, dtype=D)
    torch.testing.assert_close(cnn.linear(x, w, b), torch.nn.functional.linear(x, w, b))
    with pytest.raises(DimensionError):
        cnn.linear(x, torch.randn(4, 7, dtype=D))
    with pytest.raises(DimensionError):
        cnn.conv2d(torch.randn(1, 3, 4, 4), torch.randn(2, 2, 3, 3))


def test_attention_matches_torch():
    torch.manual_seed(1)
    mha = cnn.MultiHeadAttention(8, 2).to(D)
    ref = torch.nn.MultiheadAttention(8, 2, batch_first=True).to(D)
    with torch.no_grad():
        ref.in_proj_weight.copy_(torch.cat([mha.q.weight, mha.k.weight, mha.v.weight]))
        ref.in_proj_bias.copy_(torch.cat([mha.q.bias, mha.k.bias, mha.v.bias]))
        ref.out_proj.weight.copy_(mha.out.weight)
        ref.out_proj.bias.copy_(mha.out.bias)
    x = torch.randn(2, 5, 8, dtype=D)
    torch.testing.assert_close(mha(x), ref(x, x, x, need_weights=False)[0])


def test_attention_is_permutation_equivariant():
    torch.manual_seed(2)
    layer = cnn.TransformerLayer(8, 32, 2).to(D)
    x = torch.randn(1, 6, 8, dtype=D)
    perm = torch.randperm(6)
    torch.testing.assert_close(layer(x)[:, perm], layer(x[:, perm]))


def test_transformer_layer_is_identity_with_zero_output_weights():
    layer = cnn.TransformerLayer(8, 32, 2).to(D)
    with torch.no_grad():
        for lin in (layer.attn.out, layer.ffn.out):
            lin.weight.zero_()
            lin.bias.zero_()
    x = torch.randn(2, 4, 8, dtype=D)
    torch.testing.assert_close(layer(x), x)


def test_batch_norm_train_and_eval():
    bn = cnn.BatchNorm2d(3).to(D)
    x = torch.randn(4, 3, 5, 5, dtype=D) * 3 + 2
    y = bn(x)
    torch.testing.assert_close(y.mean(dim=(0, 2, 3)), torch.zeros(3, dtype=D), atol=1e-10, rtol=0)
    assert not torch.allclose(bn.running_mean, torch.zeros(3, dtype=D))
    bn.eval()
    assert torch.isfinite(bn(x[:1, :, :1, :1])).all()
    bn.train()
    with pytest.raises(DimensionError):
        bn(x[:1, :, :1, :1])


def test_grad_check_each_layer():
    torch.manual_seed(3)
    x = torch.randn(2, 3, 8, dtype=D)
    img = torch.randn(2, 2, 6, 6, dtype=D)
    modules = [(cnn.Linear(8, 4), x), (cnn.LayerNorm(8), x), (cnn.FeedForward(8, 16), x),
               (cnn.MultiHeadAttention(8, 4), x), (cnn.TransformerLayer(8, 16, 2), x),
               (cnn.Conv2d(2, 3, 3, padding=1), img), (cnn.ConvBN(2, 3), img)]
    for mod, inp in modules:
        mod = mod.to(D)
        err = cnn.grad_check(lambda: (mod(inp) ** 2).sum() + mod(inp).sum(), list(mod.parameters()))
        assert err <= 1e-4, type(mod).__name__


def test_grad_check_detects_a_wrong_gradient():
    w = torch.randn(5, dtype=D, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, t):
            return (t ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(5, dtype=D)

    assert cnn.grad_check(lambda: Wrong.apply(w), [w]) > 1e-2


def test_reverse_grads_zero_for_frozen_and_nonfinite_error():
    a = torch.randn(3, dtype=D, requires_grad=True)
    b = torch.randn(3, dtype=D)
    ga, gb = cnn.reverse_grads(lambda: (a * b).sum(), [a, b])
    torch.testing.assert_close(ga, b)
    assert not gb.any()
    with pytest.raises(NumericalError):
        cnn.reverse_grads(lambda: (a * float("nan")).sum(), [a])


def test_parameter_store_freeze():
    store = cnn.ParameterStore({"A": cnn.Linear(3, 2), "B": cnn.LayerNorm(2)})
    assert store.count("A") == 8 and store.count("B") == 4 and len(store) == 4
    store.set_frozen("A")
    assert store.is_frozen("A") and not store.is_frozen("B")
    assert len(store.trainable()) == 2
    snap = store.snapshot("A")
    assert set(snap) == {"A.weight", "A.bias"}


def test_checkpoint_round_trip_and_errors(tmp_path):
    tensors = {"a.w": torch.randn(3, 4), "b": torch.randn(5)}
    p = tmp_path / "m.ckpt"
    cnn.save_checkpoint(p, tensors, {"x": 1})
    back, cfg = cnn.load_checkpoint(p)
    assert cfg == {"x": 1}
    for k in tensors:
        torch.testing.assert_close(back[k], tensors[k])
    raw = p.read_bytes()
    for bad in (b"NOPE" + raw[4:], raw[:30], raw[:-8]):
        p.write_bytes(bad)
        with pytest.raises(DataFormatError):
            cnn.load_checkpoint(p)


def test_trunc_normal_init_bounds():
    t = cnn._trunc_normal(1000, 8)
    assert t.abs().max() <= 0.04 + 1e-7
    assert np.isclose(float(t.detach().std()), 0.0176, atol=0.003)
