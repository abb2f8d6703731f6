import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from csimask import channel, codec
from csimask.errors import ConfigError, DataFormatError, DimensionError
from csimask.nn import LayerConfig, VARIANTS

SMALL = codec.ModelConfig(n_c=8, n_t=8, layer=LayerConfig(d_m=16, d_ff=64, n_trans=1))


@pytest.fixture(scope="module")
def small_model():
    model = codec.build_model(SMALL, seed=0, dtype=torch.float64)
    data = channel.generate_dataset(channel.ChannelScenario(n_f=64, n_t=8, n_c=8), 8, 0)
    model.fit_normalization(data)
    model.eval()
    return model, data


def test_bits_match_reference_rows():
    for m, bits in [(221, 16418), (111, 8278), (56, 4208), (28, 2136)]:
        assert codec.bits_total(m, 64, 10) == bits
    for inv, m in codec.M_PRESETS_32.items():
        assert codec.m_for_ratio(1 / inv) == m
        assert abs(codec.compression_ratio(m, 64, 10, 32, 32) - 1 / inv) < 0.01


def test_m_for_ratio_floor_rule_and_errors():
    assert codec.m_for_ratio(1 / 16, 64, 9, 16, 16) == 28
    assert codec.m_for_ratio(1 / 8, 64, 9, 16, 16) == 56
    assert codec.m_for_ratio(1 / 16, use_presets=False) == 110
    with pytest.raises(ConfigError):
        codec.m_for_ratio(0.0)
    with pytest.raises(ConfigError):
        codec.bits_total(-1)


@given(st.floats(1e-3, 1.0), st.sampled_from([(8, 8), (16, 16), (32, 32)]))
def test_m_for_ratio_fits_budget(sigma, shape):
    q2 = codec.index_bits(*shape)
    m = codec.m_for_ratio(sigma, 64, q2, *shape, use_presets=False)
    assert (64 + q2) * m <= sigma * 64 * 2 * shape[0] * shape[1] + 1e-6
    assert (64 + q2) * (m + 1) > sigma * 64 * 2 * shape[0] * shape[1] - 1e-6


def test_index_bits():
    assert codec.index_bits(32, 32) == 11
    assert codec.index_bits(16, 16) == 9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 60), st.integers(0, 10_000), st.booleans())
def test_codeword_wire_round_trip(m, seed, quantized):
    rng = np.random.default_rng(seed)
    pos = np.sort(rng.choice(128, m, replace=False))
    vals = rng.standard_normal(m + 1)
    cw = codec.Codeword(vals, pos, (8, 8), q1=64 if not quantized else 3, q2=7)
    levels = None
    if quantized:
        from csimask.quant import Quantizer
        levels = Quantizer(np.linspace(-2, 2, 8), np.linspace(-2, 2, 8)[:-1] + 2 / 7, 3)
        cw.quant_indices = rng.integers(0, 8, m + 1)
        cw.values = levels.levels[cw.quant_indices]
    back = codec.unpack_codeword(codec.pack_codeword(cw), levels)
    np.testing.assert_array_equal(back.positions, pos)
    np.testing.assert_allclose(back.values, cw.values, rtol=1e-6)
    assert back.shape == (8, 8) and back.q2 == 7


def test_codeword_errors():
    good = codec.Codeword(np.zeros(3), np.array([1, 5]), (4, 4), q2=5)
    with pytest.raises(DataFormatError):
        codec.Codeword(np.zeros(2), np.array([1, 5]), (4, 4)).validate()
    with pytest.raises(DataFormatError):
        codec.Codeword(np.zeros(3), np.array([1, 1]), (4, 4)).validate()
    with pytest.raises(DataFormatError):
        codec.Codeword(np.zeros(3), np.array([1, 32]), (4, 4)).validate()
    with pytest.raises(DataFormatError):
        codec.pack_codeword(codec.Codeword(np.zeros(3), np.array([1, 20]), (4, 4), q2=4))
    data = codec.pack_codeword(good)
    with pytest.raises(DataFormatError):
        codec.unpack_codeword(b"XXXX" + data[4:])
    with pytest.raises(DataFormatError):
        codec.unpack_codeword(data[:-1])
    assert good.bits() == 64 * 3 + 5 * 2


def test_fill_writes_values_and_mean_elsewhere():
    cw = codec.Codeword(np.array([0.5, 3.0, -2.0]), np.array([0, 17]), (4, 4))
    k = codec.fill(cw, 4, 4)
    assert k.shape == (2, 4, 4)
    flat = k.ravel()
    assert flat[0] == 3.0 and flat[17] == -2.0
    assert np.all(np.delete(flat, [0, 17]) == 0.5)
    with pytest.raises(DataFormatError):
        codec.fill(cw, 8, 8)


def test_fill_batch_invalid_slots_write_mean():
    mean = torch.tensor([1.0, 2.0])
    vals = torch.tensor([[5.0, 6.0], [7.0, 8.0]])
    pos = torch.tensor([[0, 1], [2, 3]])
    valid = torch.tensor([[True, True], [True, False]])
    out = codec.fill_batch(mean, vals, pos, valid, (1, 2)).reshape(2, 4)
    torch.testing.assert_close(out, torch.tensor([[5.0, 6.0, 1.0, 1.0], [2.0, 2.0, 7.0, 2.0]]))


def test_rank_positions_ties_go_to_lower_index():
    score = torch.tensor([[1.0, 3.0, 3.0, 0.0, 3.0]])
    assert codec.rank_positions(score, 2).tolist() == [[1, 2]]


@pytest.mark.parametrize("m", [0, 1, 10, 128])
def test_encode_contract(small_model, m):
    model, data = small_model
    cw = codec.encode(data[0], model, m)
    assert cw.m == m and len(cw.values) == m + 1
    assert np.all(np.diff(cw.positions) > 0)
    assert cw.values[0] == pytest.approx(data[0].mean())
    assert cw.q2 == codec.index_bits(8, 8)
    cw.validate()


def test_encode_range_and_shape_errors(small_model):
    model, data = small_model
    with pytest.raises(ConfigError):
        codec.encode(data[0], model, 129)
    with pytest.raises(DimensionError):
        codec.encode(np.zeros((2, 4, 4)), model, 3)


def test_encode_picks_largest_image_entries(small_model):
    model, data = small_model
    h = torch.as_tensor(data[:1])
    with torch.no_grad():
        img = model.encoder(h).reshape(-1).abs()
    cw = codec.encode(data[0], model, 12)
    kept = img[torch.as_tensor(cw.positions)].min()
    rest = np.delete(img.numpy(), cw.positions)
    assert float(kept) >= rest.max()


def test_encode_is_deterministic_and_decode_shapes(small_model):
    model, data = small_model
    a, b = codec.encode(data[1], model, 20), codec.encode(data[1], model, 20)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.values, b.values)
    hp = codec.preliminary_decode(a, model)
    assert hp.shape == (2, 8, 8)
    assert codec.token_predict(hp, model).shape == (2, 8, 8)
    assert codec.decode(a, model).shape == (2, 8, 8)


def test_batched_and_per_sample_decode_agree(small_model):
    model, data = small_model
    h = torch.as_tensor(data[:3])
    with torch.no_grad():
        batched = model(h, 20).numpy()
    for i in range(3):
        np.testing.assert_allclose(codec.decode(codec.encode(data[i], model, 20), model), batched[i],
                                   atol=1e-10)


@pytest.mark.parametrize("shape,s_p,length", [((32, 32), 4, 65), ((16, 16), 4, 17), ((8, 8), 2, 17)])
def test_token_sequence_length(shape, s_p, length):
    cfg = codec.ModelConfig(n_c=shape[0], n_t=shape[1], layer=LayerConfig(d_m=16, d_ff=32, s_p=s_p))
    model = codec.build_model(cfg)
    tokens = codec.tokenize(np.zeros((2, *shape)), model)
    assert tokens.shape == (length, 16)


@pytest.mark.parametrize("name,n", list(VARIANTS.items()))
def test_variant_depths(name, n):
    cfg = codec.ModelConfig(layer=LayerConfig(d_m=16, d_ff=32, n_trans=n))
    assert len(codec.build_model(cfg).tp.layers) == n


def test_parameter_groups_and_sizes():
    model = codec.build_model(codec.ModelConfig())
    counts = {g: model.store.count(g) for g in codec.GROUPS}
    assert counts["EN"] < 5_000  # lightweight UE side
    assert 3_000 < counts["PD"] < 3_600
    assert counts["TP"] > 10 * counts["EN"]
    assert sum(counts.values()) == sum(p.numel() for p in model.parameters())


def test_random_mask_variant_uses_true_values():
    model = codec.build_model(codec.ModelConfig(n_c=8, n_t=8, layer=LayerConfig(d_m=16, d_ff=32),
                                                variant="random_mask"), dtype=torch.float64)
    h = torch.randn(2, 2, 8, 8, dtype=torch.float64)
    mean, vals, pos, valid = model.encode_batch(h, 10, torch.Generator().manual_seed(0))
    torch.testing.assert_close(vals, h.reshape(2, -1).gather(1, pos))
    assert valid.all() and pos.shape == (2, 10)


def test_multi_count_encode_masks_slots(small_model):
    model, data = small_model
    h = torch.as_tensor(data[:3])
    with torch.no_grad():
        _, vals, pos, valid = model.encode_batch(h, [2, 5, 0])
    assert pos.shape == (3, 5)
    assert valid.sum(1).tolist() == [2, 5, 0]


def test_model_save_load_round_trip(tmp_path, small_model):
    model, data = small_model
    p = tmp_path / "m.ckpt"
    codec.save_model(model, p, {"note": 1})
    back, cfg = codec.load_model(p)
    assert cfg["note"] == 1 and back.cfg == model.cfg
    h = torch.as_tensor(data[:2], dtype=torch.float32)
    with torch.no_grad():
        np.testing.assert_allclose(back(h, 10).numpy(), model.float()(h, 10).numpy(), atol=1e-5)
    model.double()


def test_model_config_dict_round_trip():
    cfg = codec.ModelConfig(variant="no_pd", pd_widths=(4, 8))
    assert codec.ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        codec.ModelConfig(variant="bogus").validate()
