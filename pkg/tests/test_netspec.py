import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rowcnn import kernels as K
from rowcnn.errors import ConfigError, ShapeUnderflowError
from rowcnn.netspec import Conv, FC, Flatten, NetworkSpec, Pool, ReLU, init_params, load_config, parse_config, propagate_shapes
from rowcnn.ops import stage_forward, stage_pad
from rowcnn.rng import GAMMA, SplitMix64, splitmix64_scalar
from rowcnn.verify import random_config


def cfg(layers, c=1, h=8, w=8, classes=2):
    return json.dumps({"input": {"c": c, "h": h, "w": w}, "classes": classes, "layers": layers})


def test_minimal_config():
    spec = parse_config(cfg([{"type": "conv", "c_out": 2, "k": 3}, {"type": "flatten"}, {"type": "fc", "out": 2}]))
    assert spec.L == 1
    assert spec.shapes == [(1, 8, 8), (2, 6, 6)]
    assert spec.head[0].in_width == 72


def test_fc_width_mismatch_names_the_layer():
    text = cfg([{"type": "conv", "c_out": 2, "k": 3}, {"type": "flatten"}, {"type": "fc", "out": 2, "in": 50}])
    with pytest.raises(ConfigError, match="layer 2") as info:
        parse_config(text)
    assert info.value.layer_index == 2


@pytest.mark.parametrize("layers,index", [
    ([{"type": "conv", "c_out": 2, "k": 3, "c_in": 3}, {"type": "flatten"}, {"type": "fc", "out": 2}], 0),
    ([{"type": "flatten"}, {"type": "fc", "out": 2}], 0),
    ([{"type": "conv", "c_out": 2, "k": 3}, {"type": "flatten"}, {"type": "fc", "out": 3}], 2),
    ([{"type": "conv", "c_out": 2, "k": 3}, {"type": "wobble"}], 1),
    ([{"type": "pool", "kind": "median", "k": 2}, {"type": "flatten"}, {"type": "fc", "out": 2}], 0),
    ([{"type": "conv", "c_out": 2, "k": 3}, {"type": "flatten"}, {"type": "fc", "out": 2}, {"type": "relu"}], 3),
])
def test_semantic_errors(layers, index):
    with pytest.raises(ConfigError) as info:
        parse_config(cfg(layers))
    assert info.value.layer_index == index


def test_syntax_error():
    with pytest.raises(ConfigError, match="syntax"):
        parse_config("{not json")


def test_shape_underflow():
    text = cfg([{"type": "conv", "c_out": 1, "k": 5}, {"type": "conv", "c_out": 1, "k": 5},
                {"type": "flatten"}, {"type": "fc", "out": 2}])
    with pytest.raises(ShapeUnderflowError):
        parse_config(text)


def test_same_padding_and_pool_shapes():
    spec = parse_config(cfg([{"type": "conv", "c_out": 4, "k": 3, "s": 1, "p": 1}, {"type": "pool", "k": 2, "s": 2},
                             {"type": "flatten"}, {"type": "fc", "out": 2}], h=32, w=32))
    assert propagate_shapes(spec) == [(1, 32, 32), (4, 32, 32), (4, 16, 16)]


def _vgg16_table(h):
    """Hand propagation of VGG-16's conv/pool stack (3x3 same convs, 2x2/2 pools)."""
    table, c = [], 3
    for n, width in [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]:
        for _ in range(n):
            c = width
            table.append((c, h, h))
        h //= 2
        table.append((c, h, h))
    return table


def test_vgg16_shapes_at_32():
    layers = []
    for n, width in [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]:
        for _ in range(n):
            layers += [{"type": "conv", "c_out": width, "k": 3, "s": 1, "p": 1}, {"type": "relu"}]
        layers.append({"type": "pool", "kind": "max", "k": 2, "s": 2})
    layers += [{"type": "flatten"}, {"type": "fc", "out": 10}]
    spec = parse_config(cfg(layers, c=3, h=32, w=32, classes=10))
    assert spec.L == 18
    assert spec.shapes[1:] == _vgg16_table(32)
    assert spec.flatten_width == 512


def test_round_trip_is_identity():
    spec = load_config("configs/vgg16_64.json")
    again = parse_config(spec.to_json())
    assert again.to_dict() == spec.to_dict()
    assert again.shapes == spec.shapes


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_shapes_agree_with_execution(seed):
    spec = parse_config(json.dumps(random_config(seed)))
    params = init_params(spec, seed)
    z = np.zeros((1,) + spec.input_dims)
    for stage in spec.stages:
        z = stage_forward(stage, params, z, stage_pad(stage, stage.p, stage.p))
        assert z.shape[1:] == spec.shapes[stage.index]
    assert parse_config(spec.to_json()).to_dict() == spec.to_dict()


def test_relu_is_fused_into_the_consumer():
    spec = parse_config(cfg([{"type": "conv", "c_out": 2, "k": 3}, {"type": "relu"}, {"type": "pool", "k": 2, "s": 2},
                             {"type": "conv", "c_out": 2, "k": 1}, {"type": "flatten"}, {"type": "relu"},
                             {"type": "fc", "out": 2}]))
    assert [s.relu_in for s in spec.stages] == [False, True, False]
    assert spec.head[0].relu_in


def test_programmatic_construction_matches_config():
    spec = NetworkSpec((1, 8, 8), [Conv(2, 3), ReLU(), Pool("max", 2, 2), Flatten(), FC(2)], 2)
    assert spec.shapes == [(1, 8, 8), (2, 6, 6), (2, 3, 3)]


# -- initialisation -------------------------------------------------------

def test_init_is_deterministic_and_seed_sensitive():
    spec = load_config("configs/tiny.json")
    a, b, c = init_params(spec, 7), init_params(spec, 7), init_params(spec, 8)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if k.endswith(".w"))


def test_init_ranges_and_zero_bias():
    spec = load_config("configs/desk8.json")
    params = init_params(spec, 3)
    for st_ in spec.stages:
        if st_.kind == "conv":
            a = (st_.c_in * st_.k ** 2) ** -0.5
            w = params[f"stage{st_.index}.w"]
            assert w.shape == (st_.c_out, st_.c_in, st_.k, st_.k)
            assert np.abs(w).max() <= a
            assert not params[f"stage{st_.index}.b"].any()


def test_uniform_law_mean_within_three_sigma():
    a = 0.25
    sample = SplitMix64(99).uniform_sym(10_000, a)
    sigma = a / np.sqrt(3) / np.sqrt(sample.size)
    assert abs(sample.mean()) < 3 * sigma
    assert sample.min() >= -a and sample.max() < a


def test_splitmix64_reference_vectors():
    # published SplitMix64 outputs for seed 1234567
    expected = [6457827717110365317, 3203168211198807973, 9817491932198370423,
                4593380528125082431, 16408922859458223821]
    assert [int(v) for v in SplitMix64(1234567).next_u64(5)] == expected
    state, out = 1234567, []
    for _ in range(5):
        state, value = splitmix64_scalar(state)
        out.append(value)
    assert out == expected
    assert GAMMA == 0x9E3779B97F4A7C15


def test_splitmix64_stream_continues_across_calls():
    a = SplitMix64(5)
    first = np.concatenate([a.next_u64(3), a.next_u64(4)])
    assert np.array_equal(first, SplitMix64(5).next_u64(7))


def test_uniform_is_53_bit_fraction():
    u = SplitMix64(11).uniform(1000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert np.all(u * 2.0**53 == np.floor(u * 2.0**53))
