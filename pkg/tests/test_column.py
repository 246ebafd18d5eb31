import json
import math

import numpy as np
import pytest

from rowcnn import column
from rowcnn.data import images_to_tensor, synthetic_images
from rowcnn.errors import CorruptStateError, InvalidShapeError
from rowcnn.meter import Category, MemoryMeter
from rowcnn.netspec import init_params, load_config, parse_config

from conftest import central_diff, rel_error


def spec_of(layers, c=1, h=6, w=6, classes=3):
    return parse_config(json.dumps({"input": {"c": c, "h": h, "w": w}, "classes": classes, "layers": layers}))


THREE_LAYER = [
    {"type": "conv", "c_out": 2, "k": 3, "s": 1, "p": 1}, {"type": "relu"},
    {"type": "pool", "kind": "max", "k": 2, "s": 2},
    {"type": "conv", "c_out": 3, "k": 2, "s": 1, "p": 0}, {"type": "relu"},
    {"type": "flatten"}, {"type": "fc", "out": 3},
]


def test_zero_weights_give_log_classes(rng):
    spec = spec_of(THREE_LAYER)
    params = init_params(spec, 0).zeros_like()
    _, loss = column.forward_full(spec, params, rng.standard_normal((2, 1, 6, 6)), [0, 2])
    assert loss == pytest.approx(math.log(3), rel=1e-14)


def test_identity_1x1_network_keeps_input(rng):
    spec = spec_of([{"type": "conv", "c_out": 1, "k": 1}, {"type": "flatten"}, {"type": "fc", "out": 3}])
    params = init_params(spec, 0)
    params["stage1.w"][...] = 1.0
    x = rng.standard_normal((2, 1, 6, 6))
    tape, _ = column.forward_full(spec, params, x, [0, 1])
    assert np.array_equal(tape.zs[1], x)


def test_straight_line_two_layer_loss():
    spec = spec_of([{"type": "conv", "c_out": 1, "k": 2}, {"type": "flatten"}, {"type": "fc", "out": 2}],
                   h=3, w=3, classes=2)
    params = init_params(spec, 5)
    x = np.arange(9, dtype=float).reshape(1, 1, 3, 3) / 10.0
    w, fw = params["stage1.w"][0, 0], params["fc0.w"]
    z = [w[0, 0] * x[0, 0, i, j] + w[0, 1] * x[0, 0, i, j + 1] + w[1, 0] * x[0, 0, i + 1, j]
         + w[1, 1] * x[0, 0, i + 1, j + 1] for i in range(2) for j in range(2)]
    logit0 = sum(fw[0, m] * z[m] for m in range(4))
    logit1 = sum(fw[1, m] * z[m] for m in range(4))
    expected = -(logit1 - math.log(math.exp(logit0) + math.exp(logit1)))
    _, loss = column.forward_full(spec, params, x, [1])
    assert loss == pytest.approx(expected, rel=1e-12)


def test_gradients_vanish_at_a_strict_minimum():
    # identical inputs with opposite labels: the optimum is equal logits
    spec = spec_of([{"type": "conv", "c_out": 1, "k": 1}, {"type": "flatten"}, {"type": "fc", "out": 2}],
                   h=2, w=2, classes=2)
    params = init_params(spec, 1)
    params["fc0.w"][...] = 0.0
    x = np.ones((2, 1, 2, 2))
    tape, _ = column.forward_full(spec, params, x, [0, 1])
    grads = column.backward_full(spec, params, tape)
    assert all(np.abs(g).max() < 1e-15 for g in grads.values())


def test_delta_scaling_is_linear(rng):
    spec = spec_of(THREE_LAYER)
    params = init_params(spec, 2)
    tape, _ = column.forward_full(spec, params, rng.standard_normal((2, 1, 6, 6)), [1, 2])
    one = column.backward_full(spec, params, tape, delta_scale=1.0)
    two = column.backward_full(spec, params, tape, delta_scale=2.0)
    for k in one:
        np.testing.assert_allclose(two[k], 2 * one[k], rtol=1e-14, atol=0)


def test_gradients_match_finite_differences(rng):
    spec = spec_of(THREE_LAYER)
    params = init_params(spec, 3)
    for k in params:
        params[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
    x = rng.standard_normal((2, 1, 6, 6))
    y = [0, 2]
    tape, _ = column.forward_full(spec, params, x, y)
    grads = column.backward_full(spec, params, tape)
    for name, value in params.items():
        fd = central_diff(lambda: column.forward_full(spec, params, x, y)[1], value)
        assert rel_error(grads[name], fd) <= 1e-6, name


def test_stale_tape_is_rejected(rng):
    spec = spec_of(THREE_LAYER)
    params = init_params(spec, 0)
    tape, _ = column.forward_full(spec, params, rng.standard_normal((1, 1, 6, 6)), [0])
    tape.zs.pop()
    with pytest.raises(CorruptStateError):
        column.backward_full(spec, params, tape)


def test_wrong_batch_dims(rng):
    spec = spec_of(THREE_LAYER)
    with pytest.raises(InvalidShapeError):
        column.forward_full(spec, init_params(spec, 0), np.ones((1, 1, 5, 6)), [0])


def test_backward_does_not_touch_params(rng):
    spec = spec_of(THREE_LAYER)
    params = init_params(spec, 0)
    before = params.copy()
    tape, _ = column.forward_full(spec, params, rng.standard_normal((1, 1, 6, 6)), [0])
    column.backward_full(spec, params, tape)
    assert all(np.array_equal(before[k], params[k]) for k in params)


def test_zero_learning_rate_keeps_params(rng):
    spec = spec_of(THREE_LAYER)
    params = init_params(spec, 0)
    new, _ = column.train_step(spec, params, rng.standard_normal((2, 1, 6, 6)), [0, 1], 0.0)
    assert all(np.array_equal(new[k], params[k]) for k in params)


def test_sgd_step_is_exactly_minus_lr_times_gradient(rng):
    spec = spec_of(THREE_LAYER)
    params = init_params(spec, 0)
    x = rng.standard_normal((2, 1, 6, 6))
    tape, _ = column.forward_full(spec, params, x, [0, 1])
    grads = column.backward_full(spec, params, tape)
    new, _ = column.train_step(spec, params, x, [0, 1], 0.25)
    for k in params:
        assert np.array_equal(new[k], params[k] - 0.25 * grads[k])


def _tiny_run(lr, steps=20):
    spec = load_config("configs/tiny.json")
    images, labels = synthetic_images(16, spec.input_dims, 2, 0)
    x, y = images_to_tensor(images), labels.astype(int)
    params, losses = init_params(spec, 0), []
    for i in range(steps):
        idx = (np.arange(4) + 4 * i) % 16
        params, loss = column.train_step(spec, params, x[idx], y[idx], lr)
        losses.append(loss)
    return losses


def test_golden_twenty_step_loss():
    # recorded once after the finite-difference checks above passed
    assert _tiny_run(0.1)[-1] == pytest.approx(0.6098412251778469, rel=1e-12)


def test_synthetic_two_class_data_is_learnable():
    losses = _tiny_run(0.1)
    assert losses[-1] < losses[0] - 0.05
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_featuremap_peak_equals_sum_of_layer_sizes(rng):
    spec = load_config("configs/desk8.json")
    params = init_params(spec, 0)
    meter = MemoryMeter(8)
    batch = 3
    tape, _ = column.forward_full(spec, params, rng.standard_normal((batch,) + spec.input_dims), [0, 1, 0], meter)
    expected = sum(batch * c * h * w for c, h, w in spec.shapes[1:]) * 8
    assert meter.peak[Category.FEATURE_MAP] == expected
    column.backward_full(spec, params, tape)
    assert meter.current[Category.FEATURE_MAP] == 0
    assert meter.live_handles() == 0
