"""Integer-only inference: hand-traced examples, conversion rules, the
float-simulation oracle, and the serialized model format."""

import numpy as np
import pytest

from qatforge import fixedpoint as fx
from qatforge import quantizers as qz
from qatforge.models import net_from_spec
from qatforge.training import LayerBits, ScaleState


def _fc_layer(codes, bias, wbits, abits, d, din, dout):
    codes = np.asarray(codes, dtype=np.int64)
    return fx.FxLayer(
        kind="fc",
        in_features=codes.shape[1],
        out_features=codes.shape[0],
        weight_codes=codes,
        bias_codes=np.asarray(bias, dtype=np.int64),
        weight_bits=wbits,
        act_bits=abits,
        weight_scale=d,
        in_scale=din,
        out_scale=dout,
    )


def test_int_tensor_range_validation():
    fx.IntTensor(np.array([-8, 7]), bits=4, signed=True)
    fx.IntTensor(np.array([0, 15]), bits=4, signed=False)
    with pytest.raises(ValueError):
        fx.IntTensor(np.array([8]), bits=4, signed=True)
    with pytest.raises(ValueError):
        fx.IntTensor(np.array([-1]), bits=4, signed=False)
    with pytest.raises(ValueError):
        fx.IntTensor(np.array([0]), bits=0, signed=True)


def test_hand_traced_single_multiply():
    # one input, one weight: weight code -1 at delta 0.5, input code 3 at
    # 0.25, bias code 2. acc = -1*3 + 2 = -1, logit scale 0.125 -> -0.125
    layer = _fc_layer([[-1]], [2], wbits=2, abits=0, d=0.5, din=0.25, dout=0.0)
    model = fx.FixedPointModel(input_scale=0.25, input_bits=8, layers=[layer])
    logits = fx.infer(model, fx.IntTensor(np.array([[3]]), 8, signed=False))
    assert logits.shape == (1, 1)
    assert logits[0, 0] == -0.125
    # with a requantizing output stage the negative value clips to code 0,
    # which is the fused ReLU
    layer2 = _fc_layer([[-1]], [2], wbits=2, abits=4, d=0.5, din=0.25, dout=0.125)
    acc = np.array([[3]]) @ layer2.weight_codes.T + layer2.bias_codes
    assert acc[0, 0] == -1
    assert fx._requant_mult(acc, layer2)[0, 0] == 0


def test_identity_conv_passes_codes_through():
    codes = np.arange(16, dtype=np.int64).reshape(1, 1, 4, 4)
    layer = fx.FxLayer(
        kind="conv",
        in_ch=1,
        out_ch=1,
        ksize=1,
        weight_codes=np.ones((1, 1, 1, 1), dtype=np.int64),
        bias_codes=np.zeros(1, dtype=np.int64),
        weight_bits=2,
        act_bits=8,
        weight_scale=1.0,
        in_scale=1.0,
        out_scale=1.0,
    )
    final = _fc_layer(np.eye(16, dtype=np.int64), np.zeros(16), 8, 0, 1.0, 1.0, 0.0)
    model = fx.FixedPointModel(
        input_scale=1.0,
        input_bits=8,
        layers=[layer, fx.FxLayer(kind="flatten"), final],
    )
    logits = fx.infer(model, fx.IntTensor(codes, 8, signed=False))
    assert np.array_equal(logits[0], np.arange(16.0))


def test_requant_shift_rounding():
    layer = _fc_layer([[1]], [0], 2, 8, 1.0, 1.0, 8.0)
    layer.shift = 3
    acc = np.array([[40], [36], [-36], [4]])
    got = fx._requant_shift(acc, layer)
    # 40/8 = 5; 36/8 = 4.5 rounds away to 5; negatives clip at 0
    assert got.tolist() == [[5], [5], [0], [1]]
    # shift 0 is the identity on non-negative accumulators
    layer.shift = 0
    acc2 = np.array([[7], [200]])
    assert fx._requant_shift(acc2, layer).tolist() == [[7], [200]]


def test_zero_input_yields_quantized_bias():
    d, din, dout, m = 0.5, 0.25, 0.2, 4
    bias = np.array([3, -2, 40], dtype=np.int64)
    layer = _fc_layer(np.zeros((3, 5), dtype=np.int64), bias, 4, m, d, din, dout)
    acc = np.zeros((1, 5), dtype=np.int64) @ layer.weight_codes.T + bias
    out = fx._requant_mult(acc, layer)
    want = qz.code_unsigned(bias * (d * din), dout, m)
    assert np.array_equal(out[0], want)


def test_zero_weight_model_gives_zero_logits_both_paths():
    layer = _fc_layer(np.zeros((3, 4), dtype=np.int64), np.zeros(3), 4, 0, 0.5, 0.25, 0.0)
    model = fx.FixedPointModel(input_scale=0.25, input_bits=8, layers=[layer])
    rng = np.random.default_rng(0)
    flat_codes = rng.integers(0, 256, (5, 4)).astype(np.int64)
    flat = fx.IntTensor(flat_codes, 8, signed=False)
    assert np.all(fx.infer(model, flat) == 0.0)
    sim_in = flat_codes.astype(np.float64)
    x = sim_in * model.input_scale
    assert np.all(x @ (layer.weight_codes * 0.5).T == 0.0)


def _tiny_quantized_net(rng, delta_w, act_scale, input_scale, wbits=4, abits=4):
    spec = [
        ["conv", 1, 2, 3, 1, 0],
        ["maxpool", 2],
        ["flatten"],
        ["linear", 2 * 3 * 3, 3],
    ]
    net = net_from_spec(spec, rng=rng)
    plan = [LayerBits(wbits, abits), LayerBits(wbits, None)]
    scales = ScaleState(
        weight_scales=[delta_w, delta_w],
        act_scales=[act_scale, 1.0],
        input_scale=input_scale,
    )
    for idx, layer in enumerate(net.param_layers):
        layer.W = qz.quantize_signed(
            rng.normal(0, 2 * delta_w, layer.W.shape), delta_w, wbits
        )
        step = delta_w * (input_scale if idx == 0 else act_scale)
        layer.b = qz.snap_to_grid(rng.normal(0, 5 * step, layer.b.shape), step)
    return net, scales, plan


def test_convert_frozen_code_examples():
    rng = np.random.default_rng(1)
    net, scales, plan = _tiny_quantized_net(rng, 0.5, 0.25, 0.25, wbits=2)
    conv = net.param_layers[0]
    conv.W[0, 0, 0, 0] = 0.5
    conv.W[0, 0, 0, 1] = -1.0
    conv.b[0] = 0.25  # step = 0.5 * 0.25 = 0.125 -> code 2
    model = fx.convert(net, scales, plan)
    assert model.layers[0].weight_codes[0, 0, 0, 0] == 1
    assert model.layers[0].weight_codes[0, 0, 0, 1] == -2
    assert model.layers[0].bias_codes[0] == 2
    # codes reproduce the levels exactly
    assert np.array_equal(
        model.layers[0].weight_codes * 0.5, net.param_layers[0].W
    )


def test_convert_refuses_unconverged_weights():
    rng = np.random.default_rng(2)
    net, scales, plan = _tiny_quantized_net(rng, 0.5, 0.25, 0.25)
    net.param_layers[0].W[0, 0, 0, 0] += 0.2  # 0.4 * delta away
    with pytest.raises(ValueError, match="not converged"):
        fx.convert(net, scales, plan)


def test_convert_refuses_unquantized_plan():
    rng = np.random.default_rng(3)
    net, scales, plan = _tiny_quantized_net(rng, 0.5, 0.25, 0.25)
    with pytest.raises(ValueError, match="no weight bit-width"):
        fx.convert(net, scales, [LayerBits(None, None), LayerBits(None, None)])
    with pytest.raises(ValueError, match="no activation bit-width"):
        fx.convert(net, scales, [LayerBits(4, None), LayerBits(4, None)])


def test_convert_checks_accumulator_bound():
    rng = np.random.default_rng(4)
    net = net_from_spec([["linear", 70000, 2]], rng=rng)
    delta = 0.5
    net.param_layers[0].W = qz.quantize_signed(
        rng.normal(0, 1, (2, 70000)), delta, 8
    )
    net.param_layers[0].b = np.zeros(2)
    scales = ScaleState([delta], [1.0], 1 / 255)
    with pytest.raises(ValueError, match="accumulator"):
        fx.convert(net, scales, [LayerBits(8, None)])


def test_infer_matches_simulate_float_random_models():
    rng = np.random.default_rng(5)
    for delta_w, act_scale, input_scale in [
        (0.25, 0.5, 1 / 256),  # all powers of two
        (0.3, 0.17, 1 / 255),  # none
    ]:
        net, scales, plan = _tiny_quantized_net(rng, delta_w, act_scale, input_scale)
        model = fx.convert(net, scales, plan)
        images = rng.integers(0, 256, (64, 8, 8)).astype(np.uint8)
        logits = fx.infer(model, images, debug=True)
        sim = fx.simulate_float(model, images)
        assert np.array_equal(np.argmax(logits, 1), np.argmax(sim, 1))
        rel = np.max(np.abs(logits - sim)) / max(np.max(np.abs(sim)), 1e-12)
        assert rel <= 1e-6


def test_pow2_model_uses_shifts_and_matches_exactly():
    rng = np.random.default_rng(6)
    net, scales, plan = _tiny_quantized_net(rng, 0.25, 0.5, 1 / 256)
    model = fx.convert(net, scales, plan)
    assert model.shift_only
    for layer in model.param_layers:
        assert layer.shift is not None
        mult = layer.multiplier if layer.act_bits else layer.logit_scale
        assert mult == 2.0 ** (-layer.shift)
    images = rng.integers(0, 256, (32, 8, 8)).astype(np.uint8)
    a = fx.infer(model, images)
    b = fx.infer_shift(model, images)
    assert np.array_equal(a, b)
    # for power-of-two scales every simulated value is exact too
    assert np.array_equal(fx.simulate_float(model, images), a)


def test_non_pow2_model_rejects_shift_inference():
    rng = np.random.default_rng(7)
    net, scales, plan = _tiny_quantized_net(rng, 0.3, 0.17, 1 / 255)
    model = fx.convert(net, scales, plan)
    assert not model.shift_only
    assert all(l.shift is None for l in model.param_layers)
    with pytest.raises(ValueError, match="shift"):
        fx.infer_shift(model, np.zeros((1, 8, 8), dtype=np.uint8))


def test_debug_mode_reports_overflow():
    layer = _fc_layer([[2**20]], [0], 32, 0, 1.0, 1.0, 0.0)
    model = fx.FixedPointModel(input_scale=1.0, input_bits=16, layers=[layer])
    big = fx.IntTensor(np.array([[2**13]]), 16, signed=False)
    with pytest.raises(OverflowError):
        fx.infer(model, big, debug=True)
    # without debug the int64 accumulator silently carries it
    assert fx.infer(model, big)[0, 0] == float(2**33)


def test_encode_input_validates_range():
    model = fx.FixedPointModel(input_scale=1 / 255, input_bits=8)
    with pytest.raises(ValueError):
        fx.encode_input(np.full((1, 2, 2), 256), model)
    t = fx.encode_input(np.zeros((3, 4, 4), dtype=np.uint8), model)
    assert t.codes.shape == (3, 1, 4, 4)


def test_save_load_round_trip_byte_exact():
    rng = np.random.default_rng(8)
    net, scales, plan = _tiny_quantized_net(rng, 0.25, 0.5, 1 / 256)
    model = fx.convert(net, scales, plan)
    blob = fx.save_model(None, model)
    assert blob[:4] == fx.MAGIC
    again = fx.load_model(blob)
    assert fx.save_model(None, again) == blob
    images = rng.integers(0, 256, (16, 8, 8)).astype(np.uint8)
    assert np.array_equal(fx.infer(model, images), fx.infer(again, images))
    assert again.shift_only == model.shift_only


def test_save_load_file_path(tmp_path):
    rng = np.random.default_rng(9)
    net, scales, plan = _tiny_quantized_net(rng, 0.3, 0.17, 1 / 255)
    model = fx.convert(net, scales, plan)
    p = tmp_path / "model.fxpm"
    blob = fx.save_model(p, model)
    assert p.read_bytes() == blob
    again = fx.load_model(p)
    assert fx.save_model(None, again) == blob


def test_load_rejects_malformed_blobs():
    rng = np.random.default_rng(10)
    net, scales, plan = _tiny_quantized_net(rng, 0.25, 0.5, 1 / 256)
    blob = fx.save_model(None, fx.convert(net, scales, plan))
    with pytest.raises(fx.FormatError):
        fx.load_model(b"XXXX" + blob[4:])
    with pytest.raises(fx.FormatError):
        fx.load_model(blob[:-3])
    with pytest.raises(fx.FormatError):
        fx.load_model(blob + b"\x00")
    bad_version = bytearray(blob)
    bad_version[4] = 99
    with pytest.raises(fx.FormatError):
        fx.load_model(bytes(bad_version))
    with pytest.raises(fx.FormatError):
        fx.load_model(blob[:6])


def test_big_lenet_conversion_is_statically_safe():
    # the fixed topology with 8-bit weights and activations stays inside a
    # 32-bit accumulator by the static bound
    from qatforge.models import build_lenet

    rng = np.random.default_rng(11)
    net = build_lenet(rng)
    delta = 0.02
    plan = [LayerBits(8, 8), LayerBits(8, 8), LayerBits(8, 8), LayerBits(8, None)]
    for idx, layer in enumerate(net.param_layers):
        layer.W = qz.quantize_signed(layer.W, delta, 8)
        step = delta * (1 / 255 if idx == 0 else 0.1)
        layer.b = qz.snap_to_grid(layer.b, step)
    scales = ScaleState([delta] * 4, [0.1] * 4, 1 / 255)
    model = fx.convert(net, scales, plan)
    assert len(model.param_layers) == 4
