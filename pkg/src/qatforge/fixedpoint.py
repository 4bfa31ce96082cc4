"""Integer-only inference.

A converted model stores per-layer integer weight codes, integer biases on
the delta*Delta_in grid, and the three scales that tie them together. One
layer runs as: integer accumulate, integer bias add, one combined rescale
delta*Delta_in/Delta_out with round-half-away-from-zero, clip to the
unsigned activation range (which also plays the role of ReLU), and the codes
feed the next layer. The final layer skips requantization and emits real
logits scaled by delta*Delta_in. When every scale is a power of two the
rescale collapses to an arithmetic shift (infer_shift).

The accumulator contract is 32-bit signed: conversion statically checks
fan_in * 2^(n-1) * (2^m - 1) + |bias| against 2^31 - 1 per layer, and
infer(debug=True) re-checks the realized accumulators. Internally numpy
int64 is used, so the check is about the declared width, not about numpy
overflowing.

simulate_float evaluates the same network in real arithmetic with the
quantizers applied, mirroring the training-time quantized forward; it is the
equivalence oracle for infer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import quantizers as qz
from .nn import _im2col

INT32_MAX = 2**31 - 1
MAGIC = b"FXPM"
VERSION = 1
SHIFT_NONE = -(2**15)  # sentinel in the i16 shift slot

_KIND_TAGS = {"conv": 1, "fc": 2, "relu": 3, "maxpool": 4, "flatten": 5}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


@dataclass
class IntTensor:
    codes: np.ndarray
    bits: int
    signed: bool

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if not 1 <= self.bits <= 32:
            raise ValueError(f"bit-width {self.bits} out of range")
        lo, hi = self.range()
        if self.codes.size and (self.codes.min() < lo or self.codes.max() > hi):
            raise ValueError(
                f"codes outside [{lo}, {hi}] for {self.bits}-bit "
                f"{'signed' if self.signed else 'unsigned'} tensor"
            )

    def range(self):
        if self.signed:
            return -(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1
        return 0, 2**self.bits - 1


@dataclass
class FxLayer:
    kind: str
    # conv geometry
    in_ch: int = 0
    out_ch: int = 0
    ksize: int = 0
    stride: int = 1
    pad: int = 0
    # fc geometry
    in_features: int = 0
    out_features: int = 0
    # pool geometry
    size: int = 0
    # parameters (conv/fc only)
    weight_codes: np.ndarray | None = None
    bias_codes: np.ndarray | None = None
    weight_bits: int = 0
    act_bits: int = 0  # 0 = final layer, no requantization
    weight_scale: float = 0.0
    in_scale: float = 0.0
    out_scale: float = 0.0
    shift: int | None = None

    @property
    def multiplier(self):
        return self.weight_scale * self.in_scale / self.out_scale

    @property
    def logit_scale(self):
        return self.weight_scale * self.in_scale


@dataclass
class FixedPointModel:
    input_scale: float
    input_bits: int
    layers: list = field(default_factory=list)
    shift_only: bool = False

    @property
    def param_layers(self):
        return [l for l in self.layers if l.kind in ("conv", "fc")]


def encode_input(images, model: FixedPointModel):
    """uint8 images are already the input codes: pixel value = code, real
    value = code * input_scale."""
    codes = np.asarray(images)
    if codes.min() < 0 or codes.max() > 2**model.input_bits - 1:
        raise ValueError("input codes outside the declared input bit-width")
    if codes.ndim == 3:
        codes = codes.reshape(codes.shape[0], 1, codes.shape[1], codes.shape[2])
    return IntTensor(codes, model.input_bits, signed=False)


def _plan_from_spec(num_layers, spec: qz.QuantSpec):
    from .training import LayerBits

    return [
        LayerBits(spec.weight_bits, spec.act_bits if l < num_layers - 1 else None)
        for l in range(num_layers)
    ]


def _shift_exponent(x):
    """s with x == 2**(-s), or None."""
    if x <= 0 or not qz.is_pow2(x):
        return None
    return -int(np.frexp(x)[1] - 1)


def convert(net, scales, plan_or_spec):
    """Freeze a trained float network into a FixedPointModel.

    Refuses when any weight sits farther than 0.25*delta from its nearest
    level: that model has not converged onto its grid and integer codes
    would change the function. Also refuses layers left unquantized by the
    plan, and statically checks the 32-bit accumulator bound.
    """
    from .models import net_spec
    from .training import bias_grid_step

    params = net.param_layers
    if isinstance(plan_or_spec, qz.QuantSpec):
        plan = _plan_from_spec(len(params), plan_or_spec)
    else:
        plan = list(plan_or_spec)
    for l, p in enumerate(plan):
        if p.weights is None:
            raise ValueError(
                f"layer {l} has no weight bit-width: integer-only conversion "
                "needs every parameter layer quantized"
            )
        if l < len(plan) - 1 and p.acts is None:
            raise ValueError(
                f"layer {l} has no activation bit-width: inter-layer codes "
                "would be undefined"
            )

    input_bits = 8
    model = FixedPointModel(
        input_scale=float(scales.input_scale), input_bits=input_bits
    )
    pidx = 0
    in_scales = {}
    act_bits_in = {}
    for l in range(len(params)):
        if l == 0:
            in_scales[l] = float(scales.input_scale)
            act_bits_in[l] = input_bits
        else:
            in_scales[l] = float(scales.act_scales[l - 1])
            act_bits_in[l] = plan[l - 1].acts

    shift_ok = True
    for entry in net_spec(net):
        kind = entry[0]
        if kind in ("conv", "linear"):
            layer = params[pidx]
            n = plan[pidx].weights
            d = float(scales.weight_scales[pidx])
            m = plan[pidx].acts
            w = layer.W
            wq = qz.quantize_signed(w, d, n)
            worst = float(np.max(np.abs(w - wq))) if w.size else 0.0
            if worst > 0.25 * d:
                raise ValueError(
                    f"layer {pidx} not converged: max weight distance from a "
                    f"level is {worst:.3e} > 0.25*delta = {0.25 * d:.3e}"
                )
            codes = np.asarray(qz.code_signed(w, d, n), dtype=np.int64)
            if not np.array_equal(codes * d, np.asarray(wq)):
                raise ValueError(f"layer {pidx}: codes do not reproduce levels")
            step = bias_grid_step(plan, scales, pidx)
            bias = np.asarray(
                qz.round_half_away(layer.b / step), dtype=np.int64
            )
            if not np.array_equal(bias * step, np.asarray(qz.snap_to_grid(layer.b, step))):
                raise ValueError(f"layer {pidx}: bias codes do not reproduce grid")
            if bias.size and np.abs(bias).max() > INT32_MAX:
                raise ValueError(f"layer {pidx}: bias codes exceed 32-bit range")

            fan_in = (
                layer.in_ch * layer.ksize * layer.ksize
                if kind == "conv"
                else layer.in_features
            )
            m_in = act_bits_in[pidx]
            bound = fan_in * 2 ** (n - 1) * (2**m_in - 1)
            bound += int(np.abs(bias).max()) if bias.size else 0
            if bound > INT32_MAX:
                raise ValueError(
                    f"layer {pidx}: worst-case accumulator {bound} exceeds "
                    f"32-bit range {INT32_MAX}"
                )

            din = in_scales[pidx]
            dout = float(scales.act_scales[pidx]) if m is not None else 0.0
            fx = FxLayer(
                kind="conv" if kind == "conv" else "fc",
                weight_codes=codes,
                bias_codes=bias,
                weight_bits=n,
                act_bits=m if m is not None else 0,
                weight_scale=d,
                in_scale=din,
                out_scale=dout,
            )
            if kind == "conv":
                fx.in_ch, fx.out_ch, fx.ksize = layer.in_ch, layer.out_ch, layer.ksize
                fx.stride, fx.pad = layer.stride, layer.pad
            else:
                fx.in_features, fx.out_features = layer.in_features, layer.out_features
            mult = fx.multiplier if m is not None else fx.logit_scale
            s = _shift_exponent(mult)
            if s is None:
                shift_ok = False
            else:
                fx.shift = s
            model.layers.append(fx)
            pidx += 1
        elif kind == "maxpool":
            model.layers.append(FxLayer(kind="maxpool", size=entry[1]))
        elif kind == "relu":
            model.layers.append(FxLayer(kind="relu"))
        elif kind == "flatten":
            model.layers.append(FxLayer(kind="flatten"))
        else:
            raise ValueError(f"cannot convert layer kind {kind!r}")
    model.shift_only = shift_ok
    if not shift_ok:
        for fx in model.layers:
            fx.shift = None
    return model


def _conv_int(x, fx: FxLayer):
    n = x.shape[0]
    if fx.pad:
        x = np.pad(x, ((0, 0), (0, 0), (fx.pad, fx.pad), (fx.pad, fx.pad)))
    cols, ho, wo = _im2col(x, fx.ksize, fx.ksize, fx.stride)
    wf = fx.weight_codes.reshape(fx.out_ch, -1)
    out = cols @ wf.T + fx.bias_codes
    return out.reshape(n, ho, wo, fx.out_ch).transpose(0, 3, 1, 2)


def _pool_int(x, size):
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError("pool size must divide the spatial dims")
    return x.reshape(n, c, h // size, size, w // size, size).max(axis=(3, 5))


def _requant_mult(acc, fx: FxLayer):
    scaled = qz.round_half_away(acc.astype(np.float64) * fx.multiplier)
    return np.clip(scaled, 0, 2**fx.act_bits - 1).astype(np.int64)


def _requant_shift(acc, fx: FxLayer):
    s = fx.shift
    if s <= 0:
        shifted = acc << (-s)
    else:
        mag = np.abs(acc)
        shifted = np.sign(acc) * ((mag + (1 << (s - 1))) >> s)
    return np.clip(shifted, 0, 2**fx.act_bits - 1)


def _run_int(model: FixedPointModel, codes, use_shift, debug):
    x = codes
    logits = None
    for fx in model.layers:
        if fx.kind in ("conv", "fc"):
            if fx.kind == "conv":
                acc = _conv_int(x, fx)
            else:
                acc = x @ fx.weight_codes.T + fx.bias_codes
            if debug and acc.size and np.abs(acc).max() > INT32_MAX:
                raise OverflowError(
                    f"accumulator {np.abs(acc).max()} exceeds the declared "
                    f"32-bit width"
                )
            if fx.act_bits:
                x = _requant_shift(acc, fx) if use_shift else _requant_mult(acc, fx)
            else:
                if use_shift:
                    logits = np.ldexp(acc.astype(np.float64), -fx.shift)
                else:
                    logits = acc.astype(np.float64) * fx.logit_scale
        elif fx.kind == "maxpool":
            x = _pool_int(x, fx.size)
        elif fx.kind == "relu":
            x = np.maximum(x, 0)
        elif fx.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
    if logits is None:
        raise ValueError("model has no final parameter layer")
    return logits


def infer(model: FixedPointModel, inp, batch=512, debug=False):
    """Integer-only forward; returns real logits (n, classes)."""
    if not isinstance(inp, IntTensor):
        inp = encode_input(inp, model)
    codes = inp.codes
    outs = [
        _run_int(model, codes[s : s + batch], use_shift=False, debug=debug)
        for s in range(0, codes.shape[0], batch)
    ]
    return np.concatenate(outs, axis=0)


def infer_shift(model: FixedPointModel, inp, batch=512, debug=False):
    """infer with every rescale done as an arithmetic shift (round half away
    from zero before truncation). Only valid when conversion found every
    multiplier to be a power of two."""
    if not model.shift_only:
        raise ValueError(
            "model has non-power-of-two rescale multipliers; shift inference "
            "is undefined"
        )
    if not isinstance(inp, IntTensor):
        inp = encode_input(inp, model)
    codes = inp.codes
    outs = [
        _run_int(model, codes[s : s + batch], use_shift=True, debug=debug)
        for s in range(0, codes.shape[0], batch)
    ]
    return np.concatenate(outs, axis=0)


def simulate_float(model: FixedPointModel, images, batch=512):
    """The same network in real arithmetic with quantizers applied: real
    grid weights, real accumulation, requantization as
    Delta*clip(round(y/Delta)). This is the training-time quantized forward
    restricted to inference, and the oracle infer must agree with."""
    from .nn import Conv2d, Linear

    x_all = np.asarray(images, dtype=np.float64)
    if x_all.ndim == 3:
        x_all = x_all.reshape(x_all.shape[0], 1, x_all.shape[1], x_all.shape[2])
    x_all = x_all * model.input_scale

    outs = []
    for s in range(0, x_all.shape[0], batch):
        x = x_all[s : s + batch]
        for fx in model.layers:
            if fx.kind in ("conv", "fc"):
                d, din = fx.weight_scale, fx.in_scale
                wq = fx.weight_codes.astype(np.float64) * d
                bq = fx.bias_codes.astype(np.float64) * (d * din)
                if fx.kind == "conv":
                    op = Conv2d(fx.in_ch, fx.out_ch, fx.ksize, fx.stride, fx.pad)
                else:
                    op = Linear(fx.in_features, fx.out_features)
                y = op.forward(x, wq, bq)
                if fx.act_bits:
                    x = qz.quantize_unsigned(y, fx.out_scale, fx.act_bits)
                else:
                    x = y
            elif fx.kind == "maxpool":
                n, c, h, w = x.shape
                k = fx.size
                x = x.reshape(n, c, h // k, k, w // k, k).max(axis=(3, 5))
            elif fx.kind == "relu":
                x = np.maximum(x, 0.0)
            elif fx.kind == "flatten":
                x = x.reshape(x.shape[0], -1)
        outs.append(x)
    return np.concatenate(outs, axis=0)


def predict(model: FixedPointModel, inp, batch=512, shift=False):
    run = infer_shift if shift else infer
    return np.argmax(run(model, inp, batch=batch), axis=1)


# --- serialization ----------------------------------------------------------


def _code_dtype(bits):
    return "<i1" if bits <= 8 else "<i2"


def save_model(path_or_none, model: FixedPointModel):
    """Serialize to the FXPM container; returns the bytes, and writes them
    if a path is given. Round-trips byte-exactly."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HBBdH", VERSION, int(model.shift_only),
                       model.input_bits, model.input_scale, len(model.layers))
    for fx in model.layers:
        out += struct.pack("<B", _KIND_TAGS[fx.kind])
        if fx.kind == "conv":
            out += struct.pack("<HHBBB", fx.in_ch, fx.out_ch, fx.ksize,
                               fx.stride, fx.pad)
        elif fx.kind == "fc":
            out += struct.pack("<II", fx.in_features, fx.out_features)
        elif fx.kind == "maxpool":
            out += struct.pack("<B", fx.size)
        if fx.kind in ("conv", "fc"):
            shift = SHIFT_NONE if fx.shift is None else fx.shift
            out += struct.pack(
                "<BBdddhII",
                fx.weight_bits,
                fx.act_bits,
                fx.weight_scale,
                fx.in_scale,
                fx.out_scale,
                shift,
                fx.weight_codes.size,
                fx.bias_codes.size,
            )
            out += fx.weight_codes.astype(_code_dtype(fx.weight_bits)).tobytes()
            out += fx.bias_codes.astype("<i4").tobytes()
    blob = bytes(out)
    if path_or_none is not None:
        with open(path_or_none, "wb") as f:
            f.write(blob)
    return blob


class FormatError(ValueError):
    pass


class _Cursor:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError(
                f"truncated file: needed {size} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}"
            )
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def take_array(self, dtype, count):
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.buf):
            raise FormatError(
                f"truncated code block: needed {size} bytes at offset "
                f"{self.pos}, have {len(self.buf) - self.pos}"
            )
        arr = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos)
        self.pos += size
        return arr.astype(np.int64)


def load_model(path_or_bytes):
    if isinstance(path_or_bytes, (bytes, bytearray)):
        buf = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as f:
            buf = f.read()
    cur = _Cursor(buf)
    magic = bytes(cur.take("<4s")[0])
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, shift_only, input_bits, input_scale, n_layers = cur.take("<HBBdH")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if not 1 <= input_bits <= 16 or input_scale <= 0:
        raise FormatError("invalid input encoding")
    model = FixedPointModel(
        input_scale=input_scale, input_bits=input_bits, shift_only=bool(shift_only)
    )
    for i in range(n_layers):
        (tag,) = cur.take("<B")
        kind = _TAG_KINDS.get(tag)
        if kind is None:
            raise FormatError(f"layer {i}: unknown kind tag {tag}")
        fx = FxLayer(kind=kind)
        if kind == "conv":
            fx.in_ch, fx.out_ch, fx.ksize, fx.stride, fx.pad = cur.take("<HHBBB")
        elif kind == "fc":
            fx.in_features, fx.out_features = cur.take("<II")
        elif kind == "maxpool":
            (fx.size,) = cur.take("<B")
        if kind in ("conv", "fc"):
            (fx.weight_bits, fx.act_bits, fx.weight_scale, fx.in_scale,
             fx.out_scale, shift, n_w, n_b) = cur.take("<BBdddhII")
            if not 1 <= fx.weight_bits <= 16:
                raise FormatError(f"layer {i}: weight bits {fx.weight_bits}")
            if fx.act_bits > 16:
                raise FormatError(f"layer {i}: act bits {fx.act_bits}")
            if fx.weight_scale <= 0 or fx.in_scale <= 0:
                raise FormatError(f"layer {i}: non-positive scale")
            if fx.act_bits and fx.out_scale <= 0:
                raise FormatError(f"layer {i}: non-positive output scale")
            fx.shift = None if shift == SHIFT_NONE else shift
            fx.weight_codes = cur.take_array(_code_dtype(fx.weight_bits), n_w)
            fx.bias_codes = cur.take_array("<i4", n_b)
            half = 2 ** (fx.weight_bits - 1)
            if fx.weight_codes.size and (
                fx.weight_codes.min() < -half or fx.weight_codes.max() > half - 1
            ):
                raise FormatError(f"layer {i}: weight codes out of range")
            if kind == "conv":
                fx.weight_codes = fx.weight_codes.reshape(
                    fx.out_ch, fx.in_ch, fx.ksize, fx.ksize
                )
            else:
                fx.weight_codes = fx.weight_codes.reshape(
                    fx.out_features, fx.in_features
                )
        model.layers.append(fx)
    if cur.pos != len(buf):
        raise FormatError(f"{len(buf) - cur.pos} trailing bytes after layer data")
    if model.shift_only and any(
        fx.shift is None for fx in model.layers if fx.kind in ("conv", "fc")
    ):
        raise FormatError("shift-only flag set but a layer has no shift amount")
    return model
