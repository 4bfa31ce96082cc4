"""Entropy-coded archives of pruned, quantized networks.

The pipeline being served: prune (most weights exactly zero), quantize the
survivors onto the delta grid, then Huffman-code two streams over one shared
table each: the nonzero weight codes, and the gaps between nonzero positions
(a gap byte of 255 means "add 255 and keep reading", so arbitrary runs fit
in an 8-bit alphabet). Zeros are never stored; a position is zero exactly
when no code claims it, which makes pruning-induced and quantization-induced
zeros indistinguishable on purpose, both are free. Biases, scales, geometry
and the code tables ride uncompressed in the header and are charged to the
compressed size. decode restores every code and position exactly.

The byte layout is written down in docs/formats.md; save/load round-trips
bit-exactly and the report's component accounting sums to the file size.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
import struct

import numpy as np

from . import quantizers as qz

MAGIC = b"QZIP"
VERSION = 1
GAP_CONT = 255  # continuation token of the gap alphabet

_KIND_TAGS = {"conv": 1, "fc": 2, "relu": 3, "maxpool": 4, "flatten": 5}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


# --- canonical Huffman ------------------------------------------------------


def huffman_build(counts):
    """Canonical prefix code from symbol counts: {symbol: (code, length)}.

    Optimal in expected length; ties in the merge order are broken by
    insertion order so the table is deterministic. A single-symbol alphabet
    gets a 1-bit code.
    """
    items = [(c, s) for s, c in counts.items() if c > 0]
    if not items:
        raise ValueError("cannot build a code over an empty histogram")
    if len(items) == 1:
        return {items[0][1]: (0, 1)}
    lengths = {s: 0 for _, s in items}
    heap = []
    for tie, (c, s) in enumerate(sorted(items, key=lambda t: (t[0], t[1]))):
        heap.append((c, tie, [s]))
    heapq.heapify(heap)
    tie = len(heap)
    while len(heap) > 1:
        c1, _, s1 = heapq.heappop(heap)
        c2, _, s2 = heapq.heappop(heap)
        for s in s1 + s2:
            lengths[s] += 1
        heapq.heappush(heap, (c1 + c2, tie, s1 + s2))
        tie += 1
    return canonical_from_lengths(lengths)


def canonical_from_lengths(lengths):
    """Assign canonical codewords: symbols sorted by (length, symbol), each
    codeword = previous + 1, left-shifted when the length grows."""
    code = 0
    prev_len = 0
    table = {}
    for sym in sorted(lengths, key=lambda s: (lengths[s], s)):
        length = lengths[sym]
        code <<= length - prev_len
        table[sym] = (code, length)
        code += 1
        prev_len = length
    return table


def check_prefix_free(table):
    codes = [(format(c, f"0{l}b")) for c, l in table.values()]
    for i, a in enumerate(codes):
        for j, b in enumerate(codes):
            if i != j and b.startswith(a):
                return False
    return True


class BitWriter:
    """MSB-first bit accumulator."""

    def __init__(self):
        self.buf = bytearray()
        self.acc = 0
        self.nbits = 0

    def write(self, code, length):
        self.acc = (self.acc << length) | (code & ((1 << length) - 1))
        self.nbits += length
        while self.nbits >= 8:
            self.nbits -= 8
            self.buf.append((self.acc >> self.nbits) & 0xFF)
        self.acc &= (1 << self.nbits) - 1

    def getvalue(self):
        # zero-pad the final partial byte
        if self.nbits:
            return bytes(self.buf) + bytes([(self.acc << (8 - self.nbits)) & 0xFF])
        return bytes(self.buf)

    @property
    def bits_written(self):
        return 8 * len(self.buf) + self.nbits


class BitReader:
    def __init__(self, data):
        self.data = data
        self.pos = 0  # bit position

    def read_bit(self):
        byte = self.pos >> 3
        if byte >= len(self.data):
            raise ValueError(f"bitstream exhausted at bit {self.pos}")
        bit = (self.data[byte] >> (7 - (self.pos & 7))) & 1
        self.pos += 1
        return bit


class _Decoder:
    def __init__(self, table):
        self.lookup = {(c, l): s for s, (c, l) in table.items()}
        self.max_len = max(l for _, l in table.values()) if table else 0

    def read_symbol(self, reader):
        code = 0
        for length in range(1, self.max_len + 1):
            code = (code << 1) | reader.read_bit()
            sym = self.lookup.get((code, length))
            if sym is not None:
                return sym
        raise ValueError(f"invalid codeword near bit {reader.pos}")


# --- varints for the bias sidecar -------------------------------------------


def _zigzag(v):
    return v * 2 if v >= 0 else -v * 2 - 1


def _unzigzag(z):
    return z // 2 if z % 2 == 0 else -(z // 2) - 1


def _write_varint(out, v):
    z = _zigzag(int(v))
    while True:
        byte = z & 0x7F
        z >>= 7
        if z:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _read_varint(buf, pos):
    z = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise ValueError(f"truncated varint at offset {pos}")
        byte = buf[pos]
        pos += 1
        z |= (byte & 0x7F) << shift
        shift += 7
        if not byte & 0x80:
            return _unzigzag(z), pos
        if shift > 70:
            raise ValueError(f"varint too long at offset {pos}")


# --- archive ----------------------------------------------------------------


@dataclass
class ArchiveLayer:
    kind: str
    geometry: tuple  # conv: (in_ch, out_ch, k, stride, pad); fc: (in, out); pool: (size,)
    codes: np.ndarray | None = None  # full-shape integer codes, zeros included
    bias_codes: np.ndarray | None = None
    weight_scale: float = 0.0
    bias_step: float = 0.0
    act_scale: float = 0.0  # 0 = output not quantized


@dataclass
class DecodedModel:
    weight_bits: int
    act_bits: int
    input_scale: float
    layers: list = field(default_factory=list)

    @property
    def param_layers(self):
        return [l for l in self.layers if l.kind in ("conv", "fc")]

    def to_network(self):
        """Rebuild a float network carrying the exact dequantized values."""
        from .models import net_from_spec

        spec = []
        for l in self.layers:
            if l.kind == "conv":
                spec.append(["conv", *l.geometry])
            elif l.kind == "fc":
                spec.append(["linear", *l.geometry])
            elif l.kind == "maxpool":
                spec.append(["maxpool", l.geometry[0]])
            else:
                spec.append([l.kind])
        net = net_from_spec(spec)
        for src, dst in zip(self.param_layers, net.param_layers):
            dst.W = src.codes.astype(np.float64) * src.weight_scale
            dst.b = src.bias_codes.astype(np.float64) * src.bias_step
        return net


def _gap_tokens(gap):
    while gap >= GAP_CONT:
        yield GAP_CONT
        gap -= GAP_CONT
    yield gap


def _layer_entries(net, scales, plan):
    """Per param layer: (codes, bias codes, delta, bias step), refusing
    weights off the grid."""
    from .training import bias_grid_step

    entries = []
    for l, layer in enumerate(net.param_layers):
        bits = plan[l].weights
        if bits is None:
            raise ValueError(f"layer {l} is unquantized; nothing to encode")
        d = float(scales.weight_scales[l])
        code = np.asarray(qz.code_signed(layer.W, d, bits), dtype=np.int64)
        err = np.abs(layer.W - d * code.astype(np.float64))
        if err.size and err.max() > 1e-9 * d:
            raise ValueError(
                f"layer {l}: weights are not at quantization levels "
                f"(max residual {err.max():.3e}); run the training ramp to "
                "termination first"
            )
        step = bias_grid_step(plan, scales, l)
        bcode = np.asarray(qz.round_half_away(layer.b / step), dtype=np.int64)
        berr = np.abs(layer.b - step * bcode.astype(np.float64))
        if berr.size and berr.max() > 1e-9 * step:
            raise ValueError(f"layer {l}: biases are not on the bias grid")
        entries.append((code, bcode, d, step))
    return entries


def encode_model(net, masks, scales, plan):
    """Archive bytes for a pruned+quantized network. masks (keep=True) are
    checked against the zeros rather than stored: pruned positions must have
    code 0, and decode recovers them as zeros."""
    from .models import net_spec

    entries = _layer_entries(net, scales, plan)
    wbits = {plan[l].weights for l in range(len(entries))}
    if len(wbits) != 1:
        raise ValueError("all layers must share one weight bit-width")
    weight_bits = wbits.pop()
    abits = {plan[l].acts for l in range(len(entries)) if plan[l].acts is not None}
    if len(abits) > 1:
        raise ValueError("all quantized outputs must share one bit-width")
    act_bits = abits.pop() if abits else 0

    if masks is not None:
        for l, (code, _, _, _) in enumerate(entries):
            if np.any(code[~masks[l]] != 0):
                raise ValueError(
                    f"layer {l}: mask marks positions as pruned but their "
                    "codes are nonzero"
                )

    code_counts = {}
    gap_counts = {}
    per_layer = []
    for code, _, _, _ in entries:
        flat = code.ravel()
        idx = np.flatnonzero(flat)
        per_layer.append((flat, idx))
        prev = -1
        for i in idx:
            for tok in _gap_tokens(int(i) - prev - 1):
                gap_counts[tok] = gap_counts.get(tok, 0) + 1
            sym = int(flat[i])
            code_counts[sym] = code_counts.get(sym, 0) + 1
            prev = int(i)

    code_table = huffman_build(code_counts) if code_counts else {}
    gap_table = huffman_build(gap_counts) if gap_counts else {}

    out = bytearray()
    out += MAGIC
    out += struct.pack(
        "<HBBBd",
        VERSION,
        len(net.layers),
        weight_bits,
        act_bits,
        float(scales.input_scale),
    )
    pidx = 0
    for entry in net_spec(net):
        kind = entry[0]
        tag = _KIND_TAGS["fc" if kind == "linear" else kind]
        out += struct.pack("<B", tag)
        if kind == "conv":
            out += struct.pack("<HHBBB", *entry[1:])
        elif kind == "linear":
            out += struct.pack("<II", *entry[1:])
        elif kind == "maxpool":
            out += struct.pack("<B", entry[1])
        if kind in ("conv", "linear"):
            code, bcode, d, step = entries[pidx]
            _, idx = per_layer[pidx]
            act_scale = (
                float(scales.act_scales[pidx]) if plan[pidx].acts is not None else 0.0
            )
            out += struct.pack(
                "<dddII", d, step, act_scale, len(idx), bcode.size
            )
            for v in bcode:
                _write_varint(out, v)
            pidx += 1
    header_bytes = len(out)

    # weight codes are signed bytes, gap tokens unsigned (0..255)
    for table, fmt in ((code_table, "<bB"), (gap_table, "<BB")):
        out += struct.pack("<H", len(table))
        for sym in sorted(table):
            out += struct.pack(fmt, sym, table[sym][1])
    table_bytes = len(out) - header_bytes

    writer = BitWriter()
    for flat, idx in per_layer:
        prev = -1
        for i in idx:
            for tok in _gap_tokens(int(i) - prev - 1):
                writer.write(*gap_table[tok])
            writer.write(*code_table[int(flat[i])])
            prev = int(i)
    payload = writer.getvalue()
    out += struct.pack("<I", len(payload))
    out += payload
    meta = {
        "header_bytes": header_bytes,
        "table_bytes": table_bytes,
        "payload_bytes": len(payload) + 4,
        "payload_bits_used": writer.bits_written,
    }
    return bytes(out), meta


def decode_model(archive):
    """Rebuild the exact codes, positions, scales and topology."""
    buf = bytes(archive)
    if buf[:4] != MAGIC:
        raise ValueError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4
    version, n_layers, weight_bits, act_bits, input_scale = struct.unpack_from(
        "<HBBBd", buf, pos
    )
    pos += struct.calcsize("<HBBBd")
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    model = DecodedModel(
        weight_bits=weight_bits, act_bits=act_bits, input_scale=input_scale
    )
    nnz_list = []
    for _ in range(n_layers):
        (tag,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        kind = _TAG_KINDS.get(tag)
        if kind is None:
            raise ValueError(f"unknown layer kind tag {tag}")
        if kind == "conv":
            geo = struct.unpack_from("<HHBBB", buf, pos)
            pos += 7
        elif kind == "fc":
            geo = struct.unpack_from("<II", buf, pos)
            pos += 8
        elif kind == "maxpool":
            geo = struct.unpack_from("<B", buf, pos)
            pos += 1
        else:
            geo = ()
        layer = ArchiveLayer(kind=kind, geometry=tuple(int(g) for g in geo))
        if kind in ("conv", "fc"):
            d, step, act_scale, nnz, n_bias = struct.unpack_from("<dddII", buf, pos)
            pos += 32
            layer.weight_scale, layer.bias_step, layer.act_scale = d, step, act_scale
            bias = np.empty(n_bias, dtype=np.int64)
            for i in range(n_bias):
                bias[i], pos = _read_varint(buf, pos)
            layer.bias_codes = bias
            nnz_list.append(nnz)
        model.layers.append(layer)

    tables = []
    for fmt in ("<bB", "<BB"):
        (n_sym,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        lengths = {}
        for _ in range(n_sym):
            sym, length = struct.unpack_from(fmt, buf, pos)
            pos += 2
            if length < 1 or length > 64:
                raise ValueError(f"invalid code length {length}")
            lengths[int(sym)] = int(length)
        tables.append(canonical_from_lengths(lengths) if lengths else {})
    code_table, gap_table = tables
    for name, table in (("weight-code", code_table), ("gap", gap_table)):
        kraft = sum(2.0 ** -l for _, l in table.values())
        if table and kraft > 1.0 + 1e-12:
            raise ValueError(f"{name} table violates the Kraft inequality")

    (payload_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    payload = buf[pos : pos + payload_len]
    if len(payload) != payload_len:
        raise ValueError(
            f"truncated payload: header says {payload_len} bytes, "
            f"{len(payload)} present"
        )
    if pos + payload_len != len(buf):
        raise ValueError(f"{len(buf) - pos - payload_len} trailing bytes")

    reader = BitReader(payload)
    code_dec = _Decoder(code_table)
    gap_dec = _Decoder(gap_table)
    li = 0
    for layer in model.layers:
        if layer.kind not in ("conv", "fc"):
            continue
        if layer.kind == "conv":
            in_ch, out_ch, k, _, _ = layer.geometry
            shape = (out_ch, in_ch, k, k)
        else:
            shape = (layer.geometry[1], layer.geometry[0])
        flat = np.zeros(int(np.prod(shape)), dtype=np.int64)
        nnz = nnz_list[li]
        li += 1
        prev = -1
        half = 2 ** (weight_bits - 1)
        lo, hi = (-1, 1) if weight_bits == 1 else (-half, half - 1)
        for _ in range(nnz):
            gap = 0
            while True:
                tok = gap_dec.read_symbol(reader)
                gap += tok
                if tok != GAP_CONT:
                    break
            i = prev + 1 + gap
            if i >= flat.size:
                raise ValueError(
                    f"decoded position {i} outside layer of {flat.size} weights"
                )
            sym = code_dec.read_symbol(reader)
            if sym == 0 or sym < lo or sym > hi:
                raise ValueError(f"decoded weight code {sym} out of range")
            flat[i] = sym
            prev = i
        layer.codes = flat.reshape(shape)
    return model


# --- accounting -------------------------------------------------------------


@dataclass
class CompressionReport:
    original_bits: int
    compressed_bits: int
    ratio: float
    zero_fraction_before: float
    zero_fraction_after: float
    component_bits: dict

    def __str__(self):
        lines = [
            f"original:    {self.original_bits} bits",
            f"compressed:  {self.compressed_bits} bits",
            f"ratio:       {self.ratio:.1f}x",
            f"zeros before quantization: {self.zero_fraction_before:.4%}",
            f"zeros after quantization:  {self.zero_fraction_after:.4%}",
        ]
        for k, v in self.component_bits.items():
            lines.append(f"  {k}: {v} bits")
        return "\n".join(lines)


def report(archive, float_weights):
    """Bit accounting against the 32-bit float baseline.

    float_weights are the pre-quantization weight arrays (the pruned float
    model); zeros there are pruning zeros, zeros among the decoded codes add
    the quantization-induced ones.
    """
    decoded = decode_model(archive)
    n_weights = sum(int(w.size) for w in float_weights)
    n_dec = sum(int(l.codes.size) for l in decoded.param_layers)
    if n_weights != n_dec:
        raise ValueError(
            f"archive holds {n_dec} weights but the reference model has "
            f"{n_weights}"
        )
    zeros_before = sum(int(np.sum(w == 0.0)) for w in float_weights)
    zeros_after = sum(int(np.sum(l.codes == 0)) for l in decoded.param_layers)

    buf = bytes(archive)
    header_end = 4 + struct.calcsize("<HBBBd")
    for layer in decoded.layers:
        header_end += 1
        if layer.kind == "conv":
            header_end += 7
        elif layer.kind == "fc":
            header_end += 8
        elif layer.kind == "maxpool":
            header_end += 1
        if layer.kind in ("conv", "fc"):
            header_end += 32
            probe = header_end
            for _ in range(layer.bias_codes.size):
                _, probe = _read_varint(buf, probe)
            header_end = probe
    table_end = header_end
    for _ in range(2):
        (n_sym,) = struct.unpack_from("<H", buf, table_end)
        table_end += 2 + 2 * n_sym
    component_bits = {
        "header": 8 * header_end,
        "tables": 8 * (table_end - header_end),
        "payload": 8 * (len(buf) - table_end),
    }
    compressed_bits = 8 * len(buf)
    assert sum(component_bits.values()) == compressed_bits
    return CompressionReport(
        original_bits=32 * n_weights,
        compressed_bits=compressed_bits,
        ratio=32 * n_weights / compressed_bits,
        zero_fraction_before=zeros_before / n_weights,
        zero_fraction_after=zeros_after / n_weights,
        component_bits=component_bits,
    )
