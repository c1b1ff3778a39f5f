"""``.ecgm``: a linear, little-endian container for trained models.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"ECGM"
    4       2     format version (uint16, currently 1)
    6       1     dtype tag (uint8: 1 = float32, 2 = float16)
    7       1     reserved, 0
    8       4     config length C (uint32)
    12      C     config block (see _pack_config)
    12+C    4     tensor count T (uint32)
    ...           T tensor records, canonical parameter order:
                    1 byte rank R, R x uint32 dims, payload (prod(dims) elements)
    end-4   4     CRC-32 (zlib polynomial) of every preceding byte

The config block is: uint16 in_channels, uint32 input_length, uint8 n_blocks,
n_blocks x (uint16 filters, uint16 kernel), uint32 dense_hidden,
uint8 pool_size, float64 leaky_alpha, float64 bn_eps.
"""
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CorruptFile, EncodeError, NotAModelFile, ShapeError, UnsupportedVersion
from .nn.model import ModelConfig, ModelParams, param_shapes

MAGIC = b"ECGM"
FORMAT_VERSION = 1
F32, F16 = 1, 2
DTYPE_NAMES = {F32: "float32", F16: "float16"}
_ITEMSIZE = {F32: 4, F16: 2}
_PREAMBLE = struct.Struct("<4sHBBI")
_U32 = struct.Struct("<I")


def dtype_tag(dtype):
    """Normalize F32/F16, "float32"/"f16" or a numpy dtype to a tag."""
    if isinstance(dtype, int) and dtype in _ITEMSIZE:
        return dtype
    aliases = {"float32": F32, "f32": F32, "float16": F16, "f16": F16}
    try:
        name = np.dtype(dtype).name
    except TypeError:
        name = str(dtype).lower()
    if name not in aliases:
        raise EncodeError(f"unsupported payload dtype {dtype!r}")
    return aliases[name]


# --- binary16 conversion -----------------------------------------------------------

def f32_to_f16(x):
    """IEEE 754 binary32 -> binary16 bit patterns, round-to-nearest-even.

    Accepts a scalar or array; returns uint16 of the same shape.
    """
    bits = np.atleast_1d(np.asarray(x, dtype=np.float32)).view(np.uint32).astype(np.int64)
    sign = (bits >> 16) & 0x8000
    exp = (bits >> 23) & 0xFF
    man = bits & 0x7FFFFF
    out = np.zeros_like(bits)

    nan_inf = exp == 0xFF
    out[nan_inf] = 0x7C00 | np.where(man[nan_inf] != 0, 0x0200 | (man[nan_inf] >> 13), 0)

    e16 = exp - 127 + 15
    normal = ~nan_inf & (e16 >= 1)
    # drop 13 mantissa bits with round-half-even; a carry may bump the exponent
    m = man[normal]
    keep = m >> 13
    rest = m & 0x1FFF
    up = (rest > 0x1000) | ((rest == 0x1000) & ((keep & 1) == 1))
    val = (e16[normal] << 10) + keep + up
    out[normal] = np.where(val >= 0x7C00, 0x7C00, val)

    sub = ~nan_inf & (e16 < 1)
    # subnormal half: value = m16 * 2^-24, with the implicit bit restored
    full = (man[sub] | 0x800000) * (exp[sub] != 0)
    shift = 14 - e16[sub]  # 13 bits + (1 - e16) extra
    shift = np.minimum(shift, 40)
    keep = full >> shift
    rest = full - (keep << shift)
    half = np.left_shift(1, shift - 1)
    up = (rest > half) | ((rest == half) & ((keep & 1) == 1))
    out[sub] = keep + up

    out |= sign
    result = out.astype(np.uint16)
    return result[0] if np.ndim(x) == 0 else result.reshape(np.shape(x))


def f16_to_f32(h):
    """binary16 bit patterns -> float32 values (exact)."""
    shape = np.shape(h)
    h = np.atleast_1d(np.asarray(h, dtype=np.uint16)).astype(np.uint32)
    sign = (h & 0x8000) << 16
    exp = (h >> 10) & 0x1F
    man = h & 0x3FF
    out = np.empty_like(h)

    normal = (exp > 0) & (exp < 31)
    out[normal] = ((exp[normal] + 112) << 23) | (man[normal] << 13)
    special = exp == 31
    out[special] = 0x7F800000 | (man[special] << 13)
    sub = exp == 0
    vals = man[sub].astype(np.float32) * np.float32(2.0 ** -24)
    out[sub] = vals.view(np.uint32)
    out |= sign
    f = out.view(np.float32)
    return f[0] if shape == () else f.reshape(shape)


# --- config block ---------------------------------------------------------------------

def _pack_config(cfg):
    parts = [struct.pack("<HIB", cfg.in_channels, cfg.input_length, len(cfg.conv_filters))]
    for f, k in zip(cfg.conv_filters, cfg.conv_kernels):
        parts.append(struct.pack("<HH", f, k))
    parts.append(struct.pack("<IBdd", cfg.dense_hidden, cfg.pool_size, cfg.leaky_alpha, cfg.bn_eps))
    return b"".join(parts)


def _unpack_config(blob):
    try:
        in_ch, length, n_blocks = struct.unpack_from("<HIB", blob, 0)
        off = 7
        filters, kernels = [], []
        for _ in range(n_blocks):
            f, k = struct.unpack_from("<HH", blob, off)
            filters.append(f)
            kernels.append(k)
            off += 4
        hidden, pool, alpha, eps = struct.unpack_from("<IBdd", blob, off)
        off += 21
    except struct.error:
        raise CorruptFile("config block is truncated") from None
    if off != len(blob):
        raise CorruptFile("config block has trailing bytes")
    try:
        return ModelConfig(in_ch, length, tuple(filters), tuple(kernels), alpha, hidden, pool, eps)
    except (ShapeError, ValueError, TypeError) as exc:
        raise CorruptFile(f"config block describes an invalid model: {exc}") from None


# --- encode / decode ----------------------------------------------------------------

def encode_model(config, params, dtype=F32):
    """Serialize to bytes. Identical inputs always give identical bytes."""
    tag = dtype_tag(dtype)
    try:
        params.check(config)
    except ShapeError as exc:
        raise EncodeError(str(exc)) from None
    cfg_blob = _pack_config(config)
    out = [_PREAMBLE.pack(MAGIC, FORMAT_VERSION, tag, 0, len(cfg_blob)), cfg_blob,
           _U32.pack(len(params.tensors))]
    for name, arr in params.tensors.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise EncodeError(f"parameter {name} contains non-finite values")
        f32 = arr.astype("<f4")
        if tag == F16:
            half = f32_to_f16(f32)
            if np.any((half & 0x7C00) == 0x7C00):
                raise EncodeError(f"parameter {name} overflows float16")
            payload = half.astype("<u2").tobytes()
        else:
            payload = f32.tobytes()
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(payload)
    body = b"".join(out)
    return body + _U32.pack(zlib.crc32(body))


def _read_preamble(data):
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise NotAModelFile("model data must be bytes")
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise NotAModelFile("missing ECGM magic")
    if len(data) < _PREAMBLE.size + 4:
        raise CorruptFile("file is shorter than the fixed header")
    (crc,) = _U32.unpack_from(data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptFile("checksum mismatch")
    _, version, tag, _, cfg_len = _PREAMBLE.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"format version {version} (this reader knows {FORMAT_VERSION})")
    if tag not in _ITEMSIZE:
        raise CorruptFile(f"unknown dtype tag {tag}")
    return data, tag, cfg_len


def _walk(data):
    """Validate the full layout; returns (data, config, tag, header_size, entries)."""
    data, tag, cfg_len = _read_preamble(data)
    end = len(data) - 4
    off = _PREAMBLE.size
    if off + cfg_len + 4 > end:
        raise CorruptFile("config block runs past the end of the file")
    config = _unpack_config(data[off : off + cfg_len])
    off += cfg_len
    (count,) = _U32.unpack_from(data, off)
    off += 4
    header_size = off
    expected = param_shapes(config)
    if count != len(expected):
        raise CorruptFile(f"{count} tensors stored, configuration needs {len(expected)}")
    item = _ITEMSIZE[tag]
    entries = []
    for name, shape, _ in expected:
        if off + 1 > end:
            raise CorruptFile(f"{name}: truncated before rank")
        rank = data[off]
        if off + 1 + 4 * rank > end:
            raise CorruptFile(f"{name}: truncated inside dimensions")
        dims = struct.unpack_from(f"<{rank}I", data, off + 1)
        if tuple(dims) != tuple(shape):
            raise CorruptFile(f"{name}: stored shape {dims} does not match {shape}")
        n_bytes = int(np.prod(dims, dtype=np.int64)) * item
        payload_off = off + 1 + 4 * rank
        if payload_off + n_bytes > end:
            raise CorruptFile(f"{name}: payload runs past the end of the file")
        entries.append((name, tuple(dims), off, payload_off, n_bytes))
        off = payload_off + n_bytes
    if off != end:
        raise CorruptFile(f"{end - off} unexpected bytes before the checksum")
    return data, config, tag, header_size, entries


def decode_model(data):
    """Parse and verify a model file; returns ``(config, params)`` as float32."""
    data, config, tag, _, entries = _walk(data)
    tensors = {}
    for name, dims, _, off, n_bytes in entries:
        if tag == F16:
            arr = f16_to_f32(np.frombuffer(data, "<u2", n_bytes // 2, off))
        else:
            arr = np.frombuffer(data, "<f4", n_bytes // 4, off).astype(np.float32)
        arr = arr.reshape(dims)
        if not np.all(np.isfinite(arr)):
            raise CorruptFile(f"{name}: non-finite parameter values")
        tensors[name] = arr
    return config, ModelParams(tensors)


def peek_dtype(data):
    """Payload dtype name of a model file (checksum verified)."""
    _, tag, _ = _read_preamble(data)
    return DTYPE_NAMES[tag]


@dataclass
class SizeReport:
    total: int
    header: int
    checksum: int
    layers: list  # dicts: name, shape, descriptor, payload

    @property
    def payload(self):
        return sum(layer["payload"] for layer in self.layers)

    @property
    def descriptors(self):
        return sum(layer["descriptor"] for layer in self.layers)


def size_report(data):
    """Exact byte accounting: header + descriptors + payloads + checksum == total."""
    data, _, _, header, entries = _walk(data)
    layers = [{"name": name, "shape": dims, "descriptor": payload_off - prefix_off,
               "payload": n_bytes}
              for name, dims, prefix_off, payload_off, n_bytes in entries]
    return SizeReport(len(data), header, 4, layers)


def save_model(path, config, params, dtype=F32):
    blob = encode_model(config, params, dtype)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def load_model(path):
    with open(path, "rb") as fh:
        return decode_model(fh.read())
