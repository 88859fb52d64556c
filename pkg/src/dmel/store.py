"""On-disk formats: packed token files and the textual codebook sidecar.

Token file layout (all integers little-endian)::

    0   4s  magic "DMEL"
    4   u8  version (1)
    5   u8  bits per bin K
    6   u16 n_mels N
    8   u16 frame_rate_hz
    10  u32 n_frames T
    14  payload, ceil(T*N*K / 8) bytes

Bin (f, c) occupies stream bits [(f*N + c)*K, (f*N + c + 1)*K), least
significant bit first; stream bit b lives in byte b // 8 at bit b % 8.
Trailing pad bits must be zero.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .codec import MAX_BITS, Codebook, TokenGrid
from .errors import CorruptionError, FormatError, SchemaError, TruncationError, VersionError
from .frontend import MEL_FORMULA, FrontendConfig

TOKEN_MAGIC = b"DMEL"
TOKEN_VERSION = 1
HEADER = struct.Struct("<4sBBHHI")
HEADER_SIZE = HEADER.size

CODEBOOK_VERSION = 1


def payload_size(n_frames: int, n_mels: int, bits: int) -> int:
    return math.ceil(n_frames * n_mels * bits / 8)


def pack_bins(values: np.ndarray, bits: int) -> bytes:
    flat = np.asarray(values, dtype=np.uint32).reshape(-1)
    stream = ((flat[:, None] >> np.arange(bits, dtype=np.uint32)) & 1).astype(np.uint8)
    return np.packbits(stream.reshape(-1), bitorder="little").tobytes()


def unpack_bins(payload: bytes, count: int, bits: int) -> np.ndarray:
    stream = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    if stream[count * bits :].any():
        raise CorruptionError("non-zero pad bits after the last bin")
    stream = stream[: count * bits].reshape(count, bits).astype(np.int64)
    return stream @ (np.int64(1) << np.arange(bits, dtype=np.int64))


def encode_tokens(t: TokenGrid) -> bytes:
    t.check_range()
    if t.n_frames >= 1 << 32 or t.n_mels >= 1 << 16 or t.frame_rate_hz >= 1 << 16:
        raise ValueError("grid dimensions exceed the header field widths")
    header = HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION, t.bits, t.n_mels, t.frame_rate_hz, t.n_frames)
    return header + pack_bins(t.bins, t.bits)


def decode_tokens(data: bytes) -> TokenGrid:
    if len(data) < HEADER_SIZE:
        raise TruncationError(f"token file shorter than its {HEADER_SIZE}-byte header")
    magic, version, bits, n_mels, frame_rate, n_frames = HEADER.unpack_from(data, 0)
    if magic != TOKEN_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != TOKEN_VERSION:
        raise FormatError(f"unsupported token file version {version}")
    if not 1 <= bits <= MAX_BITS or n_mels < 1:
        raise FormatError(f"invalid header: bits={bits}, n_mels={n_mels}")
    expected = payload_size(n_frames, n_mels, bits)
    payload = data[HEADER_SIZE:]
    if len(payload) != expected:
        raise TruncationError(f"payload is {len(payload)} bytes, header implies {expected}")
    bins = unpack_bins(payload, n_frames * n_mels, bits).reshape(n_frames, n_mels)
    return TokenGrid(bins, bits, n_mels, frame_rate)


def save_tokens(t: TokenGrid, path) -> None:
    Path(path).write_bytes(encode_tokens(t))


def load_tokens(path) -> TokenGrid:
    return decode_tokens(Path(path).read_bytes())


# -- codebook sidecar -------------------------------------------------------

_FLOAT_KEYS = ("min_val", "max_val", "fmin_hz", "fmax_hz", "log_floor")
_INT_KEYS = ("bits", "n_mels", "frame_rate_hz", "sample_rate_hz", "win_length", "fft_size")
REQUIRED_KEYS = _FLOAT_KEYS + _INT_KEYS + ("mel_formula", "format_version")


def codebook_to_dict(cb: Codebook) -> dict:
    fe = cb.frontend
    return {
        "format_version": CODEBOOK_VERSION,
        "min_val": cb.min_val,
        "max_val": cb.max_val,
        "bits": cb.bits,
        "n_mels": cb.n_mels,
        "frame_rate_hz": fe.frame_rate_hz,
        "sample_rate_hz": fe.sample_rate_hz,
        "win_length": fe.win_length_samples,
        "fft_size": fe.fft_size,
        "fmin_hz": fe.fmin_hz,
        "fmax_hz": fe.fmax_hz,
        "log_floor": fe.log_floor,
        "mel_formula": MEL_FORMULA,
    }


def codebook_from_dict(d: dict) -> Codebook:
    missing = [k for k in REQUIRED_KEYS if k not in d]
    if missing:
        raise SchemaError(f"codebook missing fields: {', '.join(missing)}")
    try:
        version = int(d["format_version"])
    except (TypeError, ValueError) as e:
        raise SchemaError(f"bad format_version {d['format_version']!r}") from e
    if version != CODEBOOK_VERSION:
        raise VersionError(f"codebook format_version {version} (expected {CODEBOOK_VERSION})")
    if d["mel_formula"] != MEL_FORMULA:
        raise SchemaError(f"unknown mel_formula {d['mel_formula']!r}")
    try:
        f = {k: float(d[k]) for k in _FLOAT_KEYS}
        i = {k: int(d[k]) for k in _INT_KEYS}
    except (TypeError, ValueError) as e:
        raise SchemaError(f"malformed codebook value: {e}") from e
    try:
        fe = FrontendConfig(
            sample_rate_hz=i["sample_rate_hz"],
            n_mels=i["n_mels"],
            frame_rate_hz=i["frame_rate_hz"],
            win_length_samples=i["win_length"],
            fft_size=i["fft_size"],
            fmin_hz=f["fmin_hz"],
            fmax_hz=f["fmax_hz"],
            log_floor=f["log_floor"],
        )
        return Codebook(f["min_val"], f["max_val"], i["bits"], i["n_mels"], fe)
    except ValueError as e:
        raise SchemaError(str(e)) from e


def dumps_codebook(cb: Codebook) -> str:
    # repr() gives the shortest decimal that round-trips the double
    lines = [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in codebook_to_dict(cb).items()]
    return "\n".join(lines) + "\n"


def parse_key_values(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SchemaError(f"line {n}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def loads_codebook(text: str) -> Codebook:
    return codebook_from_dict(parse_key_values(text))


def save_codebook(cb: Codebook, path) -> None:
    Path(path).write_text(dumps_codebook(cb))


def load_codebook(path) -> Codebook:
    return loads_codebook(Path(path).read_text())
