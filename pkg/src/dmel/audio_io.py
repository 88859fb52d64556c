"""Mono PCM WAV reading/writing and corpus enumeration."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError, UnsupportedCodecError

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass
class Waveform:
    """Mono float64 samples in [-1, 1] plus their sample rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        self.sample_rate_hz = int(self.sample_rate_hz)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


def _iter_chunks(data: bytes, offset: int) -> Iterator[tuple[bytes, int, int]]:
    while offset + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, offset)
        body = offset + 8
        yield cid, body, size
        # chunks are word aligned
        offset = body + size + (size & 1)


def parse_wav(data: bytes) -> Waveform:
    if len(data) < 12:
        raise FormatError("file too short for a RIFF header")
    riff, _, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise FormatError("not a RIFF/WAVE file")

    fmt = None
    pcm = None
    for cid, body, size in _iter_chunks(data, 12):
        if cid == b"fmt ":
            if size < 16 or body + 16 > len(data):
                raise FormatError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", data, body)
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE:
                if size < 40 or body + 40 > len(data):
                    raise FormatError("extensible fmt chunk too short")
                # first two bytes of the subformat GUID carry the real tag
                sub = struct.unpack_from("<H", data, body + 24)[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            if fmt is None:
                raise FormatError("data chunk precedes fmt chunk")
            # tolerate writers that leave the size at 0xFFFFFFFF while streaming
            end = min(body + size, len(data))
            pcm = data[body:end]
            break
    if fmt is None:
        raise FormatError("missing fmt chunk")
    if pcm is None:
        raise FormatError("missing data chunk")

    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1:
        raise FormatError("channel count must be at least 1")
    if rate <= 0:
        raise FormatError("sample rate must be positive")
    if tag == WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedCodecError(f"unsupported encoding: format tag {tag:#06x}, {bits} bits")
    if block_align != channels * dtype.itemsize:
        raise FormatError(f"block align {block_align} inconsistent with {channels}x{bits}-bit")

    n = len(pcm) // block_align
    frames = np.frombuffer(pcm[: n * block_align], dtype=dtype).astype(np.float64)
    frames = frames.reshape(n, channels) * scale
    samples = frames.mean(axis=1) if channels > 1 else frames[:, 0]
    if not np.all(np.isfinite(samples)):
        raise FormatError("non-finite float samples")
    return Waveform(np.clip(samples, -1.0, 1.0), rate)


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM or 32-bit float WAV, averaging channels to mono."""
    return parse_wav(Path(path).read_bytes())


def encode_wav(w: Waveform) -> bytes:
    q = np.round(np.clip(w.samples, -1.0, 1.0) * 32768.0)
    q = np.clip(q, -32768, 32767).astype("<i2")
    payload = q.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, WAVE_FORMAT_PCM, 1, w.sample_rate_hz, 2 * w.sample_rate_hz, 2, 16,
        b"data", len(payload),
    )
    return header + payload


def write_wav(w: Waveform, path) -> None:
    """Write ``w`` as 16-bit mono PCM. Samples outside [-1, 1] are clipped."""
    Path(path).write_bytes(encode_wav(w))


def iter_wavs(root) -> Iterator[Path]:
    """Yield every ``.wav`` file under ``root`` in sorted order."""
    root = Path(root)
    if root.is_file():
        yield root
        return
    yield from sorted(p for p in root.rglob("*") if p.suffix.lower() == ".wav" and p.is_file())
