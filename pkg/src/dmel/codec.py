"""Linear scalar codebook over log-mel values and the tokenize/detokenize maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import CorruptionError, DegenerateCorpusError, EmptyCorpusError
from .frontend import FrontendConfig, MelSpectrogram

MAX_BITS = 16


@dataclass(frozen=True)
class Codebook:
    """2**bits evenly spaced codes starting at ``min_val`` with step ``delta``.

    Bins are 0-based: ``code(j) = min_val + j * delta``. The top code is one
    step below ``max_val``, so values in ``[max_val - delta, max_val]`` all
    land in the last bin.
    """

    min_val: float
    max_val: float
    bits: int
    n_mels: int
    frontend: FrontendConfig = field(default_factory=FrontendConfig)

    def __post_init__(self):
        if not 1 <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [1, {MAX_BITS}], got {self.bits}")
        if not (np.isfinite(self.min_val) and np.isfinite(self.max_val)):
            raise ValueError("codebook bounds must be finite")
        if not self.max_val > self.min_val:
            raise ValueError(f"max_val ({self.max_val}) must exceed min_val ({self.min_val})")
        if self.frontend.n_mels != self.n_mels:
            raise ValueError("codebook n_mels disagrees with its front-end config")
        if not self.delta > 0.0:
            raise ValueError("codebook step underflows to zero")

    @property
    def n_bins(self) -> int:
        return 1 << self.bits

    @property
    def delta(self) -> float:
        return (self.max_val - self.min_val) / self.n_bins

    def codes(self) -> np.ndarray:
        return self.min_val + np.arange(self.n_bins, dtype=np.float64) * self.delta

    def code(self, j: int) -> float:
        return float(self.codes()[j])


@dataclass
class TokenGrid:
    """T x N matrix of bin indices."""

    bins: np.ndarray
    bits: int
    n_mels: int
    frame_rate_hz: int

    def __post_init__(self):
        bins = np.asarray(self.bins)
        if bins.size == 0:
            bins = bins.reshape(0, self.n_mels)
        if bins.ndim != 2 or bins.shape[1] != self.n_mels:
            raise ValueError(f"expected (T, {self.n_mels}) bins, got {bins.shape}")
        if not np.issubdtype(bins.dtype, np.integer):
            raise ValueError("bins must be integers")
        self.bins = bins.astype(np.int64, copy=False)
        if not 1 <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [1, {MAX_BITS}]")

    @property
    def n_frames(self) -> int:
        return self.bins.shape[0]

    def check_range(self) -> None:
        if self.bins.size and (self.bins.min() < 0 or self.bins.max() >= 1 << self.bits):
            raise CorruptionError(f"bin index outside [0, {(1 << self.bits) - 1}]")

    def __eq__(self, other):
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return (
            self.bits == other.bits
            and self.n_mels == other.n_mels
            and self.frame_rate_hz == other.frame_rate_hz
            and np.array_equal(self.bins, other.bins)
        )


def fit_codebook(
    corpus: Iterable[MelSpectrogram], bits: int, frontend: FrontendConfig | None = None
) -> Codebook:
    """Global min/max over every frame and channel of ``corpus`` in one pass."""
    lo, hi = np.inf, -np.inf
    n_mels = frame_rate = None
    for m in corpus:
        if n_mels is None:
            n_mels, frame_rate = m.n_mels, m.frame_rate_hz
        elif (m.n_mels, m.frame_rate_hz) != (n_mels, frame_rate):
            raise ValueError("corpus mixes spectrogram geometries")
        if m.n_frames == 0:
            continue
        lo = min(lo, float(m.values.min()))
        hi = max(hi, float(m.values.max()))
    if not np.isfinite(lo):
        raise EmptyCorpusError("corpus has no non-empty spectrograms")
    if lo == hi:
        raise DegenerateCorpusError(f"every corpus value equals {lo}; no quantizer exists")
    if frontend is None:
        frontend = FrontendConfig(n_mels=n_mels, frame_rate_hz=frame_rate)
    elif (frontend.n_mels, frontend.frame_rate_hz) != (n_mels, frame_rate):
        raise ValueError("front-end config disagrees with the corpus geometry")
    return Codebook(lo, hi, bits, n_mels, frontend)


def quantize(values: np.ndarray, cb: Codebook) -> np.ndarray:
    """Index of the nearest code for each value; ties go to the lower index."""
    values = np.asarray(values, dtype=np.float64)
    codes = cb.codes()
    top = cb.n_bins - 1
    # the division can land one bin off near cell edges, so compare the
    # neighbourhood against the actual code values
    base = np.floor((values - cb.min_val) / cb.delta)
    base = np.clip(base, -1, top).astype(np.int64)
    cand = np.clip(base[..., None] + np.arange(-1, 3), 0, top)
    dist = np.abs(values[..., None] - codes[cand])
    pick = np.argmin(dist, axis=-1)
    return np.take_along_axis(cand, pick[..., None], axis=-1)[..., 0]


def tokenize(m: MelSpectrogram, cb: Codebook) -> TokenGrid:
    if m.n_mels != cb.n_mels:
        raise ValueError(f"spectrogram has {m.n_mels} channels, codebook has {cb.n_mels}")
    if not np.isfinite(m.values).all():
        raise ValueError("cannot tokenize non-finite values")
    return TokenGrid(quantize(m.values, cb), cb.bits, cb.n_mels, m.frame_rate_hz)


def detokenize(t: TokenGrid, cb: Codebook) -> MelSpectrogram:
    if t.bits != cb.bits or t.n_mels != cb.n_mels:
        raise ValueError("token grid and codebook disagree on bits or n_mels")
    t.check_range()
    return MelSpectrogram(cb.codes()[t.bins], t.frame_rate_hz, t.n_mels)
