"""Log mel-filterbank front end and a coarse Griffin-Lim inverse.

Framing is "valid" only (no centre padding): frame ``t`` covers samples
``[t*hop, t*hop + win)``. All geometry lives in :class:`FrontendConfig`
and is written into the codebook file so tokens stay reproducible.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass

import numpy as np

from .audio_io import Waveform
from .errors import ConfigurationError

MEL_FORMULA = "htk"


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate_hz: int = 16000
    n_mels: int = 80
    frame_rate_hz: int = 40
    win_length_samples: int = 1024
    fft_size: int = 1024
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.sample_rate_hz != 16000:
            raise ConfigurationError(f"only 16 kHz audio is supported, got {self.sample_rate_hz}")
        if self.frame_rate_hz <= 0 or self.sample_rate_hz % self.frame_rate_hz:
            raise ConfigurationError(
                f"frame rate {self.frame_rate_hz} Hz does not divide {self.sample_rate_hz} Hz"
            )
        if self.n_mels < 1:
            raise ConfigurationError("n_mels must be positive")
        if not _is_pow2(self.fft_size) or self.fft_size < self.win_length_samples:
            raise ConfigurationError("fft_size must be a power of two >= win_length_samples")
        if self.win_length_samples < 1:
            raise ConfigurationError("win_length_samples must be positive")
        if not 0.0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2:
            raise ConfigurationError("need 0 <= fmin < fmax <= sample_rate/2")
        if not self.log_floor > 0.0:
            raise ConfigurationError("log_floor must be positive")

    @property
    def hop_samples(self) -> int:
        return self.sample_rate_hz // self.frame_rate_hz

    @property
    def n_freqs(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def log_min(self) -> float:
        return math.log(self.log_floor)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length_samples:
            return 0
        return (n_samples - self.win_length_samples) // self.hop_samples + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MelSpectrogram:
    """``values`` is T x N natural-log filterbank power."""

    values: np.ndarray
    frame_rate_hz: int
    n_mels: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != self.n_mels:
            raise ValueError(f"expected (T, {self.n_mels}) values, got {self.values.shape}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def _is_pow2(n: int) -> bool:
    return isinstance(n, (int, np.integer)) and n > 0 and (n & (n - 1)) == 0


@functools.lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.flags.writeable = False
    return rev


def fft_frames(x: np.ndarray) -> np.ndarray:
    """Radix-2 DIT FFT along the last axis (length must be a power of two)."""
    x = np.asarray(x)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"FFT size must be a power of two, got {n}")
    lead = x.shape[:-1]
    a = x[..., _bit_reverse(n)].astype(np.complex128)
    m = 1
    while m < n:
        tw = np.exp(-2j * np.pi * np.arange(m) / (2 * m))
        a = a.reshape(lead + (n // (2 * m), 2, m))
        even = a[..., 0, :]
        odd = a[..., 1, :] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        m *= 2
    return a


def ifft_frames(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    return np.conj(fft_frames(np.conj(X))) / X.shape[-1]


def fft(signal, size: int) -> np.ndarray:
    """``size``-point DFT of ``signal`` (zero-padded)."""
    if not _is_pow2(size):
        raise ValueError(f"FFT size must be a power of two, got {size}")
    signal = np.asarray(signal)
    if signal.ndim != 1 or signal.shape[0] > size:
        raise ValueError("signal must be 1-D and no longer than size")
    buf = np.zeros(size, dtype=np.complex128)
    buf[: signal.shape[0]] = signal
    return fft_frames(buf)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def filter_edges_hz(cfg: FrontendConfig) -> np.ndarray:
    """N + 2 corner frequencies; filter i spans edges[i]..edges[i+2], peak edges[i+1]."""
    mels = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    return mel_to_hz(mels)


@functools.lru_cache(maxsize=32)
def _filterbank(cfg: FrontendConfig) -> np.ndarray:
    edges = filter_edges_hz(cfg)
    freqs = np.arange(cfg.n_freqs) * cfg.sample_rate_hz / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    peaks = fb.max(axis=1)
    empty = np.flatnonzero(peaks <= 0.0)
    if empty.size:
        raise ConfigurationError(
            f"{cfg.n_mels} mel filters too many for fft_size {cfg.fft_size}: "
            f"filters {empty.tolist()[:5]} have no support"
        )
    # peak-normalise each row so the sampled triangle tops out at exactly 1
    fb = fb / peaks[:, None]
    fb.flags.writeable = False
    return fb


def mel_filterbank_matrix(cfg: FrontendConfig) -> np.ndarray:
    """N x (fft_size/2 + 1) triangular filterbank on the HTK mel scale.

    Returned array is shared and read-only.
    """
    return _filterbank(cfg)


def hann_window(n: int) -> np.ndarray:
    # periodic Hann, so overlap-add at hop = n/2 sums to a constant
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(x: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    t = cfg.n_frames(x.shape[0])
    win = cfg.win_length_samples
    if t == 0:
        return np.zeros((0, win))
    idx = np.arange(win)[None, :] + cfg.hop_samples * np.arange(t)[:, None]
    return x[idx]


def stft(x: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Complex one-sided STFT, shape (T, fft_size/2 + 1)."""
    frames = frame_signal(x, cfg) * hann_window(cfg.win_length_samples)
    buf = np.zeros((frames.shape[0], cfg.fft_size))
    buf[:, : cfg.win_length_samples] = frames
    return fft_frames(buf)[:, : cfg.n_freqs]


def power_to_logmel(power: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    energies = power @ mel_filterbank_matrix(cfg).T
    return np.log(np.maximum(energies, cfg.log_floor))


def melspec(w: Waveform, cfg: FrontendConfig | None = None) -> MelSpectrogram:
    """Log mel-filterbank energies of ``w``; T = floor((len - win)/hop) + 1."""
    cfg = cfg or FrontendConfig()
    if w.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(
            f"waveform is {w.sample_rate_hz} Hz but the front end expects {cfg.sample_rate_hz} Hz"
        )
    spec = stft(w.samples, cfg)
    power = spec.real**2 + spec.imag**2
    return MelSpectrogram(power_to_logmel(power, cfg), cfg.frame_rate_hz, cfg.n_mels)


def istft(spec: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Least-squares overlap-add inverse of :func:`stft`."""
    t = spec.shape[0]
    win, hop = cfg.win_length_samples, cfg.hop_samples
    if t == 0:
        return np.zeros(0)
    full = np.zeros((t, cfg.fft_size), dtype=np.complex128)
    full[:, : cfg.n_freqs] = spec
    # rebuild the conjugate-symmetric upper half
    full[:, cfg.n_freqs :] = np.conj(spec[:, 1 : cfg.fft_size - cfg.n_freqs + 1][:, ::-1])
    frames = ifft_frames(full).real[:, :win]
    window = hann_window(win)
    length = (t - 1) * hop + win
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(t):
        out[i * hop : i * hop + win] += frames[i] * window
        norm[i * hop : i * hop + win] += window**2
    # floor the window sum so the sparsely covered ends are not blown up
    return out / np.maximum(norm, 0.1 * norm.max())


def approx_invert(
    m: MelSpectrogram,
    cfg: FrontendConfig | None = None,
    iters: int = 64,
    seed: int = 0,
    nnls_iters: int = 200,
    momentum: float = 0.99,
) -> Waveform:
    """Rough waveform from a log-mel spectrogram via filterbank pseudo-inverse + Griffin-Lim.

    For audibility checks only; not a vocoder.
    """
    cfg = cfg or FrontendConfig()
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if m.n_mels != cfg.n_mels:
        raise ValueError(f"spectrogram has {m.n_mels} channels, config expects {cfg.n_mels}")
    if m.n_frames == 0:
        return Waveform(np.zeros(0), cfg.sample_rate_hz)

    fb = mel_filterbank_matrix(cfg)
    energies = np.exp(m.values)
    power = np.maximum(energies @ np.linalg.pinv(fb).T, 0.0)
    # clamping breaks fb @ power == energies; multiplicative NNLS updates restore it
    target = energies @ fb
    for _ in range(nnls_iters):
        power *= target / np.maximum((power @ fb.T) @ fb, 1e-30)
    mag = np.sqrt(power)

    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    x = istft(mag * phase, cfg)
    prev = np.zeros_like(phase)
    for _ in range(iters - 1):
        # fast Griffin-Lim: extrapolate the projection with momentum
        est = stft(x, cfg)
        acc = est + momentum * (est - prev)
        prev = est
        x = istft(mag * acc / np.maximum(np.abs(acc), 1e-12), cfg)
    return Waveform(np.clip(x, -1.0, 1.0), cfg.sample_rate_hz)
