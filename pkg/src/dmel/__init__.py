"""dMel: discretized log-mel speech tokens and a decoder-only speech-text model."""

from .audio_io import Waveform, read_wav, write_wav
from .codec import Codebook, TokenGrid, detokenize, fit_codebook, tokenize
from .frontend import FrontendConfig, MelSpectrogram, approx_invert, melspec
from .store import load_codebook, load_tokens, save_codebook, save_tokens

__all__ = [
    "Codebook",
    "FrontendConfig",
    "MelSpectrogram",
    "TokenGrid",
    "Waveform",
    "approx_invert",
    "detokenize",
    "fit_codebook",
    "load_codebook",
    "load_tokens",
    "melspec",
    "read_wav",
    "save_codebook",
    "save_tokens",
    "tokenize",
    "write_wav",
]
__version__ = "0.1.0"
