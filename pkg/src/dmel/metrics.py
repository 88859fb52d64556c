"""WER/CER and spectrogram fidelity metrics."""

from __future__ import annotations

import json
import math
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from .frontend import MelSpectrogram

_STRIP = re.compile(r"[^A-Z' ]+")


def normalize_text(s: str) -> str:
    """Uppercase, drop everything but letters, apostrophes and spaces, squeeze spaces."""
    return " ".join(_STRIP.sub(" ", s.upper()).split())


def levenshtein(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def edit_distance_rate(ref: Sequence, hyp: Sequence) -> float:
    return levenshtein(ref, hyp) / max(1, len(ref))


def wer(ref: str, hyp: str) -> float:
    return edit_distance_rate(normalize_text(ref).split(), normalize_text(hyp).split())


def cer(ref: str, hyp: str) -> float:
    return edit_distance_rate(list(normalize_text(ref)), list(normalize_text(hyp)))


def corpus_error_rates(refs: Sequence[str], hyps: Sequence[str]) -> dict[str, float]:
    """Corpus-level WER/CER: total edits over total reference length."""
    w_err = w_len = c_err = c_len = 0
    for r, h in zip(refs, hyps, strict=True):
        rn, hn = normalize_text(r), normalize_text(h)
        w_err += levenshtein(rn.split(), hn.split())
        w_len += len(rn.split())
        c_err += levenshtein(list(rn), list(hn))
        c_len += len(rn)
    return {"wer": w_err / max(1, w_len), "cer": c_err / max(1, c_len)}


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, MelSpectrogram) else np.asarray(m, dtype=np.float64)


def quantization_snr_db(orig, recon) -> float:
    a, b = _values(orig), _values(recon)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    noise = float(np.sum((a - b) ** 2))
    if noise == 0.0:
        return math.inf
    signal = float(np.sum((a - a.mean()) ** 2))
    if signal == 0.0:
        return -math.inf
    return 10.0 * math.log10(signal / noise)


def log_spectral_distance(orig, recon) -> float:
    """Mean over frames of the RMS log-energy difference across channels."""
    a, b = _values(orig), _values(recon)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        return 0.0
    return float(np.mean(np.sqrt(np.mean((a - b) ** 2, axis=1))))


def format_metrics(metrics: dict) -> str:
    return "\n".join(f"{k}={v}" for k, v in metrics.items())


def write_summary(metrics: dict, path) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
