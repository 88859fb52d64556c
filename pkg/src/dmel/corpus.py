"""Synthetic desk-scale corpus and manifest -> training example preparation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import Waveform, read_wav, write_wav
from .codec import Codebook, TokenGrid, fit_codebook, tokenize
from .frontend import FrontendConfig, hz_to_mel, mel_to_hz, melspec
from .sequence import (
    ManifestEntry,
    TextVocab,
    read_manifest,
    synthetic_speaker_vector,
    write_manifest,
)

SAMPLE_RATE = 16000
CHAR_SECONDS = 0.1
LOWEST_HZ = 200.0
HIGHEST_HZ = 3800.0
UPPER_PARTIAL = 1.5
FADE_SECONDS = 0.005
DEFAULT_CHARS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ '"


@dataclass
class Utterance:
    waveform: Waveform
    transcript: str
    speaker_id: str


def char_fundamentals(vocab: TextVocab) -> dict[str, float]:
    """Each vocabulary character's chord root, evenly spaced in mel between 200 and 3800 Hz."""
    n = len(vocab.chars)
    mels = np.linspace(hz_to_mel(LOWEST_HZ), hz_to_mel(HIGHEST_HZ), max(n, 2))[:n]
    return dict(zip(vocab.chars, mel_to_hz(mels).tolist()))


def speaker_tilt(speaker_index: int, n_speakers: int) -> float:
    """Relative amplitude of the upper partial; fixed per speaker."""
    if n_speakers == 1:
        return 0.3
    return 0.15 + 0.3 * speaker_index / (n_speakers - 1)


def render_chord(f0: float, tilt: float, seconds: float = CHAR_SECONDS) -> np.ndarray:
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    x = 0.5 * (np.sin(2 * np.pi * f0 * t) + tilt * np.sin(2 * np.pi * UPPER_PARTIAL * f0 * t))
    k = int(FADE_SECONDS * SAMPLE_RATE)
    if k and n > 2 * k:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
        x[:k] *= ramp
        x[-k:] *= ramp[::-1]
    return x


def render_transcript(text: str, vocab: TextVocab, tilt: float) -> Waveform:
    roots = char_fundamentals(vocab)
    parts = [render_chord(roots[c], tilt) for c in text]
    samples = np.concatenate(parts) if parts else np.zeros(0)
    return Waveform(samples, SAMPLE_RATE)


def make_synthetic_corpus(
    n_utts: int, vocab: TextVocab, rng: np.random.Generator, n_speakers: int = 4
) -> list[Utterance]:
    """Random 3-12 character transcripts rendered as 100 ms two-tone chords per character."""
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    if not vocab.chars:
        raise ValueError("vocabulary has no characters")
    out = []
    for _ in range(n_utts):
        length = int(rng.integers(3, 13))
        text = "".join(vocab.chars[i] for i in rng.integers(0, len(vocab.chars), length))
        spk = int(rng.integers(0, n_speakers))
        wave = render_transcript(text, vocab, speaker_tilt(spk, n_speakers))
        out.append(Utterance(wave, text, f"spk{spk}"))
    return out


def write_corpus(utts: list[Utterance], vocab: TextVocab, out_dir, speaker_seed: int = 0) -> Path:
    """Write WAVs, ``manifest.tsv``, ``vocab.txt`` and ``speakers.npz``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, u in enumerate(utts):
        path = out_dir / "wav" / f"utt{i:05d}.wav"
        write_wav(u.waveform, path)
        entries.append(ManifestEntry(path, u.transcript, u.speaker_id))
    manifest = out_dir / "manifest.tsv"
    write_manifest(entries, manifest)
    vocab.save(out_dir / "vocab.txt")
    ids = sorted({u.speaker_id for u in utts})
    np.savez(out_dir / "speakers.npz", **{s: synthetic_speaker_vector(s, speaker_seed) for s in ids})
    return manifest


# -- manifest -> examples ------------------------------------------------------


@dataclass
class Example:
    grid: TokenGrid
    text_ids: list[int]
    speaker: np.ndarray
    transcript: str
    speaker_id: str


class SpeakerTable:
    """Speaker vectors from ``speakers.npz`` beside a manifest, else synthetic ones."""

    def __init__(self, table: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.table = dict(table or {})
        self.seed = seed

    @classmethod
    def for_manifest(cls, manifest, seed: int = 0) -> "SpeakerTable":
        path = Path(manifest).parent / "speakers.npz"
        if path.exists():
            with np.load(path) as z:
                return cls({k: z[k].astype(np.float64) for k in z.files}, seed)
        return cls(None, seed)

    def __getitem__(self, speaker_id: str) -> np.ndarray:
        if speaker_id in self.table:
            return self.table[speaker_id]
        return synthetic_speaker_vector(speaker_id, self.seed)


def load_mels(entries, frontend: FrontendConfig):
    for e in entries:
        yield melspec(read_wav(e.audio_path), frontend)


def fit_manifest_codebook(manifest, bits: int, frontend: FrontendConfig) -> Codebook:
    return fit_codebook(load_mels(read_manifest(manifest), frontend), bits, frontend)


def fit_utterance_codebook(utts: list[Utterance], bits: int, frontend: FrontendConfig) -> Codebook:
    return fit_codebook((melspec(u.waveform, frontend) for u in utts), bits, frontend)


def make_examples(utts, codebook: Codebook, vocab: TextVocab, speakers: SpeakerTable) -> list[Example]:
    """Tokenize in-memory utterances (waveform, transcript, speaker id)."""
    out = []
    for u in utts:
        grid = tokenize(melspec(u.waveform, codebook.frontend), codebook)
        out.append(Example(grid, vocab.encode(u.transcript), speakers[u.speaker_id], u.transcript, u.speaker_id))
    return out


def load_utterances(manifest) -> list[Utterance]:
    return [Utterance(read_wav(e.audio_path), e.transcript, e.speaker_id) for e in read_manifest(manifest)]
