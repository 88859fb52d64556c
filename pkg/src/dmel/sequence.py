"""Character vocabulary, ASR/TTS sequence layout, span masking and SpecAugment."""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .codec import TokenGrid
from .errors import FormatError
from .frontend import MelSpectrogram

SPECIALS = ("<bos>", "<eos>", "<pad>", "<unk>")
BOS, EOS, PAD, UNK = range(4)
SPEAKER_DIM = 512


class Modality(enum.IntEnum):
    PAD = 0
    SPEAKER = 1
    TEXT = 2
    SPEECH = 3
    BOS_TEXT = 4
    EOS_TEXT = 5
    BOS_SPEECH = 6
    EOS_SPEECH = 7


TEXT_LIKE = (Modality.TEXT, Modality.BOS_TEXT, Modality.EOS_TEXT)
SPEECH_LIKE = (Modality.SPEECH, Modality.BOS_SPEECH, Modality.EOS_SPEECH)


class TextVocab:
    """Character vocabulary; ids 0-3 are the specials, characters follow."""

    def __init__(self, chars: Sequence[str]):
        chars = list(chars)
        for c in chars:
            if len(c) != 1 or c == "\n":
                raise ValueError(f"vocabulary entries must be single non-newline characters: {c!r}")
        if len(set(chars)) != len(chars):
            raise ValueError("duplicate characters in vocabulary")
        self.chars = chars
        self._ids = {c: i + len(SPECIALS) for i, c in enumerate(chars)}

    @classmethod
    def from_texts(cls, texts) -> "TextVocab":
        return cls(sorted(set("".join(texts))))

    def __len__(self) -> int:
        return len(SPECIALS) + len(self.chars)

    def __eq__(self, other):
        return isinstance(other, TextVocab) and self.chars == other.chars

    def id_of(self, c: str) -> int:
        return self._ids.get(c, UNK)

    def token(self, i: int) -> str:
        if i < len(SPECIALS):
            return SPECIALS[i]
        return self.chars[i - len(SPECIALS)]

    def encode(self, s: str) -> list[int]:
        return [self._ids.get(c, UNK) for c in s]

    def decode(self, ids) -> str:
        n = len(SPECIALS)
        return "".join(self.chars[i - n] for i in ids if n <= i < len(self))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(list(SPECIALS) + self.chars) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TextVocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[: len(SPECIALS)]) != SPECIALS:
            raise FormatError(f"vocabulary must start with {', '.join(SPECIALS)}")
        return cls(lines[len(SPECIALS) :])


def encode_text(s: str, vocab: TextVocab) -> list[int]:
    return vocab.encode(s)


def decode_text(ids, vocab: TextVocab) -> str:
    return vocab.decode(ids)


@dataclass
class SequenceBatch:
    """One example laid out position by position.

    ``text`` holds vocab ids at text-like positions, ``speech`` holds the
    frame bins at speech positions; both are zero elsewhere. ``loss_weight``
    marks the positions whose content is a training target.
    """

    modality: np.ndarray
    text: np.ndarray
    speech: np.ndarray
    loss_weight: np.ndarray
    masked: np.ndarray
    speaker: np.ndarray | None = None
    task: str = ""

    def __len__(self) -> int:
        return self.modality.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return np.arange(len(self))

    @property
    def n_mels(self) -> int:
        return self.speech.shape[1]

    def with_mask(self, masked: np.ndarray) -> "SequenceBatch":
        return replace(self, masked=np.asarray(masked, dtype=bool))


def _assemble(parts, n_mels: int, speaker, task: str, supervised) -> SequenceBatch:
    modality, text, speech = [], [], []
    for kind, payload in parts:
        if kind == Modality.SPEECH:
            for row in payload:
                modality.append(kind)
                text.append(0)
                speech.append(row)
        else:
            modality.append(kind)
            text.append(payload if kind in TEXT_LIKE else 0)
            speech.append(np.zeros(n_mels, dtype=np.int64))
    modality = np.array(modality, dtype=np.int64)
    weight = np.isin(modality, supervised).astype(np.float64)
    return SequenceBatch(
        modality=modality,
        text=np.array(text, dtype=np.int64),
        speech=np.array(speech, dtype=np.int64).reshape(len(modality), n_mels),
        loss_weight=weight,
        masked=np.zeros(len(modality), dtype=bool),
        speaker=None if speaker is None else np.asarray(speaker, dtype=np.float64),
        task=task,
    )


def build_asr(t: TokenGrid, text_ids) -> SequenceBatch:
    """[<bos_speech>, frames, <eos_speech>, <bos_text>, text, <eos_text>]; loss on text and <eos_text>."""
    if t.n_frames == 0:
        raise ValueError("ASR example needs at least one speech frame")
    parts = [(Modality.BOS_SPEECH, None), (Modality.SPEECH, t.bins), (Modality.EOS_SPEECH, None),
             (Modality.BOS_TEXT, BOS)]
    parts += [(Modality.TEXT, int(i)) for i in text_ids]
    parts.append((Modality.EOS_TEXT, EOS))
    return _assemble(parts, t.n_mels, None, "asr", (Modality.TEXT, Modality.EOS_TEXT))


def build_tts(spk, text_ids, t: TokenGrid) -> SequenceBatch:
    """[speaker, <bos_text>, text, <eos_text>, <bos_speech>, frames, <eos_speech>]; loss on frames and <eos_speech>."""
    text_ids = list(text_ids)
    if not text_ids:
        raise ValueError("TTS example needs non-empty text")
    spk = np.asarray(spk, dtype=np.float64)
    if spk.shape != (SPEAKER_DIM,) or not np.all(np.isfinite(spk)):
        raise ValueError(f"speaker vector must be {SPEAKER_DIM} finite floats")
    parts = [(Modality.SPEAKER, None), (Modality.BOS_TEXT, BOS)]
    parts += [(Modality.TEXT, int(i)) for i in text_ids]
    parts += [(Modality.EOS_TEXT, EOS), (Modality.BOS_SPEECH, None), (Modality.SPEECH, t.bins),
              (Modality.EOS_SPEECH, None)]
    return _assemble(parts, t.n_mels, spk, "tts", (Modality.SPEECH, Modality.EOS_SPEECH))


# -- span masking -----------------------------------------------------------

MAX_PLACEMENT_FAILURES = 100


@dataclass(frozen=True)
class SpanMaskConfig:
    p_apply: float = 0.8
    mean_span: int = 3
    ratio: float = 0.5
    mask_text: bool = False


def plan_span_mask(n: int, p_apply: float, mean_span: int, ratio: float, rng) -> np.ndarray:
    """Boolean mask of non-overlapping geometric-length spans covering >= ``ratio`` of ``n``.

    The whole mask is skipped with probability ``1 - p_apply``. Placement
    stops early after 100 consecutive rejected spans.
    """
    if not (0.0 <= p_apply <= 1.0 and 0.0 <= ratio <= 1.0) or mean_span < 1:
        raise ValueError("need 0 <= p_apply, ratio <= 1 and mean_span >= 1")
    mask = np.zeros(n, dtype=bool)
    if n == 0 or ratio == 0.0 or rng.random() >= p_apply:
        return mask
    target = ratio * n
    count = 0
    failures = 0
    while count < target and failures < MAX_PLACEMENT_FAILURES:
        length = int(rng.geometric(1.0 / mean_span))
        if length > n:
            failures += 1
            continue
        start = int(rng.integers(0, n - length + 1))
        if mask[start : start + length].any():
            failures += 1
            continue
        mask[start : start + length] = True
        count += length
        failures = 0
    return mask


def apply_span_mask(batch: SequenceBatch, cfg: SpanMaskConfig, rng) -> SequenceBatch:
    """Mark speech frames (and optionally text) of ``batch`` as masked inputs."""
    masked = batch.masked.copy()
    kinds = [Modality.SPEECH] + ([Modality.TEXT] if cfg.mask_text else [])
    for kind in kinds:
        idx = np.flatnonzero(batch.modality == kind)
        plan = plan_span_mask(len(idx), cfg.p_apply, cfg.mean_span, cfg.ratio, rng)
        masked[idx[plan]] = True
    return batch.with_mask(masked)


# -- SpecAugment --------------------------------------------------------------


@dataclass(frozen=True)
class SpecAugmentConfig:
    n_freq_masks: int = 2
    max_freq_width: int = 30
    n_time_masks: int = 10
    max_time_width: int = 50
    max_time_ratio: float = 0.1


def spec_augment(x, rng, fill, cfg: SpecAugmentConfig = SpecAugmentConfig()):
    """Copy of ``x`` with frequency and time bands replaced by ``fill``.

    ``x`` may be a T x N array, a :class:`TokenGrid` or a
    :class:`MelSpectrogram`; the result has the same type. ``fill`` should be
    the corpus mean (bin or log-mel value).
    """
    if isinstance(x, TokenGrid):
        return replace(x, bins=spec_augment(x.bins, rng, int(round(fill)), cfg))
    if isinstance(x, MelSpectrogram):
        return replace(x, values=spec_augment(x.values, rng, float(fill), cfg))
    out = np.array(x, copy=True)
    t, n = out.shape
    for _ in range(cfg.n_freq_masks):
        w = int(rng.integers(0, min(cfg.max_freq_width, n) + 1))
        f0 = int(rng.integers(0, n - w + 1))
        out[:, f0 : f0 + w] = fill
    t_max = min(cfg.max_time_width, int(cfg.max_time_ratio * t))
    for _ in range(cfg.n_time_masks):
        w = int(rng.integers(0, t_max + 1))
        s0 = int(rng.integers(0, t - w + 1))
        out[s0 : s0 + w, :] = fill
    return out


# -- manifests and speakers ---------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    audio_path: Path
    transcript: str
    speaker_id: str


def read_manifest(path) -> list[ManifestEntry]:
    """Tab-separated ``audio_path<TAB>transcript<TAB>speaker_id``; relative paths resolve against the manifest."""
    path = Path(path)
    entries = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise FormatError(f"{path}:{n}: expected 3 tab-separated columns, got {len(cols)}")
        audio = Path(cols[0])
        if not audio.is_absolute():
            audio = path.parent / audio
        entries.append(ManifestEntry(audio, cols[1], cols[2]))
    return entries


def write_manifest(entries, path) -> None:
    path = Path(path)
    lines = []
    for e in entries:
        audio = Path(e.audio_path)
        try:
            audio = audio.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(f"{audio}\t{e.transcript}\t{e.speaker_id}")
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def synthetic_speaker_vector(speaker_id: str, seed: int = 0) -> np.ndarray:
    """Deterministic stand-in for an external d-vector."""
    rng = np.random.default_rng([seed, zlib.crc32(speaker_id.encode("utf-8"))])
    return rng.standard_normal(SPEAKER_DIM)


def example_rng(seed: int, step: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, step, example) so batches ignore worker layout."""
    return np.random.default_rng([seed, step, index])
