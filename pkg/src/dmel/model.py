"""Decoder-only speech/text transformer over dMel frames and characters.

Speech frames enter through per-channel bin embeddings that are
concatenated and projected to the model width; every channel of the next
frame is predicted by its own head from the same hidden state. Channel 0's
head carries one extra class that means "end of speech".
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import TokenGrid
from .errors import CapacityError
from .sequence import (
    EOS,
    SPEAKER_DIM,
    Modality,
    SequenceBatch,
    build_asr,
    build_tts,
)


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_channel_embed: int = 4
    bits: int = 4
    n_mels: int = 80
    text_vocab: int = 32
    dropout_residual: float = 0.1
    dropout_attention: float = 0.1
    dropout_embedding: float = 0.1
    dropout_positional: float = 0.3
    max_positions: int = 4096
    rope_base: float = 10000.0
    mlp_ratio: int = 4
    shared_channel_embedding: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.head_dim % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if not 1 <= self.bits <= 16:
            raise ValueError("bits must be in [1, 16]")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_bins(self) -> int:
        return 1 << self.bits

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        """Named sizes: small / base / large (layers, heads, width)."""
        sizes = {"small": (18, 2, 512), "base": (36, 4, 768), "large": (48, 8, 1536)}
        try:
            n_layers, n_heads, d_model = sizes[name.lower()]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(sizes)}") from None
        return cls(**{"n_layers": n_layers, "n_heads": n_heads, "d_model": d_model, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Batch:
    """Right-padded tensors for a list of :class:`SequenceBatch` examples."""

    modality: torch.Tensor  # (B, S) long
    text: torch.Tensor  # (B, S) long
    speech: torch.Tensor  # (B, S, N) long
    speaker: torch.Tensor  # (B, SPEAKER_DIM)
    loss_weight: torch.Tensor  # (B, S)
    masked: torch.Tensor  # (B, S) bool

    @property
    def shape(self):
        return tuple(self.modality.shape)


def collate(examples: Sequence[SequenceBatch], dtype=torch.float32) -> Batch:
    b = len(examples)
    s = max(len(e) for e in examples)
    n = examples[0].n_mels
    modality = np.zeros((b, s), dtype=np.int64)
    text = np.zeros((b, s), dtype=np.int64)
    speech = np.zeros((b, s, n), dtype=np.int64)
    speaker = np.zeros((b, SPEAKER_DIM))
    weight = np.zeros((b, s))
    masked = np.zeros((b, s), dtype=bool)
    for i, e in enumerate(examples):
        k = len(e)
        modality[i, :k] = e.modality
        text[i, :k] = e.text
        speech[i, :k] = e.speech
        weight[i, :k] = e.loss_weight
        masked[i, :k] = e.masked
        if e.speaker is not None:
            speaker[i] = e.speaker
    return Batch(
        torch.from_numpy(modality),
        torch.from_numpy(text),
        torch.from_numpy(speech),
        torch.from_numpy(speaker).to(dtype),
        torch.from_numpy(weight).to(dtype),
        torch.from_numpy(masked),
    )


def rope_angles(positions: torch.Tensor, head_dim: int, base: float, dtype=torch.float64):
    inv = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    ang = positions.to(torch.float64)[:, None] * inv[None, :]
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved pairs (2i, 2i+1) of the last axis; cos/sin are (S, head_dim/2)."""
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x0 * cos - x1 * sin, x0 * sin + x1 * cos], dim=-1)
    return out.flatten(-2)


def rope_rotate(x, position: int, base: float = 10000.0):
    """Rotate a single head vector to ``position``."""
    x = torch.as_tensor(x)
    if x.shape[-1] % 2:
        raise ValueError("rotary embedding needs an even dimension")
    cos, sin = rope_angles(torch.tensor([position]), x.shape[-1], base, x.dtype)
    return apply_rope(x, cos[0], sin[0])


class KVCache:
    def __init__(self):
        self.k = None
        self.v = None

    def __len__(self) -> int:
        return 0 if self.k is None else self.k.shape[2]

    def append(self, k, v):
        self.k = k if self.k is None else torch.cat([self.k, k], dim=2)
        self.v = v if self.v is None else torch.cat([self.v, v], dim=2)
        return self.k, self.v


class SelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.q_norm = nn.LayerNorm(cfg.head_dim)
        self.k_norm = nn.LayerNorm(cfg.head_dim)
        self.drop = nn.Dropout(cfg.dropout_attention)

    def forward(self, x, cos, sin, q_pos, cache: KVCache | None = None):
        b, s, d = x.shape
        q, k, v = self.qkv(x).view(b, s, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q = apply_rope(self.q_norm(q), cos, sin)
        k = apply_rope(self.k_norm(k), cos, sin)
        if cache is not None:
            k, v = cache.append(k, v)
        k_pos = torch.arange(k.shape[2])
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        future = k_pos[None, :] > q_pos[:, None]
        scores = scores.masked_fill(future, float("-inf"))
        att = self.drop(torch.softmax(scores, dim=-1))
        y = (att @ v).transpose(1, 2).reshape(b, s, d)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.fc = nn.Linear(cfg.d_model, cfg.mlp_ratio * cfg.d_model)
        self.fc_out = nn.Linear(cfg.mlp_ratio * cfg.d_model, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout_residual)

    def forward(self, x, cos, sin, q_pos, cache=None):
        x = x + self.drop(self.attn(self.ln1(x), cos, sin, q_pos, cache))
        x = x + self.drop(self.fc_out(F.gelu(self.fc(self.ln2(x)))))
        return x


@dataclass
class ModelOutput:
    text_logits: torch.Tensor  # (B, S, L)
    speech_logits: torch.Tensor  # (B, S, N, 2**K)
    stop_logits: torch.Tensor  # (B, S), extra class of channel 0
    hidden: torch.Tensor  # (B, S, D), after the final LayerNorm

    def channel0_logits(self) -> torch.Tensor:
        return torch.cat([self.speech_logits[..., 0, :], self.stop_logits[..., None]], dim=-1)


class SpeechTextDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n_tables = 1 if cfg.shared_channel_embedding else cfg.n_mels
        self.channel_embed = nn.Embedding(n_tables * cfg.n_bins, cfg.d_channel_embed)
        self.speech_proj = nn.Linear(cfg.n_mels * cfg.d_channel_embed, cfg.d_model)
        self.text_embed = nn.Embedding(cfg.text_vocab, cfg.d_model)
        self.speaker_proj = nn.Linear(SPEAKER_DIM, cfg.d_model)
        # rows: <bos_speech>, <eos_speech>
        self.speech_marker = nn.Embedding(2, cfg.d_model)
        self.mask_embed = nn.Parameter(torch.zeros(cfg.d_model))
        self.drop_embed = nn.Dropout(cfg.dropout_embedding)
        self.drop_pos = nn.Dropout(cfg.dropout_positional)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.text_head = nn.Linear(cfg.d_model, cfg.text_vocab)
        self.speech_head = nn.Linear(cfg.d_model, cfg.n_mels * cfg.n_bins)
        self.stop_head = nn.Linear(cfg.d_model, 1)
        self.reset_parameters()

    def reset_parameters(self):
        std = 0.02
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.normal_(m.weight, 0.0, std)
                if getattr(m, "bias", None) is not None:
                    nn.init.zeros_(m.bias)
        for blk in self.blocks:
            for lin in (blk.attn.proj, blk.fc_out):
                nn.init.normal_(lin.weight, 0.0, std / math.sqrt(2 * self.cfg.n_layers))
        nn.init.normal_(self.mask_embed, 0.0, std)

    # -- embeddings ------------------------------------------------------

    def channel_embeddings(self, bins: torch.Tensor) -> torch.Tensor:
        """(..., N) bins -> (..., N*d) concatenated channel embeddings, channel 0 first."""
        cfg = self.cfg
        if bins.numel() and (bins.min() < 0 or bins.max() >= cfg.n_bins):
            raise ValueError(f"bin index outside [0, {cfg.n_bins - 1}]")
        idx = bins
        if not cfg.shared_channel_embedding:
            idx = bins + torch.arange(cfg.n_mels) * cfg.n_bins
        return self.channel_embed(idx).flatten(-2)

    def embed_speech_frame(self, bins) -> torch.Tensor:
        bins = torch.as_tensor(bins, dtype=torch.long)
        return self.speech_proj(self.drop_embed(self.channel_embeddings(bins)))

    def embed(self, batch: Batch) -> torch.Tensor:
        mod = batch.modality
        dtype = self.speech_proj.weight.dtype
        speech = self.speech_proj(self.drop_embed(self.channel_embeddings(batch.speech)))
        text = self.drop_embed(self.text_embed(batch.text))
        marker = self.speech_marker((mod == Modality.EOS_SPEECH).long())
        speaker = self.speaker_proj(batch.speaker.to(dtype))[:, None, :].expand_as(text)

        def sel(*kinds):
            m = torch.zeros_like(mod, dtype=torch.bool)
            for k in kinds:
                m |= mod == k
            return m[..., None]

        zero = torch.zeros((), dtype=dtype)
        h = torch.where(sel(Modality.SPEECH), speech, zero)
        h = torch.where(sel(Modality.TEXT, Modality.BOS_TEXT, Modality.EOS_TEXT), text, h)
        h = torch.where(sel(Modality.BOS_SPEECH, Modality.EOS_SPEECH), marker, h)
        h = torch.where(sel(Modality.SPEAKER), speaker, h)
        h = torch.where(batch.masked[..., None], self.mask_embed.expand_as(h), h)
        return self.drop_pos(h)

    # -- forward ---------------------------------------------------------

    def forward(self, batch: Batch, cache: list[KVCache] | None = None) -> ModelOutput:
        """Logits at position t predict the content of position t + 1.

        With ``cache``, ``batch`` holds only the new positions and keys/values
        of earlier positions are reused.
        """
        b, s = batch.shape
        offset = len(cache[0]) if cache else 0
        if offset + s > self.cfg.max_positions:
            raise CapacityError(f"sequence of {offset + s} positions exceeds {self.cfg.max_positions}")
        dtype = self.speech_proj.weight.dtype
        q_pos = torch.arange(offset, offset + s)
        cos, sin = rope_angles(q_pos, self.cfg.head_dim, self.cfg.rope_base, dtype)
        x = self.embed(batch)
        for i, blk in enumerate(self.blocks):
            x = blk(x, cos, sin, q_pos, None if cache is None else cache[i])
        h = self.ln_f(x)
        return ModelOutput(
            text_logits=self.text_head(h),
            speech_logits=self.speech_head(h).view(b, s, self.cfg.n_mels, self.cfg.n_bins),
            stop_logits=self.stop_head(h)[..., 0],
            hidden=h,
        )

    def new_cache(self) -> list[KVCache]:
        return [KVCache() for _ in self.blocks]


def _isin(mod: torch.Tensor, kinds) -> torch.Tensor:
    out = torch.zeros_like(mod, dtype=torch.bool)
    for k in kinds:
        out |= mod == k
    return out


def position_losses(out: ModelOutput, batch: Batch) -> torch.Tensor:
    """Cross-entropy for every target position 1..S-1 (B, S-1), unweighted.

    Speech frames average their N channel losses; <eos_speech> is scored by
    channel 0's stop class alone; speaker and padding targets score 0.
    """
    n_bins = out.speech_logits.shape[-1]
    n_mels = out.speech_logits.shape[-2]
    mod = batch.modality[:, 1:]
    b, t = mod.shape

    text_ce = F.cross_entropy(
        out.text_logits[:, :-1].reshape(b * t, -1), batch.text[:, 1:].reshape(-1), reduction="none"
    ).view(b, t)

    eos = mod == Modality.EOS_SPEECH
    target = batch.speech[:, 1:]
    target0 = torch.where(eos, torch.full_like(target[..., 0], n_bins), target[..., 0])
    ce0 = F.cross_entropy(
        out.channel0_logits()[:, :-1].reshape(b * t, -1), target0.reshape(-1), reduction="none"
    ).view(b, t)
    if n_mels > 1:
        rest = F.cross_entropy(
            out.speech_logits[:, :-1, 1:].reshape(-1, n_bins), target[..., 1:].reshape(-1), reduction="none"
        ).view(b, t, n_mels - 1).sum(-1)
    else:
        rest = torch.zeros_like(ce0)
    speech_ce = torch.where(eos, ce0, (ce0 + rest) / n_mels)

    zero = torch.zeros((), dtype=text_ce.dtype)
    per_pos = torch.where(_isin(mod, (Modality.TEXT, Modality.BOS_TEXT, Modality.EOS_TEXT)), text_ce, zero)
    per_pos = torch.where(_isin(mod, (Modality.SPEECH, Modality.EOS_SPEECH)), speech_ce, per_pos)
    return per_pos


def sequence_loss(out: ModelOutput, batch: Batch) -> torch.Tensor:
    """Mean cross-entropy over target positions with ``loss_weight`` = 1."""
    w = batch.loss_weight[:, 1:].to(out.text_logits.dtype)
    total = w.sum()
    if total <= 0:
        raise ValueError("batch has no supervised positions")
    return (position_losses(out, batch) * w).sum() / total


# -- decoding ---------------------------------------------------------------


def _single(example: SequenceBatch, dtype) -> Batch:
    return collate([example], dtype)


def _step_batch(kind: Modality, n_mels: int, speaker, dtype, text_id: int = 0, frame=None) -> Batch:
    speech = torch.zeros((1, 1, n_mels), dtype=torch.long)
    if frame is not None:
        speech[0, 0] = torch.as_tensor(frame, dtype=torch.long)
    return Batch(
        modality=torch.tensor([[int(kind)]]),
        text=torch.tensor([[text_id]]),
        speech=speech,
        speaker=speaker,
        loss_weight=torch.zeros((1, 1), dtype=dtype),
        masked=torch.zeros((1, 1), dtype=torch.bool),
    )


@torch.no_grad()
def decode_asr_greedy(model: SpeechTextDecoder, grid: TokenGrid, max_text_len: int) -> list[int]:
    """Argmax transcription of ``grid`` until <eos_text> or ``max_text_len`` ids."""
    model.eval()
    dtype = model.speech_proj.weight.dtype
    prompt = build_asr(grid, [])
    keep = len(prompt) - 1  # drop the trailing <eos_text>
    prompt = SequenceBatch(
        prompt.modality[:keep], prompt.text[:keep], prompt.speech[:keep],
        prompt.loss_weight[:keep], prompt.masked[:keep], None, "asr",
    )
    batch = _single(prompt, dtype)
    cache = model.new_cache()
    out = model(batch, cache)
    ids: list[int] = []
    while len(ids) < max_text_len:
        nxt = int(out.text_logits[0, -1].argmax())
        if nxt == EOS:
            break
        ids.append(nxt)
        if len(ids) == max_text_len:
            break
        out = model(_step_batch(Modality.TEXT, grid.n_mels, batch.speaker, dtype, text_id=nxt), cache)
    return ids


def _draw(logits: torch.Tensor, temperature: float, rng) -> np.ndarray:
    """One class per row of ``logits``; temperature 0 takes the argmax."""
    z = logits.detach().double().cpu().numpy()
    if temperature == 0:
        return z.argmax(axis=-1)
    z = z / temperature
    p = np.exp(z - z.max(axis=-1, keepdims=True))
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(z.shape[0]) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=-1), z.shape[-1] - 1)


@torch.no_grad()
def generate_tts(
    model: SpeechTextDecoder,
    speaker,
    text_ids,
    max_frames: int,
    temperature: float = 0.0,
    rng=None,
    frame_rate_hz: int = 40,
) -> TokenGrid:
    """Sample whole frames (all channels at once) until channel 0 emits the stop class."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if rng is None:
        rng = np.random.default_rng(0)
    model.eval()
    cfg = model.cfg
    dtype = model.speech_proj.weight.dtype
    empty = TokenGrid(np.zeros((1, cfg.n_mels), dtype=np.int64), cfg.bits, cfg.n_mels, frame_rate_hz)
    prompt = build_tts(speaker, text_ids, empty)
    keep = len(prompt) - 2  # up to and including <bos_speech>
    prompt = SequenceBatch(
        prompt.modality[:keep], prompt.text[:keep], prompt.speech[:keep],
        prompt.loss_weight[:keep], prompt.masked[:keep], prompt.speaker, "tts",
    )
    batch = _single(prompt, dtype)
    cache = model.new_cache()
    out = model(batch, cache)
    frames = []
    while len(frames) < max_frames:
        ch0 = _draw(out.channel0_logits()[0, -1][None], temperature, rng)[0]
        if ch0 == cfg.n_bins:
            break
        rest = _draw(out.speech_logits[0, -1, 1:], temperature, rng)
        frame = np.concatenate([[ch0], rest]).astype(np.int64)
        frames.append(frame)
        if len(frames) == max_frames:
            break
        out = model(_step_batch(Modality.SPEECH, cfg.n_mels, batch.speaker, dtype, frame=frame), cache)
    bins = np.array(frames, dtype=np.int64).reshape(len(frames), cfg.n_mels)
    return TokenGrid(bins, cfg.bits, cfg.n_mels, frame_rate_hz)
