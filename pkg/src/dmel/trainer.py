"""Training loop: warmup + cosine schedule, global-norm clipping, Adam, checkpoints.

Every source of randomness is derived from ``(seed, step, example index)``
so a run restarted from a checkpoint replays exactly the same batches,
masks and dropout patterns as an uninterrupted one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .corpus import Example
from .errors import ConfigurationError, DivergenceError
from .model import ModelConfig, SpeechTextDecoder, collate, sequence_loss
from .sequence import (
    SpanMaskConfig,
    apply_span_mask,
    build_asr,
    build_tts,
    example_rng,
    spec_augment,
)

log = logging.getLogger(__name__)

TASKS = ("asr", "tts", "joint")
DEFAULT_WARMUP = {"asr": 4000, "tts": 5000, "joint": 4000}
DEFAULT_CLIP = {"asr": 0.1, "tts": 1.0, "joint": 0.1}


@dataclass
class TrainConfig:
    task: str = "asr"
    lr: float = 1e-3
    warmup_steps: int | None = None
    total_steps: int = 80000
    grad_clip: float | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    span_mask_p_asr: float = 0.8
    span_mask_p_tts: float = 0.8
    span_mean: int = 3
    span_ratio: float = 0.5
    span_mask_text: bool = False
    spec_augment: bool = True
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.warmup_steps is None:
            self.warmup_steps = DEFAULT_WARMUP[self.task]
        if self.grad_clip is None:
            self.grad_clip = DEFAULT_CLIP[self.task]
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigurationError("need 0 <= warmup_steps < total_steps")
        if not self.grad_clip > 0:
            raise ConfigurationError("grad_clip must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    def span_mask(self, task: str) -> SpanMaskConfig:
        p = self.span_mask_p_asr if task == "asr" else self.span_mask_p_tts
        return SpanMaskConfig(p, self.span_mean, self.span_ratio, self.span_mask_text)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return 0.0
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _torch_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step, 0xD0]).generate_state(1)[0])


def task_for_step(cfg: TrainConfig, step: int) -> str:
    if cfg.task != "joint":
        return cfg.task
    return "asr" if np.random.default_rng([cfg.seed, step, 0x7A5C]).random() < 0.5 else "tts"


def length_buckets(examples: list[Example], batch_size: int) -> list[list[int]]:
    """Indices grouped into fixed-size batches of similar length (stable sort)."""
    order = sorted(range(len(examples)), key=lambda i: examples[i].grid.n_frames)
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


class Trainer:
    def __init__(self, model: SpeechTextDecoder, cfg: TrainConfig, examples: list[Example]):
        if not examples:
            raise ValueError("no training examples")
        self.model = model
        self.cfg = cfg
        self.examples = examples
        self.buckets = length_buckets(examples, cfg.batch_size)
        all_bins = np.concatenate([e.grid.bins.ravel() for e in examples])
        self.fill_bin = int(round(all_bins.mean()))
        self.optimizer = torch.optim.Adam(
            model.parameters(), lr=0.0, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.eps, foreach=False
        )
        self.step = 0
        self.loss_log: list[tuple[int, str, float]] = []

    @property
    def dtype(self):
        return self.model.speech_proj.weight.dtype

    # -- data --------------------------------------------------------------

    def bucket_for_step(self, step: int) -> list[int]:
        n = len(self.buckets)
        epoch, k = divmod(step, n)
        order = np.random.default_rng([self.cfg.seed, epoch, 0xB0C4]).permutation(n)
        return self.buckets[order[k]]

    def make_example(self, ex: Example, task: str, rng, augment: bool = True):
        if task == "asr":
            grid = ex.grid
            if augment and self.cfg.spec_augment:
                grid = spec_augment(grid, rng, self.fill_bin)
            # speech targets carry no loss in ASR, so the augmented frames can double as payload
            seq = build_asr(grid, ex.text_ids)
        else:
            seq = build_tts(ex.speaker, ex.text_ids, ex.grid)
        if augment:
            seq = apply_span_mask(seq, self.cfg.span_mask(task), rng)
        return seq

    def batch_for_step(self, step: int):
        task = task_for_step(self.cfg, step)
        idx = self.bucket_for_step(step)
        seqs = [self.make_example(self.examples[i], task, example_rng(self.cfg.seed, step, i)) for i in idx]
        return collate(seqs, self.dtype), task

    # -- optimisation --------------------------------------------------------

    def train_step(self, batch) -> float:
        """One forward/backward/clip/Adam update; returns the pre-update loss."""
        torch.manual_seed(_torch_seed(self.cfg.seed, self.step))
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        loss = sequence_loss(self.model(batch), batch)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {self.step}")
        loss.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        lr = lr_at(self.step + 1, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.step += 1
        return float(loss.detach())

    def run(self, n_steps: int, out_dir=None, log_every: int = 100) -> list[tuple[int, str, float]]:
        end = self.step + n_steps
        while self.step < end:
            batch, task = self.batch_for_step(self.step)
            loss = self.train_step(batch)
            self.loss_log.append((self.step, task, loss))
            if log_every and self.step % log_every == 0:
                log.info("step %d task %s loss %.4f lr %.3g", self.step, task, loss, lr_at(self.step, self.cfg))
            if out_dir is not None and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save_checkpoint(out_dir)
        return self.loss_log

    @torch.no_grad()
    def evaluate(self, tasks=None, examples=None) -> float:
        """Mean supervised loss over clean (unmasked, unaugmented) examples in eval mode."""
        examples = self.examples if examples is None else examples
        tasks = tasks or (("asr", "tts") if self.cfg.task == "joint" else (self.cfg.task,))
        self.model.eval()
        total = weight = 0.0
        for task in tasks:
            seqs = [self.make_example(e, task, None, augment=False) for e in examples]
            batch = collate(seqs, self.dtype)
            w = float(batch.loss_weight[:, 1:].sum())
            total += float(sequence_loss(self.model(batch), batch)) * w
            weight += w
        return total / weight

    # -- checkpoints -----------------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        tensors = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        names = {id(p): n for n, p in self.model.named_parameters()}
        for p, st in self.optimizer.state.items():
            n = names[id(p)]
            tensors[f"adam/{n}/exp_avg"] = st["exp_avg"]
            tensors[f"adam/{n}/exp_avg_sq"] = st["exp_avg_sq"]
        return tensors

    def save_checkpoint(self, out_dir, extras: dict | None = None) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        meta = {
            "model": self.model.cfg.to_dict(),
            "train": self.cfg.to_dict(),
            "step": self.step,
            "extras": extras if extras is not None else getattr(self, "extras", {}),
        }
        path = out_dir / f"ckpt-{self.step:08d}.bin"
        checkpoint.save(path, meta, self.state_tensors())
        tmp = out_dir / "latest.tmp"
        tmp.write_text(path.name + "\n")
        tmp.replace(out_dir / "latest")
        return path

    @classmethod
    def from_checkpoint(cls, path, examples: list[Example], cfg: TrainConfig | None = None) -> "Trainer":
        meta, tensors = load_checkpoint_file(path)
        model = model_from_state(meta, tensors)
        trainer = cls(model, cfg or TrainConfig.from_dict(meta["train"]), examples)
        trainer.step = int(meta["step"])
        trainer.extras = meta.get("extras", {})
        for n, p in model.named_parameters():
            key = f"adam/{n}/exp_avg"
            if key in tensors:
                trainer.optimizer.state[p] = {
                    "step": torch.tensor(float(trainer.step)),
                    "exp_avg": tensors[key].to(p.dtype).clone(),
                    "exp_avg_sq": tensors[f"adam/{n}/exp_avg_sq"].to(p.dtype).clone(),
                }
        return trainer


def resolve_checkpoint(path) -> Path:
    """Accept a checkpoint file or a run directory holding a ``latest`` pointer."""
    path = Path(path)
    if path.is_dir():
        return path / (path / "latest").read_text().strip()
    return path


def load_checkpoint_file(path):
    return checkpoint.load(resolve_checkpoint(path))


def model_from_state(meta: dict, tensors: dict[str, torch.Tensor]) -> SpeechTextDecoder:
    model = SpeechTextDecoder(ModelConfig.from_dict(meta["model"]))
    state = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state)
    return model


def load_model(path) -> tuple[SpeechTextDecoder, dict]:
    meta, tensors = load_checkpoint_file(path)
    return model_from_state(meta, tensors), meta


def read_config_file(path) -> dict:
    """``key=value`` lines; ``#`` starts a comment. Values are parsed as int/float/bool when possible."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = parse_scalar(v)
    return out


def parse_scalar(v: str):
    low = v.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v
