"""``dmel`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 training divergence.

For ``train``, settings resolve as: command-line flag, then the
``--config`` file (``key=value`` lines), then the built-in default.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import store
from .audio_io import read_wav, write_wav
from .codec import detokenize, tokenize
from .corpus import (
    DEFAULT_CHARS,
    SpeakerTable,
    fit_manifest_codebook,
    load_utterances,
    make_examples,
    make_synthetic_corpus,
    write_corpus,
)
from .errors import ConfigurationError, DataError, DivergenceError, DmelError
from .frontend import FrontendConfig, approx_invert, melspec
from .metrics import (
    corpus_error_rates,
    format_metrics,
    log_spectral_distance,
    quantization_snr_db,
    write_summary,
)
from .model import ModelConfig, SpeechTextDecoder, decode_asr_greedy, generate_tts
from .sequence import TextVocab, read_manifest, synthetic_speaker_vector
from .trainer import TrainConfig, Trainer, load_model, read_config_file

log = logging.getLogger("dmel")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"bits", "n_mels", "text_vocab"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_DATA_KEYS = {"bits", "n_mels", "frame_rate_hz", "speaker_seed", "log_every"}
TRAIN_DEFAULTS = {"bits": 4, "n_mels": 80, "frame_rate_hz": 40, "speaker_seed": 0, "log_every": 100}

# train flag dest -> config key
_TRAIN_FLAGS = {
    "steps": "total_steps",
    "lr": "lr",
    "warmup": "warmup_steps",
    "batch_size": "batch_size",
    "grad_clip": "grad_clip",
    "seed": "seed",
    "bits": "bits",
    "mels": "n_mels",
    "frame_rate": "frame_rate_hz",
    "layers": "n_layers",
    "heads": "n_heads",
    "d_model": "d_model",
    "d_channel": "d_channel_embed",
    "checkpoint_every": "checkpoint_every",
    "speaker_seed": "speaker_seed",
    "log_every": "log_every",
}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(metrics: dict) -> None:
    print(format_metrics(metrics), flush=True)


# -- codec subcommands -----------------------------------------------------------


def cmd_fit_codebook(args) -> int:
    fe = FrontendConfig(n_mels=args.mels, frame_rate_hz=args.frame_rate)
    cb = fit_manifest_codebook(args.manifest, args.bits, fe)
    store.save_codebook(cb, args.out)
    _emit({"min_val": cb.min_val, "max_val": cb.max_val, "delta": cb.delta, "bits": cb.bits})
    return EXIT_OK


def bitrate_bps(cb) -> int:
    return cb.frontend.frame_rate_hz * cb.n_mels * cb.bits


def cmd_tokenize(args) -> int:
    cb = store.load_codebook(args.codebook)
    grid = tokenize(melspec(read_wav(args.inp), cb.frontend), cb)
    store.save_tokens(grid, args.out)
    _emit({"frames": grid.n_frames, "bitrate_bps": bitrate_bps(cb)})
    return EXIT_OK


def cmd_detokenize(args) -> int:
    cb = store.load_codebook(args.codebook)
    grid = store.load_tokens(args.inp)
    wave = approx_invert(detokenize(grid, cb), cb.frontend, iters=args.griffin_lim_iters, seed=args.seed)
    write_wav(wave, args.out)
    _emit({"frames": grid.n_frames, "samples": len(wave)})
    return EXIT_OK


def cmd_roundtrip_report(args) -> int:
    cb = store.load_codebook(args.codebook)
    rows = []
    for e in read_manifest(args.manifest):
        m = melspec(read_wav(e.audio_path), cb.frontend)
        r = detokenize(tokenize(m, cb), cb)
        row = {
            "file": str(e.audio_path),
            "frames": m.n_frames,
            "snr_db": quantization_snr_db(m, r),
            "lsd": log_spectral_distance(m, r),
            "bitrate_bps": bitrate_bps(cb),
        }
        rows.append(row)
        print(" ".join(f"{k}={v}" for k, v in row.items()))
    finite = [r["snr_db"] for r in rows if math.isfinite(r["snr_db"])]
    summary = {
        "files": len(rows),
        "mean_snr_db": float(np.mean(finite)) if finite else float("nan"),
        "mean_lsd": float(np.mean([r["lsd"] for r in rows])) if rows else float("nan"),
        "delta": cb.delta,
        "bitrate_bps": bitrate_bps(cb),
    }
    _emit(summary)
    if args.summary:
        write_summary({**summary, "per_file": rows}, args.summary)
    return EXIT_OK


def cmd_synth_corpus(args) -> int:
    vocab = TextVocab(DEFAULT_CHARS)
    utts = make_synthetic_corpus(args.n, vocab, np.random.default_rng(args.seed), n_speakers=args.speakers)
    manifest = write_corpus(utts, vocab, args.out, speaker_seed=args.seed)
    _emit({"utterances": len(utts), "manifest": manifest})
    return EXIT_OK


# -- model subcommands -------------------------------------------------------------


def resolve_train_settings(args) -> dict:
    """Merge built-in defaults, the config file and explicit flags (in rising priority)."""
    settings = dict(TRAIN_DEFAULTS)
    if args.config:
        from_file = read_config_file(args.config)
        unknown = set(from_file) - _MODEL_KEYS - _TRAIN_KEYS - _DATA_KEYS
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        settings.update(from_file)
    for dest, key in _TRAIN_FLAGS.items():
        value = getattr(args, dest)
        if value is not None:
            settings[key] = value
    settings["task"] = args.task if args.task is not None else settings.get("task", "asr")
    return settings


def _vocab_for(manifest, entries) -> TextVocab:
    path = Path(manifest).parent / "vocab.txt"
    if path.exists():
        return TextVocab.load(path)
    return TextVocab.from_texts(e.transcript for e in entries)


def cmd_train(args) -> int:
    s = resolve_train_settings(args)
    fe = FrontendConfig(n_mels=int(s["n_mels"]), frame_rate_hz=int(s["frame_rate_hz"]))
    entries = read_manifest(args.data)
    vocab = _vocab_for(args.data, entries)
    cb = fit_manifest_codebook(args.data, int(s["bits"]), fe)
    speakers = SpeakerTable.for_manifest(args.data, seed=int(s["speaker_seed"]))
    examples = make_examples(load_utterances(args.data), cb, vocab, speakers)
    torch.manual_seed(int(s.get("seed", 0)))

    train_cfg = TrainConfig.from_dict(s)
    out = Path(args.out)
    if args.resume and (out / "latest").exists():
        trainer = Trainer.from_checkpoint(out, examples, train_cfg)
        log.info("resumed from step %d", trainer.step)
    else:
        model_cfg = ModelConfig.from_dict(
            {**{k: v for k, v in s.items() if k in _MODEL_KEYS}, "bits": cb.bits, "n_mels": cb.n_mels, "text_vocab": len(vocab)}
        )
        trainer = Trainer(SpeechTextDecoder(model_cfg), train_cfg, examples)
    trainer.extras = {
        "vocab": vocab.chars,
        "codebook": store.codebook_to_dict(cb),
        "speaker_seed": int(s["speaker_seed"]),
        "speakers": {e.speaker_id: speakers[e.speaker_id].tolist() for e in entries},
    }
    trainer.run(train_cfg.total_steps - trainer.step, out_dir=out, log_every=int(s["log_every"]))
    path = trainer.save_checkpoint(out)
    final = trainer.loss_log[-1][2] if trainer.loss_log else float("nan")
    _emit({"step": trainer.step, "final_loss": final, "eval_loss": trainer.evaluate(), "checkpoint": path})
    return EXIT_OK


def _load_bundle(ckpt):
    model, meta = load_model(ckpt)
    extras = meta.get("extras", {})
    try:
        vocab = TextVocab(extras["vocab"])
        cb = store.codebook_from_dict(extras["codebook"])
    except KeyError as e:
        raise DataError(f"checkpoint lacks {e.args[0]!r}; it was not written by 'dmel train'") from None
    return model, vocab, cb, extras


def cmd_eval_asr(args) -> int:
    model, vocab, cb, _ = _load_bundle(args.ckpt)
    refs, hyps = [], []
    for e in read_manifest(args.manifest):
        grid = tokenize(melspec(read_wav(e.audio_path), cb.frontend), cb)
        hyp = vocab.decode(decode_asr_greedy(model, grid, args.max_text_len))
        refs.append(e.transcript)
        hyps.append(hyp)
        log.info("%s | ref=%s | hyp=%s", e.audio_path.name, e.transcript, hyp)
    metrics = {"utterances": len(refs), **corpus_error_rates(refs, hyps)}
    _emit(metrics)
    if args.summary:
        write_summary({**metrics, "hypotheses": hyps}, args.summary)
    return EXIT_OK


def cmd_generate(args) -> int:
    model, vocab, cb, extras = _load_bundle(args.ckpt)
    known = extras.get("speakers", {})
    if args.speaker in known:
        speaker = np.asarray(known[args.speaker], dtype=np.float64)
    else:
        speaker = synthetic_speaker_vector(args.speaker, int(extras.get("speaker_seed", 0)))
    rng = np.random.default_rng(args.seed)
    grid = generate_tts(
        model, speaker, vocab.encode(args.text), args.max_frames, args.temperature, rng, cb.frontend.frame_rate_hz
    )
    if Path(args.out).suffix.lower() == ".wav":
        write_wav(approx_invert(detokenize(grid, cb), cb.frontend, iters=args.griffin_lim_iters, seed=args.seed), args.out)
    else:
        store.save_tokens(grid, args.out)
    _emit({"frames": grid.n_frames, "out": args.out})
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dmel", description="dMel speech tokenizer and speech-text decoder toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("fit-codebook", help="fit the global min/max codebook over a manifest")
    s.add_argument("--manifest", required=True, help="TSV manifest: path, transcript, speaker")
    s.add_argument("--bits", type=int, default=4, help="bits per channel K (default 4)")
    s.add_argument("--mels", type=int, default=80, help="mel channels N (default 80)")
    s.add_argument("--frame-rate", type=int, choices=(40, 80), default=40, help="frames per second")
    s.add_argument("--out", required=True, help="codebook file to write")
    s.set_defaults(func=cmd_fit_codebook)

    s = sub.add_parser("tokenize", help="WAV -> token file")
    s.add_argument("--codebook", required=True, help="codebook file")
    s.add_argument("--in", dest="inp", required=True, help="input WAV")
    s.add_argument("--out", required=True, help="token file to write")
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("detokenize", help="token file -> approximate WAV")
    s.add_argument("--codebook", required=True, help="codebook file")
    s.add_argument("--in", dest="inp", required=True, help="input token file")
    s.add_argument("--out", required=True, help="WAV to write")
    s.add_argument("--griffin-lim-iters", type=int, default=64, help="phase reconstruction iterations")
    s.add_argument("--seed", type=int, default=0, help="seed for the initial phase")
    s.set_defaults(func=cmd_detokenize)

    s = sub.add_parser("roundtrip-report", help="per-file quantization SNR, LSD and bitrate")
    s.add_argument("--codebook", required=True, help="codebook file")
    s.add_argument("--manifest", required=True, help="TSV manifest")
    s.add_argument("--summary", help="also write a JSON summary here")
    s.set_defaults(func=cmd_roundtrip_report)

    s = sub.add_parser("train", help="train a speech-text decoder")
    s.add_argument("--task", choices=("asr", "tts", "joint"), help="training task (default asr)")
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--data", required=True, help="training manifest")
    s.add_argument("--out", required=True, help="run directory for checkpoints")
    s.add_argument("--resume", action="store_true", help="continue from the run directory's latest checkpoint")
    s.add_argument("--steps", type=int, help="total optimizer steps")
    s.add_argument("--lr", type=float, help="peak learning rate")
    s.add_argument("--warmup", type=int, help="linear warmup steps")
    s.add_argument("--batch-size", type=int, help="examples per batch")
    s.add_argument("--grad-clip", type=float, help="global gradient-norm bound")
    s.add_argument("--seed", type=int, help="training seed")
    s.add_argument("--bits", type=int, help="bits per channel K")
    s.add_argument("--mels", type=int, help="mel channels N")
    s.add_argument("--frame-rate", type=int, choices=(40, 80), help="frames per second")
    s.add_argument("--layers", type=int, help="transformer layers")
    s.add_argument("--heads", type=int, help="attention heads")
    s.add_argument("--d-model", type=int, help="model width")
    s.add_argument("--d-channel", type=int, help="per-channel embedding width")
    s.add_argument("--checkpoint-every", type=int, help="steps between checkpoints")
    s.add_argument("--speaker-seed", type=int, help="seed for synthetic speaker vectors")
    s.add_argument("--log-every", type=int, help="steps between loss log lines")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval-asr", help="greedy-decode a manifest and report WER/CER")
    s.add_argument("--ckpt", required=True, help="checkpoint file or run directory")
    s.add_argument("--manifest", required=True, help="TSV manifest")
    s.add_argument("--max-text-len", type=int, default=200, help="decode length limit")
    s.add_argument("--summary", help="also write a JSON summary here")
    s.add_argument("--seed", type=int, default=0, help="unused by greedy decoding; accepted for uniformity")
    s.set_defaults(func=cmd_eval_asr)

    s = sub.add_parser("generate", help="text -> speech tokens (or WAV when --out ends in .wav)")
    s.add_argument("--ckpt", required=True, help="checkpoint file or run directory")
    s.add_argument("--text", required=True, help="text to speak")
    s.add_argument("--speaker", default="spk0", help="speaker id")
    s.add_argument("--out", required=True, help="token file, or .wav")
    s.add_argument("--max-frames", type=int, default=1000, help="frame limit")
    s.add_argument("--temperature", type=float, default=0.0, help="0 means greedy")
    s.add_argument("--griffin-lim-iters", type=int, default=64, help="phase reconstruction iterations")
    s.add_argument("--seed", type=int, default=0, help="sampling and phase seed")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("synth-corpus", help="write a synthetic chord-per-character corpus")
    s.add_argument("--n", type=int, default=10, help="number of utterances")
    s.add_argument("--seed", type=int, default=0, help="corpus seed")
    s.add_argument("--speakers", type=int, default=4, help="number of speakers")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth_corpus)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"dmel: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigurationError as e:
        print(f"dmel: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DmelError, OSError, ValueError) as e:
        print(f"dmel: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
