import math

import numpy as np
import pytest
import torch

from dmel.codec import TokenGrid
from dmel.errors import CapacityError
from dmel.model import (
    ModelConfig,
    SpeechTextDecoder,
    collate,
    decode_asr_greedy,
    generate_tts,
    position_losses,
    rope_rotate,
    sequence_loss,
)
from dmel.sequence import Modality, apply_span_mask, build_asr, build_tts, SpanMaskConfig

SPK = np.random.default_rng(5).standard_normal(512)


def tiny_config(**kw):
    base = dict(
        n_layers=1, n_heads=1, d_model=8, d_channel_embed=2, bits=2, n_mels=3, text_vocab=10,
        dropout_residual=0.0, dropout_attention=0.0, dropout_embedding=0.0, dropout_positional=0.0,
    )
    base.update(kw)
    return ModelConfig(**base)


def make_model(cfg, dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    model = SpeechTextDecoder(cfg).to(dtype)
    with torch.no_grad():
        # move every parameter off its init so biases and norms matter
        for p in model.parameters():
            p.add_(0.05 * torch.randn_like(p))
    return model.eval()


def loss_value(out, batch) -> float:
    return sequence_loss(out, batch).item()


def grid(cfg, frames, seed=0):
    bins = np.random.default_rng(seed).integers(0, cfg.n_bins, (frames, cfg.n_mels))
    return TokenGrid(bins, cfg.bits, cfg.n_mels, 40)


def mixed_batch(cfg, dtype=torch.float64, seed=0):
    rng = np.random.default_rng(seed)
    asr = build_asr(grid(cfg, 5, seed), rng.integers(4, cfg.text_vocab, 4))
    tts = build_tts(SPK, rng.integers(4, cfg.text_vocab, 3), grid(cfg, 4, seed + 1))
    tts = apply_span_mask(tts, SpanMaskConfig(1.0, 2, 0.5), rng)
    return collate([asr, tts], dtype)


class TestRope:
    def test_position_zero_identity(self, rng):
        x = torch.from_numpy(rng.standard_normal(16))
        torch.testing.assert_close(rope_rotate(x, 0), x, rtol=0, atol=0)

    def test_norm_preserved(self, rng):
        x = torch.from_numpy(rng.standard_normal(32))
        for p in (1, 17, 4000):
            assert abs(float(rope_rotate(x, p).norm() - x.norm())) < 1e-12

    def test_relative_position(self, rng):
        q = torch.from_numpy(rng.standard_normal(16))
        k = torch.from_numpy(rng.standard_normal(16))
        for _ in range(20):
            p1, p2, s = (int(v) for v in rng.integers(0, 2000, 3))
            a = float(rope_rotate(q, p1) @ rope_rotate(k, p2))
            b = float(rope_rotate(q, p1 + s) @ rope_rotate(k, p2 + s))
            assert abs(a - b) < 1e-9

    def test_odd_dimension(self):
        with pytest.raises(ValueError):
            rope_rotate(torch.zeros(3), 1)


class TestSpeechEmbedding:
    def test_output_width(self):
        for n_mels, d in ((3, 2), (80, 4)):
            cfg = tiny_config(n_mels=n_mels, d_channel_embed=d)
            model = make_model(cfg)
            assert model.embed_speech_frame(np.zeros((2, n_mels), dtype=int)).shape == (2, cfg.d_model)

    def test_channel_independence(self):
        cfg = tiny_config(n_mels=8, d_channel_embed=3, bits=4)
        model = make_model(cfg)
        bins = torch.randint(0, 16, (8,))
        other = bins.clone()
        other[5] = (bins[5] + 1) % 16
        a, b = model.channel_embeddings(bins), model.channel_embeddings(other)
        changed = torch.nonzero(a != b).flatten()
        assert changed.min() >= 15 and changed.max() < 18

    def test_selector_projection_recovers_channel0(self):
        cfg = tiny_config(n_mels=4, d_channel_embed=2, d_model=8, bits=3)
        model = make_model(cfg)
        with torch.no_grad():
            model.speech_proj.weight.zero_()
            model.speech_proj.bias.zero_()
            model.speech_proj.weight[0, 0] = 1.0
            model.speech_proj.weight[1, 1] = 1.0
        bins = torch.tensor([5, 1, 2, 7])
        out = model.embed_speech_frame(bins)
        table = model.channel_embed.weight[: cfg.n_bins]
        torch.testing.assert_close(out[:2], table[5])
        assert torch.all(out[2:] == 0)

    def test_shared_table_option(self):
        cfg = tiny_config(n_mels=4, shared_channel_embedding=True)
        model = make_model(cfg)
        assert model.channel_embed.num_embeddings == cfg.n_bins
        e = model.channel_embeddings(torch.tensor([1, 1, 1, 1])).view(4, -1)
        assert torch.all(e == e[0])

    def test_bin_out_of_range(self):
        model = make_model(tiny_config())
        with pytest.raises(ValueError):
            model.embed_speech_frame([0, 1, 4])


class TestConfig:
    def test_presets(self):
        assert (ModelConfig.preset("small").n_layers, ModelConfig.preset("small").n_heads, ModelConfig.preset("small").d_model) == (18, 2, 512)
        assert (ModelConfig.preset("base").n_layers, ModelConfig.preset("base").d_model) == (36, 768)
        assert (ModelConfig.preset("large").n_heads, ModelConfig.preset("large").d_model) == (8, 1536)
        with pytest.raises(ValueError):
            ModelConfig.preset("huge")

    @pytest.mark.parametrize("kw", [{"d_model": 10, "n_heads": 3}, {"d_model": 6, "n_heads": 2}, {"bits": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            tiny_config(**kw)

    def test_dict_round_trip(self):
        cfg = tiny_config(n_layers=3)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_small_preset_constructs(self):
        # the large-size layer and head counts still build at toy width
        cfg = ModelConfig.preset("small", d_model=32, n_layers=2)
        SpeechTextDecoder(cfg)


class TestForward:
    @pytest.mark.parametrize("layers,heads,width", [(1, 1, 8), (2, 2, 32), (3, 4, 64)])
    def test_causal(self, layers, heads, width):
        cfg = tiny_config(n_layers=layers, n_heads=heads, d_model=width, n_mels=5, bits=3)
        model = make_model(cfg, torch.float32)
        batch = mixed_batch(cfg, torch.float32)
        base = model(batch)
        s = batch.shape[1]
        for t in range(s - 1):
            pert = collate_copy(batch)
            pert.text[:, t + 1 :] = torch.randint(4, cfg.text_vocab, pert.text[:, t + 1 :].shape)
            pert.speech[:, t + 1 :] = torch.randint(0, cfg.n_bins, pert.speech[:, t + 1 :].shape)
            pert.masked[:, t + 1 :] = ~pert.masked[:, t + 1 :]
            out = model(pert)
            for name in ("text_logits", "speech_logits", "stop_logits"):
                a, b = getattr(base, name)[:, : t + 1], getattr(out, name)[:, : t + 1]
                assert torch.max(torch.abs(a - b)) <= 1e-5

    def test_head_shapes(self):
        cfg = tiny_config()
        out = make_model(cfg)(mixed_batch(cfg))
        b, s = 2, 13
        assert out.text_logits.shape == (b, s, cfg.text_vocab)
        assert out.speech_logits.shape == (b, s, cfg.n_mels, cfg.n_bins)
        assert out.channel0_logits().shape == (b, s, cfg.n_bins + 1)

    def test_channel_heads_independent(self):
        cfg = tiny_config(n_mels=4, bits=2)
        model = make_model(cfg)
        batch = mixed_batch(cfg)
        with torch.no_grad():
            before = model(batch).speech_logits
            rows = slice(2 * cfg.n_bins, 3 * cfg.n_bins)  # channel 2's head
            model.speech_head.weight[rows] += 1.0
            model.speech_head.bias[rows] -= 3.0
            after = model(batch).speech_logits
        keep = [0, 1, 3]
        assert torch.equal(before[..., keep, :], after[..., keep, :])
        assert not torch.equal(before[..., 2, :], after[..., 2, :])

    def test_capacity(self):
        cfg = tiny_config(max_positions=8)
        with pytest.raises(CapacityError):
            make_model(cfg)(mixed_batch(cfg))

    def test_cache_matches_full(self):
        cfg = tiny_config(n_layers=2, n_heads=2, d_model=16)
        model = make_model(cfg, torch.float32)
        batch = mixed_batch(cfg, torch.float32)
        full = model(batch)
        cache = model.new_cache()
        pieces = []
        for lo, hi in ((0, 3), (3, 4), (4, 9), (9, 14)):
            part = slice_batch(batch, lo, hi)
            pieces.append(model(part, cache))
        for name in ("text_logits", "speech_logits", "stop_logits"):
            inc = torch.cat([getattr(p, name) for p in pieces], dim=1)
            assert torch.max(torch.abs(inc - getattr(full, name))) <= 1e-5

    def test_matches_numpy_reference(self):
        cfg = tiny_config(n_layers=1, n_heads=1, d_model=8)
        model = make_model(cfg)
        batch = mixed_batch(cfg)
        out = model(batch)
        ref = numpy_reference(model, batch)
        for name, value in ref.items():
            assert np.max(np.abs(getattr(out, name).detach().numpy() - value)) < 1e-6


def collate_copy(batch):
    return type(batch)(*(getattr(batch, f).clone() for f in ("modality", "text", "speech", "speaker", "loss_weight", "masked")))


def slice_batch(batch, lo, hi):
    return type(batch)(
        batch.modality[:, lo:hi], batch.text[:, lo:hi], batch.speech[:, lo:hi],
        batch.speaker, batch.loss_weight[:, lo:hi], batch.masked[:, lo:hi],
    )


def numpy_reference(model, batch):
    """Single-layer, single-head forward written out with numpy loops."""
    P = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    cfg = model.cfg
    D, nb, N = cfg.d_model, cfg.n_bins, cfg.n_mels

    def ln(x, w, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * w + b

    def gelu(x):
        from math import erf
        return x * 0.5 * (1 + np.vectorize(erf)(x / math.sqrt(2)))

    B, S = batch.modality.shape
    out_text = np.zeros((B, S, cfg.text_vocab))
    out_speech = np.zeros((B, S, N, nb))
    out_stop = np.zeros((B, S))
    for bi in range(B):
        x = np.zeros((S, D))
        for t in range(S):
            kind = int(batch.modality[bi, t])
            if batch.masked[bi, t]:
                x[t] = P["mask_embed"]
            elif kind == Modality.SPEECH:
                e = np.concatenate([P["channel_embed.weight"][c * nb + int(batch.speech[bi, t, c])] for c in range(N)])
                x[t] = P["speech_proj.weight"] @ e + P["speech_proj.bias"]
            elif kind in (Modality.TEXT, Modality.BOS_TEXT, Modality.EOS_TEXT):
                x[t] = P["text_embed.weight"][int(batch.text[bi, t])]
            elif kind == Modality.BOS_SPEECH:
                x[t] = P["speech_marker.weight"][0]
            elif kind == Modality.EOS_SPEECH:
                x[t] = P["speech_marker.weight"][1]
            elif kind == Modality.SPEAKER:
                x[t] = P["speaker_proj.weight"] @ batch.speaker[bi].numpy() + P["speaker_proj.bias"]
        h = ln(x, P["blocks.0.ln1.weight"], P["blocks.0.ln1.bias"])
        qkv = h @ P["blocks.0.attn.qkv.weight"].T + P["blocks.0.attn.qkv.bias"]
        q, k, v = qkv[:, :D], qkv[:, D : 2 * D], qkv[:, 2 * D :]
        q = ln(q, P["blocks.0.attn.q_norm.weight"], P["blocks.0.attn.q_norm.bias"])
        k = ln(k, P["blocks.0.attn.k_norm.weight"], P["blocks.0.attn.k_norm.bias"])

        def rot(vec, pos):
            r = vec.copy()
            for i in range(D // 2):
                theta = pos * cfg.rope_base ** (-2 * i / D)
                c, s = math.cos(theta), math.sin(theta)
                r[2 * i] = vec[2 * i] * c - vec[2 * i + 1] * s
                r[2 * i + 1] = vec[2 * i] * s + vec[2 * i + 1] * c
            return r

        q = np.stack([rot(q[t], t) for t in range(S)])
        k = np.stack([rot(k[t], t) for t in range(S)])
        att = np.zeros((S, D))
        for t in range(S):
            scores = np.array([q[t] @ k[j] / math.sqrt(D) for j in range(t + 1)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            att[t] = w @ v[: t + 1]
        x = x + att @ P["blocks.0.attn.proj.weight"].T + P["blocks.0.attn.proj.bias"]
        h = ln(x, P["blocks.0.ln2.weight"], P["blocks.0.ln2.bias"])
        m = gelu(h @ P["blocks.0.fc.weight"].T + P["blocks.0.fc.bias"])
        x = x + m @ P["blocks.0.fc_out.weight"].T + P["blocks.0.fc_out.bias"]
        h = ln(x, P["ln_f.weight"], P["ln_f.bias"])
        out_text[bi] = h @ P["text_head.weight"].T + P["text_head.bias"]
        out_speech[bi] = (h @ P["speech_head.weight"].T + P["speech_head.bias"]).reshape(S, N, nb)
        out_stop[bi] = (h @ P["stop_head.weight"].T + P["stop_head.bias"])[:, 0]
    return {"text_logits": out_text, "speech_logits": out_speech, "stop_logits": out_stop}


class TestLoss:
    def zero_heads(self, model):
        with torch.no_grad():
            for head in (model.text_head, model.speech_head, model.stop_head):
                head.weight.zero_()
                head.bias.zero_()

    def test_uniform_speech_logits(self):
        cfg = tiny_config(bits=4, n_mels=6)
        model = make_model(cfg)
        self.zero_heads(model)
        with torch.no_grad():
            model.stop_head.bias.fill_(-1e9)  # take the stop class out of channel 0
        batch = collate([build_tts(SPK, [5, 6], grid(cfg, 4))])
        per = position_losses(model(batch), batch)[0]
        speech_targets = (batch.modality[0, 1:] == Modality.SPEECH).numpy()
        np.testing.assert_allclose(per.detach().numpy()[speech_targets], math.log(16), rtol=1e-12)
        assert abs(math.log(16) - 2.7726) < 1e-4

    def test_uniform_text_logits(self):
        cfg = tiny_config()
        model = make_model(cfg)
        self.zero_heads(model)
        batch = collate([build_asr(grid(cfg, 3), [5, 6, 7])])
        assert abs(loss_value(model(batch), batch) - math.log(cfg.text_vocab)) < 1e-12

    def test_eos_speech_uses_stop_class(self):
        cfg = tiny_config(bits=2, n_mels=3)
        model = make_model(cfg)
        batch = collate([build_tts(SPK, [5], grid(cfg, 2))])
        out = model(batch)
        per = position_losses(out, batch)[0].detach()
        last = batch.shape[1] - 1
        c0 = out.channel0_logits()[0, last - 1].detach()
        expect = -(c0[cfg.n_bins] - torch.logsumexp(c0, 0))
        assert abs(float(per[last - 1] - expect)) < 1e-12

    def test_speech_frame_is_channel_mean(self):
        cfg = tiny_config(bits=2, n_mels=3)
        model = make_model(cfg)
        g = grid(cfg, 2)
        batch = collate([build_tts(SPK, [5], g)])
        out = model(batch)
        per = position_losses(out, batch)[0].detach()
        t = int(np.flatnonzero(batch.modality[0].numpy() == Modality.SPEECH)[0]) - 1
        ce = [-(out.channel0_logits()[0, t, g.bins[0, 0]] - torch.logsumexp(out.channel0_logits()[0, t], 0))]
        for c in range(1, 3):
            row = out.speech_logits[0, t, c]
            ce.append(-(row[g.bins[0, c]] - torch.logsumexp(row, 0)))
        assert abs(float(per[t] - sum(ce).detach() / 3)) < 1e-12

    def test_asr_ignores_speech_targets(self):
        cfg = tiny_config()
        model = make_model(cfg)
        batch = collate([build_asr(grid(cfg, 6), [5, 6, 7])])
        ref = loss_value(model(batch), batch)
        # zeroing speech targets changes the inputs too, so compare on targets only
        out = model(batch)
        zeroed = collate_copy(batch)
        zeroed.speech.zero_()
        assert loss_value(out, zeroed) == ref

    def test_permuting_unsupervised_targets(self):
        cfg = tiny_config(n_mels=5, bits=3)
        model = make_model(cfg)
        batch = mixed_batch(cfg)
        out = model(batch)
        ref = loss_value(out, batch)
        rng = np.random.default_rng(0)
        for _ in range(20):
            pert = collate_copy(batch)
            free = pert.loss_weight == 0
            free[:, 0] = True
            idx = torch.nonzero(free)
            perm = torch.from_numpy(rng.permutation(len(idx)))
            src = idx[perm]
            pert.text[idx[:, 0], idx[:, 1]] = batch.text[src[:, 0], src[:, 1]]
            pert.speech[idx[:, 0], idx[:, 1]] = batch.speech[src[:, 0], src[:, 1]]
            assert abs(loss_value(out, pert) - ref) < 1e-9

    def test_no_supervised_positions(self):
        cfg = tiny_config()
        model = make_model(cfg)
        batch = collate([build_asr(grid(cfg, 2), [5])])
        batch.loss_weight.zero_()
        with pytest.raises(ValueError):
            sequence_loss(model(batch), batch)

    def test_finite_difference_gradient(self):
        cfg = tiny_config(n_layers=1, n_heads=2, d_model=8, n_mels=3, bits=2)
        model = make_model(cfg)
        batch = mixed_batch(cfg)
        loss = sequence_loss(model(batch), batch)
        model.zero_grad()
        loss.backward()
        rng = np.random.default_rng(0)
        h = 1e-5
        worst = 0.0
        for name, p in model.named_parameters():
            flat = p.data.view(-1)
            grad = p.grad.view(-1)
            picks = rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False)
            for i in picks:
                old = float(flat[i])
                with torch.no_grad():
                    flat[i] = old + h
                    up = loss_value(model(batch), batch)
                    flat[i] = old - h
                    down = loss_value(model(batch), batch)
                    flat[i] = old
                numeric = (up - down) / (2 * h)
                analytic = float(grad[i])
                scale = max(abs(numeric), abs(analytic))
                if scale > 1e-7:
                    worst = max(worst, abs(numeric - analytic) / scale)
        print(f"max relative gradient error {worst:.2e}")
        assert worst < 1e-4


class TestDecoding:
    def test_greedy_respects_cap(self):
        cfg = tiny_config()
        model = make_model(cfg)
        with torch.no_grad():
            model.text_head.bias.fill_(-100)
            model.text_head.bias[5] = 100
        assert decode_asr_greedy(model, grid(cfg, 3), 7) == [5] * 7
        assert decode_asr_greedy(model, grid(cfg, 3), 0) == []

    def test_greedy_empty_emission(self):
        cfg = tiny_config()
        model = make_model(cfg)
        with torch.no_grad():
            model.text_head.bias.fill_(-100)
            model.text_head.bias[1] = 100
        assert decode_asr_greedy(model, grid(cfg, 3), 7) == []

    def test_tts_deterministic_and_in_range(self):
        cfg = tiny_config(bits=3)
        model = make_model(cfg)
        with torch.no_grad():
            model.stop_head.bias.fill_(-100)
        a = generate_tts(model, SPK, [5, 6], 9)
        b = generate_tts(model, SPK, [5, 6], 9)
        assert a == b and a.n_frames == 9
        assert a.bins.max() < cfg.n_bins

    def test_tts_sampling_in_range(self):
        cfg = tiny_config(bits=2)
        model = make_model(cfg)
        with torch.no_grad():
            model.stop_head.bias.fill_(-100)
        g = generate_tts(model, SPK, [5], 20, temperature=1.5, rng=np.random.default_rng(3))
        assert g.bins.min() >= 0 and g.bins.max() < 4

    def test_tts_stops(self):
        cfg = tiny_config()
        model = make_model(cfg)
        with torch.no_grad():
            model.stop_head.bias.fill_(100)
        assert generate_tts(model, SPK, [5], 10).n_frames == 0

    def test_overfit_single_pair(self):
        from dmel.trainer import TrainConfig, Trainer
        from dmel.corpus import Example

        cfg = tiny_config(n_layers=2, n_heads=2, d_model=32, n_mels=6, bits=3, text_vocab=12)
        torch.manual_seed(0)
        model = SpeechTextDecoder(cfg)
        ex = Example(grid(cfg, 8, seed=4), [5, 9, 7, 11], SPK, "", "spk0")
        tc = TrainConfig(task="joint", total_steps=300, warmup_steps=20, batch_size=1, span_mask_p_asr=0.0,
                         span_mask_p_tts=0.0, spec_augment=False)
        Trainer(model, tc, [ex]).run(300, log_every=0)
        assert decode_asr_greedy(model, ex.grid, 10) == ex.text_ids
        g = generate_tts(model, SPK, ex.text_ids, 20)
        assert g.n_frames == ex.grid.n_frames
        assert (g.bins == ex.grid.bins).mean() >= 0.95
