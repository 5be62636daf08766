"""Central finite-difference checks of every layer kind and both model losses."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import nn
from .tensor import Tensor, bce_with_logits, mse, parameter

H = 1e-5
# Denominator floor: central differences carry ~eps*|loss|/h roundoff, so
# gradients that are exactly zero (e.g. key biases under softmax) are
# compared absolutely below this magnitude.
FLOOR = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)


def check(loss_fn: Callable[[], Tensor], params: list[Tensor], samples: int = 100,
          rng: np.random.Generator | None = None, h: float = H) -> float:
    """Max relative error between analytic and central-difference gradients
    over up to ``samples`` randomly chosen scalar entries of ``params``."""
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    slots = [(k, idx) for k, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if len(slots) > samples:
        slots = [slots[i] for i in rng.choice(len(slots), samples, replace=False)]
    worst = 0.0
    for k, idx in slots:
        p = params[k]
        old = p.data[idx]
        p.data[idx] = old + h
        up = float(loss_fn().data)
        p.data[idx] = old - h
        down = float(loss_fn().data)
        p.data[idx] = old
        num = (up - down) / (2 * h)
        worst = max(worst, float(relative_error(np.array(analytic[k][idx]), np.array(num))))
    return worst


def _layer_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    n, m, d = 5, 4, 8
    x = parameter(rng.normal(size=(n, d)))
    mem = parameter(rng.normal(size=(m, d)))
    w = rng.normal(size=(n, d))
    cases = {}

    lin = nn.Linear(d, 6, rng)
    lin.b.data = rng.normal(size=6)
    cases["linear"] = (lambda: (lin(x) * w[:, :6]).sum(), [x] + lin.parameters())

    ln = nn.LayerNorm(d)
    ln.gamma.data = rng.normal(size=d)
    ln.beta.data = rng.normal(size=d)
    cases["layer_norm"] = (lambda: (ln(x) * w).sum(), [x] + ln.parameters())

    ff = nn.FeedForward(d, 16, rng)
    cases["feed_forward"] = (lambda: (ff(x) * w).sum(), [x] + ff.parameters())

    att = nn.MultiHeadAttention(d, 2, rng)
    mask = np.tril(np.ones((n, n), dtype=bool))
    cases["self_attention_causal"] = (lambda: (att(x, x, mask) * w).sum(), [x] + att.parameters())
    xatt = nn.MultiHeadAttention(d, 2, rng)
    cases["cross_attention"] = (lambda: (xatt(x, mem) * w).sum(), [x, mem] + xatt.parameters())

    pe = nn.ScaledPositionalEncoding(d)
    cases["positional_encoding"] = (lambda: (pe(x) * w).sum(), [x] + pe.parameters())

    conv = nn.Conv1d(d, 3, 5, rng)
    conv.bias.data = rng.normal(size=3)
    cases["conv1d"] = (lambda: (conv(x) * w[:, :3]).sum(), [x] + conv.parameters())

    post = nn.Postnet(d, 6, 3, 3, rng)
    cases["postnet"] = (lambda: (post(x) * w).sum(), [x] + post.parameters())

    emb = nn.Embedding(7, d, rng)
    ids = np.array([1, 3, 3, 0, 6])
    cases["embedding"] = (lambda: (emb(ids) * w).sum(), emb.parameters())

    pre = nn.Prenet(d, 12, d, rng)
    cases["prenet"] = (lambda: (pre(x) * w).sum(), [x] + pre.parameters())

    enc = nn.EncoderLayer(d, 2, 16, rng)
    cases["encoder_layer"] = (lambda: (enc(x) * w).sum(), [x] + enc.parameters())
    dec = nn.DecoderLayer(d, 2, 16, rng)
    cases["decoder_layer"] = (lambda: (dec(x, mem, mask) * w).sum(), [x, mem] + dec.parameters())

    y = rng.normal(size=(n, d))
    cases["mse"] = (lambda: mse(x.tanh(), y), [x])
    logits = parameter(rng.normal(size=n))
    tgt = (rng.random(n) > 0.5).astype(float)
    cases["bce_with_logits"] = (lambda: bce_with_logits(logits, tgt), [logits])
    return cases


def _jitter_biases(model: nn.Module, rng: np.random.Generator) -> None:
    # zero biases plus the all-zero first decoder frame sit exactly on ReLU kinks
    for name, p in model.named_parameters():
        if name.endswith(".b") or name.endswith(".bias"):
            p.data = rng.normal(scale=0.3, size=p.shape)


def _model_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    from .speechbert import SpeechBertConfig, SpeechBertModel, bert_loss
    from .tts import TTSConfig, TransformerTTSModel, forward_teacher_forced, stop_targets, tts_loss

    B, V = 4, 6
    bcfg = SpeechBertConfig(vocab_size=V, n_mels=B, d_model=8, heads=2, d_ff=16,
                            enc_layers=1, speech_enc_layers=1, dec_layers=1)
    bert = SpeechBertModel(bcfg, seed=1)
    _jitter_biases(bert, rng)
    text = np.array([1, 4, 2])
    mel = rng.normal(size=(6, B))
    masked = mel.copy()
    masked[2:4] = 0.3
    cases = {"bert_loss": (lambda: bert_loss(bert.forward(text, masked)[0], mel), bert.parameters())}

    gt = rng.normal(size=(5, B))
    for dyn in (False, True):
        cfg = TTSConfig(vocab_size=V, n_mels=B, d_model=8, heads=2, d_ff=16, enc_layers=1, dec_layers=1,
                        T_S=2, d_E=8, dynamic_embedding=dyn, dyn_proj_dim=6, speaker_count=2, d_spk=3,
                        postnet_layers=2, postnet_channels=4, postnet_kernel=3)
        model = TransformerTTSModel(cfg, seed=2)
        _jitter_biases(model, rng)
        E_seq = [np.zeros((2, 8))] + [rng.normal(size=(2, 8)) for _ in range(2)] if dyn else None

        def loss(model=model, E_seq=E_seq):
            mel1, post, stop = forward_teacher_forced(model, text, 1, gt, E_seq)
            return tts_loss(mel1, post, stop, gt, stop_targets(5))
        cases[f"tts_loss_{'dynamic' if dyn else 'baseline'}"] = (loss, model.parameters())
    return cases


def run_all(seed: int = 0, samples: int = 100) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    results = {}
    for name, (fn, params) in {**_layer_cases(rng), **_model_cases(rng)}.items():
        results[name] = check(fn, params, samples=samples, rng=rng)
    return results
