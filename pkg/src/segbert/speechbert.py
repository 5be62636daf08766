"""Speech BERT: reconstruct syllable-masked mel-spectrograms from text and
acoustic context; its speech encoder states serve as segment embeddings."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .features import AlignmentRecord, Utterance, syllable_spans
from .nn import (EncoderLayer, DecoderLayer, Embedding, LayerNorm, Linear, Module, Adam,
                 Prenet, PoisonedGradientError, ScaledPositionalEncoding)
from .template import AcousticTemplate, pad_mask
from .tensor import DimensionError, Tensor, mse


@dataclass
class SpeechBertConfig:
    vocab_size: int = 32
    n_mels: int = 8
    d_model: int = 32
    heads: int = 2
    d_ff: int = 64
    enc_layers: int = 2
    speech_enc_layers: int = 2
    dec_layers: int = 2
    mask_rate: float = 0.2
    max_frames: int = 1000
    masked_only_loss: bool = False
    exact_mask_count: bool = False
    lr: float = 1e-3
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask_rate must lie in [0, 1]")
        if min(self.vocab_size, self.n_mels, self.enc_layers, self.speech_enc_layers, self.dec_layers) < 1:
            raise ValueError("sizes must be >= 1")

    @property
    def d_E(self) -> int:
        return self.d_model


@dataclass(frozen=True)
class MaskPlan:
    spans: tuple[tuple[int, int], ...]
    seed: int | None = None


class SpeechBertModel(Module):
    def __init__(self, cfg: SpeechBertConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.cfg = cfg
        self.text_embed = Embedding(cfg.vocab_size, d, rng)
        self.text_pe = ScaledPositionalEncoding(d)
        self.text_layers = [EncoderLayer(d, cfg.heads, cfg.d_ff, rng) for _ in range(cfg.enc_layers)]
        self.text_norm = LayerNorm(d)
        self.speech_prenet = Prenet(cfg.n_mels, d, d, rng)
        self.speech_pe = ScaledPositionalEncoding(d)
        self.speech_layers = [EncoderLayer(d, cfg.heads, cfg.d_ff, rng) for _ in range(cfg.speech_enc_layers)]
        self.speech_norm = LayerNorm(d)
        self.dec_layers = [DecoderLayer(d, cfg.heads, cfg.d_ff, rng) for _ in range(cfg.dec_layers)]
        self.dec_norm = LayerNorm(d)
        self.mel_head = Linear(d, cfg.n_mels, rng)

    def encode_text(self, token_ids) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise VocabularyError(f"token id outside vocabulary of {self.cfg.vocab_size}")
        x = self.text_pe(self.text_embed(ids))
        for layer in self.text_layers:
            x = layer(x)
        return self.text_norm(x)

    def encode_speech(self, mel) -> Tensor:
        mel = mel if isinstance(mel, Tensor) else Tensor(np.asarray(mel, dtype=np.float64))
        if mel.shape[-1] != self.cfg.n_mels:
            raise DimensionError(f"expected {self.cfg.n_mels} mel bins, got {mel.shape[-1]}")
        x = self.speech_pe(self.speech_prenet(mel))
        for layer in self.speech_layers:
            x = layer(x)
        return self.speech_norm(x)

    def forward(self, token_ids, masked_mel) -> tuple[Tensor, Tensor]:
        T = np.shape(masked_mel.data if isinstance(masked_mel, Tensor) else masked_mel)[0]
        if T > self.cfg.max_frames:
            raise ValueError(f"{T} frames exceeds max_frames={self.cfg.max_frames}")
        memory = self.encode_text(token_ids)
        states = self.encode_speech(masked_mel)
        x = states
        for layer in self.dec_layers:
            x = layer(x, memory)  # no self-attention mask: bidirectional
        return self.mel_head(self.dec_norm(x)), states


class VocabularyError(IndexError):
    pass


def bert_forward(model: SpeechBertModel, text_ids, masked_mel) -> tuple[Tensor, Tensor]:
    return model.forward(text_ids, masked_mel)


def bert_loss(recon: Tensor, ground_truth, mask_rows: np.ndarray | None = None) -> Tensor:
    """Mean squared reconstruction error over all T x B elements, or only
    over the rows selected by ``mask_rows`` when given."""
    gt = np.asarray(ground_truth.data if isinstance(ground_truth, Tensor) else ground_truth)
    if recon.shape != gt.shape:
        raise DimensionError(f"recon {recon.shape} vs ground truth {gt.shape}")
    if mask_rows is None:
        return mse(recon, gt)
    rows = np.flatnonzero(mask_rows)
    if rows.size == 0:
        return mse(recon, gt) * 0.0
    return mse(recon[rows], gt[rows])


def plan_masks(a: AlignmentRecord | Utterance, rate: float, seed: int | np.random.Generator,
               exact_count: bool = False) -> MaskPlan:
    """Pick syllables to mask: each independently with probability ``rate``,
    or exactly round(rate * n) of them when ``exact_count``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    spans = syllable_spans(a)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if exact_count:
        k = int(round(rate * len(spans)))
        chosen = np.sort(rng.permutation(len(spans))[:k])
    else:
        chosen = np.flatnonzero(rng.random(len(spans)) < rate)
    return MaskPlan(tuple(spans[c] for c in chosen), None if isinstance(seed, np.random.Generator) else int(seed))


def apply_masks(mel: np.ndarray, plan: MaskPlan, t: AcousticTemplate) -> np.ndarray:
    frames = np.asarray(getattr(mel, "frames", mel), dtype=np.float64)
    out = frames.copy()
    for s, e in plan.spans:
        if s < 0 or e > frames.shape[0] or e <= s:
            raise IndexError(f"mask span ({s},{e}) outside 0..{frames.shape[0]}")
        out[s:e] = pad_mask(t, e - s)
    return out


def mask_rows(n_frames: int, plan: MaskPlan) -> np.ndarray:
    rows = np.zeros(n_frames, dtype=bool)
    for s, e in plan.spans:
        rows[s:e] = True
    return rows


def extract_embedding(model: SpeechBertModel, mel_segment) -> np.ndarray:
    """Speech-encoder top-layer states for one segment fed on its own;
    one row per input frame."""
    seg = np.atleast_2d(np.asarray(getattr(mel_segment, "frames", mel_segment), dtype=np.float64))
    if seg.shape[0] == 0:
        raise ValueError("cannot embed an empty segment")
    return model.encode_speech(seg).data.copy()


@dataclass
class TrainResult:
    model: Module
    losses: list[float] = field(default_factory=list)


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def train_bert(corpus: Sequence[Utterance], template: AcousticTemplate, cfg: SpeechBertConfig,
               steps: int, seed: int = 0,
               callback: Callable[[int, float], None] | None = None) -> TrainResult:
    if not corpus:
        raise ValueError("empty corpus")
    model = SpeechBertModel(cfg, seed)
    opt = Adam(model.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    losses: list[float] = []
    for step in range(steps):
        rng = _step_rng(seed, step)
        u = corpus[int(rng.integers(len(corpus)))]
        plan = plan_masks(u.alignment, cfg.mask_rate, rng, cfg.exact_mask_count)
        masked = apply_masks(u.mel.frames, plan, template)
        model.zero_grad()
        recon, _ = model.forward(u.phoneme_sequence, masked)
        rows = mask_rows(u.mel.T, plan) if cfg.masked_only_loss else None
        loss = bert_loss(recon, u.mel.frames, rows)
        value = float(loss.data)
        if not np.isfinite(value):
            raise PoisonedGradientError(f"loss became {value} at step {step}")
        loss.backward()
        opt.step()
        losses.append(value)
        if callback is not None:
            callback(step, value)
    return TrainResult(model, losses)


def evaluate_bert(model: SpeechBertModel, corpus: Sequence[Utterance], template: AcousticTemplate,
                  rate: float, seed: int = 0) -> float:
    """Mean reconstruction loss over the corpus with fixed, seeded masks."""
    total = 0.0
    for k, u in enumerate(corpus):
        plan = plan_masks(u.alignment, rate, _step_rng(seed, k))
        recon, _ = model.forward(u.phoneme_sequence, apply_masks(u.mel.frames, plan, template))
        total += float(bert_loss(recon, u.mel.frames).data)
    return total / len(corpus)
