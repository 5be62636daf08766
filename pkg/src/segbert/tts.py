"""Transformer TTS with optional dynamic segment embeddings.

With ``dynamic_embedding`` on, every decoder input frame is paired with a
speech BERT embedding row taken from the previous T_S-frame segment. During
training the rows come from ground truth; at inference they are refreshed
from the model's own mel linear-1 outputs each time a segment completes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .features import Utterance
from .nn import (Adam, DecoderLayer, Embedding, EncoderLayer, LayerNorm, Linear, Module,
                 PoisonedGradientError, Postnet, Prenet, ScaledPositionalEncoding, causal_mask)
from .speechbert import SpeechBertModel, VocabularyError, extract_embedding
from .tensor import DimensionError, Tensor, _sigmoid, bce_with_logits, concat, mse


@dataclass
class TTSConfig:
    vocab_size: int = 32
    n_mels: int = 8
    d_model: int = 32
    heads: int = 2
    d_ff: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    T_S: int = 20
    d_E: int = 32
    dynamic_embedding: bool = False
    dyn_proj_dim: int = 80
    speaker_count: int = 1
    d_spk: int = 8
    postnet_layers: int = 2
    postnet_channels: int = 16
    postnet_kernel: int = 5
    prenet_dropout: float = 0.0
    stop_threshold: float = 0.5
    max_decode_frames: int = 600
    lr: float = 1e-3
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.T_S < 1:
            raise ValueError("T_S must be >= 1")
        if not 0.0 < self.stop_threshold < 1.0:
            raise ValueError("stop_threshold must lie in (0, 1)")
        if self.max_decode_frames < 1:
            raise ValueError("max_decode_frames must be >= 1")
        if not 0.0 <= self.prenet_dropout < 1.0:
            raise ValueError("prenet_dropout must lie in [0, 1)")


class TransformerTTSModel(Module):
    def __init__(self, cfg: TTSConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.cfg = cfg
        self.text_embed = Embedding(cfg.vocab_size, d, rng)
        self.text_pe = ScaledPositionalEncoding(d)
        self.enc_layers = [EncoderLayer(d, cfg.heads, cfg.d_ff, rng) for _ in range(cfg.enc_layers)]
        self.enc_norm = LayerNorm(d)
        self.speaker_table = Embedding(cfg.speaker_count, cfg.d_spk, rng)
        self.speaker_proj = Linear(d + cfg.d_spk, d, rng)
        self.dec_prenet = Prenet(cfg.n_mels, d, d, rng, cfg.prenet_dropout)
        if cfg.dynamic_embedding:
            self.projection1 = Linear(cfg.d_E, cfg.dyn_proj_dim, rng)
            self.projection2 = Linear(cfg.dyn_proj_dim + d, d, rng)
        self.dec_pe = ScaledPositionalEncoding(d)
        self.dec_layers = [DecoderLayer(d, cfg.heads, cfg.d_ff, rng) for _ in range(cfg.dec_layers)]
        self.dec_norm = LayerNorm(d)
        self.mel_linear = Linear(d, cfg.n_mels, rng)
        self.stop_head = Linear(d, 1, rng)
        self.postnet = Postnet(cfg.n_mels, cfg.postnet_channels, cfg.postnet_layers, cfg.postnet_kernel, rng)

    # -- pieces ----------------------------------------------------------------
    def encode_text(self, token_ids, speaker_id: int) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("empty token sequence")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise VocabularyError(f"token id outside vocabulary of {self.cfg.vocab_size}")
        if not 0 <= speaker_id < self.cfg.speaker_count:
            raise VocabularyError(f"speaker {speaker_id} outside 0..{self.cfg.speaker_count - 1}")
        x = self.text_pe(self.text_embed(ids))
        for layer in self.enc_layers:
            x = layer(x)
        x = self.enc_norm(x)
        spk = self.speaker_table([speaker_id] * len(ids))
        return self.speaker_proj(concat([x, spk], axis=-1))

    def prenet(self, mel_rows, rng: np.random.Generator | None = None) -> Tensor:
        mel_rows = mel_rows if isinstance(mel_rows, Tensor) else Tensor(np.atleast_2d(mel_rows))
        return self.dec_prenet(mel_rows, rng)

    def project_embedding(self, e_rows) -> Tensor:
        e_rows = e_rows if isinstance(e_rows, Tensor) else Tensor(np.atleast_2d(e_rows))
        return self.projection1(e_rows)

    def concat_dynamic(self, e_i, o_in: Tensor) -> Tensor:
        e_i = e_i if isinstance(e_i, Tensor) else Tensor(np.atleast_2d(e_i))
        if e_i.shape[-1] != self.cfg.d_E:
            raise DimensionError(f"embedding width {e_i.shape[-1]} != d_E={self.cfg.d_E}")
        if o_in.shape[-1] != self.cfg.d_model:
            raise DimensionError(f"prenet width {o_in.shape[-1]} != d_model={self.cfg.d_model}")
        return concat([self.project_embedding(e_i), o_in], axis=-1)

    def decode(self, inputs: Tensor, memory: Tensor) -> tuple[Tensor, Tensor]:
        """Decoder stack over the input prefix ``inputs`` (rows of I, or
        prenet outputs in the baseline). Returns mel linear-1 rows and stop
        logits."""
        x = self.projection2(inputs) if self.cfg.dynamic_embedding else inputs
        x = self.dec_pe(x)
        mask = causal_mask(x.shape[0])
        for layer in self.dec_layers:
            x = layer(x, memory, mask)
        x = self.dec_norm(x)
        return self.mel_linear(x), self.stop_head(x).reshape(x.shape[0])

    def refine(self, mel1: Tensor) -> Tensor:
        return mel1 + self.postnet(mel1)


def frame_embeddings(E_seq: Sequence[np.ndarray], T: int, T_S: int, d_E: int) -> np.ndarray:
    """Per-frame embedding rows: frame r uses row r % T_S of segment r // T_S."""
    need = -(-T // T_S)
    if len(E_seq) != need:
        raise DimensionError(f"{len(E_seq)} segment embeddings for {need} segments")
    rows = np.zeros((T, d_E))
    for k, E in enumerate(E_seq):
        lo, hi = k * T_S, min(T, (k + 1) * T_S)
        E = np.asarray(E)
        if E.shape[1] != d_E or E.shape[0] < hi - lo:
            raise DimensionError(f"segment {k} embedding has shape {E.shape}")
        rows[lo:hi] = E[: hi - lo]
    return rows


def embedding_cache(bert: SpeechBertModel, mel: np.ndarray, T_S: int) -> list[np.ndarray]:
    """Segment k's embedding is extracted from ground-truth segment k-1;
    segment 0 gets zeros."""
    mel = np.asarray(mel)
    n = -(-mel.shape[0] // T_S)
    out = [np.zeros((T_S, bert.cfg.d_E))]
    for k in range(1, n):
        out.append(extract_embedding(bert, mel[(k - 1) * T_S:k * T_S]))
    return out


def forward_teacher_forced(model: TransformerTTSModel, token_ids, speaker_id: int, gt_mel,
                           E_seq: Sequence[np.ndarray] | None = None,
                           rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor, Tensor]:
    cfg = model.cfg
    gt = np.asarray(getattr(gt_mel, "frames", gt_mel), dtype=np.float64)
    T = gt.shape[0]
    memory = model.encode_text(token_ids, speaker_id)
    shifted = np.vstack([np.zeros((1, cfg.n_mels)), gt[:-1]])
    o_in = model.prenet(shifted, rng)
    if cfg.dynamic_embedding:
        if E_seq is None:
            raise DimensionError("dynamic model needs per-segment embeddings")
        rows = frame_embeddings(E_seq, T, cfg.T_S, cfg.d_E)
        inputs = model.concat_dynamic(rows, o_in)
    else:
        inputs = o_in
    mel1, stop = model.decode(inputs, memory)
    return mel1, model.refine(mel1), stop


def stop_targets(T: int) -> np.ndarray:
    y = np.zeros(T)
    y[-1] = 1.0
    return y


def tts_loss(mel1: Tensor, mel_post: Tensor, stop_logits: Tensor, gt_mel, gt_stop) -> Tensor:
    gt = np.asarray(getattr(gt_mel, "frames", gt_mel), dtype=np.float64)
    return mse(mel1, gt) + mse(mel_post, gt) + bce_with_logits(stop_logits, np.asarray(gt_stop, dtype=np.float64))


# -- autoregressive inference ---------------------------------------------------

@dataclass
class RefreshEvent:
    t: int
    inputs: np.ndarray  # the Q frames fed to the speech encoder


@dataclass
class InferenceState:
    T_S: int
    d_E: int
    d_f: int
    t: int = 0
    i: int = 0
    O: list = field(default_factory=list)
    Q: list = field(default_factory=list)
    I: list = field(default_factory=list)
    E: np.ndarray | None = None
    refreshes: list[RefreshEvent] = field(default_factory=list)
    embedding_source: list[int] = field(default_factory=list)  # per step: refresh count when used
    embedding_rows: list[np.ndarray] = field(default_factory=list)
    truncated: bool = False

    def __post_init__(self):
        if self.E is None:
            self.E = np.zeros((self.T_S, self.d_E))
        if not self.O:
            self.O.append(np.zeros(self.d_f))


def autoregressive_decode(prenet_fn: Callable[[np.ndarray], np.ndarray],
                          decode_fn: Callable[[np.ndarray], tuple[np.ndarray, float]],
                          T_S: int, d_E: int, d_f: int, stop_threshold: float, max_frames: int,
                          embed_fn: Callable[[np.ndarray], np.ndarray] | None = None,
                          encoder_fn: Callable[[np.ndarray], np.ndarray] | None = None) -> InferenceState:
    """Greedy decoding loop with segment-wise embedding refresh.

    ``prenet_fn`` maps o_t to o_in; ``embed_fn`` maps an embedding row e_i to
    e_in (None disables the dynamic path); ``decode_fn`` maps the stacked
    input prefix I to (o_{t+1}, stop logit); ``encoder_fn`` maps the stacked
    segment buffer Q to a fresh (T_S, d_E) embedding matrix.
    """
    dynamic = embed_fn is not None
    if dynamic and encoder_fn is None:
        raise ValueError("dynamic decoding needs an encoder_fn")
    st = InferenceState(T_S, d_E, d_f)
    while True:
        o_in = np.asarray(prenet_fn(st.O[st.t])).reshape(-1)
        if dynamic:
            e_row = st.E[st.i]
            st.embedding_rows.append(e_row.copy())
            st.embedding_source.append(len(st.refreshes))
            row = np.concatenate([np.asarray(embed_fn(e_row)).reshape(-1), o_in])
        else:
            row = o_in
        st.I.append(row)
        o_next, stop_logit = decode_fn(np.stack(st.I))
        o_next = np.asarray(o_next, dtype=np.float64).reshape(-1)
        st.O.append(o_next)
        st.Q.append(o_next)
        st.i += 1
        st.t += 1
        if float(_sigmoid(np.array([float(stop_logit)]))[0]) > stop_threshold:
            break
        if st.t >= max_frames:
            st.truncated = True
            break
        if st.i % T_S == 0:
            if dynamic:
                Q = np.stack(st.Q)
                st.E = np.asarray(encoder_fn(Q))
                st.refreshes.append(RefreshEvent(st.t, Q))
            st.Q = []
            st.i = 0
    return st


@dataclass
class SynthesisResult:
    mel: np.ndarray  # postnet-refined, (t_final, B)
    mel_linear1: np.ndarray
    state: InferenceState

    @property
    def truncated(self) -> bool:
        return self.state.truncated


def synthesize(model: TransformerTTSModel, bert: SpeechBertModel | None, token_ids, speaker_id: int = 0,
               max_decode_frames: int | None = None) -> SynthesisResult:
    cfg = model.cfg
    if cfg.dynamic_embedding and bert is None:
        raise ValueError("dynamic-embedding model needs a speech BERT")
    memory = model.encode_text(token_ids, speaker_id)
    if cfg.dynamic_embedding and bert.cfg.d_E != cfg.d_E:
        raise DimensionError(f"BERT d_E={bert.cfg.d_E} != TTS d_E={cfg.d_E}")

    def decode_fn(I: np.ndarray):
        mel1, stop = model.decode(Tensor(I), memory)
        return mel1.data[-1], stop.data[-1]

    state = autoregressive_decode(
        prenet_fn=lambda o: model.prenet(o).data,
        decode_fn=decode_fn,
        T_S=cfg.T_S, d_E=cfg.d_E, d_f=cfg.n_mels,
        stop_threshold=cfg.stop_threshold,
        max_frames=max_decode_frames or cfg.max_decode_frames,
        embed_fn=(lambda e: model.project_embedding(e).data) if cfg.dynamic_embedding else None,
        encoder_fn=(lambda Q: extract_embedding(bert, Q)) if cfg.dynamic_embedding else None,
    )
    O = np.stack(state.O[1:])
    return SynthesisResult(model.refine(Tensor(O)).data, O, state)


# -- training -------------------------------------------------------------------

@dataclass
class TTSTrainResult:
    model: TransformerTTSModel
    losses: list[float] = field(default_factory=list)


def precompute_embeddings(corpus: Sequence[Utterance], bert: SpeechBertModel | None,
                          cfg: TTSConfig) -> list[list[np.ndarray] | None]:
    if not cfg.dynamic_embedding:
        return [None] * len(corpus)
    if bert is None:
        raise ValueError("dynamic-embedding training needs a frozen speech BERT")
    return [embedding_cache(bert, u.mel.frames, cfg.T_S) for u in corpus]


def utterance_loss(model: TransformerTTSModel, u: Utterance, E_seq, rng=None) -> Tensor:
    mel1, post, stop = forward_teacher_forced(model, u.phoneme_sequence, u.speaker_id, u.mel.frames, E_seq, rng)
    return tts_loss(mel1, post, stop, u.mel.frames, stop_targets(u.mel.T))


def train_tts(corpus: Sequence[Utterance], bert: SpeechBertModel | None, cfg: TTSConfig,
              steps: int, seed: int = 0,
              callback: Callable[[int, float], None] | None = None) -> TTSTrainResult:
    if not corpus:
        raise ValueError("empty corpus")
    cache = precompute_embeddings(corpus, bert, cfg)
    model = TransformerTTSModel(cfg, seed)
    opt = Adam(model.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    losses: list[float] = []
    for step in range(steps):
        rng = np.random.default_rng([seed, step])
        k = int(rng.integers(len(corpus)))
        model.zero_grad()
        loss = utterance_loss(model, corpus[k], cache[k], rng if cfg.prenet_dropout > 0 else None)
        value = float(loss.data)
        if not np.isfinite(value):
            raise PoisonedGradientError(f"loss became {value} at step {step}")
        loss.backward()
        opt.step()
        losses.append(value)
        if callback is not None:
            callback(step, value)
    return TTSTrainResult(model, losses)


def evaluate_tts(model: TransformerTTSModel, corpus: Sequence[Utterance], bert: SpeechBertModel | None,
                 seed: int = 0, mel_only: bool = False) -> float:
    """Mean teacher-forced loss over the corpus (prenet dropout, if
    configured, uses a fixed seeded stream)."""
    cache = precompute_embeddings(corpus, bert, model.cfg)
    total = 0.0
    for k, u in enumerate(corpus):
        rng = np.random.default_rng([seed, 10**6 + k]) if model.cfg.prenet_dropout > 0 else None
        if mel_only:
            mel1, _, _ = forward_teacher_forced(model, u.phoneme_sequence, u.speaker_id, u.mel.frames, cache[k], rng)
            total += float(mse(mel1, u.mel.frames).data)
        else:
            total += float(utterance_loss(model, u, cache[k], rng).data)
    return total / len(corpus)
