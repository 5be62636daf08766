"""Synthetic corpora with controllable prosody for desk-scale experiments.

Each phoneme owns a base spectral pattern; a scalar prosody contour is added
along a fixed spectral profile. In ``chained`` mode every T_S-frame segment's
contour level is a deterministic function of the previous segment's level.
``ambiguous-pair`` renders each text twice with mirror-image chained contours,
so the text alone cannot tell the renditions apart.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import AlignmentRecord, MelSpectrogram, Phone, Utterance, save_utterance

PROSODY_MODES = ("independent", "chained", "ambiguous-pair")


@dataclass(frozen=True)
class ToyCorpusSpec:
    utterance_count: int = 8
    vocab_size: int = 12
    syllables_per_utterance: int = 6
    phones_per_syllable: int = 2
    frames_per_syllable: tuple[int, int] = (8, 12)
    n_mels: int = 8
    prosody_mode: str = "independent"
    segment_frames: int = 20
    contour_scale: float = 1.0
    speaker_count: int = 1
    seed: int = 0

    def __post_init__(self):
        if min(self.utterance_count, self.vocab_size, self.syllables_per_utterance,
               self.phones_per_syllable, self.n_mels, self.segment_frames, self.speaker_count) < 1:
            raise ValueError("all counts must be >= 1")
        lo, hi = self.frames_per_syllable
        if lo < self.phones_per_syllable or hi < lo:
            raise ValueError("frames_per_syllable must be a range with lo >= phones_per_syllable")
        if self.prosody_mode not in PROSODY_MODES:
            raise ValueError(f"prosody_mode must be one of {PROSODY_MODES}")


def _chain(level: float) -> float:
    return -0.8 * level + 0.4 * np.sign(level)


def _contour(rng: np.random.Generator, T: int, spec: ToyCorpusSpec, start_level: float | None = None) -> np.ndarray:
    t = np.arange(T)
    if spec.prosody_mode == "independent":
        f = rng.uniform(0.5, 2.0, size=2) / T
        ph = rng.uniform(0, 2 * np.pi, size=2)
        return 0.6 * np.sin(2 * np.pi * f[0] * t + ph[0]) + 0.4 * np.sin(2 * np.pi * f[1] * t + ph[1])
    n_seg = -(-T // spec.segment_frames)
    levels = np.empty(n_seg)
    levels[0] = start_level if start_level is not None else rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.0)
    for k in range(1, n_seg):
        levels[k] = _chain(levels[k - 1])
    wiggle = 0.25 * np.sin(2 * np.pi * (t % spec.segment_frames) / spec.segment_frames)
    return levels[t // spec.segment_frames] * (1.0 + wiggle)


def generate_utterances(spec: ToyCorpusSpec) -> list[Utterance]:
    rng = np.random.default_rng(spec.seed)
    B = spec.n_mels
    base = rng.normal(0.0, 1.0, size=(spec.vocab_size, B))
    slope = rng.normal(0.0, 0.3, size=(spec.vocab_size, B))
    profile = np.linspace(1.0, -1.0, B) if B > 1 else np.ones(1)
    out: list[Utterance] = []
    for n in range(spec.utterance_count):
        tokens, phones, syllables = [], [], []
        frame = 0
        for _ in range(spec.syllables_per_utterance):
            lo, hi = spec.frames_per_syllable
            total = int(rng.integers(lo, hi + 1))
            cuts = np.sort(rng.choice(np.arange(1, total), size=spec.phones_per_syllable - 1, replace=False))
            lens = np.diff(np.concatenate(([0], cuts, [total])))
            first = len(phones)
            for length in lens:
                tok = int(rng.integers(spec.vocab_size))
                tokens.append(tok)
                phones.append(Phone(str(tok), frame, frame + int(length)))
                frame += int(length)
            syllables.append((first, len(phones) - 1))
        T = frame
        skeleton = np.zeros((T, B))
        for p in phones:
            L = p.end - p.start
            ramp = np.linspace(-0.5, 0.5, L)[:, None] if L > 1 else np.zeros((1, 1))
            tok = int(p.phone_id)
            skeleton[p.start:p.end] = base[tok] + ramp * slope[tok]
        align = AlignmentRecord(tuple(phones), tuple(syllables))
        speaker = int(rng.integers(spec.speaker_count))
        if spec.prosody_mode == "ambiguous-pair":
            level = rng.uniform(0.6, 1.0)
            for tag, sgn in (("a", 1.0), ("b", -1.0)):
                c = spec.contour_scale * _contour(rng, T, spec, start_level=sgn * level)
                mel = MelSpectrogram(skeleton + c[:, None] * profile)
                out.append(Utterance(f"utt{n:04d}{tag}", tuple(tokens), mel, align, speaker))
        else:
            c = spec.contour_scale * _contour(rng, T, spec)
            mel = MelSpectrogram(skeleton + c[:, None] * profile)
            out.append(Utterance(f"utt{n:04d}", tuple(tokens), mel, align, speaker))
    return out


def generate_toy_corpus(spec: ToyCorpusSpec, out_dir: str | Path) -> list[Utterance]:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    utts = generate_utterances(spec)
    for u in utts:
        save_utterance(d, u)
    return utts
