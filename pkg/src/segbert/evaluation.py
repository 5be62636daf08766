"""Objective prosody comparison: F0, per-phone energy and duration, scored
by Pearson correlation and mean squared error."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .features import AlignmentRecord, Utterance, Waveform, frame_signal
from .template import DtwMapping, dtw_align

FACTORS = ("f0", "energy", "duration")


class UndefinedCorrelationError(ValueError):
    pass


def estimate_f0(w: Waveform, frame_shift_ms: float = 12.5, fmin: float = 60.0, fmax: float = 400.0,
                window_ms: float = 40.0, voicing_threshold: float = 0.3) -> np.ndarray:
    """Per-frame F0 in Hz (0 = unvoiced) from the normalized autocorrelation
    peak inside the lag band [sr/fmax, sr/fmin].

    The shortest-lag local peak within 10% of the band maximum is taken, which
    avoids picking period multiples on strongly periodic input; the lag is
    refined by parabolic interpolation.
    """
    sr = w.sample_rate
    window = int(round(sr * window_ms / 1000.0))
    shift = int(round(sr * frame_shift_ms / 1000.0))
    lo, hi = int(np.floor(sr / fmax)), int(np.ceil(sr / fmin))
    frames = frame_signal(np.asarray(w.samples, dtype=np.float64), window, shift)
    frames = frames - frames.mean(axis=1, keepdims=True)
    r = _kernels.nccf(frames, lo, hi)
    f0 = np.zeros(len(frames))
    for k, row in enumerate(r):
        peak = row.max()
        if peak < voicing_threshold:
            continue
        c = next(c for c in range(len(row)) if row[c] >= 0.9 * peak
                 and (c == 0 or row[c] >= row[c - 1]) and (c == len(row) - 1 or row[c] >= row[c + 1]))
        lag = float(lo + c)
        if 0 < c < len(row) - 1:
            a, b, d = row[c - 1], row[c], row[c + 1]
            den = a - 2 * b + d
            if den < 0:
                lag += 0.5 * (a - d) / den
        f0[k] = sr / lag
    return f0


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt((da * da).sum()), np.sqrt((db * db).sum())
    if sa == 0 or sb == 0:
        raise UndefinedCorrelationError("correlation is undefined for a zero-variance input")
    return float(np.clip((da * db).sum() / (sa * sb), -1.0, 1.0))


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).mean())


def frame_log_energy(mel: np.ndarray) -> np.ndarray:
    """log of summed linear energy per frame (log-sum-exp over mel bins)."""
    m = mel.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(mel - m).sum(axis=1, keepdims=True)))[:, 0]


def phone_energy(mel, a: AlignmentRecord) -> np.ndarray:
    frames = np.asarray(getattr(mel, "frames", mel), dtype=np.float64)
    e = frame_log_energy(frames)
    return np.array([e[p.start:p.end].mean() for p in a.phones])


def phone_durations(a: AlignmentRecord) -> np.ndarray:
    return np.array([p.end - p.start for p in a.phones], dtype=np.float64)


def align_tracks(ref, hyp) -> DtwMapping:
    ref = np.asarray(getattr(ref, "frames", ref), dtype=np.float64)
    hyp = np.asarray(getattr(hyp, "frames", hyp), dtype=np.float64)
    return dtw_align(ref, hyp)[0]


@dataclass
class FactorMetrics:
    correlation: float | None
    mse: float | None
    count: int
    flags: list[str] = field(default_factory=list)


@dataclass
class MetricsReport:
    factors: dict[str, FactorMetrics]
    utterances: int

    def cells(self) -> dict[tuple[str, str], float | None]:
        return {(f, m): getattr(self.factors[f], m) for f in FACTORS for m in ("correlation", "mse")}


@dataclass
class ComparisonPair:
    ref: Utterance
    hyp_mel: np.ndarray
    hyp_alignment: AlignmentRecord | None = None
    hyp_waveform: Waveform | None = None
    ref_waveform: Waveform | None = None


def _score(pieces: list[tuple[np.ndarray, np.ndarray]], pooling: str, flags: list[str]) -> FactorMetrics:
    pieces = [(r, h) for r, h in pieces if len(r)]
    if not pieces:
        return FactorMetrics(None, None, 0, flags + ["empty"])
    count = sum(len(r) for r, _ in pieces)
    try:
        if pooling == "per_utt":
            corr = float(np.mean([pearson(r, h) for r, h in pieces]))
            err = float(np.mean([mse(r, h) for r, h in pieces]))
        else:
            ref = np.concatenate([r for r, _ in pieces])
            hyp = np.concatenate([h for _, h in pieces])
            corr, err = pearson(ref, hyp), mse(ref, hyp)
    except UndefinedCorrelationError:
        ref = np.concatenate([r for r, _ in pieces])
        hyp = np.concatenate([h for _, h in pieces])
        return FactorMetrics(None, mse(ref, hyp), count, flags + ["undefined-correlation"])
    return FactorMetrics(corr, err, count, flags)


def f0_pairs(ref_mel: np.ndarray, hyp_mel: np.ndarray, ref_f0: np.ndarray, hyp_f0: np.ndarray):
    """F0 values on DTW-paired frames where both sides are voiced."""
    path = align_tracks(ref_mel, hyp_mel).path
    keep = (path[:, 0] < len(ref_f0)) & (path[:, 1] < len(hyp_f0))
    path = path[keep]
    r, h = ref_f0[path[:, 0]], hyp_f0[path[:, 1]]
    voiced = (r > 0) & (h > 0)
    return r[voiced], h[voiced]


def compare(pairs: Sequence[ComparisonPair], pooling: str = "concat",
            frame_shift_ms: float = 12.5) -> MetricsReport:
    if not pairs:
        raise ValueError("compare needs at least one pair")
    if pooling not in ("concat", "per_utt"):
        raise ValueError("pooling must be 'concat' or 'per_utt'")
    f0, energy, dur = [], [], []
    f0_flags, e_flags, d_flags = {"units:Hz^2"}, set(), set()
    for p in pairs:
        ref_mel = p.ref.mel.frames
        hyp_mel = np.asarray(getattr(p.hyp_mel, "frames", p.hyp_mel), dtype=np.float64)
        ref_wav = p.ref_waveform or p.ref.waveform
        if ref_wav is not None and p.hyp_waveform is not None:
            f0.append(f0_pairs(ref_mel, hyp_mel, estimate_f0(ref_wav, frame_shift_ms),
                               estimate_f0(p.hyp_waveform, frame_shift_ms)))
        else:
            f0_flags.add("skipped:no-waveform")
        ref_e = phone_energy(ref_mel, p.ref.alignment)
        if p.hyp_alignment is not None:
            energy.append((ref_e, phone_energy(hyp_mel, p.hyp_alignment)))
        elif hyp_mel.shape[0] == ref_mel.shape[0]:
            energy.append((ref_e, phone_energy(hyp_mel, p.ref.alignment)))
            e_flags.add("ref-alignment-reused")
        else:
            e_flags.add("skipped:no-hyp-alignment")
        if p.hyp_alignment is not None:
            dur.append((phone_durations(p.ref.alignment), phone_durations(p.hyp_alignment)))
        else:
            d_flags.add("skipped:no-hyp-alignment")
    return MetricsReport({
        "f0": _score(f0, pooling, sorted(f0_flags)),
        "energy": _score(energy, pooling, sorted(e_flags)),
        "duration": _score(dur, pooling, sorted(d_flags)),
    }, len(pairs))


def write_report(path: str | Path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["factor", "correlation", "mse", "count", "flags"])
        for name in FACTORS:
            m = report.factors[name]
            w.writerow([name,
                        "" if m.correlation is None else repr(m.correlation),
                        "" if m.mse is None else repr(m.mse),
                        m.count, ";".join(m.flags)])


def read_report(path: str | Path) -> dict[str, dict[str, str]]:
    with open(path, newline="") as fh:
        return {row["factor"]: row for row in csv.DictReader(fh)}


def write_contour(path: str | Path, ref_f0: np.ndarray, hyp_f0: np.ndarray, frame_shift_ms: float = 12.5) -> None:
    n = max(len(ref_f0), len(hyp_f0))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "ref_f0", "hyp_f0"])
        for k in range(n):
            w.writerow([k * frame_shift_ms / 1000.0,
                        ref_f0[k] if k < len(ref_f0) else "",
                        hyp_f0[k] if k < len(hyp_f0) else ""])
