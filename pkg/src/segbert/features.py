"""Log-mel extraction, alignment/mel file formats, and corpus loading."""
from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class TooShortError(ValueError):
    pass


class AlignmentError(ValueError):
    """Base class for alignment validation failures; ``index`` names the
    offending phone or syllable."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class PhoneOverlapError(AlignmentError):
    pass


class PhoneGapError(AlignmentError):
    pass


class EmptyPhoneError(AlignmentError):
    pass


class FrameRangeError(AlignmentError):
    pass


class SyllableRangeError(AlignmentError):
    pass


class FormatError(ValueError):
    pass


# -- types -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    frames: np.ndarray  # (T, B)
    frame_shift_ms: float = 12.5

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def B(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class Phone:
    phone_id: str
    start: int
    end: int


@dataclass(frozen=True)
class AlignmentRecord:
    phones: tuple[Phone, ...]
    syllables: tuple[tuple[int, int], ...] = ()

    @property
    def end_frame(self) -> int:
        return self.phones[-1].end if self.phones else 0


@dataclass(frozen=True, eq=False)
class Utterance:
    id: str
    phoneme_sequence: tuple[int, ...]
    mel: MelSpectrogram
    alignment: AlignmentRecord
    speaker_id: int = 0
    waveform: Waveform | None = field(default=None, compare=False)


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 80
    shift_ms: float = 12.5
    window_ms: float = 50.0
    fmin: float = 0.0
    fmax: float = 8000.0
    floor: float = 1e-10


# -- log mel -------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Center frequencies (Hz) of the triangular filters."""
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return pts[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """HTK-style unnormalized triangles, shape (n_mels, n_fft // 2 + 1)."""
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, c, hi = pts[m], pts[m + 1], pts[m + 2]
        rise = (freqs - lo) / (c - lo)
        fall = (hi - freqs) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(rise, fall))
    return fb


def frame_signal(x: np.ndarray, window: int, shift: int) -> np.ndarray:
    if len(x) < window:
        raise TooShortError(f"waveform of {len(x)} samples is shorter than one {window}-sample window")
    n = (len(x) - window) // shift + 1
    return np.lib.stride_tricks.sliding_window_view(x, window)[::shift][:n]


def compute_log_mel(w: Waveform, cfg: MelConfig = MelConfig()) -> MelSpectrogram:
    sr = w.sample_rate
    if cfg.window_ms < cfg.shift_ms:
        raise ValueError("window_ms must be >= shift_ms")
    if cfg.fmax > sr / 2:
        raise ValueError(f"fmax {cfg.fmax} exceeds Nyquist {sr / 2}")
    window = int(round(sr * cfg.window_ms / 1000.0))
    shift = int(round(sr * cfg.shift_ms / 1000.0))
    frames = frame_signal(np.asarray(w.samples, dtype=np.float64), window, shift)
    n_fft = 1 << (window - 1).bit_length()
    hann = np.hanning(window)
    power = np.abs(np.fft.rfft(frames * hann, n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(cfg.n_mels, n_fft, sr, cfg.fmin, cfg.fmax)
    mel = np.log(np.maximum(cfg.floor, power @ fb.T))
    return MelSpectrogram(mel, cfg.shift_ms)


# -- alignment text format ---------------------------------------------------------

def validate_alignment(a: AlignmentRecord, n_frames: int | None = None) -> AlignmentRecord:
    prev_end = None
    for k, p in enumerate(a.phones):
        if p.start < 0:
            raise FrameRangeError(f"phone {k} starts before frame 0", k)
        if p.end <= p.start:
            raise EmptyPhoneError(f"phone {k} has end {p.end} <= start {p.start}", k)
        if prev_end is not None:
            if p.start < prev_end:
                raise PhoneOverlapError(f"phone {k} starts at {p.start}, before previous end {prev_end}", k)
            if p.start > prev_end:
                raise PhoneGapError(f"gap before phone {k}: starts at {p.start}, previous ended {prev_end}", k)
        prev_end = p.end
    if n_frames is not None and a.phones and a.end_frame > n_frames:
        k = next(i for i, p in enumerate(a.phones) if p.end > n_frames)
        raise FrameRangeError(f"phone {k} ends at {a.phones[k].end}, beyond {n_frames} frames", k)
    last = -1
    for k, (first, final) in enumerate(a.syllables):
        if first > final:
            raise SyllableRangeError(f"syllable {k} range ({first},{final}) is reversed", k)
        if first <= last:
            raise SyllableRangeError(f"syllable {k} overlaps or precedes syllable {k - 1}", k)
        if first < 0 or final >= len(a.phones):
            raise SyllableRangeError(f"syllable {k} range ({first},{final}) outside {len(a.phones)} phones", k)
        last = final
    return a


def _int(tok: str, where: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise FormatError(f"{where}: {tok!r} is not an integer") from None


def parse_alignment(text: str, n_frames: int | None = None) -> AlignmentRecord:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    pos = 0

    def header(tag: str) -> int:
        nonlocal pos
        if pos >= len(lines):
            raise FormatError(f"missing {tag} header")
        parts = lines[pos].split()
        if len(parts) != 2 or parts[0] != tag:
            raise FormatError(f"line {pos + 1}: expected '{tag} <count>', got {lines[pos]!r}")
        pos += 1
        return _int(parts[1], f"line {pos}")

    n = header("PHONES")
    phones = []
    for k in range(n):
        parts = lines[pos].split() if pos < len(lines) else []
        if len(parts) != 3:
            raise FormatError(f"phone line {k}: expected 'phone_id start end'")
        phones.append(Phone(parts[0], _int(parts[1], f"phone line {k}"), _int(parts[2], f"phone line {k}")))
        pos += 1
    m = header("SYLLABLES")
    syllables = []
    for k in range(m):
        parts = lines[pos].split() if pos < len(lines) else []
        if len(parts) != 2:
            raise FormatError(f"syllable line {k}: expected 'first_idx last_idx'")
        syllables.append((_int(parts[0], f"syllable line {k}"), _int(parts[1], f"syllable line {k}")))
        pos += 1
    if pos != len(lines):
        raise FormatError(f"unexpected trailing content at line {pos + 1}")
    return validate_alignment(AlignmentRecord(tuple(phones), tuple(syllables)), n_frames)


def load_alignment(data: bytes | str, n_frames: int | None = None) -> AlignmentRecord:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return parse_alignment(data, n_frames)


def serialize_alignment(a: AlignmentRecord) -> str:
    out = [f"PHONES {len(a.phones)}"]
    out += [f"{p.phone_id} {p.start} {p.end}" for p in a.phones]
    out.append(f"SYLLABLES {len(a.syllables)}")
    out += [f"{f} {l}" for f, l in a.syllables]
    return "\n".join(out) + "\n"


# -- mel binary -------------------------------------------------------------------

MEL_MAGIC = b"SBML"
TEMPLATE_MAGIC = b"SBTP"
MEL_VERSION = 1
_MEL_HEADER = struct.Struct("<4sIIId")


def mel_to_bytes(frames: np.ndarray, frame_shift_ms: float, magic: bytes = MEL_MAGIC) -> bytes:
    frames = np.ascontiguousarray(frames, dtype="<f8")
    T, B = frames.shape
    return _MEL_HEADER.pack(magic, MEL_VERSION, T, B, frame_shift_ms) + frames.tobytes()


def mel_from_bytes(buf: bytes, magic: bytes = MEL_MAGIC) -> tuple[np.ndarray, float]:
    if len(buf) < _MEL_HEADER.size:
        raise FormatError("mel file shorter than its header")
    got, version, T, B, shift = _MEL_HEADER.unpack_from(buf)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != MEL_VERSION:
        raise FormatError(f"unsupported version {version}")
    if len(buf) != _MEL_HEADER.size + 8 * T * B:
        raise FormatError(f"payload length {len(buf) - _MEL_HEADER.size} != {8 * T * B}")
    arr = np.frombuffer(buf, dtype="<f8", offset=_MEL_HEADER.size).reshape(T, B).astype(np.float64)
    return arr, shift


def write_mel(path: str | Path, mel: MelSpectrogram) -> None:
    Path(path).write_bytes(mel_to_bytes(mel.frames, mel.frame_shift_ms))


def read_mel(path: str | Path) -> MelSpectrogram:
    frames, shift = mel_from_bytes(Path(path).read_bytes())
    return MelSpectrogram(frames, shift)


# -- text / corpus ------------------------------------------------------------------

def parse_text(text: str) -> tuple[int, tuple[int, ...]]:
    """``spk:<u32> tok tok ...`` -> (speaker_id, token ids)."""
    toks = text.split()
    if not toks or not toks[0].startswith("spk:"):
        raise FormatError("text file must start with 'spk:<id>'")
    speaker = int(toks[0][4:])
    ids = tuple(int(t) for t in toks[1:])
    if not ids:
        raise FormatError("empty phoneme sequence")
    if speaker < 0 or any(t < 0 for t in ids):
        raise FormatError("speaker and token ids must be non-negative")
    return speaker, ids


def format_text(speaker_id: int, tokens) -> str:
    return " ".join([f"spk:{speaker_id}"] + [str(int(t)) for t in tokens]) + "\n"


def read_wav(path: str | Path) -> Waveform:
    from scipy.io import wavfile
    sr, data = wavfile.read(path)
    data = np.asarray(data)
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data / float(np.iinfo(data.dtype).max)
    return Waveform(data.astype(np.float64), int(sr))


def load_utterance(directory: str | Path, utt_id: str) -> Utterance:
    d = Path(directory)
    mel = read_mel(d / f"{utt_id}.mel")
    speaker, tokens = parse_text((d / f"{utt_id}.txt").read_text(encoding="utf-8"))
    align = load_alignment((d / f"{utt_id}.align").read_bytes(), mel.T)
    if len(align.phones) != len(tokens):
        raise AlignmentError(f"{utt_id}: {len(align.phones)} aligned phones vs {len(tokens)} tokens")
    wav_path = d / f"{utt_id}.wav"
    wav = read_wav(wav_path) if wav_path.exists() else None
    return Utterance(utt_id, tokens, mel, align, speaker, wav)


def worker_count() -> int:
    env = os.environ.get("SEGBERT_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def load_corpus(directory: str | Path) -> list[Utterance]:
    """Load every ``<id>.mel`` in ``directory`` (sorted by id)."""
    d = Path(directory)
    ids = sorted(p.stem for p in d.glob("*.mel"))
    if not ids:
        raise FileNotFoundError(f"no .mel files in {d}")
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(lambda u: load_utterance(d, u), ids))


def save_utterance(directory: str | Path, u: Utterance) -> None:
    d = Path(directory)
    write_mel(d / f"{u.id}.mel", u.mel)
    (d / f"{u.id}.align").write_text(serialize_alignment(u.alignment), encoding="utf-8")
    (d / f"{u.id}.txt").write_text(format_text(u.speaker_id, u.phoneme_sequence), encoding="utf-8")


# -- segment views ----------------------------------------------------------------

def phone_segments(u: Utterance) -> list[tuple[str, np.ndarray]]:
    return [(p.phone_id, u.mel.frames[p.start:p.end]) for p in u.alignment.phones]


def syllable_spans(u: Utterance | AlignmentRecord) -> list[tuple[int, int]]:
    a = u.alignment if isinstance(u, Utterance) else u
    return [(a.phones[f].start, a.phones[l].end) for f, l in a.syllables]
