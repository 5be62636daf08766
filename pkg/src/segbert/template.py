"""Successive-DTW acoustic segment template and mask padding."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _kernels
from .features import TEMPLATE_MAGIC, Utterance, mel_from_bytes, mel_to_bytes, phone_segments
from .tensor import DimensionError


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DtwMapping:
    """Monotone alignment path of (source index, target index) pairs."""
    path: np.ndarray  # (P, 2) int
    source_len: int
    target_len: int

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in self.path]


def dtw_align(a: np.ndarray, b: np.ndarray,
              cost: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None) -> tuple[DtwMapping, float]:
    """Minimum-cost monotone path from (0, 0) to (len(a)-1, len(b)-1) under
    steps (1,0), (0,1), (1,1). Backtrace ties prefer the diagonal, then
    (1,0), then (0,1). ``cost`` maps (a, b) to the (len(a), len(b)) local cost
    matrix; squared Euclidean by default."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptyInputError("dtw_align needs two non-empty segments")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"bin mismatch: {a.shape[1]} vs {b.shape[1]}")
    C = (cost or _kernels.pairwise_sq_dist)(a, b)
    D = _kernels.dtw_accumulate(C)
    path = _kernels.dtw_backtrace(D)
    return DtwMapping(path, a.shape[0], b.shape[0]), float(D[-1, -1])


def warp_to(source: np.ndarray, target_len: int, mapping: DtwMapping) -> np.ndarray:
    """Each target frame becomes the mean of the source frames the path
    pairs it with."""
    source = np.asarray(source, dtype=np.float64)
    if mapping.target_len != target_len or mapping.source_len != source.shape[0]:
        raise DimensionError(
            f"mapping is {mapping.source_len}->{mapping.target_len}, "
            f"asked to warp {source.shape[0]}->{target_len}")
    out = np.zeros((target_len, source.shape[1]))
    counts = np.zeros(target_len)
    np.add.at(out, mapping.path[:, 1], source[mapping.path[:, 0]])
    np.add.at(counts, mapping.path[:, 1], 1.0)
    if np.any(counts == 0):
        raise DimensionError("mapping leaves a target frame without any source frame")
    return out / counts[:, None]


@dataclass(frozen=True, eq=False)
class AcousticTemplate:
    frames: np.ndarray  # (L, B)

    @property
    def L(self) -> int:
        return self.frames.shape[0]


PhoneSegmentSet = Mapping[str, Sequence[np.ndarray]]


def _phone_order(key: str):
    # numeric ids sort numerically, others lexically after them
    return (0, int(key), "") if key.lstrip("-").isdigit() else (1, 0, key)


def iter_segments(segs: PhoneSegmentSet) -> Iterable[np.ndarray]:
    for phone in sorted(segs, key=_phone_order):
        yield from segs[phone]


def build_template(segs: PhoneSegmentSet) -> AcousticTemplate:
    """Fold every phone segment into one running template. Each update maps
    the shorter operand onto the longer one and averages the two."""
    s: np.ndarray | None = None
    for seg in iter_segments(segs):
        seg = np.asarray(seg, dtype=np.float64)
        if seg.shape[0] == 0:
            raise EmptyInputError("phone segments must have at least one frame")
        if s is None:
            s = seg.copy()
            continue
        if seg.shape[0] >= s.shape[0]:
            mapping, _ = dtw_align(s, seg)
            s = 0.5 * (warp_to(s, seg.shape[0], mapping) + seg)
        else:
            mapping, _ = dtw_align(seg, s)
            s = 0.5 * (warp_to(seg, s.shape[0], mapping) + s)
    if s is None:
        raise EmptyInputError("no phone segments to build a template from")
    return AcousticTemplate(s)


def collect_segments(corpus: Iterable[Utterance]) -> dict[str, list[np.ndarray]]:
    out: dict[str, list[np.ndarray]] = defaultdict(list)
    for u in corpus:
        for phone_id, seg in phone_segments(u):
            out[phone_id].append(seg)
    return dict(out)


def pad_mask(t: AcousticTemplate, K: int) -> np.ndarray:
    """K frames of filler: a prefix of the template, repeated first when the
    gap is longer than the template."""
    if K < 1:
        raise ValueError("K must be >= 1")
    reps = -(-K // t.L)
    return np.tile(t.frames, (reps, 1))[:K].copy()


def write_template(path: str | Path, t: AcousticTemplate, frame_shift_ms: float = 12.5) -> None:
    Path(path).write_bytes(mel_to_bytes(t.frames, frame_shift_ms, magic=TEMPLATE_MAGIC))


def read_template(path: str | Path) -> AcousticTemplate:
    frames, _ = mel_from_bytes(Path(path).read_bytes(), magic=TEMPLATE_MAGIC)
    return AcousticTemplate(frames)
