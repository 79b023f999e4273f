"""Diarization error rate and speaker-counting evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .assignment import optimal_permutation

TIME_GRID = 1e-9


@dataclass(frozen=True)
class Segment:
    speaker: str
    start: float
    duration: float

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass
class SegmentList:
    recording_id: str
    entries: list[Segment] = field(default_factory=list)

    def speakers(self) -> list[str]:
        return sorted({s.speaker for s in self.entries})

    def merged(self) -> dict[str, list[tuple[float, float]]]:
        """Per-speaker union of intervals, boundaries snapped to a 1 ns grid."""
        by_spk: dict[str, list[tuple[float, float]]] = {}
        for s in self.entries:
            a, b = _snap(s.start), _snap(s.end)
            if b > a:
                by_spk.setdefault(s.speaker, []).append((a, b))
        out = {}
        for spk in sorted(by_spk):
            runs = []
            for a, b in sorted(by_spk[spk]):
                if runs and a <= runs[-1][1]:
                    runs[-1] = (runs[-1][0], max(runs[-1][1], b))
                else:
                    runs.append((a, b))
            out[spk] = runs
        return out


def _snap(t: float) -> float:
    return round(float(t) / TIME_GRID) * TIME_GRID if abs(t) < 1e6 else float(t)


@dataclass(frozen=True)
class DerBreakdown:
    miss: float
    false_alarm: float
    confusion: float
    scored_speech: float
    degenerate: bool = False

    @property
    def error(self) -> float:
        return self.miss + self.false_alarm + self.confusion

    @property
    def der(self) -> float:
        return self.error / self.scored_speech if self.scored_speech > 0 else 0.0

    def __add__(self, other: DerBreakdown) -> DerBreakdown:
        scored = self.scored_speech + other.scored_speech
        return DerBreakdown(self.miss + other.miss, self.false_alarm + other.false_alarm,
                            self.confusion + other.confusion, scored, scored <= 0)


def _overlap(a: list[tuple[float, float]], b: list[tuple[float, float]]) -> float:
    total, i, j = 0.0, 0, 0
    while i < len(a) and j < len(b):
        lo, hi = max(a[i][0], b[j][0]), min(a[i][1], b[j][1])
        if hi > lo:
            total += hi - lo
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return total


def _assign_max(weights: np.ndarray) -> list[tuple[int, int]]:
    """Maximum-weight one-to-one pairing on a rectangular matrix."""
    nr, nh = weights.shape
    n = max(nr, nh)
    if n == 0:
        return []
    square = np.zeros((n, n))
    square[:nr, :nh] = weights
    perm = optimal_permutation(-square).perm
    return [(i, j) for i, j in enumerate(perm) if i < nr and j < nh]


def map_speakers(ref: SegmentList, hyp: SegmentList) -> dict[str, str]:
    """One-to-one ref -> hyp label mapping maximizing total overlap.

    Pairs with zero overlap are left out; such labels map to nothing.
    """
    r, h = ref.merged(), hyp.merged()
    rk, hk = list(r), list(h)
    w = np.array([[_overlap(r[a], h[b]) for b in hk] for a in rk]).reshape(len(rk), len(hk))
    return {rk[i]: hk[j] for i, j in _assign_max(w) if w[i, j] > 0}


def _active(runs: list[tuple[float, float]], t: np.ndarray) -> np.ndarray:
    mask = np.zeros(t.shape, dtype=bool)
    for a, b in runs:
        mask |= (t >= a) & (t < b)
    return mask


def der(ref: SegmentList, hyp: SegmentList, collar: float = 0.25,
        score_overlap: bool = True) -> DerBreakdown:
    """Diarization error with a no-score collar around reference boundaries.

    With ``score_overlap`` False, regions where the reference has two or more
    speakers are skipped.
    """
    if collar < 0:
        raise ValueError("collar must be non-negative")
    r, h = ref.merged(), hyp.merged()
    mapping = map_speakers(ref, hyp)
    ref_edges = sorted({t for runs in r.values() for ab in runs for t in ab})
    points = set(ref_edges)
    points.update(t for runs in h.values() for ab in runs for t in ab)
    if collar > 0:
        for t in ref_edges:
            points.add(_snap(t - collar))
            points.add(_snap(t + collar))
    pts = np.array(sorted(points))
    if len(pts) < 2:
        return DerBreakdown(0.0, 0.0, 0.0, 0.0, True)
    lo, hi = pts[:-1], pts[1:]
    length = hi - lo
    mid = 0.5 * (lo + hi)
    scored = length > 0
    if collar > 0 and ref_edges:
        edges = np.array(ref_edges)
        near = np.abs(mid[:, None] - edges[None, :]).min(axis=1) < collar
        scored &= ~near
    ref_act = {k: _active(v, mid) for k, v in r.items()}
    hyp_act = {k: _active(v, mid) for k, v in h.items()}
    n_ref = sum(ref_act.values(), np.zeros(mid.shape, dtype=int))
    n_hyp = sum(hyp_act.values(), np.zeros(mid.shape, dtype=int))
    n_ok = np.zeros(mid.shape, dtype=int)
    for rs, hs in mapping.items():
        n_ok += ref_act[rs] & hyp_act[hs]
    if not score_overlap:
        scored &= n_ref < 2
    L = np.where(scored, length, 0.0)
    miss = float(np.sum(np.maximum(0, n_ref - n_hyp) * L))
    fa = float(np.sum(np.maximum(0, n_hyp - n_ref) * L))
    conf = float(np.sum((np.minimum(n_ref, n_hyp) - n_ok) * L))
    speech = float(np.sum(n_ref * L))
    return DerBreakdown(miss, fa, conf, speech, speech <= 0)


def frame_der(ref: np.ndarray, hyp: np.ndarray, frame_shift: float = 1.0) -> DerBreakdown:
    """Frame-level DER between binary activity matrices (no collar).

    Rows may differ in number; speakers are paired by maximum co-activity.
    """
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, np.shape(ref)[-1])
    hyp = np.asarray(hyp, dtype=np.float64).reshape(-1, ref.shape[1])
    pairs = _assign_max(ref @ hyp.T)
    n_ref, n_hyp = ref.sum(axis=0), hyp.sum(axis=0)
    n_ok = np.zeros(ref.shape[1])
    for i, j in pairs:
        n_ok += ref[i] * hyp[j]
    miss = np.maximum(0, n_ref - n_hyp).sum() * frame_shift
    fa = np.maximum(0, n_hyp - n_ref).sum() * frame_shift
    conf = (np.minimum(n_ref, n_hyp) - n_ok).sum() * frame_shift
    speech = n_ref.sum() * frame_shift
    return DerBreakdown(float(miss), float(fa), float(conf), float(speech), speech <= 0)


# ----------------------------------------------------------- speaker counts


@dataclass
class CountingReport:
    counts: list[int]  # row/column labels
    matrix: np.ndarray  # [reference, estimated]
    accuracy: float

    def render(self) -> str:
        width = max(4, *(len(str(v)) + 1 for v in self.matrix.flat)) if self.matrix.size else 4
        head = "Reference \\ Estimated"
        lines = [head.ljust(len(head)) + "".join(str(c).rjust(width) for c in self.counts)]
        for c, row in zip(self.counts, self.matrix):
            lines.append(str(c).rjust(len(head)) + "".join(str(int(v)).rjust(width) for v in row))
        lines.append(f"Acc: {100 * self.accuracy:.1f}%")
        return "\n".join(lines)


def counting_confusion(pairs: Iterable[Sequence[int]]) -> CountingReport:
    """Confusion matrix of (reference count, estimated count) pairs."""
    pairs = [(int(a), int(b)) for a, b in pairs]
    if any(a < 0 or b < 0 for a, b in pairs):
        raise ValueError("speaker counts must be non-negative")
    if not pairs:
        return CountingReport([], np.zeros((0, 0), dtype=int), 0.0)
    lo = min(min(p) for p in pairs)
    hi = max(max(p) for p in pairs)
    counts = list(range(lo, hi + 1))
    m = np.zeros((len(counts), len(counts)), dtype=int)
    for a, b in pairs:
        m[a - lo, b - lo] += 1
    return CountingReport(counts, m, float(np.trace(m)) / len(pairs))
