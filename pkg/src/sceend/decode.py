"""Variable-speaker inference: decode one speaker at a time until silence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from .numcore import Matrix


def binarize(z, threshold: float = 0.5) -> np.ndarray:
    """Strict ``z > threshold`` per frame, as 0/1 floats."""
    return (np.asarray(z, dtype=np.float64) > threshold).astype(np.float64)


def median_smooth(z: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return z
    half = window // 2
    padded = np.pad(z, (half, window - 1 - half), mode="edge")
    return np.median(np.lib.stride_tricks.sliding_window_view(padded, window), axis=-1)


@dataclass
class DiarizationResult:
    activity: Matrix  # S_hat x T, binary
    posteriors: Matrix  # one row per executed iteration
    frame_shift: float

    @property
    def num_speakers(self) -> int:
        return self.activity.shape[0]


def infer(params: M.ModelParams | M.BoundParams, x, s_max: int | None = None,
          threshold: float | None = None, median: int = 0) -> DiarizationResult:
    """Decode speakers until a binarized row is all zero or ``s_max`` is hit.

    The stopping row is kept in ``posteriors`` but not emitted as activity.
    """
    p = M.bind(params)
    cfg = p.config
    s_max = cfg.max_speakers if s_max is None else s_max
    threshold = cfg.threshold if threshold is None else threshold
    frame_shift = x.frame_shift if isinstance(x, M.FeatureSequence) else 0.1
    e = M.encode(p, x)
    T = e.shape[1]
    state = M.DecoderState.zeros(cfg.hidden_dim, T)
    cond = np.zeros(T)
    post, act = [], []
    for _ in range(s_max):
        z, state = M.decode_step(p, e, cond, state)
        row = median_smooth(z.value[0], median)
        post.append(z.value[0])
        cond = binarize(row, threshold)
        if not cond.any():
            break
        act.append(cond)
    return DiarizationResult(
        activity=np.array(act).reshape(len(act), T),
        posteriors=np.array(post).reshape(len(post), T),
        frame_shift=frame_shift,
    )


def infer_eend(params: M.ModelParams | M.BoundParams, x, threshold: float | None = None,
               median: int = 0) -> DiarizationResult:
    """Baseline inference: threshold every head output, drop silent rows."""
    p = M.bind(params)
    threshold = p.config.threshold if threshold is None else threshold
    frame_shift = x.frame_shift if isinstance(x, M.FeatureSequence) else 0.1
    z = M.eend_forward(p, x, p.config.eend_speakers).value
    rows = [binarize(median_smooth(r, median), threshold) for r in z]
    act = [r for r in rows if r.any()]
    return DiarizationResult(np.array(act).reshape(len(act), z.shape[1]), z, frame_shift)


def count_speakers(result: DiarizationResult) -> int:
    return result.activity.shape[0]


def activity_to_segments(activity, frame_shift: float, min_dur: float = 0.0,
                         recording_id: str = "rec", speaker_prefix: str = "spk"):
    """Turn each maximal run of active frames into a segment.

    Row ``s`` becomes speaker ``f"{speaker_prefix}{s+1}"``; runs shorter than
    ``min_dur`` seconds are dropped.
    """
    from .metrics import Segment, SegmentList

    if frame_shift <= 0:
        raise ValueError("frame_shift must be positive")
    act = np.asarray(activity)
    if act.ndim == 1:
        act = act[None, :]
    segs = []
    for s, row in enumerate(act):
        edges = np.diff(np.concatenate([[0], (row > 0).astype(np.int8), [0]]))
        starts = np.flatnonzero(edges == 1)
        ends = np.flatnonzero(edges == -1)
        for a, b in zip(starts, ends):
            dur = (b - a) * frame_shift
            if dur < min_dur:
                continue
            segs.append(Segment(f"{speaker_prefix}{s + 1}", a * frame_shift, dur))
    return SegmentList(recording_id, segs)


def segments_to_activity(segments, frame_shift: float, num_frames: int,
                         speakers: list[str] | None = None) -> tuple[np.ndarray, list[str]]:
    """Rasterize segments onto a frame grid (frame centers inside a segment are active)."""
    if speakers is None:
        speakers = segments.speakers()
    index = {s: i for i, s in enumerate(speakers)}
    act = np.zeros((len(speakers), num_frames))
    centers = (np.arange(num_frames) + 0.5) * frame_shift
    for seg in segments.entries:
        row = index[seg.speaker]
        act[row, (centers >= seg.start) & (centers < seg.start + seg.duration)] = 1.0
    return act, speakers
