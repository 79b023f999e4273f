"""Synthetic multi-speaker feature corpora.

Stand-in for mixtures of real utterances: each speaker follows a two-state
(speaking / silent) Markov chain, and a frame's feature vector is the sum of
the active speakers' signature vectors plus a background vector and white
noise.  Signatures are random directions drawn fresh for every recording, so
a model has to tell speakers apart within a recording rather than memorize
identities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import fileio
from .model import FeatureSequence

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 50
OVERLAP_TOLERANCE = 0.10


@dataclass(frozen=True)
class SimSpec:
    min_speakers: int = 1
    max_speakers: int = 4
    num_frames: int = 500
    feat_dim: int = 16
    overlap_target: float = 0.3
    mean_on: float = 30.0  # frames
    mean_off: float = 60.0  # frames
    signature_scale: float = 3.0
    background_scale: float = 1.0
    noise_scale: float = 0.3
    frame_shift: float = 0.1
    calibrate: bool = True

    def validate(self) -> SimSpec:
        if not 1 <= self.min_speakers <= self.max_speakers:
            raise ValueError(f"bad speaker range {self.min_speakers}-{self.max_speakers}")
        if self.num_frames < 1 or self.feat_dim < 1:
            raise ValueError("num_frames and feat_dim must be positive")
        if not 0.0 <= self.overlap_target < 1.0:
            raise ValueError("overlap_target must lie in [0, 1)")
        if self.mean_on < 1 or self.mean_off < 1:
            raise ValueError("mean dwell times must be at least one frame")
        return self

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> SimSpec:
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.type == "bool":
                kw[f.name] = v if isinstance(v, bool) else str(v) == "True"
            elif f.type == "int":
                kw[f.name] = int(v)
            else:
                kw[f.name] = float(v)
        return cls(**kw).validate()


def overlap_ratio(activity: np.ndarray) -> float:
    """frames with >= 2 active speakers / frames with >= 1 active speaker."""
    n = np.asarray(activity).sum(axis=0) if np.size(activity) else np.zeros(0)
    speech = int(np.count_nonzero(n >= 1))
    return np.count_nonzero(n >= 2) / speech if speech else 0.0


def expected_overlap(p: float, n: int) -> float:
    """Overlap ratio of ``n`` independent speakers each active with probability ``p``."""
    if n < 2 or p <= 0:
        return 0.0
    none = (1 - p) ** n
    one = n * p * (1 - p) ** (n - 1)
    return (1 - none - one) / (1 - none)


def activity_probability(target: float, n: int) -> float:
    """Per-speaker activity level whose expected overlap ratio is ``target``."""
    lo, hi = 1e-6, 1.0 - 1e-6
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if expected_overlap(mid, n) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def dwell_means(spec: SimSpec, n: int) -> tuple[float, float]:
    """Mean on/off run lengths for an ``n``-speaker recording.

    With calibration on, the silent dwell is rescaled so the expected overlap
    ratio hits the target; the speaking dwell always comes from the spec.
    """
    if not spec.calibrate or n < 2 or spec.overlap_target <= 0:
        return spec.mean_on, spec.mean_off
    p = activity_probability(spec.overlap_target, n)
    return spec.mean_on, max(1.0, spec.mean_on * (1 - p) / p)


def _markov_chain(rng: np.random.Generator, T: int, mean_on: float, mean_off: float) -> np.ndarray:
    p_on = mean_on / (mean_on + mean_off)
    leave_on, leave_off = 1.0 / mean_on, 1.0 / mean_off
    flips = rng.random(T)
    out = np.zeros(T)
    state = rng.random() < p_on
    for t in range(T):
        out[t] = state
        if flips[t] < (leave_on if state else leave_off):
            state = not state
    return out


def _draw_activity(spec: SimSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    on, off = dwell_means(spec, n)
    best, best_gap = None, np.inf
    for _ in range(MAX_ATTEMPTS):
        act = np.array([_markov_chain(rng, spec.num_frames, on, off) for _ in range(n)])
        if not act.any(axis=1).all():
            continue
        if n < 2:
            return act
        gap = abs(overlap_ratio(act) - spec.overlap_target)
        if gap <= OVERLAP_TOLERANCE:
            return act
        if gap < best_gap:
            best, best_gap = act, gap
    if best is None:
        # every attempt left a speaker silent; force one frame on
        best = act
        for row in best:
            if not row.any():
                row[rng.integers(spec.num_frames)] = 1.0
    log.warning("overlap target %.3f not reached within %d attempts (gap %.3f)",
                spec.overlap_target, MAX_ATTEMPTS, best_gap)
    return best


def simulate_mixture(spec: SimSpec, num_speakers: int, seed: int) -> tuple[FeatureSequence, np.ndarray]:
    """One recording: features (F x T) and binary activity (num_speakers x T)."""
    spec.validate()
    if not spec.min_speakers <= num_speakers <= spec.max_speakers:
        raise ValueError(
            f"{num_speakers} speakers outside range {spec.min_speakers}-{spec.max_speakers}")
    rng = np.random.default_rng(seed)
    act = _draw_activity(spec, num_speakers, rng)
    sig = rng.normal(size=(spec.feat_dim, num_speakers))
    sig *= spec.signature_scale / np.linalg.norm(sig, axis=0, keepdims=True)
    background = rng.normal(size=(spec.feat_dim, 1))
    background *= spec.background_scale / np.linalg.norm(background)
    noise = spec.noise_scale * rng.normal(size=(spec.feat_dim, spec.num_frames))
    frames = sig @ act + background + noise
    return FeatureSequence(frames, spec.frame_shift), act


# ------------------------------------------------------------------- corpus


@dataclass
class ManifestEntry:
    recording_id: str
    feature_path: str
    label_path: str
    num_speakers: int
    num_frames: int


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    seed: int
    spec: SimSpec
    root: Path = Path(".")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load(self, entry: ManifestEntry) -> tuple[FeatureSequence, np.ndarray]:
        frames = fileio.read_features(self.resolve(entry.feature_path))
        labels = fileio.read_labels(self.resolve(entry.label_path))
        if frames.shape[1] != labels.shape[1]:
            raise fileio.FormatError(f"{entry.recording_id}: feature/label length mismatch")
        return FeatureSequence(frames, self.spec.frame_shift), labels

    def load_all(self) -> list[tuple[FeatureSequence, np.ndarray]]:
        return [self.load(e) for e in self.entries]


def recording_seed(seed: int, index: int) -> int:
    return seed ^ index


def build_corpus(spec: SimSpec, count: int, seed: int, out_dir) -> CorpusManifest:
    """Write ``count`` recordings plus ``manifest.tsv`` under ``out_dir``."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(max(count - 1, 0))))
    entries = []
    for i in range(count):
        rseed = recording_seed(seed, i)
        rng = np.random.default_rng([rseed, 0])
        n = int(rng.integers(spec.min_speakers, spec.max_speakers + 1))
        feats, labels = simulate_mixture(spec, n, rseed)
        rid = f"rec{i:0{width}d}"
        fileio.write_features(out / f"{rid}.scef", feats.frames)
        fileio.write_labels(out / f"{rid}.scel", labels)
        entries.append(ManifestEntry(rid, f"{rid}.scef", f"{rid}.scel", n, spec.num_frames))
    manifest = CorpusManifest(entries, seed, spec, out)
    write_manifest(out / "manifest.tsv", manifest)
    return manifest


def format_manifest(m: CorpusManifest) -> str:
    lines = [f"#seed\t{m.seed}\n"]
    lines += [f"#spec\t{k}\t{v!r}\n" if isinstance(v, float) else f"#spec\t{k}\t{v}\n"
              for k, v in m.spec.as_dict().items()]
    for e in m.entries:
        lines.append(f"{e.recording_id}\t{e.feature_path}\t{e.label_path}\t"
                     f"{e.num_speakers}\t{e.num_frames}\n")
    return "".join(lines)


def write_manifest(path, m: CorpusManifest) -> None:
    Path(path).write_text(format_manifest(m), encoding="utf-8")


def read_manifest(path) -> CorpusManifest:
    path = Path(path)
    seed, spec, entries, seen = 0, {}, [], set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            if parts[0] == "#seed":
                seed = int(parts[1])
            elif parts[0] == "#spec":
                spec[parts[1]] = parts[2]
            elif parts[0].startswith("#"):
                continue
            else:
                rid, fp, lp, n, T = parts
                if rid in seen:
                    raise fileio.FormatError(f"{path}:{lineno}: duplicate id {rid}")
                seen.add(rid)
                entries.append(ManifestEntry(rid, fp, lp, int(n), int(T)))
        except (ValueError, IndexError) as exc:
            raise fileio.FormatError(f"{path}:{lineno}: malformed manifest line {line!r}") from exc
    return CorpusManifest(entries, seed, SimSpec.from_dict(spec), path.parent)


@dataclass
class CorpusStats:
    recordings_per_count: dict[int, int]
    num_recordings: int
    mean_duration: float  # seconds
    overlap_ratio: float
    degenerate: bool  # no speech frames at all

    def render(self) -> str:
        spk = ",".join(f"{k}:{v}" for k, v in sorted(self.recordings_per_count.items()))
        return (f"recordings\t{self.num_recordings}\nspeakers\t{spk}\n"
                f"avg_dur_s\t{self.mean_duration:.1f}\noverlap_pct\t{100 * self.overlap_ratio:.1f}\n")


def corpus_stats(manifest: CorpusManifest | list) -> CorpusStats:
    """Table-style statistics; accepts a manifest or ``(features, labels)`` pairs.

    The overlap ratio pools frames over the whole corpus.
    """
    if isinstance(manifest, CorpusManifest):
        items = manifest.load_all()
    else:
        items = list(manifest)
    per_count: dict[int, int] = {}
    multi = speech = 0
    dur = 0.0
    for feats, labels in items:
        per_count[labels.shape[0]] = per_count.get(labels.shape[0], 0) + 1
        n = labels.sum(axis=0) if labels.size else np.zeros(labels.shape[1])
        multi += int(np.count_nonzero(n >= 2))
        speech += int(np.count_nonzero(n >= 1))
        dur += feats.T * feats.frame_shift
    return CorpusStats(
        recordings_per_count=per_count,
        num_recordings=len(items),
        mean_duration=dur / len(items) if items else 0.0,
        overlap_ratio=multi / speech if speech else 0.0,
        degenerate=speech == 0,
    )
