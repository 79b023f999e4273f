"""Binary and text file formats.

SCEF  feature matrix:  b"SCEF", u32 version=1, u32 F, u32 T, then T frames of
      F little-endian float32 values.
SCEL  label matrix:    b"SCEL", u32 version=1, u32 S, u32 T, then S x T bytes
      in {0, 1}.
RTTM  ``SPEAKER <rec> 1 <start> <dur> <NA> <NA> <speaker> <NA> <NA>``.
Checkpoint
      a text header (``key<TAB>value`` lines, ``array<TAB>name<TAB>RxC<TAB>offset``
      lines, terminated by ``end``) followed by a blob of little-endian float64.
      The header syntax doubles as the run-config file format.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .metrics import Segment, SegmentList

FEAT_MAGIC = b"SCEF"
LABEL_MAGIC = b"SCEL"
CKPT_MAGIC = "SCEEND-CHECKPOINT"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    pass


def _write_atomic(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _read_header(path, magic: bytes) -> tuple[int, int, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    got, version, a, b = _HEADER.unpack_from(raw)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return a, b, raw[_HEADER.size:]


def write_features(path, frames: np.ndarray) -> None:
    """``frames`` is F x T."""
    frames = np.asarray(frames)
    F, T = frames.shape
    body = np.ascontiguousarray(frames.T, dtype="<f4").tobytes()
    _write_atomic(path, _HEADER.pack(FEAT_MAGIC, VERSION, F, T) + body)


def read_features(path) -> np.ndarray:
    F, T, body = _read_header(path, FEAT_MAGIC)
    if len(body) != 4 * F * T:
        raise FormatError(f"{path}: expected {4 * F * T} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(T, F).T.astype(np.float64)


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    S, T = labels.shape
    if np.any((labels != 0) & (labels != 1)):
        raise FormatError("labels must be binary")
    body = np.ascontiguousarray(labels, dtype=np.uint8).tobytes()
    _write_atomic(path, _HEADER.pack(LABEL_MAGIC, VERSION, S, T) + body)


def read_labels(path) -> np.ndarray:
    S, T, body = _read_header(path, LABEL_MAGIC)
    if len(body) != S * T:
        raise FormatError(f"{path}: expected {S * T} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(S, T)
    if arr.size and arr.max() > 1:
        raise FormatError(f"{path}: non-binary label byte")
    return arr.astype(np.float64)


# ---------------------------------------------------------------------- RTTM


def format_rttm(segments: SegmentList) -> str:
    lines = []
    for s in sorted(segments.entries, key=lambda s: (s.start, s.speaker, s.duration)):
        lines.append(f"SPEAKER {segments.recording_id} 1 {s.start:.3f} {s.duration:.3f} "
                     f"<NA> <NA> {s.speaker} <NA> <NA>\n")
    return "".join(lines)


def write_rttm(path, segments: SegmentList | list[SegmentList]) -> None:
    groups = [segments] if isinstance(segments, SegmentList) else segments
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in groups:
            fh.write(format_rttm(g))


def parse_rttm(text: str, source: str = "<rttm>") -> dict[str, SegmentList]:
    out: dict[str, SegmentList] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        if fields[0] != "SPEAKER" or len(fields) < 8:
            raise FormatError(f"{source}:{lineno}: malformed RTTM line: {line.strip()!r}")
        try:
            start, dur = float(fields[3]), float(fields[4])
        except ValueError:
            raise FormatError(f"{source}:{lineno}: bad start/duration: {line.strip()!r}") from None
        if not np.isfinite(start) or not dur > 0:
            raise FormatError(f"{source}:{lineno}: invalid segment timing: {line.strip()!r}")
        rec = fields[1]
        out.setdefault(rec, SegmentList(rec, [])).entries.append(Segment(fields[7], start, dur))
    return out


def read_rttm(path) -> dict[str, SegmentList]:
    """Segments per recording id.  A directory is read file by file, and a
    file ``<rec>.rttm`` registers ``<rec>`` even when it holds no lines."""
    path = Path(path)
    if path.is_dir():
        out = {}
        for f in sorted(path.glob("*.rttm")):
            got = parse_rttm(f.read_text(encoding="utf-8"), str(f))
            out.setdefault(f.stem, SegmentList(f.stem, []))
            out.update(got)
        return out
    return parse_rttm(path.read_text(encoding="utf-8"), str(path))


# ------------------------------------------------- key/value text + checkpoint


def format_kv(items: Mapping[str, object]) -> str:
    return "".join(f"{k}\t{_fmt(v)}\n" for k, v in items.items())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """``key<TAB>value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{source}:{lineno}: expected key<TAB>value, got {line!r}")
        out[parts[0]] = parts[1]
    return out


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, object]) -> None:
    """Write arrays (float64) and metadata.  Output bytes depend only on inputs."""
    header = [f"{CKPT_MAGIC}\t{VERSION}\n", format_kv(meta)]
    blobs, offset = [], 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f8")
        if a.ndim != 2:
            raise FormatError(f"array {name!r} is not 2-D")
        header.append(f"array\t{name}\t{a.shape[0]}x{a.shape[1]}\t{offset}\n")
        blobs.append(a.tobytes())
        offset += a.size
    header.append(f"end\t{offset}\n")
    _write_atomic(Path(path), "".join(header).encode("utf-8") + b"".join(blobs))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    lines, pos = [], 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"{path}: truncated checkpoint header")
        line = raw[pos:nl].decode("utf-8", errors="replace")
        pos = nl + 1
        lines.append(line)
        if line.startswith("end\t"):
            break
    first = lines[0].split("\t")
    if first[0] != CKPT_MAGIC or len(first) != 2:
        raise FormatError(f"{path}: not a checkpoint")
    if first[1] != str(VERSION):
        raise FormatError(f"{path}: checkpoint version {first[1]} unsupported")
    meta, layout = {}, []
    for line in lines[1:-1]:
        parts = line.split("\t")
        if parts[0] == "array" and len(parts) == 4:
            r, c = (int(v) for v in parts[2].split("x"))
            layout.append((parts[1], r, c, int(parts[3])))
        elif len(parts) == 2:
            meta[parts[0]] = parts[1]
        else:
            raise FormatError(f"{path}: bad header line {line!r}")
    total = int(lines[-1].split("\t")[1])
    blob = raw[pos:]
    if len(blob) != 8 * total:
        raise FormatError(f"{path}: expected {8 * total} data bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f8")
    arrays = {}
    for name, r, c, off in layout:
        if name in arrays:
            raise FormatError(f"{path}: array {name!r} listed twice")
        arrays[name] = data[off:off + r * c].reshape(r, c).astype(np.float64)
    return arrays, meta
