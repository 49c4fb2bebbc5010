"""Canonical-logo index and the matcher that labels candidate regions.

The index stores unit-norm embeddings (rounded to float32 precision so the
on-disk file round-trips exactly) and is never mutated: ``add_class`` returns
a new index.  Search is an exhaustive cosine scan.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DegenerateInputError, FileFormatError, ShapeMismatchError

INDEX_MAGIC = b"OSLDIDX1"
NORM_TOL = 1e-6


class CanonicalLogoEntry(NamedTuple):
    class_id: int
    image_id: str
    embedding: np.ndarray


class MatchResult(NamedTuple):
    class_id: int
    best_entry_id: int
    similarity: float
    confidence: int


class LabeledCandidate(NamedTuple):
    candidate: int
    match: MatchResult


def confidence(similarity: float) -> int:
    """Matching confidence on a 0-100 scale (round half up)."""
    return int(math.floor(100.0 * max(0.0, similarity) + 0.5))


def _unit(e, what="embedding") -> np.ndarray:
    e = np.asarray(e, dtype=float)
    if e.ndim != 1 or e.size == 0:
        raise ShapeMismatchError(f"{what} must be a non-empty vector")
    n = float(np.linalg.norm(e))
    if not n > 0 or not math.isfinite(n):
        raise DegenerateInputError(f"{what} has zero norm")
    return (e / n).astype(np.float32).astype(float)


@dataclass(frozen=True, eq=False)
class LogoIndex:
    entries: tuple[CanonicalLogoEntry, ...]
    class_names: Mapping[int, str]

    def __post_init__(self):
        dims = {e.embedding.shape for e in self.entries}
        if len(dims) > 1:
            raise ShapeMismatchError(f"mixed embedding dimensions {sorted(dims)}")
        missing = {e.class_id for e in self.entries} - set(self.class_names)
        if missing:
            raise ValueError(f"classes {sorted(missing)} missing from the class table")
        mat = np.stack([e.embedding for e in self.entries]) if self.entries else np.zeros((0, 0))
        mat.setflags(write=False)
        object.__setattr__(self, "_matrix", mat)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def dim(self) -> int:
        return self._matrix.shape[1] if len(self.entries) else 0

    def __len__(self):
        return len(self.entries)

    def similarities(self, query) -> np.ndarray:
        """Cosine similarity of ``query`` to every entry, in entry order.

        Each row is reduced independently, so a value depends only on its
        own entry and stays bit-identical when other entries are added.
        """
        q = np.asarray(query, dtype=float)
        if q.shape != (self.dim,):
            raise ShapeMismatchError(f"query dim {q.shape} != index dim {self.dim}")
        n = float(np.linalg.norm(q))
        if not n > 0:
            raise DegenerateInputError("zero-norm query")
        return np.clip(np.sum(self._matrix * (q / n), axis=1), -1.0, 1.0)


def _entries(entries: Iterable) -> list[CanonicalLogoEntry]:
    out = []
    for e in entries:
        e = CanonicalLogoEntry(*e)
        out.append(CanonicalLogoEntry(int(e.class_id), str(e.image_id), _unit(e.embedding)))
    return out


def build_index(entries: Iterable, class_names: Mapping[int, str] | None = None) -> LogoIndex:
    ents = _entries(entries)
    if not ents:
        raise ValueError("an index needs at least one entry")
    names = {e.class_id: str(e.class_id) for e in ents}
    names.update(class_names or {})
    return LogoIndex(tuple(ents), dict(sorted(names.items())))


def add_class(index: LogoIndex, entries: Iterable, class_names: Mapping[int, str] | None = None) -> LogoIndex:
    new = _entries(entries)
    if new and index.entries and new[0].embedding.shape[0] != index.dim:
        raise ShapeMismatchError(f"new entries have dim {new[0].embedding.shape[0]}, index has {index.dim}")
    names = dict(index.class_names)
    names.update({e.class_id: str(e.class_id) for e in new if e.class_id not in names})
    names.update(class_names or {})
    return LogoIndex(index.entries + tuple(new), dict(sorted(names.items())))


def match_top_k(index: LogoIndex, query, k: int = 1) -> list[MatchResult]:
    """Best entry per class, sorted by similarity (desc) then class id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    sims = index.similarities(query)
    best: dict[int, tuple[float, int]] = {}
    for i, (e, s) in enumerate(zip(index.entries, sims)):
        if e.class_id not in best or s > best[e.class_id][0]:
            best[e.class_id] = (float(s), i)
    ranked = sorted(best.items(), key=lambda kv: (-kv[1][0], kv[0]))[:k]
    return [MatchResult(c, i, s, confidence(s)) for c, (s, i) in ranked]


def label_detections(index: LogoIndex, embeddings: Sequence, threshold: float) -> list[LabeledCandidate]:
    """Top-1 label for each candidate whose similarity reaches ``threshold``; others are dropped."""
    out = []
    for i, e in enumerate(embeddings):
        top = match_top_k(index, e, 1)[0]
        if top.similarity >= threshold:
            out.append(LabeledCandidate(i, top))
    return out


def threshold_grid(n: int = 101) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def calibrate_threshold(score_fn, grid: Sequence[float] | None = None) -> tuple[float, float]:
    """Threshold maximising ``score_fn(threshold)``; among ties the largest wins.

    Dropping a candidate only ever removes the lowest-similarity detections
    of a class, so AP is non-increasing in the threshold; preferring the
    largest maximiser discards as many low-confidence regions as possible
    without giving up AP.
    """
    grid = threshold_grid() if grid is None else grid
    best_t, best_s = None, -math.inf
    for t in grid:
        s = score_fn(float(t))
        if s >= best_s:
            best_t, best_s = float(t), s
    return best_t, best_s


# --- index files --------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def save_index(path, index: LogoIndex) -> None:
    parts = [INDEX_MAGIC, struct.pack("<II", len(index), index.dim)]
    for e in index.entries:
        parts.append(struct.pack("<q", e.class_id))
        parts.append(_pack_str(e.image_id))
        parts.append(np.asarray(e.embedding, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", len(index.class_names)))
    for c, name in index.class_names.items():
        parts.append(struct.pack("<q", c))
        parts.append(_pack_str(name))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        chunk = self.raw[self.pos:self.pos + n]
        if len(chunk) != n:
            raise FileFormatError(f"{self.path}: truncated index file")
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def load_index(path) -> LogoIndex:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(8) != INDEX_MAGIC:
        raise FileFormatError(f"{path}: not a logo index")
    count, dim = r.unpack("<II")
    entries = []
    for _ in range(count):
        (c,) = r.unpack("<q")
        image_id = r.string()
        emb = np.frombuffer(r.take(4 * dim), dtype="<f4").astype(float)
        if abs(float(np.linalg.norm(emb)) - 1.0) > 1e-5:
            raise FileFormatError(f"{path}: entry {image_id!r} is not unit norm")
        entries.append(CanonicalLogoEntry(int(c), image_id, emb))
    (n_names,) = r.unpack("<I")
    names = {}
    for _ in range(n_names):
        (c,) = r.unpack("<q")
        names[int(c)] = r.string()
    if r.pos != len(r.raw):
        raise FileFormatError(f"{path}: trailing bytes")
    return LogoIndex(tuple(entries), names)
