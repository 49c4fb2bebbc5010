"""Triplet batch construction: balanced sampling and in-batch hard negative mining.

A batch holds 3N samples laid out as [anchors | positives | negatives] and N
triplets of indices into that list.  Items of the reserved class
``NEGATIVE_ONLY_CLASS`` (false-positive detector crops) are only ever used as
negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Hashable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ShapeMismatchError, UnsatisfiableBatchError
from .losses import LossParams

NEGATIVE_ONLY_CLASS = -1

POOL_ALL = "all"
POOL_NEGATIVES = "negatives-only"
TIE_TOL = 1e-12


class SampleRef(NamedTuple):
    item_id: Hashable
    class_id: int


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True)
class Batch:
    samples: tuple[SampleRef, ...]
    triplets: tuple[Triplet, ...]

    def __post_init__(self):
        if len(self.samples) != 3 * len(self.triplets):
            raise ValueError("a batch holds exactly 3 samples per triplet")
        n = len(self.samples)
        for t in self.triplets:
            if not all(0 <= i < n for i in t):
                raise IndexError(f"triplet {t} out of range")

    @property
    def n(self) -> int:
        return len(self.triplets)

    def triplet_array(self) -> np.ndarray:
        return np.asarray(self.triplets, dtype=np.intp).reshape(-1, 3)

    def check(self) -> None:
        """Assert every triplet's class constraints."""
        for t in self.triplets:
            a, p, q = (self.samples[i] for i in t)
            if a.class_id != p.class_id or a.item_id == p.item_id:
                raise AssertionError(f"bad positive in {t}")
            if a.class_id == q.class_id:
                raise AssertionError(f"bad negative in {t}")
            if a.class_id == NEGATIVE_ONLY_CLASS:
                raise AssertionError(f"negative-only item used as anchor in {t}")


class _ClassTable:
    """Flattened view of a class -> items index for O(1) uniform draws."""

    def __init__(self, index: Mapping[int, Sequence[Hashable]]):
        classes = sorted(c for c, items in index.items() if len(items) > 0)
        self.items: list[SampleRef] = []
        self.span: dict[int, tuple[int, int]] = {}
        for c in classes:
            start = len(self.items)
            self.items.extend(SampleRef(i, c) for i in index[c])
            self.span[c] = (start, len(self.items))
        self.eligible = [
            c for c in classes
            if c != NEGATIVE_ONLY_CLASS and self.span[c][1] - self.span[c][0] >= 2
        ]
        if len(classes) < 2 or not self.eligible:
            raise UnsatisfiableBatchError(
                "need at least 2 classes and one (non-reserved) class with 2+ items"
            )

    def draw_anchor_positive(self, c: int, rng: np.random.Generator) -> tuple[SampleRef, SampleRef]:
        start, stop = self.span[c]
        size = stop - start
        a = int(rng.integers(size))
        p = int(rng.integers(size - 1))
        if p >= a:
            p += 1
        return self.items[start + a], self.items[start + p]

    def draw_negative(self, c: int, rng: np.random.Generator) -> SampleRef:
        start, stop = self.span[c]
        j = int(rng.integers(len(self.items) - (stop - start)))
        if j >= start:
            j += stop - start
        return self.items[j]


def _assemble(triples: list[tuple[SampleRef, SampleRef, SampleRef]]) -> Batch:
    n = len(triples)
    samples = tuple(t[0] for t in triples) + tuple(t[1] for t in triples) + tuple(t[2] for t in triples)
    triplets = tuple(Triplet(i, n + i, 2 * n + i) for i in range(n))
    return Batch(samples, triplets)


def sample_balanced_batch(
    index: Mapping[int, Sequence[Hashable]], n: int, rng: np.random.Generator
) -> Batch:
    """Draw N anchors from N distinct classes (round-robin when classes run out)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    table = _ClassTable(index)
    classes = [table.eligible[i] for i in rng.permutation(len(table.eligible))]
    triples = []
    for k in range(n):
        c = classes[k % len(classes)]
        a, p = table.draw_anchor_positive(c, rng)
        triples.append((a, p, table.draw_negative(c, rng)))
    return _assemble(triples)


def sample_random_batch(
    index: Mapping[int, Sequence[Hashable]], n: int, rng: np.random.Generator
) -> Batch:
    """Anchors uniform over all anchor-eligible items; classes may repeat."""
    if n < 1:
        raise ValueError("n must be >= 1")
    table = _ClassTable(index)
    eligible_items = [
        i for c in table.eligible for i in range(*table.span[c])
    ]
    triples = []
    for _ in range(n):
        flat = eligible_items[int(rng.integers(len(eligible_items)))]
        c = table.items[flat].class_id
        start, stop = table.span[c]
        p = start + int(rng.integers(stop - start - 1))
        if p >= flat:
            p += 1
        triples.append((table.items[flat], table.items[p], table.draw_negative(c, rng)))
    return _assemble(triples)


def harden_negatives(
    batch: Batch,
    embeddings: np.ndarray,
    params: LossParams | None = None,
    pool: str = POOL_ALL,
) -> tuple[Batch, int]:
    """Replace each triplet's negative with the hardest one available in the batch.

    Both losses' negative terms are increasing in s_an, so the hardest
    negative is the candidate with the largest cosine similarity to the
    anchor (``params`` is accepted for interface symmetry).  Ties go to the
    smallest sample index.  Returns the new batch and the number of triplets
    left unchanged because their candidate pool was empty.
    """
    emb = np.asarray(embeddings, dtype=float)
    if emb.ndim != 2 or emb.shape[0] != len(batch.samples):
        raise ShapeMismatchError("need one embedding per batch sample")
    if pool not in (POOL_ALL, POOL_NEGATIVES):
        raise ValueError(f"unknown pool {pool!r}")
    norms = np.linalg.norm(emb, axis=1)
    unit = emb / np.where(norms > 0, norms, 1.0)[:, None]
    classes = np.array([s.class_id for s in batch.samples])
    n = batch.n
    candidate = np.ones(len(batch.samples), dtype=bool)
    if pool == POOL_NEGATIVES:
        candidate[: 2 * n] = False

    warnings = 0
    out = []
    for t in batch.triplets:
        mask = candidate & (classes != classes[t.anchor])
        if not mask.any():
            warnings += 1
            out.append(t)
            continue
        sims = np.where(mask, unit @ unit[t.anchor], -np.inf)
        # values within rounding noise of the maximum count as ties
        best = np.flatnonzero(sims >= sims.max() - TIE_TOL)[0]
        out.append(t._replace(negative=int(best)))
    return replace(batch, triplets=tuple(out)), warnings
