"""Historical object co-occurrence graph.

Counts are frame-presence counts: a class seen three times in one frame counts
once for that frame. The edge weight between two classes is

    w(a, b) = N(a and b in the same frame) / (N(a) * N(b))

with the diagonal fixed at zero and unseen classes given weight zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import ShapeError, Tensor, _wrap, linear


class GraphFormatError(ValueError):
    pass


@dataclass
class OccurrenceCounts:
    n_classes: int
    single: np.ndarray = None
    pair: np.ndarray = None
    frames_seen: int = 0
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.single is None:
            self.single = np.zeros(self.n_classes, dtype=np.int64)
        if self.pair is None:
            self.pair = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)

    def _check_id(self, c: int) -> None:
        if not 0 <= int(c) < self.n_classes:
            raise IndexError(f"class id {c} outside [0, {self.n_classes})")

    def observe_frame(self, classes_present: Iterable[int]) -> "OccurrenceCounts":
        present = sorted({int(c) for c in classes_present})
        for c in present:
            self._check_id(c)
        for c in present:
            self.single[c] += 1
        for a, b in combinations(present, 2):
            self.pair[a, b] += 1
            self.pair[b, a] += 1
        self.frames_seen += 1
        return self

    def observe_frames(self, frames: Iterable[Iterable[int]]) -> "OccurrenceCounts":
        for frame in frames:
            self.observe_frame(frame)
        return self

    def weight(self, c1: int, c2: int) -> float:
        return weight(self, c1, c2)

    # snapshot I/O -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "frames_seen": self.frames_seen,
            "single": self.single.tolist(),
            "pair": self.pair.tolist(),
            "class_names": list(self.class_names),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "OccurrenceCounts":
        try:
            n = int(obj["n_classes"])
            single = np.asarray(obj["single"], dtype=np.int64)
            pair = np.asarray(obj["pair"], dtype=np.int64)
            frames = int(obj["frames_seen"])
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphFormatError(f"malformed graph snapshot: {exc}") from exc
        if single.shape != (n,) or pair.shape != (n, n):
            raise GraphFormatError(f"snapshot shapes {single.shape}/{pair.shape} do not match n_classes={n}")
        if not np.array_equal(pair, pair.T):
            raise GraphFormatError("pair matrix is not symmetric")
        if (single < 0).any() or (single > frames).any():
            raise GraphFormatError("single counts must lie in [0, frames_seen]")
        bound = np.minimum.outer(single, single)
        off = ~np.eye(n, dtype=bool)
        if (pair < 0).any() or (pair[off] > bound[off]).any():
            raise GraphFormatError("pair counts exceed min(single) bound")
        names = list(obj.get("class_names") or [])
        if names and len(names) != n:
            raise GraphFormatError(f"{len(names)} class names for {n} classes")
        return cls(n, single, pair, frames, names)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "OccurrenceCounts":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"{path}: {exc}") from exc
        return cls.from_json(obj)


def weight(counts: OccurrenceCounts, c1: int, c2: int) -> float:
    counts._check_id(c1)
    counts._check_id(c2)
    if c1 == c2:
        return 0.0
    denom = int(counts.single[c1]) * int(counts.single[c2])
    if denom == 0:
        return 0.0
    return int(counts.pair[c1, c2]) / denom


def build_matrix(counts: OccurrenceCounts) -> np.ndarray:
    """Symmetric ``n x n`` weight matrix with zero diagonal (float64)."""
    s = counts.single.astype(np.float64)
    denom = np.outer(s, s)
    m = np.divide(counts.pair.astype(np.float64), denom,
                  out=np.zeros_like(denom), where=denom > 0)
    np.fill_diagonal(m, 0.0)
    return m


def restrict_to_scene(m: np.ndarray, classes_present: Iterable[int]) -> np.ndarray:
    """Keep only the rows/columns of classes detected in the current frame."""
    p = np.zeros(m.shape[0], dtype=m.dtype)
    p[list({int(c) for c in classes_present})] = 1.0
    return m * np.outer(p, p)


def encode_relations(m, w: Tensor, b: Tensor) -> Tensor:
    """Relation embedding: affine map of the row-major flattened matrix.

    ``m`` is ``[n, n]`` or batched ``[B, n, n]``; ``w`` is ``[n*n, d_r]``.
    """
    m = _wrap(m, w.data)
    n2 = m.shape[-1] * m.shape[-2]
    if w.ndim != 2 or w.shape[0] != n2:
        raise ShapeError(f"relation encoder expects [{n2}, d_r] weights, got {w.shape}")
    flat = m.reshape(m.shape[:-2] + (n2,))
    if flat.ndim == 1:
        flat = flat.reshape(1, n2)
        return linear(flat, w, b).reshape(w.shape[1])
    return linear(flat, w, b)
