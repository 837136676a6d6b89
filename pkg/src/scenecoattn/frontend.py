"""Input streams: scenes, vocabulary/tokenizer, region features, position codes.

The visual detector is synthetic. Each class has a prototype row in a feature
table; a region's feature is that row plus seeded Gaussian jitter, so every
region has the same width no matter how large its box is.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK, SUGGEST = 0, 1, 2, 3, 4
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>", "suggest:"]
SUGGEST_MARKER = "suggest:"

_WORD = re.compile(r"[a-z0-9]+")


class SceneFormatError(ValueError):
    """Malformed scene record; message carries the offending field path."""


@dataclass
class SceneObject:
    class_id: int
    bbox: tuple[float, float, float, float]


@dataclass
class Scene:
    scene_id: str
    objects: list[SceneObject]
    instruction: str
    target: str
    expects_trigger: bool = False

    @property
    def class_ids(self) -> list[int]:
        return [o.class_id for o in self.objects]

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "objects": [{"class_id": o.class_id, "bbox": list(o.bbox)} for o in self.objects],
            "instruction": self.instruction,
            "target": self.target,
            "expects_trigger": self.expects_trigger,
        }

    @classmethod
    def from_dict(cls, obj, n_classes: int | None = None) -> "Scene":
        def need(container, key, typ, path):
            if not isinstance(container, dict) or key not in container:
                raise SceneFormatError(f"{path}: missing field")
            val = container[key]
            if not isinstance(val, typ) or (typ is int and isinstance(val, bool)):
                raise SceneFormatError(f"{path}: expected {getattr(typ, '__name__', typ)}")
            return val

        if not isinstance(obj, dict):
            raise SceneFormatError("$: expected an object")
        sid = need(obj, "scene_id", str, "$.scene_id")
        raw_objects = need(obj, "objects", list, "$.objects")
        objects = []
        for i, o in enumerate(raw_objects):
            cid = need(o, "class_id", int, f"$.objects[{i}].class_id")
            if cid < 0 or (n_classes is not None and cid >= n_classes):
                raise SceneFormatError(f"$.objects[{i}].class_id: {cid} is not a known class")
            bbox = need(o, "bbox", list, f"$.objects[{i}].bbox")
            if len(bbox) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox):
                raise SceneFormatError(f"$.objects[{i}].bbox: expected 4 numbers")
            try:
                validate_bbox(bbox)
            except ValueError as exc:
                raise SceneFormatError(f"$.objects[{i}].bbox: {exc}") from None
            objects.append(SceneObject(cid, tuple(float(v) for v in bbox)))
        instruction = need(obj, "instruction", str, "$.instruction")
        target = need(obj, "target", str, "$.target")
        if not target.strip():
            raise SceneFormatError("$.target: must be non-empty")
        trig = need(obj, "expects_trigger", bool, "$.expects_trigger")
        return cls(sid, objects, instruction, target, trig)


def validate_bbox(bbox: Sequence[float]) -> None:
    x, y, w, h = bbox
    if not all(0.0 <= v <= 1.0 for v in (x, y, w, h)):
        raise ValueError(f"bbox {list(bbox)} has coordinates outside [0, 1]")
    if w <= 0 or h <= 0:
        raise ValueError(f"bbox {list(bbox)} needs positive width and height")


def load_scenes(path, n_classes: int | None = None) -> list[Scene]:
    scenes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            try:
                scenes.append(Scene.from_dict(obj, n_classes))
            except SceneFormatError as exc:
                raise SceneFormatError(f"{path}:{lineno}: {exc}") from None
    return scenes


def dump_scenes(scenes: Iterable[Scene]) -> str:
    return "".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in scenes)


# ------------------------------------------------------------------ vocabulary

def normalize(text: str) -> list[str]:
    """Lowercase, split on whitespace, treat punctuation as a separator.

    The marker word ``suggest:`` survives as a single token.
    """
    words = []
    for raw in text.lower().split():
        if raw == SUGGEST_MARKER:
            words.append(SUGGEST_MARKER)
        else:
            words.extend(_WORD.findall(raw))
    return words


@dataclass
class Vocabulary:
    tokens: list[str] = field(default_factory=lambda: list(RESERVED))

    def __post_init__(self):
        if self.tokens[:len(RESERVED)] != RESERVED:
            raise ValueError(f"vocabulary must start with reserved tokens {RESERVED}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary has duplicate tokens")
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        seen = set(RESERVED)
        tokens = list(RESERVED)
        for text in texts:
            for w in normalize(text):
                if w not in seen:
                    seen.add(w)
                    tokens.append(w)
        return cls(tokens)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text()))


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [BOS] + [vocab.id(w) for w in normalize(text)] + [EOS]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Inverse of :func:`tokenize` for in-vocabulary normalized text."""
    words = [vocab.tokens[i] for i in ids if i not in (PAD, BOS, EOS)]
    return " ".join(words)


# ------------------------------------------------------------------ position codes

def sinusoidal_pe(position: float, d_model: int) -> np.ndarray:
    """PE[2i] = sin(p / 10000^(2i/d)), PE[2i+1] = cos(p / 10000^(2i/d))."""
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    i = np.arange(d_model // 2, dtype=np.float64)
    angle = position / np.power(10000.0, 2 * i / d_model)
    pe = np.empty(d_model, dtype=np.float64)
    pe[0::2] = np.sin(angle)
    pe[1::2] = np.cos(angle)
    return pe


def sinusoidal_table(length: int, d_model: int) -> np.ndarray:
    return np.stack([sinusoidal_pe(p, d_model) for p in range(length)]) if length else np.zeros((0, d_model))


def pos2d_embedding(bbox: Sequence[float], d_v: int) -> np.ndarray:
    """Box-center code: first half encodes cx, second half cy."""
    if d_v % 4:
        raise ValueError(f"d_v must be divisible by 4, got {d_v}")
    validate_bbox(bbox)
    x, y, w, h = bbox
    cx, cy = x + w / 2.0, y + h / 2.0
    return np.concatenate([sinusoidal_pe(cx, d_v // 2), sinusoidal_pe(cy, d_v // 2)])


# ------------------------------------------------------------------ regions

@dataclass
class RegionFeature:
    class_id: int
    feature: np.ndarray
    pos2d: np.ndarray


def scene_seed(scene_id: str, noise_seed: int) -> int:
    return (zlib.crc32(scene_id.encode()) ^ (noise_seed * 0x9E3779B1)) & 0xFFFFFFFF


def region_jitter(scene: Scene, d_v: int, sigma: float, noise_seed: int) -> np.ndarray:
    """Per-region Gaussian offsets, ``[len(objects), d_v]``, fixed per scene."""
    if sigma == 0.0 or not scene.objects:
        return np.zeros((len(scene.objects), d_v))
    rng = np.random.default_rng(scene_seed(scene.scene_id, noise_seed))
    return rng.normal(0.0, sigma, size=(len(scene.objects), d_v))


def featurize(scene: Scene, table: np.ndarray, sigma: float = 0.05,
              noise_seed: int = 0) -> list[RegionFeature]:
    n_classes, d_v = table.shape
    for i, o in enumerate(scene.objects):
        if not 0 <= o.class_id < n_classes:
            raise IndexError(f"object {i} has class id {o.class_id} outside [0, {n_classes})")
    jitter = region_jitter(scene, d_v, sigma, noise_seed)
    return [RegionFeature(o.class_id, table[o.class_id] + jitter[i], pos2d_embedding(o.bbox, d_v))
            for i, o in enumerate(scene.objects)]
