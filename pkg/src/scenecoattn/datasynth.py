"""Synthetic kitchen-scene corpus with recoverable proactive intents.

A scene is either built around exactly one intent rule (all of its trigger
classes present, suggestion appended to the description) or built so that no
rule's trigger set is complete. Whether a suggestion is due is therefore a
function of the scene's object set alone.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frontend import SUGGEST_MARKER, Scene, SceneObject, Vocabulary, dump_scenes, load_scenes

DEFAULT_CLASSES = ["cup", "kettle", "teabag", "knife", "bread", "butter",
                   "plate", "bowl", "spoon", "cereal", "milk", "sponge"]

DEFAULT_TEMPLATES = [
    {"instruction": "hand me the {x}", "description": "there is {objects} on the table"},
    {"instruction": "where is the {x}", "description": "the {x} is next to {others}"},
    {"instruction": "pick up the {x}", "description": "picking up the {x} near {others}"},
    {"instruction": "clean the {x}", "description": "cleaning the {x} beside {others}"},
    {"instruction": "move the {x} to the left", "description": "moving the {x} away from {others}"},
    {"instruction": "what is on the table", "description": "i can see {objects}"},
    {"instruction": "bring the {x} to me", "description": "bringing the {x} and leaving {others}"},
    {"instruction": "is there a {x} here", "description": "yes there is the {x} with {others}"},
]

DEFAULT_RULES = [
    {"trigger": ["kettle", "cup"], "suggestion": "boil water for tea"},
    {"trigger": ["knife", "bread"], "suggestion": "slice the bread"},
    {"trigger": ["bowl", "cereal"], "suggestion": "pour the milk"},
    {"trigger": ["sponge", "plate"], "suggestion": "wash the plate"},
]

_FIELDS = {"x", "objects", "others"}


class WorldSpecError(ValueError):
    pass


@dataclass
class TaskTemplate:
    instruction: str
    description: str
    focus: list[str] = field(default_factory=list)   # classes allowed as {x}; empty = any


@dataclass
class IntentRule:
    trigger: list[str]
    suggestion: str


@dataclass
class WorldSpec:
    class_names: list[str]
    task_templates: list[TaskTemplate]
    intent_rules: list[IntentRule]
    trigger_rate: float = 0.5
    min_objects: int = 2
    max_objects: int = 4
    near_miss_rate: float = 0.75     # non-trigger scenes seeded with partial trigger sets

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        names = self.class_names
        if not names or len(set(names)) != len(names):
            raise WorldSpecError("class_names must be non-empty and unique")
        known = set(names)
        if not 0.0 <= self.trigger_rate <= 1.0:
            raise WorldSpecError(f"trigger_rate {self.trigger_rate} outside [0, 1]")
        if not 0.0 <= self.near_miss_rate <= 1.0:
            raise WorldSpecError(f"near_miss_rate {self.near_miss_rate} outside [0, 1]")
        if not 1 <= self.min_objects <= self.max_objects <= len(names):
            raise WorldSpecError("need 1 <= min_objects <= max_objects <= number of classes")
        if not self.task_templates:
            raise WorldSpecError("at least one task template is required")
        for i, t in enumerate(self.task_templates):
            for part in (t.instruction, t.description):
                fields = {f for _, f, _, _ in string.Formatter().parse(part) if f is not None}
                if fields - _FIELDS:
                    raise WorldSpecError(f"task_templates[{i}]: unknown placeholder(s) {sorted(fields - _FIELDS)}")
            for c in t.focus:
                if c not in known:
                    raise WorldSpecError(f"task_templates[{i}].focus: unknown class '{c}'")
        for i, r in enumerate(self.intent_rules):
            if not r.trigger:
                raise WorldSpecError(f"intent_rules[{i}].trigger is empty")
            for c in r.trigger:
                if c not in known:
                    raise WorldSpecError(f"intent_rules[{i}].trigger: unknown class '{c}'")
            if len(r.trigger) > self.max_objects:
                raise WorldSpecError(f"intent_rules[{i}] needs more objects than max_objects")
            if SUGGEST_MARKER in r.suggestion.lower().split():
                raise WorldSpecError(f"intent_rules[{i}].suggestion contains the marker")

    def to_json(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "task_templates": [{"instruction": t.instruction, "description": t.description,
                                "focus": list(t.focus)} for t in self.task_templates],
            "intent_rules": [{"trigger": list(r.trigger), "suggestion": r.suggestion}
                             for r in self.intent_rules],
            "trigger_rate": self.trigger_rate,
            "min_objects": self.min_objects,
            "max_objects": self.max_objects,
            "near_miss_rate": self.near_miss_rate,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WorldSpec":
        try:
            return cls(
                class_names=list(obj["class_names"]),
                task_templates=[TaskTemplate(t["instruction"], t["description"], list(t.get("focus", [])))
                                for t in obj["task_templates"]],
                intent_rules=[IntentRule(list(r["trigger"]), r["suggestion"]) for r in obj["intent_rules"]],
                trigger_rate=float(obj.get("trigger_rate", 0.5)),
                min_objects=int(obj.get("min_objects", 2)),
                max_objects=int(obj.get("max_objects", 4)),
                near_miss_rate=float(obj.get("near_miss_rate", 0.75)),
            )
        except (KeyError, TypeError) as exc:
            raise WorldSpecError(f"malformed world spec: missing or invalid {exc}") from exc

    @classmethod
    def load(cls, path) -> "WorldSpec":
        text = Path(path).read_text()
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise WorldSpecError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        return cls.from_json(obj)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def class_id(self, name: str) -> int:
        return self.class_names.index(name)

    def matching_rules(self, class_ids) -> list[int]:
        present = {self.class_names[c] for c in class_ids}
        return [i for i, r in enumerate(self.intent_rules) if set(r.trigger) <= present]


def default_world() -> WorldSpec:
    return WorldSpec.from_json({"class_names": DEFAULT_CLASSES, "task_templates": DEFAULT_TEMPLATES,
                                "intent_rules": DEFAULT_RULES, "trigger_rate": 0.5})


def oracle_suggestion(spec: WorldSpec, class_ids) -> str | None:
    """Rule-based reference classifier: the suggestion the corpus would attach."""
    hits = spec.matching_rules(class_ids)
    return spec.intent_rules[hits[0]].suggestion if hits else None


@dataclass
class Corpus:
    train: list[Scene]
    val: list[Scene]
    test: list[Scene]
    vocab: Vocabulary
    seed: int
    spec_hash: str
    class_names: list[str]

    def split(self, name: str) -> list[Scene]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split '{name}'")
        return getattr(self, name)

    @property
    def scenes(self) -> list[Scene]:
        return self.train + self.val + self.test


def _list_phrase(names: list[str]) -> str:
    items = [f"the {n}" for n in names]
    if len(items) == 1:
        return items[0]
    return " ".join(items[:-1]) + " and " + items[-1]


def _random_bbox(rng: np.random.Generator) -> tuple[float, float, float, float]:
    w, h = (round(float(v), 4) for v in rng.uniform(0.05, 0.3, size=2))
    x = round(float(rng.uniform(0.0, 1.0 - w)), 4)
    y = round(float(rng.uniform(0.0, 1.0 - h)), 4)
    return (x, y, w, h)


def _sample_objects(spec: WorldSpec, rng: np.random.Generator, rule: int | None,
                    template: TaskTemplate) -> tuple[list[int], int] | None:
    n = len(spec.class_names)
    chosen: set[int] = set()
    if rule is not None:
        chosen |= {spec.class_id(c) for c in spec.intent_rules[rule].trigger}
    focus_pool = [spec.class_id(c) for c in template.focus] or list(range(n))
    focus = int(focus_pool[rng.integers(len(focus_pool))])
    chosen.add(focus)
    allowed = [] if rule is None else [rule]
    if sorted(spec.matching_rules(chosen)) != allowed:
        return None
    k = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    if rule is None and len(spec.intent_rules) > 1 and rng.random() < spec.near_miss_rate:
        # one member from each of two different rules: pairwise evidence, no complete set
        for r in rng.choice(len(spec.intent_rules), size=2, replace=False):
            members = [spec.class_id(c) for c in spec.intent_rules[int(r)].trigger]
            c = members[int(rng.integers(len(members)))]
            if len(chosen) < k and not spec.matching_rules(chosen | {c}):
                chosen.add(c)
    for c in rng.permutation(n):
        if len(chosen) >= k:
            break
        c = int(c)
        if c in chosen:
            continue
        if sorted(spec.matching_rules(chosen | {c})) == allowed:
            chosen.add(c)
    if len(chosen) < spec.min_objects:
        return None
    return sorted(chosen), focus


def _make_scene(spec: WorldSpec, rng: np.random.Generator, index: int) -> Scene:
    proactive = bool(spec.intent_rules) and rng.random() < spec.trigger_rate
    for _ in range(1000):
        template = spec.task_templates[int(rng.integers(len(spec.task_templates)))]
        rule = int(rng.integers(len(spec.intent_rules))) if proactive else None
        picked = _sample_objects(spec, rng, rule, template)
        if picked is not None:
            break
    else:
        raise WorldSpecError("could not sample a scene consistent with the intent rules")
    class_ids, focus = picked
    names = [spec.class_names[c] for c in class_ids]
    x = spec.class_names[focus]
    others = [nm for nm in names if nm != x]
    fields = {"x": x, "objects": _list_phrase(names), "others": _list_phrase(others) if others else "nothing"}
    target = template.description.format(**fields)
    if rule is not None:
        target = f"{target} {SUGGEST_MARKER} {spec.intent_rules[rule].suggestion}"
    order = rng.permutation(len(class_ids))
    objects = [SceneObject(class_ids[i], _random_bbox(rng)) for i in order]
    return Scene(f"s{index:05d}", objects, template.instruction.format(**fields), target, rule is not None)


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(0.8 * n))
    n_val = min(int(round(0.1 * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def generate(spec: WorldSpec, n_scenes: int, seed: int) -> Corpus:
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    rng = np.random.default_rng(seed)
    scenes = [_make_scene(spec, rng, i) for i in range(n_scenes)]
    n_train, n_val, _ = split_sizes(n_scenes)
    vocab = Vocabulary.build(t for s in scenes for t in (s.instruction, s.target))
    return Corpus(scenes[:n_train], scenes[n_train:n_train + n_val], scenes[n_train + n_val:],
                  vocab, seed, spec.digest(), list(spec.class_names))


def build_history(corpus: Corpus) -> list[list[int]]:
    """Training-split scenes as class-presence frames for the relation graph."""
    return [sorted(set(s.class_ids)) for s in corpus.train]


def write_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        (out / f"{name}.jsonl").write_text(dump_scenes(corpus.split(name)))
    corpus.vocab.save(out / "vocab.json")
    frames = "".join(json.dumps({"classes_present": f}) + "\n" for f in build_history(corpus))
    (out / "frames.jsonl").write_text(frames)
    meta = {
        "seed": corpus.seed,
        "spec_hash": corpus.spec_hash,
        "class_names": corpus.class_names,
        "splits": {name: len(corpus.split(name)) for name in ("train", "val", "test")},
        "vocab_size": len(corpus.vocab),
    }
    (out / "corpus_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_corpus(corpus_dir) -> Corpus:
    d = Path(corpus_dir)
    meta = json.loads((d / "corpus_meta.json").read_text())
    n = len(meta["class_names"])
    splits = {name: load_scenes(d / f"{name}.jsonl", n) for name in ("train", "val", "test")}
    return Corpus(splits["train"], splits["val"], splits["test"], Vocabulary.load(d / "vocab.json"),
                  meta["seed"], meta["spec_hash"], meta["class_names"])
