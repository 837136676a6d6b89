"""Trigger precision/recall/F1 and corpus BLEU."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .model import predict
from .frontend import BOS, EOS, PAD, SUGGEST, SUGGEST_MARKER, Scene, Vocabulary, normalize

REPORT_SCHEMA_VERSION = 1


@dataclass
class TriggerOutcome:
    scene_id: str
    expected: bool
    fired: bool
    suggestion_text: list[str] = field(default_factory=list)

    def __post_init__(self):
        if bool(self.suggestion_text) and not self.fired:
            raise ValueError("suggestion text present but trigger did not fire")


@dataclass
class TriggerCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def _ratio(num: int, den: int, counts: TriggerCounts) -> float:
    if den:
        return num / den
    # nothing expected and nothing fired counts as perfect
    return 1.0 if counts.tp == counts.fp == counts.fn == 0 else 0.0


def trigger_metrics(outcomes: Sequence[TriggerOutcome]) -> tuple[float, float, float, TriggerCounts]:
    if not outcomes:
        raise ValueError("trigger_metrics needs at least one outcome")
    c = TriggerCounts()
    for o in outcomes:
        if o.expected and o.fired:
            c.tp += 1
        elif o.fired:
            c.fp += 1
        elif o.expected:
            c.fn += 1
        else:
            c.tn += 1
    p = _ratio(c.tp, c.tp + c.fp, c)
    r = _ratio(c.tp, c.tp + c.fn, c)
    return p, r, f1_score(p, r), c


# ---------------------------------------------------------------------- BLEU

def ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _as_refs(ref) -> list[Sequence[Hashable]]:
    if ref and isinstance(ref[0], (list, tuple)):
        return list(ref)
    return [ref]


def modified_precision(candidates, references, n: int) -> tuple[int, int]:
    """Corpus totals of clipped n-gram matches and candidate n-grams."""
    matched = total = 0
    for cand, ref in zip(candidates, references):
        counts = ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in _as_refs(ref):
            max_ref |= ngrams(r, n)
        matched += sum(min(c, max_ref[g]) for g, c in counts.items())
        total += sum(counts.values())
    return matched, total


def _closest_ref_len(cand_len: int, refs) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def bleu(candidates: Sequence[Sequence[Hashable]], references: Sequence, max_n: int = 4,
         smoothing: bool = True) -> float:
    """Corpus BLEU with uniform weights over 1..max_n.

    With ``smoothing`` an order n >= 2 with no clipped match uses
    (matches + 1) / (total + 1) instead of collapsing the score to zero.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("BLEU of an empty corpus is undefined")
    c_len = sum(len(c) for c in candidates)
    r_len = sum(_closest_ref_len(len(c), _as_refs(r)) for c, r in zip(candidates, references))
    if c_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        m, t = modified_precision(candidates, references, n)
        if m == 0:
            if not smoothing or n == 1:
                return 0.0
            m, t = m + 1, t + 1
        log_p += math.log(m / t) / max_n
    bp = math.exp(min(0.0, 1.0 - r_len / c_len))
    return bp * math.exp(log_p)


# ---------------------------------------------------------------------- evaluation

def split_output(ids: Sequence[int], vocab: Vocabulary) -> tuple[list[str], bool, list[str]]:
    """(description tokens, fired, suggestion tokens) from generated ids."""
    words = [vocab.tokens[i] for i in ids if i not in (PAD, BOS, EOS)]
    if SUGGEST in ids:
        k = words.index(SUGGEST_MARKER)
        return words[:k], True, words[k + 1:]
    return words, False, []


def split_reference(text: str) -> tuple[list[str], list[str]]:
    words = normalize(text)
    if SUGGEST_MARKER in words:
        k = words.index(SUGGEST_MARKER)
        return words[:k], words[k + 1:]
    return words, []


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    bleu: float
    tp: int
    fp: int
    fn: int
    tn: int
    n_scenes: int
    suggestion_accuracy: float      # exact-match suggestion text among correctly fired scenes
    variant: str = "full"
    split: str = "test"

    def to_json(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, **asdict(self)}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def evaluate_outputs(scenes: Sequence[Scene], outputs: Sequence[Sequence[int]], vocab: Vocabulary,
                     variant: str = "full", split: str = "test") -> EvalReport:
    outcomes, cands, refs = [], [], []
    correct_suggestions = 0
    for scene, ids in zip(scenes, outputs, strict=True):
        desc, fired, sugg = split_output(ids, vocab)
        ref_desc, ref_sugg = split_reference(scene.target)
        outcomes.append(TriggerOutcome(scene.scene_id, scene.expects_trigger, fired, sugg))
        cands.append(desc)
        refs.append(ref_desc)
        if fired and scene.expects_trigger and sugg == ref_sugg:
            correct_suggestions += 1
    p, r, f1, c = trigger_metrics(outcomes)
    return EvalReport(p, r, f1, bleu(cands, refs), c.tp, c.fp, c.fn, c.tn, len(scenes),
                      correct_suggestions / c.tp if c.tp else 0.0, variant, split)


def evaluate(params: dict[str, np.ndarray], cfg, vocab: Vocabulary, scenes: Sequence[Scene],
             relation_matrix: np.ndarray | None, split: str = "test") -> EvalReport:
    """Greedy-decode every scene and score triggers and description BLEU."""
    outputs = predict(params, list(scenes), vocab, relation_matrix, cfg)
    variant = "no-graph" if cfg.ablate_graph else "full"
    return evaluate_outputs(scenes, outputs, vocab, variant, split)


def render_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text table with Precision, Recall, F1, BLEU columns."""
    head = f"{'Model':<14} {'Split':<6} {'Precision':>9} {'Recall':>7} {'F1':>6} {'BLEU':>6}"
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(f"{r.variant:<14} {r.split:<6} {r.precision:>9.3f} {r.recall:>7.3f} {r.f1:>6.3f} {r.bleu:>6.3f}")
    return "\n".join(lines)
