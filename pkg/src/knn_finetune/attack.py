"""Greedy word-substitution attack and after-attack accuracy.

Words are ranked once by how much deleting them lowers the gold-class
score; the attacker then walks that ranking, replacing each word with the
lexicon candidate that lowers the gold score most, until the prediction
flips or the substitution budget is spent.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, Example, tokenize


class SynonymLexicon:
    """Case-normalized word -> ordered substitute list."""

    def __init__(self, entries=None):
        self._map: dict[str, list[str]] = {}
        for word, cands in (entries or {}).items():
            self.add(word, cands)

    def add(self, word: str, candidates) -> None:
        w = word.lower()
        seen, out = {w}, []
        for c in candidates:
            c = c.strip().lower()
            if c and c not in seen:
                seen.add(c)
                out.append(c)
        if out:
            self._map[w] = out

    def get(self, word: str) -> list[str]:
        return self._map.get(word.lower(), [])

    def __len__(self) -> int:
        return len(self._map)

    @classmethod
    def load(cls, path) -> "SynonymLexicon":
        lex = cls()
        with Path(path).open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                word, sep, rest = line.partition("\t")
                if not sep:
                    raise ValueError(f"{path}:{lineno}: expected 'word\\tcand1,cand2,...'")
                lex.add(word, rest.split(","))
        return lex


@dataclass(frozen=True)
class AttackOutcome:
    success: bool
    adversarial_text: str
    substitutions: int
    queries: int


class _CountingScorer:
    def __init__(self, model):
        self.model = model
        self.queries = 0

    def __call__(self, tokens: list[str]) -> np.ndarray:
        self.queries += 1
        return self.model.score(" ".join(tokens))


def _importance(score, tokens: list[str], gold: int, base: float) -> list[int]:
    drops = []
    for i in range(len(tokens)):
        s = score(tokens[:i] + tokens[i + 1 :])
        drops.append(base - s[gold])
    # stable sort: equal importance keeps position order
    return sorted(range(len(tokens)), key=lambda i: -drops[i])


def word_importance(model, example: Example) -> list[int]:
    """Token positions ordered by deletion importance for the gold label."""
    tokens = tokenize(example.text)
    score = _CountingScorer(model)
    base = score(tokens)[example.label]
    return _importance(score, tokens, example.label, base)


def greedy_substitution_attack(model, example: Example, lexicon: SynonymLexicon,
                               max_sub_fraction: float = 0.3) -> AttackOutcome:
    """Attack ``model`` (anything with ``score(text) -> probabilities``)."""
    tokens = tokenize(example.text)
    gold = example.label
    score = _CountingScorer(model)
    s = score(tokens)
    if int(np.argmax(s)) != gold:
        return AttackOutcome(True, " ".join(tokens), 0, score.queries)
    budget = math.ceil(max_sub_fraction * len(tokens))
    if budget == 0 or len(lexicon) == 0:
        return AttackOutcome(False, " ".join(tokens), 0, score.queries)

    order = _importance(score, tokens, gold, s[gold])
    current = list(tokens)
    subs = 0
    for pos in order:
        cands = lexicon.get(current[pos])
        if not cands:
            continue
        best, best_s = None, None
        for c in cands:
            trial = current[:pos] + [c] + current[pos + 1 :]
            sc = score(trial)
            if best_s is None or sc[gold] < best_s[gold]:
                best, best_s = c, sc
        current[pos] = best
        subs += 1
        if int(np.argmax(best_s)) != gold:
            return AttackOutcome(True, " ".join(current), subs, score.queries)
        if subs >= budget:
            break
    return AttackOutcome(False, " ".join(current), subs, score.queries)


def after_attack_accuracy(model, dataset: Dataset, lexicon: SynonymLexicon,
                          max_sub_fraction: float = 0.3):
    """Fraction of examples still classified correctly after the attack.

    Returns ``(accuracy, outcomes)``; examples misclassified before the
    attack count as failures of the model (successes of the attacker).
    """
    outcomes = [greedy_substitution_attack(model, ex, lexicon, max_sub_fraction) for ex in dataset]
    survived = sum(not o.success for o in outcomes)
    return survived / len(dataset), outcomes


def outcomes_to_json_lines(dataset: Dataset, outcomes) -> str:
    lines = []
    for ex, o in zip(dataset, outcomes):
        lines.append(json.dumps({"example_id": ex.id, **asdict(o)}, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")
