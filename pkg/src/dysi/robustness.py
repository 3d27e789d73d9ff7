"""Prompt perturbations and the auto-completion repetition suite.

A prompt is perturbed (last word repeated, final n-gram duplicated, or
content words replaced), each model continues both the original and the
perturbed prompt, and the suite reports how much the n-gram repetition ratio
of the continuation moves.  Ratios are computed over whitespace words of the
decoded continuation, whatever the model's own token unit.
"""

from __future__ import annotations

import csv
import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from dysi import data as D
from dysi import decoding as dec
from dysi import metrics as M
from dysi.errors import ConfigError, InputError
from dysi.model import Transformer

IDENTITY = "identity"
LAST_WORD = "last-word"
NGRAM = "ngram"
REPLACE = "replacement"
KINDS = (IDENTITY, LAST_WORD, NGRAM, REPLACE)
DEFAULT_LEVELS = {LAST_WORD: (3, 5, 7, 10), NGRAM: (3, 5, 7, 10), REPLACE: (5, 10, 20)}

STOPWORDS = frozenset("""
a about above after again against all am an and any are as at be because been before being
below between both but by can could did do does doing down during each few for from further
had has have having he her here hers herself him himself his how i if in into is it its
itself just me more most my myself no nor not now of off on once only or other our ours
ourselves out over own same she should so some such than that the their theirs them
themselves then there these they this those through to too under until up upon very was we
were what when where which while who whom why will with would you your yours yourself
yourselves said says
""".split())

_PUNCT = re.compile(r"^\W+|\W+$")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    value: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown perturbation kind {self.kind!r}")
        if self.value < 0:
            raise ConfigError("perturbation value must be >= 0")

    @property
    def label(self) -> str:
        return self.kind if self.kind == IDENTITY else f"{self.kind}={self.value}"

    def apply(self, prompt: str, words=None, rng: np.random.Generator | None = None) -> str:
        if self.kind == IDENTITY:
            return prompt
        if self.kind == LAST_WORD:
            return perturb_last_word(prompt, self.value)
        if self.kind == NGRAM:
            return perturb_ngram(prompt, self.value)
        if words is None:
            raise ConfigError("replacement perturbation needs a word list")
        return perturb_replace_words(prompt, self.value, words,
                                     rng if rng is not None else np.random.default_rng(self.seed))


def default_perturbations(kinds=(LAST_WORD, NGRAM, REPLACE), seed: int = 0) -> list[PerturbationSpec]:
    return [PerturbationSpec(k, v, seed) for k in kinds for v in DEFAULT_LEVELS[k]]


def parse_perturbation(text: str, seed: int = 0) -> PerturbationSpec:
    """``identity``, ``last-word=10``, ``ngram=3``, ``replacement=5``."""
    kind, _, value = text.partition("=")
    if kind == IDENTITY:
        return PerturbationSpec(IDENTITY)
    try:
        return PerturbationSpec(kind, int(value), seed)
    except ValueError:
        raise ConfigError(f"bad perturbation {text!r}; expected kind=value") from None


# ---------------------------------------------------------------------------
# prompts and perturbations
# ---------------------------------------------------------------------------

def extract_prompts(paragraphs: Sequence[str], words_per_prompt: int = 50) -> list[str]:
    """First ``words_per_prompt`` words of every paragraph long enough to supply them."""
    if words_per_prompt < 1:
        raise ConfigError("words_per_prompt must be >= 1")
    prompts = []
    for para in paragraphs:
        words = para.split()
        if len(words) >= words_per_prompt:
            prompts.append(" ".join(words[:words_per_prompt]))
    if not prompts:
        raise InputError(f"no paragraph has {words_per_prompt} words")
    return prompts


def perturb_last_word(prompt: str, m: int) -> str:
    words = prompt.split()
    if not words or m == 0:
        return prompt
    return prompt + (" " + words[-1]) * m


def perturb_ngram(prompt: str, n: int) -> str:
    """Duplicate the final ``n`` words once; the whole prompt when ``n`` covers it."""
    words = prompt.split()
    if not words or n == 0:
        return prompt
    return prompt + " " + " ".join(words[-n:])


def _is_content(word: str) -> bool:
    core = _PUNCT.sub("", word).lower()
    return bool(core) and core not in STOPWORDS


def replacement_words(vocab) -> list[str]:
    """Candidate substitutes: a word-level vocabulary minus reserved tokens, or a word list."""
    if isinstance(vocab, D.Vocabulary):
        if vocab.mode != D.WHITESPACE:
            raise ConfigError("replacement needs a word list; got a character vocabulary")
        return vocab.itos[len(D.RESERVED):]
    return sorted(set(vocab) - set(D.RESERVED))


def perturb_replace_words(prompt: str, k: int, vocab, rng: np.random.Generator) -> str:
    """Replace ``k`` distinct words, preferring non-stopwords, with different random words."""
    parts = re.split(r"(\s+)", prompt)
    word_idx = [i for i, t in enumerate(parts) if t and not t.isspace()]
    if k > len(word_idx):
        warnings.warn(f"k={k} exceeds the prompt's {len(word_idx)} words; clamping", stacklevel=2)
        k = len(word_idx)
    if k == 0:
        return prompt
    candidates = replacement_words(vocab)
    if len(candidates) < 2:
        raise ConfigError("need at least two replacement words")
    content = [i for i in word_idx if _is_content(parts[i])]
    pool = content if len(content) >= k else word_idx
    chosen = rng.choice(len(pool), size=k, replace=False)
    index = {w: j for j, w in enumerate(candidates)}
    for c in sorted(chosen):
        pos = pool[c]
        orig = parts[pos]
        if orig in index:
            # uniform over the other candidates
            j = int(rng.integers(len(candidates) - 1))
            parts[pos] = candidates[j + (j >= index[orig])]
        else:
            parts[pos] = candidates[int(rng.integers(len(candidates)))]
    return "".join(parts)


# ---------------------------------------------------------------------------
# completion models
# ---------------------------------------------------------------------------

class CompletionModel(Protocol):
    name: str

    def encode(self, text: str) -> list[int]: ...

    def decode(self, ids) -> str: ...

    def step_fn(self, prompts: list[list[int]]) -> dec.StepFn: ...


class TransformerCompleter:
    """A decoder-only model continuing text prompts."""

    def __init__(self, name: str, model: Transformer, vocab: D.Vocabulary):
        self.name, self.model, self.vocab = name, model, vocab

    def encode(self, text):
        if self.vocab.mode == D.WHITESPACE:
            return self.vocab.encode(text)
        # a character model continues after the separator that follows the prompt
        return self.vocab.encode(text + " ")

    def decode(self, ids):
        return self.vocab.decode(ids)

    def step_fn(self, prompts):
        return dec.ModelStepper(self.model, prompts=prompts)


class _StubBase:
    def __init__(self, name: str, vocab: D.Vocabulary):
        if len(vocab) <= len(D.RESERVED):
            raise ConfigError("stub models need a vocabulary beyond the reserved tokens")
        self.name, self.vocab = name, vocab
        self.V = len(vocab)

    def encode(self, text):
        return self.vocab.encode(text)

    def decode(self, ids):
        return self.vocab.decode(ids)

    def _uniform(self) -> np.ndarray:
        lp = np.full(self.V, -np.inf)
        lp[len(D.RESERVED):] = -np.log(self.V - len(D.RESERVED))
        return lp


class UniformStub(_StubBase):
    """Ignores its context; every non-reserved token is equally likely."""

    def step_fn(self, prompts):
        def fn(rows, prefixes):
            return np.stack([self._uniform() for _ in rows])
        return fn


class RepeatStub(_StubBase):
    """Repeats its last input token once the context ends in a run of ``trigger`` copies.

    Otherwise it samples uniformly.  This is the self-reinforcing loop in
    miniature: a repeated prompt suffix locks it into repetition, an ordinary
    prompt does not.
    """

    def __init__(self, name: str, vocab: D.Vocabulary, trigger: int = 3):
        super().__init__(name, vocab)
        self.trigger = trigger

    def step_fn(self, prompts):
        def fn(rows, prefixes):
            out = []
            for r, p in zip(rows, prefixes):
                ctx = list(prompts[r]) + list(p)
                tail = ctx[-self.trigger:]
                if len(tail) == self.trigger and len(set(tail)) == 1 and tail[0] >= len(D.RESERVED):
                    lp = np.full(self.V, -np.inf)
                    lp[tail[0]] = 0.0
                    out.append(lp)
                else:
                    out.append(self._uniform())
            return np.stack(out)
        return fn


# ---------------------------------------------------------------------------
# the suite
# ---------------------------------------------------------------------------

@dataclass
class CompletionRecord:
    model: str
    prompt_index: int
    prompt: str
    perturbation: str
    perturbed_prompt: str
    original: list[str] = field(default_factory=list)
    perturbed: list[str] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)


@dataclass
class SuiteResult:
    records: list[CompletionRecord]
    rows: list[dict]
    summary: list[dict]


def _continue(model: CompletionModel, prompts: list[str], samples: int, p: float | None,
              budget: int, seed_key: list[int]) -> list[list[str]]:
    """``samples`` continuations per prompt; ``p=None`` decodes greedily."""
    ids = [model.encode(t) for t in prompts]
    step = model.step_fn(ids)
    out = []
    for s in range(samples):
        if p is None:
            toks = dec.greedy_search(step, len(ids), budget).tokens
        else:
            rng = np.random.default_rng(seed_key + [s])
            toks = dec.nucleus_search(step, len(ids), p, budget, rng).tokens
        out.append([model.decode(t) for t in toks])
    return out


def summarize(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["model"], r["kind"], r["value"], r["n"]), []).append(r["delta"])
    summary = []
    for (model, kind, value, n), deltas in groups.items():
        summary.append({"model": model, "kind": kind, "value": value, "n": n,
                        "mean_delta": float(np.mean(deltas)), "std_delta": float(np.std(deltas)),
                        "mean_delta_pct": 100.0 * float(np.mean(deltas)), "n_prompts": len(deltas)})
    return summary


def write_summary_csv(path, summary: list[dict]) -> None:
    cols = ["model", "kind", "value", "n", "mean_delta", "std_delta", "mean_delta_pct", "n_prompts"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(summary)


def run_completion_suite(models: Sequence[CompletionModel], prompts: Sequence[str],
                         perturbations: Sequence[PerturbationSpec], samples_per_model: int = 2,
                         p: float | None = 0.8, budget: int = 200, seed: int = 0,
                         ns=(1, 2, 3), words=None, out_dir=None) -> SuiteResult:
    """|Δ repetition ratio| between continuations of perturbed and original prompts.

    Each (model, prompt, perturbation, n) row averages over all
    ``samples_per_model**2`` pairings of original and perturbed samples.
    With ``out_dir``, rows are appended to ``rows.jsonl`` as they are
    produced and ``summary.csv`` is written even when a later model fails.
    """
    if not prompts:
        raise InputError("no prompts")
    if samples_per_model < 1 or budget < 1:
        raise ConfigError("samples_per_model and budget must be >= 1")
    if p is not None and not 0.0 < p <= 1.0:
        raise ConfigError("nucleus p must be in (0, 1]")
    prompts = list(prompts)
    records: list[CompletionRecord] = []
    rows: list[dict] = []
    fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "rows.jsonl", "w", encoding="utf-8")
    try:
        for model in models:
            original = _continue(model, prompts, samples_per_model, p, budget, [seed, 0])
            orig_rep = {n: [[M.ngram_repetition_ratio(original[s][i], n) for s in range(samples_per_model)]
                            for i in range(len(prompts))] for n in ns}
            for j, spec in enumerate(perturbations):
                perturbed_prompts = [spec.apply(t, words, np.random.default_rng([spec.seed, i]))
                                     for i, t in enumerate(prompts)]
                perturbed = _continue(model, perturbed_prompts, samples_per_model, p, budget,
                                      [seed, 1 + j])
                for i, prompt in enumerate(prompts):
                    rec = CompletionRecord(model.name, i, prompt, spec.label, perturbed_prompts[i],
                                           [o[i] for o in original], [q[i] for q in perturbed])
                    for n in ns:
                        pert_rep = [M.ngram_repetition_ratio(q[i], n) for q in perturbed]
                        deltas = [abs(a - b) for a in pert_rep for b in orig_rep[n][i]]
                        row = {"model": model.name, "prompt_index": i, "perturbation": spec.label,
                               "kind": spec.kind, "value": spec.value, "n": n,
                               "delta": float(np.mean(deltas)),
                               "rep_original": float(np.mean(orig_rep[n][i])),
                               "rep_perturbed": float(np.mean(pert_rep))}
                        rec.rows.append(row)
                        rows.append(row)
                        if fh is not None:
                            fh.write(json.dumps(row) + "\n")
                    records.append(rec)
                if fh is not None:
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()
            write_summary_csv(out_dir / "summary.csv", summarize(rows))
    return SuiteResult(records, rows, summarize(rows))
