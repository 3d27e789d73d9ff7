"""Vocabularies, corpora, batching and the synthetic tasks."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from dysi.errors import ConfigError, InputError, ParseError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

CHAR = "char"
WHITESPACE = "whitespace"


class Vocabulary:
    def __init__(self, tokens: Sequence[str], mode: str = WHITESPACE):
        if mode not in (CHAR, WHITESPACE):
            raise ConfigError(f"unknown tokenization mode {mode!r}")
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        if len(self.stoi) != len(self.itos):
            raise ConfigError("duplicate token in vocabulary")
        self.mode = mode

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos and self.mode == other.mode

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def tokenize(self, text: str) -> list[str]:
        return list(text) if self.mode == CHAR else text.split()

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(t, UNK) for t in self.tokenize(text)]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if strip_special:
                if i == EOS:
                    break
                if i in (PAD, BOS):
                    continue
            out.append(self.itos[i])
        return "".join(out) if self.mode == CHAR else " ".join(out)

    @classmethod
    def synthetic(cls, vocab_size: int) -> "Vocabulary":
        return cls(list(RESERVED) + [f"w{i}" for i in range(4, vocab_size)], WHITESPACE)

    def to_lines(self) -> list[str]:
        return [self.mode] + [repr(t) for t in self.itos]

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> "Vocabulary":
        import ast
        return cls([ast.literal_eval(line) for line in lines[1:]], lines[0])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_lines(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(lines: Iterable[str], mode: str = WHITESPACE, min_count: int = 1) -> Vocabulary:
    """Tokens ordered by descending frequency, ties broken lexicographically."""
    counts: Counter[str] = Counter()
    n_lines = 0
    for line in lines:
        n_lines += 1
        counts.update(list(line) if mode == CHAR else line.split())
    if n_lines == 0 or not counts:
        raise InputError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept, mode)


def encode(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(text)


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    return vocab.decode(ids)


def load_parallel_tsv(path) -> list[tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8", newline=None) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"expected exactly one TAB separator in {path}", line=lineno)
            pairs.append((parts[0], parts[1]))
    return pairs


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class ParallelBatch:
    source: np.ndarray | None
    source_pad: np.ndarray | None
    target_input: np.ndarray
    target_output: np.ndarray
    target_pad: np.ndarray

    @property
    def size(self) -> int:
        return self.target_input.shape[0]

    def n_tokens(self) -> int:
        width = self.target_input.shape[1]
        if self.source is not None:
            width = max(width, self.source.shape[1])
        return self.size * width


def _pad(seqs: Sequence[Sequence[int]], width: int | None = None) -> np.ndarray:
    width = max(len(s) for s in seqs) if width is None else width
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def collate(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], eos: bool = True) -> ParallelBatch:
    """Pad a list of (source ids, target ids); source may be None for LM data."""
    targets = [list(t) + ([EOS] if eos else []) for _, t in pairs]
    tin = [[BOS] + t[:-1] for t in targets]
    target_output = _pad(targets)
    target_input = _pad(tin, target_output.shape[1])
    target_pad = target_output == PAD
    if pairs[0][0] is None:
        return ParallelBatch(None, None, target_input, target_output, target_pad)
    source = _pad([list(s) for s, _ in pairs])
    return ParallelBatch(source, source == PAD, target_input, target_output, target_pad)


def encode_pairs(pairs: Sequence[tuple[str, str]], vocab: Vocabulary) -> list[tuple[list[int], list[int]]]:
    return [(vocab.encode(s), vocab.encode(t)) for s, t in pairs]


def make_batches(pairs, vocab: Vocabulary | None = None, max_tokens: int = 1024,
                 shuffle_seed: int | None = 0) -> list[ParallelBatch]:
    """Length-bucketed, padded batches; no batch exceeds ``max_tokens`` including padding.

    ``pairs`` holds id sequences, or strings when ``vocab`` is given.
    """
    if vocab is not None:
        pairs = encode_pairs(pairs, vocab)
    if not pairs:
        raise InputError("no sequence pairs to batch")

    def cost(p):
        return max(len(p[0]) if p[0] is not None else 0, len(p[1]) + 1)

    order = sorted(range(len(pairs)), key=lambda i: (cost(pairs[i]), i))
    batches, current, width = [], [], 0
    for i in order:
        c = cost(pairs[i])
        if c > max_tokens:
            raise ConfigError(f"sequence of length {c} exceeds max_tokens={max_tokens}")
        new_width = max(width, c)
        if current and new_width * (len(current) + 1) > max_tokens:
            batches.append(collate([pairs[j] for j in current]))
            current, new_width = [], c
        current.append(i)
        width = new_width
    if current:
        batches.append(collate([pairs[j] for j in current]))
    if shuffle_seed is not None:
        perm = np.random.default_rng(shuffle_seed).permutation(len(batches))
        batches = [batches[i] for i in perm]
    return batches


# ---------------------------------------------------------------------------
# synthetic translation tasks
# ---------------------------------------------------------------------------

def _check_task(n, len_range, vocab_size):
    lo, hi = len_range
    if vocab_size <= 4:
        raise ConfigError("vocab_size must exceed the 4 reserved ids")
    if n < 0 or lo < 1 or hi < lo:
        raise ConfigError(f"invalid task parameters n={n}, len_range={len_range}")


def _random_sources(n, len_range, vocab_size, seed):
    _check_task(n, len_range, vocab_size)
    rng = np.random.default_rng(seed)
    lo, hi = len_range
    lengths = rng.integers(lo, hi + 1, size=n)
    return [rng.integers(4, vocab_size, size=L).tolist() for L in lengths]


def gen_copy_task(n: int, len_range=(4, 12), vocab_size: int = 30, seed: int = 0):
    return [(s, list(s)) for s in _random_sources(n, len_range, vocab_size, seed)]


def gen_reverse_task(n: int, len_range=(4, 12), vocab_size: int = 30, seed: int = 0):
    return [(s, s[::-1]) for s in _random_sources(n, len_range, vocab_size, seed)]


def cipher_permutation(vocab_size: int, perm_seed: int = 0) -> np.ndarray:
    """A bijection over ids; reserved ids map to themselves."""
    if vocab_size <= 4:
        raise ConfigError("vocab_size must exceed the 4 reserved ids")
    perm = np.arange(vocab_size)
    perm[4:] = 4 + np.random.default_rng(perm_seed).permutation(vocab_size - 4)
    return perm


def apply_cipher(ids, perm) -> list[int]:
    return [int(perm[i]) for i in ids]


def gen_cipher_task(n: int, len_range=(4, 12), vocab_size: int = 30, seed: int = 0,
                    perm_seed: int = 0):
    """Substitution cipher; the permutation depends only on ``perm_seed`` so
    train/valid/test splits drawn with different ``seed`` share it."""
    perm = cipher_permutation(vocab_size, perm_seed)
    return [(s, apply_cipher(s, perm)) for s in _random_sources(n, len_range, vocab_size, seed)]


SYNTHETIC_TASKS = {"copy": gen_copy_task, "reverse": gen_reverse_task, "cipher": gen_cipher_task}


# ---------------------------------------------------------------------------
# character language-model corpus
# ---------------------------------------------------------------------------

@dataclass
class LMCorpus:
    ids: np.ndarray
    context_len: int
    vocab: Vocabulary

    @property
    def n_windows(self) -> int:
        return max(0, len(self.ids) - self.context_len + 1)

    def window(self, i: int) -> np.ndarray:
        return self.ids[i:i + self.context_len]

    def windows(self) -> list[np.ndarray]:
        return [self.window(i) for i in range(self.n_windows)]

    def batch(self, starts: Sequence[int]) -> ParallelBatch:
        return collate([(None, self.window(int(i)).tolist()) for i in starts], eos=False)

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> ParallelBatch:
        if self.n_windows == 0:
            raise InputError("corpus shorter than the context length")
        return self.batch(rng.integers(0, self.n_windows, size=batch_size))


def gen_char_lm_corpus(text: str, context_len: int, vocab: Vocabulary | None = None,
                       min_count: int = 1) -> LMCorpus:
    """Stride-1 windows of ``context_len`` character ids over ``text``.

    A training example built from a window is BOS-prefixed by ``collate``.
    """
    if context_len < 1:
        raise ConfigError("context_len must be >= 1")
    if vocab is None:
        vocab = build_vocab([text] if text else [" "], CHAR, min_count)
    ids = np.asarray(vocab.encode(text), dtype=np.int64)
    return LMCorpus(ids, context_len, vocab)


_NAMES = ["Anna", "Bertram", "Clara", "Dorian", "Edith", "Felix", "Greta", "Hugo", "Ivy",
          "Jonas", "Kitty", "Lydia", "Martin", "Nora", "Oscar", "Paul", "Quentin", "Rosa",
          "Silas", "Tobias", "Ursula", "Victor", "Walter", "Xavier", "Yvonne", "Zelda"]
_SUBJECTS = ["the old captain", "a young farmer", "the miller", "my sister", "the doctor",
             "the stranger", "her father", "the schoolmaster", "a tired soldier", "the widow",
             "the boy", "our neighbour", "the king", "a quiet girl", "the merchant", "the priest",
             "the miller's daughter", "the well-known painter"]
_VERBS = ["walked to", "looked at", "spoke of", "returned to", "remembered", "thought about",
          "left", "found", "wrote about", "dreamed of", "passed", "watched", "crossed", "built",
          "feared", "sold", "painted", "missed"]
_OBJECTS = ["the river", "the little house", "the market", "an empty road", "the green hill",
            "the church", "the dark forest", "the harbour", "a broken gate", "the long field",
            "the garden", "the bridge", "the mountain pass", "the village", "the cold sea",
            "the inn at Kelso", "the road to York", "the old mill", "a quiet lake"]
_TIMES = ["in the morning", "after the storm", "before supper", "at dawn", "late that night",
          "on a winter evening", "in the spring", "during the long summer", "once again",
          "on Sunday", "in June", "at Christmas"]
_ENDINGS = ["and said nothing", "with a heavy heart", "without a word", "as the bells rang",
            "while the rain fell", "and smiled", "for the last time", "and was glad",
            "though no one knew why", "and began to sing"]
_ADVERBS = ["slowly", "quietly", "at last", "suddenly", "again", "gladly", "often"]
_QUESTIONS = ["Where is the ferry", "Who built this wall", "Why did you come back",
              "What was that noise", "Is it very far", "Shall we go home now"]
_VERBS_SAID = ["asked", "said", "whispered", "cried", "answered"]


def _pick(rng, items):
    return items[int(rng.integers(len(items)))]


def _narrative(rng) -> str:
    subject = _pick(rng, _NAMES) if rng.random() < 0.35 else _pick(rng, _SUBJECTS)
    if rng.random() < 0.15:
        subject += ", who was " + _pick(rng, ["tired", "young", "afraid", "happy", "alone"]) + ","
    parts = [subject]
    if rng.random() < 0.3:
        parts.append(_pick(rng, _ADVERBS))
    parts += [_pick(rng, _VERBS), _pick(rng, _OBJECTS)]
    if rng.random() < 0.6:
        parts.append(_pick(rng, _TIMES))
    s = " ".join(parts)
    if rng.random() < 0.5:
        s += ("; " if rng.random() < 0.2 else " ") + _pick(rng, _ENDINGS)
    return s[0].upper() + s[1:] + ("." if rng.random() < 0.85 else "!")


def _dialogue(rng) -> str:
    q = _pick(rng, _QUESTIONS)
    return f'"{q}?" {_pick(rng, _VERBS_SAID)} {_pick(rng, _NAMES)}.'


def builtin_corpus(n_chars: int = 1_000_000, seed: int = 0) -> str:
    """Deterministic English-like narrative prose, one paragraph per line.

    A stand-in for a real public-domain book when none is available; it
    uses every letter in both cases plus common punctuation.
    """
    rng = np.random.default_rng(seed)
    paragraphs, total = [], 0
    while total < n_chars:
        n = int(rng.integers(5, 10))
        para = " ".join(_dialogue(rng) if rng.random() < 0.12 else _narrative(rng) for _ in range(n))
        paragraphs.append(para)
        total += len(para) + 1
    return "\n".join(paragraphs)[:n_chars]


def load_text(path_or_builtin: str | None, n_chars: int = 1_000_000, seed: int = 0) -> str:
    if path_or_builtin in (None, "", "builtin"):
        return builtin_corpus(n_chars, seed)
    return Path(path_or_builtin).read_text(encoding="utf-8")
