"""Greedy, beam and nucleus decoding.

The search routines work on a *step function*: given a list of
``(row, prefix)`` pairs it returns next-token log-probabilities ``[n, V]``.
``ModelStepper`` adapts a Transformer (either mode) to that interface, while
tests can plug in a lookup table.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from dysi import tensor as T
from dysi.data import BOS, EOS, PAD
from dysi.errors import ConfigError
from dysi.model import ENCODER_DECODER, Transformer

StepFn = Callable[[Sequence[int], Sequence[Sequence[int]]], np.ndarray]


class ModelStepper:
    """Next-token log-probabilities from a model, for a batch of sources/prompts.

    In encoder-decoder mode ``sources`` are encoded once.  In decoder-only mode
    ``prompts`` (if any) are prepended to every prefix after BOS; decoder inputs
    longer than ``max_positions`` keep BOS and the most recent tokens.
    """

    def __init__(self, model: Transformer, sources=None, prompts=None):
        self.model = model
        self.memory = None
        self.src_pad = None
        if model.cfg.mode == ENCODER_DECODER:
            if sources is None:
                raise ConfigError("encoder-decoder decoding needs source sequences")
            width = max(1, max(len(s) for s in sources))
            src = np.full((len(sources), width), PAD, dtype=np.int64)
            for i, s in enumerate(sources):
                src[i, :len(s)] = s
            self.src_pad = src == PAD
            with T.no_grad():
                self.memory = model.encode(src, self.src_pad)
        n = len(sources) if sources is not None else len(prompts) if prompts is not None else 1
        self.prompts = [list(p) for p in prompts] if prompts is not None else [[] for _ in range(n)]

    def __call__(self, rows: Sequence[int], prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        # BOS stays at position 0, as in training windows; the history keeps its newest tokens
        keep = self.model.cfg.max_positions - 1
        seqs = []
        for r, p in zip(rows, prefixes):
            hist = self.prompts[r] + list(p)
            seqs.append([BOS] + (hist[-keep:] if keep > 0 else []))
        lengths = np.array([len(s) for s in seqs])
        width = int(lengths.max())
        # right-aligned rows would shift positions; left-align and pick each row's last slot
        dec = np.full((len(seqs), width), PAD, dtype=np.int64)
        for i, s in enumerate(seqs):
            dec[i, :len(s)] = s
        pad = np.arange(width)[None, :] >= lengths[:, None]
        memory = src_pad = None
        if self.memory is not None:
            idx = np.asarray(rows)
            memory = T.Tensor(self.memory.data[idx])
            src_pad = self.src_pad[idx]
        with T.no_grad():
            logits = self.model.decode(dec, pad, memory, src_pad)
        last = logits.data[np.arange(len(seqs)), lengths - 1].astype(np.float64)
        # padding and BOS never appear in generated text
        last[:, [PAD, BOS]] = -np.inf
        return T.log_softmax_array(last, -1)


# ---------------------------------------------------------------------------
# greedy
# ---------------------------------------------------------------------------

@dataclass
class DecodeResult:
    tokens: list[list[int]]
    step_probs: list[list[np.ndarray]] = field(default_factory=list)


def greedy_search(step_fn: StepFn, n_rows: int, max_len: int, eos: int | None = EOS) -> DecodeResult:
    """argmax decoding for ``n_rows`` independent sequences (lowest id wins ties)."""
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    out: list[list[int]] = [[] for _ in range(n_rows)]
    probs: list[list[np.ndarray]] = [[] for _ in range(n_rows)]
    alive = list(range(n_rows))
    for _ in range(max_len):
        if not alive:
            break
        lp = step_fn(alive, [out[r] for r in alive])
        nxt = np.argmax(lp, axis=-1)
        still = []
        for i, r in enumerate(alive):
            probs[r].append(np.exp(lp[i]))
            tok = int(nxt[i])
            if eos is not None and tok == eos:
                continue
            out[r].append(tok)
            still.append(r)
        alive = still
    return DecodeResult(out, probs)


def greedy_decode(model: Transformer, sources=None, max_len: int = 50, prompts=None) -> DecodeResult:
    stepper = ModelStepper(model, sources, prompts)
    return greedy_search(stepper, len(stepper.prompts), max_len)


# ---------------------------------------------------------------------------
# beam
# ---------------------------------------------------------------------------

@dataclass
class BeamHypothesis:
    tokens: list[int]
    logprob: float
    finished: bool = False
    gamma: float = 0.0

    @property
    def length(self) -> int:
        return max(1, len(self.tokens))

    @property
    def score(self) -> float:
        return self.logprob / (self.length ** self.gamma)


def beam_search(step_fn: StepFn, row: int, beam_size: int, gamma: float, max_len: int,
                eos: int | None = EOS) -> BeamHypothesis:
    """Best hypothesis by ``logprob / len**gamma``; ``len`` counts EOS when present.

    Candidates are ranked by cumulative log-probability; ties go to the
    earlier beam, then the lower token id, so ``beam_size=1`` is greedy.
    """
    if beam_size < 1:
        raise ConfigError("beam_size must be >= 1")
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    alive = [BeamHypothesis([], 0.0, gamma=gamma)]
    finished: list[BeamHypothesis] = []
    for step in range(max_len):
        lp = step_fn([row] * len(alive), [h.tokens for h in alive])
        V = lp.shape[-1]
        cand = (np.array([h.logprob for h in alive])[:, None] + lp).reshape(-1)
        order = np.argsort(-cand, kind="stable")
        next_alive = []
        for flat in order:
            if len(next_alive) >= beam_size:
                break
            b, tok = divmod(int(flat), V)
            score = float(cand[flat])
            if not np.isfinite(score):
                break
            hyp = BeamHypothesis(alive[b].tokens + [tok], score, gamma=gamma)
            if eos is not None and tok == eos:
                hyp.finished = True
                finished.append(hyp)
                if len(finished) >= beam_size:
                    break
            else:
                next_alive.append(hyp)
        alive = next_alive
        if len(finished) >= beam_size or not alive:
            break
    for h in alive:
        h.finished = True
    pool = finished + alive
    best = max(range(len(pool)), key=lambda i: (pool[i].score, -i))
    return pool[best]


def beam_decode(model: Transformer, sources=None, beam_size: int = 5, gamma: float = 0.2,
                max_len: int = 50, prompts=None) -> list[list[int]]:
    """Best token ids per source (EOS stripped)."""
    if beam_size < 1:
        raise ConfigError("beam_size must be >= 1")
    stepper = ModelStepper(model, sources, prompts)
    out = []
    for r in range(len(stepper.prompts)):
        hyp = beam_search(stepper, r, beam_size, gamma, max_len)
        toks = hyp.tokens[:-1] if hyp.tokens and hyp.tokens[-1] == EOS else hyp.tokens
        out.append(toks)
    return out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def ancestral_sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw in token-id order from an unnormalized weight vector."""
    cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def nucleus_mask(probs: np.ndarray, p: float) -> np.ndarray:
    """Smallest highest-probability set whose mass reaches ``p`` (ties: lower id first)."""
    if not 0.0 < p <= 1.0:
        raise ConfigError("nucleus p must be in (0, 1]")
    probs = np.asarray(probs, dtype=np.float64)
    if p >= 1.0:
        return np.ones(probs.shape, dtype=bool)
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order]) / probs.sum()
    # float32 model outputs rarely sum to exactly p at the boundary
    hit = np.nonzero(cum >= p - 1e-7)[0]
    k = int(hit[0]) + 1 if hit.size else len(order)
    mask = np.zeros(probs.shape, dtype=bool)
    mask[order[:k]] = True
    return mask


def nucleus_renormalize(probs: np.ndarray, p: float) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    kept = np.where(nucleus_mask(probs, p), probs, 0.0)
    return kept / kept.sum()


def nucleus_draw(probs: np.ndarray, p: float, rng: np.random.Generator) -> int:
    probs = np.asarray(probs, dtype=np.float64)
    return ancestral_sample(np.where(nucleus_mask(probs, p), probs, 0.0), rng)


def nucleus_search(step_fn: StepFn, n_rows: int, p: float, max_len: int,
                   rng: np.random.Generator, eos: int | None = EOS) -> DecodeResult:
    if not 0.0 < p <= 1.0:
        raise ConfigError("nucleus p must be in (0, 1]")
    out: list[list[int]] = [[] for _ in range(n_rows)]
    alive = list(range(n_rows))
    for _ in range(max_len):
        if not alive:
            break
        lp = step_fn(alive, [out[r] for r in alive])
        still = []
        for i, r in enumerate(alive):
            tok = nucleus_draw(np.exp(lp[i]), p, rng)
            if eos is not None and tok == eos:
                continue
            out[r].append(tok)
            still.append(r)
        alive = still
    return DecodeResult(out)


def nucleus_sample(model: Transformer, prompts, p: float = 0.8, max_len: int = 200,
                   rng: np.random.Generator | None = None, sources=None) -> list[list[int]]:
    """Continuations for each prompt (decoder-only) or source (encoder-decoder)."""
    if not 0.0 < p <= 1.0:
        raise ConfigError("nucleus p must be in (0, 1]")
    rng = np.random.default_rng(0) if rng is None else rng
    stepper = ModelStepper(model, sources, prompts)
    return nucleus_search(stepper, len(stepper.prompts), p, max_len, rng).tokens
