"""Decode a test set with the configured strategy and score it."""

from __future__ import annotations

import math

import numpy as np

from dysi import data as D
from dysi import decoding as dec
from dysi import metrics as M
from dysi.config import DecodingBlock
from dysi.errors import InputError
from dysi.model import ENCODER_DECODER, Transformer


def decode(model: Transformer, decoding: DecodingBlock, sources=None, prompts=None) -> list[list[int]]:
    """Token ids per input under ``decoding.strategy`` (EOS stripped)."""
    kw = {"sources": sources, "prompts": prompts}
    if decoding.strategy == "greedy":
        return dec.greedy_decode(model, max_len=decoding.max_len, **kw).tokens
    if decoding.strategy == "beam":
        return dec.beam_decode(model, beam_size=decoding.beam, gamma=decoding.gamma,
                               max_len=decoding.max_len, **kw)
    rng = np.random.default_rng(decoding.seed)
    return dec.nucleus_sample(model, p=decoding.p, max_len=decoding.max_len, rng=rng, **kw)


def hypothesis_distributions(model: Transformer, sources, hyps, batch_size: int = 64):
    """Model distributions at every step of each hypothesis (its EOS step included)."""
    out = []
    for lo in range(0, len(hyps), batch_size):
        chunk = hyps[lo:lo + batch_size]
        srcs = sources[lo:lo + batch_size] if sources is not None else [None] * len(chunk)
        batch = D.collate(list(zip(srcs, chunk)), eos=True)
        d = model.forward_teacher_forced(batch.source, batch.source_pad,
                                         batch.target_input, batch.target_pad)
        for i in range(len(chunk)):
            out.append(d.probs[i][~batch.target_pad[i]])
    return out


def evaluate(model: Transformer, vocab: D.Vocabulary, pairs, decoding: DecodingBlock,
             extra_refs=None) -> tuple[dict, list[str]]:
    """Metric report and decoded hypotheses for ``pairs`` of (source ids, reference ids).

    ``extra_refs`` holds further reference id lists aligned with ``pairs``
    (one list per extra reference file) for multi-reference BLEU.
    """
    if not pairs:
        raise InputError("empty test set")
    if model.cfg.mode != ENCODER_DECODER:
        raise InputError("evaluate needs an encoder-decoder model and a parallel test set")
    sources = [list(s) for s, _ in pairs]
    hyps = decode(model, decoding, sources=sources)
    refs = [[list(t)] for _, t in pairs]
    for extra in extra_refs or []:
        if len(extra) != len(pairs):
            raise InputError(f"reference file has {len(extra)} lines, expected {len(pairs)}")
        for r, e in zip(refs, extra):
            r.append(list(e))
    hyp_words = [vocab.decode(h).split() for h in hyps]
    ref_words = [[vocab.decode(r).split() for r in rs] for rs in refs]

    bleu = M.corpus_bleu(hyp_words, ref_words)
    single = M.corpus_bleu(hyp_words, [rs[0] for rs in ref_words])
    bleu.entropy = M.generation_entropy(hypothesis_distributions(model, sources, hyps))
    bleu.repetition = {n: float(np.mean([M.ngram_repetition_ratio(h, n) for h in hyp_words]))
                       for n in (1, 2, 3, 4)}

    # teacher-forced token accuracy and exact-match sequence accuracy
    batch_acc, count = 0, 0
    for b in D.make_batches(list(pairs), max_tokens=2048, shuffle_seed=None):
        d = model.forward_teacher_forced(b.source, b.source_pad, b.target_input, b.target_pad)
        keep = ~b.target_pad
        batch_acc += int(((np.argmax(d.probs, -1) == b.target_output) & keep).sum())
        count += int(keep.sum())
    seq_acc = float(np.mean([h == list(t) for h, (_, t) in zip(hyps, pairs)]))

    report = bleu.to_dict()
    report.update({
        "bleu_single_ref": single.bleu,
        "oracle_bleu": M.oracle_sentence_bleu(hyp_words, ref_words),
        "token_accuracy": batch_acc / count,
        "sequence_accuracy": seq_acc,
        "n_sentences": len(pairs),
        "n_references": len(refs[0]),
        "strategy": decoding.strategy,
    })
    for k, v in report.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise InputError(f"metric {k} is not finite")
    return report, [vocab.decode(h) for h in hyps]
