"""A small pre-LN transformer (encoder-decoder or decoder-only).

The same parameter dict serves both the teacher-forced (expert) pass and the
operative (learner) pass; the two passes differ only in their decoder inputs,
dropout, and whether a graph is recorded.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from dysi import tensor as T
from dysi.errors import ConfigError, ShapeError
from dysi.tensor import Tensor

NEG_INF = -1e9

ENCODER_DECODER = "encoder-decoder"
DECODER_ONLY = "decoder-only"


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 128
    dropout: float = 0.1
    max_positions: int = 64
    mode: str = ENCODER_DECODER

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.mode not in (ENCODER_DECODER, DECODER_ONLY):
            raise ConfigError(f"unknown model mode {self.mode!r}")
        if self.vocab_size < 1 or self.max_positions < 1:
            raise ConfigError("vocab_size and max_positions must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepDistributions:
    """Per-step output distributions of one decoder pass.

    ``log_probs`` is a [B, T, V] tensor (with a graph for the operative pass);
    ``probs`` its exponent as a plain array; ``pad_mask`` is True at padding.
    """

    log_probs: Tensor
    probs: np.ndarray
    pad_mask: np.ndarray

    @property
    def shape(self):
        return self.probs.shape


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32,
                zero_output: bool = False) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f, V = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
    params: dict[str, np.ndarray] = {}

    def dense(name, n_in, n_out):
        params[f"{name}.w"] = rng.normal(0.0, n_in ** -0.5, size=(n_in, n_out))
        params[f"{name}.b"] = np.zeros(n_out)

    def norm(name):
        params[f"{name}.g"] = np.ones(d)
        params[f"{name}.b"] = np.zeros(d)

    def attn(name):
        for proj in ("q", "k", "v", "o"):
            dense(f"{name}.{proj}", d, d)

    def ffn(name):
        dense(f"{name}.fc1", d, f)
        dense(f"{name}.fc2", f, d)

    if cfg.mode == ENCODER_DECODER:
        params["enc.tok"] = rng.normal(0.0, d ** -0.5, size=(V, d))
        params["enc.pos"] = rng.normal(0.0, 0.02, size=(cfg.max_positions, d))
        for i in range(cfg.n_layers):
            norm(f"enc.{i}.ln1")
            attn(f"enc.{i}.self")
            norm(f"enc.{i}.ln2")
            ffn(f"enc.{i}.ffn")
        norm("enc.ln")
    params["dec.tok"] = rng.normal(0.0, d ** -0.5, size=(V, d))
    params["dec.pos"] = rng.normal(0.0, 0.02, size=(cfg.max_positions, d))
    for i in range(cfg.n_layers):
        norm(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        if cfg.mode == ENCODER_DECODER:
            norm(f"dec.{i}.ln2")
            attn(f"dec.{i}.cross")
        norm(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ffn")
    norm("dec.ln")
    dense("out", d, V)
    if zero_output:
        params["out.w"][:] = 0.0
    return {k: Tensor(v, requires_grad=True, dtype=dtype, name=k) for k, v in params.items()}


class Transformer:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, **kw) -> "Transformer":
        return cls(cfg, init_params(cfg, seed, **kw))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Transformer":
        params = {k: Tensor(p.data.astype(dtype), requires_grad=True, name=k)
                  for k, p in self.params.items()}
        return Transformer(self.cfg, params)

    # -- building blocks ---------------------------------------------------

    def _p(self, name):
        return self.params[name]

    def _dense(self, x, name):
        return T.linear(x, self._p(f"{name}.w"), self._p(f"{name}.b"))

    def _norm(self, x, name):
        return T.layer_norm(x, self._p(f"{name}.g"), self._p(f"{name}.b"))

    def _split_heads(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        H = self.cfg.n_heads
        return x.reshape(B, L, H, self.cfg.d_model // H).transpose(0, 2, 1, 3)

    def _merge_heads(self, x: Tensor) -> Tensor:
        B, H, L, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)

    def _attention(self, x, kv, name, bias):
        q = self._split_heads(self._dense(x, f"{name}.q"))
        k = self._split_heads(self._dense(kv, f"{name}.k"))
        v = self._split_heads(self._dense(kv, f"{name}.v"))
        ctx = self._merge_heads(T.attention(q, k, v, bias))
        return self._dense(ctx, f"{name}.o")

    def _ffn(self, x, name):
        return self._dense(T.relu(self._dense(x, f"{name}.fc1")), f"{name}.fc2")

    def _embed(self, ids, prefix, rng):
        ids = np.asarray(ids)
        L = ids.shape[1]
        if L > self.cfg.max_positions:
            raise ShapeError(f"sequence length {L} exceeds max_positions {self.cfg.max_positions}")
        tok = T.embedding(self._p(f"{prefix}.tok"), ids)
        pos = T.embedding(self._p(f"{prefix}.pos"), np.arange(L))
        return T.dropout(tok + pos, self.cfg.dropout, rng)

    # -- passes ------------------------------------------------------------

    def encode(self, source, src_pad, rng=None) -> Tensor:
        if self.cfg.mode != ENCODER_DECODER:
            raise ConfigError("encode() needs an encoder-decoder model")
        src_pad = np.asarray(src_pad, dtype=bool)
        bias = np.where(src_pad, NEG_INF, 0.0).astype(self.dtype)[:, None, None, :]
        x = self._embed(source, "enc", rng)
        for i in range(self.cfg.n_layers):
            h = self._norm(x, f"enc.{i}.ln1")
            x = x + T.dropout(self._attention(h, h, f"enc.{i}.self", bias), self.cfg.dropout, rng)
            h = self._norm(x, f"enc.{i}.ln2")
            x = x + T.dropout(self._ffn(h, f"enc.{i}.ffn"), self.cfg.dropout, rng)
        return self._norm(x, "enc.ln")

    def decode(self, target_input, tgt_pad=None, memory: Tensor | None = None,
               src_pad=None, rng=None) -> Tensor:
        """Logits [B, T, V] for every decoder input position."""
        target_input = np.asarray(target_input)
        B, L = target_input.shape
        if tgt_pad is None:
            tgt_pad = np.zeros((B, L), dtype=bool)
        causal = np.triu(np.ones((L, L), dtype=bool), k=1)
        blocked = causal[None, :, :] | np.asarray(tgt_pad, dtype=bool)[:, None, :]
        self_bias = np.where(blocked, NEG_INF, 0.0).astype(self.dtype)[:, None, :, :]
        cross_bias = None
        if self.cfg.mode == ENCODER_DECODER:
            if memory is None:
                raise ConfigError("encoder-decoder decode() needs encoder memory")
            cross_bias = np.where(np.asarray(src_pad, dtype=bool), NEG_INF, 0.0)
            cross_bias = cross_bias.astype(self.dtype)[:, None, None, :]
        x = self._embed(target_input, "dec", rng)
        for i in range(self.cfg.n_layers):
            h = self._norm(x, f"dec.{i}.ln1")
            x = x + T.dropout(self._attention(h, h, f"dec.{i}.self", self_bias), self.cfg.dropout, rng)
            if cross_bias is not None:
                h = self._norm(x, f"dec.{i}.ln2")
                x = x + T.dropout(self._attention(h, memory, f"dec.{i}.cross", cross_bias),
                                  self.cfg.dropout, rng)
            h = self._norm(x, f"dec.{i}.ln3")
            x = x + T.dropout(self._ffn(h, f"dec.{i}.ffn"), self.cfg.dropout, rng)
        return self._dense(self._norm(x, "dec.ln"), "out")

    def _check_ids(self, *arrays):
        for a in arrays:
            if a is None:
                continue
            a = np.asarray(a)
            if a.size and (a.min() < 0 or a.max() >= self.cfg.vocab_size):
                raise IndexError(f"token id out of range [0, {self.cfg.vocab_size})")

    def _run(self, source, src_pad, decoder_input, tgt_pad, rng) -> StepDistributions:
        self._check_ids(source, decoder_input)
        memory = None
        if self.cfg.mode == ENCODER_DECODER:
            memory = self.encode(source, src_pad, rng)
        logits = self.decode(decoder_input, tgt_pad, memory, src_pad, rng)
        log_probs = T.log_softmax(logits, axis=-1)
        if tgt_pad is None:
            tgt_pad = np.zeros(np.asarray(decoder_input).shape, dtype=bool)
        return StepDistributions(log_probs, np.exp(log_probs.data), np.asarray(tgt_pad, dtype=bool))

    def forward_teacher_forced(self, source, src_pad, target_input, tgt_pad) -> StepDistributions:
        """Expert pass: ground-truth prefixes, dropout off, no graph."""
        with T.no_grad():
            return self._run(source, src_pad, target_input, tgt_pad, rng=None)

    def forward_operative(self, source, src_pad, mixed_input, tgt_pad, rng=None) -> StepDistributions:
        """Learner pass over mixed prefixes; dropout is active when ``rng`` is given."""
        return self._run(source, src_pad, mixed_input, tgt_pad, rng)


def greedy_predictions(dists: StepDistributions | np.ndarray) -> np.ndarray:
    """argmax over the vocabulary per step; np.argmax keeps the lowest id on ties."""
    probs = dists.probs if isinstance(dists, StepDistributions) else np.asarray(dists)
    return np.argmax(probs, axis=-1)
