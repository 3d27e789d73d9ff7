"""Task construction and the training loop (logging, checkpoints, resume, hot start)."""

from __future__ import annotations

import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dysi import checkpoint as C
from dysi import data as D
from dysi import scheduling as S
from dysi import tensor as T
from dysi.config import RunConfig
from dysi.errors import CheckpointError, LockError
from dysi.imitation import ObjectiveConfig, StepReport, train_step
from dysi.model import ModelConfig, Transformer
from dysi.optim import OptimizerState, lr_inverse_sqrt

log = logging.getLogger("dysi")

METRIC_FIELDS = ("step", "loss_total", "loss_mle", "loss_il", "acc", "mean_N", "epsilon", "lr")


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------

@dataclass
class TaskData:
    kind: str
    vocab: D.Vocabulary
    train: list | D.LMCorpus
    valid: list | D.LMCorpus
    test: list | D.LMCorpus | None = None


def build_task(cfg: RunConfig) -> TaskData:
    t = cfg.task
    if t.kind in D.SYNTHETIC_TASKS:
        gen = D.SYNTHETIC_TASKS[t.kind]
        extra = {"perm_seed": t.perm_seed} if t.kind == "cipher" else {}
        rng_lens = (t.min_len, t.max_len)
        splits = [gen(n, rng_lens, t.vocab_size, seed=t.data_seed + i, **extra)
                  for i, n in enumerate((t.train_size, t.valid_size, t.test_size))]
        return TaskData(t.kind, D.Vocabulary.synthetic(t.vocab_size), *splits)
    if t.kind == "parallel":
        train_text = D.load_parallel_tsv(t.train_path)
        lines = [s for s, _ in train_text] + [y for _, y in train_text]
        vocab = D.build_vocab(lines, t.tokenization, t.min_count)
        train = D.encode_pairs(train_text, vocab)
        if t.valid_path:
            valid = D.encode_pairs(D.load_parallel_tsv(t.valid_path), vocab)
        else:
            cut = max(1, int(len(train) * t.valid_fraction))
            train, valid = train[:-cut], train[-cut:]
        test = D.encode_pairs(D.load_parallel_tsv(t.test_path), vocab) if t.test_path else None
        return TaskData(t.kind, vocab, train, valid, test)
    # language modelling over one long text
    text = D.load_text(t.train_path, t.lm_chars, t.data_seed)
    if t.valid_path:
        train_text, valid_text = text, D.load_text(t.valid_path)
    else:
        cut = int(len(text) * (1.0 - t.valid_fraction))
        train_text, valid_text = text[:cut], text[cut:]
    vocab = D.build_vocab([train_text], t.tokenization, t.min_count)
    to_corpus = (D.gen_char_lm_corpus if t.tokenization == D.CHAR else _word_lm_corpus)
    return TaskData(t.kind, vocab, to_corpus(train_text, t.context_len, vocab),
                    to_corpus(valid_text, t.context_len, vocab))


def _word_lm_corpus(text: str, context_len: int, vocab: D.Vocabulary) -> D.LMCorpus:
    return D.LMCorpus(np.asarray(vocab.encode(text), dtype=np.int64), context_len, vocab)


def model_config(cfg: RunConfig, vocab: D.Vocabulary) -> ModelConfig:
    m = cfg.model
    return ModelConfig(vocab_size=len(vocab), d_model=m.d_model, n_heads=m.n_heads,
                       n_layers=m.n_layers, ffn_dim=m.ffn_dim, dropout=m.dropout,
                       max_positions=m.max_positions, mode=m.mode)


def objective_config(cfg: RunConfig) -> ObjectiveConfig:
    tr = cfg.training
    kind = {"mle": S.TEACHER_FORCING, "vanilla-ss": S.VANILLA_SS}.get(tr.objective, S.DYNAMIC)
    c = tr.c if tr.c > 0 else 1.0 / max(1, tr.max_steps)
    sched = S.SchedulerConfig(kind=kind, beta=tr.beta, decay_scheme=tr.decay_scheme, k=tr.k,
                              decay_unit=tr.decay_unit, c=c, eps_min=tr.eps_min, seed=tr.seed)
    return ObjectiveConfig(tr.objective, tr.alpha, tr.label_smoothing, sched)


class BatchStream:
    """Deterministic batch for any global step, so resumed runs see the same data."""

    def __init__(self, task: TaskData, cfg: RunConfig):
        self.task, self.cfg = task, cfg
        self.batches = None
        if not isinstance(task.train, D.LMCorpus):
            self.batches = D.make_batches(task.train, max_tokens=cfg.training.max_tokens,
                                          shuffle_seed=None)

    def __call__(self, step: int) -> D.ParallelBatch:
        seed = self.cfg.training.seed
        if self.batches is None:
            return self.task.train.sample_batch(self.cfg.training.batch_size,
                                                np.random.default_rng([seed, step, 2]))
        n = len(self.batches)
        epoch, i = divmod(step - 1, n)
        order = np.random.default_rng([seed, epoch, 3]).permutation(n)
        return self.batches[order[i]]


def validation_batches(task: TaskData, cfg: RunConfig) -> list[D.ParallelBatch]:
    if isinstance(task.valid, D.LMCorpus):
        bs, nb = cfg.training.batch_size, cfg.training.valid_batches
        if task.valid.n_windows == 0:
            return []
        starts = np.linspace(0, task.valid.n_windows - 1, bs * nb).astype(np.int64)
        return [task.valid.batch(starts[i:i + bs]) for i in range(0, len(starts), bs)]
    if not task.valid:
        return []
    return D.make_batches(task.valid, max_tokens=cfg.training.max_tokens, shuffle_seed=None)


def teacher_forced_eval(model: Transformer, batches) -> dict:
    """Token-weighted NLL and accuracy of the teacher-forced pass."""
    nll_sum, correct, count = 0.0, 0, 0
    for b in batches:
        d = model.forward_teacher_forced(b.source, b.source_pad, b.target_input, b.target_pad)
        keep = ~b.target_pad
        lp = np.take_along_axis(d.log_probs.data, b.target_output[..., None], axis=-1)[..., 0]
        nll_sum += float(-(lp * keep).sum(dtype=np.float64))
        correct += int(((np.argmax(d.probs, -1) == b.target_output) & keep).sum())
        count += int(keep.sum())
    if count == 0:
        return {"nll": float("nan"), "acc": float("nan"), "tokens": 0}
    return {"nll": nll_sum / count, "acc": correct / count, "tokens": count}


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------

@contextmanager
def run_lock(out_dir: Path):
    """One training process per output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / "LOCK"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out_dir} is in use by another run (remove {lock} if stale)") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(f"{os.getpid()}\n")
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / "checkpoints" / f"step_{step:07d}.dysi"


def list_checkpoints(out_dir: Path) -> list[Path]:
    return sorted((Path(out_dir) / "checkpoints").glob("step_*.dysi"))


def checkpoint_meta(cfg: RunConfig, vocab: D.Vocabulary, mcfg: ModelConfig) -> dict:
    return {
        "model": mcfg.to_dict(),
        "vocab": vocab.to_lines(),
        "vocab_digest": C.digest(vocab.to_lines()),
        "config_digest": C.digest(cfg.to_dict()),
        "config": cfg.to_dict(),
    }


def model_from_checkpoint(ckpt: C.Checkpoint) -> tuple[Transformer, D.Vocabulary]:
    try:
        mcfg = ModelConfig(**ckpt.meta["model"])
        vocab = D.Vocabulary.from_lines(ckpt.meta["vocab"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint metadata incomplete: {exc}") from None
    expected = Transformer.create(mcfg, 0).params
    if set(expected) != set(ckpt.params):
        raise CheckpointError("checkpoint parameters do not match its model config")
    params = {k: T.Tensor(v.copy(), requires_grad=True, name=k) for k, v in ckpt.params.items()}
    return Transformer(mcfg, params), vocab


def check_vocab(ckpt: C.Checkpoint, vocab: D.Vocabulary) -> None:
    if ckpt.meta.get("vocab_digest") != C.digest(vocab.to_lines()):
        raise CheckpointError("checkpoint vocabulary does not match the task vocabulary")


def _update_best(out_dir: Path, ckpt_file: Path) -> None:
    best = out_dir / "checkpoints" / "best.dysi"
    tmp = best.with_name("best.dysi.tmp")
    tmp.unlink(missing_ok=True)
    os.symlink(ckpt_file.name, tmp)
    os.replace(tmp, best)


def _prune(out_dir: Path, keep: int) -> None:
    best = out_dir / "checkpoints" / "best.dysi"
    protected = best.resolve() if best.is_symlink() else None
    for p in list_checkpoints(out_dir)[:-keep]:
        if protected is None or p.resolve() != protected:
            p.unlink()


def _truncate_jsonl(path: Path, max_step: int) -> None:
    if not path.exists():
        return
    kept = [line for line in path.read_text(encoding="utf-8").splitlines()
            if line and json.loads(line)["step"] <= max_step]
    path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")


def metrics_row(step: int, rep: StepReport) -> dict:
    return {
        "step": step,
        "loss_total": rep.loss.total,
        "loss_mle": rep.loss.mle,
        "loss_il": rep.loss.imitation,
        "acc": rep.acc,
        "mean_N": rep.mean_n,
        "epsilon": rep.epsilon,
        "lr": rep.lr,
    }


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Transformer
    optimizer: OptimizerState
    step: int
    vocab: D.Vocabulary
    metrics: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    best_path: Path | None = None
    stopped_early: bool = False


def train(cfg: RunConfig, out_dir=None, init_checkpoint=None, task: TaskData | None = None) -> TrainResult:
    """Run ``cfg.training.max_steps`` updates.

    With ``out_dir`` the run logs JSON-lines metrics, writes checkpoints and
    resumes from the newest checkpoint it finds there.  ``init_checkpoint``
    (hot start) copies parameters only: optimizer, step counter and LR
    schedule start fresh.  It is ignored when the run directory already has
    checkpoints of its own to resume from.
    """
    cfg.validate()
    task = task or build_task(cfg)
    if out_dir is None:
        return _train(cfg, task, None, init_checkpoint)
    out_dir = Path(out_dir)
    with run_lock(out_dir):
        return _train(cfg, task, out_dir, init_checkpoint)


def _train(cfg: RunConfig, task: TaskData, out_dir: Path | None, init_checkpoint) -> TrainResult:
    tr = cfg.training
    mcfg = model_config(cfg, task.vocab)
    model = Transformer.create(mcfg, seed=tr.seed)
    opt = OptimizerState.for_params(model.params)
    start = 0
    metrics: list[dict] = []
    validation: list[dict] = []
    meta = checkpoint_meta(cfg, task.vocab, mcfg)
    init_checkpoint = init_checkpoint or tr.init_checkpoint or None

    existing = list_checkpoints(out_dir) if out_dir is not None else []
    if existing:
        ckpt = C.load(existing[-1])
        check_vocab(ckpt, task.vocab)
        if ckpt.meta.get("model") != mcfg.to_dict():
            raise CheckpointError(f"{existing[-1]}: model config differs from the run config")
        model, _ = model_from_checkpoint(ckpt)
        opt = ckpt.optimizer or OptimizerState.for_params(model.params)
        start = ckpt.step
        log.info("resuming from %s (step %d)", existing[-1], start)
        for name in ("metrics.jsonl", "valid.jsonl"):
            _truncate_jsonl(out_dir / name, start)
    elif init_checkpoint:
        ckpt = C.load(init_checkpoint)
        check_vocab(ckpt, task.vocab)
        src_model, _ = model_from_checkpoint(ckpt)
        if src_model.cfg != mcfg:
            raise CheckpointError(f"{init_checkpoint}: model config differs from the run config")
        model = src_model
        opt = OptimizerState.for_params(model.params)
        log.info("hot start from %s; optimizer, step and LR schedule reset", init_checkpoint)

    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        task.vocab.save(out_dir / "vocab.txt")

    obj = objective_config(cfg)
    stream = BatchStream(task, cfg)
    vbatches = validation_batches(task, cfg)
    best_nll = min((v["nll"] for v in _read_jsonl(out_dir, "valid.jsonl")), default=float("inf"))
    best_path = None
    stopped = False

    def save_and_validate(step: int) -> bool:
        nonlocal best_nll, best_path
        ck_file = None
        if out_dir is not None:
            ck_file = C.save(checkpoint_path(out_dir, step), C.Checkpoint(
                {k: p.data for k, p in model.params.items()}, opt, step, meta))
        row = {"step": step, **teacher_forced_eval(model, vbatches)} if vbatches else None
        if row is not None:
            validation.append(row)
            log.info("step %d valid nll %.4f acc %.4f", step, row["nll"], row["acc"])
            if out_dir is not None:
                _append_jsonl(out_dir / "valid.jsonl", row)
                if row["nll"] < best_nll:
                    best_nll = row["nll"]
                    _update_best(out_dir, ck_file)
                    best_path = ck_file
        if out_dir is not None:
            _prune(out_dir, tr.keep_checkpoints)
        return row is not None and tr.stop_at_valid_acc > 0 and row["acc"] >= tr.stop_at_valid_acc

    metrics_file = open(out_dir / "metrics.jsonl", "a", encoding="utf-8") if out_dir is not None else None
    try:
        step = start
        for step in range(start + 1, tr.max_steps + 1):
            lr = lr_inverse_sqrt(step, tr.warmup, tr.lr_peak)
            rep = train_step(model, opt, stream(step), obj, lr, step,
                             np.random.default_rng([tr.seed, step, 0]),
                             np.random.default_rng([tr.seed, step, 1]))
            row = metrics_row(step, rep)
            metrics.append(row)
            if metrics_file is not None:
                metrics_file.write(json.dumps(row) + "\n")
            if step % 100 == 0:
                log.info("step %d loss %.4f acc %.4f mean_N %.2f lr %.2e",
                         step, rep.loss.total, rep.acc, rep.mean_n, lr)
            if step % tr.checkpoint_every == 0:
                if metrics_file is not None:
                    metrics_file.flush()
                if save_and_validate(step):
                    stopped = True
                    break
        if not stopped and step > start and step % tr.checkpoint_every != 0:
            save_and_validate(step)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if out_dir is not None and best_path is None and (out_dir / "checkpoints" / "best.dysi").exists():
        best_path = (out_dir / "checkpoints" / "best.dysi").resolve()
    return TrainResult(model, opt, step, task.vocab, metrics, validation, best_path, stopped)


def _append_jsonl(path: Path, row: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(row) + "\n")


def _read_jsonl(out_dir: Path | None, name: str) -> list[dict]:
    if out_dir is None or not (out_dir / name).exists():
        return []
    return [json.loads(x) for x in (out_dir / name).read_text(encoding="utf-8").splitlines() if x]


def load_metrics(out_dir) -> list[dict]:
    return _read_jsonl(Path(out_dir), "metrics.jsonl")

