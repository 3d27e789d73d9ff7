"""Command-line interface.

    dysi train        --config run.cfg [--set training.alpha=0.5 ...]
    dysi hot-start    --config run.cfg --init ckpt.dysi
    dysi average-checkpoints a.dysi b.dysi ... --output avg.dysi
    dysi evaluate     --checkpoint ckpt.dysi [--test test.tsv] [--refs ref2.txt ...]
    dysi generate     --checkpoint ckpt.dysi --prompts prompts.txt --output out.txt
    dysi perturb      --checkpoints mle=a.dysi dysi=b.dysi --prompts paragraphs.txt

Errors print one line, ``error E_CODE: message``, to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from dysi import __version__
from dysi.errors import ConfigError, DysiError, InputError

EXIT_ERROR = 2
EXIT_IO = 3


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="key=value run configuration file")
    parser.add_argument("--seed", type=int, default=d(None), help="overrides training.seed and decoding.seed")
    parser.add_argument("--out-dir", default=d(None), help="overrides output.dir")
    parser.add_argument("--quiet", action="store_true", default=d(False), help="only warnings and errors")
    parser.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE",
                        help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dysi", description="Scheduled sampling with imitation loss.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _common(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def verb(name, help_):
        sp = sub.add_parser(name, help=help_)
        _common(sp, suppress=True)
        return sp

    verb("train", "train with the configured objective")
    sp = verb("hot-start", "initialize from a checkpoint, reset optimizer and LR schedule, train")
    sp.add_argument("--init", help="checkpoint to start from (else training.init_checkpoint)")

    sp = verb("average-checkpoints", "element-wise mean of checkpoint parameters")
    sp.add_argument("paths", nargs="*", help="checkpoint files")
    sp.add_argument("--last", type=int, default=0, help="average the last K checkpoints of --out-dir")
    sp.add_argument("--output", required=True)

    sp = verb("evaluate", "decode a test set and report BLEU, entropy and repetition")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--test", help="TSV of source<TAB>reference (default: the config's test split)")
    sp.add_argument("--refs", nargs="*", default=[], help="extra reference files, one line per test pair")
    sp.add_argument("--output", help="write the JSON report here (default stdout)")
    sp.add_argument("--hyps", help="write decoded hypotheses here")

    sp = verb("generate", "one continuation per prompt line")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompts", required=True)
    sp.add_argument("--output", required=True)

    sp = verb("perturb", "repetition robustness suite")
    sp.add_argument("--checkpoints", nargs="+", required=True, metavar="[NAME=]PATH")
    sp.add_argument("--prompts", required=True, help="one paragraph per line")
    sp.add_argument("--perturbations", nargs="*", default=None,
                    help="e.g. last-word=10 ngram=3 replacement=5 identity (default: all levels)")
    sp.add_argument("--samples", type=int, default=2)
    sp.add_argument("--p", type=float, default=0.8, help="nucleus mass; 0 means greedy")
    sp.add_argument("--budget", type=int, default=200, help="continuation length in model tokens")
    sp.add_argument("--words-per-prompt", type=int, default=50)
    sp.add_argument("--max-prompts", type=int, default=0)
    return p


def _config(args):
    from dysi.config import RunConfig, apply_override, load_config
    cfg = load_config(args.config) if args.config else RunConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        apply_override(cfg, key.strip(), value)
    if args.seed is not None:
        cfg.training.seed = args.seed
        cfg.decoding.seed = args.seed
    if args.out_dir:
        cfg.output.dir = args.out_dir
    return cfg


def _emit(obj, path=None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def cmd_train(args, init=None) -> int:
    from dysi.training import train
    cfg = _config(args)
    if init:
        cfg.training.init_checkpoint = init
    res = train(cfg, cfg.output.dir)
    summary = {"step": res.step, "stopped_early": res.stopped_early,
               "best_checkpoint": str(res.best_path) if res.best_path else None,
               "last_metrics": res.metrics[-1] if res.metrics else None,
               "last_validation": res.validation[-1] if res.validation else None}
    _emit(summary, Path(cfg.output.dir) / "summary.json")
    if not args.quiet:
        _emit(summary)
    return 0


def cmd_hot_start(args) -> int:
    cfg = _config(args)
    init = args.init or cfg.training.init_checkpoint
    if not init:
        raise ConfigError("hot-start needs --init or training.init_checkpoint")
    return cmd_train(args, init)


def cmd_average(args) -> int:
    from dysi import checkpoint as C
    from dysi.training import list_checkpoints
    paths = list(args.paths)
    if args.last:
        if not args.out_dir:
            raise ConfigError("--last needs --out-dir")
        paths += list_checkpoints(Path(args.out_dir))[-args.last:]
    avg = C.average_checkpoints(paths)
    C.save(args.output, avg)
    if not args.quiet:
        print(f"averaged {len(paths)} checkpoints -> {args.output}")
    return 0


def _load_model(path):
    from dysi import checkpoint as C
    from dysi.training import model_from_checkpoint
    ckpt = C.load(path)
    model, vocab = model_from_checkpoint(ckpt)
    return ckpt, model, vocab


def cmd_evaluate(args) -> int:
    from dysi import data as D
    from dysi.evaluation import evaluate
    from dysi.training import build_task, check_vocab
    cfg = _config(args)
    ckpt, model, vocab = _load_model(args.checkpoint)
    if args.test:
        pairs = D.encode_pairs(D.load_parallel_tsv(args.test), vocab)
    else:
        if not args.config:
            raise InputError("evaluate needs --test or a --config describing the task")
        task = build_task(cfg.validate())
        check_vocab(ckpt, task.vocab)
        pairs = task.test
        if not pairs or not isinstance(pairs, list):
            raise InputError("the configured task has no parallel test split")
    extra = []
    for path in args.refs:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        extra.append([vocab.encode(line) for line in lines])
    report, hyps = evaluate(model, vocab, pairs, cfg.decoding, extra)
    report["checkpoint"] = str(args.checkpoint)
    if args.hyps:
        Path(args.hyps).write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    _emit(report, args.output)
    return 0


def cmd_generate(args) -> int:
    from dysi.evaluation import decode
    from dysi.model import ENCODER_DECODER
    cfg = _config(args)
    _, model, vocab = _load_model(args.checkpoint)
    lines = Path(args.prompts).read_text(encoding="utf-8").splitlines()
    ids = [vocab.encode(line) for line in lines]
    if model.cfg.mode == ENCODER_DECODER:
        out = decode(model, cfg.decoding, sources=ids) if ids else []
    else:
        out = decode(model, cfg.decoding, prompts=ids) if ids else []
    Path(args.output).write_text("".join(vocab.decode(o).replace("\n", " ") + "\n" for o in out),
                                 encoding="utf-8")
    if not args.quiet:
        print(f"wrote {len(out)} continuations to {args.output}")
    return 0


def cmd_perturb(args) -> int:
    from dysi import data as D
    from dysi import robustness as R
    cfg = _config(args)
    models, words = [], set()
    for item in args.checkpoints:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        _, model, vocab = _load_model(path)
        if model.cfg.mode != "decoder-only":
            raise ConfigError(f"{path}: perturb needs a decoder-only model")
        models.append(R.TransformerCompleter(name, model, vocab))
        if vocab.mode == D.WHITESPACE:
            words.update(R.replacement_words(vocab))
    paragraphs = Path(args.prompts).read_text(encoding="utf-8").splitlines()
    prompts = R.extract_prompts(paragraphs, args.words_per_prompt)
    if args.max_prompts:
        prompts = prompts[:args.max_prompts]
    if not words:
        # character models: substitute words seen in the prompt file
        words = {w for para in paragraphs for w in para.split()}
    seed = cfg.decoding.seed
    specs = ([R.parse_perturbation(t, seed) for t in args.perturbations]
             if args.perturbations else R.default_perturbations(seed=seed))
    result = R.run_completion_suite(models, prompts, specs, args.samples,
                                    args.p if args.p > 0 else None, args.budget, seed,
                                    words=sorted(words), out_dir=cfg.output.dir)
    if not args.quiet:
        for row in result.summary:
            print(f"{row['model']}\t{row['kind']}\t{row['value']}\tn={row['n']}\t"
                  f"|delta|={row['mean_delta_pct']:.2f}%")
    return 0


COMMANDS = {"train": cmd_train, "hot-start": cmd_hot_start, "average-checkpoints": cmd_average,
            "evaluate": cmd_evaluate, "generate": cmd_generate, "perturb": cmd_perturb}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except DysiError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error {exc.code}: {msg}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error E_IO: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_IO
    except KeyboardInterrupt:
        print("error E_INTERRUPTED: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
