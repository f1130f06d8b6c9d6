"""Command-line entry point: ``pervasive <subcommand> ...``."""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .alignment import align_dump, check_mode
from .checkpoint import CheckpointError
from .config import (ConfigError, DecodeSection, parse_value, load_run_config, parse_max_len_rule,
                     section_defaults)
from .data import (BpeModel, Vocabulary, bpe_learn, encode_pairs, join_subwords, learn_bpe_models, read_lines,
                   read_parallel, synth_generate, write_lines)
from .decode import beam_search, greedy_decode
from .gradcheck import gradient_check, small_config
from .metrics import corpus_bleu
from .train import Checkpoint, Trainer, TrainingDiverged
from .model import ModelConfig, PervasiveNetwork

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2  # argparse's own code for bad flags
EXIT_MISSING_FILE = 3
EXIT_BAD_CONFIG = 4
EXIT_BAD_CHECKPOINT = 5
EXIT_DIVERGED = 6
EXIT_CHECK_FAILED = 7
EXIT_BAD_INPUT = 8


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"file not found: {p}", EXIT_MISSING_FILE)
    return p


def load_checkpoint(path) -> tuple[Checkpoint, PervasiveNetwork]:
    p = _need_file(path)
    try:
        ckpt = Checkpoint.load(p)
        net = ckpt.build_network().eval()
    except (CheckpointError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"incompatible checkpoint {p}: {exc}", EXIT_BAD_CHECKPOINT) from None
    meta = ckpt.meta
    if "src_vocab" not in meta or "tgt_vocab" not in meta:
        raise CliError(f"incompatible checkpoint {p}: no embedded vocabularies", EXIT_BAD_CHECKPOINT)
    return ckpt, net


def _vocabs(ckpt: Checkpoint) -> tuple[Vocabulary, Vocabulary]:
    return Vocabulary(ckpt.meta["src_vocab"]), Vocabulary(ckpt.meta["tgt_vocab"])


def _bpe_models(ckpt: Checkpoint) -> tuple[BpeModel | None, BpeModel | None]:
    bpe = ckpt.meta.get("bpe")
    if not bpe:
        return None, None
    return BpeModel(bpe["src"]), BpeModel(bpe["tgt"])


def _segment(model: BpeModel | None, line: str) -> list[str]:
    return model.apply(line) if model is not None else line.split()


# -- subcommands ------------------------------------------------------------

def cmd_bpe_learn(args) -> int:
    corpus = []
    for path in args.input:
        corpus.extend(read_lines(_need_file(path)))
    model = bpe_learn(corpus, args.merges, args.min_frequency)
    model.save(args.out)
    print(f"learned {len(model)} merges -> {args.out}")
    return EXIT_OK


def cmd_bpe_apply(args) -> int:
    model = _load_codes(args.codes)
    lines = [" ".join(model.apply(line)) for line in read_lines(_need_file(args.input))]
    _write_output(args.output, lines)
    return EXIT_OK


def _load_codes(path) -> BpeModel:
    try:
        return BpeModel.load(_need_file(path))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_BAD_INPUT) from None


def cmd_build_vocab(args) -> int:
    lines = []
    for path in args.input:
        lines.extend(read_lines(_need_file(path)))
    vocab = Vocabulary.build(lines, args.min_freq)
    vocab.save(args.out)
    print(f"{len(vocab)} entries -> {args.out}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    pairs = synth_generate(args.task, args.n + args.dev_n, args.vocab_size, (args.min_len, args.max_len), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for stem, part in (("train", pairs[: args.n]), ("dev", pairs[args.n:])):
        write_lines(out / f"{stem}.src", [s for s, _ in part])
        write_lines(out / f"{stem}.tgt", [t for _, t in part])
    print(f"{args.task}: {args.n} train + {args.dev_n} dev pairs -> {out}")
    return EXIT_OK


def _config_overrides(args) -> dict[str, dict]:
    defaults = section_defaults()
    out: dict[str, dict] = {}
    for dest, value in vars(args).items():
        if "." not in dest:
            continue
        section, key = dest.split(".", 1)
        out.setdefault(section, {})[key] = parse_value(dest, value, type(defaults[section][key]))
    return out


def cmd_train(args) -> int:
    if args.config is not None:
        _need_file(args.config)
    try:
        run = load_run_config(args.config, _config_overrides(args))
    except ConfigError as exc:
        raise CliError(f"bad config: {exc}", EXIT_BAD_CONFIG) from None
    data = Path(args.data)
    d = run.data
    train_src, train_tgt = data / f"{d.train}.{d.src_ext}", data / f"{d.train}.{d.tgt_ext}"
    dev_src, dev_tgt = data / f"{d.dev}.{d.src_ext}", data / f"{d.dev}.{d.tgt_ext}"
    _need_file(train_src), _need_file(train_tgt)
    try:
        train_raw = read_parallel(train_src, train_tgt)
        dev_raw = read_parallel(dev_src, dev_tgt) if dev_src.is_file() and dev_tgt.is_file() else []
    except ValueError as exc:
        raise CliError(str(exc), EXIT_BAD_INPUT) from None

    bpe_meta = None
    if d.n_merges:
        src_bpe, tgt_bpe = learn_bpe_models([s for s, _ in train_raw], [t for _, t in train_raw],
                                            d.n_merges, d.bpe_mode)
        bpe_meta = {"src": [list(m) for m in src_bpe.merges], "tgt": [list(m) for m in tgt_bpe.merges]}

        def seg(pairs):
            return [(src_bpe.apply(s), tgt_bpe.apply(t)) for s, t in pairs]
    else:
        def seg(pairs):
            return [(s.split(), t.split()) for s, t in pairs]
    train_tok, dev_tok = seg(train_raw), seg(dev_raw)
    src_vocab = Vocabulary.build([s for s, _ in train_tok])
    tgt_vocab = Vocabulary.build([t for _, t in train_tok])
    try:
        model_cfg = run.model_config(len(src_vocab), len(tgt_vocab))
    except ValueError as exc:
        raise CliError(f"bad config: {exc}", EXIT_BAD_CONFIG) from None
    meta = {"run_config": run.to_dict(), "src_vocab": src_vocab.to_list(), "tgt_vocab": tgt_vocab.to_list(),
            "bpe": bpe_meta, "version": __version__}

    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log")
    t0 = time.monotonic()
    with open(log_path, "w", encoding="utf-8") as log_fh:
        for line in run.to_lines():
            log_fh.write(f"# {line}\n")
        log_fh.write(f"# src_vocab={len(src_vocab)} tgt_vocab={len(tgt_vocab)} "
                     f"train_pairs={len(train_tok)} dev_pairs={len(dev_tok)}\n")

        def log(msg: str) -> None:
            record = f"[{time.monotonic() - t0:8.1f}s] {msg}"
            log_fh.write(record + "\n")
            log_fh.flush()
            if not args.quiet:
                print(record, flush=True)

        net = PervasiveNetwork(model_cfg, seed=run.train.seed)
        trainer = Trainer(net, run.train, encode_pairs(train_tok, src_vocab, tgt_vocab),
                          encode_pairs(dev_tok, src_vocab, tgt_vocab), log=log, meta=meta)
        try:
            best = trainer.run()
        except TrainingDiverged as exc:
            log(f"diverged: {exc}")
            raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from None
    best.save(out)
    return EXIT_OK


def _decode_args(args) -> DecodeSection:
    try:
        parse_max_len_rule(args.max_len_rule)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_BAD_CONFIG) from None
    if args.beam < 1:
        raise CliError("--beam must be >= 1", EXIT_BAD_CONFIG)
    return DecodeSection(args.beam, args.lp_alpha, args.cov_beta, args.max_len_rule)


def cmd_translate(args) -> int:
    dec = _decode_args(args)
    ckpt, net = load_checkpoint(args.ckpt)
    src_vocab, tgt_vocab = _vocabs(ckpt)
    src_bpe, _ = _bpe_models(ckpt)
    if dec.cov_beta and not net.config.uses_max and not net.config.uses_attn:
        raise CliError("coverage penalty needs max or attention aggregation", EXIT_BAD_CONFIG)
    config = dec.to_decode_config()
    outputs = []
    for line in read_lines(_need_file(args.input)):
        ids = src_vocab.encode(_segment(src_bpe, line))
        if not ids:
            outputs.append("")
            continue
        if config.beam == 1:
            hyp = greedy_decode(net, ids, config)
        else:
            hyp = beam_search(net, ids, config)[0]
        tokens = tgt_vocab.decode(hyp.output_ids)
        outputs.append(" ".join(tokens) if args.keep_bpe else join_subwords(tokens))
    _write_output(args.output, outputs)
    return EXIT_OK


def cmd_align(args) -> int:
    ckpt, net = load_checkpoint(args.ckpt)
    try:
        check_mode(net, args.mode)
    except ValueError as exc:
        raise CliError(f"incompatible checkpoint: {exc}", EXIT_BAD_CHECKPOINT) from None
    src_vocab, tgt_vocab = _vocabs(ckpt)
    src_bpe, tgt_bpe = _bpe_models(ckpt)
    try:
        raw = read_parallel(_need_file(args.src), _need_file(args.tgt))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_BAD_INPUT) from None
    pairs = [(_segment(src_bpe, s), _segment(tgt_bpe, t)) for s, t in raw]
    if any(not s for s, _ in pairs):
        raise CliError("alignment needs non-empty source sentences", EXIT_BAD_INPUT)
    written = align_dump(net, pairs, src_vocab, tgt_vocab, args.out, args.mode, args.pgm)
    print(f"{len(written)} alignment matrices -> {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    hyps = read_lines(_need_file(args.hyp))
    refs = read_lines(_need_file(args.ref))
    if len(hyps) != len(refs):
        raise CliError(f"{len(hyps)} hypotheses but {len(refs)} references", EXIT_BAD_INPUT)
    record = corpus_bleu(hyps, refs).to_record()
    print(record)
    if args.output:
        write_lines(args.output, [record])
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.config == "small":
        cfg = small_config()
    else:
        _need_file(args.config)
        try:
            run = load_run_config(args.config)
            model = {**asdict(small_config()), **run.model}
            model.update(src_vocab=11, tgt_vocab=11)
            cfg = ModelConfig(**model)
        except (ConfigError, ValueError) as exc:
            raise CliError(f"bad config: {exc}", EXIT_BAD_CONFIG) from None
    try:
        result = gradient_check(cfg, seed=args.seed, eps=args.eps)
    except ValueError as exc:
        raise CliError(f"bad config: {exc}", EXIT_BAD_CONFIG) from None
    print(f"max_rel_error={result.max_rel_error:.3e} worst={result.worst_param} "
          f"params_checked={result.n_checked} tol={args.tol:g}")
    if not result.max_rel_error < args.tol:
        print(f"gradient check FAILED: {result.max_rel_error:.3e} >= {args.tol:g}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _write_output(path, lines) -> None:
    if path in (None, "-"):
        sys.stdout.write("".join(f"{line}\n" for line in lines))
    else:
        write_lines(path, lines)


# -- parser -----------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for section, values in section_defaults().items():
        group = p.add_argument_group(f"{section} settings (override the config file)")
        for key, default in values.items():
            shown = str(default).lower() if isinstance(default, bool) else default
            group.add_argument(f"--{section}.{key}", dest=f"{section}.{key}", default=argparse.SUPPRESS,
                               metavar=type(default).__name__.upper(), help=f"(default: {shown})")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="pervasive", formatter_class=fmt,
                                     description="Translation with a 2D convolutional network over the "
                                                 "source x target grid.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bpe-learn", formatter_class=fmt, help="learn BPE merges from text files")
    p.add_argument("--input", action="append", required=True,
                   help="training text; repeat to learn a joint model over several files")
    p.add_argument("--merges", type=int, required=True, help="number of merge operations")
    p.add_argument("--min-frequency", type=int, default=2, help="stop when the best pair is rarer than this")
    p.add_argument("--out", required=True, help="output codes file")
    p.set_defaults(func=cmd_bpe_learn)

    p = sub.add_parser("bpe-apply", formatter_class=fmt, help="segment text with learned merges")
    p.add_argument("--codes", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", default="-", help="output file, '-' for stdout")
    p.set_defaults(func=cmd_bpe_apply)

    p = sub.add_parser("build-vocab", formatter_class=fmt, help="count tokens into a vocabulary file")
    p.add_argument("--input", action="append", required=True)
    p.add_argument("--min-freq", type=int, default=1, help="drop tokens seen fewer times")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("synth-data", formatter_class=fmt, help="write a synthetic parallel corpus")
    p.add_argument("--task", choices=("copy", "reverse", "grammar"), required=True)
    p.add_argument("--n", type=int, default=2000, help="training pairs")
    p.add_argument("--dev-n", type=int, default=200, help="held-out pairs")
    p.add_argument("--vocab-size", type=int, default=20, help="number of content symbols")
    p.add_argument("--min-len", type=int, default=3, help="shortest source sentence")
    p.add_argument("--max-len", type=int, default=12, help="longest source sentence")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", required=True, help="directory for train/dev .src/.tgt files")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", formatter_class=fmt, help="train a model and save the best checkpoint")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--data", required=True, help="directory holding <stem>.<ext> corpus files")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="log file (default: <out>.log)")
    p.add_argument("--quiet", action="store_true", help="do not echo log records to stdout")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    dec = DecodeSection()
    p = sub.add_parser("translate", formatter_class=fmt, help="translate one sentence per line")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", default="-", help="output file, '-' for stdout")
    p.add_argument("--beam", type=int, default=dec.beam, help="beam width, 1 decodes greedily")
    p.add_argument("--lp-alpha", type=float, default=dec.lp_alpha, help="length penalty exponent")
    p.add_argument("--cov-beta", type=float, default=dec.cov_beta, help="coverage penalty weight")
    p.add_argument("--max-len-rule", default=dec.max_len_rule, help="output length cap as a*src+b")
    p.add_argument("--keep-bpe", action="store_true", help="print subword tokens instead of joined words")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("align", formatter_class=fmt, help="dump per-pair alignment matrices")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--mode", choices=("max", "attn"), default="max", help="alignment read-out")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pgm", action="store_true", help="also write a grayscale image per pair")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("score", formatter_class=fmt, help="corpus BLEU of hypotheses against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--output", default=None, help="also write the score line here")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("grad-check", formatter_class=fmt, help="compare tape and finite-difference gradients")
    p.add_argument("--config", default="small", help="'small' or a config file with model.* keys")
    p.add_argument("--eps", type=float, default=1e-5, help="central difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum allowed relative error")
    p.add_argument("--seed", type=int, default=0, help="seed for weights and batch")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"pervasive {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"pervasive {args.command}: bad config: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except (OSError, ValueError) as exc:
        print(f"pervasive {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
