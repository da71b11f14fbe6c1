"""Batch command-line interface: align, compress, distill, finetune, eval.

Stages communicate only through files (feature matrices, alignment JSONL,
checkpoints, CSV reports), so any intermediate can be deleted and
regenerated.  Errors are reported as one JSON object on stderr and a
process exit code: 0 ok, 2 usage, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import pipeline as pl
from .alignment import TokenSequence
from .config import format_config, resolve_config
from .connector import CompressedRepresentation, connect
from .errors import EXIT_DATA, EXIT_USAGE, DataError, ToolkitError
from .evaluation import (
    ChoiceTask,
    boundary_metrics,
    choice_eval,
    frames_to_times,
    normalize_words,
    transcribe_greedy,
    word_error_rate,
)
from .formats import (
    ALIGN_BACKENDS,
    atomic_write_text,
    load_feature_file,
    read_alignments,
    read_manifest,
    save_feature_file,
    write_alignments,
)
from .trainer import TrainConfig, train_stage1, train_stage2


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as machine-readable JSON."""

    def error(self, message):
        _emit_error("usage", f"{message} (see `{self.prog} --help`)")
        raise SystemExit(EXIT_USAGE)


def _emit_error(code: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")


def _run_parallel(fn, items, workers: int) -> list:
    """Apply fn per item, preserving input order in the results."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def _write_train_log(path, log_rows) -> None:
    _write_csv(
        path,
        ["step", "stage", "stream", "loss", "cosine"],
        [[r["step"], r["stage"], r["stream"], repr(r["loss"]), r["cosine"]] for r in log_rows],
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_align(args, cfg) -> int:
    rows = read_manifest(args.manifest)
    backend = args.backend or cfg["backend"]
    if backend not in ALIGN_BACKENDS:
        _emit_error("usage", f"unknown backend {backend!r}")
        return EXIT_USAGE
    records = _run_parallel(lambda row: pl.align_row(row, backend, cfg), rows, cfg["workers"])
    write_alignments(args.out, records)
    print(f"aligned {len(records)} utterances with backend {backend} -> {args.out}")
    return 0


def cmd_compress(args, cfg) -> int:
    rows = read_manifest(args.manifest)
    alignments = read_alignments(args.alignments)
    if args.checkpoint:
        connector, _ = pl.load_pipeline(args.checkpoint)
    else:
        first = load_feature_file(rows[0].feature_path)
        connector = pl.new_pipeline(cfg, first.dim, max(cfg["vocab_size"], 2))[0]
    os.makedirs(args.outdir, exist_ok=True)

    def one(row):
        features = load_feature_file(row.feature_path, frame_duration_ms=cfg["frame_duration_ms"])
        record = alignments.get(row.utt_id)
        if record is None:
            raise DataError(f"{row.utt_id}: no alignment record in {args.alignments}")
        compressed = connect(
            features, record.boundaries, connector, use_blockwise=cfg["use_blockwise"]
        )
        out_path = os.path.join(args.outdir, f"{row.utt_id}.ssrf")
        save_feature_file(out_path, compressed.rows)
        return out_path

    outputs = _run_parallel(one, rows, cfg["workers"])
    print(f"compressed {len(outputs)} utterances -> {args.outdir}")
    return 0


def cmd_distill(args, cfg) -> int:
    rows = read_manifest(args.manifest)
    alignments = read_alignments(args.alignments)
    corpus, vocab_size, input_dim = pl.load_corpus(rows, alignments, cfg)
    connector, lm = pl.new_pipeline(cfg, input_dim, vocab_size)
    train_cfg = TrainConfig(
        learning_rate=args.lr if args.lr is not None else cfg["distill_lr"],
        steps=args.steps if args.steps is not None else cfg["distill_steps"],
        batch_tokens=cfg["token_budget"],
        seed=cfg["seed"],
        freeze="lm",
        cos_weight=cfg["cos_weight"],
        use_blockwise=cfg["use_blockwise"],
    )
    log_rows = train_stage1(connector, lm, corpus, train_cfg)
    pl.save_pipeline(args.out, connector, lm)
    if args.log:
        _write_train_log(args.log, log_rows)
    print(
        f"distilled connector for {train_cfg.steps} steps "
        f"(final loss {log_rows[-1]['loss']:.6f}) -> {args.out}"
    )
    return 0


def cmd_finetune(args, cfg) -> int:
    rows = read_manifest(args.manifest)
    alignments = read_alignments(args.alignments)
    connector, lm = pl.load_pipeline(args.checkpoint)
    corpus, _, _ = pl.load_corpus(rows, alignments, {**cfg, "vocab_size": lm.vocab_size})
    mix = cfg["mix_probability"]
    if args.text_corpus:
        corpus.text_only = pl.read_text_corpus(args.text_corpus, lm.vocab_size)
    else:
        mix = 1.0
    train_cfg = TrainConfig(
        learning_rate=args.lr if args.lr is not None else cfg["finetune_lr"],
        steps=args.steps if args.steps is not None else cfg["finetune_steps"],
        batch_tokens=cfg["token_budget"],
        seed=cfg["seed"],
        mix_probability=mix,
        freeze="connector",
        use_blockwise=cfg["use_blockwise"],
    )
    log_rows = train_stage2(connector, lm, corpus, train_cfg)
    pl.save_pipeline(args.out, connector, lm)
    if args.log:
        _write_train_log(args.log, log_rows)
    print(
        f"fine-tuned language model for {train_cfg.steps} steps "
        f"(final loss {log_rows[-1]['loss']:.6f}) -> {args.out}"
    )
    return 0


def cmd_eval_wer(args, cfg) -> int:
    if args.hyp or args.ref:
        if not (args.hyp and args.ref):
            _emit_error("usage", "--hyp and --ref must be given together")
            return EXIT_USAGE
        with open(args.hyp, "r", encoding="utf-8") as handle:
            hyp_lines = handle.read().splitlines()
        with open(args.ref, "r", encoding="utf-8") as handle:
            ref_lines = handle.read().splitlines()
        if len(hyp_lines) != len(ref_lines):
            raise DataError(
                f"{len(hyp_lines)} hypothesis lines vs {len(ref_lines)} reference lines"
            )
        results = []
        for i, (hyp, ref) in enumerate(zip(hyp_lines, ref_lines)):
            results.append((str(i), word_error_rate(normalize_words(hyp), normalize_words(ref))))
    else:
        if not (args.manifest and args.alignments and args.checkpoint):
            _emit_error(
                "usage", "model-based WER needs --manifest, --alignments and --checkpoint"
            )
            return EXIT_USAGE
        rows = read_manifest(args.manifest)
        alignments = read_alignments(args.alignments)
        connector, lm = pl.load_pipeline(args.checkpoint)
        corpus, _, _ = pl.load_corpus(rows, alignments, {**cfg, "vocab_size": lm.vocab_size})
        results = []
        for utt in corpus.speech_text:
            compressed = connect(
                utt.features, utt.boundaries, connector, use_blockwise=cfg["use_blockwise"]
            )
            decoded = transcribe_greedy(lm, compressed)
            hyp = [str(i) for i in decoded.ids]
            ref = [str(i) for i in utt.tokens.ids]
            results.append((utt.utt_id, word_error_rate(hyp, ref)))
    _write_csv(args.out, ["utt_id", "wer"], [(u, repr(w)) for u, w in results])
    mean = sum(w for _, w in results) / len(results)
    print(f"wer mean={mean:.4f} over {len(results)} utterances -> {args.out}")
    return 0


def _load_choice_tasks(path, lm, frame_ms):
    base = os.path.dirname(os.path.abspath(path))
    tasks = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                utt_id = str(obj["utt_id"])
                prefix_ref = obj["prefix_ref"]
                choices = obj["choices"]
                gold = int(obj["gold"])
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{line_no}: bad choice task: {exc}") from exc
            if isinstance(prefix_ref, str):
                ref_path = prefix_ref if os.path.isabs(prefix_ref) else os.path.join(base, prefix_ref)
                mat = load_feature_file(ref_path, frame_duration_ms=frame_ms)
                prefix = CompressedRepresentation(
                    mat.frames, pl.trivial_boundaries(mat.num_frames)
                )
            else:
                prefix = TokenSequence(tuple(int(i) for i in prefix_ref), lm.vocab_size)
            tasks.append(ChoiceTask(prefix=prefix, choices=choices, gold=gold, utt_id=utt_id))
    if not tasks:
        raise DataError(f"{path}: no choice tasks found")
    return tasks


def cmd_eval_choice(args, cfg) -> int:
    _, lm = pl.load_pipeline(args.checkpoint)
    tasks = _load_choice_tasks(args.tasks, lm, cfg["frame_duration_ms"])
    max_choices = max(len(t.choices) for t in tasks)
    rows = []
    correct = 0
    for task in tasks:
        chosen, ppls = choice_eval(lm, task)
        correct += int(chosen == task.gold)
        padded = [repr(p) for p in ppls] + [""] * (max_choices - len(ppls))
        rows.append([task.utt_id, chosen, task.gold, int(chosen == task.gold), *padded])
    header = ["utt_id", "chosen", "gold", "correct"] + [f"ppl{i}" for i in range(max_choices)]
    _write_csv(args.out, header, rows)
    accuracy = correct / len(tasks)
    print(f"choice accuracy={accuracy:.4f} over {len(tasks)} tasks -> {args.out}")
    return 0


def cmd_eval_boundary(args, cfg) -> int:
    pred = read_alignments(args.pred)
    gold = read_alignments(args.gold)
    frame_ms = args.frame_ms if args.frame_ms is not None else cfg["frame_duration_ms"]
    missing = sorted(set(gold) - set(pred))
    if missing:
        raise DataError(f"predictions missing for utterances: {', '.join(missing)}")
    rows = []
    wbe_sum = wdur_sum = 0.0
    for utt_id in gold:
        p = frames_to_times(pred[utt_id].boundaries.indices, frame_ms)
        g = frames_to_times(gold[utt_id].boundaries.indices, frame_ms)
        wbe, wdur = boundary_metrics(p, g)
        wbe_sum += wbe
        wdur_sum += wdur
        rows.append([utt_id, repr(wbe), repr(wdur)])
    _write_csv(args.out, ["utt_id", "wbe_ms", "wdur_ms"], rows)
    count = len(rows)
    print(
        f"boundary metrics over {count} utterances: "
        f"wbe={wbe_sum / count:.2f}ms wdur={wdur_sum / count:.2f}ms -> {args.out}"
    )
    return 0


def cmd_dump_config(args, cfg) -> int:
    sys.stdout.write(format_config(cfg))
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="ssr", description=__doc__)
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--workers", type=int, help="per-utterance parallelism")
    sub = parser.add_subparsers(dest="command", required=True)

    p_align = sub.add_parser("align", help="emit alignment JSONL from a manifest")
    p_align.add_argument("--manifest", required=True)
    p_align.add_argument("--backend", choices=ALIGN_BACKENDS)
    p_align.add_argument("--out", required=True)

    p_compress = sub.add_parser("compress", help="emit token-rate feature files")
    p_compress.add_argument("--manifest", required=True)
    p_compress.add_argument("--alignments", required=True)
    p_compress.add_argument("--checkpoint")
    p_compress.add_argument("--outdir", required=True)

    p_distill = sub.add_parser("distill", help="stage 1: train the connector")
    p_distill.add_argument("--manifest", required=True)
    p_distill.add_argument("--alignments", required=True)
    p_distill.add_argument("--out", required=True)
    p_distill.add_argument("--log")
    p_distill.add_argument("--steps", type=int)
    p_distill.add_argument("--lr", type=float)

    p_finetune = sub.add_parser("finetune", help="stage 2: train the language model")
    p_finetune.add_argument("--manifest", required=True)
    p_finetune.add_argument("--alignments", required=True)
    p_finetune.add_argument("--checkpoint", required=True)
    p_finetune.add_argument("--out", required=True)
    p_finetune.add_argument("--log")
    p_finetune.add_argument("--steps", type=int)
    p_finetune.add_argument("--lr", type=float)
    p_finetune.add_argument("--text-corpus")

    p_eval = sub.add_parser("eval", help="metric reports as CSV")
    eval_sub = p_eval.add_subparsers(dest="metric", required=True)

    p_wer = eval_sub.add_parser("wer")
    p_wer.add_argument("--hyp")
    p_wer.add_argument("--ref")
    p_wer.add_argument("--manifest")
    p_wer.add_argument("--alignments")
    p_wer.add_argument("--checkpoint")
    p_wer.add_argument("--out", required=True)

    p_choice = eval_sub.add_parser("choice")
    p_choice.add_argument("--checkpoint", required=True)
    p_choice.add_argument("--tasks", required=True)
    p_choice.add_argument("--out", required=True)

    p_boundary = eval_sub.add_parser("boundary")
    p_boundary.add_argument("--pred", required=True)
    p_boundary.add_argument("--gold", required=True)
    p_boundary.add_argument("--frame-ms", type=float)
    p_boundary.add_argument("--out", required=True)

    sub.add_parser("dump-config", help="print the effective configuration")
    return parser


def run_pipeline(argv=None) -> int:
    """Parse arguments, resolve config, dispatch; returns the exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        cfg = resolve_config(
            config_path=args.config,
            overrides={"seed": args.seed, "workers": args.workers},
        )
        if args.command == "align":
            return cmd_align(args, cfg)
        if args.command == "compress":
            return cmd_compress(args, cfg)
        if args.command == "distill":
            return cmd_distill(args, cfg)
        if args.command == "finetune":
            return cmd_finetune(args, cfg)
        if args.command == "eval":
            if args.metric == "wer":
                return cmd_eval_wer(args, cfg)
            if args.metric == "choice":
                return cmd_eval_choice(args, cfg)
            return cmd_eval_boundary(args, cfg)
        if args.command == "dump-config":
            return cmd_dump_config(args, cfg)
        _emit_error("usage", f"unknown command {args.command!r}")
        return EXIT_USAGE
    except ToolkitError as exc:
        _emit_error(exc.code, str(exc))
        return exc.exit_code
    except ValueError as exc:
        _emit_error("invalid_value", str(exc))
        return EXIT_DATA
    except OSError as exc:
        _emit_error("io", str(exc))
        return EXIT_DATA


main = run_pipeline


def console_entry() -> None:
    sys.exit(run_pipeline())
