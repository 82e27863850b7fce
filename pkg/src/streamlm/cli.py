"""Single driver for the whole pipeline.

Subcommands: gen-data, train, anneal, infer-asr, infer-tts, eval,
grad-check, inspect. Every subcommand logs its fully-resolved run
configuration before acting and never mutates its input files. Exit codes:
0 ok, 2 usage, 3 missing file, 4 bad configuration, 5 runtime failure,
6 training lock held. Set STREAMLM_LOG=debug|info|warning to control
verbosity.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .evaluate import eval_asr, eval_textlm, eval_tts, format_reports, perplexity, write_reports
from .inference import DecodeParams, decode_asr, decode_tts
from .model import init_model
from .sequence import CorpusRecord, load_corpus, record_to_sequence, speech_to_frames, write_corpus
from .toycodec import CodecSpec, gen_corpus, ids_to_text
from .training import (
    DivergedError,
    OptState,
    Phase,
    Region,
    TrainSchedule,
    grad_check,
    make_opt_state,
    run_phase,
)
from .vocab import JointVocab

log = logging.getLogger("streamlm")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_RUNTIME = 5
EXIT_LOCKED = 6


class LockError(RuntimeError):
    pass


@contextlib.contextmanager
def _training_lock(out_dir: Path):
    """One training process per checkpoint directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".train.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{lock} exists: another training run owns this directory") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _setup_logging() -> None:
    level = os.environ.get("STREAMLM_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def _echo_config(cfg: RunConfig, cmd: str) -> None:
    log.info("%s resolved config: %s", cmd, json.dumps(cfg.resolved(), sort_keys=True))


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    else:
        cfg = cfg.with_seed(cfg.seed)
    if getattr(args, "steps", None) is not None:
        cfg.schedule = dataclasses.replace(cfg.schedule, total_steps=args.steps)
    if getattr(args, "batch_frames", None) is not None:
        cfg.schedule = dataclasses.replace(cfg.schedule, batch_frames=args.batch_frames)
    return cfg


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _check_vocab(header: dict, vocab: JointVocab, where: str) -> None:
    if JointVocab.from_dict(header["vocab"]) != vocab:
        raise ConfigError(f"{where}: corpus vocabulary does not match the model/config vocabulary")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    _echo_config(cfg, "gen-data")
    gen = cfg.gen
    n_utts = args.n_utts if args.n_utts is not None else gen.n_utts
    lff = args.long_form_frac if args.long_form_frac is not None else gen.long_form_frac
    vocab = cfg.vocab()
    records, header = gen_corpus(
        cfg.codec,
        vocab,
        n_utts=n_utts,
        len_range=(gen.len_min, gen.len_max),
        long_form_frac=lff,
        splice_target_len=gen.splice_target_len,
        seed=cfg.codec.seed,
        out_path=args.out,
    )
    log.info("wrote %d records to %s", len(records), args.out)
    return EXIT_OK


def _corpus_sequences(paths_and_multipliers, vocab: JointVocab, where: str):
    sequences = []
    for path, mult in paths_and_multipliers:
        records, header = load_corpus(_require_file(path, "corpus"))
        _check_vocab(header, vocab, where)
        seqs = [record_to_sequence(r, vocab) for r in records]
        for _ in range(mult):
            sequences.extend(seqs)
    return sequences


def _read_mixture(path: Path) -> list[tuple[str, int]]:
    with open(path) as f:
        manifest = json.load(f)
    entries = manifest.get("entries")
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{path}: mixture manifest needs a non-empty 'entries' list")
    out = []
    base = path.parent
    for e in entries:
        p = Path(e["corpus"])
        if not p.is_absolute():
            p = base / p
        mult = int(e.get("multiplier", 1))
        if mult < 1:
            raise ConfigError(f"{path}: multiplier must be >= 1")
        out.append((str(p), mult))
    return out


def _train_common(args, phase: Phase) -> int:
    cfg = _load_run_config(args)
    _echo_config(cfg, phase.value)
    vocab = cfg.vocab()
    out_dir = Path(args.out)

    if phase == Phase.ANNEAL:
        if args.mixture is not None:
            entries = _read_mixture(_require_file(args.mixture, "mixture manifest"))
        else:
            entries = [(args.corpus, 1)]
        ckpt = _require_file(args.init_ckpt, "initial checkpoint")
        state, moments = load_checkpoint(ckpt)
        if state.config != cfg.model:
            log.info("model section of config overridden by checkpoint configuration")
        opt = make_opt_state(state)
        if moments is not None:
            opt = OptState(m=moments[0], v=moments[1], step=state.step)
        steps = args.steps if args.steps is not None else cfg.schedule.anneal_steps
        region_override = None
    else:
        entries = [(args.corpus, 1)]
        if args.init_ckpt is not None:
            state, moments = load_checkpoint(_require_file(args.init_ckpt, "initial checkpoint"))
            opt = make_opt_state(state) if moments is None else OptState(m=moments[0], v=moments[1], step=state.step)
        else:
            state = init_model(cfg.model, vocab, seed=cfg.seed)
            opt = make_opt_state(state)
        steps = args.steps if args.steps is not None else cfg.schedule.total_steps
        region_override = {"whole": Region.WHOLE, "target": Region.TARGET, "switch": None}[args.region]

    sequences = _corpus_sequences(entries, state.vocab, phase.value)
    schedule = cfg.schedule
    if phase == Phase.PRETRAIN and steps != schedule.total_steps:
        schedule = dataclasses.replace(schedule, total_steps=steps, switch_step=min(schedule.switch_step, steps))
    if phase == Phase.ANNEAL and steps != schedule.anneal_steps:
        schedule = dataclasses.replace(schedule, anneal_steps=steps)

    with _training_lock(out_dir):
        log_path = out_dir / "train_log.jsonl"
        log_path.write_text("")  # fresh log per run
        records = run_phase(
            state,
            opt,
            sequences,
            schedule,
            phase,
            text_fraction=cfg.run.text_fraction,
            steps=steps,
            region_override=region_override,
            log_path=log_path,
            log_every=cfg.run.log_every,
        )
        final = out_dir / "checkpoint.bin"
        save_checkpoint(final, state, moments=(opt.m, opt.v))
        log.info(
            "%s finished: %d steps, final loss %.4f, checkpoint %s",
            phase.value,
            len(records),
            records[-1].total_loss if records else float("nan"),
            final,
        )
    return EXIT_OK


def _cmd_train(args) -> int:
    return _train_common(args, Phase.PRETRAIN)


def _cmd_anneal(args) -> int:
    if args.init_ckpt is None:
        raise ConfigError("anneal requires --init-ckpt")
    if args.corpus is None and args.mixture is None:
        raise ConfigError("anneal requires --corpus or --mixture")
    return _train_common(args, Phase.ANNEAL)


def _decode_params(cfg: RunConfig, args, default_mode: str) -> DecodeParams:
    d = cfg.decode
    return DecodeParams(
        mode=args.mode if args.mode is not None else default_mode,
        k=d.k,
        temperature=d.temperature,
        max_frames=args.max_frames if args.max_frames is not None else d.max_frames,
        seed=d.seed,
        min_frames=d.min_frames,
    )


def _cmd_infer_asr(args) -> int:
    cfg = _load_run_config(args)
    _echo_config(cfg, "infer-asr")
    state, _ = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    records, header = load_corpus(_require_file(args.corpus, "corpus"))
    _check_vocab(header, state.vocab, "infer-asr")
    params = _decode_params(cfg, args, "greedy")
    out_records = []
    for rec in records:
        if rec.task != "asr":
            continue
        res = decode_asr(state, speech_to_frames(rec.speech), params)
        out_records.append(
            CorpusRecord(task="asr", text=res.text, speech=[], speaker=rec.speaker, id=rec.id)
        )
        log.debug("%s -> %r truncated=%s", rec.id, ids_to_text(res.text), res.truncated)
    write_corpus(args.out, out_records, {**header, "generated_by": "infer-asr"})
    log.info("decoded %d recognition records to %s", len(out_records), args.out)
    return EXIT_OK


def _cmd_infer_tts(args) -> int:
    cfg = _load_run_config(args)
    _echo_config(cfg, "infer-tts")
    state, _ = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    records, header = load_corpus(_require_file(args.corpus, "corpus"))
    _check_vocab(header, state.vocab, "infer-tts")
    params = _decode_params(cfg, args, "topk")
    out_records = []
    for rec in records:
        if rec.task != "tts" or rec.prompt_speech is None:
            continue
        res = decode_tts(state, rec.text, speech_to_frames(rec.prompt_speech), params)
        out_records.append(
            CorpusRecord(
                task="tts",
                text=rec.text,
                speech=res.frames.tokens.tolist(),
                speaker=rec.speaker,
                id=rec.id,
            )
        )
    write_corpus(args.out, out_records, {**header, "generated_by": "infer-tts"})
    log.info("synthesized %d records to %s", len(out_records), args.out)
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    _echo_config(cfg, "eval")
    state, _ = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    records, header = load_corpus(_require_file(args.corpus, "corpus"))
    _check_vocab(header, state.vocab, "eval")
    codec = CodecSpec.from_dict(header["codec"])
    cap = cfg.run.eval_max_items

    by_task: dict[str, list[CorpusRecord]] = {}
    for rec in records:
        by_task.setdefault(rec.task, []).append(rec)

    reports = []
    if "asr" in by_task:
        reports.append(eval_asr(state, by_task["asr"], _decode_params(cfg, args, "greedy"), max_items=cap))
    if "tts" in by_task:
        reports.append(eval_tts(state, by_task["tts"], codec, _decode_params(cfg, args, "topk"), max_items=cap))
    extra = {}
    if "textlm" in by_task:
        reports.append(eval_textlm(state, by_task["textlm"], max_items=cap))
        if args.baseline_seed is not None:
            baseline = init_model(state.config, state.vocab, seed=args.baseline_seed)
            texts = [r.text for r in by_task["textlm"][:cap]]
            extra["untrained_perplexity"] = perplexity(baseline, texts, state.vocab)

    print(format_reports(reports))
    if extra:
        print(f"untrained-model perplexity baseline: {extra['untrained_perplexity']:.3f}")
    if args.out:
        write_reports(args.out, reports, extra)
        log.info("wrote report to %s", args.out)
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    report = grad_check(seed=args.seed if args.seed is not None else 0)
    worst = max(report.values())
    for name, err in sorted(report.items()):
        print(f"{name:<24} max_rel_err {err:.3e}")
    print(f"worst {worst:.3e} ({'OK' if worst < 1e-3 else 'FAIL'})")
    return EXIT_OK if worst < 1e-3 else EXIT_RUNTIME


def _cmd_inspect(args) -> int:
    state, moments = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    info = {
        "model": state.config.to_dict(),
        "vocab": state.vocab.to_dict(),
        "step": state.step,
        "n_params": state.n_params(),
        "has_moments": moments is not None,
        "kernel_backend": kernels.backend(),
        "params": {k: list(v.shape) for k, v in state.params.items()},
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamlm", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p, seed=True):
        p.add_argument("--config", default=None, help="TOML run config")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="master seed override")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--out", required=True, help="corpus output path (.jsonl)")
    p.add_argument("--n-utts", type=int, default=None)
    p.add_argument("--long-form-frac", type=float, default=None)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="pre-train with the warmup-decay schedule")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    p.add_argument("--init-ckpt", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-frames", type=int, default=None)
    p.add_argument("--region", choices=("whole", "target", "switch"), default="switch")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("anneal", help="linear-to-zero learning-rate phase from a checkpoint")
    common(p)
    p.add_argument("--init-ckpt", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--mixture", default=None, help="JSON manifest of corpora with multipliers")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-frames", type=int, default=None)
    p.set_defaults(func=_cmd_anneal)

    for name, fn, default_mode in (("infer-asr", _cmd_infer_asr, "greedy"), ("infer-tts", _cmd_infer_tts, "topk")):
        p = sub.add_parser(name, help=f"decode ({default_mode} by default)")
        common(p)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--mode", choices=("greedy", "topk"), default=None)
        p.add_argument("--max-frames", type=int, default=None)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="decode and score a corpus, print a report")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default=None, help="JSON report path")
    p.add_argument("--mode", choices=("greedy", "topk"), default=None)
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--baseline-seed", type=int, default=0, help="seed for the untrained perplexity baseline")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("grad-check", help="verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("inspect", help="print checkpoint metadata")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except FileNotFoundError as e:
        log.error("%s", e)
        return EXIT_MISSING
    except LockError as e:
        log.error("%s", e)
        return EXIT_LOCKED
    except (ConfigError, CheckpointError, ValueError) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except (DivergedError, RuntimeError) as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
