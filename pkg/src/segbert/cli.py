"""Command-line entry point: ``segbert <command> [<subcommand>] ...``.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import platform
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, config_hash, load_config, parse_section, render_config, render_section
from .features import MelSpectrogram, load_corpus, parse_text, read_mel, read_wav, write_mel, load_alignment
from .nn import load_checkpoint, save_checkpoint
from .speechbert import SpeechBertModel, train_bert
from .template import build_template, collect_segments, read_template, write_template
from .toy import PROSODY_MODES, ToyCorpusSpec, generate_toy_corpus
from .tts import TransformerTTSModel, synthesize, train_tts


# -- helpers --------------------------------------------------------------------

@contextmanager
def output_lock(out: Path):
    out.parent.mkdir(parents=True, exist_ok=True)
    lock = out.parent / ".segbert.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{out.parent} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(out: Path, args: argparse.Namespace, cfg: RunConfig | None, seed: int | None,
                   started: float) -> None:
    manifest = {
        "command": args.command_path,
        "argv": args.argv,
        "seed": seed,
        "config_sha256": config_hash(cfg) if cfg is not None else None,
        "config": render_config(cfg) if cfg is not None else None,
        "versions": {"segbert": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "elapsed_s": round(time.time() - started, 3),
    }
    Path(f"{out}.manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def write_loss_log(path: Path, losses: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(v)])


def save_model(path: Path, model, section: str) -> None:
    save_checkpoint(path, model.state_dict())
    Path(f"{path}.cfg").write_text(render_section(section, model.cfg), encoding="utf-8")


def effective(cfg: RunConfig, seed: int, **steps) -> RunConfig:
    """Fold command-line overrides into the config recorded in the manifest."""
    return dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, seed=seed, **steps))


def load_bert(path: str | None) -> SpeechBertModel | None:
    if path is None or path == "none":
        return None
    cfg = parse_section(Path(f"{path}.cfg").read_text(encoding="utf-8"), "bert")
    model = SpeechBertModel(cfg)
    model.load_state_dict(load_checkpoint(path))
    return model


def load_tts(path: str) -> TransformerTTSModel:
    cfg = parse_section(Path(f"{path}.cfg").read_text(encoding="utf-8"), "tts")
    model = TransformerTTSModel(cfg)
    model.load_state_dict(load_checkpoint(path))
    return model


def check_vocab(corpus, vocab_size: int, speaker_count: int | None = None) -> None:
    top = max(max(u.phoneme_sequence) for u in corpus)
    if top >= vocab_size:
        raise ConfigError(f"corpus token id {top} needs vocab_size > {top} (config has {vocab_size})")
    if speaker_count is not None:
        spk = max(u.speaker_id for u in corpus)
        if spk >= speaker_count:
            raise ConfigError(f"corpus speaker id {spk} needs speaker_count > {spk}")


# -- commands ---------------------------------------------------------------------

def cmd_gen(args) -> None:
    spec = ToyCorpusSpec(utterance_count=args.utterances, vocab_size=args.vocab,
                         syllables_per_utterance=args.syllables, n_mels=args.n_mels,
                         prosody_mode=args.mode, speaker_count=args.speakers, seed=args.seed)
    out = Path(args.out)
    utts = generate_toy_corpus(spec, out)
    print(f"wrote {len(utts)} utterances to {out}")


def cmd_template_build(args) -> None:
    corpus = load_corpus(args.corpus)
    t = build_template(collect_segments(corpus))
    write_template(args.out, t, corpus[0].mel.frame_shift_ms)
    print(f"template: {t.L} frames x {t.frames.shape[1]} bins -> {args.out}")


def cmd_bert_pretrain(args) -> None:
    cfg = load_config(args.config, args.profile)
    seed = cfg.run.seed if args.seed is None else args.seed
    steps = cfg.run.bert_steps if args.steps is None else args.steps
    corpus = load_corpus(args.corpus)
    check_vocab(corpus, cfg.bert.vocab_size)
    template = read_template(args.template)
    res = train_bert(corpus, template, cfg.bert, steps, seed)
    out = Path(args.out)
    save_model(out, res.model, "bert")
    write_loss_log(Path(f"{out}.log.csv"), res.losses)
    args._cfg, args._seed = effective(cfg, seed, bert_steps=steps), seed
    if res.losses:
        print(f"bert: {steps} steps, loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}")


def cmd_tts_train(args) -> None:
    cfg = load_config(args.config, args.profile)
    seed = cfg.run.seed if args.seed is None else args.seed
    steps = cfg.run.tts_steps if args.steps is None else args.steps
    bert = load_bert(args.bert)
    tcfg = cfg.tts
    if tcfg.dynamic_embedding and bert is None:
        raise ConfigError("[tts] dynamic_embedding = true needs --bert <ckpt>")
    if not tcfg.dynamic_embedding and bert is not None:
        print("note: --bert given but dynamic_embedding is false; BERT unused", file=sys.stderr)
    corpus = load_corpus(args.corpus)
    check_vocab(corpus, tcfg.vocab_size, tcfg.speaker_count)
    res = train_tts(corpus, bert, tcfg, steps, seed)
    out = Path(args.out)
    save_model(out, res.model, "tts")
    write_loss_log(Path(f"{out}.log.csv"), res.losses)
    args._cfg, args._seed = effective(cfg, seed, tts_steps=steps), seed
    if res.losses:
        print(f"tts: {steps} steps, loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}")


def cmd_tts_synth(args) -> None:
    model = load_tts(args.model)
    bert = load_bert(args.bert)
    text = Path(args.text).read_text(encoding="utf-8")
    if text.split() and text.split()[0].startswith("spk:"):
        _, tokens = parse_text(text)
    else:
        tokens = tuple(int(t) for t in text.split())
    res = synthesize(model, bert, tokens, args.speaker)
    write_mel(args.out, MelSpectrogram(res.mel))
    flag = " (truncated at max_decode_frames)" if res.truncated else ""
    print(f"synthesized {res.mel.shape[0]} frames, {len(res.state.refreshes)} embedding refreshes{flag}")


def cmd_eval_compare(args) -> None:
    from .evaluation import ComparisonPair, compare, estimate_f0, write_contour, write_report
    ref = {u.id: u for u in load_corpus(args.ref)}
    hyp_dir = Path(args.hyp)
    pairs = []
    for uid in sorted(ref):
        mel_path = hyp_dir / f"{uid}.mel"
        if not mel_path.exists():
            continue
        hyp = read_mel(mel_path)
        align_path = hyp_dir / f"{uid}.align"
        wav_path = hyp_dir / f"{uid}.wav"
        pairs.append(ComparisonPair(
            ref[uid], hyp.frames,
            load_alignment(align_path.read_bytes(), hyp.T) if align_path.exists() else None,
            read_wav(wav_path) if wav_path.exists() else None))
    if not pairs:
        raise ValueError(f"no utterance in {args.hyp} matches the reference corpus")
    report = compare(pairs, pooling=args.pooling)
    write_report(args.out, report)
    if args.contours:
        cdir = Path(args.contours)
        cdir.mkdir(parents=True, exist_ok=True)
        for p in pairs:
            if p.ref.waveform is not None and p.hyp_waveform is not None:
                write_contour(cdir / f"{p.ref.id}.csv", estimate_f0(p.ref.waveform), estimate_f0(p.hyp_waveform))
    for name, m in report.factors.items():
        print(f"{name:9s} corr={m.correlation} mse={m.mse} n={m.count} {';'.join(m.flags)}")


def cmd_selfcheck_grad(args) -> int:
    from .gradcheck import run_all
    results = run_all(seed=args.seed)
    for name, err in results.items():
        print(f"{name:24s} max_rel_err={err:.3e}")
    worst = max(results.values())
    ok = worst < 1e-5
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} < 1e-5)")
    return 0 if ok else 1


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segbert", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic toy corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--utterances", type=int, default=8)
    g.add_argument("--mode", choices=PROSODY_MODES, default="independent")
    g.add_argument("--vocab", type=int, default=12)
    g.add_argument("--syllables", type=int, default=6)
    g.add_argument("--n-mels", type=int, default=8)
    g.add_argument("--speakers", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen, command_path="gen")

    t = sub.add_parser("template", help="acoustic segment template")
    tsub = t.add_subparsers(dest="sub", required=True)
    tb = tsub.add_parser("build")
    tb.add_argument("--corpus", required=True)
    tb.add_argument("--out", required=True)
    tb.set_defaults(func=cmd_template_build, command_path="template build")

    b = sub.add_parser("bert", help="speech BERT")
    bsub = b.add_subparsers(dest="sub", required=True)
    bp = bsub.add_parser("pretrain")
    bp.add_argument("--corpus", required=True)
    bp.add_argument("--template", required=True)
    bp.add_argument("--config")
    bp.add_argument("--profile", choices=("desk", "paper"), default="desk")
    bp.add_argument("--steps", type=int)
    bp.add_argument("--seed", type=int)
    bp.add_argument("--out", required=True)
    bp.set_defaults(func=cmd_bert_pretrain, command_path="bert pretrain")

    s = sub.add_parser("tts", help="Transformer TTS")
    ssub = s.add_subparsers(dest="sub", required=True)
    st = ssub.add_parser("train")
    st.add_argument("--corpus", required=True)
    st.add_argument("--bert", default="none")
    st.add_argument("--config")
    st.add_argument("--profile", choices=("desk", "paper"), default="desk")
    st.add_argument("--steps", type=int)
    st.add_argument("--seed", type=int)
    st.add_argument("--out", required=True)
    st.set_defaults(func=cmd_tts_train, command_path="tts train")
    sy = ssub.add_parser("synth")
    sy.add_argument("--model", required=True)
    sy.add_argument("--bert", default="none")
    sy.add_argument("--text", required=True)
    sy.add_argument("--speaker", type=int, default=0)
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_tts_synth, command_path="tts synth")

    e = sub.add_parser("eval", help="objective prosody metrics")
    esub = e.add_subparsers(dest="sub", required=True)
    ec = esub.add_parser("compare")
    ec.add_argument("--ref", required=True)
    ec.add_argument("--hyp", required=True)
    ec.add_argument("--out", required=True)
    ec.add_argument("--pooling", choices=("concat", "per_utt"), default="concat")
    ec.add_argument("--contours", help="directory for per-utterance F0 contour CSVs")
    ec.set_defaults(func=cmd_eval_compare, command_path="eval compare")

    c = sub.add_parser("selfcheck", help="internal consistency checks")
    csub = c.add_subparsers(dest="sub", required=True)
    cg = csub.add_parser("grad")
    cg.add_argument("--seed", type=int, default=0)
    cg.set_defaults(func=cmd_selfcheck_grad, command_path="selfcheck grad")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    args._cfg, args._seed = None, getattr(args, "seed", None)
    started = time.time()
    out = Path(args.out) if getattr(args, "out", None) else None
    try:
        if out is None:
            code = args.func(args)
            return int(code or 0)
        with output_lock(out):
            code = args.func(args)
            write_manifest(out, args, args._cfg, args._seed, started)
        return int(code or 0)
    except (ValueError, OSError, RuntimeError, KeyError, IndexError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
