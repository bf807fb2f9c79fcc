"""Command-line front end.

Every failure prints one line ``ErrorClass: message`` on stderr and exits with
the class's exit code, so scripts can dispatch on the prefix.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .audio import FeatureConfig
from .checkpoint import load_checkpoint
from .config import load_config, write_normalized
from .data import load_corpus, read_manifest
from .errors import DraftError, UsageError
from .experiments import STANDARD_DADA, cmd_run, format_millions, report, saft_reference, sweep_dada, adapter_count_rows
from .model import PRESETS, count_model_params
from .params import Group
from .scoring import write_scoring_report
from .stages import HEAD_FOR, decode, restore_model
from .text import Tokenizer

INTERNAL_EXIT = 70


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _config(args):
    if not args.config:
        raise UsageError(f"{args.command} needs --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _out(args) -> Path:
    if args.out:
        return Path(args.out)
    stem = Path(args.config).stem if args.config else args.command
    return Path("runs") / stem


def do_validate(args) -> int:
    cfg = _config(args)
    path = write_normalized(cfg, _out(args))
    print(f"ok: {cfg.regime} config valid; normalized echo at {path}")
    return 0


def do_run(args) -> int:
    cfg = _config(args)
    row, _, _ = cmd_run(cfg, _out(args))
    print("\t".join(f"{k}={v}" for k, v in row.items()))
    return 0


def do_sweep(args) -> int:
    d_adas = _int_list(args.d_ada) if args.d_ada else list(STANDARD_DADA)
    if args.count_only:
        cfg = _config(args) if args.config else None
        model = PRESETS[args.preset]() if cfg is None else cfg.model
        text = sweep_dada(cfg, d_adas, _out(args), count_only=True, model_config=model)
    else:
        text = sweep_dada(_config(args), d_adas, _out(args))
    print(text, end="")
    return 0


def do_report(args) -> int:
    print(report(args.run_dirs, args.out), end="")
    return 0


def do_count(args) -> int:
    if args.config:
        cfg = _config(args)
        model, objective = cfg.model, cfg.objective
    else:
        model, objective = PRESETS[args.preset](), "apc"
    d_adas = _int_list(args.d_ada) if args.d_ada else list(STANDARD_DADA)
    ref = saft_reference(model, objective)
    lines = [f"preset={args.preset if not args.config else 'config'} d_model={model.d_model} "
             f"adapters={model.n_adapters} saft_reference={ref} ({format_millions(ref)})"]
    lines.append(f"group Backbone: {count_model_params(model, groups=[Group.BACKBONE])}")
    lines.append(f"group SslHead: {count_model_params(model, HEAD_FOR[objective], groups=[Group.SSL_HEAD])}")
    lines.append(f"group AsrHead: {count_model_params(model, 'asr', groups=[Group.ASR_HEAD])}")
    lines.append("d_ada\tupdated_params\trounded\trelative")
    for r in adapter_count_rows(model, d_adas, objective):
        lines.append(f"{r['d_ada']}\t{r['total']}\t{format_millions(r['total'])}\t{100 * r['relative']:.1f}%")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "count_params.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def do_decode(args) -> int:
    if not args.checkpoint:
        raise UsageError("decode needs --checkpoint")
    cfg = _config(args) if args.config else None
    manifest = args.manifest or (cfg.get("data", "test") if cfg else "")
    if not manifest:
        raise UsageError("decode needs --manifest (or a config with [data] test)")
    ckpt = load_checkpoint(args.checkpoint, expected_d_model=cfg.model.d_model if cfg else None)
    model = restore_model(ckpt, cfg.model if cfg else None)
    tok = Tokenizer()
    utts = load_corpus(manifest, tok, cfg.features if cfg else FeatureConfig())
    hyps = decode(model, utts)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "decode.tsv", "w", encoding="utf-8") as fh:
        for u, h in zip(utts, hyps):
            fh.write(f"{u.id}\t{tok.detokenize(h)}\n")
    print(f"decoded {len(utts)} utterances to {out / 'decode.tsv'}")
    return 0


def do_score(args) -> int:
    if not args.manifest or not args.hyp:
        raise UsageError("score needs --manifest (references) and --hyp (decode output)")
    tok = Tokenizer()
    refs = {uid: text for uid, _, text in read_manifest(args.manifest)}
    hyps = {}
    for lineno, line in enumerate(Path(args.hyp).read_text(encoding="utf-8").splitlines(), 1):
        uid, _, text = line.partition("\t")
        if uid not in refs:
            raise UsageError(f"{args.hyp}:{lineno}: id {uid!r} is not in the reference manifest")
        hyps[uid] = text
    ids = [u for u in refs if u in hyps]
    missing = [u for u in refs if u not in hyps]
    if missing:
        raise UsageError(f"no hypothesis for {len(missing)} reference ids, first {missing[0]!r}")
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    r, h = [refs[u] for u in ids], [hyps[u] for u in ids]
    rate = write_scoring_report(out / "score.tsv", ids, r, h, [tok.tokenize(x) for x in r],
                                [tok.tokenize(x) for x in h])
    print(f"WER={rate:.6f} over {len(ids)} utterances; report at {out / 'score.tsv'}")
    return 0


COMMANDS = {"validate": do_validate, "run": do_run, "sweep-dada": do_sweep, "report": do_report,
            "count-params": do_count, "decode": do_decode, "score": do_score}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="draftlab", description="DRAFT adaptation laboratory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--out")
        s.add_argument("--seed", type=int)
        if name in ("sweep-dada", "count-params"):
            s.add_argument("--preset", choices=sorted(PRESETS), default="paper" if name == "count-params" else "desk")
            s.add_argument("--d-ada", dest="d_ada")
        if name == "sweep-dada":
            s.add_argument("--count-only", action="store_true")
        if name == "report":
            s.add_argument("run_dirs", nargs="*")
        if name in ("decode", "score"):
            s.add_argument("--manifest")
        if name == "decode":
            s.add_argument("--checkpoint")
        if name == "score":
            s.add_argument("--hyp")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise UsageError("missing command; one of " + ", ".join(COMMANDS))
        return COMMANDS[args.command](args)
    except DraftError as exc:
        print(f"{type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"OSError: {' '.join(str(exc).split())}", file=sys.stderr)
        return 74
    except Exception as exc:  # last resort, still one parseable line
        print(f"InternalError: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return INTERNAL_EXIT


if __name__ == "__main__":
    sys.exit(main())
