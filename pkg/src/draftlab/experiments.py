"""Experiment recipes: build corpora and plans from a config, run a regime, write artifacts."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint
from .config import ExperimentConfig, StageSettings, write_normalized
from .data import Utterance, load_corpus, second_target_spec, synth_generate, two_domain_specs
from .errors import ConfigurationError, ReportConflictError, UsageError
from .model import ModelConfig, count_model_params
from .params import Group
from .schedules import NoamConfig, TriStageConfig
from .scoring import write_scoring_report
from .ssl import MaskSpec, PseudoLabelCodebook, kmeans_fit
from .stages import (HEAD_FOR, RunReport, StagePlan, adapt_with_adapters, cross_transfer, decode, pretrain,
                     restore_model, run_adapter_finetune, run_baseline, run_draft, run_finetune_only, run_saft)
from .text import Tokenizer

log = logging.getLogger(__name__)

NC_THRESHOLD = 0.95
SUMMARY_FIELDS = ("regime", "objective", "corpus", "seed", "d_ada", "dev_wer", "test_wer",
                  "updated_params_total", "updated_params_relative", "converged")
STANDARD_DADA = (64, 128, 256, 512, 1024, 2048)


@dataclass
class Corpora:
    name: str
    source: list[Utterance]
    adapt: list[Utterance]
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]


def build_corpora(cfg: ExperimentConfig) -> Corpora:
    d = cfg.values["data"]
    if d["synthetic"]:
        s = cfg.values["synthetic"]
        seed = cfg.seed if s["seed"] is None else s["seed"]
        src, tgt = two_domain_specs(seed, s["source_noise"], s["target_noise"])
        adapt_spec = second_target_spec(seed, s["target_noise"]) if cfg.is_cross else tgt
        return Corpora(
            "synthetic",
            synth_generate(src, s["n_source"], prefix="source"),
            synth_generate(adapt_spec.with_seed(seed + 1000), s["n_adapt"], prefix="adapt"),
            synth_generate(tgt, s["n_train"], prefix="train"),
            synth_generate(tgt.with_seed(seed + 2000), s["n_dev"], prefix="dev"),
            synth_generate(tgt.with_seed(seed + 3000), s["n_test"], prefix="test"),
        )
    tok, fc = Tokenizer(), cfg.features

    def load(key):
        return load_corpus(d[key], tok, fc) if d[key] else []

    train = load("train")
    return Corpora(Path(d["train"]).stem, load("source"), load("adapt") or train, train, load("dev"), load("test"))


def scheduler_for(st: StageSettings, d_model: int) -> NoamConfig | TriStageConfig:
    if st.scheduler == "noam":
        return NoamConfig(st.factor, st.warmup_steps, d_model)
    # a linear decay hits zero one step after the last update, so every update has lr > 0
    total = st.steps + 1 if st.final_ratio is None else st.steps
    return TriStageConfig(st.warmup_steps, st.hold_steps, total, st.peak_lr, st.final_ratio)


def fit_codebook(cfg: ExperimentConfig, source: Sequence[Utterance]) -> PseudoLabelCodebook:
    """k-means on source frames, fitted once and reused for adaptation."""
    frames = np.concatenate([u.features for u in source], axis=0)
    ssl = cfg.values["ssl"]
    if frames.shape[0] > ssl["kmeans_frames"]:
        idx = np.random.default_rng(cfg.seed).choice(frames.shape[0], ssl["kmeans_frames"], replace=False)
        frames = frames[np.sort(idx)]
    return kmeans_fit(frames, cfg.model.n_clusters, ssl["kmeans_iters"], seed=cfg.seed)


def build_plans(cfg: ExperimentConfig, corpora: Corpora, codebook=None) -> dict[str, StagePlan]:
    ssl = cfg.values["ssl"]
    plans = {}
    specs = {"pretrain": (corpora.source, cfg.objective, {Group.BACKBONE, Group.SSL_HEAD}, 0),
             "adapt": (corpora.adapt, cfg.objective, None, 1),
             "finetune": (corpora.train, "ctc", None, 2)}
    for name, st in cfg.stages.items():
        corpus, objective, groups, offset = specs[name]
        if name == "adapt":
            groups = {Group.ADAPTER} if cfg.uses_adapters else {Group.BACKBONE, Group.SSL_HEAD}
        elif name == "finetune":
            groups = st.trainable
        seed = cfg.seed + offset
        plans[name] = StagePlan(name, corpus, objective, groups, st.steps, st.batch_size,
                                scheduler_for(st, cfg.model.d_model), seed=seed, log_every=st.log_every,
                                augment=st.augment, mask=MaskSpec(ssl["mask_prob"], ssl["mask_span"], seed),
                                n_negatives=ssl["n_negatives"], temperature=ssl["temperature"],
                                codebook=codebook, corpus_name=corpora.name)
    return plans


def saft_reference(config: ModelConfig, objective: str = "apc") -> int:
    """Updated-parameter count of SAFT adaptation: the whole pretrained model."""
    return count_model_params(config, HEAD_FOR[objective])


def updated_params(cfg: ExperimentConfig) -> int:
    """Parameters trained in the adaptation stage, or in finetuning for regimes without one."""
    model, head = cfg.model, HEAD_FOR[cfg.objective]
    if cfg.regime in ("draft_self", "draft_cross"):
        return count_model_params(model, head, cfg.d_ada, [Group.ADAPTER])
    if cfg.regime in ("saft_self", "saft_cross"):
        return saft_reference(model, cfg.objective)
    groups = cfg.stages["finetune"].trainable
    return count_model_params(model, "asr", cfg.d_ada if cfg.uses_adapters else None, groups)


# -- running -----------------------------------------------------------------------
def _pretrained_input(cfg: ExperimentConfig):
    path = cfg.get("experiment", "pretrained")
    if not path:
        return None
    return restore_model(load_checkpoint(path, expected_d_model=cfg.model.d_model), cfg.model)


def execute(cfg: ExperimentConfig, out_dir: str | Path, corpora: Corpora | None = None, pretrained=None):
    """Run the regime's stage sequence; returns (final model, report, corpora)."""
    out_dir = Path(out_dir)
    corpora = corpora or build_corpora(cfg)
    codebook = None
    if cfg.objective == "masked" and cfg.regime != "baseline":
        if not corpora.source:
            raise ConfigurationError("masked prediction needs a source corpus to fit the k-means codebook")
        codebook = fit_codebook(cfg, corpora.source)
    plans = build_plans(cfg, corpora, codebook)
    pre_plan = plans.get("pretrain")
    if pretrained is None:
        pretrained = _pretrained_input(cfg)
    if pretrained is not None:
        pre_plan = None
    ft = plans["finetune"]
    mismatch = cfg.get("experiment", "allow_objective_mismatch")
    r, seed, model_cfg = cfg.regime, cfg.seed, cfg.model
    if r == "baseline":
        return (*run_baseline(ft, model_cfg, seed, out_dir), corpora)
    if pretrained is None:
        pretrained, res = pretrain(model_cfg, pre_plan, seed, out_dir)
        pre_stage = [res]
    else:
        pre_stage = []
    if r == "finetune":
        model, rep = run_finetune_only(None, ft, model_cfg, seed, pretrained, out_dir)
    elif r == "adapter_finetune":
        model, rep = run_adapter_finetune(pretrained, cfg.d_ada, ft, model_cfg, out_dir)
    elif r in ("saft_self", "saft_cross"):
        model, rep = run_saft(plans.get("pretrain"), plans["adapt"], ft, model_cfg, seed, pretrained, out_dir)
    elif r == "draft_self":
        model, rep = run_draft(None, plans["adapt"], ft, cfg.d_ada, model_cfg, seed, pretrained, out_dir,
                               allow_objective_mismatch=mismatch)
    else:
        _, res = adapt_with_adapters(pretrained.clone(), plans["adapt"], cfg.d_ada, out_dir)
        model, rep = cross_transfer(res.checkpoint, ft, model_cfg, out_dir)
        rep.stages.insert(0, res)
    rep = RunReport(r, pre_stage + rep.stages, rep.counters, rep.notes)
    return model, rep, corpora


def _score_split(model, utts, split: str, out_dir: Path) -> float | None:
    if not utts:
        return None
    tok = Tokenizer()
    hyps = decode(model, utts)
    with open(out_dir / f"{split}.decode.tsv", "w", encoding="utf-8") as fh:
        for u, h in zip(utts, hyps):
            fh.write(f"{u.id}\t{tok.detokenize(h)}\n")
    refs = [u.transcript for u in utts]
    return write_scoring_report(out_dir / f"{split}.score.tsv", [u.id for u in utts],
                                [tok.detokenize(r) for r in refs], [tok.detokenize(h) for h in hyps], refs, hyps)


def _fmt_rate(v: float | None) -> str:
    return "-" if v is None else f"{v:.6f}"


def summary_row(cfg: ExperimentConfig, corpus: str, dev: float | None, test: float | None) -> dict[str, str]:
    total = updated_params(cfg)
    ref = saft_reference(cfg.model, cfg.objective)
    worst = max(v for v in (dev, test) if v is not None) if (dev, test) != (None, None) else 0.0
    return {
        "regime": cfg.regime, "objective": cfg.objective, "corpus": corpus, "seed": str(cfg.seed),
        "d_ada": "-" if cfg.d_ada is None else str(cfg.d_ada),
        "dev_wer": _fmt_rate(dev), "test_wer": _fmt_rate(test),
        "updated_params_total": str(total), "updated_params_relative": f"{total / ref:.6f}",
        "converged": "NC" if (test if test is not None else worst) >= NC_THRESHOLD else "ok",
    }


def write_summary(out_dir: Path, row: dict[str, str]) -> Path:
    (out_dir / "summary.header.tsv").write_text("\t".join(SUMMARY_FIELDS) + "\n", encoding="utf-8")
    path = out_dir / "summary.tsv"
    path.write_text("\t".join(row[k] for k in SUMMARY_FIELDS) + "\n", encoding="utf-8")
    return path


def read_summary(run_dir: str | Path) -> dict[str, str]:
    run_dir = Path(run_dir)
    path, header = run_dir / "summary.tsv", run_dir / "summary.header.tsv"
    if not path.is_file() or not header.is_file():
        raise UsageError(f"{run_dir} holds no summary record (summary.tsv + summary.header.tsv)")
    keys = header.read_text(encoding="utf-8").rstrip("\n").split("\t")
    vals = path.read_text(encoding="utf-8").rstrip("\n").split("\t")
    if len(keys) != len(vals):
        raise UsageError(f"{path}: {len(vals)} fields but the header names {len(keys)}")
    return dict(zip(keys, vals))


def cmd_run(cfg: ExperimentConfig, out_dir: str | Path, corpora: Corpora | None = None, pretrained=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_normalized(cfg, out_dir)
    model, report, corpora = execute(cfg, out_dir, corpora, pretrained)
    dev = _score_split(model, corpora.dev, "dev", out_dir)
    test = _score_split(model, corpora.test, "test", out_dir)
    row = summary_row(cfg, corpora.name, dev, test)
    write_summary(out_dir, row)
    if report.notes:
        (out_dir / "notes.txt").write_text("\n".join(report.notes) + "\n", encoding="utf-8")
    return row, model, report


# -- parameter accounting and sweeps ----------------------------------------------
def adapter_count_rows(config: ModelConfig, d_adas: Sequence[int], objective: str = "apc") -> list[dict]:
    ref = saft_reference(config, objective)
    rows = []
    for d in d_adas:
        total = count_model_params(config, HEAD_FOR[objective], d, [Group.ADAPTER])
        rows.append({"d_ada": d, "total": total, "relative": total / ref})
    totals = [r["total"] for r in rows]
    order = np.argsort(list(d_adas), kind="stable")
    assert all(totals[order[i]] < totals[order[i + 1]] for i in range(len(order) - 1)), \
        "updated-parameter count must increase with d_ada"
    return rows


def format_millions(n: int) -> str:
    return f"{n / 1e6:.1f}M"


def _aligned(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip() for r in [header, *rows]]
    return "\n".join(lines) + "\n"


def _tsv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    return "".join("\t".join(str(x) for x in r) + "\n" for r in [header, *rows])


SWEEP_HEADER = ("d_ada", "dev_wer", "test_wer", "updated_params", "updated_params_total", "relative")


def sweep_dada(cfg: ExperimentConfig | None, d_adas: Sequence[int], out_dir: str | Path,
               count_only: bool = False, model_config: ModelConfig | None = None) -> str:
    """One DRAFT run per d_ada (stage 1 shared) and one table of error rates and updated-parameter counts."""
    if not d_adas:
        raise UsageError("sweep-dada needs at least one d_ada value")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = model_config or cfg.model
    objective = cfg.objective if cfg is not None else "apc"
    counts = adapter_count_rows(config, d_adas, objective)
    results: dict[int, tuple[str, str]] = {}
    if not count_only:
        if cfg is None or not cfg.regime.startswith("draft"):
            raise ConfigurationError("sweep-dada trains DRAFT runs; the config regime must be draft_self or draft_cross")
        corpora = build_corpora(cfg)
        pretrained = None
        if "pretrain" in cfg.stages:
            plans = build_plans(cfg, corpora, fit_codebook(cfg, corpora.source) if cfg.objective == "masked" else None)
            pretrained, _ = pretrain(cfg.model, plans["pretrain"], cfg.seed, out_dir / "pretrain")
        for d in d_adas:
            sub = cfg.with_overrides(d_ada=d)
            row, _, _ = cmd_run(sub, out_dir / f"dada_{d}", corpora, pretrained)
            results[d] = (row["dev_wer"], row["test_wer"])
    rows = []
    for c in counts:
        dev, test = results.get(c["d_ada"], ("-", "-"))
        rows.append((str(c["d_ada"]), dev, test, str(c["total"]), format_millions(c["total"]),
                     f"{100 * c['relative']:.0f}%"))
    (out_dir / "sweep.tsv").write_text(_tsv(SWEEP_HEADER, rows), encoding="utf-8")
    text = _aligned(SWEEP_HEADER, rows)
    (out_dir / "sweep.txt").write_text(text, encoding="utf-8")
    return text


REPORT_HEADER = ("objective", "corpus", "regime", "d_ada", "dev_wer", "test_wer", "updated_params", "relative")


def report(run_dirs: Sequence[str | Path], out_dir: str | Path | None = None) -> str:
    """Merge summary records into one table grouped by objective, corpus and regime."""
    if not run_dirs:
        raise UsageError("report needs at least one run directory")
    cells: dict[tuple, tuple[tuple, str]] = {}
    for d in run_dirs:
        s = read_summary(d)
        key = (s["objective"], s["corpus"], s["regime"], s["d_ada"], s["seed"])
        nc = s["converged"] == "NC"
        value = ("NC" if nc else s["dev_wer"], "NC" if nc else s["test_wer"],
                 s["updated_params_total"], f"{100 * float(s['updated_params_relative']):.1f}%")
        if key in cells and cells[key][0] != value:
            raise ReportConflictError(
                f"conflicting results for {'/'.join(key)} in {cells[key][1]} and {d}")
        cells.setdefault(key, (value, str(d)))
    regime_order = {r: i for i, r in enumerate(("baseline", "finetune", "adapter_finetune", "saft_self",
                                                "draft_self", "saft_cross", "draft_cross"))}
    keys = sorted(cells, key=lambda k: (k[0], k[1], regime_order.get(k[2], 99), k[2],
                                        int(k[3]) if k[3].isdigit() else -1, int(k[4])))
    header = REPORT_HEADER + (("seed",) if len({k[4] for k in keys}) > 1 else ())
    rows = []
    for k in keys:
        row = (*k[:4], *cells[k][0])
        rows.append(row + ((k[4],) if len(header) > len(REPORT_HEADER) else ()))
    text = _aligned(header, rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text, encoding="utf-8")
        (out / "report.tsv").write_text(_tsv(header, rows), encoding="utf-8")
    return text

